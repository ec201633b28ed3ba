//! Event and label files.
//!
//! * Event CSV: header `t_us,x,y,p`, one event per row, `p` in `{0, 1}` for
//!   negative / positive polarity. CSV carries no resolution; the caller
//!   supplies it.
//! * Binary events: magic `EVC1`, `u32` width, `u32` height, `u64` count,
//!   then `count` records of `(u64 t_us, u16 x, u16 y, i8 p)`, little-endian.
//! * Label CSV: header `t_us,x,y,valid`, `valid` in `{0, 1}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{validate_stream, Event, EventStream, Polarity, PupilLabel, Resolution};

pub const BINARY_MAGIC: &[u8; 4] = b"EVC1";
const BINARY_RECORD: usize = 8 + 2 + 2 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    #[default]
    Csv,
    Binary,
}

impl EventFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "bin",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(EventFormat::Csv),
            "bin" | "evc" => Some(EventFormat::Binary),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedEvents {
    pub stream: EventStream,
    /// Number of events that arrived earlier than their predecessor and were re-sorted.
    pub reordered: usize,
}

/// Reads an event file and returns a validated, time-sorted stream.
///
/// `resolution` is required for CSV; for binary files it must match the
/// header when given.
pub fn load_events(path: impl AsRef<Path>, format: EventFormat, resolution: Option<Resolution>) -> Result<LoadedEvents> {
    let path = path.as_ref();
    let (mut events, resolution) = match format {
        EventFormat::Csv => {
            let res = resolution.ok_or_else(|| Error::Invalid {
                path: path.into(),
                msg: "CSV event files need an explicit sensor resolution".into(),
            })?;
            (read_events_csv(path)?, res)
        }
        EventFormat::Binary => {
            let (events, res) = read_events_binary(path)?;
            if let Some(expected) = resolution {
                if expected != res {
                    return Err(Error::Invalid {
                        path: path.into(),
                        msg: format!("file resolution {res} differs from configured {expected}"),
                    });
                }
            }
            (events, res)
        }
    };
    let reordered = events.windows(2).filter(|w| w[1].t < w[0].t).count();
    if reordered > 0 {
        events.sort_by_key(|e| e.t);
    }
    let stream = EventStream::new(events, resolution);
    if let Some(v) = validate_stream(&stream).first() {
        return Err(Error::Invalid { path: path.into(), msg: v.to_string() });
    }
    Ok(LoadedEvents { stream, reordered })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { path: path.into(), line, msg: e.to_string() }
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse { path: path.into(), line, msg: format!("bad {name} value {raw:?}") })
}

fn read_events_csv(path: &Path) -> Result<Vec<Event>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["t_us", "x", "y", "p"])?;
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let t: u64 = field(path, line, &rec, 0, "t_us")?;
        let x: u16 = field(path, line, &rec, 1, "x")?;
        let y: u16 = field(path, line, &rec, 2, "y")?;
        let p: u8 = field(path, line, &rec, 3, "p")?;
        let polarity = match p {
            0 => Polarity::Negative,
            1 => Polarity::Positive,
            _ => return Err(Error::Parse { path: path.into(), line, msg: format!("polarity {p} not in {{0, 1}}") }),
        };
        events.push(Event::new(t, x, y, polarity));
    }
    Ok(events)
}

fn read_events_binary(path: &Path) -> Result<(Vec<Event>, Resolution)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 4 + 4 + 4 + 8];
    r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != BINARY_MAGIC {
        return Err(Error::Invalid { path: path.into(), msg: "missing EVC1 magic".into() });
    }
    let width = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
    let count = usize::try_from(count).map_err(|_| Error::Invalid { path: path.into(), msg: "event count overflows".into() })?;
    let mut events = Vec::with_capacity(count.min(1 << 24));
    let mut rec = [0u8; BINARY_RECORD];
    for i in 0..count {
        r.read_exact(&mut rec).map_err(|_| Error::Invalid {
            path: path.into(),
            msg: format!("truncated: record {i} of {count} missing"),
        })?;
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let polarity = Polarity::from_sign(rec[12] as i8).ok_or_else(|| Error::Invalid {
            path: path.into(),
            msg: format!("record {i}: polarity byte {} not +1/-1", rec[12] as i8),
        })?;
        events.push(Event::new(t, x, y, polarity));
    }
    Ok((events, Resolution::new(width, height)))
}

pub fn write_events(path: impl AsRef<Path>, format: EventFormat, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        match format {
            EventFormat::Csv => {
                writeln!(w, "t_us,x,y,p")?;
                for e in stream.events() {
                    let p = u8::from(e.polarity == Polarity::Positive);
                    writeln!(w, "{},{},{},{}", e.t, e.x, e.y, p)?;
                }
            }
            EventFormat::Binary => {
                let res = stream.resolution();
                w.write_all(BINARY_MAGIC)?;
                w.write_all(&res.width.to_le_bytes())?;
                w.write_all(&res.height.to_le_bytes())?;
                w.write_all(&(stream.len() as u64).to_le_bytes())?;
                for e in stream.events() {
                    w.write_all(&e.t.to_le_bytes())?;
                    w.write_all(&e.x.to_le_bytes())?;
                    w.write_all(&e.y.to_le_bytes())?;
                    w.write_all(&[e.polarity.sign() as u8])?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads labels; timestamps must strictly increase and coordinates be non-negative.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<PupilLabel>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["t_us", "x", "y", "valid"])?;
    let mut labels: Vec<PupilLabel> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let t: u64 = field(path, line, &rec, 0, "t_us")?;
        let x: f64 = field(path, line, &rec, 1, "x")?;
        let y: f64 = field(path, line, &rec, 2, "y")?;
        let valid: u8 = field(path, line, &rec, 3, "valid")?;
        if valid > 1 {
            return Err(Error::Parse { path: path.into(), line, msg: format!("valid flag {valid} not in {{0, 1}}") });
        }
        if !(x >= 0.0 && y >= 0.0) {
            return Err(Error::Parse { path: path.into(), line, msg: format!("negative coordinate ({x}, {y})") });
        }
        if let Some(prev) = labels.last() {
            if t as f64 <= prev.t {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!("timestamp {t} does not increase past {}", prev.t),
                });
            }
        }
        labels.push(PupilLabel { t: t as f64, x, y, valid: valid == 1 });
    }
    Ok(labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[PupilLabel]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "t_us,x,y,valid")?;
        for l in labels {
            writeln!(w, "{},{},{},{}", l.t.round() as u64, l.x, l.y, u8::from(l.valid))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Linear interpolation of the label track at `t`, clamped to the end labels
/// outside the labeled range. `valid` is the AND of the bracketing labels.
pub fn label_at(labels: &[PupilLabel], t: f64) -> PupilLabel {
    assert!(!labels.is_empty(), "label_at needs at least one label");
    let i = labels.partition_point(|l| l.t <= t);
    if i == 0 {
        return PupilLabel { t, ..labels[0] };
    }
    if i == labels.len() {
        return PupilLabel { t, ..labels[i - 1] };
    }
    let (a, b) = (&labels[i - 1], &labels[i]);
    if t == a.t {
        return *a;
    }
    let u = (t - a.t) / (b.t - a.t);
    PupilLabel { t, x: a.x + u * (b.x - a.x), y: a.y + u * (b.y - a.y), valid: a.valid && b.valid }
}

/// One recording on disk: an event file plus a label file.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordingPaths {
    pub events: PathBuf,
    pub format: EventFormat,
    pub labels: PathBuf,
}

pub const EVENTS_STEM: &str = "events";
pub const LABELS_FILE: &str = "labels.csv";

impl RecordingPaths {
    pub fn in_dir(dir: &Path, format: EventFormat) -> Self {
        Self {
            events: dir.join(format!("{EVENTS_STEM}.{}", format.extension())),
            format,
            labels: dir.join(LABELS_FILE),
        }
    }

    /// Recognizes a directory holding `events.csv` or `events.bin` (binary
    /// preferred) next to `labels.csv`.
    pub fn detect(dir: &Path) -> Option<Self> {
        let labels = dir.join(LABELS_FILE);
        if !labels.is_file() {
            return None;
        }
        [EventFormat::Binary, EventFormat::Csv]
            .into_iter()
            .map(|f| Self::in_dir(dir, f))
            .find(|p| p.events.is_file())
    }
}

/// Recordings under `root` (the root itself or any nested directory), sorted by path.
pub fn find_recordings(root: &Path) -> Result<Vec<RecordingPaths>> {
    if !root.is_dir() {
        return Err(Error::Invalid { path: root.into(), msg: "not a directory".into() });
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if let Some(r) = RecordingPaths::detect(&dir) {
            out.push(r);
            continue;
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().is_dir() {
                stack.push(entry.path());
            }
        }
    }
    out.sort_by(|a, b| a.labels.cmp(&b.labels));
    Ok(out)
}
