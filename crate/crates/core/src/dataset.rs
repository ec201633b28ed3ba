//! Recordings to network-ready sequences: windowing, optional expansion and
//! inversion, downsampling, normalization and grouping geometry.
//!
//! Every window draws its points from its own RNG seeded by
//! `(seed, recording, window, inverted)`, so preprocessing is reproducible
//! and independent of evaluation order and thread count.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::event::{EventStream, PupilLabel, Resolution, Window};
use crate::io::{find_recordings, load_events, load_labels, RecordingPaths};
use crate::model::{ModelConfig, SampleInput};
use crate::pointops::window_points;
use crate::windowing::{augment_invert, expand_adaptive, make_sequences, split_fixed, SequenceMode, WindowingConfig};

#[derive(Clone, Debug)]
pub struct Recording {
    pub name: String,
    pub stream: EventStream,
    pub labels: Vec<PupilLabel>,
}

impl Recording {
    /// Loads a recording; its span covers both the events and the label track.
    pub fn load(paths: &RecordingPaths, resolution: Option<Resolution>) -> Result<(Self, usize)> {
        let loaded = load_events(&paths.events, paths.format, resolution)?;
        let labels = load_labels(&paths.labels)?;
        let name = paths
            .labels
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "recording".to_string(), |n| n.to_string_lossy().into_owned());
        let label_end = labels.last().map_or(0, |l| l.t as u64);
        let duration = loaded.stream.duration_us().max(label_end);
        Ok((Self { name, stream: loaded.stream.with_duration(duration), labels }, loaded.reordered))
    }
}

/// Loads every recording under `dir`, sorted by path.
pub fn load_dir(dir: &Path, resolution: Option<Resolution>) -> Result<Vec<Recording>> {
    find_recordings(dir)?.iter().map(|p| Recording::load(p, resolution).map(|(r, _)| r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleInfo {
    pub t_center: f64,
    /// Events in the window that was sampled (after any expansion).
    pub events: usize,
    /// Events in the fixed window before expansion.
    pub nominal_events: usize,
    pub label_valid: bool,
    /// False when the window was empty and its points are sentinels.
    pub points_valid: bool,
}

#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub recording: usize,
    pub inputs: Vec<SampleInput>,
    /// Normalized `(x, y)` targets.
    pub targets: Vec<[f64; 2]>,
    /// Rows that contribute to loss and metrics: real (not padding) with a valid label.
    pub mask: Vec<bool>,
    /// False for padding rows.
    pub real: Vec<bool>,
    pub info: Vec<SampleInfo>,
}

impl PreparedSequence {
    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions<'a> {
    pub windowing: &'a WindowingConfig,
    pub model: &'a ModelConfig,
    pub mode: SequenceMode,
    pub seed: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn window_seed(seed: u64, recording: usize, window: usize, inverted: bool) -> u64 {
    mix(mix(mix(seed) ^ recording as u64) ^ ((window as u64) << 1 | u64::from(inverted)))
}

/// Fixed windows of a stream, expanded when the config asks for it.
/// Returns `(window, nominal event count)` pairs.
pub fn windows_for(stream: &EventStream, labels: &[PupilLabel], cfg: &WindowingConfig, adaptive: bool) -> Vec<(Window, usize)> {
    let fixed = split_fixed(stream, labels, cfg);
    fixed
        .into_iter()
        .map(|w| {
            let n = w.len();
            if adaptive { (expand_adaptive(&w, stream, cfg), n) } else { (w, n) }
        })
        .collect()
}

fn prepare_windows(
    windows: &[(Window, usize)],
    recording: usize,
    inverted: bool,
    opt: &PrepareOptions<'_>,
) -> Result<Vec<PreparedSequence>> {
    let res = windows.first().map(|(w, _)| w.resolution);
    let samples = windows
        .par_iter()
        .enumerate()
        .map(|(i, (w, nominal))| {
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed(opt.seed, recording, i, inverted));
            let (points, points_valid) = window_points(w, opt.model.points, opt.model.include_polarity, &mut rng);
            let input = SampleInput::new(points, opt.model)?;
            let info = SampleInfo {
                t_center: w.nominal_center,
                events: w.len(),
                nominal_events: *nominal,
                label_valid: w.label.valid,
                points_valid,
            };
            Ok((input, [w.label.x, w.label.y], info))
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(res) = res else { return Ok(Vec::new()) };
    let (w, h) = (f64::from(res.width), f64::from(res.height));
    let indices: Vec<usize> = (0..samples.len()).collect();
    Ok(make_sequences(&indices, opt.windowing.seq_len, opt.mode)
        .into_iter()
        .map(|seq| {
            let inputs = seq.items.iter().map(|&i| samples[i].0.clone()).collect();
            let targets = seq.items.iter().map(|&i| [samples[i].1[0] / w, samples[i].1[1] / h]).collect();
            let info: Vec<SampleInfo> = seq.items.iter().map(|&i| samples[i].2).collect();
            let mask = seq.mask.iter().zip(&info).map(|(&m, inf)| m && inf.label_valid).collect();
            PreparedSequence { recording, inputs, targets, mask, real: seq.mask.clone(), info }
        })
        .collect())
}

/// Sequences of one recording; in training mode with inversion enabled the
/// time-inverted recording's sequences follow the originals.
pub fn prepare_recording(rec: &Recording, index: usize, opt: &PrepareOptions<'_>) -> Result<Vec<PreparedSequence>> {
    let cfg = opt.windowing;
    let windows = windows_for(&rec.stream, &rec.labels, cfg, cfg.adaptive);
    let mut out = prepare_windows(&windows, index, false, opt)?;
    if opt.mode == SequenceMode::Train && cfg.augment_invert {
        let fixed = split_fixed(&rec.stream, &rec.labels, cfg);
        let (inv_stream, inv_fixed) = augment_invert(&fixed, &rec.stream);
        let inv: Vec<(Window, usize)> = inv_fixed
            .into_iter()
            .map(|w| {
                let n = w.len();
                if cfg.adaptive { (expand_adaptive(&w, &inv_stream, cfg), n) } else { (w, n) }
            })
            .collect();
        out.extend(prepare_windows(&inv, index, true, opt)?);
    }
    Ok(out)
}

pub fn prepare_all(recs: &[Recording], opt: &PrepareOptions<'_>) -> Result<Vec<PreparedSequence>> {
    let mut out = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        out.extend(prepare_recording(r, i, opt)?);
    }
    Ok(out)
}
