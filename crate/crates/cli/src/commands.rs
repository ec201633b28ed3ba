use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fapnet::dataset::{load_dir, prepare_all, PrepareOptions, PreparedSequence, Recording};
use fapnet::io::{label_at, load_events, load_labels, write_events, write_labels, EventFormat, RecordingPaths};
use fapnet::metrics::{combine_cdf, combine_density, errors, MetricsReport, Table};
use fapnet::model::{count_params_flops, Network};
use fapnet::synth::synth_generate;
use fapnet::train::{evaluate, fit, pool_trajectory, trajectory, EpochLog, TrajectoryRow};
use fapnet::windowing::SequenceMode;
use fapnet::Resolution;
use fapnet_autodiff::checkpoint::Checkpoint;
use fapnet_autodiff::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{model_differences, Overrides, RunConfig};
use crate::{AnalyzeArgs, Common, CostArgs, EvalArgs, FormatArg, SynthArgs, TrackArgs, TrackHz, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn common_overrides(c: &Common) -> Overrides {
    let mut o = Overrides::default();
    o.opt("", "seed", c.seed.map(|s| s as i64));
    o
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut o = common_overrides(&a.common);
    o.opt("synth", "duration_ms", a.duration_ms);
    let cfg = RunConfig::load(a.common.config.as_deref(), &o)?;
    ensure!(a.recordings > 0, "--recordings must be positive");
    let format = match a.format {
        FormatArg::Csv => EventFormat::Csv,
        FormatArg::Bin => EventFormat::Binary,
    };
    for i in 0..a.recordings {
        let dir = if a.recordings == 1 { a.common.out.clone() } else { a.common.out.join(format!("rec{i:03}")) };
        create_dir(&dir)?;
        let synth = fapnet::synth::SynthConfig { seed: cfg.synth.seed.wrapping_add(i as u64), ..cfg.synth.clone() };
        let out = synth_generate(&synth)?;
        let paths = RecordingPaths::in_dir(&dir, format);
        write_events(&paths.events, format, &out.stream)?;
        write_labels(&paths.labels, &out.labels)?;
        let secs = synth.duration_ms as f64 / 1e3;
        println!(
            "{}: {} events over {secs:.3} s ({:.1} events/s), {} labels, {} saccades",
            dir.display(),
            out.stream.len(),
            out.stream.len() as f64 / secs,
            out.labels.len(),
            out.trajectory.saccade_count()
        );
    }
    Ok(())
}

/// One shared sensor resolution across all recordings.
fn sensor_of(recs: &[&Recording]) -> Result<Resolution> {
    let first = recs.first().context("no recordings")?.stream.resolution();
    if let Some(r) = recs.iter().find(|r| r.stream.resolution() != first) {
        bail!("recording {} has resolution {}, expected {first}", r.name, r.stream.resolution());
    }
    Ok(first)
}

fn load_recordings(dir: &Path, cfg: &RunConfig) -> Result<Vec<Recording>> {
    ensure!(dir.is_dir(), "data directory {} does not exist", dir.display());
    let recs = load_dir(dir, cfg.sensor())?;
    ensure!(!recs.is_empty(), "no recordings (events.csv/events.bin + labels.csv) under {}", dir.display());
    Ok(recs)
}

fn prepare(recs: &[Recording], cfg: &RunConfig, mode: SequenceMode) -> Result<Vec<PreparedSequence>> {
    let opt = PrepareOptions { windowing: &cfg.windowing, model: &cfg.model, mode, seed: cfg.train.seed };
    Ok(prepare_all(recs, &opt)?)
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    entry: &'a EpochLog,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

fn save_checkpoint(path: &Path, store: &ParamStore<f32>, cfg: &RunConfig, extra: serde_json::Value) -> Result<String> {
    let meta = json!({ "config": cfg, "info": extra });
    Checkpoint::from_store(store, &cfg.hash(), meta)
        .save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    file_sha256(path)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut o = common_overrides(&a.common);
    o.opt("train", "epochs", a.epochs);
    o.opt("train", "lr", a.lr);
    o.opt("train", "batch_size", a.batch_size);
    if let Some([w, h]) = a.sensor {
        o.set("", "sensor", vec![w, h]);
    }
    a.model.apply(&mut o);
    a.windowing.apply(&mut o)?;
    let cfg = RunConfig::load(a.common.config.as_deref(), &o)?;
    let hash = cfg.hash();
    let train_recs = load_recordings(&a.data, &cfg)?;
    let val_recs = match &a.val {
        Some(dir) => load_recordings(dir, &cfg)?,
        None => Vec::new(),
    };
    let sensor = sensor_of(&train_recs.iter().chain(&val_recs).collect::<Vec<_>>())?;
    let train = prepare(&train_recs, &cfg, SequenceMode::Train)?;
    let val = prepare(&val_recs, &cfg, SequenceMode::Eval)?;
    ensure!(!train.is_empty(), "{} yields no full training sequence of {} windows", a.data.display(), cfg.windowing.seq_len);
    eprintln!("config {hash}: {} training and {} validation sequences", train.len(), val.len());

    let out = &a.common.out;
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    let log_path = out.join("epochs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let epochs = cfg.train.epochs;
    let fitted = fit(&cfg.model, &cfg.train, &train, &val, &cfg.eval, sensor, |e| {
        eprintln!(
            "epoch {}/{epochs} lr {:.2e} train {:.6} val {} p10 {} mean {}px {:.1}s",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            opt(e.val_loss, 6),
            opt(e.p10, 3),
            opt(e.mean_distance, 3),
            e.wall_time_s
        );
        let line = serde_json::to_string(&LogLine { config_hash: &hash, entry: e }).expect("log line serializes");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    });
    log.flush()?;
    if let Some(err) = log_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    let fitted = fitted?;
    let best_hash = save_checkpoint(&out.join("best.ckpt"), &fitted.best, &cfg, json!({ "epoch": fitted.best_epoch }))?;
    save_checkpoint(&out.join("last.ckpt"), &fitted.last, &cfg, json!({ "epoch": epochs.saturating_sub(1) }))?;

    let (report_name, seqs) = if val.is_empty() { ("train", prepare(&train_recs, &cfg, SequenceMode::Eval)?) } else { ("val", val) };
    let ev = evaluate(&fitted.network, &fitted.best, &seqs, &cfg.eval, sensor, false, report_name, cfg.train.w_x, cfg.train.w_y)?;
    let mut report = ev.report;
    report.meta = json!({ "config_hash": hash, "best_epoch": fitted.best_epoch });
    report.write_dir(&out.join(report_name))?;
    print_summary(&report);
    println!("checkpoint {} sha256 {best_hash} (epoch {})", out.join("best.ckpt").display(), fitted.best_epoch);
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    let rates: Vec<String> = r.rates.iter().map(|x| format!("p{} {:.4}", x.threshold, x.rate)).collect();
    println!(
        "{}: {} samples, {}, mean distance {:.3}px, mean squared distance {:.3}px^2 at {}x{}",
        r.name,
        r.samples,
        rates.join(" "),
        r.mean_distance,
        r.mean_squared_distance,
        r.eval_width,
        r.eval_height
    );
}

/// A network restored from a checkpoint together with the effective run config.
struct Restored {
    cfg: RunConfig,
    network: Network,
    store: ParamStore<f32>,
    stored_hash: String,
}

fn restore(checkpoint: &Path, common: &Common, mut o: Overrides) -> Result<Restored> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let stored: RunConfig = serde_json::from_value(ckpt.header.meta["config"].clone())
        .with_context(|| format!("checkpoint {} carries no run configuration", checkpoint.display()))?;
    if let Some(seed) = common.seed {
        o.set("", "seed", seed as i64);
    }
    let cfg = match &common.config {
        Some(path) => RunConfig::load(Some(path), &o)?,
        None => RunConfig::from_toml(&stored.to_toml(), &o).context("applying flags to the checkpoint configuration")?,
    };
    let diff = model_differences(&stored.model, &cfg.model);
    if !diff.is_empty() {
        bail!("configuration does not match checkpoint {}:\n  {}", checkpoint.display(), diff.join("\n  "));
    }
    let mut store = ParamStore::new();
    let network = Network::new(&cfg.model, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into(&mut store).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(Restored { cfg, network, store, stored_hash: ckpt.header.config_hash })
}

fn write_trajectory(path: &Path, rows: &[TrajectoryRow], names: &[String], labeled: bool) -> Result<()> {
    let mut table = if labeled {
        Table::new(&["recording", "t_center_us", "x_pred", "y_pred", "x_label", "y_label", "label_valid", "events"])
    } else {
        Table::new(&["recording", "t_center_us", "x_pred", "y_pred", "events"])
    };
    for r in rows {
        let mut row = vec![names[r.recording].replace(',', "_"), r.t_center_us.to_string(), r.x_pred.to_string(), r.y_pred.to_string()];
        if labeled {
            row.extend([r.x_label.to_string(), r.y_label.to_string(), u8::from(r.label_valid).to_string()]);
        }
        row.push(r.events.to_string());
        table.push(row);
    }
    Ok(table.write_csv(path)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut o = Overrides::default();
    if let Some([w, h]) = a.sensor {
        o.set("", "sensor", vec![w, h]);
    }
    a.model.apply(&mut o);
    a.windowing.apply(&mut o)?;
    let r = restore(&a.checkpoint, &a.common, o)?;
    let recs = load_recordings(&a.data, &r.cfg)?;
    let sensor = sensor_of(&recs.iter().collect::<Vec<_>>())?;
    let seqs = prepare(&recs, &r.cfg, SequenceMode::Eval)?;
    let name = a.name.clone().unwrap_or_else(|| if r.cfg.windowing.adaptive { "adaptive".into() } else { "fixed".into() });
    let ev = evaluate(&r.network, &r.store, &seqs, &r.cfg.eval, sensor, a.carry_state, &name, r.cfg.train.w_x, r.cfg.train.w_y)?;
    let mut report = ev.report;
    report.meta = json!({
        "config_hash": r.cfg.hash(),
        "checkpoint_config_hash": r.stored_hash,
        "checkpoint": a.checkpoint,
        "data": a.data,
        "loss": ev.loss,
    });
    let out = &a.common.out;
    report.write_dir(out)?;
    let names: Vec<String> = recs.iter().map(|r| r.name.clone()).collect();
    write_trajectory(&out.join("trajectory.csv"), &ev.trajectory, &names, true)?;
    print_summary(&report);
    Ok(())
}

pub fn track(a: &TrackArgs) -> Result<()> {
    let mut o = Overrides::default();
    if let Some([w, h]) = a.sensor {
        o.set("", "sensor", vec![w, h]);
    }
    a.model.apply(&mut o);
    a.windowing.apply(&mut o)?;
    ensure!(!a.pool || a.track_hz == TrackHz::Hz20, "--pool needs --track-hz 20");
    let window_ms = if a.pool { TrackHz::Hz100.window_ms() } else { a.track_hz.window_ms() };
    o.set("windowing", "window_ms", window_ms);
    let r = restore(&a.checkpoint, &a.common, o)?;
    let format = EventFormat::from_path(&a.events)
        .with_context(|| format!("cannot tell the event format of {} from its extension", a.events.display()))?;
    let loaded = load_events(&a.events, format, r.cfg.sensor())?;
    let labels = match &a.labels {
        Some(p) => load_labels(p)?,
        None => Vec::new(),
    };
    let label_end = labels.last().map_or(0, |l| l.t as u64);
    let duration = loaded.stream.duration_us().max(label_end);
    let name = a.events.file_stem().map_or_else(|| "stream".into(), |s| s.to_string_lossy().into_owned());
    let rec = Recording { name: name.clone(), stream: loaded.stream.with_duration(duration), labels };
    let sensor = rec.stream.resolution();
    if loaded.reordered > 0 {
        eprintln!("warning: {} events arrived out of order and were re-sorted", loaded.reordered);
    }
    let seqs = prepare(std::slice::from_ref(&rec), &r.cfg, SequenceMode::Eval)?;
    let out = &a.common.out;
    create_dir(out)?;
    let traj_path = out.join("trajectory.csv");
    let labeled = a.labels.is_some();
    let rows = if a.pool {
        let factor = (TrackHz::Hz20.window_ms() / TrackHz::Hz100.window_ms()) as usize;
        let fine = trajectory(&r.network, &r.store, &seqs, sensor, a.carry_state)?;
        let mut rows = pool_trajectory(&fine, factor);
        if labeled {
            for row in &mut rows {
                let l = label_at(&rec.labels, row.t_center_us);
                (row.x_label, row.y_label, row.label_valid) = (l.x, l.y, l.valid);
            }
            let mut report = pooled_report(&rows, sensor, &r.cfg, &name)?;
            report.meta = json!({ "config_hash": r.cfg.hash(), "checkpoint": a.checkpoint, "events": a.events, "track_hz": 20, "pooled": true });
            report.write_dir(out)?;
            print_summary(&report);
        }
        rows
    } else if labeled {
        let ev = evaluate(&r.network, &r.store, &seqs, &r.cfg.eval, sensor, a.carry_state, &name, r.cfg.train.w_x, r.cfg.train.w_y)?;
        let mut report = ev.report;
        report.meta = json!({ "config_hash": r.cfg.hash(), "checkpoint": a.checkpoint, "events": a.events, "track_hz": a.track_hz.hz() });
        report.write_dir(out)?;
        print_summary(&report);
        ev.trajectory
    } else {
        trajectory(&r.network, &r.store, &seqs, sensor, a.carry_state)?
    };
    write_trajectory(&traj_path, &rows, &[name], labeled)?;
    println!("{} rows at {} Hz -> {}", rows.len(), a.track_hz.hz(), traj_path.display());
    Ok(())
}

fn pooled_report(rows: &[TrajectoryRow], sensor: Resolution, cfg: &RunConfig, name: &str) -> Result<MetricsReport> {
    let (sw, sh) = (f64::from(sensor.width), f64::from(sensor.height));
    let valid: Vec<&TrajectoryRow> = rows.iter().filter(|r| r.label_valid).collect();
    ensure!(!valid.is_empty(), "no valid labeled samples");
    let preds: Vec<[f64; 2]> = valid.iter().map(|r| [r.x_pred / sw, r.y_pred / sh]).collect();
    let labels: Vec<[f64; 2]> = valid.iter().map(|r| [r.x_label / sw, r.y_label / sh]).collect();
    let errs = errors(&preds, &labels, (f64::from(cfg.eval.width), f64::from(cfg.eval.height)))?;
    let counts = valid.iter().map(|r| r.nominal_events).collect();
    Ok(MetricsReport::new(name, errs, counts, &cfg.eval)?)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let reports: Vec<MetricsReport> = a.reports.iter().map(|p| load_report(p)).collect::<Result<_>>()?;
    create_dir(&a.out)?;
    combine_density(&reports)?.write_csv(&a.out.join("density_bins.csv"))?;
    combine_cdf(&reports)?.write_csv(&a.out.join("cdf.csv"))?;
    let thresholds: Vec<f64> = reports[0].rates.iter().map(|r| r.threshold).collect();
    let mut header = vec!["report".to_string(), "samples".into()];
    header.extend(thresholds.iter().map(|t| format!("p{t}")));
    header.extend(["mean_distance_px".into(), "mean_squared_distance_px2".into(), "low_density_exceedances".into()]);
    let mut summary = Table { header, rows: Vec::new() };
    for r in &reports {
        let mut row = vec![r.name.replace(',', "_"), r.samples.to_string()];
        row.extend(thresholds.iter().map(|&t| r.rate(t).map_or_else(|| "-".into(), |v| v.to_string())));
        row.extend([
            r.mean_distance.to_string(),
            r.mean_squared_distance.to_string(),
            r.density.first().map_or(0, |b| b.exceedances).to_string(),
        ]);
        summary.push(row);
        print_summary(r);
    }
    summary.write_csv(&a.out.join("summary.csv"))?;
    println!("wrote density_bins.csv, cdf.csv and summary.csv to {}", a.out.display());
    Ok(())
}

fn load_report(p: &PathBuf) -> Result<MetricsReport> {
    let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
    Ok(MetricsReport::load_json(&path)?)
}

pub fn cost(a: &CostArgs) -> Result<()> {
    let mut o = Overrides::default();
    a.model.apply(&mut o);
    let cfg = RunConfig::load(a.config.as_deref(), &o)?;
    let c = count_params_flops(&cfg.model, Resolution::new(a.sensor[0], a.sensor[1]))?;
    println!(
        "{:?}: {} parameters, {} FLOPs per sample ({} network + {} sampling and grouping)",
        cfg.model.preset,
        c.params,
        c.flops(),
        c.network_flops,
        c.geometry_flops
    );
    Ok(())
}
