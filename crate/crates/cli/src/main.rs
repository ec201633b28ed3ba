//! `fapnet`: synthesize recordings, train, evaluate, track and analyze.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "fapnet", version, about = "Event-based pupil tracking with point-cloud networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic recordings (events plus labels).
    Synth(SynthArgs),
    /// Train a network on a directory of recordings.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory of recordings.
    Eval(EvalArgs),
    /// Predict the pupil trajectory over one event stream.
    Track(TrackArgs),
    /// Merge metrics reports into side-by-side tables.
    Analyze(AnalyzeArgs),
    /// Print parameter count and per-sample FLOPs of a model configuration.
    Cost(CostArgs),
}

#[derive(Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for synthesis, preprocessing and training.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Fapnet,
    Pepnet,
    PepnetTiny,
    Desk,
}

impl PresetArg {
    fn name(self) -> &'static str {
        match self {
            PresetArg::Fapnet => "fapnet",
            PresetArg::Pepnet => "pepnet",
            PresetArg::PepnetTiny => "pepnet_tiny",
            PresetArg::Desk => "desk",
        }
    }
}

#[derive(Args, Default)]
pub struct ModelFlags {
    /// Model preset; other `[model]` keys refine it.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Points per sample.
    #[arg(long)]
    pub points: Option<u32>,
}

#[derive(Args, Default)]
pub struct WindowFlags {
    #[arg(long)]
    pub window_ms: Option<u32>,
    #[arg(long)]
    pub adaptive_threshold: Option<u32>,
    #[arg(long)]
    pub max_window_ms: Option<u32>,
    /// Samples per sequence (model and windowing).
    #[arg(long)]
    pub seq_len: Option<u32>,
    /// Add time-inverted copies of training recordings.
    #[arg(long)]
    pub augment_invert: bool,
    /// Use fixed windows without adaptive expansion.
    #[arg(long)]
    pub fixed: bool,
}

/// Sensor resolution as `WIDTHxHEIGHT`.
fn parse_sensor(s: &str) -> Result<[u32; 2], String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: u32 = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok([w, h])
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Bin,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of recordings; more than one go into numbered subdirectories.
    #[arg(long, default_value_t = 1)]
    pub recordings: usize,
    #[arg(long, value_enum, default_value = "bin")]
    pub format: FormatArg,
    #[arg(long)]
    pub duration_ms: Option<u32>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of training recordings.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of validation recordings.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<u32>,
    /// Sensor resolution for CSV event files.
    #[arg(long, value_parser = parse_sensor)]
    pub sensor: Option<[u32; 2]>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub windowing: WindowFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of recordings to evaluate.
    #[arg(long)]
    pub data: PathBuf,
    /// Report name; defaults to the windowing mode.
    #[arg(long)]
    pub name: Option<String>,
    /// Carry the recurrent state across consecutive sequences.
    #[arg(long)]
    pub carry_state: bool,
    #[arg(long, value_parser = parse_sensor)]
    pub sensor: Option<[u32; 2]>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub windowing: WindowFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackHz {
    #[value(name = "100")]
    Hz100,
    #[value(name = "20")]
    Hz20,
}

impl TrackHz {
    pub fn hz(self) -> u32 {
        match self {
            TrackHz::Hz100 => 100,
            TrackHz::Hz20 => 20,
        }
    }

    pub fn window_ms(self) -> u32 {
        1_000 / self.hz()
    }
}

#[derive(Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Event file (`.csv`, `.bin` or `.evc`).
    #[arg(long)]
    pub events: PathBuf,
    /// Optional label file; enables the metrics report.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output rate: 100 Hz uses 10 ms windows, 20 Hz uses 50 ms windows.
    #[arg(long, value_enum, default_value = "100", conflicts_with = "window_ms")]
    pub track_hz: TrackHz,
    /// At 20 Hz, average five consecutive 10 ms predictions instead of using 50 ms windows.
    #[arg(long)]
    pub pool: bool,
    #[arg(long)]
    pub carry_state: bool,
    #[arg(long, value_parser = parse_sensor)]
    pub sensor: Option<[u32; 2]>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub windowing: WindowFlags,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Metrics report files (`report.json`).
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CostArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, value_parser = parse_sensor, default_value = "640x480")]
    pub sensor: [u32; 2],
}

impl ModelFlags {
    fn apply(&self, o: &mut Overrides) {
        o.opt("model", "preset", self.preset.map(PresetArg::name));
        o.opt("model", "points", self.points);
    }
}

impl WindowFlags {
    fn apply(&self, o: &mut Overrides) -> Result<()> {
        o.opt("windowing", "window_ms", self.window_ms);
        o.opt("windowing", "adaptive_threshold", self.adaptive_threshold);
        o.opt("windowing", "max_window_ms", self.max_window_ms);
        if let Some(s) = self.seq_len {
            if s == 0 {
                bail!("--seq-len must be positive");
            }
            o.set("windowing", "seq_len", s);
            o.set("model", "seq_len", s);
        }
        if self.augment_invert {
            o.set("windowing", "augment_invert", true);
        }
        if self.fixed {
            o.set("windowing", "adaptive", false);
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Track(a) => commands::track(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Cost(a) => commands::cost(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
