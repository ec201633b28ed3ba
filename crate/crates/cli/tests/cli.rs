use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
duration_ms = 200
floor_rate = 300.0

[model]
preset = "custom"
points = 16
stage_centroids = [8]
knn_k = 4
dims = [8]
extractor_depth = 1
group_hidden = 8
sample_hidden = 8
seq_len = 4

[train]
lr = 1e-2
lr_milestones = []
batch_size = 4
epochs = 1

[eval]
width = 64
height = 48
density_bins = 4
"#;

fn fapnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fapnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fapnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cfg(&self) -> String {
        p(&self.path("run.toml")).to_string()
    }

    fn synth(&self, out: &str, seed: u64, recordings: usize) {
        ok(&["synth", "--config", &self.cfg(), "--seed", &seed.to_string(), "--recordings", &recordings.to_string(), "--out", p(&self.path(out))]);
    }

    fn s(&self, rel: &str) -> String {
        p(&self.path(rel)).to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let (cfg, data, val, out) = (self.cfg(), self.s("train"), self.s("val"), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--val", &val, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn checkpoint_hash(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.split(" sha256 ").nth(1)).expect("hash line").split(' ').next().unwrap().to_string()
}

#[test]
fn synth_writes_two_files_deterministically() {
    let f = Fixture::new(TINY);
    let out = ok(&["synth", "--config", &f.cfg(), "--seed", "3", "--out", p(&f.path("a"))]);
    assert!(out.contains("events over 0.200 s"), "{out}");
    let mut files: Vec<String> = fs::read_dir(f.path("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, vec!["events.bin", "labels.csv"]);
    ok(&["synth", "--config", &f.cfg(), "--seed", "3", "--out", p(&f.path("b"))]);
    for name in &files {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap());
    }
}

#[test]
fn zero_rate_synth_gives_an_empty_csv() {
    let f = Fixture::new("[synth]\nduration_ms = 50\nfloor_rate = 0.0\nevent_gain = 0.0\n");
    let out = ok(&["synth", "--config", &f.cfg(), "--format", "csv", "--out", p(&f.path("z"))]);
    assert!(out.contains(" 0 events"), "{out}");
    assert_eq!(fs::read_to_string(f.path("z/events.csv")).unwrap(), "t_us,x,y,p\n");
    assert_eq!(fs::read_to_string(f.path("z/labels.csv")).unwrap().lines().count(), 7);
}

#[test]
fn unknown_config_keys_and_missing_data_fail() {
    let f = Fixture::new("[model]\nlayers = 3\n");
    let out = fapnet(&["synth", "--config", &f.cfg(), "--out", p(&f.path("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers"));

    let f = Fixture::new(TINY);
    let missing = f.path("no-such-dir");
    let out = fapnet(&["train", "--config", &f.cfg(), "--data", p(&missing), "--out", p(&f.path("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn pipeline_train_eval_track_analyze() {
    let f = Fixture::new(TINY);
    f.synth("train", 0, 2);
    f.synth("val", 100, 1);
    let stdout = f.train("run", &[]);
    for file in ["best.ckpt", "last.ckpt", "epochs.jsonl", "config.toml", "val/report.json", "val/density_bins.csv"] {
        assert!(f.path("run").join(file).is_file(), "{file}");
    }
    let log = fs::read_to_string(f.path("run/epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"config_hash\""));
    assert!(stdout.contains("val: 20 samples"), "{stdout}");

    let ckpt = f.path("run/best.ckpt");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.path("val")), "--out", p(&f.path("adaptive"))]);
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.path("val")), "--fixed", "--out", p(&f.path("fixed"))]);
    assert!(f.path("adaptive/trajectory.csv").is_file());

    let track = f.path("track");
    ok(&["track", "--checkpoint", p(&ckpt), "--events", p(&f.path("val/events.bin")), "--out", p(&track)]);
    let rows = fs::read_to_string(track.join("trajectory.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 20);
    assert!(rows.starts_with("recording,t_center_us,x_pred,y_pred,events\n"));
    assert!(!track.join("report.json").exists());

    let slow = f.path("track20");
    let events = p(&f.path("val/events.bin")).to_string();
    let labels = p(&f.path("val/labels.csv")).to_string();
    ok(&["track", "--checkpoint", p(&ckpt), "--events", &events, "--labels", &labels, "--track-hz", "20", "--out", p(&slow)]);
    assert_eq!(fs::read_to_string(slow.join("trajectory.csv")).unwrap().lines().count(), 1 + 4);
    assert!(slow.join("report.json").is_file());

    let pooled = f.path("pooled");
    ok(&["track", "--checkpoint", p(&ckpt), "--events", &events, "--labels", &labels, "--track-hz", "20", "--pool", "--out", p(&pooled)]);
    let rows = fs::read_to_string(pooled.join("trajectory.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(rows.lines().nth(1).unwrap().contains(",25000,"), "{rows}");
    assert!(pooled.join("report.json").is_file());
    assert!(!fapnet(&["track", "--checkpoint", p(&ckpt), "--events", &events, "--pool", "--out", p(&f.path("nopool"))]).status.success());

    let bad = fapnet(&["track", "--checkpoint", p(&ckpt), "--events", &events, "--points", "32", "--out", p(&f.path("bad"))]);
    assert!(!bad.status.success());
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("model.points: checkpoint 16 vs requested 32"), "{msg}");

    let one = f.path("one");
    ok(&["analyze", p(&f.path("fixed/report.json")), "--out", p(&one)]);
    let cdf = fs::read_to_string(one.join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("error_px,fixed\n"));
    let both = f.path("both");
    ok(&["analyze", p(&f.path("fixed")), p(&f.path("adaptive/report.json")), "--out", p(&both)]);
    let density = fs::read_to_string(both.join("density_bins.csv")).unwrap();
    assert!(density.starts_with("bin,fixed_exceedances,fixed_mean_error,fixed_mean_events,adaptive_exceedances"), "{density}");
    assert_eq!(density.lines().count(), 1 + 4);

    let coarse = Fixture::new(&format!("{TINY}cdf_points = 5\n"));
    ok(&["eval", "--checkpoint", p(&ckpt), "--config", &coarse.cfg(), "--data", p(&f.path("val")), "--out", p(&f.path("coarse"))]);
    let mixed = fapnet(&["analyze", p(&f.path("fixed")), p(&f.path("coarse")), "--out", p(&f.path("mixed"))]);
    assert!(!mixed.status.success());
    assert!(String::from_utf8_lossy(&mixed.stderr).contains("error grid"));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let f = Fixture::new(TINY);
    f.synth("train", 0, 2);
    f.synth("val", 100, 1);
    let a = checkpoint_hash(&f.train("a", &["--seed", "7", "--epochs", "2"]));
    let b = checkpoint_hash(&f.train("b", &["--seed", "7", "--epochs", "2"]));
    assert_eq!(a, b);
    assert_eq!(fs::read(f.path("a/last.ckpt")).unwrap(), fs::read(f.path("b/last.ckpt")).unwrap());
    let c = checkpoint_hash(&f.train("c", &["--seed", "8", "--epochs", "2"]));
    assert_ne!(a, c);
}

#[test]
fn overfit_checkpoint_tracks_its_own_recording() {
    let f = Fixture::new(&TINY.replace("epochs = 1", "epochs = 300"));
    f.synth("train", 5, 1);
    let run = f.path("run");
    ok(&["train", "--config", &f.cfg(), "--data", p(&f.path("train")), "--out", p(&run)]);
    let track = f.path("track");
    let events = p(&f.path("train/events.bin")).to_string();
    let labels = p(&f.path("train/labels.csv")).to_string();
    let out = ok(&["track", "--checkpoint", p(&run.join("best.ckpt")), "--events", &events, "--labels", &labels, "--out", p(&track)]);
    assert!(out.contains("p10 1.0000"), "{out}");
}
