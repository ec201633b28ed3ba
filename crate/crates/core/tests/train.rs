use fapnet::dataset::{prepare_all, PrepareOptions, PreparedSequence, Recording};
use fapnet::metrics::EvalConfig;
use fapnet::model::{ModelConfig, Network, Preset};
use fapnet::synth::{synth_generate, SynthConfig};
use fapnet::train::{evaluate, fit, pool_trajectory, TrainConfig, TrajectoryRow};
use fapnet::windowing::{SequenceMode, WindowingConfig};
use fapnet::{Error, Resolution};
use fapnet_autodiff::nn::Activation;
use fapnet_autodiff::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SENSOR: Resolution = Resolution::new(64, 48);

fn small_model() -> ModelConfig {
    ModelConfig {
        preset: Preset::Custom,
        points: 16,
        stage_centroids: vec![8],
        knn_k: 4,
        dims: vec![8],
        extractor_depth: 1,
        group_hidden: 8,
        sample_hidden: 8,
        seq_len: 4,
        include_polarity: false,
        activation: Activation::Relu,
        clamp: false,
    }
}

fn recording(seed: u64, ms: u64, invalid: Vec<[u64; 2]>) -> Recording {
    let cfg = SynthConfig { seed, duration_ms: ms, invalid_ms: invalid, ..SynthConfig::default() };
    let out = synth_generate(&cfg).unwrap();
    Recording { name: format!("r{seed}"), stream: out.stream, labels: out.labels }
}

fn sequences(model: &ModelConfig, recs: &[Recording], mode: SequenceMode, invert: bool) -> Vec<PreparedSequence> {
    let windowing =
        WindowingConfig { adaptive_threshold: model.points, seq_len: model.seq_len, augment_invert: invert, ..WindowingConfig::default() };
    prepare_all(recs, &PrepareOptions { windowing: &windowing, model, mode, seed: 9 }).unwrap()
}

fn eval_cfg() -> EvalConfig {
    EvalConfig { width: SENSOR.width, height: SENSOR.height, density_bins: 2, ..EvalConfig::default() }
}

fn flat(store: &ParamStore<f32>) -> Vec<f32> {
    store.flatten().iter().map(|&v| v as f32).collect()
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let model = small_model();
    let train = sequences(&model, &[recording(1, 160, vec![])], SequenceMode::Train, false);
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 3, batch_size: 2, seed: 4, ..TrainConfig::default() };
    let out = fit(&model, &cfg, &train, &[], &eval_cfg(), SENSOR, |_| {}).unwrap();
    let mut init = ParamStore::<f32>::new();
    Network::new(&model, &mut init, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(flat(&out.last), flat(&init));
    assert!(out.log.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
}

#[test]
fn same_seed_reproduces_the_run() {
    let model = small_model();
    let recs = [recording(1, 160, vec![]), recording(2, 120, vec![])];
    let train = sequences(&model, &recs, SequenceMode::Train, true);
    let val = sequences(&model, &[recording(3, 80, vec![])], SequenceMode::Eval, false);
    let cfg = TrainConfig { lr: 3e-3, epochs: 4, batch_size: 3, lr_milestones: vec![2], ..TrainConfig::default() };
    let a = fit(&model, &cfg, &train, &val, &eval_cfg(), SENSOR, |_| {}).unwrap();
    let b = fit(&model, &cfg, &train, &val, &eval_cfg(), SENSOR, |_| {}).unwrap();
    let logs = |o: &fapnet::train::FitOutput| o.log.iter().map(|e| e.deterministic()).collect::<Vec<_>>();
    assert_eq!(logs(&a), logs(&b));
    assert_eq!(flat(&a.best), flat(&b.best));
    assert_eq!(a.log[1].lr, 3e-3);
    assert!((a.log[2].lr - 3e-4).abs() < 1e-15);
    let c = fit(&model, &TrainConfig { seed: 1, ..cfg }, &train, &val, &eval_cfg(), SENSOR, |_| {}).unwrap();
    assert_ne!(flat(&a.last), flat(&c.last));
}

#[test]
fn one_sequence_can_be_memorized() {
    let model = ModelConfig { seq_len: 2, ..small_model() };
    let train: Vec<_> = sequences(&model, &[recording(5, 20, vec![])], SequenceMode::Train, false);
    assert_eq!(train.len(), 1);
    let cfg = TrainConfig { lr: 1e-2, weight_decay: 0.0, epochs: 200, batch_size: 1, lr_milestones: vec![], ..TrainConfig::default() };
    let out = fit(&model, &cfg, &train, &[], &eval_cfg(), SENSOR, |_| {}).unwrap();
    let ev = evaluate(&out.network, &out.best, &train, &eval_cfg(), SENSOR, false, "train", 1.0, 1.0).unwrap();
    assert!(ev.loss < 1e-4, "loss {}", ev.loss);
}

#[test]
fn best_checkpoint_tracks_lowest_validation_loss() {
    let model = small_model();
    let train = sequences(&model, &[recording(1, 160, vec![])], SequenceMode::Train, false);
    let val = sequences(&model, &[recording(7, 80, vec![])], SequenceMode::Eval, false);
    let cfg = TrainConfig { lr: 1e-2, epochs: 8, batch_size: 2, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let out = fit(&model, &cfg, &train, &val, &eval_cfg(), SENSOR, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    let losses: Vec<f64> = out.log.iter().map(|e| e.val_loss.unwrap()).collect();
    let best = losses[out.best_epoch];
    assert!(losses.iter().all(|&l| l >= best));
    assert!(losses[..out.best_epoch].iter().all(|&l| l > best));
    let ev = evaluate(&out.network, &out.best, &val, &eval_cfg(), SENSOR, false, "val", 1.0, 1.0).unwrap();
    assert!((ev.loss - best).abs() < 1e-12);
    assert_eq!(out.val_report.unwrap().errors, ev.report.errors);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let model = small_model();
    let mut train = sequences(&model, &[recording(1, 80, vec![])], SequenceMode::Train, false);
    train[1].targets[0][0] = f64::NAN;
    let cfg = TrainConfig { epochs: 2, batch_size: 1, ..TrainConfig::default() };
    let err = fit(&model, &cfg, &train, &[], &eval_cfg(), SENSOR, |_| {}).err().expect("must diverge");
    match err {
        Error::Diverged { epoch: 0, .. } => {}
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn invalid_labels_and_padding_are_masked() {
    let model = small_model();
    let recs = [recording(1, 100, vec![[20, 40]])];
    let eval = sequences(&model, &recs, SequenceMode::Eval, false);
    let rows: Vec<bool> = eval.iter().flat_map(|s| s.mask.clone()).collect();
    let real: Vec<bool> = eval.iter().flat_map(|s| s.real.clone()).collect();
    assert_eq!(real.iter().filter(|&&r| r).count(), 10);
    assert_eq!(rows.len(), 12);
    assert!(!rows[10] && !rows[11]);
    assert!(rows.iter().zip(&real).all(|(&m, &r)| !m || r));
    assert!(rows.iter().filter(|&&m| !m).count() >= 4);

    let train = sequences(&model, &recs, SequenceMode::Train, true);
    assert_eq!(train.len(), 4);
    assert!(train.iter().all(|s| s.real.iter().all(|&r| r)));
}

#[test]
fn preprocessing_is_reproducible() {
    let model = small_model();
    let recs = [recording(1, 100, vec![])];
    let a = sequences(&model, &recs, SequenceMode::Eval, false);
    let b = sequences(&model, &recs, SequenceMode::Eval, false);
    let feats = |s: &[PreparedSequence]| s.iter().flat_map(|q| q.inputs.iter().flat_map(|i| i.points.features.clone())).collect::<Vec<_>>();
    assert_eq!(feats(&a), feats(&b));
}

#[test]
fn empty_training_set_is_an_error() {
    let model = small_model();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(fit(&model, &cfg, &[], &[], &eval_cfg(), SENSOR, |_| {}).is_err());
    let bad = TrainConfig { batch_size: 0, ..cfg };
    let train = sequences(&model, &[recording(1, 80, vec![])], SequenceMode::Train, false);
    assert!(matches!(fit(&model, &bad, &train, &[], &eval_cfg(), SENSOR, |_| {}), Err(Error::Config(_))));
}

fn row(recording: usize, i: usize, valid: bool) -> TrajectoryRow {
    let t = i as f64;
    TrajectoryRow {
        recording,
        t_center_us: 5_000.0 + 10_000.0 * t,
        x_pred: t,
        y_pred: 2.0 * t,
        x_label: t + 1.0,
        y_label: 0.5,
        label_valid: valid,
        events: i,
        nominal_events: 1,
    }
}

#[test]
fn pooling_averages_runs_within_each_recording() {
    let mut rows: Vec<TrajectoryRow> = (0..12).map(|i| row(0, i, i != 7)).collect();
    rows.extend((0..4).map(|i| row(1, i, true)));
    let pooled = pool_trajectory(&rows, 5);
    assert_eq!(pooled.len(), 2);
    assert!(pooled.iter().all(|r| r.recording == 0));
    let (a, b) = (&pooled[0], &pooled[1]);
    assert_eq!((a.t_center_us, a.x_pred, a.y_pred, a.x_label), (25_000.0, 2.0, 4.0, 3.0));
    assert_eq!((a.events, a.nominal_events), (0 + 1 + 2 + 3 + 4, 5));
    assert!(a.label_valid);
    assert_eq!(b.t_center_us, 75_000.0);
    assert!(!b.label_valid);
    assert_eq!(pool_trajectory(&rows, 1).len(), rows.len());
}
