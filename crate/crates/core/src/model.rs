//! The hierarchical point network.
//!
//! Per sample, each stage selects centroids by farthest point sampling,
//! groups their K nearest neighbors, standardizes each group, appends the
//! centroid's absolute coordinates, runs a residual MLP on every member and
//! attention-pools each group into one feature per centroid. The final
//! stage's centroids, in time order, pass through a bidirectional LSTM and an
//! attention pool to give one vector per sample. Across the samples of a
//! sequence a causal LSTM with an output layer feeds a linear regressor that
//! predicts normalized `(x, y)`.
//!
//! All samples of a sequence are evaluated in one batched pass; every
//! batched operation is row-independent, so each sample's stage features are
//! bitwise the same as when evaluated alone.

use fapnet_autodiff::nn::{Activation, AttentionPool, BiLstm, Linear, LstmCell, LstmState, MlpBlock};
use fapnet_autodiff::{ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointops::{fps, knn, PointSet};

/// FLOPs charged per point-to-point distance in FPS and KNN.
pub const DISTANCE_FLOPS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Fapnet,
    Pepnet,
    PepnetTiny,
    Desk,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Points per sample (N).
    pub points: usize,
    pub stage_centroids: Vec<usize>,
    pub knn_k: usize,
    /// Output width of each stage's extractor.
    pub dims: Vec<usize>,
    /// Linear layers per extractor block.
    pub extractor_depth: usize,
    /// Hidden size per direction of the inter-group LSTM.
    pub group_hidden: usize,
    /// Hidden size of the inter-sample LSTM; 0 disables it.
    pub sample_hidden: usize,
    pub seq_len: usize,
    pub include_polarity: bool,
    pub activation: Activation,
    /// Clamp rescaled predictions into the sensor frame.
    pub clamp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Fapnet)
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            points: 1024,
            stage_centroids: vec![256, 64, 16],
            knn_k: 16,
            dims: vec![32, 64, 128],
            extractor_depth: 2,
            group_hidden: 64,
            sample_hidden: 128,
            seq_len: 20,
            include_polarity: false,
            activation: Activation::Relu,
            clamp: true,
        };
        match preset {
            Preset::Fapnet | Preset::Custom => base,
            Preset::Pepnet => Self { dims: vec![64, 128, 256], group_hidden: 128, sample_hidden: 0, seq_len: 1, ..base },
            Preset::PepnetTiny => Self { dims: vec![16, 32, 64], group_hidden: 32, sample_hidden: 0, seq_len: 1, ..base },
            Preset::Desk => Self {
                points: 64,
                stage_centroids: vec![32, 8],
                knn_k: 8,
                dims: vec![24, 48],
                group_hidden: 32,
                sample_hidden: 64,
                ..base
            },
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.include_polarity { 4 } else { 3 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must be nonempty and positive".into());
        }
        if self.stage_centroids.len() != self.dims.len() {
            return bad(format!(
                "{} stage centroid counts for {} extractor dims",
                self.stage_centroids.len(),
                self.dims.len()
            ));
        }
        if self.points == 0 || self.seq_len == 0 || self.extractor_depth == 0 || self.group_hidden == 0 {
            return bad("points, seq_len, extractor_depth and group_hidden must be positive".into());
        }
        let mut available = self.points;
        for (i, &m) in self.stage_centroids.iter().enumerate() {
            if m == 0 || m > available {
                return bad(format!("stage {i} needs {m} centroids from {available} points"));
            }
            if self.knn_k == 0 || self.knn_k > available {
                return bad(format!("stage {i} needs K = {} neighbors from {available} points", self.knn_k));
            }
            available = m;
        }
        Ok(())
    }

    /// Points entering each stage.
    fn stage_inputs(&self) -> Vec<usize> {
        std::iter::once(self.points).chain(self.stage_centroids.iter().copied()).take(self.dims.len()).collect()
    }

    /// Member channels entering each stage before the centroid coordinates are appended.
    fn stage_channels(&self) -> Vec<usize> {
        std::iter::once(self.input_channels()).chain(self.dims.iter().map(|d| d + 3)).take(self.dims.len()).collect()
    }
}

/// Per-stage geometry of one sample: centroids sorted by `(t', index)` and
/// their neighbor lists, both indexing the stage's input points.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub centroids: Vec<usize>,
    /// `M x K`, row-major; the centroid is each row's first entry.
    pub neighbors: Vec<usize>,
    /// Coordinates of the centroids, in `centroids` order.
    pub coords: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub stages: Vec<StagePlan>,
}

/// Orders centroid indices by their `t'` coordinate, ties by index.
pub fn sort_centroids(centroids: &mut [usize], coords: &[[f64; 3]]) {
    centroids.sort_by(|&a, &b| coords[a][2].total_cmp(&coords[b][2]).then(a.cmp(&b)));
}

/// Runs the sampling and grouping geometry of every stage.
pub fn plan_sample(coords: &[[f64; 3]], cfg: &ModelConfig) -> Result<SamplePlan> {
    let mut cur: Vec<[f64; 3]> = coords.to_vec();
    let mut stages = Vec::with_capacity(cfg.dims.len());
    for &m in &cfg.stage_centroids {
        let mut centroids = fps(&cur, m, 0)?;
        sort_centroids(&mut centroids, &cur);
        let neighbors = knn(&cur, &centroids, cfg.knn_k)?;
        let next: Vec<[f64; 3]> = centroids.iter().map(|&c| cur[c]).collect();
        stages.push(StagePlan { centroids, neighbors, coords: next.clone() });
        cur = next;
    }
    Ok(SamplePlan { stages })
}

/// A network-ready sample: normalized points plus precomputed geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub points: PointSet,
    pub plan: SamplePlan,
}

impl SampleInput {
    pub fn new(points: PointSet, cfg: &ModelConfig) -> Result<Self> {
        if points.len() != cfg.points || points.channels != cfg.input_channels() {
            return Err(Error::arg(
                "sample",
                format!(
                    "point set is {}x{}, model expects {}x{}",
                    points.len(),
                    points.channels,
                    cfg.points,
                    cfg.input_channels()
                ),
            ));
        }
        let plan = plan_sample(&points.coords(), cfg)?;
        Ok(Self { points, plan })
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub mlp: MlpBlock,
    pub pool: AttentionPool,
    pub centroids: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct SampleHead {
    pub lstm: LstmCell,
    /// Output layer `y = V h + b_y`.
    pub out: Linear,
}

/// Recurrent state of the inter-sample LSTM, carried between sequences when requested.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub group_lstm: BiLstm,
    pub group_pool: AttentionPool,
    pub sample: Option<SampleHead>,
    pub regressor: Linear,
}

pub struct ForwardOutput {
    /// `S x 2` normalized predictions.
    pub pred: Var,
    /// Tape FLOPs spent on the forward pass.
    pub flops: u64,
    pub state: Option<RecurrentState>,
}

fn to_f<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::of(x)).collect()
}

impl Network {
    pub fn new<F: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.stage_channels();
        let stages = cfg
            .dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let dims = vec![d; cfg.extractor_depth];
                let mlp = MlpBlock::new(store, &format!("stage{i}.mlp"), channels[i] + 3, &dims, cfg.activation, rng);
                let pool = AttentionPool::new(store, &format!("stage{i}.pool"), d, rng);
                Stage { mlp, pool, centroids: cfg.stage_centroids[i], k: cfg.knn_k }
            })
            .collect();
        let last = *cfg.dims.last().expect("validated");
        let group_lstm = BiLstm::new(store, "group.lstm", last, cfg.group_hidden, rng);
        let group_pool = AttentionPool::new(store, "group.pool", group_lstm.out_dim(), rng);
        let (sample, reg_in) = if cfg.sample_hidden > 0 {
            let lstm = LstmCell::new(store, "sample.lstm", group_lstm.out_dim(), cfg.sample_hidden, rng);
            let out = Linear::new(store, "sample.out", cfg.sample_hidden, cfg.sample_hidden, true, rng);
            (Some(SampleHead { lstm, out }), cfg.sample_hidden)
        } else {
            (None, group_lstm.out_dim())
        };
        let regressor = Linear::new(store, "regressor", reg_in, 2, true, rng);
        Ok(Self { config: cfg.clone(), stages, group_lstm, group_pool, sample, regressor })
    }

    /// Runs stage `i` for all samples at once. `feats` holds each sample's
    /// stage input features stacked sample-major; the result is `(S * M) x D`.
    pub fn stage_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        i: usize,
        samples: &[SampleInput],
        feats: Var,
    ) -> Result<Var> {
        let stage = &self.stages[i];
        let n_in = feats.rows() / samples.len();
        let (m, k) = (stage.centroids, stage.k);
        let mut idx = Vec::with_capacity(samples.len() * m * k);
        let mut centers = Vec::with_capacity(samples.len() * m * k * 3);
        for (s, sample) in samples.iter().enumerate() {
            let plan = &sample.plan.stages[i];
            idx.extend(plan.neighbors.iter().map(|&j| s * n_in + j));
            for c in &plan.coords {
                for _ in 0..k {
                    centers.extend_from_slice(c);
                }
            }
        }
        let rows = idx.len();
        let grouped = tape.gather_rows(feats, idx)?;
        let std = tape.standardize_groups(grouped, k)?;
        let centers = tape.constant(to_f(&centers), rows, 3)?;
        let x = tape.concat_cols(&[std, centers])?;
        let h = stage.mlp.forward(tape, store, x)?;
        Ok(stage.pool.forward(tape, store, h, k)?)
    }

    /// Bidirectional LSTM over each sample's `M` time-sorted centroid
    /// features, then attention pooling: `(S * M) x D` to `S x 2H`.
    pub fn inter_group_aggregate<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        feats: Var,
        samples: usize,
    ) -> Result<Var> {
        let m = feats.rows() / samples;
        let steps = (0..m)
            .map(|t| tape.gather_rows(feats, (0..samples).map(|s| s * m + t).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let outs = self.group_lstm.forward(tape, store, &steps)?;
        let stacked = tape.stack_rows(&outs)?;
        let order = (0..samples).flat_map(|s| (0..m).map(move |t| t * samples + s)).collect();
        let sample_major = tape.gather_rows(stacked, order)?;
        Ok(self.group_pool.forward(tape, store, sample_major, m)?)
    }

    /// Causal LSTM across samples and the output layer: `S x 2H` to `S x H`.
    /// Without an inter-sample head the features pass through unchanged.
    pub fn inter_sample_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        feats: Var,
        init: Option<&RecurrentState>,
    ) -> Result<(Var, Option<RecurrentState>)> {
        let Some(head) = &self.sample else { return Ok((feats, None)) };
        let hdim = head.lstm.hidden;
        let mut state = match init {
            Some(st) => {
                LstmState { h: tape.constant(to_f(&st.h), 1, hdim)?, c: tape.constant(to_f(&st.c), 1, hdim)? }
            }
            None => head.lstm.zero_state(tape, 1),
        };
        let mut hs = Vec::with_capacity(feats.rows());
        for s in 0..feats.rows() {
            let x = tape.gather_rows(feats, vec![s])?;
            state = head.lstm.step(tape, store, x, state)?;
            hs.push(state.h);
        }
        let h = tape.stack_rows(&hs)?;
        let y = head.out.forward(tape, store, h)?;
        let values = |v: Var| tape.value(v).iter().map(|x| x.as_f64()).collect();
        let next = RecurrentState { h: values(state.h), c: values(state.c) };
        Ok((y, Some(next)))
    }

    /// Full forward pass over one sequence of samples.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        samples: &[SampleInput],
        init: Option<&RecurrentState>,
    ) -> Result<ForwardOutput> {
        if samples.is_empty() {
            return Err(Error::arg("forward", "empty sequence"));
        }
        let start = tape.flops();
        let c = self.config.input_channels();
        let n = self.config.points;
        let mut values = Vec::with_capacity(samples.len() * n * c);
        for s in samples {
            if s.points.len() != n || s.points.channels != c {
                return Err(Error::arg("forward", format!("sample is {}x{}, expected {n}x{c}", s.points.len(), s.points.channels)));
            }
            values.extend_from_slice(&s.points.features);
        }
        let mut feats = tape.constant(to_f(&values), samples.len() * n, c)?;
        for i in 0..self.stages.len() {
            if i > 0 {
                let mut coords = Vec::new();
                for s in samples {
                    coords.extend(s.plan.stages[i - 1].coords.iter().flatten().copied());
                }
                let rows = coords.len() / 3;
                let coords = tape.constant(to_f(&coords), rows, 3)?;
                feats = tape.concat_cols(&[coords, feats])?;
            }
            feats = self.stage_forward(tape, store, i, samples, feats)?;
        }
        let pooled = self.inter_group_aggregate(tape, store, feats, samples.len())?;
        let (y, state) = self.inter_sample_forward(tape, store, pooled, init)?;
        let pred = self.regressor.forward(tape, store, y)?;
        Ok(ForwardOutput { pred, flops: tape.flops() - start, state })
    }
}

/// `w_x * mean(dx^2) + w_y * mean(dy^2)` over rows with `mask` set,
/// on normalized coordinates.
pub fn wmse_loss<F: Real>(tape: &mut Tape<F>, pred: Var, target: &[[f64; 2]], mask: &[bool], wx: f64, wy: f64) -> Result<Var> {
    let t: Vec<F> = target.iter().flatten().map(|&v| F::of(v)).collect();
    Ok(tape.wmse(pred, &t, mask, F::of(wx), F::of(wy))?)
}

/// Predictions for one sequence, normalized and in label pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub normalized: Vec<[f64; 2]>,
    pub pixels: Vec<[f64; 2]>,
}

impl Prediction {
    /// `pixels = normalized * (w, h)`, optionally clamped into `[0, w] x [0, h]`.
    pub fn new(normalized: Vec<[f64; 2]>, w: f64, h: f64, clamp: bool) -> Self {
        let normalized: Vec<[f64; 2]> = if clamp {
            normalized.iter().map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]).collect()
        } else {
            normalized
        };
        let pixels = normalized.iter().map(|p| [p[0] * w, p[1] * h]).collect();
        Self { normalized, pixels }
    }
}

/// Inference helper: runs the network on `samples` and returns normalized predictions.
pub fn predict<F: Real>(
    net: &Network,
    store: &ParamStore<F>,
    samples: &[SampleInput],
    init: Option<&RecurrentState>,
) -> Result<(Vec<[f64; 2]>, Option<RecurrentState>)> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, samples, init)?;
    let v = tape.value(out.pred);
    Ok((v.chunks(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect(), out.state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    /// Network arithmetic per sample (dense, recurrent, attention, normalization).
    pub network_flops: u64,
    /// Sampling and grouping distance arithmetic per sample.
    pub geometry_flops: u64,
}

impl Cost {
    pub fn flops(&self) -> u64 {
        self.network_flops + self.geometry_flops
    }
}

fn linear_params(i: u64, o: u64, bias: bool) -> u64 {
    i * o + if bias { o } else { 0 }
}

fn linear_flops(rows: u64, i: u64, o: u64, bias: bool) -> u64 {
    2 * rows * i * o + if bias { rows * o } else { 0 }
}

fn lstm_params(d: u64, h: u64) -> u64 {
    4 * h * (d + h + 1)
}

fn lstm_step_flops(d: u64, h: u64) -> u64 {
    2 * d * 4 * h + 2 * h * 4 * h + 2 * 4 * h + 4 * h + 5 * h
}

fn attention_flops(rows: u64, d: u64) -> u64 {
    linear_flops(rows, d, 1, false) + 4 * rows + 2 * rows * d
}

/// Closed-form parameter count and per-sample forward FLOPs. A multiply-add
/// counts as 2 FLOPs, elementwise operations and activations 1 per element,
/// softmax 4 per element, group standardization `5K + 3` per group and
/// channel. The sensor resolution does not enter any term.
pub fn count_params_flops(cfg: &ModelConfig, _resolution: crate::event::Resolution) -> Result<Cost> {
    cfg.validate()?;
    let act = cfg.activation.flops_per_element();
    let k = cfg.knn_k as u64;
    let (mut params, mut flops, mut geometry) = (0u64, 0u64, 0u64);
    let inputs = cfg.stage_inputs();
    let channels = cfg.stage_channels();
    for (i, &d) in cfg.dims.iter().enumerate() {
        let (n, m, c, d) = (inputs[i] as u64, cfg.stage_centroids[i] as u64, channels[i] as u64, d as u64);
        geometry += DISTANCE_FLOPS * ((m - 1) * n + m * n);
        let rows = m * k;
        flops += m * c * (5 * k + 3);
        let mut width = c + 3;
        for _ in 0..cfg.extractor_depth {
            params += linear_params(width, d, true);
            flops += linear_flops(rows, width, d, true) + act * rows * d;
            width = d;
        }
        if c + 3 != d {
            params += linear_params(c + 3, d, false);
            flops += linear_flops(rows, c + 3, d, false);
        }
        flops += rows * d;
        params += d;
        flops += attention_flops(rows, d);
    }
    let last = *cfg.dims.last().expect("validated") as u64;
    let m = *cfg.stage_centroids.last().expect("validated") as u64;
    let gh = cfg.group_hidden as u64;
    params += 2 * lstm_params(last, gh) + 2 * gh;
    flops += 2 * m * lstm_step_flops(last, gh) + attention_flops(m, 2 * gh);
    let reg_in = if cfg.sample_hidden > 0 {
        let sh = cfg.sample_hidden as u64;
        params += lstm_params(2 * gh, sh) + linear_params(sh, sh, true);
        flops += lstm_step_flops(2 * gh, sh) + linear_flops(1, sh, sh, true);
        sh
    } else {
        2 * gh
    };
    params += linear_params(reg_in, 2, true);
    flops += linear_flops(1, reg_in, 2, true);
    Ok(Cost { params, network_flops: flops, geometry_flops: geometry })
}
