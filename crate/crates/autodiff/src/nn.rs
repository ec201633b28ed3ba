//! Layers built from tape primitives. Each layer only stores parameter ids;
//! values live in the [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Forward FLOPs per element under the tape's conventions.
    pub fn flops_per_element(self) -> u64 {
        match self {
            Activation::Identity => 0,
            _ => 1,
        }
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![in_dim, out_dim], Init::UniformFanIn(in_dim), rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), vec![1, out_dim], Init::Zeros, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        linear(tape, x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Forward FLOPs for `rows` input rows.
    pub fn flops(&self, rows: usize) -> u64 {
        let mut f = 2 * (rows * self.in_dim * self.out_dim) as u64;
        if self.bias.is_some() {
            f += (rows * self.out_dim) as u64;
        }
        f
    }
}

/// Functional dense layer on tape variables.
pub fn linear<F: Real>(tape: &mut Tape<F>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    if x.cols() != weight.rows() {
        return shape_err("linear", x.shape(), weight.shape());
    }
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Stacked `linear -> activation` layers with a residual connection from the
/// block input to the block output. The shortcut is a learned bias-free
/// projection when the input and output widths differ.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub layers: Vec<Linear>,
    pub shortcut: Option<Linear>,
    pub activation: Activation,
}

impl MlpBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(!dims.is_empty(), "mlp block needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len());
        let mut width = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.layer{i}"), width, d, true, rng));
            width = d;
        }
        let shortcut = (in_dim != width).then(|| Linear::new(store, &format!("{name}.shortcut"), in_dim, width, false, rng));
        Self { layers, shortcut, activation }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
            h = self.activation.apply(tape, h);
        }
        let skip = match &self.shortcut {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        tape.add(h, skip)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().chain(&self.shortcut).map(Linear::num_params).sum()
    }

    pub fn flops(&self, rows: usize) -> u64 {
        let act = self.activation.flops_per_element();
        let layers: u64 = self.layers.iter().map(|l| l.flops(rows) + act * (rows * l.out_dim) as u64).sum();
        let shortcut = self.shortcut.as_ref().map_or(0, |s| s.flops(rows));
        layers + shortcut + (rows * self.out_dim()) as u64
    }
}

/// Softmax attention pooling: each member of a group is scored by a learned
/// linear map, scores are softmaxed within the group, and the output is the
/// weighted average of the members.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub score: Linear,
}

impl AttentionPool {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { score: Linear::new(store, &format!("{name}.score"), dim, 1, false, rng) }
    }

    /// `features` is `(G * group) x D`; the result is `G x D`.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        features: Var,
        group: usize,
    ) -> Result<Var> {
        let scores = self.score.forward(tape, store, features)?;
        let weights = tape.softmax_groups(scores, group)?;
        tape.group_weighted_sum(features, weights, group)
    }

    pub fn num_params(&self) -> usize {
        self.score.num_params()
    }

    /// FLOPs for `groups` groups of `group` members.
    pub fn flops(&self, groups: usize, group: usize) -> u64 {
        let rows = groups * group;
        self.score.flops(rows) + 4 * rows as u64 + 2 * (rows * self.score.in_dim) as u64
    }
}

/// LSTM cell parameters. Weights are stored transposed for row-major
/// `x W` products: `w_ih` is `D x 4H`, `w_hh` is `H x 4H`, `bias` is `1 x 4H`.
/// Gate column blocks are ordered input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    /// Uniform `1/sqrt(fan_in)` weights, zero bias except forget gate = 1.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), vec![input, 4 * hidden], Init::UniformFanIn(input), rng);
        let w_hh = store.add(format!("{name}.w_hh"), vec![hidden, 4 * hidden], Init::UniformFanIn(hidden), rng);
        let bias = store.add(format!("{name}.bias"), vec![1, 4 * hidden], Init::Zeros, rng);
        let b = store.get_mut(bias).tensor.values_mut();
        for v in &mut b[hidden..2 * hidden] {
            *v = F::one();
        }
        Self { w_ih, w_hh, bias, input, hidden }
    }

    pub fn zero_state<F: Real>(&self, tape: &mut Tape<F>, batch: usize) -> LstmState {
        LstmState { h: tape.zeros(batch, self.hidden), c: tape.zeros(batch, self.hidden) }
    }

    /// One step: `x` is `B x D`, state is `B x H`.
    pub fn step<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        if x.cols() != self.input {
            return shape_err("lstm_cell", x.shape(), (x.rows(), self.input));
        }
        if state.h.shape() != (x.rows(), self.hidden) || state.c.shape() != state.h.shape() {
            return shape_err("lstm_cell", state.h.shape(), (x.rows(), self.hidden));
        }
        let h = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b = tape.param(store, self.bias);
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(state.h, w_hh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_row(pre, b)?;
        let i = tape.slice_cols(pre, 0, h)?;
        let f = tape.slice_cols(pre, h, 2 * h)?;
        let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
        let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h_new = tape.mul(o, squashed)?;
        Ok(LstmState { h: h_new, c })
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    /// FLOPs of one step for `batch` rows.
    pub fn step_flops(&self, batch: usize) -> u64 {
        let (b, d, h) = (batch as u64, self.input as u64, self.hidden as u64);
        let gates = 2 * b * d * 4 * h + 2 * b * h * 4 * h + 2 * b * 4 * h;
        gates + b * 4 * h + b * h * 5
    }
}

/// Unidirectional LSTM over a list of time steps.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub cell: LstmCell,
}

impl Lstm {
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        steps: &[Var],
        init: Option<LstmState>,
    ) -> Result<(Vec<Var>, LstmState)> {
        let batch = steps.first().map_or(1, Var::rows);
        let mut state = match init {
            Some(s) => s,
            None => self.cell.zero_state(tape, batch),
        };
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            state = self.cell.step(tape, store, x, state)?;
            out.push(state.h);
        }
        Ok((out, state))
    }
}

/// Bidirectional LSTM; each output step is `[forward_h, backward_h]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, steps: &[Var]) -> Result<Vec<Var>> {
        bilstm(tape, store, steps, &self.forward, &self.backward)
    }

    pub fn num_params(&self) -> usize {
        self.forward.num_params() + self.backward.num_params()
    }
}

/// Runs `fwd` over `t = 0..T` and `bwd` over `t = T-1..0`, concatenating per step.
pub fn bilstm<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    steps: &[Var],
    fwd: &LstmCell,
    bwd: &LstmCell,
) -> Result<Vec<Var>> {
    let batch = steps.first().map_or(1, Var::rows);
    let mut state = fwd.zero_state(tape, batch);
    let mut fwd_out = Vec::with_capacity(steps.len());
    for &x in steps {
        state = fwd.step(tape, store, x, state)?;
        fwd_out.push(state.h);
    }
    let mut state = bwd.zero_state(tape, batch);
    let mut bwd_out = vec![None; steps.len()];
    for (t, &x) in steps.iter().enumerate().rev() {
        state = bwd.step(tape, store, x, state)?;
        bwd_out[t] = Some(state.h);
    }
    fwd_out
        .into_iter()
        .zip(bwd_out)
        .map(|(f, b)| tape.concat_cols(&[f, b.expect("every step visited")]))
        .collect()
}
