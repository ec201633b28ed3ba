use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    Standardize { x: Var, group: usize, scales: Vec<(F, bool)> },
    SoftmaxGroups(Var, usize),
    GroupWeightedSum { x: Var, w: Var, group: usize },
    Sum(Var),
    Wmse { pred: Var, target: Vec<F>, mask: Vec<bool>, wx: F, wy: F, count: usize },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// The tape also counts forward arithmetic. Conventions: a multiply-add is 2
/// FLOPs; elementwise add, multiply, scale and each activation evaluation are
/// 1 per output element; softmax costs 4 per element (shift, exp, sum,
/// divide); group standardization costs `5K + 3` per (group, channel); data
/// movement (gather, concat, slice, stack) is free.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    flops: u64,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new(), flops: 0 }
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.id].value[0]
    }

    fn push(&mut self, value: Vec<F>, rows: usize, cols: usize, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, op, needs_grad });
        Var { id: self.nodes.len() - 1, rows, cols }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    /// A data leaf. With `requires_grad` its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, values: Vec<F>, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(AutodiffError::InvalidArgument {
                op: "leaf",
                msg: format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            });
        }
        Ok(self.push(values, rows, cols, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, values: Vec<F>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(values, rows, cols, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(vec![F::zero(); rows * cols], rows, cols, Op::Leaf, false)
    }

    /// Places a parameter on the tape. Repeated calls with the same id return
    /// the same variable.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let t = &store.get(id).tensor;
        let (rows, cols) = t.matrix_shape();
        let v = self.push(t.values().to_vec(), rows, cols, Op::Param, true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return shape_err("matmul", a.shape(), b.shape());
        }
        let value = kernels::matmul(self.value(a), self.value(b), a.rows, a.cols, b.cols);
        self.flops += 2 * (a.rows * a.cols * b.cols) as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, a.rows, b.cols, Op::MatMul(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        if bias.rows != 1 || bias.cols != x.cols {
            return shape_err("add_row", x.shape(), bias.shape());
        }
        let b = self.value(bias).to_vec();
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(x.cols) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.flops += x.numel() as u64;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, x.rows, x.cols, Op::AddRow(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return shape_err("add", a.shape(), b.shape());
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.flops += a.numel() as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, a.rows, a.cols, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return shape_err("mul", a.shape(), b.shape());
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.flops += a.numel() as u64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, a.rows, a.cols, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let value = self.value(x).iter().map(|&v| v * s).collect();
        self.flops += x.numel() as u64;
        let ng = self.needs(x);
        self.push(value, x.rows, x.cols, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.flops += x.numel() as u64;
        let ng = self.needs(x);
        self.push(value, x.rows, x.cols, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        self.flops += x.numel() as u64;
        let ng = self.needs(x);
        self.push(value, x.rows, x.cols, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.flops += x.numel() as u64;
        let ng = self.needs(x);
        self.push(value, x.rows, x.cols, Op::Tanh(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument { op: "concat_cols", msg: "no inputs".into() });
        };
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return shape_err("concat_cols", first.shape(), bad.shape());
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                value.extend_from_slice(&self.value(*p)[r * p.cols..(r + 1) * p.cols]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, rows, cols, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > x.cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {} columns", x.cols),
            });
        }
        let cols = end - start;
        let src = self.value(x);
        let mut value = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            value.extend_from_slice(&src[r * x.cols + start..r * x.cols + end]);
        }
        let ng = self.needs(x);
        Ok(self.push(value, x.rows, cols, Op::SliceCols(x, start), ng))
    }

    /// Row `indices[i]` of `x` becomes row `i` of the output.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", x.rows),
            });
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(indices.len() * x.cols);
        for &i in &indices {
            value.extend_from_slice(&src[i * x.cols..(i + 1) * x.cols]);
        }
        let rows = indices.len();
        let ng = self.needs(x);
        Ok(self.push(value, rows, x.cols, Op::GatherRows(x, indices), ng))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument { op: "stack_rows", msg: "no inputs".into() });
        };
        let cols = first.cols;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return shape_err("stack_rows", first.shape(), bad.shape());
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, rows, cols, Op::StackRows(parts.to_vec()), ng))
    }

    /// Per-group, per-column standardization over runs of `group` rows.
    pub fn standardize_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 || x.rows % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "standardize_groups",
                msg: format!("{} rows do not split into groups of {group}", x.rows),
            });
        }
        let (value, scales) = kernels::standardize_groups(self.value(x), x.cols, group);
        self.flops += ((x.rows / group) * x.cols * (5 * group + 3)) as u64;
        let ng = self.needs(x);
        Ok(self.push(value, x.rows, x.cols, Op::Standardize { x, group, scales }, ng))
    }

    /// Softmax over each run of `group` rows of a single-column input.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        if x.cols != 1 || group == 0 || x.rows % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_groups",
                msg: format!("expected (G*{group})x1 input, got {}x{}", x.rows, x.cols),
            });
        }
        let value = kernels::softmax_groups(self.value(x), group);
        self.flops += 4 * x.numel() as u64;
        let ng = self.needs(x);
        Ok(self.push(value, x.rows, 1, Op::SoftmaxGroups(x, group), ng))
    }

    /// `out[g] = sum_k w[g*K + k] * x[g*K + k]`, weights as a column.
    pub fn group_weighted_sum(&mut self, x: Var, w: Var, group: usize) -> Result<Var> {
        if w.cols != 1 || w.rows != x.rows || group == 0 || x.rows % group != 0 {
            return shape_err("group_weighted_sum", x.shape(), w.shape());
        }
        let groups = x.rows / group;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut value = vec![F::zero(); groups * x.cols];
        for g in 0..groups {
            let dst = &mut value[g * x.cols..(g + 1) * x.cols];
            for k in 0..group {
                let r = g * group + k;
                let wk = wv[r];
                for (d, &s) in dst.iter_mut().zip(&xv[r * x.cols..(r + 1) * x.cols]) {
                    *d += wk * s;
                }
            }
        }
        self.flops += 2 * x.numel() as u64;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, groups, x.cols, Op::GroupWeightedSum { x, w, group }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.flops += x.numel() as u64;
        let ng = self.needs(x);
        self.push(vec![s], 1, 1, Op::Sum(x), ng)
    }

    /// Weighted per-axis mean squared error over masked rows of an `n x 2` prediction.
    pub fn wmse(&mut self, pred: Var, target: &[F], mask: &[bool], wx: F, wy: F) -> Result<Var> {
        if pred.cols != 2 || target.len() != pred.numel() || mask.len() != pred.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "wmse",
                left: vec![pred.rows, pred.cols],
                right: vec![target.len() / 2, 2, mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::InvalidArgument { op: "wmse", msg: "every entry is masked".into() });
        }
        let p = self.value(pred);
        let (mut sx, mut sy) = (F::zero(), F::zero());
        for r in (0..pred.rows).filter(|&r| mask[r]) {
            let dx = p[2 * r] - target[2 * r];
            let dy = p[2 * r + 1] - target[2 * r + 1];
            sx += dx * dx;
            sy += dy * dy;
        }
        let n = F::of(count as f64);
        let value = wx * sx / n + wy * sy / n;
        let ng = self.needs(pred);
        Ok(self.push(
            vec![value],
            1,
            1,
            Op::Wmse { pred, target: target.to_vec(), mask: mask.to_vec(), wx, wy, count },
            ng,
        ))
    }

    pub fn backward(&self, root: Var) -> Gradients<F> {
        self.backward_seeded(root, F::one())
    }

    /// Reverse sweep from a scalar `root` whose upstream gradient is `seed`.
    pub fn backward_seeded(&self, root: Var, seed: F) -> Gradients<F> {
        assert_eq!(root.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![seed]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.id].needs_grad {
            return None;
        }
        Some(grads[v.id].get_or_insert_with(|| vec![F::zero(); v.numel()]))
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = (a.rows, a.cols, b.cols);
                if let Some(ga) = self.slot(grads, *a) {
                    let d = kernels::matmul_bt(g, self.value(*b), m, n, k);
                    for (x, y) in ga.iter_mut().zip(d) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(x.cols) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(self.value(*b)) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(self.value(*a)) {
                        *x += y * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b * *s;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(self.value(*x)) {
                        if v > F::zero() {
                            *a += b;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &b), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += b * y * (F::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &b), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += b * (F::one() - y * y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols: usize = parts.iter().map(|p| p.cols).sum();
                let mut offset = 0;
                for p in parts {
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..p.rows {
                            let src = &g[r * cols + offset..r * cols + offset + p.cols];
                            for (a, &b) in gp[r * p.cols..(r + 1) * p.cols].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += p.cols;
                }
            }
            Op::SliceCols(x, start) => {
                let cols = g.len() / x.rows;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..x.rows {
                        let dst = &mut gx[r * x.cols + start..r * x.cols + start + cols];
                        for (a, &b) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = x.cols;
                    for (out_row, &i) in indices.iter().enumerate() {
                        for (a, &b) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[out_row * c..(out_row + 1) * c]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (a, &b) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *a += b;
                        }
                    }
                    offset += n;
                }
            }
            Op::Standardize { x, group, scales } => {
                let Some(gx) = self.slot(grads, *x) else { return };
                let (cols, k) = (x.cols, *group);
                let kf = F::of(k as f64);
                let y = &node.value;
                for gi in 0..x.rows / k {
                    for c in 0..cols {
                        let (inv, degenerate) = scales[gi * cols + c];
                        let idx = |r: usize| (gi * k + r) * cols + c;
                        let mut mean_g = F::zero();
                        let mut mean_gy = F::zero();
                        for r in 0..k {
                            mean_g += g[idx(r)];
                            mean_gy += g[idx(r)] * y[idx(r)];
                        }
                        mean_g /= kf;
                        mean_gy /= kf;
                        for r in 0..k {
                            let i = idx(r);
                            gx[i] += if degenerate {
                                g[i] - mean_g
                            } else {
                                inv * (g[i] - mean_g - y[i] * mean_gy)
                            };
                        }
                    }
                }
            }
            Op::SoftmaxGroups(x, group) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = &node.value;
                    for start in (0..y.len()).step_by(*group) {
                        let end = start + group;
                        let dot: F = (start..end).map(|i| y[i] * g[i]).sum();
                        for i in start..end {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::GroupWeightedSum { x, w, group } => {
                let c = x.cols;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..x.rows {
                        let gout = &g[(r / group) * c..(r / group + 1) * c];
                        for (a, &b) in gx[r * c..(r + 1) * c].iter_mut().zip(gout) {
                            *a += wv[r] * b;
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..x.rows {
                        let gout = &g[(r / group) * c..(r / group + 1) * c];
                        let dot: F = xv[r * c..(r + 1) * c].iter().zip(gout).map(|(&a, &b)| a * b).sum();
                        gw[r] += dot;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Wmse { pred, target, mask, wx, wy, count } => {
                if let Some(gp) = self.slot(grads, *pred) {
                    let p = self.value(*pred);
                    let two_over_n = F::of(2.0) / F::of(*count as f64);
                    for r in (0..pred.rows).filter(|&r| mask[r]) {
                        gp[2 * r] += g[0] * *wx * two_over_n * (p[2 * r] - target[2 * r]);
                        gp[2 * r + 1] += g[0] * *wy * two_over_n * (p[2 * r + 1] - target[2 * r + 1]);
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients indexed by `ParamId`, for a store with `n_params` entries.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<F>>> {
        (0..n_params)
            .map(|i| match self.param_vars.get(i) {
                Some(Some(v)) => self.grads[v.id].clone(),
                _ => None,
            })
            .collect()
    }
}
