//! Dense kernels shared by the tape and by callers that need the same
//! arithmetic outside of a graph. Reductions run sequentially in index order
//! so results are bit-reproducible.

use crate::real::Real;

/// Channels whose population standard deviation falls at or below this value
/// are treated as constant and divided by one instead.
pub const STD_FLOOR: f64 = 1e-6;

/// `c[m x n] = a[m x k] * b[k x n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m x k] = a[m x n] * b[k x n]^T`
pub fn matmul_bt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub fn matmul_at_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Per group of `group` consecutive rows and per column: subtract the mean and
/// divide by the population standard deviation. Returns the standardized
/// values and, per (group, column), the divisor's reciprocal and whether the
/// column was degenerate.
pub fn standardize_groups<F: Real>(
    x: &[F],
    cols: usize,
    group: usize,
) -> (Vec<F>, Vec<(F, bool)>) {
    let rows = x.len() / cols;
    let groups = rows / group;
    let kf = F::of(group as f64);
    let floor = F::of(STD_FLOOR);
    let mut out = vec![F::zero(); x.len()];
    let mut scales = Vec::with_capacity(groups * cols);
    for g in 0..groups {
        let base = g * group;
        for c in 0..cols {
            let mut mean = F::zero();
            for r in 0..group {
                mean += x[(base + r) * cols + c];
            }
            mean /= kf;
            let mut var = F::zero();
            for r in 0..group {
                let d = x[(base + r) * cols + c] - mean;
                var += d * d;
            }
            var /= kf;
            let std = var.sqrt();
            let (inv, degenerate) = if std <= floor { (F::one(), true) } else { (F::one() / std, false) };
            for r in 0..group {
                let idx = (base + r) * cols + c;
                out[idx] = (x[idx] - mean) * inv;
            }
            scales.push((inv, degenerate));
        }
    }
    (out, scales)
}

/// Softmax over each run of `group` consecutive entries.
pub fn softmax_groups<F: Real>(x: &[F], group: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (chunk, dst) in x.chunks(group).zip(out.chunks_mut(group)) {
        let max = chunk.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (d, &v) in dst.iter_mut().zip(chunk) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}
