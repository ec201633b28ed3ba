//! Point-set preprocessing and geometry: downsampling a window to `N`
//! events, normalizing to the unit cube, farthest point sampling, k-nearest
//! neighbor grouping and per-group standardization.
//!
//! Geometry always works on `(x', y', t')` coordinates in `f64`; distances
//! are squared Euclidean with `t'` weighted like the spatial axes.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::event::Window;

/// Index-map entry for sentinel points that have no source event.
pub const NO_SOURCE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// +1 or -1; 0 for sentinels.
    pub polarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsampled {
    pub points: Vec<RawPoint>,
    /// Source event index within the window, or [`NO_SOURCE`].
    pub indices: Vec<usize>,
    /// False when the window was empty and `points` are sentinels.
    pub valid: bool,
}

/// Draws exactly `n` events from `window`, in temporal order.
///
/// With at least `n` events this is a uniform subset without replacement.
/// With fewer, every event is kept once and the remainder drawn with
/// replacement. An empty window yields `n` sentinels at the window's
/// spatio-temporal center.
pub fn downsample<R: Rng + ?Sized>(window: &Window, n: usize, rng: &mut R) -> Downsampled {
    assert!(n > 0, "downsample needs n > 0");
    let events = &window.events;
    if events.is_empty() {
        let res = window.resolution;
        let p = RawPoint {
            t: (window.t_start + window.t_end) as f64 / 2.0,
            x: f64::from(res.width) / 2.0,
            y: f64::from(res.height) / 2.0,
            polarity: 0.0,
        };
        return Downsampled { points: vec![p; n], indices: vec![NO_SOURCE; n], valid: false };
    }
    let mut idx: Vec<usize> = if events.len() >= n {
        index::sample(rng, events.len(), n).into_vec()
    } else {
        let mut v: Vec<usize> = (0..events.len()).collect();
        v.extend((events.len()..n).map(|_| rng.random_range(0..events.len())));
        v
    };
    idx.sort_unstable();
    let points = idx
        .iter()
        .map(|&i| {
            let e = events[i];
            RawPoint { t: e.t as f64, x: f64::from(e.x), y: f64::from(e.y), polarity: f64::from(e.polarity.sign()) }
        })
        .collect();
    Downsampled { points, indices: idx, valid: true }
}

/// `N x C` normalized features; the first three channels are `(x', y', t')`,
/// an optional fourth is polarity mapped to `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub features: Vec<f64>,
    pub channels: usize,
    pub indices: Vec<usize>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.features.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| {
            let r = self.row(i);
            [r[0], r[1], r[2]]
        }).collect()
    }
}

/// `x' = x / w`, `y' = y / h`, `t' = (t - t_min) / (t_max - t_min)`; a
/// zero time span maps every `t'` to 0.5.
pub fn normalize(points: &[RawPoint], w: f64, h: f64, t_min: f64, t_max: f64, include_polarity: bool) -> Vec<f64> {
    let span = t_max - t_min;
    let c = if include_polarity { 4 } else { 3 };
    let mut out = Vec::with_capacity(points.len() * c);
    for p in points {
        out.push(p.x / w);
        out.push(p.y / h);
        out.push(if span > 0.0 { (p.t - t_min) / span } else { 0.5 });
        if include_polarity {
            out.push((p.polarity + 1.0) / 2.0);
        }
    }
    out
}

fn cmp_raw(a: &RawPoint, b: &RawPoint) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.polarity.total_cmp(&b.polarity))
}

/// Downsamples and normalizes a window into a point set. Points are put in
/// canonical `(t, x, y, polarity)` order so the result does not depend on
/// how simultaneous events were listed; time bounds come from the drawn points.
pub fn window_points<R: Rng + ?Sized>(window: &Window, n: usize, include_polarity: bool, rng: &mut R) -> (PointSet, bool) {
    let mut d = downsample(window, n, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_raw(&d.points[a], &d.points[b]).then(a.cmp(&b)));
    d.points = order.iter().map(|&i| d.points[i]).collect();
    d.indices = order.iter().map(|&i| d.indices[i]).collect();
    let t_min = d.points.iter().map(|p| p.t).fold(f64::INFINITY, f64::min);
    let t_max = d.points.iter().map(|p| p.t).fold(f64::NEG_INFINITY, f64::max);
    let res = window.resolution;
    let features = normalize(&d.points, f64::from(res.width), f64::from(res.height), t_min, t_max, include_polarity);
    let channels = if include_polarity { 4 } else { 3 };
    (PointSet { features, channels, indices: d.indices }, d.valid)
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    dx * dx + dy * dy + dt * dt
}

/// Greedy farthest point sampling starting at `start`; each next index
/// maximizes its distance to the chosen set, ties to the lowest index.
pub fn fps(points: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::arg("fps", format!("need 1 <= M <= N, got M = {m}, N = {n}")));
    }
    if start >= n {
        return Err(Error::arg("fps", format!("start index {start} out of range for N = {n}")));
    }
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    loop {
        out.push(cur);
        chosen[cur] = true;
        if out.len() == m {
            return Ok(out);
        }
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if chosen[j] {
                continue;
            }
            let d = dist2(&points[cur], &points[j]);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
}

fn check_knn(n: usize, centroids: &[usize], k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::arg("knn", format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    if let Some(&c) = centroids.iter().find(|&&c| c >= n) {
        return Err(Error::arg("knn", format!("centroid index {c} out of range for N = {n}")));
    }
    Ok(())
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Row-major `M x K` neighbor indices: the centroid first, then the `K - 1`
/// nearest other points ordered by (distance, index).
pub fn knn(points: &[[f64; 3]], centroids: &[usize], k: usize) -> Result<Vec<usize>> {
    check_knn(points.len(), centroids, k)?;
    let mut out = Vec::with_capacity(centroids.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &c in centroids {
        cand.clear();
        cand.extend((0..points.len()).filter(|&j| j != c).map(|j| (dist2(&points[c], &points[j]), j)));
        if k > 1 {
            cand.select_nth_unstable_by(k - 2, by_distance);
            cand[..k - 1].sort_unstable_by(by_distance);
        }
        out.push(c);
        out.extend(cand[..k - 1].iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Exact uniform-grid variant of [`knn`]; results are identical.
pub fn knn_grid(points: &[[f64; 3]], centroids: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    check_knn(n, centroids, k)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let cells_per_axis = ((n as f64 / k.max(2) as f64).cbrt().ceil() as usize).clamp(1, 64);
    let size: [f64; 3] = std::array::from_fn(|a| ((hi[a] - lo[a]) / cells_per_axis as f64).max(1e-12));
    let cell_of = |p: &[f64; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / size[a]) as usize).min(cells_per_axis - 1))
    };
    let flat = |c: [usize; 3]| (c[0] * cells_per_axis + c[1]) * cells_per_axis + c[2];
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells_per_axis.pow(3)];
    for (j, p) in points.iter().enumerate() {
        buckets[flat(cell_of(p))].push(j);
    }

    let mut out = Vec::with_capacity(centroids.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &c in centroids {
        let q = &points[c];
        let qc = cell_of(q);
        cand.clear();
        let mut r = 0usize;
        loop {
            for i in qc[0].saturating_sub(r)..=(qc[0] + r).min(cells_per_axis - 1) {
                for j in qc[1].saturating_sub(r)..=(qc[1] + r).min(cells_per_axis - 1) {
                    for l in qc[2].saturating_sub(r)..=(qc[2] + r).min(cells_per_axis - 1) {
                        let ring = i.abs_diff(qc[0]).max(j.abs_diff(qc[1])).max(l.abs_diff(qc[2]));
                        if ring != r {
                            continue;
                        }
                        for &p in &buckets[flat([i, j, l])] {
                            if p != c {
                                cand.push((dist2(q, &points[p]), p));
                            }
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|a| qc[a] <= r && qc[a] + r >= cells_per_axis - 1);
            if covers_all {
                break;
            }
            if cand.len() >= k - 1 {
                // Any unvisited point lies outside the visited cube of cells.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if qc[a] > r {
                        bound = bound.min(q[a] - (lo[a] + (qc[a] - r) as f64 * size[a]));
                    }
                    if qc[a] + r < cells_per_axis - 1 {
                        bound = bound.min(lo[a] + (qc[a] + r + 1) as f64 * size[a] - q[a]);
                    }
                }
                let bound = (bound - 1e-9).max(0.0);
                if k == 1 {
                    break;
                }
                cand.select_nth_unstable_by(k - 2, by_distance);
                if cand[k - 2].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        if k > 1 {
            cand.select_nth_unstable_by(k - 2, by_distance);
            cand[..k - 1].sort_unstable_by(by_distance);
        }
        out.push(c);
        out.extend(cand[..k - 1].iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Standardizes each of the `c` channels of a `k x c` group to zero mean and
/// unit population std; constant channels are only centered.
pub fn standardize_group(group: &[f64], c: usize) -> Vec<f64> {
    let k = group.len() / c;
    fapnet_autodiff::kernels::standardize_groups(group, c, k).0
}

/// FPS centroids, their KNN groups and the standardized member features with
/// each centroid's absolute `(x', y', t')` appended to every member.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub centroids: Vec<usize>,
    /// `M x K`, row-major.
    pub neighbors: Vec<usize>,
    pub k: usize,
    /// `M x K x (C + 3)`, row-major.
    pub features: Vec<f64>,
    pub channels: usize,
}

pub fn group_points(features: &[f64], channels: usize, coords: &[[f64; 3]], m: usize, k: usize) -> Result<Grouping> {
    let centroids = fps(coords, m, 0)?;
    let neighbors = knn(coords, &centroids, k)?;
    let out_c = channels + 3;
    let mut out = Vec::with_capacity(m * k * out_c);
    let mut group = Vec::with_capacity(k * channels);
    for (g, &c) in centroids.iter().enumerate() {
        group.clear();
        for &j in &neighbors[g * k..(g + 1) * k] {
            group.extend_from_slice(&features[j * channels..(j + 1) * channels]);
        }
        let std = standardize_group(&group, channels);
        for r in 0..k {
            out.extend_from_slice(&std[r * channels..(r + 1) * channels]);
            out.extend_from_slice(&coords[c]);
        }
    }
    Ok(Grouping { centroids, neighbors, k, features: out, channels: out_c })
}
