//! Temporal windowing: fixed split, frequency-adaptive expansion, sequence
//! assembly and trajectory inversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{EventStream, PupilLabel, Window};
use crate::io::label_at;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowingConfig {
    pub window_ms: u64,
    /// Expansion stops once a window holds this many events.
    pub adaptive_threshold: usize,
    pub max_window_ms: u64,
    /// Per-side growth per expansion iteration.
    pub step_ms: u64,
    pub seq_len: usize,
    /// Apply adaptive expansion (training and evaluation alike).
    pub adaptive: bool,
    /// Add time-inverted copies of training recordings.
    pub augment_invert: bool,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            window_ms: 10,
            adaptive_threshold: 1024,
            max_window_ms: 100,
            step_ms: 5,
            seq_len: 20,
            adaptive: true,
            augment_invert: false,
        }
    }
}

impl WindowingConfig {
    pub fn base_us(&self) -> u64 {
        self.window_ms * 1_000
    }

    pub fn max_us(&self) -> u64 {
        self.max_window_ms * 1_000
    }

    pub fn step_us(&self) -> u64 {
        self.step_ms * 1_000
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_ms == 0 {
            return Err(Error::Config("windowing: window_ms must be positive".into()));
        }
        if self.window_ms > self.max_window_ms {
            return Err(Error::Config(format!(
                "windowing: window_ms {} exceeds max_window_ms {}",
                self.window_ms, self.max_window_ms
            )));
        }
        if self.step_ms == 0 {
            return Err(Error::Config("windowing: step_ms must be positive".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("windowing: seq_len must be positive".into()));
        }
        Ok(())
    }
}

fn label_for(labels: &[PupilLabel], t: f64) -> PupilLabel {
    if labels.is_empty() {
        PupilLabel { t, x: 0.0, y: 0.0, valid: false }
    } else {
        label_at(labels, t)
    }
}

/// Tiles `[0, duration)` with half-open windows of the base length. Without
/// labels every window gets an invalid placeholder label.
pub fn split_fixed(stream: &EventStream, labels: &[PupilLabel], cfg: &WindowingConfig) -> Vec<Window> {
    let base = cfg.base_us();
    let count = stream.duration_us().div_ceil(base);
    (0..count)
        .map(|k| {
            let (t_start, t_end) = (k * base, (k + 1) * base);
            let center = (t_start + t_end) as f64 / 2.0;
            Window {
                t_start,
                t_end,
                events: stream.slice(stream.range_of(t_start, t_end)),
                label: label_for(labels, center),
                nominal_center: center,
                resolution: stream.resolution(),
            }
        })
        .collect()
}

/// Upper time bound a window may grow to: the stream end, or the window's
/// own end for a trailing window that overhangs it.
pub fn expansion_bound(window: &Window, stream: &EventStream) -> u64 {
    stream.duration_us().max(window.t_end)
}

/// Grows a sparse window equally on both sides until it holds
/// `adaptive_threshold` events or spans `min(max_window, bound)`. Growth that
/// would cross a stream edge is moved to the open side.
pub fn expand_adaptive(window: &Window, stream: &EventStream, cfg: &WindowingConfig) -> Window {
    if window.len() >= cfg.adaptive_threshold {
        return window.clone();
    }
    let bound = expansion_bound(window, stream);
    let cap = cfg.max_us().min(bound).max(window.span_us());
    let (mut start, mut end) = (window.t_start, window.t_end);
    let mut range = stream.range_of(start, end);
    while range.len() < cfg.adaptive_threshold && end - start < cap {
        let target = (end - start + 2 * cfg.step_us()).min(cap);
        let extra = target - (end - start);
        let mut left = extra / 2;
        let mut right = extra - left;
        if left > start {
            right += left - start;
            left = start;
        }
        if end + right > bound {
            left += end + right - bound;
            right = bound - end;
        }
        start -= left.min(start);
        end += right;
        range = stream.range_of(start, end);
    }
    Window { t_start: start, t_end: end, events: stream.slice(range), ..window.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Drop a trailing partial chunk.
    Train,
    /// Pad a trailing partial chunk by repeating its last element.
    Eval,
}

/// `len` consecutive items; `mask[i]` is false for padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<T> {
    pub items: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T> Sequence<T> {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Splits `items` into consecutive non-overlapping chunks of `seq_len`.
pub fn make_sequences<T: Clone>(items: &[T], seq_len: usize, mode: SequenceMode) -> Vec<Sequence<T>> {
    assert!(seq_len > 0, "sequence length must be positive");
    let mut out = Vec::with_capacity(items.len().div_ceil(seq_len));
    for chunk in items.chunks(seq_len) {
        if chunk.len() == seq_len {
            out.push(Sequence { items: chunk.to_vec(), mask: vec![true; seq_len] });
        } else if mode == SequenceMode::Eval {
            let mut v = chunk.to_vec();
            let last = chunk[chunk.len() - 1].clone();
            v.resize(seq_len, last);
            let mut mask = vec![true; chunk.len()];
            mask.resize(seq_len, false);
            out.push(Sequence { items: v, mask });
        }
    }
    out
}

/// Time-reverses the span `[T0, T_end)` covered by `windows`: an event at
/// `t` moves to `T0 + T_end - 1 - t`, the window `[a, b)` becomes
/// `[T0 + T_end - b, T0 + T_end - a)`, and the window order (with labels)
/// reverses. Returns the inverted stream the new windows slice into.
pub fn augment_invert(windows: &[Window], stream: &EventStream) -> (EventStream, Vec<Window>) {
    if windows.is_empty() {
        return (stream.clone(), Vec::new());
    }
    let t0 = windows.iter().map(|w| w.t_start).min().expect("nonempty");
    let t_end = windows.iter().map(|w| w.t_end).max().expect("nonempty");
    let range = stream.range_of(t0, t_end);
    let flipped: Vec<_> = stream.events()[range]
        .iter()
        .rev()
        .map(|e| crate::event::Event { t: t0 + t_end - 1 - e.t, ..*e })
        .collect();
    let inverted = EventStream::new(flipped, stream.resolution()).with_duration(stream.duration_us());
    let out = windows
        .iter()
        .rev()
        .map(|w| {
            let (a, b) = (t0 + t_end - w.t_end, t0 + t_end - w.t_start);
            let center = (t0 + t_end) as f64 - w.nominal_center;
            Window {
                t_start: a,
                t_end: b,
                events: inverted.slice(inverted.range_of(a, b)),
                label: PupilLabel { t: center, ..w.label },
                nominal_center: center,
                resolution: w.resolution,
            }
        })
        .collect();
    (inverted, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, Polarity, Resolution};

    fn stream_at(ts: &[u64], duration: u64) -> EventStream {
        let ev = ts.iter().map(|&t| Event::new(t, 1, 1, Polarity::Positive)).collect();
        EventStream::new(ev, Resolution::new(8, 8)).with_duration(duration)
    }

    fn labels(n: usize) -> Vec<PupilLabel> {
        (0..n).map(|k| PupilLabel { t: k as f64 * 10_000.0, x: k as f64, y: 2.0 * k as f64, valid: true }).collect()
    }

    #[test]
    fn fifty_ms_gives_five_centered_windows() {
        let s = stream_at(&[], 50_000);
        let w = split_fixed(&s, &labels(6), &WindowingConfig::default());
        let centers: Vec<f64> = w.iter().map(|w| w.nominal_center).collect();
        assert_eq!(centers, vec![5_000.0, 15_000.0, 25_000.0, 35_000.0, 45_000.0]);
        assert!(w.iter().all(|w| w.is_empty()));
        assert_eq!(w[0].label.x, 0.5);
    }

    #[test]
    fn boundary_event_goes_to_next_window() {
        let s = stream_at(&[9_999, 10_000], 20_000);
        let w = split_fixed(&s, &labels(3), &WindowingConfig::default());
        assert_eq!(w[0].events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![9_999]);
        assert_eq!(w[1].events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![10_000]);
    }

    #[test]
    fn window_at_threshold_is_unchanged() {
        let s = stream_at(&[1, 2, 3, 50_000], 100_000);
        let cfg = WindowingConfig { adaptive_threshold: 3, ..Default::default() };
        let w = &split_fixed(&s, &[], &cfg)[0];
        assert_eq!(&expand_adaptive(w, &s, &cfg), w);
    }

    #[test]
    fn empty_stream_expands_to_cap() {
        let s = stream_at(&[], 500_000);
        let cfg = WindowingConfig { adaptive_threshold: 10, ..Default::default() };
        let ws = split_fixed(&s, &[], &cfg);
        for w in [&ws[0], &ws[20], &ws[49]] {
            let e = expand_adaptive(w, &s, &cfg);
            assert_eq!(e.span_us(), 100_000);
            assert!(e.is_empty());
            assert_eq!(e.nominal_center, w.nominal_center);
        }
        let first = expand_adaptive(&ws[0], &s, &cfg);
        assert_eq!((first.t_start, first.t_end), (0, 100_000));
    }

    #[test]
    fn uniform_stream_stops_at_forty_ms() {
        let ts: Vec<u64> = (0..200).map(|k| k * 1_000 + 500).collect();
        let s = stream_at(&ts, 200_000);
        let cfg = WindowingConfig { adaptive_threshold: 40, ..Default::default() };
        let ws = split_fixed(&s, &[], &cfg);
        let e = expand_adaptive(&ws[10], &s, &cfg);
        assert_eq!(e.span_us(), 40_000);
        assert!(e.len() >= 40);
        assert_eq!((e.t_start, e.t_end), (85_000, 125_000));
    }

    #[test]
    fn sequences_drop_or_pad_tail() {
        let items: Vec<usize> = (0..45).collect();
        assert_eq!(make_sequences(&items[..40], 20, SequenceMode::Train).len(), 2);
        assert_eq!(make_sequences(&items, 20, SequenceMode::Train).len(), 2);
        let eval = make_sequences(&items, 20, SequenceMode::Eval);
        assert_eq!(eval.len(), 3);
        assert_eq!(eval[2].real_len(), 5);
        assert_eq!(eval[2].mask.iter().filter(|m| !**m).count(), 15);
        assert!(eval[2].items[5..].iter().all(|&i| i == 44));
    }

    #[test]
    fn inversion_maps_endpoints_and_reverses_labels() {
        let s = stream_at(&[0], 30_000);
        let ws = split_fixed(&s, &labels(4), &WindowingConfig::default());
        let (inv, out) = augment_invert(&ws, &s);
        assert_eq!(inv.events()[0].t, 29_999);
        let xs: Vec<f64> = out.iter().map(|w| w.label.x).collect();
        let orig: Vec<f64> = ws.iter().rev().map(|w| w.label.x).collect();
        assert_eq!(xs, orig);
        assert_eq!(out[2].events.len(), 1);
        assert_eq!(out[0].nominal_center, 5_000.0);
    }

    #[test]
    fn palindrome_is_fixed_point() {
        let s = stream_at(&[100, 4_000, 5_999, 10_000, 11_999, 15_899], 16_000);
        let cfg = WindowingConfig { window_ms: 8, ..Default::default() };
        let ws = split_fixed(&s, &[], &cfg);
        let (inv, _) = augment_invert(&ws, &s);
        assert_eq!(inv.events(), s.events());
    }
}
