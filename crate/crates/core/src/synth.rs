//! Synthetic pupil-event generator.
//!
//! The pupil is a ring of radius `ring_radius` whose center follows a smooth
//! sum-of-sinusoids trajectory plus Poisson-timed saccades. Ring events fire
//! at a rate proportional to pupil speed (plus a small floor), so fast motion
//! yields dense windows and fixations sparse ones. Uniform sensor noise can
//! be layered on top. Labels are the true center at 100 Hz, covering both stream ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity, PupilLabel, Resolution};

/// Label period in microseconds (100 Hz).
pub const LABEL_PERIOD_US: u64 = 10_000;
/// Rate integration bin in microseconds.
pub const BIN_US: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub amplitude: f64,
    pub freq_hz: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub duration_ms: u64,
    /// Base pupil center; `None` means the frame center.
    pub center: Option<[f64; 2]>,
    pub x_harmonics: Vec<Harmonic>,
    pub y_harmonics: Vec<Harmonic>,
    /// Saccades per second.
    pub saccade_rate: f64,
    /// Saccade jump length in pixels.
    pub saccade_magnitude: f64,
    pub saccade_duration_ms: f64,
    pub ring_radius: f64,
    /// Ring events per pixel of center displacement.
    pub event_gain: f64,
    /// Ring events per second independent of motion.
    pub floor_rate: f64,
    /// Uniform noise events per second over the whole frame.
    pub noise_rate: f64,
    /// Label intervals `[start_ms, end_ms)` marked invalid.
    pub invalid_ms: Vec<[u64; 2]>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            duration_ms: 2_000,
            center: None,
            x_harmonics: vec![
                Harmonic { amplitude: 6.0, freq_hz: 1.3, phase: 0.0 },
                Harmonic { amplitude: 2.5, freq_hz: 3.7, phase: 1.0 },
            ],
            y_harmonics: vec![
                Harmonic { amplitude: 4.0, freq_hz: 0.9, phase: 0.5 },
                Harmonic { amplitude: 2.0, freq_hz: 2.9, phase: 2.0 },
            ],
            saccade_rate: 1.5,
            saccade_magnitude: 8.0,
            saccade_duration_ms: 20.0,
            ring_radius: 5.0,
            event_gain: 60.0,
            floor_rate: 2_000.0,
            noise_rate: 0.0,
            invalid_ms: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth: {msg}")));
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive".into());
        }
        let rates = [self.saccade_rate, self.saccade_magnitude, self.event_gain, self.floor_rate, self.noise_rate];
        if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("rates and magnitudes must be finite and non-negative".into());
        }
        let half = f64::from(self.width.min(self.height)) / 2.0;
        if !(self.ring_radius >= 0.0 && self.ring_radius < half) {
            return bad(format!("ring radius {} must be below {half}", self.ring_radius));
        }
        if self.saccade_rate > 0.0 && self.saccade_duration_ms <= 0.0 {
            return bad("saccade duration must be positive".into());
        }
        let [lo_x, hi_x, lo_y, hi_y] = self.center_box();
        if lo_x > hi_x || lo_y > hi_y {
            return bad("trajectory amplitudes leave no room for the ring inside the frame".into());
        }
        let [cx, cy] = self.base_center();
        let sx = self.x_harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>();
        let sy = self.y_harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>();
        if cx - sx < lo_x - 1e-9 || cx + sx > hi_x + 1e-9 || cy - sy < lo_y - 1e-9 || cy + sy > hi_y + 1e-9 {
            return bad("base trajectory leaves the frame".into());
        }
        Ok(())
    }

    fn base_center(&self) -> [f64; 2] {
        self.center.unwrap_or([f64::from(self.width) / 2.0, f64::from(self.height) / 2.0])
    }

    /// Bounds the ring center must stay within so every ring pixel rounds into the frame.
    fn center_box(&self) -> [f64; 4] {
        let r = self.ring_radius + 0.5;
        [r, f64::from(self.width) - 1.0 - r, r, f64::from(self.height) - 1.0 - r]
    }
}

#[derive(Clone, Copy, Debug)]
struct Saccade {
    start_us: f64,
    end_us: f64,
    from: [f64; 2],
    to: [f64; 2],
}

/// Ground-truth pupil center trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    base: [f64; 2],
    x: Vec<Harmonic>,
    y: Vec<Harmonic>,
    saccades: Vec<Saccade>,
}

fn harmonics(hs: &[Harmonic], t_s: f64) -> f64 {
    hs.iter().map(|h| h.amplitude * (std::f64::consts::TAU * h.freq_hz * t_s + h.phase).sin()).sum()
}

impl Trajectory {
    fn build(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = cfg.base_center();
        let mut saccades = Vec::new();
        if cfg.saccade_rate > 0.0 && cfg.saccade_magnitude > 0.0 {
            let [lo_x, hi_x, lo_y, hi_y] = cfg.center_box();
            let sx = cfg.x_harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>();
            let sy = cfg.y_harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>();
            // Offsets keep base + harmonics + offset inside the box.
            let off_box = [lo_x + sx - base[0], hi_x - sx - base[0], lo_y + sy - base[1], hi_y - sy - base[1]];
            let gap = Exp::new(cfg.saccade_rate).expect("positive rate");
            let dur = cfg.saccade_duration_ms * 1_000.0;
            let total = cfg.duration_ms as f64 * 1_000.0;
            let mut offset = [0.0, 0.0];
            let mut t = 0.0;
            let mut free_at = 0.0;
            loop {
                t += gap.sample(rng) * 1e6;
                if t >= total {
                    break;
                }
                let snapped = ((t / LABEL_PERIOD_US as f64).floor() * LABEL_PERIOD_US as f64).max(free_at);
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let to = [
                    (offset[0] + cfg.saccade_magnitude * angle.cos()).clamp(off_box[0], off_box[1]),
                    (offset[1] + cfg.saccade_magnitude * angle.sin()).clamp(off_box[2], off_box[3]),
                ];
                saccades.push(Saccade { start_us: snapped, end_us: snapped + dur, from: offset, to });
                offset = to;
                free_at = snapped + dur;
            }
        }
        Self { base, x: cfg.x_harmonics.clone(), y: cfg.y_harmonics.clone(), saccades }
    }

    fn saccade_offset(&self, t_us: f64) -> [f64; 2] {
        let i = self.saccades.partition_point(|s| s.start_us <= t_us);
        if i == 0 {
            return [0.0, 0.0];
        }
        let s = &self.saccades[i - 1];
        if t_us >= s.end_us {
            return s.to;
        }
        let u = (t_us - s.start_us) / (s.end_us - s.start_us);
        [s.from[0] + u * (s.to[0] - s.from[0]), s.from[1] + u * (s.to[1] - s.from[1])]
    }

    /// Pupil center at `t_us` microseconds.
    pub fn center(&self, t_us: f64) -> [f64; 2] {
        let t_s = t_us * 1e-6;
        let off = self.saccade_offset(t_us);
        [self.base[0] + harmonics(&self.x, t_s) + off[0], self.base[1] + harmonics(&self.y, t_s) + off[1]]
    }

    /// Number of saccades in the trajectory.
    pub fn saccade_count(&self) -> usize {
        self.saccades.len()
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub stream: EventStream,
    pub labels: Vec<PupilLabel>,
    pub trajectory: Trajectory,
}

fn bins(cfg: &SynthConfig) -> impl Iterator<Item = (u64, u64)> {
    let total = cfg.duration_ms * 1_000;
    (0..total.div_ceil(BIN_US)).map(move |b| (b * BIN_US, ((b + 1) * BIN_US).min(total)))
}

fn bin_ring_mean(cfg: &SynthConfig, traj: &Trajectory, t0: u64, t1: u64) -> f64 {
    let a = traj.center(t0 as f64);
    let b = traj.center(t1 as f64);
    let dist = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    cfg.event_gain * dist + cfg.floor_rate * (t1 - t0) as f64 * 1e-6
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Generates an event stream and its 100 Hz labels. Identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = Trajectory::build(cfg, &mut rng);
    let res = cfg.resolution();
    let (w, h) = (f64::from(res.width), f64::from(res.height));
    let noise_mean = cfg.noise_rate * BIN_US as f64 * 1e-6;
    let mut events = Vec::new();
    let mut bin_events = Vec::new();
    for (t0, t1) in bins(cfg) {
        bin_events.clear();
        let a = traj.center(t0 as f64);
        let b = traj.center(t1 as f64);
        let vel = [b[0] - a[0], b[1] - a[1]];
        for _ in 0..poisson(&mut rng, bin_ring_mean(cfg, &traj, t0, t1)) {
            let t = rng.random_range(t0..t1);
            let c = traj.center(t as f64);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (nx, ny) = (angle.cos(), angle.sin());
            let x = (c[0] + cfg.ring_radius * nx).round().clamp(0.0, w - 1.0) as u16;
            let y = (c[1] + cfg.ring_radius * ny).round().clamp(0.0, h - 1.0) as u16;
            let dot = nx * vel[0] + ny * vel[1];
            let polarity = if dot > 0.0 {
                Polarity::Positive
            } else if dot < 0.0 {
                Polarity::Negative
            } else if rng.random::<bool>() {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            bin_events.push(Event::new(t, x, y, polarity));
        }
        for _ in 0..poisson(&mut rng, noise_mean) {
            let t = rng.random_range(t0..t1);
            let x = rng.random_range(0..res.width) as u16;
            let y = rng.random_range(0..res.height) as u16;
            let polarity = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            bin_events.push(Event::new(t, x, y, polarity));
        }
        bin_events.sort_by_key(|e| e.t);
        events.extend_from_slice(&bin_events);
    }
    let total = cfg.duration_ms * 1_000;
    let labels = (0..=total / LABEL_PERIOD_US)
        .map(|k| {
            let t = k * LABEL_PERIOD_US;
            let c = traj.center(t as f64);
            let valid = !cfg.invalid_ms.iter().any(|&[s, e]| t >= s * 1_000 && t < e * 1_000);
            PupilLabel { t: t as f64, x: c[0], y: c[1], valid }
        })
        .collect();
    let stream = EventStream::new(events, res).with_duration(total);
    Ok(SynthOutput { stream, labels, trajectory: traj })
}

/// Mean of the total event count the generator draws for `cfg`.
pub fn expected_event_count(cfg: &SynthConfig) -> Result<f64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = Trajectory::build(cfg, &mut rng);
    let ring: f64 = bins(cfg).map(|(t0, t1)| bin_ring_mean(cfg, &traj, t0, t1)).sum();
    Ok(ring + cfg.noise_rate * cfg.duration_ms as f64 * 1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::validate_stream;
    use crate::io::label_at;

    #[test]
    fn zero_rates_give_empty_stream_with_labels() {
        let cfg = SynthConfig { duration_ms: 50, event_gain: 0.0, floor_rate: 0.0, noise_rate: 0.0, ..Default::default() };
        let out = synth_generate(&cfg).unwrap();
        assert!(out.stream.is_empty());
        let ts: Vec<f64> = out.labels.iter().map(|l| l.t).collect();
        assert_eq!(ts, vec![0.0, 10_000.0, 20_000.0, 30_000.0, 40_000.0, 50_000.0]);
        assert_eq!(out.stream.duration_us(), 50_000);
    }

    #[test]
    fn stationary_ring_surrounds_constant_label() {
        let cfg = SynthConfig {
            duration_ms: 200,
            x_harmonics: vec![],
            y_harmonics: vec![],
            saccade_rate: 0.0,
            floor_rate: 5_000.0,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        assert!(out.stream.len() > 500);
        let l = out.labels[0];
        assert!(out.labels.iter().all(|m| m.x == l.x && m.y == l.y));
        let (mut mx, mut my) = (0.0, 0.0);
        for e in out.stream.events() {
            let d = ((f64::from(e.x) - l.x).powi(2) + (f64::from(e.y) - l.y).powi(2)).sqrt();
            assert!(d <= cfg.ring_radius + 1.0, "event at distance {d}");
            mx += f64::from(e.x);
            my += f64::from(e.y);
        }
        let n = out.stream.len() as f64;
        assert!((mx / n - l.x).abs() < 0.5 && (my / n - l.y).abs() < 0.5);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = SynthConfig { seed: 11, noise_rate: 300.0, ..Default::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.stream.events(), b.stream.events());
        assert_eq!(a.labels, b.labels);
        let c = synth_generate(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.stream.events(), c.stream.events());
    }

    #[test]
    fn noiseless_events_stay_on_ring() {
        for seed in 0..5 {
            let cfg = SynthConfig { seed, saccade_rate: 4.0, ..Default::default() };
            let out = synth_generate(&cfg).unwrap();
            assert!(validate_stream(&out.stream).is_empty());
            assert!(out.trajectory.saccade_count() > 0 || seed > 0);
            for e in out.stream.events() {
                let l = label_at(&out.labels, e.t as f64);
                let d = ((f64::from(e.x) - l.x).powi(2) + (f64::from(e.y) - l.y).powi(2)).sqrt();
                assert!(d <= cfg.ring_radius + 1.0, "seed {seed}: event {e:?} at distance {d}");
            }
        }
    }

    #[test]
    fn event_count_matches_poisson_mean() {
        for seed in [3, 4, 5] {
            let cfg = SynthConfig { seed, duration_ms: 20_000, noise_rate: 500.0, ..Default::default() };
            let lambda = expected_event_count(&cfg).unwrap();
            let n = synth_generate(&cfg).unwrap().stream.len() as f64;
            assert!((n - lambda).abs() <= 3.0 * lambda.sqrt(), "seed {seed}: {n} vs {lambda}");
        }
    }

    #[test]
    fn invalid_intervals_clear_labels() {
        let cfg = SynthConfig { duration_ms: 100, invalid_ms: vec![[20, 40]], ..Default::default() };
        let out = synth_generate(&cfg).unwrap();
        let flags: Vec<bool> = out.labels.iter().map(|l| l.valid).collect();
        assert_eq!(flags, vec![true, true, false, false, true, true, true, true, true, true, true]);
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let cfg = SynthConfig { ring_radius: 30.0, ..Default::default() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }
}
