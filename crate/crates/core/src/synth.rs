//! Synthetic IR-like sequences and label generators.
//!
//! Frames are periodic Gaussian random fields: white noise low-passed in
//! Fourier space with a Gaussian transfer function of the configured
//! correlation length, advected by a Fourier phase shift each step and
//! refreshed with a fraction of new noise. Values are mapped to kelvin
//! (255 K ± 25 K per standard deviation) and normalized with the default
//! [`NormalizationSpec`].

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{normalize, Field, NormalizationSpec};
use crate::metrics::{BBox, TimedBox, TrackRecord};
use crate::rng::{self, tags, GaiaRng};

/// Minutes between consecutive frames.
pub const FRAME_INTERVAL_MIN: i64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub n_timesteps: usize,
    pub correlation_length: f64,
    /// (dy, dx) pixels per step, periodic.
    pub advection: (f64, f64),
    /// Fraction of fresh noise mixed in per step (0 = pure advection).
    #[serde(default = "default_innovation")]
    pub innovation: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

fn default_innovation() -> f64 {
    0.1
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            n_timesteps: 16,
            correlation_length: 6.0,
            advection: (0.0, 2.0),
            innovation: default_innovation(),
            missing_fraction: 0.075,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return invalid("synthetic grid must be non-empty");
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return invalid(format!("missing_fraction {} outside [0, 1)", self.missing_fraction));
        }
        if self.correlation_length < 1.0 {
            return invalid("correlation_length must be at least 1 pixel");
        }
        if !(0.0..=1.0).contains(&self.innovation) {
            return invalid("innovation must lie in [0, 1]");
        }
        Ok(())
    }
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
}

fn freq(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    k / n as f64
}

/// Spectrum of low-passed white noise.
fn noise_spectrum(h: usize, w: usize, ell: f64, rng: &mut GaiaRng) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(rng::normal(rng), 0.0))
        .collect();
    fft2(&mut data, h, w, false);
    for r in 0..h {
        for c in 0..w {
            let (fy, fx) = (freq(r, h), freq(c, w));
            data[r * w + c] *= (-2.0 * PI * PI * ell * ell * (fy * fy + fx * fx)).exp();
        }
    }
    data
}

fn to_real(spec: &[Complex64], h: usize, w: usize) -> Array2<f64> {
    let mut data = spec.to_vec();
    fft2(&mut data, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Array2::from_shape_fn((h, w), |(r, c)| data[r * w + c].re * scale)
}

/// Blobs and scanline dropouts covering `fraction` of the grid to within
/// one shape (at most 1% of the pixels).
pub fn synth_missing(h: usize, w: usize, fraction: f64, rng: &mut GaiaRng) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    let total = h * w;
    let target = (fraction * total as f64).round() as usize;
    if target == 0 {
        return mask;
    }
    let cap = (0.01 * total as f64).max(1.0);
    let r_max = (cap / PI).sqrt().clamp(1.0, 12.0);
    let mut count = 0usize;
    let scan_budget = target / 4;
    while count < scan_budget {
        let r = rng::below(rng, h);
        let len = (cap as usize).clamp(1, w);
        let c0 = rng::below(rng, w);
        for k in 0..len {
            let c = (c0 + k) % w;
            if !mask[[r, c]] {
                mask[[r, c]] = true;
                count += 1;
            }
        }
    }
    while count < target {
        let cy = rng::uniform(rng, 0.0, h as f64);
        let cx = rng::uniform(rng, 0.0, w as f64);
        let ry = rng::uniform(rng, 1.0, r_max);
        let rx = rng::uniform(rng, 1.0, r_max);
        let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
        for r in y0..y1 {
            for c in x0..x1 {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 && !mask[[r, c]] {
                    mask[[r, c]] = true;
                    count += 1;
                }
            }
        }
    }
    mask
}

/// Deterministic advected sequence of normalized fields.
pub fn synth_sequence(cfg: &SyntheticConfig) -> Result<Vec<Field>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut field_rng = rng::stream(cfg.seed, &[tags::SYNTH_FIELD]);
    let mut spec = noise_spectrum(h, w, cfg.correlation_length, &mut field_rng);
    let sigma = {
        let g = to_real(&spec, h, w);
        let m = g.mean().unwrap_or(0.0);
        (g.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0)).sqrt().max(1e-12)
    };
    let (dy, dx) = cfg.advection;
    let keep = (1.0 - cfg.innovation * cfg.innovation).sqrt();
    let norm = NormalizationSpec::default();
    let grid_id = format!("synthetic-{h}x{w}");
    let mut frames = Vec::with_capacity(cfg.n_timesteps);
    for t in 0..cfg.n_timesteps {
        if t > 0 {
            let fresh = (cfg.innovation > 0.0)
                .then(|| noise_spectrum(h, w, cfg.correlation_length, &mut field_rng));
            for r in 0..h {
                for c in 0..w {
                    let phase = -2.0 * PI * (freq(r, h) * dy + freq(c, w) * dx);
                    let k = r * w + c;
                    spec[k] *= Complex64::from_polar(keep, phase);
                    if let Some(f) = &fresh {
                        spec[k] += f[k] * cfg.innovation;
                    }
                }
            }
        }
        let g = to_real(&spec, h, w);
        let kelvin = g.mapv(|v| 255.0 + 25.0 * v / sigma);
        let mut miss_rng = rng::stream(cfg.seed, &[tags::SYNTH_MISSING, t as u64]);
        let missing = synth_missing(h, w, cfg.missing_fraction, &mut miss_rng);
        let raw = Field::with_missing(kelvin, missing)?
            .with_meta(t as i64 * FRAME_INTERVAL_MIN, grid_id.clone());
        frames.push(normalize(&raw, &norm)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTask {
    Precip,
    Ar,
    Tc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcScene {
    pub tracks: Vec<TrackRecord>,
    /// Union of storm discs per frame (1 inside a storm).
    pub masks: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthLabels {
    Precip(Vec<Field>),
    Ar(Vec<Field>),
    Tc(TcScene),
}

pub fn synth_labels(fields: &[Field], task: LabelTask, seed: u64) -> SynthLabels {
    match task {
        LabelTask::Precip => SynthLabels::Precip(
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| precip_label(f, &mut rng::stream(seed, &[tags::LABELS, 0, i as u64])))
                .collect(),
        ),
        LabelTask::Ar => SynthLabels::Ar(
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| ar_label(f, &mut rng::stream(seed, &[tags::LABELS, 1, i as u64])))
                .collect(),
        ),
        LabelTask::Tc => SynthLabels::Tc(synth_tc(fields, &TcConfig::default(), seed)),
    }
}

/// Peak rain rate of the synthetic precipitation map, mm/hr.
pub const PRECIP_PEAK: f64 = 20.0;
/// Normalized brightness above which no rain is produced.
pub const PRECIP_COLD_THRESHOLD: f64 = 0.45;

/// Rain rate that decreases monotonically with brightness temperature,
/// with 10% multiplicative noise. The warmest pixel always maps to 0.
pub fn precip_label(field: &Field, rng: &mut GaiaRng) -> Field {
    let warmest = field
        .values
        .iter()
        .zip(field.missing.iter())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = PRECIP_COLD_THRESHOLD.min(warmest);
    let values = field.values.mapv(|v| {
        let noise = 1.0 + 0.1 * rng::normal(rng);
        if v < cut && cut > 0.0 {
            (PRECIP_PEAK * ((cut - v) / cut).powi(2) * noise).max(0.0)
        } else {
            0.0
        }
    });
    let mut out = Field::with_missing(values, field.missing.clone()).expect("same shape");
    out.timestamp = field.timestamp;
    out.grid_id = field.grid_id.clone();
    out
}

/// Gradient magnitude with one-sided differences at the edges.
fn gradient_magnitude(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let d = |a: f64, b: f64, n: usize| if n > 0 { (b - a) / n as f64 } else { 0.0 };
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
        let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
        let gy = d(values[[r0, c]], values[[r1, c]], r1 - r0);
        let gx = d(values[[r, c0]], values[[r, c1]], c1 - c0);
        (gy * gy + gx * gx).sqrt()
    })
}

/// Default band for the positive fraction of AR masks.
pub const AR_FRACTION_BAND: (f64, f64) = (0.03, 0.15);

/// Binary mask of the steepest-gradient filaments; the positive fraction is
/// drawn uniformly from [0.05, 0.10] per frame.
pub fn ar_label(field: &Field, rng: &mut GaiaRng) -> Field {
    let target = rng::uniform(rng, 0.05, 0.10);
    let grad = gradient_magnitude(&field.values);
    let mut observed: Vec<f64> = grad
        .iter()
        .zip(field.missing.iter())
        .filter(|(_, &m)| !m)
        .map(|(g, _)| *g)
        .collect();
    observed.sort_by(|a, b| b.total_cmp(a));
    let k = ((target * observed.len() as f64).round() as usize).clamp(1, observed.len().max(1));
    let thr = observed.get(k - 1).copied().unwrap_or(f64::INFINITY);
    let values = grad.mapv(|g| if g >= thr { 1.0 } else { 0.0 });
    let mut out = Field::with_missing(values, field.missing.clone()).expect("same shape");
    out.timestamp = field.timestamp;
    out.grid_id = field.grid_id.clone();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcConfig {
    pub n_tracks: usize,
    pub radius: (f64, f64),
    /// Frames between genesis and the first labelled frame.
    pub label_delay: (usize, usize),
}

impl Default for TcConfig {
    fn default() -> Self {
        Self {
            n_tracks: 3,
            radius: (3.0, 8.0),
            label_delay: (1, 3),
        }
    }
}

/// Storm tracks moving across the frame sequence, with per-frame disc masks.
pub fn synth_tc(fields: &[Field], cfg: &TcConfig, seed: u64) -> TcScene {
    let n = fields.len();
    let (h, w) = fields.first().map(Field::dim).unwrap_or((0, 0));
    let mut rng = rng::stream(seed, &[tags::LABELS, 2]);
    let mut masks: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((h, w))).collect();
    let mut tracks = Vec::new();
    if n == 0 {
        return TcScene { tracks, masks: Vec::new() };
    }
    for s in 0..cfg.n_tracks {
        let genesis = rng::below(&mut rng, n.div_ceil(2));
        let radius = rng::uniform(&mut rng, cfg.radius.0, cfg.radius.1);
        let (mut cy, mut cx) = (
            rng::uniform(&mut rng, 0.2 * h as f64, 0.8 * h as f64),
            rng::uniform(&mut rng, 0.1 * w as f64, 0.9 * w as f64),
        );
        let (vy, vx) = (rng::uniform(&mut rng, -0.5, 0.5), rng::uniform(&mut rng, -1.5, 1.5));
        let span = cfg.label_delay.1.saturating_sub(cfg.label_delay.0) + 1;
        let delay = cfg.label_delay.0 + rng::below(&mut rng, span);
        let first_label = (genesis + delay).min(n - 1);
        let mut boxes = Vec::new();
        for (t, mask) in masks.iter_mut().enumerate().skip(genesis) {
            paint_disc(mask, cy, cx, radius);
            if t >= first_label && radius > 0.0 {
                let bbox = BBox {
                    y0: (cy - radius).max(0.0),
                    x0: (cx - radius).max(0.0),
                    y1: (cy + radius).min(h as f64),
                    x1: (cx + radius).min(w as f64),
                };
                if bbox.is_valid() {
                    boxes.push(TimedBox { t: fields[t].timestamp, bbox });
                }
            }
            cy += vy;
            cx += vx;
        }
        tracks.push(TrackRecord {
            storm_id: format!("storm-{s}"),
            boxes,
            first_label_time: fields[first_label].timestamp,
        });
    }
    let masks = masks
        .into_iter()
        .zip(fields)
        .map(|(m, f)| f.like(m))
        .collect();
    TcScene { tracks, masks }
}

/// Sets pixels whose centres lie strictly inside the disc.
pub fn paint_disc(mask: &mut Array2<f64>, cy: f64, cx: f64, radius: f64) {
    let (h, w) = mask.dim();
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            if dy * dy + dx * dx < radius * radius {
                mask[[r, c]] = 1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            height: 32,
            width: 48,
            n_timesteps: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_missing_fraction_means_fully_observed() {
        let cfg = SyntheticConfig { missing_fraction: 0.0, ..small(1) };
        for f in synth_sequence(&cfg).unwrap() {
            assert_eq!(f.n_missing(), 0);
            assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_sequence(&small(5)).unwrap();
        let b = synth_sequence(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_sequence(&small(6)).unwrap());
    }

    #[test]
    fn missing_fraction_within_two_points() {
        for seed in 0..5 {
            let cfg = SyntheticConfig {
                height: 64,
                width: 192,
                n_timesteps: 3,
                missing_fraction: 0.12,
                seed,
                ..Default::default()
            };
            for f in synth_sequence(&cfg).unwrap() {
                assert!((f.missing_fraction() - 0.12).abs() <= 0.02, "{}", f.missing_fraction());
            }
        }
    }

    /// Brute-force circular cross-correlation along x; returns the best lag.
    fn best_lag(a: &Array2<f64>, b: &Array2<f64>) -> usize {
        let (h, w) = a.dim();
        (0..w)
            .map(|lag| {
                let mut s = 0.0;
                for r in 0..h {
                    for c in 0..w {
                        s += (a[[r, c]] - 0.5) * (b[[r, (c + lag) % w]] - 0.5);
                    }
                }
                (lag, s)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap()
            .0
    }

    #[test]
    fn pure_advection_shifts_by_three_pixels() {
        let cfg = SyntheticConfig {
            advection: (0.0, 3.0),
            innovation: 0.0,
            missing_fraction: 0.0,
            ..small(2)
        };
        let frames = synth_sequence(&cfg).unwrap();
        for t in 0..frames.len() - 1 {
            assert_eq!(best_lag(&frames[t].values, &frames[t + 1].values), 3);
            let (h, w) = frames[t].dim();
            for r in 0..h {
                for c in 0..w {
                    let d = frames[t].values[[r, c]] - frames[t + 1].values[[r, (c + 3) % w]];
                    assert!(d.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn precip_label_properties() {
        let frames = synth_sequence(&small(3)).unwrap();
        let SynthLabels::Precip(labels) = synth_labels(&frames, LabelTask::Precip, 0) else {
            unreachable!()
        };
        for (f, l) in frames.iter().zip(&labels) {
            assert!(l.values.iter().all(|&v| v >= 0.0));
            let (idx, _) = f
                .values
                .indexed_iter()
                .filter(|(i, _)| !f.missing[*i])
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            assert_eq!(l.values[idx], 0.0);
            assert!(l.values.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn ar_fraction_in_band() {
        let frames = synth_sequence(&small(4)).unwrap();
        let SynthLabels::Ar(labels) = synth_labels(&frames, LabelTask::Ar, 9) else {
            unreachable!()
        };
        for l in &labels {
            let (mut pos, mut obs) = (0usize, 0usize);
            for (v, m) in l.values.iter().zip(l.missing.iter()) {
                if !m {
                    obs += 1;
                    pos += usize::from(*v > 0.5);
                }
            }
            let frac = pos as f64 / obs as f64;
            assert!((AR_FRACTION_BAND.0..=AR_FRACTION_BAND.1).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn tc_radius_zero_gives_empty_masks() {
        let frames = synth_sequence(&small(0)).unwrap();
        let scene = synth_tc(&frames, &TcConfig { radius: (0.0, 0.0), ..Default::default() }, 1);
        assert!(scene.masks.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
        let scene = synth_tc(&frames, &TcConfig::default(), 1);
        assert_eq!(scene.tracks.len(), 3);
        assert!(scene.masks.iter().any(|m| m.values.iter().any(|&v| v == 1.0)));
        for t in &scene.tracks {
            assert!(t.boxes.windows(2).all(|b| b[0].t < b[1].t));
            assert!(t.boxes.iter().all(|b| b.t >= t.first_label_time));
        }
    }
}
