//! Gap-fill inference, image-quality metrics and mask sweeps.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, GaiaError, Result};
use crate::field::Field;
use crate::model::{self, Model};
use crate::patch::{
    blob_mask, missing_dominated, patchify, sample_mask, stripes_for_ratio, unpatchify_mask, MaskFamily, MaskSpec,
    PatchGrid,
};
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq)]
pub struct GapfillResult {
    /// Input where observed and visible, model output elsewhere.
    pub composite: Field,
    pub predicted_full: Field,
    /// The mask actually applied (requested mask plus missing-dominated patches).
    pub mask: MaskSpec,
}

/// Pixel-level view of per-patch hidden flags.
pub fn hidden_pixels(mask: &MaskSpec, grid: &PatchGrid) -> Result<Array2<bool>> {
    if mask.len() != grid.n_patches() {
        return shape(format!("mask of {} patches on a grid of {}", mask.len(), grid.n_patches()));
    }
    let flags = Array2::from_shape_fn((grid.n_patches(), grid.patch_dim()), |(k, _)| mask.hidden[k]);
    Ok(unpatchify_mask(&flags, grid))
}

pub fn gapfill(field: &Field, mask: &MaskSpec, model: &Model) -> Result<GapfillResult> {
    let cfg = &model.cfg;
    if cfg.patch_h != cfg.patch_w {
        return invalid("gap filling expects square patches");
    }
    let (grid, missing) = patchify(field, cfg.patch_h)?;
    let effective = mask.union(&missing_dominated(&missing))?;
    let tokens = model::encode(&grid, &effective, &model.params, cfg)?;
    let pred = model::decode(&tokens, &effective, &model.params, cfg)?;
    let values = crate::patch::unpatchify_values(&pred)?;
    let hidden = hidden_pixels(&effective, &grid)?;

    let predicted_full = field.like(values.clone());
    let mut composite = field.like(field.values.clone());
    Zip::from(&mut composite.values)
        .and(&mut composite.filled)
        .and(&values)
        .and(&hidden)
        .and(&field.missing)
        .and(&field.filled)
        .for_each(|c, f, &p, &h, &m, &was_filled| {
            if h || m {
                *c = p;
                *f = true;
            } else {
                *f = was_filled;
            }
        });
    Ok(GapfillResult { composite, predicted_full, mask: effective })
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let w: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s = w.iter().sum::<f64>();
    w.into_iter().map(|v| v / s).collect()
}

fn blur(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = SSIM_RADIUS as i64;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter().enumerate().map(|(t, k)| k * x[[i, reflect(j as i64 + t as i64 - r, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter().enumerate().map(|(t, k)| k * rows[[reflect(i as i64 + t as i64 - r, h), j]]).sum::<f64>()
    })
}

/// Mean local structural similarity with an 11×11 Gaussian window
/// (σ 1.5, reflected borders, dynamic range 1). Pixels missing in either
/// input get zero window weight and are left out of the mean.
pub fn ssim(a: &Field, b: &Field) -> Result<f64> {
    if a.dim() != b.dim() {
        return shape(format!("ssim inputs {:?} and {:?}", a.dim(), b.dim()));
    }
    let valid = Zip::from(&a.missing).and(&b.missing).map_collect(|&x, &y| if x || y { 0.0 } else { 1.0 });
    if valid.sum() == 0.0 {
        return Err(GaiaError::Degenerate("ssim over an entirely missing image".into()));
    }
    let taps = gaussian_taps();
    let x = &a.values * &valid;
    let y = &b.values * &valid;
    let wsum = blur(&valid, &taps);
    let sx = blur(&x, &taps);
    let sy = blur(&y, &taps);
    let sxx = blur(&(&x * &a.values), &taps);
    let syy = blur(&(&y * &b.values), &taps);
    let sxy = blur(&(&x * &b.values), &taps);
    let (mut total, mut count) = (0.0, 0usize);
    for idx in ndarray::indices(a.dim()) {
        if valid[idx] == 0.0 {
            continue;
        }
        let w = wsum[idx];
        let (mx, my) = (sx[idx] / w, sy[idx] / w);
        let vx = (sxx[idx] / w - mx * mx).max(0.0);
        let vy = (syy[idx] / w - my * my).max(0.0);
        let cxy = sxy[idx] / w - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        count += 1;
    }
    Ok(total / count as f64)
}

/// RMSE over `region` restricted to pixels observed in `truth`.
pub fn rmse_masked(truth: &Field, pred: &Field, region: &Array2<bool>) -> Result<f64> {
    if truth.dim() != pred.dim() || truth.dim() != region.dim() {
        return shape("rmse inputs differ in shape");
    }
    let (mut s, mut n) = (0.0, 0usize);
    Zip::from(&truth.values).and(&pred.values).and(region).and(&truth.missing).for_each(|t, p, &r, &m| {
        if r && !m {
            s += (p - t) * (p - t);
            n += 1;
        }
    });
    if n == 0 {
        return Err(GaiaError::Degenerate("no observed pixels in the scored region".into()));
    }
    Ok((s / n as f64).sqrt())
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.30, 0.50, 0.70, 0.90, 0.95];
pub const DEFAULT_FAMILIES: [MaskFamily; 4] =
    [MaskFamily::Random, MaskFamily::StripesV, MaskFamily::StripesH, MaskFamily::Missing];

fn family_code(f: MaskFamily) -> u64 {
    match f {
        MaskFamily::Random => 1,
        MaskFamily::StripesV => 2,
        MaskFamily::StripesH => 3,
        MaskFamily::Missing => 4,
        MaskFamily::Sweep => 5,
    }
}

/// The evaluation mask of one family and ratio for a frame, seeded by its timestamp.
pub fn sweep_mask(family: MaskFamily, ratio: f64, grid_h: usize, grid_w: usize, timestamp: i64) -> Result<MaskSpec> {
    let n = grid_h * grid_w;
    let path = [tags::SWEEP, family_code(family), (ratio * 1e6).round() as u64];
    let mut r = rng::stream(timestamp as u64, &path);
    let mut m = match family {
        MaskFamily::Random | MaskFamily::Sweep => sample_mask(n, ratio, &mut r, None)?,
        MaskFamily::StripesV | MaskFamily::StripesH => {
            let phase = rng::below(&mut r, grid_h.max(grid_w));
            stripes_for_ratio(grid_h, grid_w, family, ratio, phase)?
        }
        MaskFamily::Missing => blob_mask(grid_h, grid_w, ratio, &mut r)?,
    };
    m.family = family;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFrameRow {
    pub family: MaskFamily,
    pub ratio: f64,
    pub timestamp: i64,
    pub achieved_ratio: f64,
    pub ssim: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: MaskFamily,
    pub ratio: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub frames: Vec<SweepFrameRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Evaluates every (family, ratio) cell over `frames`. Rows are grouped by
/// family in the given order with ratios ascending.
pub fn mask_ratio_sweep(model: &Model, frames: &[Field], ratios: &[f64], families: &[MaskFamily]) -> Result<SweepReport> {
    if frames.is_empty() {
        return invalid("sweep needs at least one frame");
    }
    let mut ratios = ratios.to_vec();
    if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return invalid("sweep ratios must lie in [0, 1)");
    }
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let p = model.cfg.patch_h;
    let cells: Vec<(MaskFamily, f64)> = families.iter().flat_map(|&f| ratios.iter().map(move |&r| (f, r))).collect();
    let mut rows = Vec::with_capacity(cells.len());
    let mut all_frames = Vec::new();
    for (family, ratio) in cells {
        let frame_rows: Vec<SweepFrameRow> = frames
            .par_iter()
            .map(|f| -> Result<SweepFrameRow> {
                let (h, w) = f.dim();
                if h % p != 0 || w % p != 0 {
                    return shape(format!("{h}x{w} frame is not divisible into {p}-pixel patches"));
                }
                let mask = sweep_mask(family, ratio, h / p, w / p, f.timestamp)?;
                let res = gapfill(f, &mask, model)?;
                let (grid, _) = patchify(f, p)?;
                let region = hidden_pixels(&mask, &grid)?;
                let rmse = match rmse_masked(f, &res.composite, &region) {
                    Ok(v) => Some(v),
                    Err(GaiaError::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(SweepFrameRow {
                    family,
                    ratio,
                    timestamp: f.timestamp,
                    achieved_ratio: mask.ratio,
                    ssim: ssim(&res.composite, f)?,
                    rmse,
                })
            })
            .collect::<Result<_>>()?;
        let ss: Vec<f64> = frame_rows.iter().map(|r| r.ssim).collect();
        let rm: Vec<f64> = frame_rows.iter().filter_map(|r| r.rmse).collect();
        let (ssim_mean, ssim_std) = mean_std(&ss);
        let (rmse_mean, rmse_std) = mean_std(&rm);
        rows.push(SweepRow { family, ratio, ssim_mean, ssim_std, rmse_mean, rmse_std, n: frame_rows.len() });
        all_frames.extend(frame_rows);
    }
    Ok(SweepReport { rows, frames: all_frames })
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| GaiaError::Format(e.to_string()))?;
        w.write_record(["family", "ratio", "ssim_mean", "ssim_std", "rmse_mean", "rmse_std", "n"])
            .map_err(|e| GaiaError::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.family.as_str().to_string(),
                r.ratio.to_string(),
                r.ssim_mean.to_string(),
                r.ssim_std.to_string(),
                r.rmse_mean.to_string(),
                r.rmse_std.to_string(),
                r.n.to_string(),
            ])
            .map_err(|e| GaiaError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Mean RMSE of the cell, if present.
    pub fn rmse(&self, family: MaskFamily, ratio: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.family == family && r.ratio == ratio).map(|r| r.rmse_mean)
    }
}
