//! Representation diagnostics: embeddings, PCA profiles, temporal coherence.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{invalid, shape, GaiaError, Result};
use crate::field::Field;
use crate::model::{self, Model};
use crate::patch::{patchify, sample_mask, MaskSpec};
use crate::rng::{self, tags};

/// Patch embeddings of one frame, `n_patches × enc_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub tokens: Mat,
    pub grid_h: usize,
    pub grid_w: usize,
    pub timestamp: i64,
}

/// Encoder pass per frame without the global token. A non-zero
/// `mask_ratio` draws a mask seeded by the frame timestamp; hidden rows are
/// then zero.
pub fn embed_dataset(model: &Model, frames: &[Field], mask_ratio: f64) -> Result<Vec<Embedding>> {
    if frames.is_empty() {
        return invalid("no frames to embed");
    }
    let p = model.cfg.patch_h;
    frames
        .par_iter()
        .map(|f| {
            let (grid, _) = patchify(f, p)?;
            let n = grid.n_patches();
            let mask = if mask_ratio > 0.0 {
                let mut r = rng::stream(f.timestamp as u64, &[tags::SWEEP, 0]);
                sample_mask(n, mask_ratio, &mut r, None)?
            } else {
                MaskSpec::none(n)
            };
            let ts = model::encode(&grid, &mask, &model.params, &model.cfg)?;
            let mut tokens = Mat::zeros((n, model.cfg.enc_width));
            for (i, &k) in ts.visible_index.iter().enumerate() {
                tokens.row_mut(k).assign(&ts.tokens.row(i));
            }
            Ok(Embedding { tokens, grid_h: grid.grid_h, grid_w: grid.grid_w, timestamp: f.timestamp })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    /// Fraction of variance per component, descending; sums to 1.
    pub explained: Vec<f64>,
    pub cumulative_top3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub profile: VarianceProfile,
    /// Unit component vectors as rows, `k × d` (pooled mode only).
    pub components: Option<Mat>,
    /// Per-frame `n_patches × k` projections.
    pub projections: Vec<Mat>,
}

fn demean(m: &Mat) -> Mat {
    let mean = m.mean_axis(ndarray::Axis(0)).expect("non-empty rows");
    m - &mean
}

/// Explained ratios (descending) and unit components (rows) of centered rows.
fn decompose(x: &Mat) -> Result<(Vec<f64>, Mat)> {
    let (n, d) = x.dim();
    let dm = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let svd = dm.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let energy: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = energy.iter().sum();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if total <= (1e-24 * scale * scale * (n * d) as f64).max(f64::MIN_POSITIVE) {
        return Err(GaiaError::Degenerate("rank-0 input: every row equals the mean".into()));
    }
    let mut explained: Vec<f64> = energy.iter().map(|e| e / total).collect();
    explained.resize(d, 0.0);
    let comps = Mat::from_shape_fn((order.len(), d), |(r, c)| vt[(order[r], c)]);
    Ok((explained, comps))
}

fn profile(explained: Vec<f64>) -> VarianceProfile {
    let cumulative_top3 = explained.iter().take(3).sum();
    VarianceProfile { explained, cumulative_top3 }
}

/// PCA of frame-wise de-meaned embeddings. Pooled mode stacks all frames
/// and shares components; per-frame mode decomposes each frame on its own
/// and averages the ratio vectors.
pub fn pca_profile(embeddings: &[Embedding], k: usize, pooled: bool) -> Result<PcaResult> {
    let rows: usize = embeddings.iter().map(|e| e.tokens.nrows()).sum();
    if rows < 2 {
        return invalid("PCA needs at least two patch vectors");
    }
    let d = embeddings[0].tokens.ncols();
    if embeddings.iter().any(|e| e.tokens.ncols() != d) {
        return shape("embeddings differ in width");
    }
    let centered: Vec<Mat> = embeddings.iter().map(|e| demean(&e.tokens)).collect();
    let k = k.min(d);
    if pooled {
        let mut stacked = Mat::zeros((rows, d));
        let mut r = 0;
        for c in &centered {
            stacked.slice_mut(ndarray::s![r..r + c.nrows(), ..]).assign(c);
            r += c.nrows();
        }
        let (explained, comps) = decompose(&stacked)?;
        let top = comps.slice(ndarray::s![..k.min(comps.nrows()), ..]).to_owned();
        let projections = centered.iter().map(|c| c.dot(&top.t())).collect();
        Ok(PcaResult { profile: profile(explained), components: Some(top), projections })
    } else {
        let mut mean = vec![0.0; d];
        let mut projections = Vec::with_capacity(centered.len());
        let mut used = 0usize;
        for c in &centered {
            match decompose(c) {
                Ok((explained, comps)) => {
                    for (m, e) in mean.iter_mut().zip(&explained) {
                        *m += e;
                    }
                    used += 1;
                    let top = comps.slice(ndarray::s![..k.min(comps.nrows()), ..]).to_owned();
                    projections.push(c.dot(&top.t()));
                }
                Err(GaiaError::Degenerate(_)) => projections.push(Mat::zeros((c.nrows(), k))),
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(GaiaError::Degenerate("every frame is rank 0".into()));
        }
        let explained = mean.into_iter().map(|m| m / used as f64).collect();
        Ok(PcaResult { profile: profile(explained), components: None, projections })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    pub lags: Vec<usize>,
    pub mean_cosine: Vec<f64>,
}

/// Mean cosine similarity of patch-pooled embeddings `ℓ` frames apart.
pub fn temporal_coherence(embeddings: &[Embedding], max_lag: usize) -> Result<CoherenceCurve> {
    if embeddings.len() <= max_lag {
        return invalid(format!("{} frames cannot support lag {max_lag}", embeddings.len()));
    }
    let pooled: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.tokens.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec())
        .collect();
    let norms: Vec<f64> = pooled.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(GaiaError::Degenerate(format!("pooled embedding {i} has zero norm")));
    }
    let mut mean_cosine = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        if lag == 0 {
            mean_cosine.push(1.0);
            continue;
        }
        let n = pooled.len() - lag;
        let s: f64 = (0..n)
            .map(|t| {
                let dot: f64 = pooled[t].iter().zip(&pooled[t + lag]).map(|(a, b)| a * b).sum();
                (dot / (norms[t] * norms[t + lag])).clamp(-1.0, 1.0)
            })
            .sum();
        mean_cosine.push(s / n as f64);
    }
    Ok(CoherenceCurve { lags: (0..=max_lag).collect(), mean_cosine })
}

impl CoherenceCurve {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| GaiaError::Format(e.to_string()))?;
        w.write_record(["lag", "mean_cosine"]).map_err(|e| GaiaError::Format(e.to_string()))?;
        for (l, c) in self.lags.iter().zip(&self.mean_cosine) {
            w.write_record([l.to_string(), c.to_string()]).map_err(|e| GaiaError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
