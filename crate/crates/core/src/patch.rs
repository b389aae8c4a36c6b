//! Patchification, positional embeddings, and mask sampling.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, GaiaError, Result};
use crate::field::Field;
use crate::rng::{self, GaiaRng};

/// Patchified field: one row per patch, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub data: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w
    }

    /// Pixel-space grid with `data` replaced; shape must match.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return shape(format!("{:?} vs {:?}", data.dim(), self.data.dim()));
        }
        Ok(Self { data, ..self.clone() })
    }
}

fn to_patches<T: Copy>(img: &Array2<T>, ph: usize, pw: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let (gh, gw) = (h / ph, w / pw);
    Array2::from_shape_fn((gh * gw, ph * pw), |(k, p)| {
        let (gi, gj) = (k / gw, k % gw);
        let (pi, pj) = (p / pw, p % pw);
        img[[gi * ph + pi, gj * pw + pj]]
    })
}

fn from_patches<T: Copy>(rows: &Array2<T>, gh: usize, gw: usize, ph: usize, pw: usize) -> Array2<T> {
    Array2::from_shape_fn((gh * ph, gw * pw), |(r, c)| {
        let k = (r / ph) * gw + c / pw;
        rows[[k, (r % ph) * pw + c % pw]]
    })
}

/// Splits a field into square `patch`-sized blocks. Returns the grid and the
/// per-patch pixel missing flags in the same layout.
pub fn patchify(field: &Field, patch: usize) -> Result<(PatchGrid, Array2<bool>)> {
    let (h, w) = field.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape(format!("{h}x{w} field is not divisible into {patch}x{patch} patches"));
    }
    let grid = PatchGrid {
        data: to_patches(&field.values, patch, patch),
        grid_h: h / patch,
        grid_w: w / patch,
        patch_h: patch,
        patch_w: patch,
    };
    Ok((grid, to_patches(&field.missing, patch, patch)))
}

pub fn unpatchify_values(grid: &PatchGrid) -> Result<Array2<f64>> {
    if grid.data.dim() != (grid.n_patches(), grid.patch_dim()) {
        return shape(format!(
            "patch data {:?} does not match a {}x{} grid of {}x{} patches",
            grid.data.dim(),
            grid.grid_h,
            grid.grid_w,
            grid.patch_h,
            grid.patch_w
        ));
    }
    Ok(from_patches(&grid.data, grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w))
}

/// Inverse of [`patchify`]; the result is fully observed.
pub fn unpatchify(grid: &PatchGrid) -> Result<Field> {
    Ok(Field::observed(unpatchify_values(grid)?))
}

/// Reassembles per-patch boolean flags into an image-shaped mask.
pub fn unpatchify_mask(flags: &Array2<bool>, grid: &PatchGrid) -> Array2<bool> {
    from_patches(flags, grid.grid_h, grid.grid_w, grid.patch_h, grid.patch_w)
}

/// Fixed 2-D sinusoidal embedding. The first half of each row encodes the
/// grid row, the second half the grid column; within a half, channels are
/// interleaved `sin(ω_i p), cos(ω_i p)` with `ω_i = 10000^(-i / (half/2))`.
pub fn positional_embedding(grid_h: usize, grid_w: usize, width: usize) -> Result<Array2<f64>> {
    if width == 0 || width % 4 != 0 {
        return invalid(format!("positional width {width} must be a positive multiple of 4"));
    }
    let half = width / 2;
    let n_freq = half / 2;
    let omega: Vec<f64> = (0..n_freq)
        .map(|i| 10000f64.powf(-(i as f64) / n_freq as f64))
        .collect();
    let mut out = Array2::zeros((grid_h * grid_w, width));
    for k in 0..grid_h * grid_w {
        let pos = [(k / grid_w) as f64, (k % grid_w) as f64];
        for (axis, p) in pos.iter().enumerate() {
            for (i, w) in omega.iter().enumerate() {
                out[[k, axis * half + 2 * i]] = (w * p).sin();
                out[[k, axis * half + 2 * i + 1]] = (w * p).cos();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    Random,
    StripesV,
    StripesH,
    Missing,
    Sweep,
}

impl MaskFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskFamily::Random => "random",
            MaskFamily::StripesV => "stripes_v",
            MaskFamily::StripesH => "stripes_h",
            MaskFamily::Missing => "missing",
            MaskFamily::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => MaskFamily::Random,
            "stripes_v" => MaskFamily::StripesV,
            "stripes_h" => MaskFamily::StripesH,
            "missing" => MaskFamily::Missing,
            "sweep" => MaskFamily::Sweep,
            other => return invalid(format!("unknown mask family {other}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub hidden: Vec<bool>,
    /// Achieved hidden fraction.
    pub ratio: f64,
    pub family: MaskFamily,
}

impl MaskSpec {
    pub fn from_hidden(hidden: Vec<bool>, family: MaskFamily) -> Self {
        let n = hidden.len().max(1);
        let ratio = hidden.iter().filter(|&&h| h).count() as f64 / n as f64;
        Self { hidden, ratio, family }
    }

    pub fn none(n_patches: usize) -> Self {
        Self::from_hidden(vec![false; n_patches], MaskFamily::Random)
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }

    pub fn visible_index(&self) -> Vec<usize> {
        (0..self.hidden.len()).filter(|&k| !self.hidden[k]).collect()
    }

    /// Union with another mask of the same length; family of `self` is kept.
    pub fn union(&self, other: &[bool]) -> Result<Self> {
        if other.len() != self.hidden.len() {
            return shape("mask lengths differ");
        }
        let hidden = self.hidden.iter().zip(other).map(|(a, b)| *a || *b).collect();
        Ok(Self::from_hidden(hidden, self.family))
    }

    pub fn save(&self, path: &Path, grid_h: usize, grid_w: usize) -> Result<()> {
        if grid_h * grid_w != self.hidden.len() {
            return shape("grid does not match mask length");
        }
        let file = MaskFile {
            family: self.family,
            ratio: self.ratio,
            grid_h,
            grid_w,
            hidden: rle_encode(self.hidden.iter().copied()),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, usize, usize)> {
        let file: MaskFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let hidden = rle_decode(&file.hidden, file.grid_h * file.grid_w)?;
        Ok((
            Self {
                hidden,
                ratio: file.ratio,
                family: file.family,
            },
            file.grid_h,
            file.grid_w,
        ))
    }
}

/// On-disk mask: `hidden` holds run lengths alternating visible/hidden,
/// starting with a (possibly empty) visible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub family: MaskFamily,
    pub ratio: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub hidden: Vec<usize>,
}

pub fn rle_encode(flags: impl IntoIterator<Item = bool>) -> Vec<usize> {
    let mut runs = vec![0usize];
    let mut current = false;
    for f in flags {
        if f != current {
            runs.push(0);
            current = f;
        }
        *runs.last_mut().expect("non-empty") += 1;
    }
    runs
}

pub fn rle_decode(runs: &[usize], expected_len: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(expected_len);
    for (i, &n) in runs.iter().enumerate() {
        out.extend(std::iter::repeat(i % 2 == 1).take(n));
    }
    if out.len() != expected_len {
        return Err(GaiaError::Format(format!(
            "run lengths cover {} entries, expected {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Patches whose pixels are more than half missing.
pub fn missing_dominated(missing: &Array2<bool>) -> Vec<bool> {
    missing
        .rows()
        .into_iter()
        .map(|row| 2 * row.iter().filter(|&&m| m).count() > row.len())
        .collect()
}

pub fn missing_mask(missing: &Array2<bool>) -> MaskSpec {
    MaskSpec::from_hidden(missing_dominated(missing), MaskFamily::Missing)
}

/// Random mask hiding `max(round(ratio·n), |forced|)` patches, always
/// including every forced patch.
pub fn sample_mask(
    n_patches: usize,
    ratio: f64,
    rng: &mut GaiaRng,
    forced_hidden: Option<&[bool]>,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let mut hidden = match forced_hidden {
        Some(f) if f.len() != n_patches => {
            return shape(format!("forced mask has {} entries, expected {n_patches}", f.len()))
        }
        Some(f) => f.to_vec(),
        None => vec![false; n_patches],
    };
    let forced = hidden.iter().filter(|&&h| h).count();
    let target = ((ratio * n_patches as f64).round() as usize).max(forced);
    let mut free: Vec<usize> = (0..n_patches).filter(|&k| !hidden[k]).collect();
    let (chosen, _) = free.partial_shuffle(rng, target - forced);
    for &k in chosen.iter() {
        hidden[k] = true;
    }
    Ok(MaskSpec::from_hidden(hidden, MaskFamily::Random))
}

/// Periodic bars over patch columns (`StripesV`) or rows (`StripesH`).
pub fn structured_mask(
    grid_h: usize,
    grid_w: usize,
    family: MaskFamily,
    period: usize,
    hidden_width: usize,
    phase: usize,
) -> Result<MaskSpec> {
    if !matches!(family, MaskFamily::StripesV | MaskFamily::StripesH) {
        return invalid("structured masks are stripes_v or stripes_h");
    }
    if period < 2 {
        return invalid(format!("stripe period {period} must be at least 2"));
    }
    if hidden_width == 0 || hidden_width >= period {
        return invalid(format!(
            "stripe width {hidden_width} must lie in [1, period) for period {period}"
        ));
    }
    let on = |i: usize| (i as i64 - phase as i64).rem_euclid(period as i64) < hidden_width as i64;
    let hidden = (0..grid_h * grid_w)
        .map(|k| match family {
            MaskFamily::StripesV => on(k % grid_w),
            _ => on(k / grid_w),
        })
        .collect();
    Ok(MaskSpec::from_hidden(hidden, family))
}

/// Bars hiding `round(ratio·L)` of the `L` patch columns (`StripesV`) or
/// rows (`StripesH`), spread evenly and shifted by `phase`. At least one
/// line stays visible.
pub fn stripes_for_ratio(
    grid_h: usize,
    grid_w: usize,
    family: MaskFamily,
    ratio: f64,
    phase: usize,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let lines = match family {
        MaskFamily::StripesV => grid_w,
        MaskFamily::StripesH => grid_h,
        _ => return invalid("structured masks are stripes_v or stripes_h"),
    };
    if lines == 0 {
        return shape("empty patch grid");
    }
    let k = ((ratio * lines as f64).round() as usize).min(lines - 1);
    let on = |i: usize| {
        let j = (i + phase) % lines;
        (j + 1) * k / lines > j * k / lines
    };
    let hidden = (0..grid_h * grid_w)
        .map(|q| if family == MaskFamily::StripesV { on(q % grid_w) } else { on(q / grid_w) })
        .collect();
    Ok(MaskSpec::from_hidden(hidden, family))
}

/// Missing-data-style mask: contiguous blobs on the patch grid grown until
/// exactly `round(ratio·n)` patches are hidden.
pub fn blob_mask(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut GaiaRng) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("mask ratio {ratio} outside [0, 1)"));
    }
    let n = grid_h * grid_w;
    let target = (ratio * n as f64).round() as usize;
    let mut hidden = vec![false; n];
    let mut count = 0;
    let mut frontier: Vec<usize> = Vec::new();
    while count < target {
        if frontier.is_empty() || rng::uniform(rng, 0.0, 1.0) < 0.05 {
            let free: Vec<usize> = (0..n).filter(|&k| !hidden[k]).collect();
            let k = free[rng::below(rng, free.len())];
            hidden[k] = true;
            count += 1;
            frontier.push(k);
            continue;
        }
        let fi = rng::below(rng, frontier.len());
        let k = frontier[fi];
        let (r, c) = ((k / grid_w) as i64, (k % grid_w) as i64);
        let nbrs: Vec<usize> = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            .into_iter()
            .filter(|&(y, x)| y >= 0 && x >= 0 && y < grid_h as i64 && x < grid_w as i64)
            .map(|(y, x)| y as usize * grid_w + x as usize)
            .filter(|&q| !hidden[q])
            .collect();
        if nbrs.is_empty() {
            frontier.swap_remove(fi);
            continue;
        }
        let q = nbrs[rng::below(rng, nbrs.len())];
        hidden[q] = true;
        count += 1;
        frontier.push(q);
    }
    Ok(MaskSpec::from_hidden(hidden, MaskFamily::Missing))
}

/// Rows of `m` at `index`.
pub fn select_rows(m: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((index.len(), m.ncols()));
    for (i, &k) in index.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&m.slice(s![k, ..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Field {
        Field::observed(Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f64))
    }

    #[test]
    fn full_scale_geometry_counts() {
        let f = Field::observed(Array2::zeros((480, 1440)));
        let (g, _) = patchify(&f, 30).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.n_patches(), g.patch_dim()), (16, 48, 768, 900));
        let (g, _) = patchify(&Field::observed(Array2::zeros((60, 60))), 30).unwrap();
        assert_eq!(g.n_patches(), 4);
    }

    #[test]
    fn patch_layout_is_row_major() {
        let f = ramp(4, 6);
        let (g, _) = patchify(&f, 2).unwrap();
        // patch k=4 is grid (1, 1): pixels (2,2),(2,3),(3,2),(3,3)
        assert_eq!(g.data.row(4).to_vec(), vec![14.0, 15.0, 20.0, 21.0]);
        assert!(patchify(&f, 4).is_err());
    }

    #[test]
    fn unpatchify_edge_cases() {
        let g = PatchGrid {
            data: Array2::zeros((6, 4)),
            grid_h: 2,
            grid_w: 3,
            patch_h: 2,
            patch_w: 2,
        };
        assert!(unpatchify(&g).unwrap().values.iter().all(|&v| v == 0.0));
        let single = PatchGrid {
            data: Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            grid_h: 1,
            grid_w: 1,
            patch_h: 2,
            patch_w: 2,
        };
        assert_eq!(
            unpatchify(&single).unwrap().values,
            Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
        );
        let bad = PatchGrid { data: Array2::zeros((5, 4)), ..g };
        assert!(unpatchify(&bad).is_err());
    }

    proptest! {
        #[test]
        fn patch_round_trip(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, seed in 0u64..100) {
            let mut r = rng::stream(seed, &[]);
            let f = Field::observed(Array2::from_shape_fn((gh * p, gw * p), |_| rng::normal(&mut r)));
            let (g, _) = patchify(&f, p).unwrap();
            let back = unpatchify(&g).unwrap();
            prop_assert_eq!(back.values, f.values);
        }

        #[test]
        fn rle_round_trip(flags in proptest::collection::vec(any::<bool>(), 0..200)) {
            let runs = rle_encode(flags.iter().copied());
            prop_assert_eq!(rle_decode(&runs, flags.len()).unwrap(), flags);
        }

        #[test]
        fn random_mask_hits_requested_count(n in 1usize..800, ratio in 0.0f64..0.99, seed in 0u64..50) {
            let mut r = rng::stream(seed, &[]);
            let m = sample_mask(n, ratio, &mut r, None).unwrap();
            prop_assert_eq!(m.n_hidden(), (ratio * n as f64).round() as usize);
            prop_assert!((m.ratio - ratio).abs() <= 1.0 / n as f64);
        }
    }

    #[test]
    fn positional_embedding_properties() {
        let pe = positional_embedding(16, 48, 64).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert_eq!(pe[[0, 32]], 0.0);
        assert_eq!(pe[[0, 33]], 1.0);
        for a in 0..pe.nrows() {
            for b in a + 1..pe.nrows() {
                let d: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6, "rows {a} and {b} collide");
            }
        }
        assert_eq!(pe, positional_embedding(16, 48, 64).unwrap());
        assert!(positional_embedding(2, 2, 6).is_err());
    }

    #[test]
    fn sample_mask_examples() {
        let mut r = rng::stream(3, &[]);
        assert_eq!(sample_mask(10, 0.0, &mut r, None).unwrap().n_hidden(), 0);
        assert_eq!(sample_mask(768, 0.75, &mut r, None).unwrap().n_hidden(), 576);
        let forced: Vec<bool> = (0..768).map(|k| k < 600).collect();
        let m = sample_mask(768, 0.75, &mut r, Some(&forced)).unwrap();
        assert_eq!(m.n_hidden(), 600);
        assert!(forced.iter().zip(&m.hidden).all(|(f, h)| !f || *h));
        let forced: Vec<bool> = (0..768).map(|k| k % 7 == 0).collect();
        let m = sample_mask(768, 0.75, &mut r, Some(&forced)).unwrap();
        assert_eq!(m.n_hidden(), 576);
        assert!(forced.iter().zip(&m.hidden).all(|(f, h)| !f || *h));
        assert!(sample_mask(10, 1.0, &mut r, None).is_err());
        assert!(sample_mask(10, -0.1, &mut r, None).is_err());
    }

    #[test]
    fn sample_mask_is_deterministic_per_stream() {
        let a = sample_mask(192, 0.75, &mut rng::stream(9, &[1]), None).unwrap();
        let b = sample_mask(192, 0.75, &mut rng::stream(9, &[1]), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stripes() {
        let m = structured_mask(1, 4, MaskFamily::StripesV, 2, 1, 0).unwrap();
        assert_eq!(m.hidden, vec![true, false, true, false]);
        assert_eq!(m.ratio, 0.5);
        let m = structured_mask(1, 5, MaskFamily::StripesH, 2, 1, 1).unwrap();
        assert_eq!(m.n_hidden(), 0);
        assert!(structured_mask(2, 2, MaskFamily::StripesV, 1, 1, 0).is_err());

        // Transposing the grid maps vertical bars onto horizontal ones.
        let (gh, gw) = (3, 7);
        let v = structured_mask(gh, gw, MaskFamily::StripesV, 3, 1, 2).unwrap();
        let h = structured_mask(gw, gh, MaskFamily::StripesH, 3, 1, 2).unwrap();
        for r in 0..gh {
            for c in 0..gw {
                assert_eq!(v.hidden[r * gw + c], h.hidden[c * gh + r]);
            }
        }
    }

    #[test]
    fn blob_mask_exact_count() {
        for (i, ratio) in [0.3, 0.5, 0.7, 0.9, 0.95].into_iter().enumerate() {
            let m = blob_mask(8, 24, ratio, &mut rng::stream(1, &[i as u64])).unwrap();
            assert_eq!(m.n_hidden(), (ratio * 192.0).round() as usize);
        }
    }

    #[test]
    fn missing_mask_threshold() {
        let mut miss = Array2::from_elem((2, 4), false);
        miss[[0, 0]] = true;
        miss[[0, 1]] = true;
        miss[[1, 0]] = true;
        miss[[1, 1]] = true;
        miss[[1, 2]] = true;
        assert_eq!(missing_dominated(&miss), vec![false, true]);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = blob_mask(4, 6, 0.5, &mut rng::stream(0, &[])).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p, 4, 6).unwrap();
        let (back, gh, gw) = MaskSpec::load(&p).unwrap();
        assert_eq!((back, gh, gw), (m, 4, 6));
    }

    #[test]
    fn ratio_stripes_hide_exact_line_counts() {
        for lines in 1..30usize {
            for ratio in [0.0, 0.3, 0.5, 0.7, 0.9, 0.95] {
                for phase in 0..3 {
                    let v = stripes_for_ratio(2, lines, MaskFamily::StripesV, ratio, phase).unwrap();
                    let k = ((ratio * lines as f64).round() as usize).min(lines - 1);
                    assert_eq!(v.n_hidden(), 2 * k);
                    let h = stripes_for_ratio(lines, 2, MaskFamily::StripesH, ratio, phase).unwrap();
                    assert_eq!(h.n_hidden(), 2 * k);
                }
            }
        }
        assert!(stripes_for_ratio(4, 4, MaskFamily::Random, 0.5, 0).is_err());
    }
}
