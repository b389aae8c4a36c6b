//! Local gap filling and block-mean downscaling.

use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::field::{Field, MISSING_SENTINEL};

/// Nearest source pixel on each side of `i` within `radius`, as `(distance, value)`.
fn axis_candidate(
    len: usize,
    i: usize,
    radius: usize,
    is_source: impl Fn(usize) -> bool,
    value: impl Fn(usize) -> f64,
) -> Option<f64> {
    let before = (1..=radius.min(i))
        .find(|&d| is_source(i - d))
        .map(|d| (d, value(i - d)));
    let after = (1..=radius.min(len - 1 - i))
        .find(|&d| is_source(i + d))
        .map(|d| (d, value(i + d)));
    match (before, after) {
        (Some((dl, vl)), Some((dr, vr))) => {
            Some(vl + (vr - vl) * dl as f64 / (dl + dr) as f64)
        }
        (Some((_, v)), None) | (None, Some((_, v))) => Some(v),
        (None, None) => None,
    }
}

/// Fills missing pixels from observed pixels within `radius` steps along the
/// row and column. Per-axis linear interpolants are averaged when both axes
/// have candidates. Only directly observed pixels (not previously filled
/// ones) serve as sources, which makes the operation idempotent.
pub fn local_gap_fill(field: &Field, radius: usize) -> Result<Field> {
    if radius == 0 {
        return invalid("gap-fill radius must be at least 1");
    }
    field.validate()?;
    let (h, w) = field.dim();
    let source = |r: usize, c: usize| !field.missing[[r, c]] && !field.filled[[r, c]];
    let mut out = field.clone();
    for r in 0..h {
        for c in 0..w {
            if !field.missing[[r, c]] {
                continue;
            }
            let row = axis_candidate(w, c, radius, |j| source(r, j), |j| field.values[[r, j]]);
            let col = axis_candidate(h, r, radius, |i| source(i, c), |i| field.values[[i, c]]);
            let filled = match (row, col) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                (a, b) => a.or(b),
            };
            if let Some(v) = filled {
                out.values[[r, c]] = v;
                out.missing[[r, c]] = false;
                out.filled[[r, c]] = true;
            }
        }
    }
    Ok(out)
}

/// Block-mean downscaling over observed pixels.
pub fn downscale(field: &Field, out_h: usize, out_w: usize) -> Result<Field> {
    field.validate()?;
    let (h, w) = field.dim();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w || h % out_h != 0 || w % out_w != 0 {
        return invalid(format!(
            "cannot downscale {h}x{w} to {out_h}x{out_w}: block ratios must be integers"
        ));
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let mut values = Array2::from_elem((out_h, out_w), MISSING_SENTINEL);
    let mut missing = Array2::from_elem((out_h, out_w), true);
    let mut filled = Array2::from_elem((out_h, out_w), false);
    for i in 0..out_h {
        for j in 0..out_w {
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut all_filled = true;
            for r in i * bh..(i + 1) * bh {
                for c in j * bw..(j + 1) * bw {
                    if !field.missing[[r, c]] {
                        sum += field.values[[r, c]];
                        n += 1;
                        all_filled &= field.filled[[r, c]];
                    }
                }
            }
            if n > 0 {
                values[[i, j]] = sum / n as f64;
                missing[[i, j]] = false;
                filled[[i, j]] = all_filled;
            }
        }
    }
    Ok(Field {
        values,
        missing,
        filled,
        timestamp: field.timestamp,
        grid_id: field.grid_id.clone(),
        normalization: field.normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_field(h: usize, w: usize, seed: u64, p_missing: f64) -> Field {
        use crate::rng;
        let mut g = rng::stream(seed, &[]);
        let vals = Array2::from_shape_fn((h, w), |_| rng::uniform(&mut g, 0.0, 1.0));
        let miss = Array2::from_shape_fn((h, w), |_| rng::uniform(&mut g, 0.0, 1.0) < p_missing);
        Field::with_missing(vals, miss).unwrap()
    }

    #[test]
    fn fully_observed_is_a_no_op() {
        let f = random_field(6, 7, 1, 0.0);
        assert_eq!(local_gap_fill(&f, 5).unwrap(), f);
    }

    #[test]
    fn single_gap_interpolates_linearly() {
        let f = Field::with_missing(array![[0.2, 9.0, 0.4]], array![[false, true, false]]).unwrap();
        let g = local_gap_fill(&f, 5).unwrap();
        assert!((g.values[[0, 1]] - 0.3).abs() < 1e-15);
        assert!(!g.missing[[0, 1]]);
    }

    #[test]
    fn one_sided_and_two_axis_fill() {
        // Row gives nearest value 0.8 (one-sided); column interpolates 0.0..0.4 -> 0.2.
        let f = Field::with_missing(
            array![[0.5, 0.0, 0.5], [0.5, 0.0, 0.8], [0.5, 0.4, 0.5]],
            array![[true, false, true], [true, true, false], [true, false, true]],
        )
        .unwrap();
        let g = local_gap_fill(&f, 1).unwrap();
        assert!((g.values[[1, 1]] - 0.5 * (0.8 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn large_block_interior_stays_missing() {
        let mut miss = Array2::from_elem((40, 40), false);
        for r in 10..30 {
            for c in 10..30 {
                miss[[r, c]] = true;
            }
        }
        let f = Field::with_missing(Array2::from_elem((40, 40), 0.5), miss).unwrap();
        let g = local_gap_fill(&f, 5).unwrap();
        for r in 10..30 {
            for c in 10..30 {
                let d_edge = (r - 9).min(30 - r).min(c - 9).min(30 - c);
                assert_eq!(g.missing[[r, c]], d_edge > 5, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(local_gap_fill(&random_field(2, 2, 0, 0.5), 0).is_err());
    }

    proptest! {
        #[test]
        fn observed_pixels_untouched_and_idempotent(seed in 0u64..500, p in 0.0f64..0.9, radius in 1usize..6) {
            let f = random_field(12, 17, seed, p);
            let once = local_gap_fill(&f, radius).unwrap();
            for ((a, b), &m) in f.values.iter().zip(once.values.iter()).zip(f.missing.iter()) {
                if !m {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            let twice = local_gap_fill(&once, radius).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn downscale_conserves_mean(seed in 0u64..500) {
            let f = random_field(8, 12, seed, 0.0);
            let d = downscale(&f, 4, 3).unwrap();
            let m0 = f.values.mean().unwrap();
            let m1 = d.values.mean().unwrap();
            prop_assert!((m0 - m1).abs() < 1e-12);
        }
    }

    #[test]
    fn downscale_block_rules() {
        let f = Field::with_missing(
            array![[0.0, 0.2, 1.0, 1.0], [0.4, 0.6, 1.0, 1.0]],
            array![[false, false, true, true], [false, false, true, true]],
        )
        .unwrap();
        let d = downscale(&f, 1, 2).unwrap();
        assert!((d.values[[0, 0]] - 0.3).abs() < 1e-15);
        assert!(d.missing[[0, 1]]);
        let c = Field::observed(Array2::from_elem((6, 6), 0.7));
        assert!(downscale(&c, 3, 2).unwrap().values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(downscale(&c, 4, 3).is_err());
    }
}
