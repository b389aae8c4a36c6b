//! Reconstruction loss over hidden patches.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{shape, GaiaError, Result};
use crate::patch::{MaskSpec, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeLossReport {
    pub loss: f64,
    pub n_hidden_pixels_scored: usize,
}

/// 1 for pixels inside hidden patches that are observed in the target, else 0.
pub fn score_weights(mask: &MaskSpec, missing: &ndarray::Array2<bool>) -> Result<Mat> {
    if missing.nrows() != mask.len() {
        return shape(format!("{} mask entries vs {} patch rows", mask.len(), missing.nrows()));
    }
    let mut w = Mat::zeros(missing.dim());
    for (k, (mut row, miss)) in w.rows_mut().into_iter().zip(missing.rows()).enumerate() {
        if mask.hidden[k] {
            Zip::from(&mut row).and(&miss).for_each(|w, &m| *w = if m { 0.0 } else { 1.0 });
        }
    }
    Ok(w)
}

/// Mean squared error over hidden, observed pixels.
pub fn mae_loss(
    pred: &PatchGrid,
    target: &PatchGrid,
    mask: &MaskSpec,
    missing: &ndarray::Array2<bool>,
) -> Result<MaeLossReport> {
    if pred.data.dim() != target.data.dim() || missing.dim() != target.data.dim() {
        return shape(format!(
            "pred {:?}, target {:?}, missing {:?}",
            pred.data.dim(),
            target.data.dim(),
            missing.dim()
        ));
    }
    let w = score_weights(mask, missing)?;
    let n = w.iter().filter(|&&v| v > 0.0).count();
    if n == 0 {
        return Err(GaiaError::Degenerate("no hidden observed pixels to score".into()));
    }
    let mut s = 0.0;
    Zip::from(&pred.data).and(&target.data).and(&w).for_each(|p, t, w| s += w * (p - t) * (p - t));
    Ok(MaeLossReport { loss: s / n as f64, n_hidden_pixels_scored: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::patch::MaskFamily;
    use crate::rng;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn pg(data: Mat) -> PatchGrid {
        let n = data.nrows();
        PatchGrid { data, grid_h: 1, grid_w: n, patch_h: 2, patch_w: 2 }
    }

    fn rand(n: usize, seed: u64) -> Mat {
        let mut g = rng::stream(seed, &[]);
        Mat::from_shape_fn((n, 4), |_| rng::uniform(&mut g, 0.0, 1.0))
    }

    #[test]
    fn examples() {
        let t = pg(rand(3, 0));
        let mask = MaskSpec::from_hidden(vec![false, true, false], MaskFamily::Random);
        let none = Array2::from_elem((3, 4), false);
        assert_eq!(mae_loss(&t, &t, &mask, &none).unwrap().loss, 0.0);

        let mut p = t.clone();
        p.data.row_mut(1).mapv_inplace(|v| v + 0.1);
        let r = mae_loss(&p, &t, &mask, &none).unwrap();
        assert!((r.loss - 0.01).abs() < 1e-12);
        assert_eq!(r.n_hidden_pixels_scored, 4);

        let mut q = p.clone();
        q.data.row_mut(0).mapv_inplace(|v| v + 3.0);
        assert_eq!(mae_loss(&q, &t, &mask, &none).unwrap().loss, r.loss);

        let mut miss = none.clone();
        miss.row_mut(1).fill(true);
        assert!(matches!(mae_loss(&p, &t, &mask, &miss), Err(GaiaError::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn scaling_and_permutation(seed in 0u64..200, c in 0.1f64..5.0) {
            let t = rand(5, seed);
            let p = rand(5, seed + 1000);
            let hidden = vec![true, false, true, true, false];
            let mut miss = Array2::from_elem((5, 4), false);
            miss[[0, 1]] = true;
            let mask = MaskSpec::from_hidden(hidden.clone(), MaskFamily::Random);
            let base = mae_loss(&pg(p.clone()), &pg(t.clone()), &mask, &miss).unwrap().loss;
            let scaled = &t + &((&p - &t) * c);
            let l2 = mae_loss(&pg(scaled), &pg(t.clone()), &mask, &miss).unwrap().loss;
            prop_assert!((l2 - c * c * base).abs() <= 1e-12 * (1.0 + l2));

            let perm = [3usize, 0, 4, 1, 2];
            let pick = |m: &Mat| Mat::from_shape_fn(m.dim(), |(r, c)| m[[perm[r], c]]);
            let pickb = |m: &Array2<bool>| Array2::from_shape_fn(m.dim(), |(r, c)| m[[perm[r], c]]);
            let pmask = MaskSpec::from_hidden(perm.iter().map(|&k| hidden[k]).collect(), MaskFamily::Random);
            let lp = mae_loss(&pg(pick(&p)), &pg(pick(&t)), &pmask, &pickb(&miss)).unwrap().loss;
            prop_assert!((lp - base).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_closed_form_and_differences() {
        let t = rand(4, 1);
        let p = rand(4, 2);
        let mask = MaskSpec::from_hidden(vec![true, false, true, false], MaskFamily::Random);
        let mut miss = Array2::from_elem((4, 4), false);
        miss[[2, 3]] = true;
        let w = score_weights(&mask, &miss).unwrap();
        let n = w.sum();
        let mut g = Graph::new();
        let pv = g.leaf(p.clone(), true);
        let l = g.weighted_sq_err(pv, t.clone(), w.clone(), n);
        let grad = g.backward(l).get(pv).unwrap().clone();
        let closed = (&p - &t) * &w * (2.0 / n);
        assert!((&grad - &closed).iter().all(|d| d.abs() < 1e-15));
        let f = |x: &Mat| mae_loss(&pg(x.clone()), &pg(t.clone()), &mask, &miss).unwrap().loss;
        for r in 0..4 {
            for c in 0..4 {
                let mut a = p.clone();
                a[[r, c]] += 1e-6;
                let mut b = p.clone();
                b[[r, c]] -= 1e-6;
                let fd = (f(&a) - f(&b)) / 2e-6;
                assert!((fd - grad[[r, c]]).abs() < 1e-8);
            }
        }
    }
}
