//! Self-distillation: centered, sharpened teacher targets, cross-view loss,
//! EMA teacher, center tracking, and a collapse monitor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, Graph, Mat, Var};
use crate::error::{invalid, shape, GaiaError, Result};
use crate::params::ParamSet;

/// Teacher probabilities `softmax((logits − center) / τ_t)` per row.
pub fn teacher_probs(teacher_logits: &Mat, center: &Mat, tau_t: f64) -> Mat {
    softmax_rows(&((teacher_logits - center) / tau_t))
}

fn check_temps(tau_s: f64, tau_t: f64) -> Result<()> {
    if !(tau_s > 0.0 && tau_t > 0.0) {
        return invalid(format!("temperatures must be positive (τ_s={tau_s}, τ_t={tau_t})"));
    }
    Ok(())
}

/// Mean cross-entropy over all (teacher view, student view) pairs and rows.
pub fn dino_loss(student: [&Mat; 2], teacher: [&Mat; 2], center: &Mat, tau_s: f64, tau_t: f64) -> Result<f64> {
    check_temps(tau_s, tau_t)?;
    let rows = student[0].nrows();
    if student.iter().chain(teacher.iter()).any(|m| m.nrows() != rows || m.ncols() != center.ncols()) {
        return shape("student and teacher logits must share batch size and prototype count");
    }
    let mut total = 0.0;
    for t in teacher {
        let p = teacher_probs(t, center, tau_t);
        for s in student {
            let logp = log_softmax_rows(&(s / tau_s));
            total += -(&p * &logp).sum() / rows as f64;
        }
    }
    Ok(total / 4.0)
}

/// Graph form of [`dino_loss`]; teacher probabilities enter as constants.
pub fn dino_loss_graph(g: &mut Graph, student: [Var; 2], teacher_probs: [&Mat; 2], tau_s: f64) -> Result<Var> {
    check_temps(tau_s, 1.0)?;
    let mut terms = Vec::with_capacity(4);
    for p in teacher_probs {
        for s in student {
            terms.push((g.soft_cross_entropy(s, p.clone(), 1.0 / tau_s), 0.25));
        }
    }
    Ok(g.combine(&terms))
}

/// EMA copy of the encoder and projection head, plus the logit center.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    /// `1 × K`.
    pub center: Mat,
    pub momentum: f64,
    pub center_momentum: f64,
}

impl TeacherState {
    /// Copies the `enc.` and `head.` tensors of `student`; zero center.
    pub fn from_student(student: &ParamSet, prototypes: usize, momentum: f64, center_momentum: f64) -> Result<Self> {
        for (name, m) in [("momentum", momentum), ("center momentum", center_momentum)] {
            if !(m > 0.0 && m < 1.0) {
                return invalid(format!("{name} {m} outside (0, 1)"));
            }
        }
        Ok(Self {
            params: student.subset(&["enc.", "head."]),
            center: Mat::zeros((1, prototypes)),
            momentum,
            center_momentum,
        })
    }
}

/// `t ← m·t + (1 − m)·s` for every teacher tensor.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return invalid(format!("momentum {momentum} outside [0, 1]"));
    }
    for (name, t) in teacher.iter() {
        match student.get(name) {
            Some(s) if s.dim() == t.dim() => {}
            Some(s) => return shape(format!("{name}: teacher {:?} vs student {:?}", t.dim(), s.dim())),
            None => return shape(format!("{name} has no student counterpart")),
        }
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("checked");
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = momentum * *t + (1.0 - momentum) * s);
    }
    Ok(())
}

/// `center ← m_c·center + (1 − m_c)·mean(logits)` over every row of every view.
pub fn center_update(center: &Mat, teacher_logits: &[&Mat], center_momentum: f64) -> Result<Mat> {
    let rows: usize = teacher_logits.iter().map(|m| m.nrows()).sum();
    if rows == 0 {
        return Err(GaiaError::Degenerate("center update needs at least one teacher output".into()));
    }
    if teacher_logits.iter().any(|m| m.ncols() != center.ncols()) {
        return shape("teacher logits and center differ in width");
    }
    let mut mean = Mat::zeros(center.dim());
    for m in teacher_logits {
        for row in m.rows() {
            mean.row_mut(0).scaled_add(1.0, &row);
        }
    }
    mean /= rows as f64;
    Ok(center * center_momentum + mean * (1.0 - center_momentum))
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_entropy(probs: &Mat) -> f64 {
    let rows = probs.nrows().max(1) as f64;
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>() / rows
}

/// Raises an alarm when teacher entropy stays below `0.1·ln K` for 50 steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseMonitor {
    pub streak: u32,
    pub alarmed: bool,
}

impl Default for CollapseMonitor {
    fn default() -> Self {
        Self { streak: 0, alarmed: false }
    }
}

impl CollapseMonitor {
    pub const FRACTION: f64 = 0.1;
    pub const PATIENCE: u32 = 50;

    /// Records one step's entropy; returns whether the alarm is active.
    pub fn record(&mut self, entropy: f64, prototypes: usize) -> bool {
        if entropy < Self::FRACTION * (prototypes as f64).ln() {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.alarmed = self.streak >= Self::PATIENCE;
        self.alarmed
    }
}

/// Teacher momentum for a step: constant, or cosine-ramped from `base` to 1.
pub fn teacher_momentum(base: f64, step: u64, total_steps: u64, cosine_ramp: bool) -> f64 {
    if !cosine_ramp || total_steps == 0 {
        return base;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    1.0 - (1.0 - base) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand(r: usize, c: usize, seed: u64) -> Mat {
        let mut g = rng::stream(seed, &[]);
        Mat::from_shape_fn((r, c), |_| rng::normal(&mut g))
    }

    #[test]
    fn one_hot_teacher_uniform_student() {
        let k = 16;
        let mut t = Mat::zeros((1, k));
        t[[0, 3]] = 1000.0;
        let s = Mat::zeros((1, k));
        let c = Mat::zeros((1, k));
        let l = dino_loss([&s, &s], [&t, &t], &c, 0.1, 0.04).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_student_gives_teacher_entropy() {
        let (tau_s, tau_t) = (0.1, 0.04);
        let t = rand(3, 8, 1);
        let c = rand(1, 8, 2);
        let s = (&t - &c) * (tau_s / tau_t);
        let l = dino_loss([&s, &s], [&t, &t], &c, tau_s, tau_t).unwrap();
        let h = mean_entropy(&teacher_probs(&t, &c, tau_t));
        assert!((l - h).abs() < 1e-12);
        let other = rand(3, 8, 3);
        assert!(dino_loss([&other, &other], [&t, &t], &c, tau_s, tau_t).unwrap() > h);
    }

    #[test]
    fn teacher_shift_invariance_and_errors() {
        let s = [rand(2, 6, 4), rand(2, 6, 5)];
        let t = [rand(2, 6, 6), rand(2, 6, 7)];
        let c = rand(1, 6, 8);
        let base = dino_loss([&s[0], &s[1]], [&t[0], &t[1]], &c, 0.1, 0.04).unwrap();
        let t2 = [&t[0] + 3.5, &t[1] + 3.5];
        let shifted = dino_loss([&s[0], &s[1]], [&t2[0], &t2[1]], &c, 0.1, 0.04).unwrap();
        assert!((base - shifted).abs() < 1e-12);
        assert!(dino_loss([&s[0], &s[1]], [&t[0], &t[1]], &c, 0.0, 0.04).is_err());
        assert!(dino_loss([&s[0], &s[1]], [&t[0], &t[1]], &c, 0.1, -1.0).is_err());
    }

    #[test]
    fn graph_loss_matches_direct_loss_and_gradient() {
        let s = [rand(2, 6, 9), rand(2, 6, 10)];
        let t = [rand(2, 6, 11), rand(2, 6, 12)];
        let c = rand(1, 6, 13);
        let direct = dino_loss([&s[0], &s[1]], [&t[0], &t[1]], &c, 0.1, 0.04).unwrap();
        let p = [teacher_probs(&t[0], &c, 0.04), teacher_probs(&t[1], &c, 0.04)];
        let mut g = Graph::new();
        let a = g.leaf(s[0].clone(), true);
        let b = g.leaf(s[1].clone(), true);
        let l = dino_loss_graph(&mut g, [a, b], [&p[0], &p[1]], 0.1).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-12);
        let grads = g.backward(l);
        let ga = grads.get(a).unwrap();
        for idx in 0..12 {
            let (r, col) = (idx / 6, idx % 6);
            let mut sp = s[0].clone();
            sp[[r, col]] += 1e-6;
            let mut sm = s[0].clone();
            sm[[r, col]] -= 1e-6;
            let fd = (dino_loss([&sp, &s[1]], [&t[0], &t[1]], &c, 0.1, 0.04).unwrap()
                - dino_loss([&sm, &s[1]], [&t[0], &t[1]], &c, 0.1, 0.04).unwrap())
                / 2e-6;
            assert!((fd - ga[[r, col]]).abs() < 1e-7, "{fd} vs {}", ga[[r, col]]);
        }
    }

    #[test]
    fn ema_examples() {
        let mut t = ParamSet::new();
        t.insert("a", Mat::from_elem((1, 1), 1.0));
        let mut s = ParamSet::new();
        s.insert("a", Mat::from_elem((1, 1), 0.0));
        ema_update(&mut t, &s, 0.996).unwrap();
        assert!((t.get("a").unwrap()[[0, 0]] - 0.996).abs() < 1e-15);

        let same = s.clone();
        let mut fixed = s.clone();
        ema_update(&mut fixed, &same, 0.996).unwrap();
        assert_eq!(fixed, same);

        let mut bad = ParamSet::new();
        bad.insert("a", Mat::zeros((2, 1)));
        assert!(ema_update(&mut t, &bad, 0.9).is_err());
    }

    #[test]
    fn center_examples() {
        let c = Mat::zeros((1, 4));
        let ones = Mat::ones((3, 4));
        let c1 = center_update(&c, &[&ones, &ones], 0.9).unwrap();
        assert!(c1.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let fixed = center_update(&ones.row(0).to_owned().insert_axis(ndarray::Axis(0)), &[&ones], 0.9).unwrap();
        assert!(fixed.iter().all(|&v| v == 1.0));
        assert!(center_update(&c, &[], 0.9).is_err());
    }

    #[test]
    fn collapse_alarm_after_patience() {
        let mut m = CollapseMonitor::default();
        for i in 0..49 {
            assert!(!m.record(0.0, 256), "step {i}");
        }
        assert!(m.record(0.0, 256));
        assert!(!m.record(10.0, 256));
    }

    #[test]
    fn momentum_ramp() {
        assert_eq!(teacher_momentum(0.996, 10, 100, false), 0.996);
        assert!((teacher_momentum(0.996, 0, 100, true) - 0.996).abs() < 1e-15);
        assert!((teacher_momentum(0.996, 100, 100, true) - 1.0).abs() < 1e-15);
    }
}
