//! Joint pretraining: mixing schedule, learning rate, AdamW, steps and epochs.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat};
use crate::checkpoint::Checkpoint;
use crate::dino::{self, CollapseMonitor, TeacherState};
use crate::error::{invalid, shape, GaiaError, Result};
use crate::field::Field;
use crate::mae::score_weights;
use crate::model::{self, decays, ModelConfig};
use crate::params::{Binder, ParamSet};
use crate::patch::{missing_dominated, patchify, sample_mask, MaskSpec, PatchGrid};
use crate::rng::{self, tags};

/// Mixing weight of the self-distillation term at `epoch`.
pub fn lambda_schedule(epoch: u32, e_w: u32, e_p: u32, lambda_star: f64) -> Result<f64> {
    if e_p == 0 {
        return invalid("transition length must be at least one epoch");
    }
    if !(0.0..=1.0).contains(&lambda_star) {
        return invalid(format!("final weight {lambda_star} outside [0, 1]"));
    }
    Ok(if epoch < e_w {
        1.0
    } else if epoch - e_w < e_p {
        1.0 - ((epoch - e_w) as f64 / e_p as f64) * (1.0 - lambda_star)
    } else {
        lambda_star
    })
}

/// Linear warm-up to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

impl AdamW {
    /// One decoupled-decay step. Parameters without a gradient see zeros.
    pub fn step(&self, params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for (name, p) in params.iter_mut() {
            let m = state.m.get_mut(name).ok_or_else(|| GaiaError::Shape(format!("no optimizer moment for {name}")))?;
            let v = state.v.get_mut(name).ok_or_else(|| GaiaError::Shape(format!("no optimizer moment for {name}")))?;
            let zero;
            let g = match grads.get(name) {
                Some(g) if g.dim() == p.dim() => g,
                Some(g) => return shape(format!("{name}: gradient {:?} vs parameter {:?}", g.dim(), p.dim())),
                None => {
                    zero = Mat::zeros(p.dim());
                    &zero
                }
            };
            let decay = if decays(name) { lr * self.weight_decay } else { 0.0 };
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p -= decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

fn d_e_w() -> u32 {
    5
}
fn d_e_p() -> u32 {
    20
}
fn d_lambda_star() -> f64 {
    0.5
}
fn d_total_epochs() -> u32 {
    30
}
fn d_base_lr() -> f64 {
    5e-4
}
fn d_batch() -> usize {
    8
}
fn d_tau_s() -> f64 {
    0.1
}
fn d_tau_t() -> f64 {
    0.04
}
fn d_momentum() -> f64 {
    0.996
}
fn d_center_momentum() -> f64 {
    0.9
}
fn d_true() -> bool {
    true
}
fn d_teacher_ratio() -> f64 {
    0.25
}
fn d_student_ratio() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    #[serde(default = "d_e_w")]
    pub e_w: u32,
    #[serde(default = "d_e_p")]
    pub e_p: u32,
    #[serde(default = "d_lambda_star")]
    pub lambda_star: f64,
    #[serde(default = "d_total_epochs")]
    pub total_epochs: u32,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub lr_warmup_steps: u64,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_tau_s")]
    pub tau_s: f64,
    #[serde(default = "d_tau_t")]
    pub tau_t: f64,
    /// Teacher temperature at epoch 0, ramped linearly to `tau_t` over `e_w`.
    #[serde(default = "d_tau_t")]
    pub tau_t_start: f64,
    #[serde(default = "d_momentum")]
    pub teacher_momentum: f64,
    #[serde(default)]
    pub momentum_cosine_ramp: bool,
    #[serde(default = "d_center_momentum")]
    pub center_momentum: f64,
    /// When false, `center_momentum` is the weight on the new batch mean.
    #[serde(default = "d_true")]
    pub center_momentum_is_retention: bool,
    #[serde(default = "d_teacher_ratio")]
    pub teacher_mask_ratio: f64,
    #[serde(default = "d_student_ratio")]
    pub student_mask_ratio: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        lambda_schedule(0, self.e_w, self.e_p, self.lambda_star)
            .map_err(|e| GaiaError::Config(e.to_string()))?;
        let bad = |m: String| Err(GaiaError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(self.tau_s > 0.0 && self.tau_t > 0.0 && self.tau_t_start > 0.0) {
            return bad("temperatures must be positive".into());
        }
        for (n, v) in [("teacher_momentum", self.teacher_momentum), ("center_momentum", self.center_momentum)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{n} {v} outside (0, 1)"));
            }
        }
        for (n, v) in [("teacher_mask_ratio", self.teacher_mask_ratio), ("student_mask_ratio", self.student_mask_ratio)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{n} {v} outside [0, 1)"));
            }
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }

    pub fn lambda(&self, epoch: u32) -> f64 {
        lambda_schedule(epoch, self.e_w, self.e_p, self.lambda_star).expect("validated schedule")
    }

    pub fn teacher_temperature(&self, epoch: u32) -> f64 {
        if epoch >= self.e_w {
            self.tau_t
        } else {
            self.tau_t_start + (self.tau_t - self.tau_t_start) * epoch as f64 / self.e_w as f64
        }
    }

    /// Retention factor applied to the old center.
    pub fn center_retention(&self) -> f64 {
        if self.center_momentum_is_retention {
            self.center_momentum
        } else {
            1.0 - self.center_momentum
        }
    }
}

/// One training example in patch space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patches: PatchGrid,
    /// Per-pixel missing flags, laid out like `patches.data`.
    pub missing: Array2<bool>,
}

impl Sample {
    pub fn from_field(field: &Field, patch: usize) -> Result<Self> {
        let (patches, missing) = patchify(field, patch)?;
        Ok(Self { patches, missing })
    }

    pub fn forced_hidden(&self) -> Vec<bool> {
        missing_dominated(&self.missing)
    }
}

/// Two teacher and two student masks for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub teacher: [MaskSpec; 2],
    pub student: [MaskSpec; 2],
}

/// Draws the four views of sample `index` at `step`.
pub fn sample_views(sample: &Sample, sched: &TrainSchedule, step: u64, index: u64) -> Result<Views> {
    let n = sample.patches.n_patches();
    let forced = sample.forced_hidden();
    let mut r = rng::stream(sched.seed, &[tags::TRAIN_MASK, step, index]);
    let mut draw = |ratio| sample_mask(n, ratio, &mut r, Some(&forced));
    let t0 = draw(sched.teacher_mask_ratio)?;
    let t1 = draw(sched.teacher_mask_ratio)?;
    let s0 = draw(sched.student_mask_ratio)?;
    let s1 = draw(sched.student_mask_ratio)?;
    Ok(Views { teacher: [t0, t1], student: [s0, s1] })
}

/// Teacher logits for both teacher views (`1 × K` each).
pub fn teacher_logits(sample: &Sample, views: &Views, teacher: &ParamSet, cfg: &ModelConfig) -> Result<[Mat; 2]> {
    let run = |mask: &MaskSpec| -> Result<Mat> {
        let tokens = model::encode(&sample.patches, mask, teacher, cfg)?;
        let global = tokens.global.ok_or_else(|| GaiaError::Config("self-distillation needs the global token".into()))?;
        Ok(model::project(&global, teacher)?.1)
    };
    Ok([run(&views.teacher[0])?, run(&views.teacher[1])?])
}

/// Value and gradients of the mixed objective for a fixed batch of views.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: f64,
    pub dino: f64,
    pub mae: f64,
    pub mae_pixels: usize,
    pub grads: ParamSet,
    /// Gradients with respect to each sample's input pixels, when requested.
    pub pixel_grads: Vec<Option<Mat>>,
}

struct SampleTerms {
    total: f64,
    dino: f64,
    mae: f64,
    grads: ParamSet,
    pixel_grad: Option<Mat>,
}

/// `λ·mean(dino) + (1 − λ)·mae`, where mae averages squared error over all
/// hidden, observed pixels of the first student view in the batch.
/// Teacher probabilities enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    student: &ParamSet,
    cfg: &ModelConfig,
    batch: &[Sample],
    views: &[Views],
    teacher_probs: &[[Mat; 2]],
    lambda: f64,
    tau_s: f64,
    with_pixel_grads: bool,
) -> Result<CombinedLoss> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if views.len() != batch.len() || teacher_probs.len() != batch.len() {
        return shape("batch, views and teacher targets differ in length");
    }
    let weights: Vec<Mat> = batch
        .iter()
        .zip(views)
        .map(|(s, v)| score_weights(&v.student[0], &s.missing))
        .collect::<Result<_>>()?;
    let mae_pixels: usize = weights.iter().map(|w| w.iter().filter(|&&x| x > 0.0).count()).sum();
    let denom = mae_pixels.max(1) as f64;
    let b = batch.len() as f64;

    let terms: Vec<SampleTerms> = (0..batch.len())
        .into_par_iter()
        .map(|i| -> Result<SampleTerms> {
            let s = &batch[i];
            let mut g = Graph::new();
            let mut bind = Binder::new(student, true);
            let px = g.leaf(s.patches.data.clone(), with_pixel_grads);
            let (gh, gw) = (s.patches.grid_h, s.patches.grid_w);
            let e1 = model::encode_graph(&mut g, &mut bind, cfg, px, gh, gw, &views[i].student[0])?;
            let e2 = model::encode_graph(&mut g, &mut bind, cfg, px, gh, gw, &views[i].student[1])?;
            let no_global = || GaiaError::Config("self-distillation needs the global token".into());
            let (_, l1) = model::project_graph(&mut g, &mut bind, e1.global.ok_or_else(no_global)?)?;
            let (_, l2) = model::project_graph(&mut g, &mut bind, e2.global.ok_or_else(no_global)?)?;
            let d = dino::dino_loss_graph(&mut g, [l1, l2], [&teacher_probs[i][0], &teacher_probs[i][1]], tau_s)?;
            let pred = model::decode_graph(&mut g, &mut bind, cfg, "dec", &e1)?;
            let m = g.weighted_sq_err(pred, s.patches.data.clone(), weights[i].clone(), denom);
            let total = g.combine(&[(d, lambda / b), (m, 1.0 - lambda)]);
            let mut grads = g.backward(total);
            let pixel_grad = if with_pixel_grads { grads.take(px) } else { None };
            Ok(SampleTerms {
                total: g.scalar(total),
                dino: g.scalar(d),
                mae: g.scalar(m),
                grads: bind.gradients(&g, &mut grads),
                pixel_grad,
            })
        })
        .collect::<Result<_>>()?;

    let mut grads = student.zeros_like();
    let (mut total, mut dino_sum, mut mae) = (0.0, 0.0, 0.0);
    let mut pixel_grads = Vec::with_capacity(terms.len());
    for t in terms {
        total += t.total;
        dino_sum += t.dino;
        mae += t.mae;
        for (name, g) in t.grads.iter() {
            if let Some(acc) = grads.get_mut(name) {
                *acc += g;
            }
        }
        pixel_grads.push(t.pixel_grad);
    }
    Ok(CombinedLoss { total, dino: dino_sum / b, mae, mae_pixels, grads, pixel_grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dino: f64,
    pub mae: f64,
    pub lambda: f64,
    pub lr: f64,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInstrumentation {
    pub n_patches: Vec<usize>,
    pub forced_hidden: Vec<usize>,
    pub teacher_hidden: Vec<[usize; 2]>,
    pub student_hidden: Vec<[usize; 2]>,
    pub mae_pixels: usize,
    pub grad_norm_encoder: f64,
    pub grad_norm_decoder: f64,
    pub grad_norm_head: f64,
    pub teacher_entropy: f64,
    pub teacher_temperature: f64,
    pub teacher_momentum: f64,
    pub collapse_alarm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: TeacherState,
    pub opt: AdamState,
    pub epoch: u32,
    pub step: u64,
    pub monitor: CollapseMonitor,
}

impl TrainState {
    pub fn init(cfg: &ModelConfig, sched: &TrainSchedule) -> Result<Self> {
        cfg.validate()?;
        sched.validate()?;
        if !cfg.use_global_token {
            return Err(GaiaError::Config("pretraining requires use_global_token".into()));
        }
        let student = model::init_params(cfg, sched.seed)?;
        let teacher = TeacherState::from_student(&student, cfg.head.prototypes, sched.teacher_momentum, sched.center_retention())?;
        Ok(Self { opt: AdamState::new(&student), student, teacher, epoch: 0, step: 0, monitor: CollapseMonitor::default() })
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig, sched: &TrainSchedule) -> Checkpoint {
        let meta = serde_json::json!({
            "model": cfg,
            "schedule": sched,
            "epoch": self.epoch,
            "step": self.step,
            "opt_t": self.opt.t,
            "monitor": self.monitor,
            "teacher_momentum": self.teacher.momentum,
            "center_momentum": self.teacher.center_momentum,
        });
        let mut ck = Checkpoint::new("pretrain", meta);
        ck.put("student", &self.student);
        ck.put("teacher", &self.teacher.params);
        ck.put("opt.m", &self.opt.m);
        ck.put("opt.v", &self.opt.v);
        ck.tensors.insert("teacher_center", self.teacher.center.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ModelConfig, TrainSchedule)> {
        if ck.kind != "pretrain" {
            return Err(GaiaError::Format(format!("expected a pretraining checkpoint, found `{}`", ck.kind)));
        }
        let cfg: ModelConfig = ck.meta_field("model")?;
        let sched: TrainSchedule = ck.meta_field("schedule")?;
        let student = ck.take("student");
        let opt = AdamState { m: ck.take("opt.m"), v: ck.take("opt.v"), t: ck.meta_field("opt_t")? };
        opt.m.check_same_layout(&student)?;
        opt.v.check_same_layout(&student)?;
        let center = ck
            .tensors
            .get("teacher_center")
            .cloned()
            .ok_or_else(|| GaiaError::Format("checkpoint lacks teacher_center".into()))?;
        let teacher = TeacherState {
            params: ck.take("teacher"),
            center,
            momentum: ck.meta_field("teacher_momentum")?,
            center_momentum: ck.meta_field("center_momentum")?,
        };
        let state = Self {
            student,
            teacher,
            opt,
            epoch: ck.meta_field("epoch")?,
            step: ck.meta_field("step")?,
            monitor: ck.meta_field("monitor")?,
        };
        Ok((state, cfg, sched))
    }
}

fn group_norm(grads: &ParamSet, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn non_finite_report(what: &str, loss: &CombinedLoss, params: &ParamSet) -> GaiaError {
    let describe = |set: &ParamSet| -> Vec<String> {
        set.iter()
            .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, v)| {
                let bad = v.iter().filter(|x| !x.is_finite()).count();
                format!("{k} {:?} ({bad} non-finite)", v.dim())
            })
            .collect()
    };
    GaiaError::NonFinite(format!(
        "{what}: total={} dino={} mae={}; gradients [{}]; parameters [{}]",
        loss.total,
        loss.dino,
        loss.mae,
        describe(&loss.grads).join(", "),
        describe(params).join(", ")
    ))
}

/// One optimizer step on `batch`; advances `state.step`.
pub fn train_step(
    batch: &[Sample],
    state: &mut TrainState,
    cfg: &ModelConfig,
    sched: &TrainSchedule,
    total_steps: u64,
) -> Result<(LossBreakdown, StepInstrumentation)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let lambda = sched.lambda(state.epoch);
    let lr = cosine_lr(state.step.min(total_steps), total_steps, sched.base_lr, sched.lr_warmup_steps);
    let tau_t = sched.teacher_temperature(state.epoch);

    let views: Vec<Views> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| sample_views(s, sched, state.step, i as u64))
        .collect::<Result<_>>()?;
    let t_logits: Vec<[Mat; 2]> = batch
        .par_iter()
        .zip(views.par_iter())
        .map(|(s, v)| teacher_logits(s, v, &state.teacher.params, cfg))
        .collect::<Result<_>>()?;
    let probs: Vec<[Mat; 2]> = t_logits
        .iter()
        .map(|[a, b]| {
            [dino::teacher_probs(a, &state.teacher.center, tau_t), dino::teacher_probs(b, &state.teacher.center, tau_t)]
        })
        .collect();

    let loss = combined_loss(&state.student, cfg, batch, &views, &probs, lambda, sched.tau_s, false)?;
    if !(loss.total.is_finite() && loss.dino.is_finite() && loss.mae.is_finite()) || loss.grads.first_non_finite().is_some() {
        return Err(non_finite_report(&format!("step {}", state.step), &loss, &state.student));
    }

    sched.optimizer.step(&mut state.student, &loss.grads, &mut state.opt, lr)?;
    if state.student.first_non_finite().is_some() {
        return Err(non_finite_report(&format!("after update at step {}", state.step), &loss, &state.student));
    }
    let momentum = dino::teacher_momentum(state.teacher.momentum, state.step, total_steps, sched.momentum_cosine_ramp);
    dino::ema_update(&mut state.teacher.params, &state.student, momentum)?;
    let all: Vec<&Mat> = t_logits.iter().flat_map(|v| v.iter()).collect();
    state.teacher.center = dino::center_update(&state.teacher.center, &all, state.teacher.center_momentum)?;

    let entropy = probs.iter().flat_map(|v| v.iter()).map(dino::mean_entropy).sum::<f64>() / (2 * batch.len()) as f64;
    let alarm = state.monitor.record(entropy, cfg.head.prototypes);
    state.step += 1;

    let instr = StepInstrumentation {
        n_patches: batch.iter().map(|s| s.patches.n_patches()).collect(),
        forced_hidden: batch.iter().map(|s| s.forced_hidden().iter().filter(|&&h| h).count()).collect(),
        teacher_hidden: views.iter().map(|v| [v.teacher[0].n_hidden(), v.teacher[1].n_hidden()]).collect(),
        student_hidden: views.iter().map(|v| [v.student[0].n_hidden(), v.student[1].n_hidden()]).collect(),
        mae_pixels: loss.mae_pixels,
        grad_norm_encoder: group_norm(&loss.grads, "enc."),
        grad_norm_decoder: group_norm(&loss.grads, "dec."),
        grad_norm_head: group_norm(&loss.grads, "head."),
        teacher_entropy: entropy,
        teacher_temperature: tau_t,
        teacher_momentum: momentum,
        collapse_alarm: alarm,
    };
    Ok((LossBreakdown { total: loss.total, dino: loss.dino, mae: loss.mae, lambda, lr }, instr))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u32,
    pub lambda: f64,
    pub lr: f64,
    pub dino: f64,
    pub mae: f64,
    pub total: f64,
    pub teacher_entropy: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_decoder: f64,
    pub grad_norm_head: f64,
    pub collapse_alarm: bool,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_log: PathBuf,
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size) as u64
}

/// Trains over `samples` for `sched.total_epochs`, writing a checkpoint per
/// epoch (including epoch 0) and a JSON-lines metrics log into `out_dir`.
/// With `resume`, continues from that checkpoint; `stop_after_epoch` ends
/// early for interrupted runs.
pub fn fit(
    samples: &[Sample],
    cfg: &ModelConfig,
    sched: &TrainSchedule,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after_epoch: Option<u32>,
) -> Result<FitOutcome> {
    if samples.is_empty() {
        return invalid("no training samples");
    }
    let mut state = match resume {
        Some(p) => {
            let (state, ck_cfg, _) = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if &ck_cfg != cfg {
                return Err(GaiaError::Config("model configuration differs from the resumed checkpoint".into()));
            }
            sched.validate()?;
            state
        }
        None => TrainState::init(cfg, sched)?,
    };
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut records = if resume.is_some() && log_path.exists() {
        read_metrics(&log_path)?.into_iter().filter(|r| r.step < state.step).collect()
    } else {
        Vec::new()
    };
    {
        let mut w = BufWriter::new(fs::File::create(&log_path)?);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }

    let mut checkpoints = Vec::new();
    if resume.is_none() {
        let p = checkpoint_path(out_dir, 0);
        state.to_checkpoint(cfg, sched).save(&p)?;
        checkpoints.push(p);
    }
    let per_epoch = steps_per_epoch(samples.len(), sched.batch_size);
    let total_steps = per_epoch * sched.total_epochs as u64;
    let last_epoch = stop_after_epoch.map_or(sched.total_epochs, |e| e.min(sched.total_epochs));

    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(sched.seed, &[tags::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let step = state.step;
            let (loss, instr) = train_step(&batch, &mut state, cfg, sched, total_steps)?;
            let rec = MetricsRecord {
                step,
                epoch,
                lambda: loss.lambda,
                lr: loss.lr,
                dino: loss.dino,
                mae: loss.mae,
                total: loss.total,
                teacher_entropy: instr.teacher_entropy,
                grad_norm_encoder: instr.grad_norm_encoder,
                grad_norm_decoder: instr.grad_norm_decoder,
                grad_norm_head: instr.grad_norm_head,
                collapse_alarm: instr.collapse_alarm,
            };
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            records.push(rec);
        }
        state.epoch += 1;
        let p = checkpoint_path(out_dir, state.epoch);
        state.to_checkpoint(cfg, sched).save(&p)?;
        checkpoints.push(p);
    }
    log.flush()?;
    let final_checkpoint = checkpoint_path(out_dir, state.epoch);
    if !final_checkpoint.exists() {
        state.to_checkpoint(cfg, sched).save(&final_checkpoint)?;
    }
    Ok(FitOutcome { final_checkpoint, checkpoints, metrics_log: log_path, state, records })
}
