//! Task heads: precipitation regression, atmospheric-river segmentation,
//! fine-tuning, and the feature-pyramid adapter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Mat};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape, GaiaError, Result};
use crate::field::Field;
use crate::model::{self, init_decoder, trunc_normal_param, Model, ModelConfig};
use crate::params::{Binder, ParamSet};
use crate::patch::{patchify, sample_mask, unpatchify_values, MaskSpec, PatchGrid};
use crate::rng::{self, tags};
use crate::train::{cosine_lr, AdamState, AdamW};

pub const TASK_PREFIX: &str = "task";
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Precip,
    Ar,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Precip => "precip",
            Task::Ar => "ar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "precip" => Ok(Task::Precip),
            "ar" => Ok(Task::Ar),
            other => invalid(format!("unknown task `{other}` (expected precip or ar)")),
        }
    }
}

/// Encoder plus a task decoder under [`TASK_PREFIX`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task: Task,
    pub model: Model,
}

impl TaskModel {
    /// Encoder copied from `base`, fresh task decoder.
    pub fn attach(task: Task, base: &Model, seed: u64) -> Result<Self> {
        let cfg = &base.cfg;
        let mut params = base.params.subset(&["enc."]);
        if params.is_empty() {
            return Err(GaiaError::Format("base model holds no encoder weights".into()));
        }
        params.extend(init_decoder(cfg, seed ^ 0x7A5C, TASK_PREFIX, cfg.patch_dim()));
        Ok(Self { task, model: Model { cfg: cfg.clone(), params } })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "task" {
            return Err(GaiaError::Format(format!("{} is not a task checkpoint", path.display())));
        }
        let task: Task = ck.meta_field("task")?;
        let cfg: ModelConfig = ck.meta_field("model")?;
        Ok(Self { task, model: Model { cfg, params: ck.take("student") } })
    }

    pub fn save(&self, path: &Path, meta_extra: serde_json::Value) -> Result<()> {
        let mut ck = Checkpoint::new(
            "task",
            serde_json::json!({ "task": self.task, "model": self.model.cfg, "finetune": meta_extra }),
        );
        ck.put("student", &self.model.params);
        ck.save(path)
    }

    /// Raw decoder output per pixel (log1p rain rate or logit).
    pub fn raw(&self, field: &Field, mask: &MaskSpec) -> Result<Array2<f64>> {
        let cfg = &self.model.cfg;
        let (grid, _) = patchify(field, cfg.patch_h)?;
        let ts = model::encode(&grid, mask, &self.model.params, cfg)?;
        let out = model::decode_with(&ts, mask, &self.model.params, cfg, TASK_PREFIX)?;
        unpatchify_values(&grid.with_data(out)?)
    }

    /// Task output: rain rate (mm/hr, non-negative) or probability.
    pub fn forward(&self, field: &Field, mask: &MaskSpec) -> Result<Field> {
        let raw = self.raw(field, mask)?;
        let out = match self.task {
            Task::Precip => raw.mapv(precip_activation),
            Task::Ar => raw.mapv(ar_probability),
        };
        Ok(field.like(out))
    }

    /// Forward pass with the inference mask ratio (seeded by timestamp).
    pub fn predict(&self, field: &Field, mask_ratio: f64) -> Result<Field> {
        let p = self.model.cfg.patch_h;
        let n = (field.height() / p) * (field.width() / p);
        let mask = if mask_ratio > 0.0 {
            sample_mask(n, mask_ratio, &mut rng::stream(field.timestamp as u64, &[tags::FINETUNE]), None)?
        } else {
            MaskSpec::none(n)
        };
        self.forward(field, &mask)
    }
}

/// `max(0, expm1(y))`: inverse of the log1p label transform, then rectified.
pub fn precip_activation(y: f64) -> f64 {
    y.exp_m1().max(0.0)
}

pub fn ar_probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn d_epochs() -> u32 {
    20
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default = "d_epochs")]
    pub epochs: u32,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub lr_warmup_steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Training mask ratio; `None` picks 0.10 for precip and 0 for ar.
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamW,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl FinetuneConfig {
    pub fn train_mask_ratio(&self, task: Task) -> f64 {
        self.mask_ratio.unwrap_or(match task {
            Task::Precip => 0.10,
            Task::Ar => 0.0,
        })
    }
}

struct Example {
    patches: PatchGrid,
    target: Mat,
    weight: Mat,
    timestamp: i64,
}

fn example(task: Task, frame: &Field, label: &Field, patch: usize) -> Result<Example> {
    if frame.dim() != label.dim() {
        return shape(format!("frame {:?} and label {:?} differ in shape", frame.dim(), label.dim()));
    }
    if frame.timestamp != label.timestamp {
        return invalid(format!(
            "label misalignment: frame at {} paired with label at {}",
            frame.timestamp, label.timestamp
        ));
    }
    let (patches, _) = patchify(frame, patch)?;
    let (lab, lmiss) = patchify(label, patch)?;
    let target = match task {
        Task::Precip => lab.data.mapv(|v| v.max(0.0).ln_1p()),
        Task::Ar => lab.data.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }),
    };
    let weight = lmiss.mapv(|m| if m { 0.0 } else { 1.0 });
    Ok(Example { patches, target, weight, timestamp: frame.timestamp })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub records: Vec<FinetuneRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains encoder and task decoder on aligned frame/label pairs. MSE in
/// log1p space for precip, BCE with logits for ar, both over every labeled
/// pixel. With `out_dir`, writes `task.ckpt` and `finetune_metrics.jsonl`.
pub fn finetune(
    task: Task,
    base: &Model,
    frames: &[Field],
    labels: &[Field],
    cfg: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if frames.is_empty() || frames.len() != labels.len() {
        return invalid(format!("{} frames vs {} labels", frames.len(), labels.len()));
    }
    if cfg.batch_size == 0 {
        return Err(GaiaError::Config("batch_size must be positive".into()));
    }
    let ratio = cfg.train_mask_ratio(task);
    if !(0.0..1.0).contains(&ratio) {
        return Err(GaiaError::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let mcfg = base.cfg.clone();
    let examples: Vec<Example> = frames
        .iter()
        .zip(labels)
        .map(|(f, l)| example(task, f, l, mcfg.patch_h))
        .collect::<Result<_>>()?;
    let mut tm = TaskModel::attach(task, base, cfg.seed)?;
    let mut opt = AdamState::new(&tm.model.params);
    let per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tags::FINETUNE, 1, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let denom: f64 = chunk.iter().map(|&i| examples[i].weight.sum()).sum::<f64>().max(1.0);
            let params = &tm.model.params;
            let parts: Vec<(f64, ParamSet)> = chunk
                .par_iter()
                .map(|&i| -> Result<(f64, ParamSet)> {
                    let ex = &examples[i];
                    let n = ex.patches.n_patches();
                    let mask = if ratio > 0.0 {
                        let mut r = rng::stream(cfg.seed, &[tags::FINETUNE, 2, step, ex.timestamp as u64]);
                        sample_mask(n, ratio, &mut r, None)?
                    } else {
                        MaskSpec::none(n)
                    };
                    let mut g = Graph::new();
                    let mut b = Binder::new(params, true);
                    let px = g.constant(ex.patches.data.clone());
                    let enc = model::encode_graph(&mut g, &mut b, &mcfg, px, ex.patches.grid_h, ex.patches.grid_w, &mask)?;
                    let out = model::decode_graph(&mut g, &mut b, &mcfg, TASK_PREFIX, &enc)?;
                    let loss = match task {
                        Task::Precip => g.weighted_sq_err(out, ex.target.clone(), ex.weight.clone(), denom),
                        Task::Ar => g.bce_logits(out, ex.target.clone(), ex.weight.clone(), denom),
                    };
                    let mut grads = g.backward(loss);
                    Ok((g.scalar(loss), b.gradients(&g, &mut grads)))
                })
                .collect::<Result<_>>()?;
            let mut grads = tm.model.params.zeros_like();
            let mut loss = 0.0;
            for (l, gs) in parts {
                loss += l;
                for (k, v) in gs.iter() {
                    if let Some(acc) = grads.get_mut(k) {
                        *acc += v;
                    }
                }
            }
            if !loss.is_finite() || grads.first_non_finite().is_some() {
                return Err(GaiaError::NonFinite(format!(
                    "fine-tuning step {step}: loss {loss}, first bad gradient {:?}",
                    grads.first_non_finite()
                )));
            }
            let lr = cosine_lr(step, total, cfg.base_lr, cfg.lr_warmup_steps);
            cfg.optimizer.step(&mut tm.model.params, &grads, &mut opt, lr)?;
            records.push(FinetuneRecord { step, epoch, lr, loss });
            step += 1;
        }
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut log = fs::File::create(dir.join("finetune_metrics.jsonl"))?;
            for r in &records {
                serde_json::to_writer(&mut log, r)?;
                log.write_all(b"\n")?;
            }
            let p = dir.join("task.ckpt");
            tm.save(&p, serde_json::to_value(cfg)?)?;
            Some(p)
        }
        None => None,
    };
    Ok(FinetuneOutcome { model: tm, records, checkpoint })
}

/// Mean squared error in label units over pixels observed in `label`.
pub fn pixel_mse(pred: &Field, label: &Field) -> Result<f64> {
    if pred.dim() != label.dim() {
        return shape("prediction and label differ in shape");
    }
    let (mut s, mut n) = (0.0, 0usize);
    Zip::from(&pred.values).and(&label.values).and(&label.missing).for_each(|p, l, &m| {
        if !m {
            s += (p - l) * (p - l);
            n += 1;
        }
    });
    if n == 0 {
        return Err(GaiaError::Degenerate("label has no observed pixels".into()));
    }
    Ok(s / n as f64)
}

/// Feature pyramid: level `i` is `channels × (grid_h·2^i) × (grid_w·2^i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Array3<f64>>,
}

pub const PYRAMID_LEVELS: usize = 4;
pub const DEFAULT_CHANNELS: usize = 256;

/// Lateral 1×1 projection, 3×3 convolution, three stride-2 transposed convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnAdapter {
    pub channels: usize,
    pub params: ParamSet,
}

impl FpnAdapter {
    pub fn init(in_width: usize, channels: usize, seed: u64) -> Result<Self> {
        if in_width == 0 || channels == 0 {
            return invalid("adapter widths must be positive");
        }
        let mut p = ParamSet::new();
        let s = seed ^ tags::ADAPTER;
        p.insert("fpn.lateral.w", trunc_normal_param(s, "fpn.lateral.w", in_width, channels));
        p.insert("fpn.lateral.b", Mat::zeros((1, channels)));
        p.insert("fpn.smooth.w", trunc_normal_param(s, "fpn.smooth.w", 9 * channels, channels));
        p.insert("fpn.smooth.b", Mat::zeros((1, channels)));
        for i in 1..PYRAMID_LEVELS {
            let name = format!("fpn.up{i}.w");
            p.insert(name.clone(), trunc_normal_param(s, &name, 4 * channels, channels));
            p.insert(format!("fpn.up{i}.b"), Mat::zeros((1, channels)));
        }
        Ok(Self { channels, params: p })
    }

    /// Pyramid from a full-visibility token set.
    pub fn forward(&self, tokens: &model::TokenSet) -> Result<PyramidFeatures> {
        let n = tokens.grid_h * tokens.grid_w;
        if tokens.visible_index.len() != n || tokens.visible_index.iter().enumerate().any(|(i, &k)| i != k) {
            return invalid("the adapter needs a token set with every patch visible");
        }
        self.forward_grid(&tokens.tokens, tokens.grid_h, tokens.grid_w)
    }

    /// Pyramid from row-major `(gh·gw) × width` features.
    pub fn forward_grid(&self, x: &Mat, gh: usize, gw: usize) -> Result<PyramidFeatures> {
        let lat_w = self.params.require("fpn.lateral.w")?;
        if x.nrows() != gh * gw || x.ncols() != lat_w.nrows() {
            return shape(format!("tokens {:?} do not fit a {gh}x{gw} grid of width {}", x.dim(), lat_w.nrows()));
        }
        let c = self.channels;
        let lat = x.dot(lat_w) + self.params.require("fpn.lateral.b")?;
        let sw = self.params.require("fpn.smooth.w")?;
        let mut p0 = Mat::zeros((gh * gw, c));
        p0 += self.params.require("fpn.smooth.b")?;
        for (t, (dy, dx)) in (-1i64..=1).flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx))).enumerate() {
            let shifted = Mat::from_shape_fn((gh * gw, c), |(q, ch)| {
                let (y, xx) = ((q / gw) as i64 + dy, (q % gw) as i64 + dx);
                if y < 0 || xx < 0 || y >= gh as i64 || xx >= gw as i64 {
                    0.0
                } else {
                    lat[[y as usize * gw + xx as usize, ch]]
                }
            });
            p0 += &shifted.dot(&sw.slice(ndarray::s![t * c..(t + 1) * c, ..]));
        }
        let mut levels = vec![to_chw(&p0, gh, gw)];
        let (mut cur, mut h, mut w) = (p0, gh, gw);
        for i in 1..PYRAMID_LEVELS {
            let uw = self.params.require(&format!("fpn.up{i}.w"))?;
            let ub = self.params.require(&format!("fpn.up{i}.b"))?;
            let mut next = Mat::zeros((4 * h * w, c));
            for (t, (a, b)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let y = cur.dot(&uw.slice(ndarray::s![t * c..(t + 1) * c, ..])) + ub;
                for q in 0..h * w {
                    let (r, col) = (q / w, q % w);
                    let dst = (2 * r + a) * (2 * w) + 2 * col + b;
                    next.row_mut(dst).assign(&y.row(q));
                }
            }
            h *= 2;
            w *= 2;
            cur = next;
            levels.push(to_chw(&cur, h, w));
        }
        Ok(PyramidFeatures { levels })
    }
}

fn to_chw(m: &Mat, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((m.ncols(), h, w), |(c, y, x)| m[[y * w + x, c]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations() {
        assert_eq!(ar_probability(0.0), 0.5);
        assert!(ar_probability(1e6) < 1.0 && ar_probability(-1e6) > 0.0);
        assert_eq!(precip_activation(-3.0), 0.0);
        assert!((precip_activation(2f64.ln_1p()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_at_saturation_is_small() {
        let mut g = Graph::new();
        let z = g.leaf(Mat::from_shape_vec((1, 4), vec![20.0, -20.0, 20.0, -20.0]).unwrap(), true);
        let y = Mat::from_shape_vec((1, 4), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = g.bce_logits(z, y, Mat::ones((1, 4)), 4.0);
        assert!(g.scalar(l) < 1e-3);
    }

    #[test]
    fn pyramid_shapes_and_zero_input() {
        let a = FpnAdapter::init(8, 16, 0).unwrap();
        let p = a.forward_grid(&Mat::zeros((3 * 5, 8)), 3, 5).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(dims, vec![(16, 3, 5), (16, 6, 10), (16, 12, 20), (16, 24, 40)]);
        assert!(p.levels.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pyramid_rejects_partial_tokens() {
        let cfg = ModelConfig::tiny();
        let m = Model::init(&cfg, 0).unwrap();
        let f = Field::observed(Array2::from_elem((16, 16), 0.5));
        let (g, _) = patchify(&f, 8).unwrap();
        let mask = MaskSpec::from_hidden(vec![true, false, false, false], crate::patch::MaskFamily::Random);
        let ts = model::encode(&g, &mask, &m.params, &cfg).unwrap();
        let a = FpnAdapter::init(cfg.enc_width, 8, 0).unwrap();
        assert!(a.forward(&ts).is_err());
        let full = model::encode(&g, &MaskSpec::none(4), &m.params, &cfg).unwrap();
        assert_eq!(a.forward(&full).unwrap().levels[3].dim(), (8, 16, 16));
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let cfg = ModelConfig::tiny();
        let m = Model::init(&cfg, 0).unwrap();
        let f = Field::observed(Array2::from_elem((16, 16), 0.5)).with_meta(10, "g");
        let l = Field::observed(Array2::from_elem((16, 16), 0.0)).with_meta(11, "g");
        let c = FinetuneConfig { epochs: 1, ..Default::default() };
        assert!(matches!(finetune(Task::Ar, &m, &[f], &[l], &c, None), Err(GaiaError::InvalidInput(_))));
    }
}
