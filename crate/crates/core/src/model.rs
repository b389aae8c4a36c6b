//! Shared ViT encoder, lightweight decoder, and the self-distillation
//! projection head.
//!
//! The encoder embeds only visible patches, adds fixed 2-D sinusoidal
//! positions, optionally prepends a learned global token (which feeds the
//! projection head and carries no positional term), and applies pre-norm
//! transformer blocks. The decoder re-inserts a shared mask token at hidden
//! positions, adds decoder-width positions, and predicts pixels for every
//! patch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{invalid, shape, GaiaError, Result};
use crate::params::{Binder, ParamSet};
use crate::patch::{positional_embedding, MaskSpec, PatchGrid};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinoHeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub use_global_token: bool,
    pub head: DinoHeadConfig,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Full-size geometry: 30×30 patches, 912/24/16 encoder, 512/8/16 decoder.
    pub fn paper() -> Self {
        Self {
            patch_h: 30,
            patch_w: 30,
            enc_width: 912,
            enc_layers: 24,
            enc_heads: 16,
            dec_width: 512,
            dec_layers: 8,
            dec_heads: 16,
            mlp_ratio: 4,
            use_global_token: true,
            head: DinoHeadConfig { hidden: 2048, bottleneck: 256, prototypes: 4096 },
        }
    }

    /// Desk-scale default for 64×192 fields with 8×8 patches.
    pub fn desk() -> Self {
        Self {
            patch_h: 8,
            patch_w: 8,
            enc_width: 64,
            enc_layers: 4,
            enc_heads: 4,
            dec_width: 32,
            dec_layers: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            use_global_token: true,
            head: DinoHeadConfig { hidden: 128, bottleneck: 64, prototypes: 256 },
        }
    }

    /// Smallest useful configuration, for tests.
    pub fn tiny() -> Self {
        Self {
            patch_h: 8,
            patch_w: 8,
            enc_width: 32,
            enc_layers: 2,
            enc_heads: 4,
            dec_width: 32,
            dec_layers: 1,
            dec_heads: 4,
            mlp_ratio: 2,
            use_global_token: true,
            head: DinoHeadConfig { hidden: 32, bottleneck: 16, prototypes: 32 },
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn validate(&self) -> Result<()> {
        let check = |cond: bool, msg: &str| if cond { Ok(()) } else { invalid(msg.to_string()) };
        check(self.patch_h > 0 && self.patch_w > 0, "patch size must be positive")?;
        check(self.patch_h == self.patch_w, "patches must be square")?;
        check(self.enc_heads > 0 && self.enc_width % self.enc_heads == 0, "enc_width must be divisible by enc_heads")?;
        check(self.dec_heads > 0 && self.dec_width % self.dec_heads == 0, "dec_width must be divisible by dec_heads")?;
        check(self.dec_width <= self.enc_width, "dec_width must not exceed enc_width")?;
        check(self.enc_width % 4 == 0 && self.dec_width % 4 == 0, "widths must be multiples of 4")?;
        check(self.mlp_ratio > 0, "mlp_ratio must be positive")?;
        check(self.head.prototypes >= 2, "at least two prototypes are required")?;
        check(self.head.hidden > 0 && self.head.bottleneck > 0, "head widths must be positive")?;
        Ok(())
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const INIT_STD: f64 = 0.02;

/// Truncated-normal tensor drawn from a stream keyed by its name, so the
/// value does not depend on initialization order.
pub fn trunc_normal_param(seed: u64, name: &str, rows: usize, cols: usize) -> Mat {
    let mut g = rng::stream(seed, &[rng::tags::INIT, name_hash(name)]);
    Mat::from_shape_fn((rows, cols), |_| rng::trunc_normal(&mut g, INIT_STD))
}

fn init_linear(p: &mut ParamSet, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    let w = format!("{prefix}.w");
    p.insert(w.clone(), trunc_normal_param(seed, &w, fan_in, fan_out));
    p.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
}

fn init_norm(p: &mut ParamSet, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.g"), Mat::ones((1, width)));
    p.insert(format!("{prefix}.b"), Mat::zeros((1, width)));
}

fn init_block(p: &mut ParamSet, seed: u64, prefix: &str, width: usize, mlp_ratio: usize) {
    init_norm(p, &format!("{prefix}.ln1"), width);
    init_linear(p, seed, &format!("{prefix}.qkv"), width, 3 * width);
    init_linear(p, seed, &format!("{prefix}.proj"), width, width);
    init_norm(p, &format!("{prefix}.ln2"), width);
    init_linear(p, seed, &format!("{prefix}.fc1"), width, mlp_ratio * width);
    init_linear(p, seed, &format!("{prefix}.fc2"), mlp_ratio * width, width);
}

pub fn init_encoder(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let w = cfg.enc_width;
    init_linear(&mut p, seed, "enc.patch", cfg.patch_dim(), w);
    if cfg.use_global_token {
        p.insert("enc.global_token", trunc_normal_param(seed, "enc.global_token", 1, w));
    }
    for i in 0..cfg.enc_layers {
        init_block(&mut p, seed, &format!("enc.block{i}"), w, cfg.mlp_ratio);
    }
    init_norm(&mut p, "enc.norm", w);
    p
}

/// Decoder-geometry parameters under `prefix` with `out_dim` outputs per patch.
pub fn init_decoder(cfg: &ModelConfig, seed: u64, prefix: &str, out_dim: usize) -> ParamSet {
    let mut p = ParamSet::new();
    let w = cfg.dec_width;
    init_linear(&mut p, seed, &format!("{prefix}.embed"), cfg.enc_width, w);
    let mt = format!("{prefix}.mask_token");
    p.insert(mt.clone(), trunc_normal_param(seed, &mt, 1, w));
    for i in 0..cfg.dec_layers {
        init_block(&mut p, seed, &format!("{prefix}.block{i}"), w, cfg.mlp_ratio);
    }
    init_norm(&mut p, &format!("{prefix}.norm"), w);
    init_linear(&mut p, seed, &format!("{prefix}.pred"), w, out_dim);
    p
}

pub fn init_head(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let h = &cfg.head;
    init_linear(&mut p, seed, "head.fc1", cfg.enc_width, h.hidden);
    init_linear(&mut p, seed, "head.fc2", h.hidden, h.hidden);
    init_linear(&mut p, seed, "head.fc3", h.hidden, h.bottleneck);
    p.insert("head.last.v", trunc_normal_param(seed, "head.last.v", h.bottleneck, h.prototypes));
    p
}

/// Encoder, reconstruction decoder, and projection head.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = init_encoder(cfg, seed);
    p.extend(init_decoder(cfg, seed, "dec", cfg.patch_dim()));
    p.extend(init_head(cfg, seed));
    Ok(p)
}

/// Whether decoupled weight decay applies (matrices only).
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".v")
}

pub(crate) fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, bias))
}

fn norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(g, &format!("{prefix}.g"))?;
    let beta = b.var(g, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

fn block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let width = g.value(x).ncols();
    let dh = width / heads;
    let h = norm(g, b, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(g, b, &format!("{prefix}.qkv"), h)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.slice_cols(qkv, i * dh, dh);
        let k = g.slice_cols(qkv, width + i * dh, dh);
        let v = g.slice_cols(qkv, 2 * width + i * dh, dh);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, v));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let proj = linear(g, b, &format!("{prefix}.proj"), cat)?;
    let x = g.add(x, proj);
    let h = norm(g, b, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, b, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.fc2"), h)?;
    Ok(g.add(x, h))
}

/// Configuration plus weights, as used for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { cfg: cfg.clone(), params: init_params(cfg, seed)? })
    }

    /// Student weights from a pretraining or task checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = crate::checkpoint::Checkpoint::load(path)?;
        let cfg: ModelConfig = ck.meta_field("model")?;
        cfg.validate()?;
        let params = ck.take("student");
        if params.is_empty() {
            return Err(GaiaError::Format(format!("{} holds no model weights", path.display())));
        }
        Ok(Self { cfg, params })
    }
}

/// Graph handles produced by [`encode_graph`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub patch_tokens: Var,
    pub global: Option<Var>,
    pub visible_index: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Encodes the visible rows of `pixels` (an `n_patches × patch_dim` node).
/// Hidden rows are never read.
pub fn encode_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    pixels: Var,
    grid_h: usize,
    grid_w: usize,
    mask: &MaskSpec,
) -> Result<Encoded> {
    let n = grid_h * grid_w;
    if mask.len() != n || g.value(pixels).dim() != (n, cfg.patch_dim()) {
        return shape(format!(
            "mask of {} / pixels {:?} do not match a {grid_h}x{grid_w} grid of {}-pixel patches",
            mask.len(),
            g.value(pixels).dim(),
            cfg.patch_dim()
        ));
    }
    let visible = mask.visible_index();
    if visible.is_empty() {
        return Err(GaiaError::Degenerate("every patch is hidden; at least one visible patch is required".into()));
    }
    let x = g.pick_rows(&[pixels], visible.iter().map(|&k| (0, k)).collect());
    let x = linear(g, b, "enc.patch", x)?;
    let pos = positional_embedding(grid_h, grid_w, cfg.enc_width)?;
    let pos = g.constant(crate::patch::select_rows(&pos, &visible));
    let mut x = g.add(x, pos);
    let offset = usize::from(cfg.use_global_token);
    if cfg.use_global_token {
        let tok = b.var(g, "enc.global_token")?;
        let mut picks = vec![(0, 0)];
        picks.extend((0..visible.len()).map(|i| (1, i)));
        x = g.pick_rows(&[tok, x], picks);
    }
    for i in 0..cfg.enc_layers {
        x = block(g, b, &format!("enc.block{i}"), x, cfg.enc_heads)?;
    }
    let x = norm(g, b, "enc.norm", x)?;
    let global = cfg.use_global_token.then(|| g.pick_rows(&[x], vec![(0, 0)]));
    let patch_tokens = if cfg.use_global_token {
        g.pick_rows(&[x], (0..visible.len()).map(|i| (0, i + offset)).collect())
    } else {
        x
    };
    Ok(Encoded { patch_tokens, global, visible_index: visible, grid_h, grid_w })
}

/// Full-grid decoder under `prefix`; returns `n_patches × out_dim`.
pub fn decode_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    enc: &Encoded,
) -> Result<Var> {
    let n = enc.grid_h * enc.grid_w;
    if g.value(enc.patch_tokens).nrows() != enc.visible_index.len() {
        return shape("token count does not match the visible index");
    }
    let y = linear(g, b, &format!("{prefix}.embed"), enc.patch_tokens)?;
    let mt = b.var(g, &format!("{prefix}.mask_token"))?;
    let mut picks = vec![(1, 0); n];
    for (i, &k) in enc.visible_index.iter().enumerate() {
        if k >= n {
            return shape(format!("visible index {k} outside a grid of {n} patches"));
        }
        picks[k] = (0, i);
    }
    let full = g.pick_rows(&[y, mt], picks);
    let pos = g.constant(positional_embedding(enc.grid_h, enc.grid_w, cfg.dec_width)?);
    let mut x = g.add(full, pos);
    for i in 0..cfg.dec_layers {
        x = block(g, b, &format!("{prefix}.block{i}"), x, cfg.dec_heads)?;
    }
    let x = norm(g, b, &format!("{prefix}.norm"), x)?;
    linear(g, b, &format!("{prefix}.pred"), x)
}

/// Projection-head bottleneck (unit rows) and prototype logits.
pub fn project_graph(g: &mut Graph, b: &mut Binder, global: Var) -> Result<(Var, Var)> {
    let h = linear(g, b, "head.fc1", global)?;
    let h = g.gelu(h);
    let h = linear(g, b, "head.fc2", h)?;
    let h = g.gelu(h);
    let h = linear(g, b, "head.fc3", h)?;
    let z = g.l2_normalize_rows(h);
    let v = b.var(g, "head.last.v")?;
    let w = g.normalize_cols(v);
    Ok((z, g.matmul(z, w)))
}

/// Materialized encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `n_visible × enc_width`, ordered as `visible_index`.
    pub tokens: Mat,
    pub visible_index: Vec<usize>,
    pub global: Option<Mat>,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub fn encode(patches: &PatchGrid, mask: &MaskSpec, params: &ParamSet, cfg: &ModelConfig) -> Result<TokenSet> {
    if (patches.patch_h, patches.patch_w) != (cfg.patch_h, cfg.patch_w) {
        return shape("patch size differs from the model configuration");
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let px = g.constant(patches.data.clone());
    let enc = encode_graph(&mut g, &mut b, cfg, px, patches.grid_h, patches.grid_w, mask)?;
    Ok(TokenSet {
        tokens: g.value(enc.patch_tokens).clone(),
        global: enc.global.map(|v| g.value(v).clone()),
        visible_index: enc.visible_index,
        grid_h: patches.grid_h,
        grid_w: patches.grid_w,
    })
}

/// Decodes with the parameters under `prefix` (`"dec"` for reconstruction).
pub fn decode_with(tokens: &TokenSet, mask: &MaskSpec, params: &ParamSet, cfg: &ModelConfig, prefix: &str) -> Result<Mat> {
    if tokens.visible_index != mask.visible_index() {
        return shape("mask does not match the token set's visible patches");
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let t = g.constant(tokens.tokens.clone());
    let enc = Encoded {
        patch_tokens: t,
        global: None,
        visible_index: tokens.visible_index.clone(),
        grid_h: tokens.grid_h,
        grid_w: tokens.grid_w,
    };
    let out = decode_graph(&mut g, &mut b, cfg, prefix, &enc)?;
    Ok(g.value(out).clone())
}

/// Pixel predictions for every patch.
pub fn decode(tokens: &TokenSet, mask: &MaskSpec, params: &ParamSet, cfg: &ModelConfig) -> Result<PatchGrid> {
    let data = decode_with(tokens, mask, params, cfg, "dec")?;
    Ok(PatchGrid {
        data,
        grid_h: tokens.grid_h,
        grid_w: tokens.grid_w,
        patch_h: cfg.patch_h,
        patch_w: cfg.patch_w,
    })
}

/// Unit bottleneck vectors and logits for a batch of global tokens (rows).
pub fn project(global: &Mat, params: &ParamSet) -> Result<(Mat, Mat)> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let x = g.constant(global.clone());
    let (z, logits) = project_graph(&mut g, &mut b, x)?;
    Ok((g.value(z).clone(), g.value(logits).clone()))
}
