//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{embed_dataset, pca_profile, temporal_coherence};
use crate::config::{Preset, RunConfig};
use crate::error::{GaiaError, Result};
use crate::field::{normalize, write_channels, write_fld, ChannelGrid, Field, Manifest, ManifestRecord};
use crate::gapfill::{gapfill, hidden_pixels, mask_ratio_sweep, rmse_masked, ssim, sweep_mask};
use crate::heads::{finetune, pixel_mse, FpnAdapter, Task, TaskModel};
use crate::metrics::{
    binary_metrics_values, patch_aggregate, threshold_sweep, track_metrics, Detection, TrackRecord,
};
use crate::model::{self, Model};
use crate::patch::{patchify, MaskFamily, MaskSpec};
use crate::preprocess::{downscale, local_gap_fill};
use crate::report::{build_report, panels_png, rgb_png};
use crate::rng;
use crate::synth::{synth_labels, synth_sequence, LabelTask, SynthLabels};
use crate::train::{fit, Sample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_INPUT: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_INVALID_INPUT: i32 = 6;
pub const EXIT_NUMERIC: i32 = 7;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing argument)
  3  configuration error (bad config file, failed validation, bad GAIA_THREADS)
  4  missing input file or directory
  5  I/O or file-format error
  6  invalid input data (shape mismatch, misaligned labels, degenerate input)
  7  numerical failure (non-finite loss or parameters)

Errors are printed to stderr as one JSON object: {\"error\": {\"kind\", \"message\", \"exit_code\"}}.

Environment:
  GAIA_THREADS  number of worker threads (default: all cores)";

#[derive(Debug, Parser)]
#[command(name = "gaia", version, about = "Hybrid masked-autoencoding and self-distillation pretraining for infrared imagery", after_help = EXIT_CODES)]
pub struct Cli {
    /// JSON file deep-merged over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with precip, ar and tc labels.
    Synth(SynthArgs),
    /// Gap-fill and downscale the frames of a manifest.
    Preprocess(PreprocessArgs),
    /// Pretrain the hybrid model.
    Pretrain(PretrainArgs),
    /// Gap-fill one frame, or sweep mask families and ratios.
    Gapfill(GapfillArgs),
    /// Explained-variance profile and projections of patch embeddings.
    Pca(PcaArgs),
    /// Lagged cosine similarity of pooled embeddings.
    Coherence(CoherenceArgs),
    /// Fine-tune a task head from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate a task model or detections.
    Eval(EvalArgs),
    /// Run the feature-pyramid adapter and report level shapes.
    AdapterShapes(AdapterArgs),
    /// Aggregate run directories into summary JSON and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub missing_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Frame manifest (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub radius: Option<usize>,
    /// Target size as HxW.
    #[arg(long, value_name = "HxW")]
    pub downscale: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GapfillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate every configured family and ratio.
    #[arg(long)]
    pub sweep: bool,
    /// Frame index for a single gap fill.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value = "random")]
    pub family: String,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub components: Option<usize>,
    /// Decompose each frame separately instead of pooling.
    #[arg(long)]
    pub per_frame: bool,
    #[arg(long, default_value_t = 0.0)]
    pub mask_ratio: f64,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CoherenceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadTask {
    Precip,
    Ar,
}

impl From<HeadTask> for Task {
    fn from(t: HeadTask) -> Self {
        match t {
            HeadTask::Precip => Task::Precip,
            HeadTask::Ar => Task::Ar,
        }
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: HeadTask,
    /// Pretraining checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest pairing frames with labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvalTask {
    Precip,
    Ar,
    Tc,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Task checkpoint (precip, ar).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Manifest pairing frames with labels (precip, ar).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Track records JSON (tc).
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    /// Scored detections JSON (tc).
    #[arg(long)]
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdapterArgs {
    /// Encoder checkpoint; a freshly initialized encoder otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Encode the first frame of this manifest instead of random tokens.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 12)]
    pub grid_w: usize,
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to aggregate.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn exit_code(e: &GaiaError) -> i32 {
    match e {
        GaiaError::Config(_) => EXIT_CONFIG,
        GaiaError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
        GaiaError::Io(_) | GaiaError::Format(_) | GaiaError::Json(_) => EXIT_IO,
        GaiaError::InvalidInput(_) | GaiaError::Shape(_) | GaiaError::Degenerate(_) => EXIT_INVALID_INPUT,
        GaiaError::NonFinite(_) => EXIT_NUMERIC,
    }
}

fn error_kind(e: &GaiaError) -> &'static str {
    match e {
        GaiaError::Config(_) => "config",
        GaiaError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing_input",
        GaiaError::Io(_) => "io",
        GaiaError::Format(_) => "format",
        GaiaError::Json(_) => "json",
        GaiaError::InvalidInput(_) => "invalid_input",
        GaiaError::Shape(_) => "shape",
        GaiaError::Degenerate(_) => "degenerate",
        GaiaError::NonFinite(_) => "non_finite",
    }
}

fn report_error(kind: &str, message: &str, code: i32) {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message, "exit_code": code}}));
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return EXIT_OK;
            }
            let _ = e.print();
            report_error("usage", e.kind().as_str().unwrap_or("usage"), EXIT_USAGE);
            return EXIT_USAGE;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            report_error(error_kind(&e), &e.to_string(), code);
            code
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GAIA_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| GaiaError::Config(format!("GAIA_THREADS must be a positive integer, got {v:?}")))?;
    // Fails only when a pool already exists in this process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Tracks files written under the output directory.
struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.add(p.clone());
        Ok(p)
    }

    fn add(&mut self, p: PathBuf) {
        let rel = p.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or(p);
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, serde_json::to_vec_pretty(value)?)?;
        Ok(p)
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = RunConfig::resolve(preset, cli.config.as_deref(), cli.seed, cli.out.clone())?;
    apply_overrides(&mut cfg, &cli.command)?;
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root)?;
    let mut out = Outputs { root, files: Vec::new() };
    out.json("run_config.json", &cfg)?;
    let summary = match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg, &mut out)?,
        Command::Preprocess(a) => cmd_preprocess(&cfg, a, &mut out)?,
        Command::Pretrain(a) => cmd_pretrain(&cfg, a, &mut out)?,
        Command::Gapfill(a) => cmd_gapfill(&cfg, a, &mut out)?,
        Command::Pca(a) => cmd_pca(&cfg, a, &mut out)?,
        Command::Coherence(a) => cmd_coherence(&cfg, a, &mut out)?,
        Command::Finetune(a) => cmd_finetune(&cfg, a, &mut out)?,
        Command::Eval(a) => cmd_eval(&cfg, a, &mut out)?,
        Command::AdapterShapes(a) => cmd_adapter(&cfg, a, &mut out)?,
        Command::Report(a) => cmd_report(a, &mut out)?,
    };
    let manifest = json!({ "command": command_name(&cli.command), "files": out.files.clone() });
    let root = out.root.clone();
    fs::write(root.join("outputs_manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Preprocess(_) => "preprocess",
        Command::Pretrain(_) => "pretrain",
        Command::Gapfill(_) => "gapfill",
        Command::Pca(_) => "pca",
        Command::Coherence(_) => "coherence",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::AdapterShapes(_) => "adapter-shapes",
        Command::Report(_) => "report",
    }
}

fn parse_hw(s: &str) -> Result<[usize; 2]> {
    let err = || GaiaError::Config(format!("expected HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(err)?;
    Ok([h.trim().parse().map_err(|_| err())?, w.trim().parse().map_err(|_| err())?])
}

/// Folds subcommand flags into the configuration so the persisted copy is
/// the one that actually ran.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            if let Some(v) = a.frames {
                cfg.data.n_timesteps = v;
            }
            if let Some(v) = a.height {
                cfg.data.height = v;
            }
            if let Some(v) = a.width {
                cfg.data.width = v;
            }
            if let Some(v) = a.missing_fraction {
                cfg.data.missing_fraction = v;
            }
        }
        Command::Preprocess(a) => {
            if let Some(r) = a.radius {
                cfg.preprocess.gap_fill_radius = r;
            }
            if let Some(d) = &a.downscale {
                cfg.preprocess.downscale = Some(parse_hw(d)?);
            }
        }
        Command::Pretrain(a) => {
            if let Some(v) = a.epochs {
                cfg.schedule.total_epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.schedule.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.schedule.base_lr = v;
            }
        }
        Command::Gapfill(a) => {
            if a.max_frames.is_some() {
                cfg.eval.max_frames = a.max_frames;
            }
        }
        Command::Pca(a) => {
            if let Some(k) = a.components {
                cfg.eval.pca_components = k;
            }
            if a.per_frame {
                cfg.eval.pca_pooled = false;
            }
            if a.max_frames.is_some() {
                cfg.eval.max_frames = a.max_frames;
            }
        }
        Command::Coherence(a) => {
            if let Some(l) = a.max_lag {
                cfg.eval.max_lag = l;
            }
            if a.max_frames.is_some() {
                cfg.eval.max_frames = a.max_frames;
            }
        }
        Command::Finetune(a) => {
            if let Some(v) = a.epochs {
                cfg.finetune.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.finetune.base_lr = v;
            }
        }
        Command::AdapterShapes(a) => {
            if let Some(c) = a.channels {
                cfg.eval.adapter_channels = c;
            }
        }
        Command::Eval(_) | Command::Report(_) => {}
    }
    Ok(())
}

fn load_frames(manifest: &Path, max: Option<usize>) -> Result<Vec<Field>> {
    let m = Manifest::read(manifest)?;
    if m.is_empty() {
        return Err(GaiaError::InvalidInput(format!("{} lists no frames", manifest.display())));
    }
    let mut frames = m.load_fields()?;
    if let Some(n) = max {
        frames.truncate(n.max(1));
    }
    Ok(frames)
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.fld")
}

fn write_frames(out: &mut Outputs, dir: &str, frames: &[Field], labels: Option<&[PathBuf]>) -> Result<Manifest> {
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let rel = PathBuf::from(dir).join(frame_name(i));
        write_fld(&out.path(&rel)?, f)?;
        records.push(ManifestRecord { path: rel, timestamp: f.timestamp, label: labels.map(|l| l[i].clone()) });
    }
    Ok(Manifest { records, root: out.root.clone() })
}

fn cmd_synth(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let frames = synth_sequence(&cfg.data)?;
    let m = write_frames(out, "frames", &frames, None)?;
    m.write(&out.path("manifest.jsonl")?)?;
    let frame_paths: Vec<PathBuf> = m.records.iter().map(|r| r.path.clone()).collect();
    for (task, name) in [(LabelTask::Precip, "precip"), (LabelTask::Ar, "ar")] {
        let labels = match synth_labels(&frames, task, cfg.data.seed) {
            SynthLabels::Precip(l) | SynthLabels::Ar(l) => l,
            SynthLabels::Tc(_) => unreachable!("tc handled below"),
        };
        let dir = format!("labels_{name}");
        let mut label_paths = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let rel = PathBuf::from(&dir).join(frame_name(i));
            write_fld(&out.path(&rel)?, l)?;
            label_paths.push(rel);
        }
        let records = frame_paths
            .iter()
            .zip(&label_paths)
            .zip(&frames)
            .map(|((p, l), f)| ManifestRecord { path: p.clone(), timestamp: f.timestamp, label: Some(l.clone()) })
            .collect();
        Manifest { records, root: out.root.clone() }.write(&out.path(format!("manifest_{name}.jsonl"))?)?;
    }
    let SynthLabels::Tc(scene) = synth_labels(&frames, LabelTask::Tc, cfg.data.seed) else {
        unreachable!("tc labels requested")
    };
    for (i, m) in scene.masks.iter().enumerate() {
        write_fld(&out.path(PathBuf::from("tc_masks").join(frame_name(i)))?, m)?;
    }
    out.json("tc_tracks.json", &scene.tracks)?;
    if let Some(f) = frames.first() {
        panels_png(&out.path("preview.png")?, &[(&f.values, Some(&f.missing))], 0.0, 1.0)?;
    }
    Ok(json!({"frames": frames.len(), "height": cfg.data.height, "width": cfg.data.width, "tc_tracks": scene.tracks.len()}))
}

fn cmd_preprocess(cfg: &RunConfig, a: &PreprocessArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let frames = load_frames(&a.data, None)?;
    let p = &cfg.preprocess;
    let processed = frames
        .iter()
        .map(|f| {
            let mut g = local_gap_fill(f, p.gap_fill_radius)?;
            if let Some([h, w]) = p.downscale {
                g = downscale(&g, h, w)?;
            }
            if g.normalization.is_none() {
                g = normalize(&g, &p.normalization)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = write_frames(out, "frames", &processed, None)?;
    m.write(&out.path("manifest.jsonl")?)?;
    let before: f64 = frames.iter().map(Field::missing_fraction).sum::<f64>() / frames.len() as f64;
    let after: f64 = processed.iter().map(Field::missing_fraction).sum::<f64>() / processed.len() as f64;
    Ok(json!({"frames": processed.len(), "missing_fraction_before": before, "missing_fraction_after": after}))
}

fn cmd_pretrain(cfg: &RunConfig, a: &PretrainArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let frames = load_frames(&a.data, None)?;
    let samples = frames
        .iter()
        .map(|f| Sample::from_field(f, cfg.model.patch_h))
        .collect::<Result<Vec<_>>>()?;
    let outcome = fit(&samples, &cfg.model, &cfg.schedule, &out.root, a.resume.as_deref(), None)?;
    for c in &outcome.checkpoints {
        out.add(c.clone());
    }
    out.add(outcome.metrics_log.clone());
    let model_path = out.path("model.ckpt")?;
    fs::copy(&outcome.final_checkpoint, &model_path)?;
    let last = outcome.records.last();
    Ok(json!({
        "epochs": outcome.state.epoch,
        "steps": outcome.state.step,
        "final_total": last.map(|r| r.total),
        "final_dino": last.map(|r| r.dino),
        "final_mae": last.map(|r| r.mae),
        "checkpoint": model_path,
    }))
}

fn cmd_gapfill(cfg: &RunConfig, a: &GapfillArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let model = Model::load(&a.model)?;
    let frames = load_frames(&a.data, cfg.eval.max_frames)?;
    if a.sweep {
        let rep = mask_ratio_sweep(&model, &frames, &cfg.eval.ratios, &cfg.eval.families)?;
        rep.write_csv(&out.path("sweep.csv")?)?;
        rep.write_json(&out.path("sweep.json")?)?;
        return Ok(json!({"rows": rep.rows}));
    }
    let field = frames
        .get(a.frame)
        .ok_or_else(|| GaiaError::InvalidInput(format!("frame {} out of range ({} frames)", a.frame, frames.len())))?;
    let family = MaskFamily::parse(&a.family).map_err(|e| GaiaError::Config(e.to_string()))?;
    let p = model.cfg.patch_h;
    let (grid, _) = patchify(field, p)?;
    let mask = sweep_mask(family, a.ratio, grid.grid_h, grid.grid_w, field.timestamp)?;
    let res = gapfill(field, &mask, &model)?;
    let region = hidden_pixels(&mask, &grid)?;
    let rmse = match rmse_masked(field, &res.composite, &region) {
        Ok(v) => Some(v),
        Err(GaiaError::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let score = json!({
        "frame": a.frame,
        "timestamp": field.timestamp,
        "family": family,
        "ratio": a.ratio,
        "achieved_ratio": mask.ratio,
        "effective_hidden": res.mask.n_hidden(),
        "ssim": ssim(&res.composite, field)?,
        "rmse": rmse,
    });
    write_fld(&out.path("composite.fld")?, &res.composite)?;
    write_fld(&out.path("prediction.fld")?, &res.predicted_full)?;
    res.mask.save(&out.path("mask.json")?, grid.grid_h, grid.grid_w)?;
    let hidden = hidden_pixels(&res.mask, &grid)?;
    let masked_input = Array2::from_shape_fn(field.dim(), |(r, c)| field.missing[[r, c]] || hidden[[r, c]]);
    panels_png(
        &out.path("gapfill.png")?,
        &[(&field.values, Some(&field.missing)), (&field.values, Some(&masked_input)), (&res.composite.values, None)],
        0.0,
        1.0,
    )?;
    out.json("gapfill.json", &score)?;
    Ok(score)
}

fn cmd_pca(cfg: &RunConfig, a: &PcaArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let model = Model::load(&a.model)?;
    let frames = load_frames(&a.data, cfg.eval.max_frames)?;
    let embs = embed_dataset(&model, &frames, a.mask_ratio)?;
    let res = pca_profile(&embs, cfg.eval.pca_components, cfg.eval.pca_pooled)?;
    out.json("variance_profile.json", &res.profile)?;
    for (i, (e, proj)) in embs.iter().zip(&res.projections).enumerate() {
        let channels: Vec<Array2<f64>> = (0..proj.ncols())
            .map(|k| Array2::from_shape_fn((e.grid_h, e.grid_w), |(r, c)| proj[[r * e.grid_w + c, k]]))
            .collect();
        let grid = ChannelGrid {
            missing: Array2::from_elem((e.grid_h, e.grid_w), false),
            channels,
            timestamp: e.timestamp,
            grid_id: frames[i].grid_id.clone(),
        };
        write_channels(&out.path(PathBuf::from("projections").join(frame_name(i)))?, &grid)?;
        if i == 0 && grid.channels.len() >= 3 {
            rgb_png(&out.path("pca_rgb.png")?, &grid.channels[..3], model.cfg.patch_h)?;
        }
    }
    Ok(json!({"explained": res.profile.explained.iter().take(10).collect::<Vec<_>>(), "cumulative_top3": res.profile.cumulative_top3}))
}

fn cmd_coherence(cfg: &RunConfig, a: &CoherenceArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let model = Model::load(&a.model)?;
    let frames = load_frames(&a.data, cfg.eval.max_frames)?;
    let embs = embed_dataset(&model, &frames, 0.0)?;
    let curve = temporal_coherence(&embs, cfg.eval.max_lag)?;
    curve.write_csv(&out.path("coherence.csv")?)?;
    out.json("coherence.json", &curve)?;
    Ok(serde_json::to_value(&curve)?)
}

fn load_pairs(labels: &Path) -> Result<(Vec<Field>, Vec<Field>)> {
    let m = Manifest::read(labels)?;
    if m.is_empty() {
        return Err(GaiaError::InvalidInput(format!("{} lists no frames", labels.display())));
    }
    Ok((m.load_fields()?, m.load_labels()?))
}

fn cmd_finetune(cfg: &RunConfig, a: &FinetuneArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let base = Model::load(&a.model)?;
    let (frames, labels) = load_pairs(&a.labels)?;
    let task: Task = a.task.into();
    let res = finetune(task, &base, &frames, &labels, &cfg.finetune, Some(&out.root))?;
    if let Some(c) = &res.checkpoint {
        out.add(c.clone());
    }
    out.add(out.root.join("finetune_metrics.jsonl"));
    Ok(json!({
        "task": task.as_str(),
        "steps": res.records.len(),
        "first_loss": res.records.first().map(|r| r.loss),
        "final_loss": res.records.last().map(|r| r.loss),
        "checkpoint": res.checkpoint,
    }))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, task: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| GaiaError::Config(format!("eval --task {task} requires --{flag}")))
}

fn patch_values(fields: &[Field], patch: usize) -> Result<Vec<Option<f64>>> {
    let mut v = Vec::new();
    for f in fields {
        v.extend(patch_aggregate(f, patch)?.values);
    }
    Ok(v)
}

fn pixel_values(fields: &[Field]) -> (Vec<Option<f64>>, usize) {
    let n = fields.iter().map(|f| f.values.len()).sum();
    let mut v = Vec::with_capacity(n);
    for f in fields {
        v.extend(f.values.iter().zip(&f.missing).map(|(&x, &m)| (!m).then_some(x)));
    }
    (v, n)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let e = &cfg.eval;
    let report = match a.task {
        EvalTask::Tc => {
            let tracks: Vec<TrackRecord> = serde_json::from_slice(&fs::read(required(&a.tracks, "tracks", "tc")?)?)?;
            let dets: Vec<Detection> =
                serde_json::from_slice(&fs::read(required(&a.detections, "detections", "tc")?)?)?;
            let r = track_metrics(&dets, &tracks, e.iou_threshold, e.score_threshold)?;
            json!({"task": "tc", "tracks": r})
        }
        EvalTask::Precip | EvalTask::Ar => {
            let tm = TaskModel::load(required(&a.model, "model", "precip/ar")?)?;
            let (frames, labels) = load_pairs(required(&a.labels, "labels", "precip/ar")?)?;
            let want = match a.task {
                EvalTask::Precip => Task::Precip,
                _ => Task::Ar,
            };
            if tm.task != want {
                return Err(GaiaError::Config(format!(
                    "checkpoint holds a {} head, not {}",
                    tm.task.as_str(),
                    want.as_str()
                )));
            }
            let mask_ratio = if want == Task::Precip { e.precip_inference_mask } else { 0.0 };
            let preds = frames.iter().map(|f| tm.predict(f, mask_ratio)).collect::<Result<Vec<_>>>()?;
            let patch = tm.model.cfg.patch_h;
            let (pv, _) = pixel_values(&preds);
            let (lv, _) = pixel_values(&labels);
            let pp = patch_values(&preds, patch)?;
            let lp = patch_values(&labels, patch)?;
            match want {
                Task::Precip => {
                    let thr = e.rain_threshold;
                    let truth = |v: &[Option<f64>]| v.iter().map(|x| x.map(|x| x >= thr)).collect::<Vec<_>>();
                    let mse: f64 = preds.iter().zip(&labels).map(|(p, l)| pixel_mse(p, l)).sum::<Result<f64>>()?
                        / preds.len() as f64;
                    json!({
                        "task": "precip",
                        "rmse": mse.sqrt(),
                        "mse": mse,
                        "rain_threshold": thr,
                        "pixel": binary_metrics_values(&pv, &truth(&lv), thr)?,
                        "patch": binary_metrics_values(&pp, &truth(&lp), thr)?,
                        "min_prediction": preds.iter().flat_map(|p| p.values.iter()).fold(f64::INFINITY, |m, &v| m.min(v)),
                    })
                }
                Task::Ar => {
                    let truth_px: Vec<Option<bool>> = lv.iter().map(|x| x.map(|x| x > 0.5)).collect();
                    let truth_patch: Vec<Option<bool>> = lp.iter().map(|x| x.map(|x| x >= e.patch_threshold)).collect();
                    let thresholds: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
                    json!({
                        "task": "ar",
                        "threshold": e.threshold,
                        "pixel": binary_metrics_values(&pv, &truth_px, e.threshold)?,
                        "patch_threshold": e.patch_threshold,
                        "patch": binary_metrics_values(&pp, &truth_patch, e.patch_threshold)?,
                        "sweep": threshold_sweep(&preds, &labels, &thresholds)?,
                    })
                }
            }
        }
    };
    out.json("eval.json", &report)?;
    Ok(report)
}

fn cmd_adapter(cfg: &RunConfig, a: &AdapterArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let model = match &a.model {
        Some(p) => Model::load(p)?,
        None => Model::init(&cfg.model, cfg.seed)?,
    };
    let adapter = FpnAdapter::init(model.cfg.enc_width, cfg.eval.adapter_channels, cfg.seed)?;
    let pyr = match &a.data {
        Some(d) => {
            let frames = load_frames(d, Some(1))?;
            let (grid, _) = patchify(&frames[0], model.cfg.patch_h)?;
            let tokens = model::encode(&grid, &MaskSpec::none(grid.n_patches()), &model.params, &model.cfg)?;
            adapter.forward(&tokens)?
        }
        None => {
            if a.grid_h == 0 || a.grid_w == 0 {
                return Err(GaiaError::Config("grid dimensions must be positive".into()));
            }
            let mut r = rng::stream(cfg.seed, &[]);
            let x = Array2::from_shape_fn((a.grid_h * a.grid_w, model.cfg.enc_width), |_| rng::normal(&mut r));
            adapter.forward_grid(&x, a.grid_h, a.grid_w)?
        }
    };
    let shapes: Vec<[usize; 3]> = pyr.levels.iter().map(|l| l.dim().into()).collect();
    let rep = json!({"levels": shapes.len(), "channels": cfg.eval.adapter_channels, "shapes": shapes});
    out.json("adapter_shapes.json", &rep)?;
    Ok(rep)
}

fn cmd_report(a: &ReportArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let root = out.root.clone();
    let (summary, files) = build_report(&a.inputs, &root)?;
    for f in files {
        out.add(f);
    }
    Ok(json!({"runs": summary.runs.len(), "plots": summary.plots.len()}))
}
