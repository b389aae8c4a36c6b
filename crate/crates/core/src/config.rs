//! Run configuration: presets, JSON overrides, command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GaiaError, Result};
use crate::field::NormalizationSpec;
use crate::gapfill::{DEFAULT_FAMILIES, DEFAULT_RATIOS};
use crate::heads::{FinetuneConfig, DEFAULT_CHANNELS};
use crate::model::ModelConfig;
use crate::patch::MaskFamily;
use crate::synth::SyntheticConfig;
use crate::train::TrainSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ratios: Vec<f64>,
    pub families: Vec<MaskFamily>,
    /// Caps the frames used by sweeps, PCA and coherence.
    pub max_frames: Option<usize>,
    pub pca_components: usize,
    pub pca_pooled: bool,
    pub max_lag: usize,
    /// Mask ratio used when running the precipitation head at inference.
    pub precip_inference_mask: f64,
    /// Rain rate (mm/hr) separating rain from no rain in categorical scores.
    pub rain_threshold: f64,
    /// Probability threshold for pixel-level segmentation scores.
    pub threshold: f64,
    /// Threshold applied to per-patch mean probability.
    pub patch_threshold: f64,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub adapter_channels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            families: DEFAULT_FAMILIES.to_vec(),
            max_frames: None,
            pca_components: 3,
            pca_pooled: true,
            max_lag: 10,
            precip_inference_mask: 0.0,
            rain_threshold: 0.5,
            threshold: 0.5,
            patch_threshold: 0.08,
            iou_threshold: 0.30,
            score_threshold: 0.5,
            adapter_channels: DEFAULT_CHANNELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub gap_fill_radius: usize,
    /// Target `[height, width]`; integer block factors only.
    pub downscale: Option<[usize; 2]>,
    pub normalization: NormalizationSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { gap_fill_radius: 3, downscale: None, normalization: NormalizationSpec::default() }
    }
}

/// Fully resolved configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub data: SyntheticConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub preprocess: PreprocessConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                output_dir: PathBuf::from("out"),
                model: ModelConfig::desk(),
                schedule: TrainSchedule {
                    base_lr: 1e-3,
                    lr_warmup_steps: 8,
                    batch_size: 4,
                    ..Default::default()
                },
                data: SyntheticConfig::default(),
                finetune: FinetuneConfig { epochs: 60, base_lr: 2e-3, ..Default::default() },
                eval: EvalConfig::default(),
                preprocess: PreprocessConfig::default(),
            },
            Preset::Paper => Self {
                preset,
                seed: 0,
                output_dir: PathBuf::from("out"),
                model: ModelConfig::paper(),
                schedule: TrainSchedule::default(),
                data: SyntheticConfig { height: 240, width: 720, n_timesteps: 48, ..Default::default() },
                finetune: FinetuneConfig::default(),
                eval: EvalConfig::default(),
                preprocess: PreprocessConfig::default(),
            },
        }
    }

    /// Preset, then the JSON file (deep-merged), then explicit overrides.
    /// A top-level seed propagates to every stage seed a section does not
    /// set itself; the `seed` argument overrides all of them.
    pub fn resolve(preset: Preset, file: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| GaiaError::Config(format!("{}: {e}", p.display())))?;
            if let Some(name) = overlay.get("preset").and_then(Value::as_str) {
                let named: Preset = serde_json::from_value(Value::String(name.into()))
                    .map_err(|e| GaiaError::Config(format!("preset: {e}")))?;
                if named != preset {
                    base = serde_json::to_value(Self::preset(named))?;
                }
            }
            if let Some(s) = overlay.get("seed").cloned() {
                for section in ["schedule", "data", "finetune"] {
                    if overlay.get(section).and_then(|v| v.get("seed")).is_none() {
                        base[section]["seed"] = s.clone();
                    }
                }
            }
            merge(&mut base, overlay);
        }
        let mut cfg: Self =
            serde_json::from_value(base).map_err(|e| GaiaError::Config(format!("configuration: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.schedule.seed = s;
            cfg.data.seed = s;
            cfg.finetune.seed = s;
        }
        if let Some(o) = out {
            cfg.output_dir = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: GaiaError| match e {
            GaiaError::Config(_) => e,
            other => GaiaError::Config(other.to_string()),
        };
        self.model.validate().map_err(cfg_err)?;
        self.schedule.validate().map_err(cfg_err)?;
        self.data.validate().map_err(cfg_err)?;
        self.preprocess.normalization.validate().map_err(cfg_err)?;
        let e = &self.eval;
        if e.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(GaiaError::Config("eval.ratios must lie in [0, 1)".into()));
        }
        if e.pca_components == 0 || e.adapter_channels == 0 {
            return Err(GaiaError::Config("eval.pca_components and eval.adapter_channels must be positive".into()));
        }
        if self.finetune.batch_size == 0 {
            return Err(GaiaError::Config("finetune.batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::Desk).validate().unwrap();
        RunConfig::preset(Preset::Paper).validate().unwrap();
        assert_eq!(RunConfig::preset(Preset::Paper).model.enc_width, 912);
    }

    #[test]
    fn file_and_flag_overrides() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        std::fs::write(&p, r#"{"schedule": {"total_epochs": 2, "seed": 5}, "eval": {"max_lag": 3}}"#).unwrap();
        let c = RunConfig::resolve(Preset::Desk, Some(&p), None, None).unwrap();
        assert_eq!(c.schedule.total_epochs, 2);
        assert_eq!(c.schedule.seed, 5);
        assert_eq!(c.schedule.e_w, 5);
        assert_eq!(c.eval.max_lag, 3);
        let c = RunConfig::resolve(Preset::Desk, Some(&p), Some(9), Some("x".into())).unwrap();
        assert_eq!((c.schedule.seed, c.data.seed, c.finetune.seed), (9, 9, 9));
        assert_eq!(c.output_dir, PathBuf::from("x"));

        std::fs::write(&p, r#"{"seed": 4, "data": {"seed": 1}}"#).unwrap();
        let c = RunConfig::resolve(Preset::Desk, Some(&p), None, None).unwrap();
        assert_eq!((c.seed, c.schedule.seed, c.data.seed, c.finetune.seed), (4, 4, 1, 4));

        std::fs::write(&p, r#"{"schedule": {"e_p": 0}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Preset::Desk, Some(&p), None, None), Err(GaiaError::Config(_))));
        std::fs::write(&p, "{not json").unwrap();
        assert!(matches!(RunConfig::resolve(Preset::Desk, Some(&p), None, None), Err(GaiaError::Config(_))));
    }
}
