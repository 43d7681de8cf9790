//! Training configuration, loaded from TOML with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crop::CropConfig;
use crate::error::{Error, Result};
use crate::inference::{Architecture, AttentionMode, InferenceConfig, SlideMode};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::pseudo::{ConfidenceMode, DEFAULT_TAU};

/// Which network is evaluated during and after training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Student,
    Teacher,
}

/// Color jitter and noise applied to the student's view of target images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Per-channel gain drawn from `1 +- gain`.
    pub gain: f64,
    /// Per-channel offset drawn from `+- offset`.
    pub offset: f64,
    /// Standard deviation of additive per-pixel gaussian noise.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain: 0.1,
            offset: 0.05,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub crop: CropConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    /// Weight of the detail-crop loss term.
    pub lambda_d: f64,
    /// Weight of the target loss.
    pub lambda_t: f64,
    /// Teacher EMA momentum.
    pub alpha: f64,
    /// Ramp the EMA rate as `min(1 - 1/(t+1), alpha)` so early teachers
    /// do not retain the random initialisation.
    pub ema_warmup: bool,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub confidence: ConfidenceMode,
    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_interval: usize,
    /// Cap on validation images per evaluation; 0 uses all.
    pub eval_images: usize,
    pub eval_model: EvalModel,
    pub seed: u64,
    pub use_context_crop: bool,
    pub use_detail_crop: bool,
    pub attention: AttentionMode,
    /// Half-stride teacher windows for pseudo-labels; disjoint otherwise.
    pub overlapping_pseudolabel: bool,
    pub detail_loss: bool,
    /// Window policy of validation inference.
    pub inference_mode: SlideMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            lambda_d: 0.1,
            lambda_t: 1.0,
            alpha: 0.999,
            ema_warmup: true,
            tau: DEFAULT_TAU,
            confidence: ConfidenceMode::PerImage,
            batch_size: 2,
            steps: 2000,
            eval_interval: 100,
            eval_images: 0,
            eval_model: EvalModel::Student,
            seed: 0,
            use_context_crop: true,
            use_detail_crop: true,
            attention: AttentionMode::Learned,
            overlapping_pseudolabel: true,
            detail_loss: true,
            inference_mode: SlideMode::Overlapping,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets one field by dotted path, e.g. `crop.scale=4` or
    /// `attention=average`. Values are parsed as TOML, falling back to a
    /// bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_overrides(&[format!("{key}={value}")])
    }

    /// Applies `key=value` strings in order, validating the final result
    /// so coupled fields may be changed together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_in_table(&mut root, k.trim(), v.trim())?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        match (self.use_context_crop, self.use_detail_crop) {
            (true, true) => Ok(Architecture::Hrda),
            (true, false) => Ok(Architecture::ContextOnly),
            (false, true) => Ok(Architecture::DetailOnly),
            (false, false) => Err(Error::Config(
                "at least one of use_context_crop, use_detail_crop must be set".into(),
            )),
        }
    }

    /// EMA rate applied after zero-based step `step`.
    pub fn ema_rate(&self, step: usize) -> f64 {
        if self.ema_warmup {
            self.alpha.min(1.0 - 1.0 / (step as f64 + 1.0))
        } else {
            self.alpha
        }
    }

    /// Detail-loss weight after the `detail_loss` switch.
    pub fn effective_lambda_d(&self) -> f64 {
        if self.detail_loss {
            self.lambda_d
        } else {
            0.0
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            crop: self.crop,
            arch: self.architecture().unwrap_or_default(),
            attention: self.attention,
            mode: self.inference_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.crop.validate()?;
        self.model.validate()?;
        self.architecture()?;
        if self.model.output_stride() != self.crop.stride {
            return bad(format!(
                "model output stride {} differs from crop.stride {}",
                self.model.output_stride(),
                self.crop.stride
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return bad(format!("lambda_d {} not in [0, 1]", self.lambda_d));
        }
        if self.lambda_t < 0.0 {
            return bad("lambda_t must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} not in [0, 1)", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} not in (0, 1)", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

fn set_in_table(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts
        .split_last()
        .ok_or_else(|| Error::Config("empty key".into()))?;
    let mut table = root;
    for p in path {
        table = table
            .get_mut(*p)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
    }
    let slot = table
        .get_mut(*last)
        .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
    let kind = slot.type_str();
    // integers given for float fields
    *slot = match (&*slot, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    if slot.type_str() != kind {
        return Err(Error::Config(format!("{key}={value}: expected a {kind}")));
    }
    Ok(())
}
