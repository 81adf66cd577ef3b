use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcdn::DenoisingConfig;
use crate::matching::LossWeights;
use crate::pyramid::BackboneConfig;
use crate::transformer::ModelConfig;

/// Everything that determines a training run. Defaults reproduce the reference recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dn: DenoisingConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch from which both learning rates are multiplied by 0.1.
    pub lr_drop_epoch: usize,
    /// Stop after this many optimizer steps instead of `epochs`.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub lcdn_enabled: bool,
    pub aux_loss: bool,
    /// Side length images are resized to.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dn: DenoisingConfig::default(),
            weights: LossWeights::default(),
            lr: 1e-4,
            backbone_lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 24,
            lr_drop_epoch: 21,
            max_steps: None,
            grad_clip_norm: Some(0.1),
            seed: 0,
            lcdn_enabled: true,
            aux_loss: true,
            image_size: 512,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: the toy model on 64 × 64 synthetic scenes, trained from scratch.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            dn: DenoisingConfig {
                dn_number: 100,
                ..DenoisingConfig::default()
            },
            lr: 1e-3,
            backbone_lr: 1e-3,
            max_steps: Some(2000),
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dn.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.backbone_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning rates must be positive and weight decay non-negative"));
        }
        if self.batch_size == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(Error::config("batch size and training length must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("gradient clip norm must be positive"));
            }
        }
        self.model.backbone.level_shapes(self.image_size, self.image_size)?;
        if self.model.num_queries > self.token_count()? {
            return Err(Error::config(format!(
                "{} queries exceed the {} encoder tokens of a {}px image",
                self.model.num_queries,
                self.token_count()?,
                self.image_size
            )));
        }
        Ok(())
    }

    fn token_count(&self) -> Result<usize> {
        Ok(self
            .model
            .backbone
            .level_shapes(self.image_size, self.image_size)?
            .iter()
            .map(|(h, w)| h * w)
            .sum())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Selects the pyramid: `"S1-S5"` keeps five levels, `"S2-S5"` the usual four.
    pub fn set_levels(&mut self, spec: &str) -> Result<()> {
        let levels = match spec {
            "S1-S5" => vec![1, 2, 3, 4, 5],
            "S2-S5" => vec![2, 3, 4, 5],
            other => return Err(Error::config(format!("unknown level range {other:?}, expected S1-S5 or S2-S5"))),
        };
        self.model.backbone = BackboneConfig {
            levels,
            ..self.model.backbone.clone()
        };
        Ok(())
    }
}
