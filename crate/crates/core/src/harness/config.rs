use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{DiscriminatorConfig, GeneratorConfig, ModelConfig};
use crate::rsmi::RsmiParams;

/// Every knob of a run, as one flat JSON object. Missing keys take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub image_size: usize,
    /// Patches sampled per tap layer.
    pub patches: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,

    pub lambda_src: f64,
    pub lambda_scc: f64,
    pub lambda_hdce: f64,
    pub lambda_gan: f64,
    pub tau: f64,
    pub beta: f64,

    pub rsmi_alpha: f64,
    pub rsmi_ridge: f64,
    pub rsmi_centers: usize,
    pub rsmi_samples: usize,

    pub base_width: usize,
    pub max_width: usize,
    pub down_stages: usize,
    pub residual_blocks: usize,
    pub tap_layers: Vec<usize>,
    pub embed_dim: usize,
    pub disc_base_width: usize,
    pub disc_stages: usize,

    /// Generated toy scenes per domain (ignored when folders are given).
    pub train_scenes: usize,
    /// Offset of the scene seeds, independent of the run seed.
    pub data_seed: u64,
    /// Domain spec files; the built-in toy specs when absent.
    pub source_spec: Option<PathBuf>,
    pub target_spec: Option<PathBuf>,
    /// Image folders; when both are set they replace generated scenes.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,

    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Print a progress line every this many steps (0: never).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let r = RsmiParams::default();
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            seed: 0,
            steps: 5000,
            batch_size: 4,
            image_size: 64,
            patches: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_src: w.lambda_src,
            lambda_scc: w.lambda_scc,
            lambda_hdce: w.lambda_hdce,
            lambda_gan: w.lambda_gan,
            tau: w.tau,
            beta: w.beta,
            rsmi_alpha: r.alpha,
            rsmi_ridge: r.ridge,
            rsmi_centers: r.centers,
            rsmi_samples: r.samples,
            base_width: g.base_width,
            max_width: g.max_width,
            down_stages: g.down_stages,
            residual_blocks: g.residual_blocks,
            tap_layers: g.tap_layers,
            embed_dim: ModelConfig::default().embed_dim,
            disc_base_width: d.base_width,
            disc_stages: d.stages,
            train_scenes: 500,
            data_seed: 0,
            source_spec: None,
            target_spec: None,
            source_dir: None,
            target_dir: None,
            checkpoint_every: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_src: self.lambda_src,
            lambda_scc: self.lambda_scc,
            lambda_hdce: self.lambda_hdce,
            lambda_gan: self.lambda_gan,
            tau: self.tau,
            beta: self.beta,
        }
    }

    pub fn rsmi_params(&self) -> RsmiParams {
        RsmiParams {
            alpha: self.rsmi_alpha,
            ridge: self.rsmi_ridge,
            centers: self.rsmi_centers,
            samples: self.rsmi_samples,
            sigma: None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                in_channels: 3,
                base_width: self.base_width,
                max_width: self.max_width,
                residual_blocks: self.residual_blocks,
                down_stages: self.down_stages,
                tap_layers: self.tap_layers.clone(),
            },
            discriminator: DiscriminatorConfig {
                in_channels: 3,
                base_width: self.disc_base_width,
                stages: self.disc_stages,
            },
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::Validation { field: field.into(), detail });
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be > 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, format!("must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.patches < 2 {
            return bad("patches", format!("must be >= 2, got {}", self.patches));
        }
        if self.source_dir.is_some() != self.target_dir.is_some() {
            return bad("source_dir", "source_dir and target_dir must be given together".into());
        }
        if self.source_dir.is_none() && self.train_scenes == 0 {
            return bad("train_scenes", "must be >= 1".into());
        }
        self.loss_weights().validate()?;
        self.rsmi_params().validate()?;
        let mc = self.model_config();
        mc.generator.validate()?;
        mc.generator.check_input(&[1, 3, self.image_size, self.image_size])?;
        for &l in &mc.generator.tap_layers {
            let side = self.image_size / mc.generator.layer_stride(l);
            if self.patches > side * side {
                return bad(
                    "patches",
                    format!("{} patches exceed the {} locations of tap layer {l}", self.patches, side * side),
                );
            }
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}
