//! Run configuration, loadable from TOML. Every field has a default so a
//! partial file overrides only what it names.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphnet::{PosEncodeConfig, StackConfig};
use crate::losses::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: std::path::PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Points sampled per frame each epoch.
    pub points_per_frame: usize,
    pub k: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub edgeconv_dims: [usize; 3],
    pub head_hidden: usize,
    pub d_shape: usize,
    pub d_pose: usize,
    pub pe_bands: usize,
    pub head_init_scale: f64,
    pub lambda_icp_init: f64,
    pub lambda_icp_min: f64,
    pub lambda_temp: f64,
    pub sigma_shape: f64,
    pub sigma_pose: f64,
    /// Checkpoint write interval in epochs; 0 disables periodic writes.
    pub checkpoint_every: usize,
    /// Latent fit settings (test-time optimization).
    pub fit_iters: usize,
    pub fit_lr: f64,
    pub fit_lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            points_per_frame: 1024,
            k: 10,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 30,
            seed: 0,
            precision: Precision::F32,
            edgeconv_dims: [128, 128, 256],
            head_hidden: 256,
            d_shape: 128,
            d_pose: 128,
            pe_bands: 8,
            head_init_scale: 0.01,
            lambda_icp_init: 1e-1,
            lambda_icp_min: 1e-2,
            lambda_temp: 5e-2,
            sigma_shape: 1e-4,
            sigma_pose: 1e-4,
            checkpoint_every: 0,
            fit_iters: 200,
            fit_lr: 1e-3,
            fit_lr_decay_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.edgeconv_dims.iter().any(|&d| d == 0) {
            return Err(ConfigError::Invalid(
                "edgeconv_dims must be positive".into(),
            ));
        }
        if self.k == 0 || self.points_per_frame <= self.k {
            return Err(ConfigError::Invalid(format!(
                "need points_per_frame > k > 0, got {} and {}",
                self.points_per_frame, self.k
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.fit_lr > 0.0) {
            return Err(ConfigError::Invalid(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            dims: self.edgeconv_dims,
            head_hidden: self.head_hidden,
            d_shape: self.d_shape,
            d_pose: self.d_pose,
            k: self.k,
            pe: PosEncodeConfig {
                bands: self.pe_bands,
                include_input: true,
            },
            head_init_scale: self.head_init_scale,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_icp_init: self.lambda_icp_init,
            lambda_icp_min: self.lambda_icp_min,
            lambda_temp: self.lambda_temp,
            sigma_shape: self.sigma_shape,
            sigma_pose: self.sigma_pose,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.lr_decay_every, 30);
        assert_eq!(c.edgeconv_dims, [128, 128, 256]);
        assert_eq!(c.d_shape, 128);
        assert_eq!(c.fit_iters, 200);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 5\nprecision = \"f64\"\n").unwrap();
        let c = TrainConfig::load(&p).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.k, 10);
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epocs = 5\n").unwrap();
        assert!(matches!(
            TrainConfig::load(&p),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.points_per_frame = 5;
        assert!(c.validate().is_err());
    }
}
