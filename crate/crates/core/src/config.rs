//! Flat JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anodetect::{default_t_ad, DEFAULT_QUANTILE};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};
use crate::metrics::Aggregation;
use crate::nets::{DenoiserConfig, DiscriminatorConfig};
use crate::optim::AdamConfig;
use crate::phantoms::{DatasetSizes, PhantomSpec};
use crate::schedule::SigmaMode;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "ADDM_SEED";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Every tunable in one flat object. Absent keys take the desk defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,

    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    pub disc_time_embed_dim: usize,

    pub skull_radius_range: (f64, f64),
    pub n_internal_blobs: (usize, usize),
    pub blob_intensity_range: (f64, f64),
    pub lesion_radius_range: (f64, f64),
    pub lesion_contrast: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,

    /// Noising depth for detection; `null` means T/4.
    pub t_ad: Option<usize>,
    pub quantile: f64,
    pub n_recon: usize,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PhantomSpec::default();
        let d = DatasetSizes::default();
        RunConfig {
            steps: t.steps,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            sigma_mode: t.sigma_mode,
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: Optimizer::Adam,
            base_lr: t.base_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            image_size: t.denoiser.image_size,
            base_width: t.denoiser.base_width,
            depth: t.denoiser.depth,
            time_embed_dim: t.denoiser.time_embed_dim,
            disc_base_width: t.discriminator.base_width,
            disc_layers: t.discriminator.n_layers,
            disc_time_embed_dim: t.discriminator.time_embed_dim,
            skull_radius_range: p.skull_radius_range,
            n_internal_blobs: p.n_internal_blobs,
            blob_intensity_range: p.blob_intensity_range,
            lesion_radius_range: p.lesion_radius_range,
            lesion_contrast: p.lesion_contrast,
            n_train: d.n_train,
            n_val: d.n_val,
            n_test_normal: d.n_test_normal,
            n_test_anomalous: d.n_test_anomalous,
            t_ad: None,
            quantile: DEFAULT_QUANTILE,
            n_recon: 1,
            aggregation: Aggregation::Micro,
        }
    }
}

impl RunConfig {
    /// Parses JSON text without validating. Type errors name the key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "config".to_string() } else { path };
            Error::invalid(key, e.into_inner().to_string())
        })
    }

    /// Reads, applies `ADDM_SEED`, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut config = Self::from_json(text)?;
        config.apply_env()?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            sigma_mode: self.sigma_mode,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            denoiser: DenoiserConfig {
                image_size: self.image_size,
                base_width: self.base_width,
                depth: self.depth,
                time_embed_dim: self.time_embed_dim,
            },
            discriminator: DiscriminatorConfig {
                image_size: self.image_size,
                base_width: self.disc_base_width,
                n_layers: self.disc_layers,
                time_embed_dim: self.disc_time_embed_dim,
            },
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.image_size,
            skull_radius_range: self.skull_radius_range,
            n_internal_blobs: self.n_internal_blobs,
            blob_intensity_range: self.blob_intensity_range,
            lesion_radius_range: self.lesion_radius_range,
            lesion_contrast: self.lesion_contrast,
            seed: self.seed,
        }
    }

    pub fn dataset_sizes(&self) -> DatasetSizes {
        DatasetSizes {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test_normal: self.n_test_normal,
            n_test_anomalous: self.n_test_anomalous,
        }
    }

    pub fn t_ad(&self) -> usize {
        self.t_ad.unwrap_or_else(|| default_t_ad(self.steps))
    }

    pub fn validate(&self) -> Result<()> {
        let train = self.train_config();
        train.validate()?;
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        self.phantom_spec().validate()?;
        if self.n_train == 0 {
            return Err(Error::invalid("n_train", "must be at least 1"));
        }
        if let Some(t) = self.t_ad {
            if t == 0 || t > self.steps {
                return Err(Error::invalid("t_ad", format!("must lie in 1..={}, got {t}", self.steps)));
            }
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::invalid("quantile", format!("must lie in (0, 1), got {}", self.quantile)));
        }
        if self.n_recon == 0 {
            return Err(Error::invalid("n_recon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the post-default configuration to `dir/effective_config.json`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join(EFFECTIVE_CONFIG), self.to_json().as_bytes())
    }
}

/// `ADDM_SEED`, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(SEED_ENV, format!("expected an unsigned integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::invalid(SEED_ENV, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        let c = RunConfig::from_json(text)?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn empty_object_is_default() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.phantom_spec(), PhantomSpec::default());
        assert_eq!(c.t_ad(), 75);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            (r#"{"lambda": -1}"#, "lambda"),
            (r#"{"lambda": "big"}"#, "lambda"),
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"T": 0}"#, "T"),
            (r#"{"quantile": 1.0}"#, "quantile"),
            (r#"{"t_ad": 500}"#, "t_ad"),
            (r#"{"image_size": 12, "depth": 3}"#, "image_size"),
            (r#"{"optimizer": "sgd"}"#, "optimizer"),
            (r#"{"sigma_mode": "learned"}"#, "sigma_mode"),
        ] {
            let e = parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}");
            assert!(e.to_string().contains(key), "{text}: {e}");
        }
    }

    #[test]
    fn headline_configuration_accepted() {
        let c = parse(r#"{"lambda": 0.05, "T": 1000}"#).unwrap();
        assert_eq!(c.steps, 1000);
        assert_eq!(c.lambda, 0.05);
        assert_eq!(c.t_ad(), 250);
    }
}
