//! Run configuration: flat TOML with defaults, validation and a stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::BilevelHyper;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::vfm::ProviderKind;

/// Which framework variant to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher with token features, modulation, reweighting and bilevel steps.
    Full,
    /// Student alone; pseudo-masks evolve from its own predictions.
    StudentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Inner plain-gradient step; defaults to `lr`.
    pub eta: Option<f64>,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda_in: f64,
    pub lambda_out: f64,
    pub lambda_gate: f64,
    pub tau: f64,
    /// Token blocks taken from the provider.
    pub blocks: usize,
    pub scam_hidden: usize,
    pub bilevel_period: usize,
    pub gn_steps: usize,
    pub val_ratio: f64,
    pub clusters: usize,
    pub provider: ProviderKind,
    pub fallback_to_stub: bool,
    /// Epochs before the first pseudo-mask evolution.
    pub evolve_warmup: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            epochs: 300,
            batch: 16,
            lr: 1e-3,
            eta: None,
            eps: 1e-8,
            weight_decay: 1e-4,
            lambda_in: 0.1,
            lambda_out: 1.0,
            lambda_gate: 5e-3,
            tau: 4.0,
            blocks: 12,
            scam_hidden: 64,
            bilevel_period: 5,
            gn_steps: 4,
            val_ratio: 0.1,
            clusters: 8,
            provider: ProviderKind::Stub,
            fallback_to_stub: false,
            evolve_warmup: 0,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            cache_dir: PathBuf::from("cache"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_in: self.lambda_in,
            lambda_out: self.lambda_out,
            lambda_gate: self.lambda_gate,
            tau: self.tau,
        }
    }

    pub fn hyper(&self) -> BilevelHyper {
        BilevelHyper {
            eta: self.eta.unwrap_or(self.lr),
            eps: self.eps,
            lr_theta: self.lr,
            lr_phi: self.lr,
            lr_alpha: self.lr,
            weight_decay: self.weight_decay,
            bilevel_period: self.bilevel_period,
            gn_steps: self.gn_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.blocks == 0 || self.scam_hidden == 0 {
            return Err(Error::Config(
                "blocks and scam_hidden must be at least 1".into(),
            ));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(Error::Config(format!(
                "val_ratio must lie in (0, 1), got {}",
                self.val_ratio
            )));
        }
        self.loss_weights().validate()?;
        self.hyper().validate()
    }

    /// SHA-256 of the canonical JSON form, ignoring the epoch budget and
    /// paths so a run can be extended or relocated and still resume.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.epochs = 0;
        canon.data_dir = PathBuf::new();
        canon.out_dir = PathBuf::new();
        canon.cache_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
