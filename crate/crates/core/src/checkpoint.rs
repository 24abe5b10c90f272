//! JSON checkpoints of the full training state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilevel::BilevelState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pseudo::PseudoMaskSnapshot;
use crate::reweight::ClusterModel;
use crate::trainer::EpochRecord;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub backbone: String,
    pub channels: [usize; 3],
    /// Flattening order of θ then φ, as used for gradient alignment.
    pub param_order: Vec<String>,
    pub provider_id: Option<String>,
    pub state: BilevelState,
    pub clusters: ClusterModel,
    pub masks: PseudoMaskSnapshot,
    pub records: Vec<EpochRecord>,
    pub triggers: Vec<usize>,
    pub gn_iterations: usize,
    pub step: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Parse a checkpoint; malformed content is a checkpoint error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                ck.format
            )));
        }
        if ck
            .state
            .theta
            .values()
            .iter()
            .chain(ck.state.phi.values())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Checkpoint(format!(
                "{}: non-finite parameters",
                path.display()
            )));
        }
        Ok(ck)
    }

    /// Fail unless the checkpoint was written under an equivalent config.
    pub fn verify(&self, cfg: &RunConfig) -> Result<()> {
        let expected = cfg.hash();
        if self.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}
