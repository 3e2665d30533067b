//! Versioned parameter checkpoints.
//!
//! A checkpoint is a JSON object with fields `format` (`"wsrm-checkpoint"`),
//! `version`, `config` (the [`NetConfig`]), `num_params` and `params`. The
//! flat parameter order is, for each main layer and each of its edge-GNN
//! sub-layers in turn: `a`, `b`, `c` row-major (`in x out`), then `bias`.
//! Antenna and UE counts are not part of the format, so one checkpoint serves
//! every system size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, NetParams};

pub const FORMAT: &str = "wsrm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: NetConfig,
    pub num_params: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(config: &NetConfig, params: &NetParams) -> Self {
        let flat = params.to_flat();
        Self { format: FORMAT.into(), version: VERSION, config: *config, num_params: flat.len(), params: flat }
    }

    pub fn net_params(&self) -> Result<NetParams> {
        if self.params.len() != self.num_params {
            return Err(Error::Format(format!("{} parameters stored, header says {}", self.params.len(), self.num_params)));
        }
        NetParams::from_flat(&self.config, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.config.validate()?;
        ck.net_params()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let cfg = NetConfig::default();
        let params = NetParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let ck = Checkpoint::new(&cfg, &params);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.net_params().unwrap(), params);
    }

    #[test]
    fn rejects_foreign_or_truncated_files() {
        let cfg = NetConfig::default();
        let mut ck = Checkpoint::new(&cfg, &NetParams::zeros(&cfg));
        ck.params.pop();
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
        ck.params.push(0.0);
        ck.format = "other".into();
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Format(_))));
    }
}
