//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wsrm_core::channel::Geometry;
use wsrm_core::net::NetConfig;
use wsrm_core::oracle::{ConstraintFamily, FamilyKind};
use wsrm_core::pf::SweepAxis;
use wsrm_core::train::TrainConfig;
use wsrm_core::wmmse::WmmseOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub geometry: Geometry,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub wmmse: WmmseOptions,
    pub pf: PfConfig,
    pub oracle: OracleConfig,
    pub sweeps: Vec<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            geometry: Geometry::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            wmmse: WmmseOptions::default(),
            pf: PfConfig::default(),
            oracle: OracleConfig::default(),
            sweeps: Vec::new(),
        }
    }
}

/// System size and channel statistics of the training and held-out data.
/// The training set size is `train.num_samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub k: usize,
    pub snr_edge_db: f64,
    pub power_budget: f64,
    pub heldout_samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 8, k: 4, snr_edge_db: 5.0, power_budget: 1.0, heldout_samples: 512, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfConfig {
    pub episodes: usize,
    pub slots: usize,
    pub correlation: f64,
    pub weight_cap: f64,
    pub seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self { episodes: 200, slots: 20, correlation: 0.9, weight_cap: 1e6, seed: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Antenna count for the unitary families.
    pub unitary_n: usize,
    /// UE count for the unitary families.
    pub unitary_k: usize,
    /// UE count for the permutation families.
    pub perm_k: usize,
    pub num_group_samples: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { unitary_n: 3, unitary_k: 2, perm_k: 4, num_group_samples: 64, seed: 0 }
    }
}

impl OracleConfig {
    pub fn families(&self) -> Vec<ConstraintFamily> {
        FamilyKind::ALL
            .iter()
            .map(|&kind| {
                let (n, k) = match kind {
                    FamilyKind::UnitaryLeft | FamilyKind::UnitaryAbsorb => (self.unitary_n, self.unitary_k),
                    FamilyKind::PermDiag | FamilyKind::PermPair => (1, self.perm_k),
                };
                ConstraintFamily { num_group_samples: self.num_group_samples, ..ConstraintFamily::new(kind, n, k) }
            })
            .collect()
    }
}

/// One generalization sweep: fixed checkpoint evaluated at each axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_sweep_seed")]
    pub seed: u64,
}

fn default_test_samples() -> usize {
    256
}

fn default_sweep_seed() -> u64 {
    5
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n == 0 || self.data.k == 0 {
            bail!("data.n and data.k must be positive");
        }
        if self.data.heldout_samples == 0 {
            bail!("data.heldout_samples must be positive");
        }
        self.geometry.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.pf.slots == 0 || !(0.0..=1.0).contains(&self.pf.correlation) {
            bail!("pf.slots must be positive and pf.correlation in [0, 1]");
        }
        for s in &self.sweeps {
            if s.values.is_empty() || s.test_samples == 0 {
                bail!("sweep over {:?} needs values and test samples", s.axis);
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized config. The output directory is
    /// not part of an experiment's identity and is left out.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self { output_dir: PathBuf::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}
