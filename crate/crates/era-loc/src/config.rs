//! Experiment configuration: a single JSON document with `system`, `model`,
//! `train` and `eval` sections. Unknown keys are rejected and dimensional
//! cross-constraints are validated at load time.

use crate::array::{upa_geometry, ArrayGeometry};
use crate::channel::OfdmGrid;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing_wavelengths: f64,
    /// Spherical-harmonic truncation degree U; K = (U+1)^2.
    pub max_degree: usize,
    pub subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_hz: f64,
    pub paths: usize,
    pub stages: usize,
    pub substages: usize,
    pub p_max: f64,
    pub snr_db: f64,
    pub region_half_width_m: f64,
    pub ap_height_m: f64,
}

impl SystemConfig {
    pub fn n_antennas(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn basis_size(&self) -> usize {
        (self.max_degree + 1) * (self.max_degree + 1)
    }

    pub fn ofdm(&self) -> Result<OfdmGrid> {
        OfdmGrid::new(self.subcarriers, self.subcarrier_spacing_hz, self.carrier_hz)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let grid = self.ofdm()?;
        upa_geometry(self.n_x, self.n_y, self.spacing_wavelengths, grid.wavelength())
    }

    pub fn ap_position(&self) -> [f64; 3] {
        [0.0, 0.0, self.ap_height_m]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 1 || self.n_y < 1 {
            return Err(Error::Config("system.n_x/n_y must be >= 1".into()));
        }
        if self.subcarriers < 1 {
            return Err(Error::Config("system.subcarriers must be >= 1".into()));
        }
        if self.stages < 1 || self.substages < 1 {
            return Err(Error::Config("system.stages/substages must be >= 1".into()));
        }
        if self.paths < 1 {
            return Err(Error::Config("system.paths must be >= 1".into()));
        }
        if self.p_max <= 0.0 {
            return Err(Error::Config("system.p_max must be positive".into()));
        }
        if self.region_half_width_m <= 0.0 || self.ap_height_m <= 0.0 {
            return Err(Error::Config(
                "system.region_half_width_m/ap_height_m must be positive".into(),
            ));
        }
        self.ofdm()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    /// "proposed" (pattern + combiner) or "digital_only" (combiner only).
    pub variant: String,
}

impl ModelConfig {
    pub fn validate(&self, system: &SystemConfig) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        let limit = 2 * system.subcarriers * system.substages;
        if self.embed_dim >= limit {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must be < 2*M*L ({limit})",
                self.embed_dim
            )));
        }
        if self.variant != "proposed" && self.variant != "digital_only" {
            return Err(Error::Config(format!(
                "model.variant must be \"proposed\" or \"digital_only\", got {:?}",
                self.variant
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub samples: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Per-stage loss weights; default is linear-in-t, normalized.
    pub stage_weights: Option<Vec<f64>>,
    pub grad_clip: f64,
}

impl TrainSection {
    pub fn validate(&self, system: &SystemConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction <= 0.0 {
            return Err(Error::Config("train.train_fraction must be in (0, 1)".into()));
        }
        if self.samples < 2 || self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config(
                "train.samples/batch_size/epochs out of range".into(),
            ));
        }
        if let Some(betas) = &self.stage_weights {
            if betas.len() != system.stages {
                return Err(Error::Config(format!(
                    "train.stage_weights length {} != stages {}",
                    betas.len(),
                    system.stages
                )));
            }
            if betas.iter().any(|b| *b < 0.0) {
                return Err(Error::Config("train.stage_weights must be >= 0".into()));
            }
            if betas.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config(
                    "train.stage_weights must be nondecreasing".into(),
                ));
            }
            if betas.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("train.stage_weights must not all be 0".into()));
            }
        }
        Ok(())
    }

    /// Normalized stage weights; defaults to beta_t proportional to t.
    pub fn betas(&self, stages: usize) -> Vec<f64> {
        let raw: Vec<f64> = match &self.stage_weights {
            Some(b) => b.clone(),
            None => (1..=stages).map(|t| t as f64).collect(),
        };
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|b| b / sum).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub snr_db_list: Vec<f64>,
    pub eval_seeds: Vec<u64>,
    pub beam_grid_theta: usize,
    pub beam_grid_phi: usize,
    pub budget_total: usize,
    /// (stages, pilots-per-stage) pairs; each product must equal budget_total.
    pub budget_allocations: Vec<(usize, usize)>,
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.eval_seeds must not be empty".into()));
        }
        for &(t, l) in &self.budget_allocations {
            if t * l != self.budget_total {
                return Err(Error::Config(format!(
                    "eval allocation ({t}, {l}) does not divide budget {}",
                    self.budget_total
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate(&self.system)?;
        self.train.validate(&self.system)?;
        self.eval.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hash of the canonical JSON form, for tagging exported tables.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> RunConfig {
        RunConfig {
            system: SystemConfig {
                n_x: 3,
                n_y: 3,
                spacing_wavelengths: 0.5,
                max_degree: 2,
                subcarriers: 16,
                subcarrier_spacing_hz: 960e3,
                carrier_hz: 30e9,
                paths: 2,
                stages: 3,
                substages: 4,
                p_max: 1.0,
                snr_db: 10.0,
                region_half_width_m: 30.0,
                ap_height_m: 10.0,
            },
            model: ModelConfig {
                d_model: 32,
                heads: 2,
                embed_dim: 64,
                lstm_hidden: 64,
                head_hidden: 64,
                variant: "proposed".into(),
            },
            train: TrainSection {
                samples: 2200,
                train_fraction: 2000.0 / 2200.0,
                batch_size: 32,
                learning_rate: 1e-3,
                epochs: 40,
                stage_weights: None,
                grad_clip: 1.0,
            },
            eval: EvalSection {
                snr_db_list: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
                eval_seeds: vec![0, 1, 2],
                beam_grid_theta: 40,
                beam_grid_phi: 80,
                budget_total: 12,
                budget_allocations: vec![(1, 12), (2, 6), (3, 4), (4, 3)],
            },
        }
    }

    #[test]
    fn desk_profile_validates() {
        desk().validate().unwrap();
    }

    #[test]
    fn embed_dim_compression_enforced() {
        let mut cfg = desk();
        cfg.model.embed_dim = 2 * 16 * 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut cfg = desk();
        cfg.model.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_allocation_rejected() {
        let mut cfg = desk();
        cfg.eval.budget_allocations.push((5, 3));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut value = serde_json::to_value(desk()).unwrap();
        value["system"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(value).is_err());
    }

    #[test]
    fn default_betas_are_linear_and_normalized() {
        let betas = desk().train.betas(3);
        assert_eq!(betas.len(), 3);
        assert!((betas.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((betas[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((betas[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_preserves_hash() {
        let cfg = desk();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
}
