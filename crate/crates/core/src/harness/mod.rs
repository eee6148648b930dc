//! Run orchestration: configuration, dataset collection, behavior-cloning
//! training, closed-loop evaluation, interpretability reporting, and the
//! diversity-weight sweep.

pub mod dataset;
pub mod evaluate;
pub mod interpret_run;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{FusionWeights, PidGains};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::sim::scoring::PenaltyCoefficients;
use crate::sim::{routes, World};

/// Optimizer settings: plain momentum SGD, deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of samples held out for validation ranking.
    pub val_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            lr_decay: 1.0,
            batch_size: 32,
            epochs: 10,
            val_fraction: 0.1,
        }
    }
}

/// Full experiment configuration. The canonical serialization (JSON with
/// `out_dir` cleared) is hashed and embedded in every artifact produced
/// under it; `out_dir` is environment, not experiment identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Route references: "builtin:<name>", or a path to a world TOML.
    /// The single entry "desk" expands to the whole builtin benchmark.
    pub routes: Vec<String>,
    /// Collection episodes per route.
    pub collect_seeds: u64,
    /// Evaluation episodes per route.
    pub eval_seeds: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lateral_pid: PidGains,
    pub longitudinal_pid: PidGains,
    pub fusion: FusionWeights,
    pub penalties: PenaltyCoefficients,
    pub optimizer: OptimizerConfig,
    /// Sim steps between trajectory waypoints.
    pub waypoint_interval: usize,
    /// Record every k-th sim step into the dataset.
    pub collect_stride: usize,
    /// Concentration of the Beta targets built from expert actions.
    pub expert_beta_concentration: f64,
    /// Saliency binarization quantile.
    pub binarize_quantile: f64,
    /// Warn when the collection expert scores below this driving score.
    pub expert_ds_floor: f64,
    /// Output directory (excluded from the config hash).
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            routes: vec!["desk".into()],
            collect_seeds: 3,
            eval_seeds: 3,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lateral_pid: PidGains { kp: 1.1, ki: 0.0, kd: 0.3, ..Default::default() },
            longitudinal_pid: PidGains { kp: 0.6, ki: 0.08, kd: 0.0, ..Default::default() },
            fusion: FusionWeights::default(),
            penalties: PenaltyCoefficients::default(),
            optimizer: OptimizerConfig::default(),
            waypoint_interval: 10,
            collect_stride: 5,
            expert_beta_concentration: 20.0,
            binarize_quantile: crate::interpret::DEFAULT_QUANTILE,
            expert_ds_floor: 95.0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.penalties.validate()?;
        if self.routes.is_empty() {
            return Err(Error::Config("at least one route is required".into()));
        }
        if self.collect_stride == 0 || self.waypoint_interval == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.waypoint_interval % self.collect_stride != 0 {
            return Err(Error::Config(format!(
                "waypoint_interval ({}) must be a multiple of collect_stride ({}) so future \
                 action labels fall on stored frames",
                self.waypoint_interval, self.collect_stride
            )));
        }
        if !(self.binarize_quantile > 0.0 && self.binarize_quantile < 1.0) {
            return Err(Error::Config("binarize_quantile must be in (0,1)".into()));
        }
        if self.expert_beta_concentration <= 0.0 {
            return Err(Error::Config("expert_beta_concentration must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.optimizer.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 0.9)".into()));
        }
        if self.optimizer.batch_size == 0 || self.optimizer.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization: the JSON encoding of this
    /// config with `out_dir` cleared, fields in declaration order.
    pub fn hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Resolve the configured route references into worlds.
    pub fn load_routes(&self) -> Result<Vec<World>> {
        let mut worlds = Vec::new();
        for entry in &self.routes {
            if entry == "desk" {
                worlds.extend(routes::desk_benchmark());
            } else if let Some(name) = entry.strip_prefix("builtin:") {
                worlds.push(routes::builtin(name)?);
            } else {
                worlds.push(World::load(Path::new(entry))?);
            }
        }
        if worlds.is_empty() {
            return Err(Error::Config("route list resolved to nothing".into()));
        }
        Ok(worlds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_loads_desk_routes() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.load_routes().unwrap().len(), 6);
    }

    #[test]
    fn hash_ignores_out_dir_but_not_parameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/somewhere/else");
        assert_eq!(a.hash(), b.hash(), "out_dir is not experiment identity");
        let mut c = a.clone();
        c.weights.lambda_div = 0.0;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.seed = 2;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let text = r#"
seed = 7
routes = ["builtin:straight_clear"]

[optimizer]
epochs = 2

[weights]
lambda_div = 0.0
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.optimizer.epochs, 2);
        assert_eq!(cfg.weights.lambda_div, 0.0);
        // unspecified fields take defaults
        assert_eq!(cfg.optimizer.batch_size, 32);
        assert_eq!(cfg.load_routes().unwrap().len(), 1);
    }

    #[test]
    fn misaligned_strides_rejected() {
        let mut cfg = RunConfig::default();
        cfg.collect_stride = 3;
        cfg.waypoint_interval = 10;
        assert!(cfg.validate().is_err());
    }
}
