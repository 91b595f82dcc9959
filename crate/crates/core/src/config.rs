//! Run configuration: one flat table of keys, read from TOML-style
//! `key = value` text. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{CellSpec, Reduction};
use crate::error::{NasError, Result};
use crate::network::TrainBudget;
use crate::tasks::data::SyntheticConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    SecondOrder,
    FirstOrder,
    Joint,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointMode {
    /// Alternating α and w steps, both on train∪val batches.
    Coordinate,
    /// One combined step on both parameter groups per iteration.
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// The scalar analytic bilevel problem.
    Toy,
    /// Seeded Gaussian-cluster classification.
    Synthetic,
    /// Classification data read from `data_path`.
    Delimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaOptimizer {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Every knob of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub joint_mode: JointMode,
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,

    /// Unroll step; the current weight learning rate when absent.
    pub xi: Option<f64>,
    /// Numerator of `ε = epsilon_scale / ‖∇_{w′}L_val‖₂`.
    pub epsilon_scale: f64,
    /// Unroll with the momentum optimizer's step instead of the plain one.
    pub momentum_unroll: bool,

    pub lr_w: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay_w: f64,
    /// Global-norm clip on the weight gradient; `0` disables.
    pub grad_clip: f64,

    pub alpha_optimizer: AlphaOptimizer,
    pub lr_alpha: f64,
    pub beta1_alpha: f64,
    pub beta2_alpha: f64,
    pub weight_decay_alpha: f64,

    pub intermediates: usize,
    pub hidden: usize,
    pub k: usize,
    pub reduction: Reduction,

    pub toy_start_alpha: f64,
    pub toy_start_w: f64,

    pub samples: usize,
    pub dims: usize,
    pub classes: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub test_fraction: f64,
    pub data_seed: u64,
    pub data_path: Option<String>,
    pub holdout_fraction: f64,

    pub retrain_steps: usize,
    pub retrain_batch_size: usize,
    pub retrain_lr: f64,
    pub retrain_momentum: f64,
    pub retrain_weight_decay: f64,

    /// Genotypes drawn by random search.
    pub random_samples: usize,
    /// Write an α snapshot every this many iterations (and at the end);
    /// `0` keeps only the final one.
    pub snapshot_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let budget = TrainBudget::default();
        Self {
            mode: SearchMode::SecondOrder,
            joint_mode: JointMode::Coordinate,
            task: TaskKind::Synthetic,
            seed: 0,
            steps: 300,
            batch_size: 64,
            xi: None,
            epsilon_scale: 0.01,
            momentum_unroll: false,
            lr_w: 0.1,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay_w: 3e-4,
            grad_clip: 5.0,
            alpha_optimizer: AlphaOptimizer::Adam,
            lr_alpha: 3e-3,
            beta1_alpha: 0.5,
            beta2_alpha: 0.999,
            weight_decay_alpha: 1e-3,
            intermediates: 3,
            hidden: 16,
            k: 2,
            reduction: Reduction::Mean,
            toy_start_alpha: 2.0,
            toy_start_w: -2.0,
            samples: data.samples,
            dims: data.dims,
            classes: data.classes,
            clusters_per_class: data.clusters_per_class,
            separation: data.separation,
            noise: data.noise,
            test_fraction: data.test_fraction,
            data_seed: data.seed,
            data_path: None,
            holdout_fraction: 0.5,
            retrain_steps: budget.steps,
            retrain_batch_size: budget.batch_size,
            retrain_lr: budget.lr,
            retrain_momentum: budget.momentum,
            retrain_weight_decay: budget.weight_decay,
            random_samples: 8,
            snapshot_every: 50,
        }
    }
}

impl SearchConfig {
    /// The scalar toy setup: constant `η_w = ξ = 0.5`, plain gradient
    /// descent on α with `η_α = 0.1`, no momentum, decay or clipping.
    pub fn toy() -> Self {
        Self {
            task: TaskKind::Toy,
            steps: 500,
            batch_size: 1,
            xi: Some(0.5),
            lr_w: 0.5,
            schedule: Schedule::Constant,
            momentum: 0.0,
            weight_decay_w: 0.0,
            grad_clip: 0.0,
            alpha_optimizer: AlphaOptimizer::Sgd,
            lr_alpha: 0.1,
            weight_decay_alpha: 0.0,
            snapshot_every: 0,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| NasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NasError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            NasError::Config(m) => NasError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NasError::Config(m));
        if let Some(xi) = self.xi {
            if !(xi >= 0.0 && xi.is_finite()) {
                return fail(format!("xi must be finite and >= 0, got {xi}"));
            }
        }
        let positive = [
            ("lr_w", self.lr_w),
            ("epsilon_scale", self.epsilon_scale),
            ("beta2_alpha", self.beta2_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        let non_negative = [
            ("lr_alpha", self.lr_alpha),
            ("momentum", self.momentum),
            ("weight_decay_w", self.weight_decay_w),
            ("weight_decay_alpha", self.weight_decay_alpha),
            ("grad_clip", self.grad_clip),
            ("beta1_alpha", self.beta1_alpha),
            ("retrain_lr", self.retrain_lr),
            ("retrain_momentum", self.retrain_momentum),
            ("retrain_weight_decay", self.retrain_weight_decay),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.beta1_alpha >= 1.0 || self.beta2_alpha >= 1.0 {
            return fail("Adam betas must be below 1".into());
        }
        if self.batch_size == 0 || self.retrain_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.mode == SearchMode::Random && self.random_samples == 0 {
            return fail("random_samples must be at least 1".into());
        }
        if self.task == TaskKind::Delimited && self.data_path.is_none() {
            return fail("task `delimited` needs data_path".into());
        }
        if self.task == TaskKind::Toy && self.mode == SearchMode::Random {
            return fail("random search needs a cell task, not the toy problem".into());
        }
        if self.task != TaskKind::Toy {
            self.cell_spec()?;
        }
        Ok(())
    }

    pub fn cell_spec(&self) -> Result<CellSpec> {
        CellSpec::new(self.intermediates, self.hidden, self.k)
            .map(|s| s.with_reduction(self.reduction))
            .map_err(|e| NasError::Config(e.to_string()))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            samples: self.samples,
            dims: self.dims,
            classes: self.classes,
            clusters_per_class: self.clusters_per_class,
            separation: self.separation,
            noise: self.noise,
            test_fraction: self.test_fraction,
            seed: self.data_seed,
        }
    }

    pub fn budget(&self) -> TrainBudget {
        TrainBudget {
            steps: self.retrain_steps,
            batch_size: self.retrain_batch_size,
            lr: self.retrain_lr,
            momentum: self.retrain_momentum,
            weight_decay: self.retrain_weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SearchConfig::default().validate().unwrap();
        SearchConfig::toy().validate().unwrap();
    }

    #[test]
    fn parses_flat_keys() {
        let cfg = SearchConfig::from_toml_str(
            "mode = \"first-order\"\ntask = \"toy\"\nsteps = 10\nxi = 0.25\nalpha_optimizer = \"sgd\"\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, SearchMode::FirstOrder);
        assert_eq!(cfg.task, TaskKind::Toy);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.xi, Some(0.25));
        assert_eq!(cfg.hidden, 16);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = SearchConfig::from_toml_str("stepz = 3\n").unwrap_err();
        assert!(matches!(err, NasError::Config(_)));
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(SearchConfig::from_toml_str("xi = -0.1\n").is_err());
        assert!(SearchConfig::from_toml_str("k = 3\n").is_err());
        assert!(SearchConfig::from_toml_str("batch_size = 0\n").is_err());
        assert!(SearchConfig::from_toml_str("task = \"delimited\"\n").is_err());
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut cfg = SearchConfig::toy();
        cfg.seed = 17;
        let back = SearchConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.seed = 18;
        assert_ne!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn missing_file_names_path() {
        let err = SearchConfig::from_path(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
