use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use latent_router::evaluation::{lambda_grid, AuxTrainConfig, ColdStartSize};
use latent_router::network::{ArchVariant, RouterConfig};
use latent_router::synthetic::GeneratorConfig;
use latent_router::training::{LossWeights, TrainConfig};

use crate::error::CliError;

/// Router architecture; token and descriptor widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub capsule_count: usize,
    pub comm_layers: usize,
    pub hidden_dim: usize,
    /// Defaults to `max(hidden_dim / 4, 8)`.
    pub pair_hidden: Option<usize>,
    pub feedback_temp: f64,
    pub correction_bound: f64,
    pub sigma_floor: f64,
    pub variant: ArchVariant,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::from_router(&RouterConfig::for_data(1, 1, 1, 1))
    }
}

impl ArchConfig {
    fn from_router(r: &RouterConfig) -> Self {
        Self {
            capsule_count: r.capsule_count,
            comm_layers: r.comm_layers,
            hidden_dim: r.hidden_dim,
            pair_hidden: None,
            feedback_temp: r.feedback_temp,
            correction_bound: r.correction_bound,
            sigma_floor: r.sigma_floor,
            variant: r.variant,
        }
    }

    pub fn router_config(&self, image_dim: usize, question_dim: usize, descriptor_dim: usize, pool: usize) -> RouterConfig {
        let mut r = RouterConfig::for_data(image_dim, question_dim, descriptor_dim, pool);
        r.capsule_count = self.capsule_count;
        r.comm_layers = self.comm_layers;
        r.hidden_dim = self.hidden_dim;
        r.pair_hidden = self.pair_hidden.unwrap_or((self.hidden_dim / 4).max(8));
        r.feedback_temp = self.feedback_temp;
        r.correction_bound = self.correction_bound;
        r.sigma_floor = self.sigma_floor;
        r.variant = self.variant;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub knn_k: usize,
    /// Optimizer settings of the additive scorer and the direct classifier.
    pub aux: AuxTrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            knn_k: 16,
            aux: AuxTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColdStartConfig {
    /// Canonical index of the model inserted after training.
    pub held_out: usize,
    pub sizes: Vec<ColdStartSize>,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        Self {
            held_out: 0,
            sizes: ColdStartSize::default_sizes(),
        }
    }
}

/// Everything a run reads. Seed `s` of `seeds` generates data with
/// `generator.seed + s` and trains with `train.seed + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub router: ArchConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub baselines: BaselineConfig,
    pub cold_start: ColdStartConfig,
    /// Cost weight used by eval, pool-robustness and ablate.
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            router: ArchConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            baselines: BaselineConfig::default(),
            cold_start: ColdStartConfig::default(),
            lambda: 0.0,
            lambda_grid: lambda_grid(),
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, reporting the field path of any schema error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Validation(format!("config field `{path}`: {}", e.into_inner()))
        })?;
        de.end()
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(format!("config {}", path.display())),
            _ => CliError::Failed(format!("cannot read config {}: {e}", path.display())),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(m));
        self.generator.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.loss.validate().map_err(CliError::Validation)?;
        self.baselines.aux.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        let pool = self.generator.pool_size;
        self.router
            .router_config(1, 1, 1, pool)
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if self.baselines.knn_k == 0 {
            return invalid("baselines.knn_k must be at least 1".into());
        }
        if self.cold_start.held_out >= pool {
            return invalid(format!("cold_start.held_out {} is outside a pool of {pool}", self.cold_start.held_out));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return invalid("lambda_grid must be a non-empty list of non-negative values".into());
        }
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return invalid("seeds must be distinct".into());
        }
        Ok(())
    }

    /// The configuration of a single seed's sub-run.
    pub fn for_seed(&self, seed: u64) -> SeedRun {
        let mut config = self.clone();
        config.seeds = vec![seed];
        SeedRun {
            seed,
            dir: self.out.join(format!("seed_{seed}")),
            config,
        }
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    /// Written next to the sub-run's outputs; rerunning it reproduces them.
    pub config: RunConfig,
}

impl SeedRun {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.config.generator.seed.wrapping_add(self.seed),
            ..self.config.generator.clone()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.config.train.seed.wrapping_add(self.seed),
            ..self.config.train.clone()
        }
    }

    pub fn aux(&self) -> AuxTrainConfig {
        AuxTrainConfig {
            seed: self.config.baselines.aux.seed.wrapping_add(self.seed),
            ..self.config.baselines.aux.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}
