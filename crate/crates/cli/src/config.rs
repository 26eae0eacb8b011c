//! Experiment configuration: a TOML document validated against a strict
//! schema (unknown keys are rejected) and converted into the core types.
//! Command-line flags override individual keys; the config file is the
//! source of truth for everything else.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use agedapt::data::SyntheticConfig;
use agedapt::loss::{CompositeLossConfig, RegressionNorm};
use agedapt::model::AdaptLayerSet;
use agedapt::trainer::{GridSpec, TrainConfig, Variant};

use crate::commands::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    pub mds: Option<MdsSection>,
    pub grid: Option<GridSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_count")]
        n_source: usize,
        #[serde(default = "default_count")]
        n_target: usize,
        #[serde(default = "default_shift")]
        shift_strength: f64,
        #[serde(default = "default_noise")]
        noise_std: f64,
    },
    Files {
        source_path: PathBuf,
        target_path: PathBuf,
    },
}

fn default_dim() -> usize {
    16
}

fn default_count() -> usize {
    256
}

fn default_shift() -> f64 {
    1.5
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_normalize_labels")]
    pub normalize_labels: bool,
    #[serde(default = "default_adapt_layers")]
    pub adapt_layers: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            pretrain_epochs: default_pretrain_epochs(),
            normalize_labels: default_normalize_labels(),
            adapt_layers: default_adapt_layers(),
        }
    }
}

fn default_variant() -> String {
    "source_only".into()
}

fn default_epochs() -> usize {
    50
}

fn default_batch_size() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_pretrain_epochs() -> usize {
    10
}

fn default_normalize_labels() -> bool {
    true
}

fn default_adapt_layers() -> Vec<String> {
    vec!["conv_proxy".into(), "fc1".into()]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub sigma_smooth: f64,
    #[serde(default = "default_regression_norm")]
    pub regression_norm: String,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            sigma_smooth: 0.0,
            regression_norm: default_regression_norm(),
        }
    }
}

fn default_alpha() -> f64 {
    0.3
}

fn default_beta() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    0.1
}

fn default_regression_norm() -> String {
    "l1".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdsSection {
    pub checkpoint: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub anchors: Vec<AnchorSpec>,
    #[serde(default = "default_mds_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_mds_tol")]
    pub tol: f64,
    #[serde(default)]
    pub dump_matrix: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub id: String,
    pub age: f64,
}

fn default_mds_max_iter() -> usize {
    500
}

fn default_mds_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub variants: Vec<String>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// Layer sets as `+`-joined names; `none` requests a no-adaptation row.
    #[serde(default)]
    pub layer_sets: Vec<String>,
    #[serde(default)]
    pub rank: Vec<bool>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic_config()?;
        self.train_config()?;
        if let Some(grid) = &self.grid {
            if grid.variants.is_empty() {
                return Err(CliError::Config("grid.variants must not be empty".into()));
            }
            self.grid_spec()?;
        }
        if let Some(mds) = &self.mds {
            if !mds.tol.is_finite() || mds.tol <= 0.0 {
                return Err(CliError::Config("mds.tol must be positive".into()));
            }
        }
        Ok(())
    }

    /// Synthetic generator settings, when the data section is synthetic.
    pub fn synthetic_config(&self) -> Result<Option<SyntheticConfig>, CliError> {
        match &self.data {
            DataSection::Synthetic {
                dim,
                n_source,
                n_target,
                shift_strength,
                noise_std,
            } => {
                let cfg = SyntheticConfig {
                    dim: *dim,
                    n_source: *n_source,
                    n_target: *n_target,
                    shift_strength: *shift_strength,
                    noise_std: *noise_std,
                    seed: self.seed,
                };
                cfg.validate()
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(Some(cfg))
            }
            DataSection::Files { .. } => Ok(None),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let variant = Variant::from_str(&self.train.variant)
            .ok_or_else(|| CliError::Config(format!("unknown variant {:?}", self.train.variant)))?;
        let regression_norm = match self.loss.regression_norm.as_str() {
            "l1" => RegressionNorm::L1,
            "l2" => RegressionNorm::L2,
            other => {
                return Err(CliError::Config(format!(
                    "regression_norm must be l1 or l2, got {other:?}"
                )))
            }
        };
        let adapt_layers = AdaptLayerSet::new(&self.train.adapt_layers)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let config = TrainConfig {
            variant,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            loss: CompositeLossConfig {
                alpha: self.loss.alpha,
                beta: self.loss.beta,
                gamma: self.loss.gamma,
                sigma_smooth: self.loss.sigma_smooth,
                regression_norm,
                adaptation: variant.adaptation(),
            },
            adapt_layers,
            normalize_labels: self.train.normalize_labels,
            pretrain_epochs: self.train.pretrain_epochs,
            seed: self.seed,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn grid_spec(&self) -> Result<GridSpec, CliError> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [grid] section".into()))?;
        let mut variants = Vec::new();
        for name in &grid.variants {
            variants.push(
                Variant::from_str(name)
                    .ok_or_else(|| CliError::Config(format!("unknown grid variant {name:?}")))?,
            );
        }
        let mut layer_sets = Vec::new();
        for entry in &grid.layer_sets {
            if entry == "none" {
                layer_sets.push(None);
            } else {
                let names: Vec<&str> = entry.split('+').collect();
                layer_sets.push(Some(
                    AdaptLayerSet::new(names)
                        .map_err(|e| CliError::Config(format!("layer set {entry:?}: {e}")))?,
                ));
            }
        }
        for g in &grid.gammas {
            if !g.is_finite() || *g < 0.0 {
                return Err(CliError::Config(format!("grid gamma must be >= 0, got {g}")));
            }
        }
        Ok(GridSpec {
            variants,
            gammas: grid.gammas.clone(),
            layer_sets,
            rank: grid.rank.clone(),
        })
    }
}
