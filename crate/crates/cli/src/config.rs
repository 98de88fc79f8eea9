//! Run configuration: a TOML file whose every table is optional, then
//! command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use ldrnn_core::baselines::{ForestConfig, TreeConfig};
use ldrnn_core::corpus::DEFAULT_MIN_PROJECT_SIZE;
use ldrnn_core::evaluation::Alternative;
use ldrnn_core::model::ModelConfig;
use ldrnn_core::pretrain::PretrainConfig;
use ldrnn_core::trainer::TrainConfig;

use crate::UsageError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusOptions,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub baseline: BaselineOptions,
    pub evaluation: EvaluationOptions,
    pub ingest: IngestOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub min_project_size: usize,
    pub project: Option<String>,
    pub vocab_min_count: usize,
    pub vocab_max_size: Option<usize>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            min_project_size: DEFAULT_MIN_PROJECT_SIZE,
            project: None,
            vocab_min_count: 1,
            vocab_max_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    pub forest: ForestConfig,
    pub tree: TreeConfig,
    pub cbr_k: usize,
    pub lasso_grid: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            forest: ForestConfig::default(),
            tree: TreeConfig::default(),
            cbr_k: 3,
            lasso_grid: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    pub rguess_runs: usize,
    pub alternative: Alternative,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions {
            rguess_runs: 1000,
            alternative: Alternative::ALess,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub story_point_field: String,
    pub page_size: usize,
    pub rate_limit: f64,
    pub timeout_secs: f64,
    pub backoff_secs: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        let d = ldrnn_core::ingest::IngestConfig::default();
        IngestOptions {
            story_point_field: d.story_point_field,
            page_size: d.page_size,
            rate_limit: d.rate_limit,
            timeout_secs: d.timeout_secs,
            backoff_secs: d.backoff_base_secs,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies `--seed` (falling back to the file, then 42) to every seeded
    /// stage so one flag controls the whole run.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = flag.or(self.seed).unwrap_or(DEFAULT_SEED);
        self.seed = Some(seed);
        self.pretrain.seed = seed;
        self.train.seed = seed;
        seed
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        let dir = flag
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| UsageError("no output directory: pass --out-dir or set out_dir".into()))?;
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model
            .validate()
            .and_then(|_| self.train.validate())
            .map_err(|e| UsageError(e.to_string()))?;
        if self.baseline.cbr_k == 0 {
            return Err(UsageError("baseline.cbr_k must be >= 1".into()).into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 7\n[model]\nembedding_dim = 10\n[train]\nepochs = 5\n[evaluation]\nalternative = \"two_sided\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.model.embedding_dim, 10);
        assert_eq!(cfg.model.rhn_depth, ModelConfig::default().rhn_depth);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.evaluation.alternative, Alternative::TwoSided);
        assert_eq!(cfg.corpus.min_project_size, 300);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nembeding_dim = 10\n").is_err());
    }

    #[test]
    fn flag_seed_wins() {
        let mut cfg = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolve_seed(Some(9)), 9);
        assert_eq!((cfg.train.seed, cfg.pretrain.seed), (9, 9));
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(None), 42);
    }
}
