//! The run configuration file.
//!
//! Every section falls back to its module defaults and unknown keys are
//! rejected. The master `seed` replaces every per-module seed.

use std::path::Path;

use ctes_core::hashindex::HashScheme;
use ctes_core::mtpp::MtppConfig;
use ctes_core::relevance::{FisherConfig, ScoreMode};
use ctes_core::retrieval::IndexConfig;
use ctes_core::synth::{GeneratorConfig, DEFAULT_SPLIT};
use ctes_core::train::TrainConfig;
use ctes_core::unwarp::UnwarpConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub generator: GeneratorConfig,
    /// Train, validation and test proportions of the queries.
    pub split: [f64; 3],
    pub model: ModelSection,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub eval: EvalSection,
    pub query: QuerySection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            workers: 1,
            generator: GeneratorConfig::default(),
            split: DEFAULT_SPLIT,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            index: IndexConfig::default(),
            eval: EvalSection::default(),
            query: QuerySection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnwarpInit {
    /// `U(t) = t` up to the quadrature error.
    #[default]
    Identity,
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `vocab` is replaced by the dataset's mark vocabulary.
    pub mtpp: MtppConfig,
    pub unwarp: UnwarpConfig,
    pub unwarp_init: UnwarpInit,
    pub fisher: FisherConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub negatives: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: ctes_core::eval::DEFAULT_KS.to_vec(),
            negatives: ctes_core::eval::PROTOCOL_NEGATIVES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySection {
    pub k: usize,
    /// Model whose self-attention embeddings are indexed.
    pub index_model: ScoreMode,
    /// Model that ranks candidates in exhaustive and telescopic retrieval.
    pub rerank_model: ScoreMode,
}

impl Default for QuerySection {
    fn default() -> Self {
        Self {
            k: 10,
            index_model: ScoreMode::SelfAttn,
            rerank_model: ScoreMode::CrossAttn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub tables: Vec<usize>,
    pub bits: Vec<usize>,
    /// Cut-off of the reported NDCG.
    pub ndcg_k: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            tables: vec![1, 2, 4],
            bits: vec![4, 6, 8],
            ndcg_k: 10,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub scheme: Option<HashScheme>,
    pub k: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|source| CliError::Json {
            context: "run configuration".into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Json { source, .. } => CliError::Json {
                context: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// Applies flag overrides, then propagates the master seed and worker
    /// count into every section.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(w) = overrides.workers {
            self.workers = w;
        }
        if let Some(s) = overrides.scheme {
            self.index.scheme = s;
        }
        if let Some(k) = overrides.k {
            self.query.k = k;
        }
        if self.workers == 0 {
            return Err(CliError::Input("workers must be at least 1".into()));
        }
        let seed = self.seed;
        self.generator.seed = seed;
        self.model.mtpp.seed = seed;
        self.train.seed = seed;
        self.train.workers = self.workers;
        self.index.seed = seed;
        self.index.hash_train.seed = seed;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"sed": 3}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"model": {"mtpp": {"width": 3}}}"#,
            r#"{"index": {"hash_train": {"step": 1}}}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_win_and_seed_propagates() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "query": {"k": 4}}"#).unwrap();
        let cfg = cfg
            .resolve(&Overrides {
                seed: Some(11),
                k: Some(2),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.query.k, 2);
        assert_eq!(
            [
                cfg.generator.seed,
                cfg.model.mtpp.seed,
                cfg.train.seed,
                cfg.index.seed
            ],
            [11; 4]
        );
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
