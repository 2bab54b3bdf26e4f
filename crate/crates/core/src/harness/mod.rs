//! End-to-end orchestration: configuration, the embedding pipeline, query
//! verification, the expert confirm loop and evaluation reports.

mod config;
mod eval;
mod journal;
mod pipeline;
mod query;

pub use config::{
    canonical_json, hash_value, EncoderConfig, KpcaConfig, PipelineConfig, PreprocessConfig, QueryConfig, VerifyConfig,
    VocabConfig, CONFIG_VERSION,
};
pub use eval::{
    build_index_from_manifest, eval_index, run_eval, EvalOutput, IndividualStats, Manifest, ManifestEntry,
    SkippedImage, Split,
};
pub use journal::{confirm_match, embedding_to_f64, ConfirmRequest, Journal, JournalRecord};
pub use pipeline::{
    build_index, index_embeddings, prepare_descriptors, prepare_pattern, prepare_pattern_masked, train_vocabulary,
    EmbeddedItem, IndexItem, Pipeline, PipelineInput, PipelineOutput,
};
pub use query::{query_and_verify, verify_matches, verify_pair, MatchStatus, QueryResult, VerifiedMatch};

use std::fmt;

use thiserror::Error;

/// Pipeline stage an error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    Features,
    Vocab,
    Encode,
    Index,
    Geoverify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Features => "features",
            Stage::Vocab => "vocab",
            Stage::Encode => "encode",
            Stage::Index => "index",
            Stage::Geoverify => "geoverify",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("config hash mismatch: expected {expected}, got {got}")]
    ConfigMismatch { expected: String, got: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("confirm: {0}")]
    Confirm(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            HarnessError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<V> {
    fn stage(self, stage: Stage) -> Result<V, HarnessError>;
}

impl<V, E: std::error::Error + Send + Sync + 'static> StageExt<V> for Result<V, E> {
    fn stage(self, stage: Stage) -> Result<V, HarnessError> {
        self.map_err(|e| HarnessError::Stage { stage, source: Box::new(e) })
    }
}

pub(crate) fn stage_error(stage: Stage, message: impl Into<String>) -> HarnessError {
    HarnessError::Stage { stage, source: message.into().into() }
}

/// Rejects an artifact stamped with a different config hash.
pub fn check_config_hash(artifact_config: &serde_json::Value, config: &PipelineConfig) -> Result<(), HarnessError> {
    let expected = config.hash();
    let got = hash_value(artifact_config);
    if expected != got {
        return Err(HarnessError::ConfigMismatch { expected, got });
    }
    Ok(())
}
