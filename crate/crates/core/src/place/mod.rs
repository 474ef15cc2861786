//! Visual vocabulary, bag-of-words vectors, the keyframe database and loop closing.

mod bow;
mod database;
mod loop_closing;
mod vocabulary;

use std::path::PathBuf;

pub use bow::{l2_score, BowVector};
pub use database::{detect_loop, KeyFrameDatabase, LoopCandidate, LoopDetectorConfig};
pub use loop_closing::{close_loop, LoopClosingConfig, LoopCorrection, LoopError};
pub use vocabulary::{build_vocabulary, VocabNode, Vocabulary};

use crate::features::VariantMismatch;

#[derive(Debug, thiserror::Error)]
pub enum PlaceError {
    #[error("need at least {required} training descriptors, got {got}")]
    TooFewDescriptors { got: usize, required: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error(transparent)]
    Variant(#[from] VariantMismatch),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
