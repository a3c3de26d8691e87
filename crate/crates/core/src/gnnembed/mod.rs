//! Two-branch message-passing embedding network, triplet training and
//! checkpoints.

use std::path::PathBuf;

use thiserror::Error;

use crate::synthfeat::FeatureError;
use crate::walker::WalkError;

mod checkpoint;
mod embed;
mod network;
mod train;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
pub use embed::{
    embed_queries, embed_query, embed_references, sat_rows, street_rows, walk_headings, QueryWalk, ReferenceEmbedding,
    YawMode,
};
pub use network::{
    backward, batch_loss, embed_walks, forward_branch, kink_clearance, triplet_loss, Aggregator, Branch, BranchOutput,
    LayerParams, ModelParams, WalkBatch, WalkInputs,
};
pub use train::{
    sample_batch, train, validation_top1, write_log_csv, EpochLog, PlateauScheduler, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training graph needs at least two nodes")]
    EmptyTraining,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
