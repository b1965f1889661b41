//! Training-free multi-example smoothing for visual in-context learning.
//!
//! A frozen model scores each masked output patch as a distribution over
//! codebook tokens. Prompting it with one retrieved in-context pair biases
//! those scores toward that pair's output. This crate builds a pool of
//! scores from several retrieved pairs and replaces each patch score with a
//! divergence-weighted blend of its nearest pool entries before decoding.
//!
//! The model itself stays outside: scores come from a [`ScorerBackend`],
//! either the [`synthbench`] world or tensors exported to disk.

pub mod divergence;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod retriever;
pub mod smoothing;
pub mod synthbench;
pub mod tensor_file;
pub mod types;

pub use divergence::{js_divergence, kl_divergence, pairwise_divergence, CodebookDistribution, CodebookSpec, DivergenceKind};
pub use error::{Error, Result};
pub use metrics::{decode_argmax, iou, mean_iou, mse, pixel_accuracy, EvalReport, PredictionGrid};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineReport};
pub use pool::{build_pool, PoolMode, PromptPool, PromptSpec, ScoreGrid, ScorerBackend};
pub use retriever::{flatten_normalize, recall_at_k, top_m, FeatureMap, FeatureVector, RetrievalIndex, RetrievedSet};
pub use smoothing::{smooth_grid, Aggregation, KeyKind, Scope, SmoothedGrid, SmoothingConfig};
pub use tensor_file::{read_tensor, write_tensor, TensorFile};
pub use types::{GridDims, ItemId};
