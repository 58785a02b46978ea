//! Deep metric learning over plain real-vector embeddings: pair and proxy
//! losses with analytic gradients, mining, direction and language
//! regularizers, a finite-difference gradient checker, a small trainer and
//! retrieval evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod mining;
pub mod numerics;
pub mod pair;
pub mod proxy;
pub mod proxygml;
pub mod regularizers;
pub mod trainer;

pub use config::RunConfig;
pub use data::{generate_synthetic, Dataset, Sampler, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{evaluate, recall_at_k, EvalMetric, RetrievalReport};
pub use linalg::Matrix;
pub use loss::LossOutput;
pub use numerics::{EmbeddingBatch, Metric, SimilarityMatrix};
pub use proxy::ProxySet;
pub use trainer::{train, LossConfig, LossName, TrainConfig, TrainOutcome};
