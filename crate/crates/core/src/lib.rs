//! Lightweight cross-modal representation learning.
//!
//! One shared fusion encoder maps embeddings from frozen per-modality
//! encoders into a common latent space. Each modality's embedding is
//! projected, fused with a learned modality context vector, passed through
//! a single transformer block and L2-normalized. Training minimizes a
//! bidirectional contrastive loss whose targets are soft distributions
//! built from intra-modal similarities.
//!
//! Modules, bottom-up:
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors and reverse-mode AD
//! - [`data`]: embedding files, synthetic paired data, minibatches
//! - [`model`]: the fusion encoder
//! - [`objective`]: the soft-target contrastive loss
//! - [`optim`], [`train`], [`checkpoint`]: optimization and persistence
//! - [`eval`]: zero-shot, retrieval, linear-probe and fine-tune protocols

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use data::{PairedEmbeddingSet, SplitTag, SyntheticSpec};
pub use eval::EvalReport;
pub use graph::{Graph, Var};
pub use model::{DfeParameters, FusionKind, Modality, ModelConfig};
pub use tensor::{Real, Tensor};
pub use train::{TrainConfig, Trainer};
