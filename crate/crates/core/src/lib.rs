//! Linear projection heads over frozen image/text backbone embeddings,
//! trained with the symmetric contrastive loss, plus the retrieval
//! benchmarking used to measure how well descriptive-caption models
//! transfer to commentative social-media text.
//!
//! Module map:
//!
//! - [`matrix`]: dense row-major `f32` matrices with `f64` reductions.
//! - [`contrastive`]: projection heads, the symmetric CLIP loss and its gradients.
//! - [`dataset`]: manifests, filtering, splitting, mixing, batch iteration.
//! - [`trainer`]: Adam, the epoch loop with early stopping, checkpoints.
//! - [`eval`]: recall@k trials, similarity gap, DCG deltas, top-k query.
//! - [`synthgen`]: seeded synthetic pairs with a known linear alignment.
//! - [`viz`]: 2D PCA projection and scatter CSV export.

pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod synthgen;
pub mod trainer;
pub mod viz;

mod rng;

pub use contrastive::{DualProjector, ProjectionHead};
pub use dataset::{Lang, PairRecord, PairSet, Style};
pub use error::{Error, Result};
pub use eval::{DcgReport, Direction, EvalConfig, GapReport, RetrievalReport};
pub use matrix::Matrix;
pub use trainer::{Checkpoint, TrainConfig, TrainLog};
