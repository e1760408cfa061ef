//! Margin-based face-recognition losses with an inter-prototype penalty.
//!
//! The crate is a small, CPU-only laboratory: it computes ArcFace/CosFace/softmax
//! cross-entropy over prototype cosines together with a penalty on the pairwise
//! cosines of selected prototype columns, verifies every analytic gradient
//! against central finite differences, trains a small MLP encoder on synthetic
//! child/adult identities, and evaluates child-adult verification and rank-1
//! identification.
//!
//! Module map:
//!
//! - [`math`]: dense matrices, cosine Gram matrices, stable reductions, PCA,
//!   finite-difference gradients.
//! - [`losses`]: margin cross-entropy, inter-prototype loss, combined objective.
//! - [`encoder`]: MLP with manual backprop, SGD with momentum and weight decay,
//!   the training loop and its run ledger.
//! - [`data`]: synthetic identity generator, CSV ingestion, batch sampling.
//! - [`eval`]: similarity analyses, pair construction, verification,
//!   identification, heatmap and projection export.
//! - [`experiment`]: config registry, checkpoints, the commands behind the CLI.
//! - [`parallel`]: rayon-backed map with a sequential fallback.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod math;
pub mod parallel;

pub use error::{Error, Result};
pub use math::Matrix;
