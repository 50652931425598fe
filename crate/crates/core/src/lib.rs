//! Per-sample test-time adaptation of cached class prototypes.
//!
//! Given L2-normalized class prototypes and a batch of augmented views of
//! one image, a small feature-space transform of the prototypes is trained
//! for a few steps to minimize the entropy of the averaged prediction over
//! the most confident views, then the image is classified against the
//! adapted prototypes. Encoders are out of scope: everything here works on
//! precomputed embeddings stored in TPSE files.

pub mod bench;
pub mod engine;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod numkernel;
pub mod optim;
pub mod prototypes;
pub mod transforms;

pub use engine::{adapt_all, adapt_one, run_dataset, EngineConfig, Prediction, Summary, ViewBatch};
pub use error::{Result, TpsError};
pub use numkernel::{Mat, ProbDist};
pub use optim::{OptimConfig, OptimizerKind};
pub use prototypes::PrototypeSet;
pub use transforms::{TransformKind, TransformParams};
