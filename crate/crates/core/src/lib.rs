//! DDIPNet / DDIPNet+ pipeline: a small dense-tensor engine with reverse-mode
//! differentiation, a convolutional projective backbone, a generative-prior
//! network producing a discriminant matrix, a squashed triplet-loss metric
//! head, joint Adam training, a liblinear-style linear SVM, and an experiment
//! harness with stratified splits, repeated runs and margin grid search.

pub mod adam;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
mod conv;
pub mod data;
pub mod dcgpn;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metric;
pub mod params;
pub mod report;
pub mod rng;
pub mod svm;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use tensor::{Real, Tensor};

/// Forward-pass mode: training uses batch statistics in normalization
/// layers, eval uses tracked running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
