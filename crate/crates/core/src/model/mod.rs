//! Branch architectures and triplet networks with configurable weight sharing.

mod arch;
mod branch;
mod triplet;

pub use arch::{
    preset_arch, ActShape, BranchArch, BranchKind, LayerKind, LayerSpec, Preset, DEFAULT_EMBEDDING_DIM, HEAD_NAME,
};
pub use branch::{build_photo_branch, build_sketch_branch, Branch, BranchNet, BranchOutput, ClassifierHead, ForwardCtx};
pub use triplet::{build_triplet, Pairing, ShareMode, SharingScheme, TripletNet};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture config: {0}")]
    Config(String),
    #[error("unknown preset `{0}` (expected `full` or `mini`)")]
    UnknownPreset(String),
    #[error("sharing scheme rejected: {0}")]
    Scheme(String),
    #[error("input shape {got:?} does not match branch input {want:?}")]
    InputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("classifier head already attached")]
    HeadAttached,
    #[error("no classifier head attached")]
    NoHead,
    #[error("classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("embedding dimension mismatch: expected {expected}, checkpoint has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
