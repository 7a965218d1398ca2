//! Scaling paths beyond a single exact GP: chunked experts combined by a
//! (robust) Bayesian committee machine, a sparse variational GP with
//! inducing points, and Kronecker-structured solves on gridded inputs.

mod bcm;
mod experts;
mod kronecker;
mod svgp;

use thiserror::Error;

use crate::data::DataError;
use crate::gp::GpError;
use crate::kernels::KernelError;
use crate::train::TrainError;

pub use bcm::{aggregate, Aggregated, Aggregation, ExpertMarginals};
pub use experts::{fit_experts, Expert, ExpertEnsemble, ExpertOptions, Sharing};
pub use kronecker::{kron_matvec, KroneckerSystem};
pub use svgp::{collapsed_bound, collapsed_bound_and_gradient, init_inducing, svgp_fit, SparseGp, SvgpOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("every chunk failed to fit: {0}")]
    AllChunksFailed(String),
    #[error("chunk {chunk} has {n} rows, above the exact-GP cap of {cap}")]
    ChunkTooLarge { chunk: usize, n: usize, cap: usize },
    #[error("shared hyperparameters need chunks with identical kernel structure")]
    StructureMismatch,
    #[error("{m} inducing points for {n} training rows")]
    TooManyInducing { m: usize, n: usize },
    #[error("eigendecomposition failed on axis {0}")]
    EigenFailure(usize),
    #[error("kronecker grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no experts to aggregate")]
    NoExperts,
}
