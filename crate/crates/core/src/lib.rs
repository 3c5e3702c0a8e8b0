//! Training Jacobians for small multilayer perceptrons.
//!
//! The training map `f` sends an initial parameter vector θ₀ to the parameters
//! produced by a fixed, deterministic run of minibatch SGD with momentum. This
//! crate computes its Jacobian `J(θ₀) = ∂f/∂θ₀` exactly by pushing blocks of
//! tangent vectors through every optimizer step (one Hessian-vector product per
//! tangent per step), and provides the spectral and subspace tooling used to
//! study it: dense SVD, principal angles, region partitioning of the spectrum,
//! perturbation line searches, behavioral KL probes, the parameter-function
//! Jacobian and subspace-restricted training.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The
//! experiments run in `f64`; the aliases at the bottom of this file name the
//! concrete types used throughout the pipeline.

pub mod analysis;
pub mod data;
pub mod error;
pub mod io;
pub mod jacobian;
pub mod linalg;
pub mod nn;
pub mod objective;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use data::{Dataset, SplitSpec};
pub use nn::{Activation, LossKind, ModelConfig, ParamLayout, ParamVector};
pub use train::{Subspace, TrainConfig, TrajectoryCache};

/// Parameter vector at working precision.
pub type Params = nn::ParamVector<f64>;
/// Recorded training run at working precision.
pub type Trajectory = train::TrajectoryCache<f64>;
/// Orthonormal basis at working precision.
pub type Basis = train::Subspace<f64>;
/// Training Jacobian at working precision.
pub type Jacobian = jacobian::TrainingJacobian<f64>;
/// Singular value decomposition at working precision.
pub type Svd = linalg::SvdResult<f64>;
/// Dense matrix at working precision.
pub type Matrix = faer::Mat<f64>;
