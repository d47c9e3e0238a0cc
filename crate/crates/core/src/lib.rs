//! Analytical neural tangent kernels, kernel-regression predictors, and the
//! adversarial, spectral-feature and training-dynamics tooling built on them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below fix the precision.

/// Version of this crate, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod attacks;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod linalg;
pub mod nets;
pub mod ntk;
pub mod regression;
pub mod rng;
pub mod scalar;

pub use attacks::{AttackConfig, AttackKind, Attacker, Differentiable, Loss, Perturbation};
pub use datasets::{Dataset, LabelEncoding, Normalization, SplitSpec};
pub use dynamics::TrajectorySnapshot;
pub use error::{Error, Result};
pub use features::{FeatureFunction, FeatureScore};
pub use nets::{FiniteNet, LinearizedNet, Mlp, Network, TrainConfig, TrainTrace};
pub use ntk::{GramMatrix, KernelModel};
pub use regression::{EigenSystem, Horizon, Predictor};
pub use scalar::Scalar;

pub type Dataset64 = Dataset<f64>;
pub type GramMatrix64 = GramMatrix<f64>;
pub type EigenSystem64 = EigenSystem<f64>;
pub type Predictor64 = Predictor<f64>;
pub type FiniteNet64 = FiniteNet<f64>;
pub type Mlp64 = Mlp<f64>;
pub type AttackConfig64 = AttackConfig<f64>;
pub type TrainConfig64 = TrainConfig<f64>;

pub type Dataset32 = Dataset<f32>;
pub type GramMatrix32 = GramMatrix<f32>;
pub type Predictor32 = Predictor<f32>;
pub type FiniteNet32 = FiniteNet<f32>;
pub type Mlp32 = Mlp<f32>;
