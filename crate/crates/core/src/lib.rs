//! Transformational sparse coding.
//!
//! Images are modelled as sparse combinations of *leaves*, where every leaf is
//! a fixed affine transformation `T(x) = exp(Σ_j x_j G_j)` of a unit-norm root
//! template. Roots and per-edge transformation parameters are learned jointly
//! by alternating exact L1 weight inference, gradient steps on the Lie-algebra
//! coordinates, and closed-form root updates.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the common instantiations.

pub mod dataio;
pub mod error;
pub mod liegroup;
pub mod model;
pub mod scalar;
pub mod sparse_solver;
pub mod trainer;

pub use error::{Error, Result};
pub use liegroup::{
    apply_transform, build_generators, matexp_param_grad, matexp_param_grad_rank_one,
    transform_matrix, Generator, GeneratorSet, GradientQuadrature, QuadratureRule,
    TransformParams, GROUP_DIM,
};
pub use model::{dof_sc, dof_tsc, Forest, LossBreakdown, Penalties, Tree};
pub use scalar::Scalar;
pub use sparse_solver::{feature_sign, lasso_objective, SparseWeights};
pub use dataio::PatchBatch;
pub use trainer::{TrainConfig, TrainMetrics};

pub type GeneratorSet64 = GeneratorSet<f64>;
pub type GeneratorSet32 = GeneratorSet<f32>;
pub type TransformParams64 = TransformParams<f64>;
pub type TransformParams32 = TransformParams<f32>;
pub type Forest64 = Forest<f64>;
pub type Forest32 = Forest<f32>;
pub type Tree64 = Tree<f64>;
pub type PatchBatch64 = PatchBatch<f64>;
pub type PatchBatch32 = PatchBatch<f32>;
pub type TrainMetrics64 = TrainMetrics<f64>;
