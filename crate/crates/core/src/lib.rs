//! Search for per-layer visual-token retention profiles that minimize a
//! distillation loss under a FLOPs budget.
//!
//! The pieces fit together as follows: [`cost_model`] prices a retention
//! profile, [`kernels`] parameterize profiles with a few scalars,
//! [`relaxation`] turns a retention ratio into a differentiable token mask,
//! [`toy_vlm`] provides a deterministic model to prune, [`alm`] runs the
//! augmented Lagrangian search and [`pareto`] builds the grid-search frontier
//! used as a reference.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alm;
pub mod cost_model;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod pareto;
pub mod problems;
pub mod relaxation;
pub mod toy_vlm;

pub use alm::{outer_loop, AlmConfig, Evaluator, Parameterization, SearchOutcome, SearchResult};
pub use cost_model::{Budget, CostModelParams, RetentionProfile};
pub use error::{Error, Result};
pub use kernels::{KernelSpec, KernelVariant};
pub use pareto::{extract_frontier, EvalPoint, ParetoFrontier};
pub use problems::{QuadraticProblem, ToyEvaluator};
pub use relaxation::{RelaxationConfig, TokenScores};
pub use toy_vlm::{MaskMode, ToyInstance, ToyModelSpec};
