//! Entropy-regularized multi-marginal optimal transport with tree-structured
//! costs, and the equivalent Schrödinger bridge on rooted trees.
//!
//! The joint transport plan over `J` marginals is never materialized: all
//! marginal and pairwise projections of the scaled kernel tensor are computed
//! by message passing along the tree, so a Sinkhorn sweep costs a handful of
//! matrix-vector products instead of `O(n^J)` tensor work. A brute-force
//! dense-tensor oracle is included for verification at desk scale.
//!
//! Modules:
//! - [`graph`]: undirected trees, rooted trees, paths, leaf schedules.
//! - [`numerics`]: marginals, cost matrices, kernels, KL divergence.
//! - [`oracle`]: explicit dense-tensor reference implementation.
//! - [`projections`]: cached message passing for projections of the scaled kernel.
//! - [`solver`]: the scheduled Sinkhorn iteration over leaf constraints.
//! - [`bridge`]: Schrödinger bridges on rooted trees (backward/forward potentials).
//! - [`pairwise`]: the pairwise-regularized baseline and the cycle counterexample.
//! - [`ensemble`]: agent simulation and flow estimation on hidden Markov trees.

// pub mod bridge;
// pub mod ensemble;
pub mod graph;
pub mod lp;
pub mod numerics;
pub mod oracle;
// pub mod pairwise;
pub mod projections;
pub mod solver;

mod scalar;

pub use scalar::Scalar;

pub use graph::{RootedTree, Tree};
pub use numerics::{CostMatrix, KernelMatrix, Marginal};
pub use solver::{SolveOptions, SolveReport, TreeOTProblem, TreeSolution};

/// Concrete `f64` aliases for the main domain types.
pub type Marginal64 = numerics::Marginal<f64>;
pub type CostMatrix64 = numerics::CostMatrix<f64>;
pub type KernelMatrix64 = numerics::KernelMatrix<f64>;
pub type TreeOTProblem64 = solver::TreeOTProblem<f64>;
pub type SolveReport64 = solver::SolveReport<f64>;
// pub type MarkovTreeProblem64 = bridge::MarkovTreeProblem<f64>;
// pub type BridgeSolution64 = bridge::BridgeSolution<f64>;
// pub type PairwiseProblem64 = pairwise::PairwiseProblem<f64>;
// pub type PairwiseSolution64 = pairwise::PairwiseSolution<f64>;

/// Concrete `f32` aliases.
pub type Marginal32 = numerics::Marginal<f32>;
pub type CostMatrix32 = numerics::CostMatrix<f32>;
pub type KernelMatrix32 = numerics::KernelMatrix<f32>;
pub type TreeOTProblem32 = solver::TreeOTProblem<f32>;
