//! Distances between staged scenario trees.
//!
//! A scenario tree carries a discrete stochastic process: nodes hold outcome
//! vectors and unconditional probabilities, root-to-leaf paths are scenarios.
//! This crate computes the Wasserstein distance between discrete marginals,
//! the nested (process) distance between two trees of equal depth, and a
//! stagewise-independent fast path that collapses the nested distance into a
//! weighted sum of per-stage Wasserstein distances. It also reduces
//! stagewise-independent trees to smaller per-stage supports while tracking
//! the induced error exactly.
//!
//! Entry points: [`tree::ProbabilityTree`], [`transport::wasserstein_p`],
//! [`nested::nested_dp`], [`nested::nested_lp`], [`swi::nested_swi`],
//! [`swi::reduce_swi`].

pub mod json;
mod lp;
pub mod metric;
pub mod nested;
pub mod swi;
pub mod transport;
pub mod tree;
