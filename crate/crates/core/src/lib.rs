//! Robust optimal transport on finite discrete measures.
//!
//! The ground cost is the truncated Euclidean metric `min{|x - y|, λ}` raised
//! to a power `p ≥ 1`. On top of it the crate provides:
//!
//! * [`exact_ot`]: exact transport (network simplex) and an exact barycenter
//!   LP over a fixed candidate support, used as correctness oracles;
//! * [`entropic`]: log-domain Sinkhorn and Iterative Bregman Projections;
//! * [`free_support`]: the alternating mass / support-relocation barycenter
//!   solver with monotone objective descent;
//! * [`experiments`]: seeded generators and sweeps comparing truncated and
//!   untruncated barycenters on contaminated and heavy-tailed data.
//!
//! Setting `λ = +∞` ([`CostSpec::untruncated`]) recovers the classical
//! Wasserstein distance, so robust and classical runs share one code path.

pub mod cluster;
pub mod cost;
pub mod entropic;
mod error;
pub mod exact_ot;
pub mod experiments;
pub mod free_support;
pub mod matrix;
pub mod measures;

pub use cost::{cost_matrix, truncated_cost, CostMatrix, CostSpec, Ground};
pub use entropic::{ibp_barycenter, sinkhorn_distance, Epsilon, FixedSupportResult, SinkhornParams};
pub use error::{Error, Result};
pub use exact_ot::{exact_barycenter_lp, exact_distance, CouplingPlan, ExactResult};
pub use free_support::{
    candidate_supports, free_support_barycenter, objective_f, update_support, BarycenterProblem,
    FreeSupportResult, ObjectiveMethod,
};
pub use matrix::Matrix;
pub use measures::{DiscreteMeasure, MeasureMeta, MeasureSource};
