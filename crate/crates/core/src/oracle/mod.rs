//! Exact tabular oracle.
//!
//! Values come from dense linear solves; every expectation is an explicit sum
//! over states and joint actions.

pub mod bound;
pub mod eval;
pub mod mdp;
pub mod spi;

pub use bound::{
    importance_equivalence_gap, kl_max, mu_exact, penalty_coefficient, pipeline_bound, shared_lower_bound, surrogate_m,
    dirichlet_uniform, AdvantageSplit, SurrogateTerms,
};
pub use eval::{decomposition_residual, evaluate_policy, multi_agent_advantage, multi_agent_q, DecompositionResidual, PolicyEvaluation};
pub use mdp::{AgentSet, TabularJointPolicy, TabularMdp};
pub use spi::{safe_penalty_iteration, SpiOutcome, TabularLogits};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("agent sets overlap")]
    Overlap,
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("parse error: {0}")]
    Parse(String),
}
