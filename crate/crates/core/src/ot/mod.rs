//! Entropy-regularized optimal transport between discrete measures.
//!
//! Potentials `(f, g)` solve the regularized dual for cost `C`, marginals
//! `a`, `b` and regularization `epsilon`; the coupling is
//! `P_ij = a_i b_j exp((f_i + g_j - C_ij) / epsilon)`.

mod cost;
mod diff;
mod lp;
mod sinkhorn;

pub use cost::{cost_matrix, cost_matrix_real, cost_scale, CostMatrix};
pub use diff::{sinkhorn_potentials_diff, DiffPotentials, SinkhornGradient};
pub(crate) use diff::{t_op, FixedPointAdjoint};
pub(crate) use sinkhorn::column_update;
pub use lp::{exact_ot_lp, LpSolution, LP_MAX_ATOMS};
pub use sinkhorn::{
    dual_objective, log_marginal, reg_primal_cost, sinkhorn_log, sinkhorn_potentials, sinkhorn_reference, transport_plan,
    transport_plan_unchecked, SinkhornConfig, SinkhornResult, TransportPlan, TOL_MARGINAL, WEIGHT_FLOOR,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OtError {
    #[error("empty point set")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("marginal {0} is not a valid probability vector")]
    BadMarginal(&'static str),
    #[error("non-finite potential after {iterations} iterations")]
    NonFinite { iterations: usize },
    #[error("marginal residual {residual:.3e} exceeds {limit:.3e}")]
    MarginalResidual { residual: f64, limit: f64 },
    #[error("exact solver supports at most {max} atoms per side, got {found}")]
    TooLarge { max: usize, found: usize },
    #[error("transport simplex failed to terminate")]
    Cycling,
}
