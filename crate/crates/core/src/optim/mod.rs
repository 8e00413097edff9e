//! Convex solvers: a primal-dual interior-point core shared by the LP, QP and
//! structured regression problems, plus NNLS and bisquare IRLS.

mod demand;
mod dense;
mod ipm;
mod irls;
mod lad;
mod nnls;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use demand::{solve_demand_regression, DemandFit, DemandProblem};
pub use dense::{
    first_difference, psd_check_and_regularize, solve_l1_trend_qp, solve_lp, solve_qp, DenseKkt, LinearProgram,
    PsdCheck, QuadraticProgram,
};
pub use ipm::{solve_ipm, IpmSettings, IpmSolution, KktSystem};
pub use irls::{bisquare_rho, bisquare_weight, irls_bisquare, IrlsFit, DEFAULT_TUNING};
pub use lad::{solve_lad, LadFit};
pub use nnls::nnls;

/// Default ridge added to quadratic costs before factorization.
pub const DEFAULT_BETA_REG: f64 = 1e-4;
/// Default residual tolerance (absolute plus relative).
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub converged: bool,
    /// Unregularized Hessian is singular, so the minimizer is not unique.
    pub rank_deficient: bool,
    /// Cost is identically zero; any feasible point is optimal.
    pub degenerate: bool,
    pub min_eig: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("no convergence after {} iterations", .report.iterations)]
    NoConvergence { x: Vec<f64>, report: SolverReport },
    #[error("quadratic cost is not positive definite after regularization (min eigenvalue {min_eig:e})")]
    NotConvex { min_eig: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular linear system")]
    Singular,
    #[error("all robust weights are zero")]
    DegenerateWeights,
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl OptimError {
    pub fn is_no_convergence(&self) -> bool {
        matches!(self, OptimError::NoConvergence { .. })
    }
}

/// Design matrix restricted to its nonzero columns, each scaled to unit
/// maximum magnitude. Coefficients of all-zero columns are unidentifiable and
/// reported as zero.
#[derive(Debug, Clone)]
pub(crate) struct ScaledDesign {
    pub x: nalgebra::DMatrix<f64>,
    active: Vec<usize>,
    scales: Vec<f64>,
    total: usize,
}

impl ScaledDesign {
    pub fn new(x: &nalgebra::DMatrix<f64>) -> Self {
        let mut active = Vec::new();
        let mut scales = Vec::new();
        for (j, c) in x.column_iter().enumerate() {
            let m = c.amax();
            if m > 0.0 {
                active.push(j);
                scales.push(m);
            }
        }
        let mut xs = x.select_columns(&active);
        for (i, mut c) in xs.column_iter_mut().enumerate() {
            c /= scales[i];
        }
        Self {
            x: xs,
            active,
            scales,
            total: x.ncols(),
        }
    }

    /// Maps coefficients of the scaled active columns back to the full design.
    pub fn expand(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (i, &j) in self.active.iter().enumerate() {
            out[j] = a[i] / self.scales[i];
        }
        out
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
