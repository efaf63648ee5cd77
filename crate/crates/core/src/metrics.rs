//! Evaluation quantities computed from a swarm state.
//!
//! Every reference quantity comes from the exact solvers in
//! [`crate::hypergrad`], so recorded curves are noise-free functions of the
//! iterate even during stochastic runs.

use nalgebra::{DMatrix, DVector};

use crate::engine::{column_mean, SwarmState};
use crate::error::{Result, SparkleError};
use crate::hypergrad::{hypergradient, upper_minimizer};
use crate::problems::BilevelProblem;

/// One recorded row of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    /// `‖∇Φ(x̄)‖²`.
    pub grad_phi_sq: f64,
    pub cons_x: f64,
    pub cons_y: f64,
    pub cons_z: f64,
    /// `‖ȳ − y*(x̄)‖²`.
    pub err_y: f64,
    /// `‖z̄ − z*(x̄)‖²`.
    pub err_z: f64,
    /// `Σ_i ‖x_i − x̂‖²`, NaN when no minimizer `x̂` is available.
    pub est_err: f64,
    pub wall_ns: u64,
}

/// Per-problem data shared by every measurement of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsContext {
    x_hat: Option<DVector<f64>>,
}

impl MetricsContext {
    /// Locate the upper-level minimizer `x̂` once.
    ///
    /// Problems whose `Φ` is not quadratic get no `x̂`; their `est_err` is NaN.
    pub fn new<P: BilevelProblem + ?Sized>(problem: &P) -> Result<Self> {
        match upper_minimizer(problem) {
            Ok(x) => Ok(Self { x_hat: Some(x) }),
            Err(SparkleError::NonConvergence { residual, .. }) => {
                log::warn!("no upper-level minimizer found (residual {residual:e}); est_err will be NaN");
                Ok(Self { x_hat: None })
            }
            Err(e) => Err(e),
        }
    }

    /// Context with a known minimizer.
    pub fn with_minimizer(x_hat: DVector<f64>) -> Self {
        Self { x_hat: Some(x_hat) }
    }

    pub fn x_hat(&self) -> Option<&DVector<f64>> {
        self.x_hat.as_ref()
    }
}

/// Metrics of `state` at its current iteration; `wall_ns` is left at zero.
pub fn measure<P: BilevelProblem + ?Sized>(state: &SwarmState, problem: &P, ctx: &MetricsContext) -> Result<MetricsRow> {
    let x_bar = column_mean(&state.x);
    let reference = hypergradient(problem, &x_bar)?;
    let est_err = match &ctx.x_hat {
        Some(x_hat) => {
            if x_hat.len() != state.x.nrows() {
                return Err(SparkleError::DimensionMismatch {
                    what: "upper-level minimizer",
                    expected: state.x.nrows(),
                    found: x_hat.len(),
                });
            }
            state.x.column_iter().map(|c| (c - x_hat).norm_squared()).sum()
        }
        None => f64::NAN,
    };
    Ok(MetricsRow {
        k: state.k,
        grad_phi_sq: reference.grad_phi.norm_squared(),
        cons_x: consensus_error(&state.x),
        cons_y: consensus_error(&state.y),
        cons_z: consensus_error(&state.z),
        err_y: (column_mean(&state.y) - reference.y_star).norm_squared(),
        err_z: (column_mean(&state.z) - reference.z_star).norm_squared(),
        est_err,
        wall_ns: 0,
    })
}

/// `(1/n) Σ_i ‖s_i − s̄‖²` over the columns of `s`.
///
/// Exactly zero when all columns are equal.
pub fn consensus_error(s: &DMatrix<f64>) -> f64 {
    let n = s.ncols();
    if n == 0 {
        return 0.0;
    }
    let first = s.column(0);
    if s.column_iter().all(|c| c == first) {
        return 0.0;
    }
    let mean = column_mean(s);
    s.column_iter().map(|c| (c - &mean).norm_squared()).sum::<f64>() / n as f64
}

/// Same quantity as [`consensus_error`], via `(1/n)‖s (I − 11ᵀ/n)‖²_F`.
pub fn consensus_error_projector(s: &DMatrix<f64>) -> f64 {
    let n = s.ncols();
    if n == 0 {
        return 0.0;
    }
    let proj = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    (s * proj).norm_squared() / n as f64
}

/// Arithmetic mean of a `grad_phi_sq` series, `None` when empty.
pub fn running_average(series: &[f64]) -> Option<f64> {
    if series.is_empty() {
        None
    } else {
        Some(series.iter().sum::<f64>() / series.len() as f64)
    }
}
