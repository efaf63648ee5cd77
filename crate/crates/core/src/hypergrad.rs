//! Exact reference solutions of the three subproblems.
//!
//! Everything here runs on exact per-agent oracles averaged over agents, so
//! the results are bias-free and can serve as ground truth for metrics.

use alloc::format;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SparkleError};
use crate::problems::{mean_exact_oracle, BilevelProblem};

/// Residual tolerance, relative to the residual at the starting point.
pub const SOLVE_TOL: f64 = 1e-10;
/// Iteration cap for the gradient-descent fallback of the lower level.
pub const MAX_LOWER_ITERS: usize = 1_000_000;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub y_star: DVector<f64>,
    pub z_star: DVector<f64>,
    pub grad_phi: DVector<f64>,
    /// `‖∇₂g(x, y*)‖`.
    pub residual_lower: f64,
    /// `‖∇²₂₂g(x, y*) z* − ∇₂f(x, y*)‖`.
    pub residual_aux: f64,
}

/// `y*(x) = argmin_y (1/n) Σ g_i(x, y)`.
pub fn solve_lower<P: BilevelProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(lower_with_residual(problem, x)?.0)
}

fn lower_with_residual<P: BilevelProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let q = problem.lower_dim();
    let mut y = DVector::zeros(q);
    let start = mean_exact_oracle(problem, x, &y)?;
    let tol = SOLVE_TOL * start.v.norm().max(1.0);

    if problem.lower_is_quadratic() {
        // Newton on a quadratic: one step is exact, the rest polish round-off.
        let chol = start
            .h_mat
            .clone()
            .cholesky()
            .ok_or(SparkleError::NotPositiveDefinite("lower-level Hessian"))?;
        let mut grad = start.v;
        for _ in 0..4 {
            y -= chol.solve(&grad);
            grad = mean_exact_oracle(problem, x, &y)?.v;
            if grad.norm() <= tol {
                return Ok((y, grad.norm()));
            }
        }
        return Err(SparkleError::NonConvergence {
            iterations: 4,
            residual: grad.norm(),
        });
    }

    let lipschitz = start.h_mat.clone().symmetric_eigenvalues().max();
    if lipschitz.is_nan() || lipschitz <= 0.0 {
        return Err(SparkleError::NotPositiveDefinite("lower-level Hessian"));
    }
    let step = 1.0 / lipschitz;
    let mut grad = start.v;
    for _ in 0..MAX_LOWER_ITERS {
        if grad.norm() <= tol {
            return Ok((y, grad.norm()));
        }
        y.axpy(-step, &grad, 1.0);
        grad = mean_exact_oracle(problem, x, &y)?.v;
    }
    Err(SparkleError::NonConvergence {
        iterations: MAX_LOWER_ITERS,
        residual: grad.norm(),
    })
}

/// `z*(x)` solving `∇²₂₂g(x, y*) z = ∇₂f(x, y*)`.
pub fn solve_aux<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y_star: &DVector<f64>,
) -> Result<DVector<f64>> {
    let oracle = mean_exact_oracle(problem, x, y_star)?;
    Ok(aux_from_parts(&oracle.h_mat, &oracle.b)?.0)
}

fn aux_from_parts(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let chol = h
        .clone()
        .cholesky()
        .ok_or(SparkleError::NotPositiveDefinite("auxiliary-level Hessian"))?;
    let tol = SOLVE_TOL * rhs.norm().max(1.0);
    let mut z = chol.solve(rhs);
    let mut resid = h * &z - rhs;
    for _ in 0..3 {
        if resid.norm() <= tol {
            break;
        }
        z -= chol.solve(&resid);
        resid = h * &z - rhs;
    }
    if resid.norm() > tol {
        return Err(SparkleError::NonConvergence {
            iterations: 3,
            residual: resid.norm(),
        });
    }
    Ok((z, resid.norm()))
}

/// `∇Φ(x) = ∇₁f(x, y*) − ∇²₁₂g(x, y*) z*(x)` for the agent-averaged functions.
pub fn hypergradient<P: BilevelProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<ReferenceSolution> {
    let (y_star, residual_lower) = lower_with_residual(problem, x)?;
    let oracle = mean_exact_oracle(problem, x, &y_star)?;
    let (z_star, residual_aux) = aux_from_parts(&oracle.h_mat, &oracle.b)?;
    let grad_phi = &oracle.l - &oracle.j_mat * &z_star;
    Ok(ReferenceSolution {
        y_star,
        z_star,
        grad_phi,
        residual_lower,
        residual_aux,
    })
}

/// `Φ(x) = (1/n) Σ f_i(x, y*(x))`.
pub fn phi_value<P: BilevelProblem + ?Sized>(problem: &P, x: &DVector<f64>) -> Result<f64> {
    let y = solve_lower(problem, x)?;
    let n = problem.n_agents();
    Ok((0..n).map(|i| problem.upper_value(i, x, &y)).sum::<f64>() / n as f64)
}

/// Central-difference estimate of `∇Φ(x)`.
pub fn fd_hypergradient<P: BilevelProblem + ?Sized>(problem: &P, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SparkleError::invalid("h", format!("step must be positive, got {h}")));
    }
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = phi_value(problem, &probe)?;
        probe[j] = x[j] - h;
        let minus = phi_value(problem, &probe)?;
        probe[j] = x[j];
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Minimum-norm minimizer of `Φ` for problems whose `Φ` is quadratic.
///
/// The Hessian of `Φ` is read off from differences of exact hypergradients
/// and pseudo-inverted, so flat directions of `Φ` stay at zero. The result
/// is checked to make `‖∇Φ‖` vanish to `1e-12` relative to `‖∇Φ(0)‖`.
pub fn upper_minimizer<P: BilevelProblem + ?Sized>(problem: &P) -> Result<DVector<f64>> {
    let p = problem.upper_dim();
    let origin = DVector::zeros(p);
    let g0 = hypergradient(problem, &origin)?.grad_phi;
    let mut hess = DMatrix::zeros(p, p);
    let mut unit = origin.clone();
    for j in 0..p {
        unit[j] = 1.0;
        let gj = hypergradient(problem, &unit)?.grad_phi;
        hess.set_column(j, &(gj - &g0));
        unit[j] = 0.0;
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let eig = hess
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or_else(|| SparkleError::Numeric(format!("eigensolver failed on the {p}x{p} upper Hessian")))?;
    let top = eig.eigenvalues.amax();
    let cutoff = 1e-9 * top.max(f64::MIN_POSITIVE);
    let pinv = |g: &DVector<f64>| {
        let mut out = DVector::zeros(p);
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > cutoff {
                let u = eig.eigenvectors.column(k);
                out.axpy(u.dot(g) / lam, &u, 1.0);
            }
        }
        out
    };
    let tol = 1e-12 * g0.norm().max(1.0);
    let mut x = -pinv(&g0);
    for _ in 0..5 {
        let g = hypergradient(problem, &x)?.grad_phi;
        if g.norm() <= tol {
            return Ok(x);
        }
        x -= pinv(&g);
    }
    let residual = hypergradient(problem, &x)?.grad_phi.norm();
    if residual <= tol {
        Ok(x)
    } else {
        Err(SparkleError::NonConvergence { iterations: 5, residual })
    }
}
