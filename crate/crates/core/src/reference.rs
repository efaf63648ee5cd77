//! Standalone decentralized single-level iteration.
//!
//! ```text
//! x⁺ = C x − α A u − B d,   d⁺ = d + B x⁺
//! ```
//!
//! with `u_i = ∇f_i(x_i; ξ_i)`. It keeps the raw dual `d` and the square
//! root `B` rather than `B²`, uses plain loops instead of matrix products,
//! and shares only the random-stream layout with [`crate::engine`]. It is
//! an independent check of the bilevel engine on single-level problems.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::engine::StepSchedule;
use crate::error::{Result, SparkleError};
use crate::problems::{LocalObjective, OracleMode};
use crate::rng::agent_stream;
use crate::strategy::StrategyMatrices;

type Dense = Vec<Vec<f64>>;

/// Single-level iteration for one `(A, B², C)` triple.
pub struct SingleLevelReference<'a, O: ?Sized> {
    objective: &'a O,
    a: Dense,
    b: Dense,
    c: Dense,
    alpha: StepSchedule,
    batch: usize,
    mode: OracleMode,
    seed: u64,
}

impl<'a, O: LocalObjective + ?Sized> SingleLevelReference<'a, O> {
    pub fn new(
        objective: &'a O,
        matrices: &StrategyMatrices,
        alpha: StepSchedule,
        batch: usize,
        mode: OracleMode,
        seed: u64,
    ) -> Result<Self> {
        let n = objective.n_agents();
        if matrices.a_mat.nrows() != n {
            return Err(SparkleError::DimensionMismatch {
                what: "strategy matrices vs agent count",
                expected: n,
                found: matrices.a_mat.nrows(),
            });
        }
        if batch == 0 {
            return Err(SparkleError::invalid("batch_size", "must be at least 1"));
        }
        let to_dense = |m: &nalgebra::DMatrix<f64>| (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
        Ok(Self {
            objective,
            a: to_dense(&matrices.a_mat),
            b: psd_sqrt(&matrices.b_sq)?,
            c: to_dense(&matrices.c_mat),
            alpha,
            batch,
            mode,
            seed,
        })
    }

    /// Iterates `x⁰, x¹, …, x^K` from zero, each as one vector per agent.
    #[allow(clippy::needless_range_loop)]
    pub fn trace(&self, iterations: usize) -> Vec<Vec<DVector<f64>>> {
        let n = self.objective.n_agents();
        let p = self.objective.dim();
        let mut x = vec![DVector::zeros(p); n];
        let mut d = vec![DVector::zeros(p); n];
        let mut out = Vec::with_capacity(iterations + 1);
        out.push(x.clone());
        for k in 0..iterations {
            let alpha = self.alpha.at(k);
            let u: Vec<DVector<f64>> = (0..n).map(|i| self.direction(k, i, &x[i])).collect();
            let mut next = vec![DVector::zeros(p); n];
            for i in 0..n {
                for j in 0..n {
                    next[i] += &x[j] * self.c[i][j];
                    next[i] -= &u[j] * (alpha * self.a[i][j]);
                    next[i] -= &d[j] * self.b[i][j];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    d[i] += &next[j] * self.b[i][j];
                }
            }
            x = next;
            out.push(x.clone());
        }
        out
    }

    fn direction(&self, k: usize, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        if self.mode == OracleMode::Deterministic {
            return self.objective.exact_gradient(agent, x);
        }
        let mut rng = agent_stream(self.seed, k as u64, agent as u64);
        let mut g = self.objective.gradient(agent, x, &mut rng);
        for _ in 1..self.batch {
            g += self.objective.gradient(agent, x, &mut rng);
        }
        if self.batch > 1 {
            g *= 1.0 / self.batch as f64;
        }
        g
    }
}

/// Symmetric square root of a positive semidefinite matrix.
fn psd_sqrt(m: &nalgebra::DMatrix<f64>) -> Result<Dense> {
    let n = m.nrows();
    let eig = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or_else(|| SparkleError::Numeric(format!("eigensolver failed on the {n}x{n} dual matrix")))?;
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let v = &eig.eigenvectors;
    Ok((0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| v[(i, k)] * roots[k] * v[(j, k)]).sum()).collect())
        .collect())
}
