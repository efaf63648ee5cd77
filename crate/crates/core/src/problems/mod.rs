//! Bilevel problem instances and their stochastic oracles.
//!
//! A problem hands out, per agent and per draw, the five quantities the
//! engine consumes: `∇₁F`, `∇₂F` from one upper-level sample and `∇₂G`,
//! `∇²₁₂G`, `∇²₂₂G` from one lower-level sample. Exact expectations are
//! available for deterministic runs and for reference solutions.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Result, SparkleError};

mod policy;
mod single_level;
mod synthetic;

pub use policy::{make_policy_eval, PolicyEvaluation, PolicyEvalParams};
pub use single_level::{make_single_level, LocalObjective, QuadraticObjective, SingleLevel};
pub use synthetic::{make_synthetic_bilevel, SyntheticBilevel, SyntheticParams};

/// One agent's oracle output at `(x_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    /// `∇₁F(x, y; ξ)`, length p.
    pub l: DVector<f64>,
    /// `∇₂F(x, y; ξ)`, length q.
    pub b: DVector<f64>,
    /// `∇₂G(x, y; ζ)`, length q.
    pub v: DVector<f64>,
    /// `∇²₁₂G(x, y; ζ)`, p×q.
    pub j_mat: DMatrix<f64>,
    /// `∇²₂₂G(x, y; ζ)`, q×q and symmetric.
    pub h_mat: DMatrix<f64>,
}

impl OracleSample {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            l: DVector::zeros(p),
            b: DVector::zeros(q),
            v: DVector::zeros(q),
            j_mat: DMatrix::zeros(p, q),
            h_mat: DMatrix::zeros(q, q),
        }
    }

    fn accumulate(&mut self, other: &OracleSample) {
        self.l += &other.l;
        self.b += &other.b;
        self.v += &other.v;
        self.j_mat += &other.j_mat;
        self.h_mat += &other.h_mat;
    }

    fn scale(&mut self, s: f64) {
        self.l *= s;
        self.b *= s;
        self.v *= s;
        self.j_mat *= s;
        self.h_mat *= s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Stochastic,
    /// Every oracle call returns the exact expectation.
    Deterministic,
}

/// A decentralized bilevel problem over `n` agents.
///
/// Implementations may assume `agent < n_agents()` and correctly sized
/// inputs; [`sample_oracle`] and [`exact_oracle`] check both.
pub trait BilevelProblem {
    fn n_agents(&self) -> usize;
    /// Dimension p of the upper-level variable.
    fn upper_dim(&self) -> usize;
    /// Dimension q of the lower-level variable.
    fn lower_dim(&self) -> usize;
    /// Strong-convexity constant of every `g_i` in `y`.
    fn mu_g(&self) -> f64;
    /// One stochastic draw: a single `ξ` for `l, b` and a single `ζ` for `v, J, H`.
    fn draw(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> OracleSample;
    /// Expectation of [`BilevelProblem::draw`].
    fn expected(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> OracleSample;
    /// Exact `f_i(x, y)`.
    fn upper_value(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    /// Whether `∇₂g_i` is affine in `y`, so one Newton step solves the lower level.
    fn lower_is_quadratic(&self) -> bool {
        true
    }
}

fn check_inputs<P: BilevelProblem + ?Sized>(p: &P, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    if agent >= p.n_agents() {
        return Err(SparkleError::AgentOutOfRange {
            agent,
            n: p.n_agents(),
        });
    }
    if x.len() != p.upper_dim() {
        return Err(SparkleError::DimensionMismatch {
            what: "upper-level iterate",
            expected: p.upper_dim(),
            found: x.len(),
        });
    }
    if y.len() != p.lower_dim() {
        return Err(SparkleError::DimensionMismatch {
            what: "lower-level iterate",
            expected: p.lower_dim(),
            found: y.len(),
        });
    }
    Ok(())
}

/// Oracle output for one agent, averaged over `batch` independent draws in
/// stochastic mode.
pub fn sample_oracle<P: BilevelProblem + ?Sized>(
    problem: &P,
    agent: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    mode: OracleMode,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<OracleSample> {
    check_inputs(problem, agent, x, y)?;
    if mode == OracleMode::Deterministic {
        return Ok(problem.expected(agent, x, y));
    }
    if batch == 0 {
        return Err(SparkleError::invalid("batch_size", "must be at least 1"));
    }
    let mut acc = problem.draw(agent, x, y, rng);
    for _ in 1..batch {
        acc.accumulate(&problem.draw(agent, x, y, rng));
    }
    if batch > 1 {
        acc.scale(1.0 / batch as f64);
    }
    Ok(acc)
}

/// Exact expectation of the oracle for one agent.
pub fn exact_oracle<P: BilevelProblem + ?Sized>(
    problem: &P,
    agent: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<OracleSample> {
    check_inputs(problem, agent, x, y)?;
    Ok(problem.expected(agent, x, y))
}

/// Exact oracle averaged over all agents, i.e. the oracle of the mean functions.
pub fn mean_exact_oracle<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<OracleSample> {
    let n = problem.n_agents();
    let mut acc = exact_oracle(problem, 0, x, y)?;
    for i in 1..n {
        acc.accumulate(&exact_oracle(problem, i, x, y)?);
    }
    acc.scale(1.0 / n as f64);
    Ok(acc)
}

/// Standard normal draw.
pub(crate) fn normal(rng: &mut dyn RngCore) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::agent_stream;

    #[test]
    fn bad_agent_and_dimensions_are_rejected() {
        let prob = make_synthetic_bilevel(&SyntheticParams { n: 2, p: 3, q: 2, ..Default::default() }).unwrap();
        let x = DVector::zeros(3);
        let y = DVector::zeros(2);
        assert!(matches!(
            exact_oracle(&prob, 2, &x, &y),
            Err(SparkleError::AgentOutOfRange { agent: 2, n: 2 })
        ));
        assert!(exact_oracle(&prob, 0, &DVector::zeros(2), &y).is_err());
        let mut rng = agent_stream(0, 0, 0);
        assert!(sample_oracle(&prob, 0, &x, &y, OracleMode::Stochastic, 0, &mut rng).is_err());
    }

    #[test]
    fn deterministic_mode_equals_exact() {
        let prob = make_synthetic_bilevel(&SyntheticParams { n: 3, p: 4, q: 3, sigma_g: 0.5, ..Default::default() }).unwrap();
        let x = DVector::from_fn(4, |i, _| i as f64 * 0.3 - 0.2);
        let y = DVector::from_fn(3, |i, _| 1.0 - i as f64);
        let mut rng = agent_stream(1, 2, 3);
        let s = sample_oracle(&prob, 1, &x, &y, OracleMode::Deterministic, 10, &mut rng).unwrap();
        assert_eq!(s, exact_oracle(&prob, 1, &x, &y).unwrap());
    }
}
