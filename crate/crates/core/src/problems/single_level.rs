//! Embedding of a single-level problem into the bilevel interface.
//!
//! The lower level is `G_i(x, y) = ‖y‖²/2` and the upper level ignores `y`,
//! so started from `y = z = 0` the bilevel engine never moves `y` or `z`
//! and the upper update sees plain stochastic gradients of `f_i`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::{normal, BilevelProblem, OracleSample};
use crate::error::{Result, SparkleError};
use crate::rng::instance_stream;

/// Per-agent smooth objective `f_i(x)` with a stochastic gradient oracle.
pub trait LocalObjective {
    fn n_agents(&self) -> usize;
    fn dim(&self) -> usize;
    fn gradient(&self, agent: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;
    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64>;
    fn value(&self, agent: usize, x: &DVector<f64>) -> f64;
}

/// `f_i(x) = ‖x − c_i‖² / 2` with additive Gaussian gradient noise.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub centers: Vec<DVector<f64>>,
    pub noise_std: f64,
}

impl QuadraticObjective {
    /// Centers drawn i.i.d. `N(0, spread²)`.
    pub fn random(n: usize, p: usize, spread: f64, noise_std: f64, seed: u64) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(SparkleError::invalid("dimensions", "agents and dimension must be positive"));
        }
        if !(noise_std >= 0.0 && spread >= 0.0) {
            return Err(SparkleError::invalid("noise_std", format!("must be non-negative, got {noise_std}")));
        }
        let mut rng = instance_stream(seed);
        let centers = (0..n)
            .map(|_| DVector::from_fn(p, |_, _| spread * normal(&mut rng)))
            .collect();
        Ok(Self { centers, noise_std })
    }

    /// Minimizer of the average objective.
    pub fn minimizer(&self) -> DVector<f64> {
        let sum = self
            .centers
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, c| acc + c);
        sum / self.centers.len() as f64
    }
}

impl LocalObjective for QuadraticObjective {
    fn n_agents(&self) -> usize {
        self.centers.len()
    }

    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn gradient(&self, agent: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let mut g = x - &self.centers[agent];
        if self.noise_std > 0.0 {
            for gi in g.iter_mut() {
                *gi += self.noise_std * normal(rng);
            }
        }
        g
    }

    fn exact_gradient(&self, agent: usize, x: &DVector<f64>) -> DVector<f64> {
        x - &self.centers[agent]
    }

    fn value(&self, agent: usize, x: &DVector<f64>) -> f64 {
        0.5 * (x - &self.centers[agent]).norm_squared()
    }
}

#[derive(Debug, Clone)]
pub struct SingleLevel<O> {
    inner: O,
    q: usize,
}

/// Wrap `inner` as a bilevel problem whose lower variable has dimension `q`.
pub fn make_single_level<O: LocalObjective>(inner: O, q: usize) -> Result<SingleLevel<O>> {
    if q == 0 {
        return Err(SparkleError::invalid("q", "lower dimension must be positive"));
    }
    if inner.n_agents() == 0 || inner.dim() == 0 {
        return Err(SparkleError::invalid("inner", "empty inner problem"));
    }
    Ok(SingleLevel { inner, q })
}

impl<O> SingleLevel<O> {
    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: LocalObjective> BilevelProblem for SingleLevel<O> {
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    fn upper_dim(&self) -> usize {
        self.inner.dim()
    }

    fn lower_dim(&self) -> usize {
        self.q
    }

    fn mu_g(&self) -> f64 {
        1.0
    }

    fn draw(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> OracleSample {
        let p = self.inner.dim();
        OracleSample {
            l: self.inner.gradient(agent, x, rng),
            b: DVector::zeros(self.q),
            v: y.clone(),
            j_mat: DMatrix::zeros(p, self.q),
            h_mat: DMatrix::identity(self.q, self.q),
        }
    }

    fn expected(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> OracleSample {
        let p = self.inner.dim();
        OracleSample {
            l: self.inner.exact_gradient(agent, x),
            b: DVector::zeros(self.q),
            v: y.clone(),
            j_mat: DMatrix::zeros(p, self.q),
            h_mat: DMatrix::identity(self.q, self.q),
        }
    }

    fn upper_value(&self, agent: usize, x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        self.inner.value(agent, x)
    }
}
