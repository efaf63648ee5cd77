//! Streaming least-squares bilevel problem.
//!
//! Agent `i` observes `(A, b) = (A* + φ, bᵢ + ψ)` with i.i.d. `N(0, σ_g²)`
//! noise and holds
//!
//! ```text
//! f_i(x, y) = E ‖A y − b‖²
//! g_i(x, y) = E ‖A y − x‖² + c_r ‖y‖²
//! ```
//!
//! with `A ∈ R^{p×q}`, `x, b ∈ R^p`, `y ∈ R^q`. Targets `bᵢ = A* y₀ + δᵢ`
//! share a base `A* y₀` and differ by offsets `δᵢ ~ N(0, σ_h² I)`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::{normal, BilevelProblem, OracleSample};
use crate::error::{Result, SparkleError};
use crate::rng::instance_stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Observation noise on every entry of `A` and `b`.
    pub sigma_g: f64,
    /// Spread of the per-agent target offsets.
    pub sigma_h: f64,
    pub c_r: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n: 10,
            p: 20,
            q: 10,
            sigma_g: 0.001,
            sigma_h: 0.1,
            c_r: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBilevel {
    params: SyntheticParams,
    a_star: DMatrix<f64>,
    targets: Vec<DVector<f64>>,
    /// `A*ᵀA* + p σ_g² I`, the expectation of `AᵀA`.
    gram: DMatrix<f64>,
}

pub fn make_synthetic_bilevel(params: &SyntheticParams) -> Result<SyntheticBilevel> {
    let SyntheticParams {
        n,
        p,
        q,
        sigma_g,
        sigma_h,
        c_r,
        seed,
    } = *params;
    if n == 0 || p == 0 || q == 0 {
        return Err(SparkleError::invalid("dimensions", format!("n, p, q must be positive, got {n}, {p}, {q}")));
    }
    if !(c_r > 0.0 && c_r.is_finite()) {
        return Err(SparkleError::invalid("c_r", format!("must be positive for strong convexity, got {c_r}")));
    }
    for (name, v) in [("sigma_g", sigma_g), ("sigma_h", sigma_h)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(SparkleError::invalid(name, format!("must be non-negative, got {v}")));
        }
    }
    let mut rng = instance_stream(seed);
    // Entries of A* are N(0, 9).
    let a_star = DMatrix::from_fn(p, q, |_, _| 3.0 * normal(&mut rng));
    let y0 = DVector::from_fn(q, |_, _| normal(&mut rng));
    let base = &a_star * &y0;
    let targets = (0..n)
        .map(|_| DVector::from_fn(p, |i, _| base[i] + sigma_h * normal(&mut rng)))
        .collect();
    let gram = a_star.tr_mul(&a_star) + DMatrix::identity(q, q) * (p as f64 * sigma_g * sigma_g);
    Ok(SyntheticBilevel {
        params: params.clone(),
        a_star,
        targets,
        gram,
    })
}

impl SyntheticBilevel {
    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn a_star(&self) -> &DMatrix<f64> {
        &self.a_star
    }

    pub fn target(&self, agent: usize) -> &DVector<f64> {
        &self.targets[agent]
    }

    /// Effective ridge `c_r + p σ_g²` of the expected lower-level Hessian.
    pub fn effective_ridge(&self) -> f64 {
        self.params.c_r + self.params.p as f64 * self.params.sigma_g * self.params.sigma_g
    }

    fn noisy_design(&self, rng: &mut dyn RngCore) -> DMatrix<f64> {
        let s = self.params.sigma_g;
        if s == 0.0 {
            return self.a_star.clone();
        }
        DMatrix::from_fn(self.params.p, self.params.q, |i, j| self.a_star[(i, j)] + s * normal(rng))
    }

    fn noisy_target(&self, agent: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        let s = self.params.sigma_g;
        if s == 0.0 {
            return self.targets[agent].clone();
        }
        DVector::from_fn(self.params.p, |i, _| self.targets[agent][i] + s * normal(rng))
    }
}

impl BilevelProblem for SyntheticBilevel {
    fn n_agents(&self) -> usize {
        self.params.n
    }

    fn upper_dim(&self) -> usize {
        self.params.p
    }

    fn lower_dim(&self) -> usize {
        self.params.q
    }

    fn mu_g(&self) -> f64 {
        2.0 * self.params.c_r
    }

    fn draw(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> OracleSample {
        let (p, q, c_r) = (self.params.p, self.params.q, self.params.c_r);
        // ξ: upper-level observation.
        let a_up = self.noisy_design(rng);
        let b_up = self.noisy_target(agent, rng);
        let b = a_up.tr_mul(&(&a_up * y - b_up)) * 2.0;
        // ζ: lower-level observation.
        let a_low = self.noisy_design(rng);
        let v = a_low.tr_mul(&(&a_low * y - x)) * 2.0 + y * (2.0 * c_r);
        let h_mat = (a_low.tr_mul(&a_low) + DMatrix::identity(q, q) * c_r) * 2.0;
        let j_mat = a_low * -2.0;
        OracleSample {
            l: DVector::zeros(p),
            b,
            v,
            j_mat,
            h_mat,
        }
    }

    fn expected(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> OracleSample {
        let (p, q, c_r) = (self.params.p, self.params.q, self.params.c_r);
        let gy = &self.gram * y;
        let b = (&gy - self.a_star.tr_mul(&self.targets[agent])) * 2.0;
        let v = (gy - self.a_star.tr_mul(x) + y * c_r) * 2.0;
        let h_mat = (&self.gram + DMatrix::identity(q, q) * c_r) * 2.0;
        OracleSample {
            l: DVector::zeros(p),
            b,
            v,
            j_mat: &self.a_star * -2.0,
            h_mat,
        }
    }

    fn upper_value(&self, agent: usize, _x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let s2 = self.params.sigma_g * self.params.sigma_g;
        let p = self.params.p as f64;
        (&self.a_star * y - &self.targets[agent]).norm_squared() + s2 * p * y.norm_squared() + s2 * p
    }
}
