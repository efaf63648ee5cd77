//! Multi-agent policy evaluation with linear value functions.
//!
//! Values are `V(s) = φ_sᵀx`. Agent `i` holds
//!
//! ```text
//! f_i(x, y) = 1/(2|S|) Σ_s (φ_sᵀx − y_s)²
//! g_i(x, y) = Σ_s (y_s − E[rⁱ(s, s') + γ φ_{s'}ᵀx | s])²
//! ```
//!
//! A lower-level draw samples one transition `s → s'` per state together
//! with a noisy reward.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::{normal, BilevelProblem, OracleSample};
use crate::error::{Result, SparkleError};
use crate::rng::instance_stream;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvalParams {
    pub n: usize,
    pub num_states: usize,
    /// Feature dimension m.
    pub features: usize,
    pub discount: f64,
    pub reward_noise_std: f64,
    pub seed: u64,
}

impl Default for PolicyEvalParams {
    fn default() -> Self {
        Self {
            n: 10,
            num_states: 200,
            features: 10,
            discount: 0.95,
            reward_noise_std: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    params: PolicyEvalParams,
    /// Feature matrix Φ, one row per state.
    phi: DMatrix<f64>,
    transition: DMatrix<f64>,
    /// Row-wise cumulative transition probabilities for sampling.
    cumulative: Vec<Vec<f64>>,
    /// `P Φ`.
    next_features: DMatrix<f64>,
    mean_rewards: Vec<DMatrix<f64>>,
    /// `Σ_{s'} P(s, s') r̄ⁱ(s, s')` per agent.
    expected_rewards: Vec<DVector<f64>>,
}

pub fn make_policy_eval(params: &PolicyEvalParams) -> Result<PolicyEvaluation> {
    let PolicyEvalParams {
        n,
        num_states,
        features,
        discount,
        reward_noise_std,
        seed,
    } = *params;
    if n == 0 || features == 0 {
        return Err(SparkleError::invalid("dimensions", "agents and features must be positive"));
    }
    if num_states < 2 {
        return Err(SparkleError::invalid("num_states", format!("need at least 2 states, got {num_states}")));
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(SparkleError::invalid("discount", format!("must lie in [0, 1), got {discount}")));
    }
    if !(reward_noise_std >= 0.0 && reward_noise_std.is_finite()) {
        return Err(SparkleError::invalid("reward_noise_std", format!("must be non-negative, got {reward_noise_std}")));
    }
    let s = num_states;
    let mut rng = instance_stream(seed);
    let phi = DMatrix::from_fn(s, features, |_, _| rng.random::<f64>());
    let mut transition = DMatrix::from_fn(s, s, |_, _| rng.random::<f64>());
    for i in 0..s {
        let total = transition.row(i).sum();
        transition.row_mut(i).scale_mut(1.0 / total);
    }
    let cumulative = (0..s)
        .map(|i| {
            let mut acc = 0.0;
            transition.row(i).iter().map(|p| {
                acc += p;
                acc
            })
            .collect()
        })
        .collect();
    let mean_rewards: Vec<DMatrix<f64>> = (0..n)
        .map(|_| DMatrix::from_fn(s, s, |_, _| rng.random::<f64>()))
        .collect();
    let expected_rewards = mean_rewards
        .iter()
        .map(|r| DVector::from_fn(s, |i, _| transition.row(i).dot(&r.row(i))))
        .collect();
    let next_features = &transition * &phi;
    Ok(PolicyEvaluation {
        params: params.clone(),
        phi,
        transition,
        cumulative,
        next_features,
        mean_rewards,
        expected_rewards,
    })
}

impl PolicyEvaluation {
    pub fn params(&self) -> &PolicyEvalParams {
        &self.params
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn expected_reward(&self, agent: usize) -> &DVector<f64> {
        &self.expected_rewards[agent]
    }

    fn upper_parts(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = self.params.num_states as f64;
        let resid = &self.phi * x - y;
        let l = self.phi.tr_mul(&resid) / s;
        let b = resid / -s;
        (l, b)
    }

    fn next_state(&self, state: usize, rng: &mut dyn RngCore) -> usize {
        let u: f64 = rng.random();
        let row = &self.cumulative[state];
        row.partition_point(|&c| c <= u).min(row.len() - 1)
    }
}

impl BilevelProblem for PolicyEvaluation {
    fn n_agents(&self) -> usize {
        self.params.n
    }

    fn upper_dim(&self) -> usize {
        self.params.features
    }

    fn lower_dim(&self) -> usize {
        self.params.num_states
    }

    fn mu_g(&self) -> f64 {
        2.0
    }

    fn draw(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>, rng: &mut dyn RngCore) -> OracleSample {
        let (l, b) = self.upper_parts(x, y);
        let s = self.params.num_states;
        let gamma = self.params.discount;
        let values = &self.phi * x;
        let mut v = DVector::zeros(s);
        let mut j_mat = DMatrix::zeros(self.params.features, s);
        for state in 0..s {
            let next = self.next_state(state, rng);
            let reward = self.mean_rewards[agent][(state, next)] + self.params.reward_noise_std * normal(rng);
            v[state] = 2.0 * (y[state] - reward - gamma * values[next]);
            j_mat
                .column_mut(state)
                .copy_from(&(self.phi.row(next).transpose() * (-2.0 * gamma)));
        }
        OracleSample {
            l,
            b,
            v,
            j_mat,
            h_mat: DMatrix::identity(s, s) * 2.0,
        }
    }

    fn expected(&self, agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> OracleSample {
        let (l, b) = self.upper_parts(x, y);
        let s = self.params.num_states;
        let gamma = self.params.discount;
        let v = (y - &self.expected_rewards[agent] - &self.next_features * x * gamma) * 2.0;
        OracleSample {
            l,
            b,
            v,
            j_mat: self.next_features.transpose() * (-2.0 * gamma),
            h_mat: DMatrix::identity(s, s) * 2.0,
        }
    }

    fn upper_value(&self, _agent: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.phi * x - y).norm_squared() / (2.0 * self.params.num_states as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::agent_stream;

    fn mini(discount: f64) -> PolicyEvaluation {
        make_policy_eval(&PolicyEvalParams {
            n: 2,
            num_states: 5,
            features: 3,
            discount,
            reward_noise_std: 0.02,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn defaults_match_reference_setup() {
        let d = PolicyEvalParams::default();
        assert_eq!((d.num_states, d.features), (200, 10));
        assert_eq!(d.reward_noise_std, 0.02);
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let prob = mini(0.9);
        for i in 0..5 {
            assert!((prob.transition().row(i).sum() - 1.0).abs() < 1e-12);
            assert!(prob.transition().row(i).iter().all(|&p| p >= 0.0));
        }
        assert!(prob.features().iter().all(|&f| (0.0..1.0).contains(&f)));
    }

    #[test]
    fn discount_outside_range_is_rejected() {
        for d in [-0.1, 1.0, 1.5] {
            assert!(make_policy_eval(&PolicyEvalParams { discount: d, ..Default::default() }).is_err());
        }
        assert!(make_policy_eval(&PolicyEvalParams { num_states: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn zero_discount_decouples_levels() {
        let prob = mini(0.0);
        let x = DVector::from_element(3, 1.0);
        let y = DVector::from_element(5, 0.5);
        assert_eq!(prob.expected(0, &x, &y).j_mat.amax(), 0.0);
    }

    #[test]
    fn lower_draws_are_unbiased() {
        let prob = mini(0.9);
        let x = DVector::from_vec(alloc::vec![0.5, -1.0, 2.0]);
        let y = DVector::from_vec(alloc::vec![1.0, 0.0, -1.0, 0.5, 2.0]);
        let exact = prob.expected(1, &x, &y);
        let draws = 100_000;
        let mut rng = agent_stream(2, 0, 1);
        let mut v_sum = DVector::<f64>::zeros(5);
        let mut v_sq = DVector::<f64>::zeros(5);
        let mut j_sum = DMatrix::<f64>::zeros(3, 5);
        for _ in 0..draws {
            let s = prob.draw(1, &x, &y, &mut rng);
            v_sq += s.v.component_mul(&s.v);
            v_sum += s.v;
            j_sum += s.j_mat;
        }
        let nf = draws as f64;
        for k in 0..5 {
            let mean = v_sum[k] / nf;
            let se = libm::sqrt((v_sq[k] / nf - mean * mean) / nf);
            assert!(libm::fabs(mean - exact.v[k]) <= 3.0 * se, "state {k}");
        }
        assert!((j_sum / nf - &exact.j_mat).amax() < 0.02);
    }

    #[test]
    fn lower_solution_zeroes_mean_gradient() {
        let prob = mini(0.9);
        let x = DVector::from_vec(alloc::vec![0.3, 0.2, -0.1]);
        let mean_c = (prob.expected_reward(0) + prob.expected_reward(1)) * 0.5;
        let y_star = mean_c + prob.transition() * prob.features() * &x * 0.9;
        let v = (prob.expected(0, &x, &y_star).v + prob.expected(1, &x, &y_star).v) * 0.5;
        assert!(v.amax() < 1e-12);
    }
}
