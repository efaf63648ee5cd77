//! Single-loop decentralized bilevel iteration over simulated agents.
//!
//! Stacked iterates are stored as `dim × n` matrices with one column per
//! agent, so mixing by a symmetric matrix `M` is the right product `S·M`.
//!
//! Each iteration draws one oracle sample per agent at `(x_i, y_i)`, then
//! updates `y`, `z`, the momentum `r` and finally `x`. Two steppers realize
//! the same iteration:
//!
//! * [`Stepper::Generic`] applies `s⁺ = C s − A·(step·g) − e`, `e⁺ = e + B² s⁺`
//!   with the transformed dual `e = B·d`.
//! * [`Stepper::Recursive`] runs the per-strategy two-step or tracker
//!   recursion and never touches `B²`.
//!
//! The recursion keeps the previous *scaled* direction `step_k·g_k`, which
//! makes both steppers agree exactly under step-size schedules too.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SparkleError};
use crate::metrics::{measure, MetricsContext, MetricsRow};
use crate::problems::{sample_oracle, BilevelProblem, OracleMode, OracleSample};
use crate::rng::agent_stream;
use crate::strategy::{effective_mixing, recursion_form, strategy_matrices, RecursionForm, Strategy, StrategyMatrices};
use crate::topology::{mix, MixingMatrix};

/// Norm beyond which a run is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Step size, constant or `c0 / (c1 + c2·k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    Decaying { c0: f64, c1: f64, c2: f64 },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(s) => s,
            StepSchedule::Decaying { c0, c1, c2 } => c0 / (c1 + c2 * k as f64),
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(s) => s > 0.0 && s.is_finite(),
            StepSchedule::Decaying { c0, c1, c2 } => c0 > 0.0 && c1 > 0.0 && c2 >= 0.0 && c0.is_finite() && c1.is_finite() && c2.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SparkleError::invalid(name, format!("step size must stay positive, got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Upper-level step.
    pub alpha: StepSchedule,
    /// Lower-level step.
    pub beta: StepSchedule,
    /// Auxiliary-level step.
    pub gamma: StepSchedule,
    /// Momentum coefficient in `(0, 1]`; 1 disables averaging.
    pub theta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub mode: OracleMode,
}

impl Hyperparams {
    pub fn constant(alpha: f64, beta: f64, gamma: f64, theta: f64) -> Self {
        Self {
            alpha: StepSchedule::Constant(alpha),
            beta: StepSchedule::Constant(beta),
            gamma: StepSchedule::Constant(gamma),
            theta,
            iterations: 1000,
            batch_size: 1,
            mode: OracleMode::Deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every invalid field, not just the first.
    pub fn issues(&self) -> Vec<SparkleError> {
        let mut out: Vec<SparkleError> = [(&self.alpha, "alpha"), (&self.beta, "beta"), (&self.gamma, "gamma")]
            .into_iter()
            .filter_map(|(s, name)| s.validate(name).err())
            .collect();
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            out.push(SparkleError::invalid("theta", format!("must lie in (0, 1], got {}", self.theta)));
        }
        if self.batch_size == 0 {
            out.push(SparkleError::invalid("batch_size", "must be at least 1"));
        }
        out
    }
}

/// Strategy and communication matrices for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    pub strategy: Strategy,
    /// Mixing matrix actually used, after any positive-definite shift.
    pub mixing: MixingMatrix,
    pub matrices: StrategyMatrices,
    pub pd_shifted: bool,
}

impl LevelPlan {
    pub fn new(strategy: Strategy, w: &MixingMatrix, pd_shift: bool) -> Result<Self> {
        let (mixing, pd_shifted) = effective_mixing(strategy, w, pd_shift)?;
        let matrices = strategy_matrices(strategy, &mixing);
        Ok(Self {
            strategy,
            mixing,
            matrices,
            pd_shifted,
        })
    }
}

/// Plans for the upper (`x`), lower (`y`) and auxiliary (`z`) levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlans {
    pub upper: LevelPlan,
    pub lower: LevelPlan,
    pub aux: LevelPlan,
}

impl LevelPlans {
    /// Same strategy and topology on every level.
    pub fn uniform(strategy: Strategy, w: &MixingMatrix, pd_shift: bool) -> Result<Self> {
        let plan = LevelPlan::new(strategy, w, pd_shift)?;
        Ok(Self {
            upper: plan.clone(),
            lower: plan.clone(),
            aux: plan,
        })
    }

    /// `lower_strategy` on `y` and `z`, `upper_strategy` on `x`.
    pub fn mixed(lower_strategy: Strategy, upper_strategy: Strategy, w: &MixingMatrix, pd_shift: bool) -> Result<Self> {
        let lower = LevelPlan::new(lower_strategy, w, pd_shift)?;
        Ok(Self {
            upper: LevelPlan::new(upper_strategy, w, pd_shift)?,
            aux: lower.clone(),
            lower,
        })
    }

    pub fn n(&self) -> usize {
        self.upper.mixing.n()
    }

    fn levels(&self) -> [(&'static str, &LevelPlan); 3] {
        [("upper", &self.upper), ("lower", &self.lower), ("aux", &self.aux)]
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        for (name, plan) in self.levels() {
            if plan.mixing.n() != n {
                return Err(SparkleError::DimensionMismatch {
                    what: match name {
                        "lower" => "lower-level mixing matrix",
                        _ => "auxiliary-level mixing matrix",
                    },
                    expected: n,
                    found: plan.mixing.n(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    Generic,
    Recursive,
}

/// Extra per-level state of the recursive stepper.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionShadow {
    /// `s^{k-1}`; equals `s^0` before the first step.
    pub prev: DMatrix<f64>,
    /// `step_{k-1}·g^{k-1}`; zero before the first step.
    pub prev_dir: DMatrix<f64>,
    /// Gradient tracker `h`, unused by two-step forms.
    pub tracker: DMatrix<f64>,
    pub started: bool,
}

impl RecursionShadow {
    fn zeros(dim: usize, n: usize) -> Self {
        Self {
            prev: DMatrix::zeros(dim, n),
            prev_dir: DMatrix::zeros(dim, n),
            tracker: DMatrix::zeros(dim, n),
            started: false,
        }
    }
}

/// Stacked per-agent state, one column per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Momentum of the upper-level direction.
    pub r: DMatrix<f64>,
    pub e_x: DMatrix<f64>,
    pub e_y: DMatrix<f64>,
    pub e_z: DMatrix<f64>,
    pub shadow_x: RecursionShadow,
    pub shadow_y: RecursionShadow,
    pub shadow_z: RecursionShadow,
    pub k: usize,
}

/// All-zero state.
pub fn init_state(n: usize, p: usize, q: usize) -> SwarmState {
    SwarmState {
        x: DMatrix::zeros(p, n),
        y: DMatrix::zeros(q, n),
        z: DMatrix::zeros(q, n),
        r: DMatrix::zeros(p, n),
        e_x: DMatrix::zeros(p, n),
        e_y: DMatrix::zeros(q, n),
        e_z: DMatrix::zeros(q, n),
        shadow_x: RecursionShadow::zeros(p, n),
        shadow_y: RecursionShadow::zeros(q, n),
        shadow_z: RecursionShadow::zeros(q, n),
        k: 0,
    }
}

impl SwarmState {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Overwrite every agent's `x`, `y`, `z` with the given consensual values
    /// and reset the recursion shadows accordingly.
    pub fn set_consensus(&mut self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) {
        for i in 0..self.n() {
            self.x.set_column(i, x);
            self.y.set_column(i, y);
            self.z.set_column(i, z);
        }
        self.shadow_x.prev = self.x.clone();
        self.shadow_y.prev = self.y.clone();
        self.shadow_z.prev = self.z.clone();
    }
}

/// Step sizes and agent-averaged directions used in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `v̄ᵏ`.
    pub v_mean: DVector<f64>,
    /// `p̄ᵏ`.
    pub p_mean: DVector<f64>,
}

/// A configured simulation of the bilevel iteration on one problem.
pub struct Engine<'a, P: ?Sized> {
    problem: &'a P,
    plans: LevelPlans,
    hp: Hyperparams,
    stepper: Stepper,
    seed: u64,
    forms: Option<[RecursionForm; 3]>,
}

impl<'a, P: BilevelProblem + ?Sized> Engine<'a, P> {
    pub fn new(problem: &'a P, plans: LevelPlans, hp: Hyperparams, stepper: Stepper, seed: u64) -> Result<Self> {
        hp.validate()?;
        plans.validate()?;
        if plans.n() != problem.n_agents() {
            return Err(SparkleError::DimensionMismatch {
                what: "mixing matrix size vs agent count",
                expected: problem.n_agents(),
                found: plans.n(),
            });
        }
        let forms = match stepper {
            Stepper::Generic => None,
            Stepper::Recursive => Some([
                recursion_form(plans.upper.strategy)?,
                recursion_form(plans.lower.strategy)?,
                recursion_form(plans.aux.strategy)?,
            ]),
        };
        Ok(Self {
            problem,
            plans,
            hp,
            stepper,
            seed,
            forms,
        })
    }

    pub fn plans(&self) -> &LevelPlans {
        &self.plans
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn init_state(&self) -> SwarmState {
        init_state(self.problem.n_agents(), self.problem.upper_dim(), self.problem.lower_dim())
    }

    /// Advance `state` by one iteration.
    pub fn step(&self, state: &mut SwarmState) -> Result<StepRecord> {
        let k = state.k;
        let n = state.n();
        let alpha = self.hp.alpha.at(k);
        let beta = self.hp.beta.at(k);
        let gamma = self.hp.gamma.at(k);

        let samples = self.draw_all(state)?;

        // Lower level.
        let v = stack(n, |i| &samples[i].v);
        let v_mean = column_mean(&v);
        let dir_y = v * beta;
        self.update_level(1, &self.plans.lower, &mut state.y, &mut state.e_y, &mut state.shadow_y, dir_y);

        // Auxiliary level uses zᵏ.
        let mut p_dir = DMatrix::zeros(self.problem.lower_dim(), n);
        for (i, s) in samples.iter().enumerate() {
            let col = &s.h_mat * state.z.column(i) - &s.b;
            p_dir.set_column(i, &col);
        }
        let p_mean = column_mean(&p_dir);
        let dir_z = p_dir * gamma;
        self.update_level(2, &self.plans.aux, &mut state.z, &mut state.e_z, &mut state.shadow_z, dir_z);

        // Upper direction uses zᵏ⁺¹.
        let theta = self.hp.theta;
        for (i, s) in samples.iter().enumerate() {
            let u = &s.l - &s.j_mat * state.z.column(i);
            let mut r = state.r.column_mut(i);
            r *= 1.0 - theta;
            r.axpy(theta, &u, 1.0);
        }
        let dir_x = &state.r * alpha;
        self.update_level(0, &self.plans.upper, &mut state.x, &mut state.e_x, &mut state.shadow_x, dir_x);

        guard(state, k)?;
        state.k += 1;
        Ok(StepRecord {
            k,
            alpha,
            beta,
            gamma,
            v_mean,
            p_mean,
        })
    }

    fn draw_all(&self, state: &SwarmState) -> Result<Vec<OracleSample>> {
        (0..state.n())
            .map(|i| {
                let mut rng = agent_stream(self.seed, state.k as u64, i as u64);
                let x = state.x.column(i).into_owned();
                let y = state.y.column(i).into_owned();
                sample_oracle(self.problem, i, &x, &y, self.hp.mode, self.hp.batch_size, &mut rng)
            })
            .collect()
    }

    fn update_level(
        &self,
        level: usize,
        plan: &LevelPlan,
        s: &mut DMatrix<f64>,
        dual: &mut DMatrix<f64>,
        shadow: &mut RecursionShadow,
        dir: DMatrix<f64>,
    ) {
        match (self.stepper, self.forms) {
            (Stepper::Recursive, Some(forms)) => recursive_update(forms[level], plan.mixing.weights(), s, shadow, dir),
            _ => generic_update(&plan.matrices, s, dual, &dir),
        }
    }

    /// Run all configured iterations, recording metrics for the initial
    /// state, every `stride` iterations and after the last one.
    pub fn run(&self, stride: usize, clock: &mut dyn Clock) -> Result<RunOutput> {
        let ctx = MetricsContext::new(self.problem)?;
        self.run_with(stride, clock, &ctx, |_, _, _| Ok(()))
    }

    /// [`Engine::run`] with a precomputed metrics context and a hook called
    /// after every step with the states before and after it.
    pub fn run_with(
        &self,
        stride: usize,
        clock: &mut dyn Clock,
        ctx: &MetricsContext,
        mut hook: impl FnMut(&SwarmState, &SwarmState, &StepRecord) -> Result<()>,
    ) -> Result<RunOutput> {
        if stride == 0 {
            return Err(SparkleError::invalid("metrics_stride", "must be at least 1"));
        }
        let mut state = self.init_state();
        let mut rows = Vec::with_capacity(self.hp.iterations / stride + 2);
        let start = clock.now_ns();
        rows.push(measure(&state, self.problem, ctx)?);
        for _ in 0..self.hp.iterations {
            let before = state.clone();
            let rec = self.step(&mut state)?;
            hook(&before, &state, &rec)?;
            if state.k.is_multiple_of(stride) || state.k == self.hp.iterations {
                let mut row = measure(&state, self.problem, ctx)?;
                row.wall_ns = clock.now_ns().saturating_sub(start);
                rows.push(row);
            }
        }
        Ok(RunOutput { rows, state })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub state: SwarmState,
}

/// Monotone nanosecond clock for the `wall_ns` metric.
pub trait Clock {
    fn now_ns(&mut self) -> u64;
}

/// Clock that always reads zero, for bit-reproducible output.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&mut self) -> u64 {
        0
    }
}

fn stack<'s>(n: usize, col: impl Fn(usize) -> &'s DVector<f64>) -> DMatrix<f64> {
    let dim = col(0).len();
    let mut m = DMatrix::zeros(dim, n);
    for i in 0..n {
        m.set_column(i, col(i));
    }
    m
}

/// Mean over agents (columns).
pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

fn generic_update(mats: &StrategyMatrices, s: &mut DMatrix<f64>, dual: &mut DMatrix<f64>, dir: &DMatrix<f64>) {
    let next = mix(s, &mats.c_mat) - mix(dir, &mats.a_mat) - &*dual;
    if mats.uses_dual {
        *dual += mix(&next, &mats.b_sq);
        // Agents' duals sum to zero; remove the rounding drift so it cannot accumulate.
        let mean = dual.column_mean();
        for mut col in dual.column_iter_mut() {
            col -= &mean;
        }
    }
    *s = next;
}

fn recursive_update(form: RecursionForm, w: &DMatrix<f64>, s: &mut DMatrix<f64>, shadow: &mut RecursionShadow, dir: DMatrix<f64>) {
    if !shadow.started {
        shadow.prev = s.clone();
    }
    let next = match form {
        RecursionForm::TwoStep { mix_gradient } => {
            let delta = &dir - &shadow.prev_dir;
            let momentum = &*s * 2.0 - &shadow.prev;
            if mix_gradient {
                mix(&(momentum - delta), w)
            } else {
                mix(&momentum, w) - delta
            }
        }
        RecursionForm::Tracker(place) => {
            shadow.tracker = if !shadow.started {
                if place.mixes_initial() {
                    mix(&dir, w)
                } else {
                    dir.clone()
                }
            } else if place.mixes_increment() {
                mix(&(&shadow.tracker + &dir - &shadow.prev_dir), w)
            } else {
                mix(&shadow.tracker, w) + &dir - &shadow.prev_dir
            };
            if place.mixes_step() {
                mix(&(&*s - &shadow.tracker), w)
            } else {
                mix(s, w) - &shadow.tracker
            }
        }
    };
    shadow.prev = core::mem::replace(s, next);
    shadow.prev_dir = dir;
    shadow.started = true;
}

fn guard(state: &SwarmState, k: usize) -> Result<()> {
    let fields: [(&'static str, &DMatrix<f64>); 7] = [
        ("x", &state.x),
        ("y", &state.y),
        ("z", &state.z),
        ("r", &state.r),
        ("e_x", &state.e_x),
        ("e_y", &state.e_y),
        ("e_z", &state.e_z),
    ];
    for (field, m) in fields {
        if m.iter().any(|v| !v.is_finite()) || m.amax() > DIVERGENCE_LIMIT {
            return Err(SparkleError::Diverged { iteration: k, field });
        }
    }
    Ok(())
}

/// Residuals of the mean dynamics over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanIdentityResiduals {
    /// `|x̄ᵏ⁺¹ − (x̄ᵏ − α r̄ᵏ⁺¹)|∞`.
    pub x: f64,
    /// `|ȳᵏ⁺¹ − (ȳᵏ − β v̄ᵏ)|∞`.
    pub y: f64,
    /// `|z̄ᵏ⁺¹ − (z̄ᵏ − γ p̄ᵏ)|∞`.
    pub z: f64,
    /// `max_s |1ᵀe_s|∞` after the step.
    pub dual: f64,
}

impl MeanIdentityResiduals {
    pub fn max(&self) -> f64 {
        self.x.max(self.y).max(self.z).max(self.dual)
    }
}

pub fn mean_identity_residuals(before: &SwarmState, after: &SwarmState, rec: &StepRecord) -> MeanIdentityResiduals {
    let x = (column_mean(&after.x) - (column_mean(&before.x) - column_mean(&after.r) * rec.alpha)).amax();
    let y = (column_mean(&after.y) - (column_mean(&before.y) - &rec.v_mean * rec.beta)).amax();
    let z = (column_mean(&after.z) - (column_mean(&before.z) - &rec.p_mean * rec.gamma)).amax();
    let dual = [&after.e_x, &after.e_y, &after.e_z]
        .iter()
        .map(|e| e.column_sum().amax())
        .fold(0.0, f64::max);
    MeanIdentityResiduals { x, y, z, dual }
}
