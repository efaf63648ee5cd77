//! Experiment configuration files.
//!
//! A config is TOML with five sections. Every key is optional; omitted keys
//! take the defaults below. Unknown keys are rejected.
//!
//! ```toml
//! [problem]
//! family = "synthetic"        # synthetic | policy_eval | single_level
//! n = 10
//!
//! [topology]
//! kind = "ring_adjusted"      # complete | ring_adjusted | five_peer | torus | custom
//! a = 0.5
//!
//! [strategy]
//! upper = "ed"
//! lower = "ed"
//!
//! [hyperparams]
//! alpha = 0.02
//! beta = { c0 = 1.0, c1 = 500.0, c2 = 0.01 }
//!
//! [run]
//! master_seed = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparkle_core::engine::{Hyperparams, StepSchedule, Stepper};
use sparkle_core::problems::OracleMode;
use sparkle_core::strategy::Strategy;

use crate::error::{CliError, ConfigIssue};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub topology: TopologySection,
    pub strategy: StrategySection,
    pub hyperparams: HyperparamSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_p")]
        p: usize,
        #[serde(default = "default_q")]
        q: usize,
        #[serde(default = "default_sigma_g")]
        sigma_g: f64,
        #[serde(default = "default_sigma_h")]
        sigma_h: f64,
        #[serde(default = "default_c_r")]
        c_r: f64,
        #[serde(default)]
        seed: u64,
    },
    PolicyEval {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_num_states")]
        num_states: usize,
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_discount")]
        discount: f64,
        #[serde(default = "default_reward_noise")]
        reward_noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    SingleLevel {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_p")]
        dim: usize,
        #[serde(default = "one")]
        q: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_n() -> usize {
    10
}
fn default_p() -> usize {
    20
}
fn default_q() -> usize {
    10
}
fn default_sigma_g() -> f64 {
    0.001
}
fn default_sigma_h() -> f64 {
    0.1
}
fn default_c_r() -> f64 {
    0.001
}
fn default_num_states() -> usize {
    200
}
fn default_features() -> usize {
    10
}
fn default_discount() -> f64 {
    0.95
}
fn default_reward_noise() -> f64 {
    0.02
}
fn one() -> usize {
    1
}
fn default_spread() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Synthetic {
            n: default_n(),
            p: default_p(),
            q: default_q(),
            sigma_g: default_sigma_g(),
            sigma_h: default_sigma_h(),
            c_r: default_c_r(),
            seed: 0,
        }
    }
}

impl ProblemConfig {
    pub fn n(&self) -> usize {
        match self {
            ProblemConfig::Synthetic { n, .. } | ProblemConfig::PolicyEval { n, .. } | ProblemConfig::SingleLevel { n, .. } => *n,
        }
    }

    pub fn set_n(&mut self, value: usize) {
        match self {
            ProblemConfig::Synthetic { n, .. } | ProblemConfig::PolicyEval { n, .. } | ProblemConfig::SingleLevel { n, .. } => *n = value,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ProblemConfig::Synthetic { .. } => "synthetic",
            ProblemConfig::PolicyEval { .. } => "policy_eval",
            ProblemConfig::SingleLevel { .. } => "single_level",
        }
    }
}

/// Graph of one level. Which keys apply depends on `kind`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Self weight of `ring_adjusted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Target `ρ` of `ring_adjusted`, as an alternative to `a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    /// Weight file of `custom`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Shared topology plus optional per-level overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<TopologySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<TopologySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<TopologySpec>,
}

impl Default for TopologySection {
    fn default() -> Self {
        Self {
            kind: Some("ring_adjusted".into()),
            a: Some(0.5),
            rho: None,
            rows: None,
            cols: None,
            path: None,
            upper: None,
            lower: None,
            aux: None,
        }
    }
}

impl TopologySection {
    pub fn shared(&self) -> TopologySpec {
        TopologySpec {
            kind: self.kind.clone(),
            a: self.a,
            rho: self.rho,
            rows: self.rows,
            cols: self.cols,
            path: self.path.clone(),
        }
    }

    /// Replace the shared graph and drop every override.
    pub fn set_shared(&mut self, spec: TopologySpec) {
        *self = TopologySection {
            kind: spec.kind,
            a: spec.a,
            rho: spec.rho,
            rows: spec.rows,
            cols: spec.cols,
            path: spec.path,
            upper: None,
            lower: None,
            aux: None,
        };
    }

    /// `(key prefix, spec)` for the upper, lower and auxiliary levels.
    pub fn levels(&self) -> [(String, TopologySpec); 3] {
        let pick = |name: &str, o: &Option<TopologySpec>| match o {
            Some(spec) => (format!("topology.{name}"), spec.clone()),
            None => ("topology".to_string(), self.shared()),
        };
        [pick("upper", &self.upper), pick("lower", &self.lower), pick("aux", &self.aux)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub upper: String,
    pub lower: String,
    /// Defaults to `lower`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux: Option<String>,
    /// Replace `W` by `(I + W)/2` for ED and EXTRA when `W` is not positive definite.
    pub pd_shift: bool,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            upper: "ed".into(),
            lower: "ed".into(),
            aux: None,
            pd_shift: true,
        }
    }
}

impl StrategySection {
    pub fn set_all(&mut self, name: &str) {
        self.upper = name.to_string();
        self.lower = name.to_string();
        self.aux = None;
    }
}

/// A step size: a number, or `{ c0, c1, c2 }` for `c0 / (c1 + c2·k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepConfig {
    Constant(f64),
    Schedule {
        c0: f64,
        c1: f64,
        #[serde(default)]
        c2: f64,
    },
}

impl From<StepConfig> for StepSchedule {
    fn from(s: StepConfig) -> Self {
        match s {
            StepConfig::Constant(v) => StepSchedule::Constant(v),
            StepConfig::Schedule { c0, c1, c2 } => StepSchedule::Decaying { c0, c1, c2 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperparamSection {
    pub alpha: StepConfig,
    pub beta: StepConfig,
    pub gamma: StepConfig,
    pub theta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// `stochastic` or `deterministic`.
    pub mode: String,
}

impl Default for HyperparamSection {
    fn default() -> Self {
        Self {
            alpha: StepConfig::Constant(0.02),
            beta: StepConfig::Constant(0.001),
            gamma: StepConfig::Constant(0.001),
            theta: 0.5,
            iterations: 3000,
            batch_size: 10,
            mode: "stochastic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub master_seed: u64,
    pub replicates: usize,
    pub metrics_stride: usize,
    /// Output directory.
    pub output: PathBuf,
    /// `generic` or `recursive`.
    pub engine: String,
    /// Fill the `wall_ns` column; off by default so output is reproducible.
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            master_seed: 0,
            replicates: 1,
            metrics_stride: 10,
            output: PathBuf::from("results"),
            engine: "generic".into(),
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![ConfigIssue::new("config", e.message().trim())]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Read a config file. Relative custom-topology paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![ConfigIssue::new("--config", format!("cannot read {}: {e}", path.display()))]))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        };
        fix(&mut cfg.topology.path);
        for spec in [&mut cfg.topology.upper, &mut cfg.topology.lower, &mut cfg.topology.aux].into_iter().flatten() {
            fix(&mut spec.path);
        }
        Ok(cfg)
    }

    /// Strategies of the upper, lower and auxiliary levels, or the issues
    /// naming every unknown key.
    pub fn strategies(&self) -> Result<[Strategy; 3], Vec<ConfigIssue>> {
        let aux = self.strategy.aux.clone().unwrap_or_else(|| self.strategy.lower.clone());
        let mut issues = Vec::new();
        let mut parse = |key: &'static str, name: &str| match name.parse::<Strategy>() {
            Ok(s) => Some(s),
            Err(e) => {
                issues.push(ConfigIssue::new(key, e.to_string()));
                None
            }
        };
        let upper = parse("strategy.upper", &self.strategy.upper);
        let lower = parse("strategy.lower", &self.strategy.lower);
        let aux = parse(if self.strategy.aux.is_some() { "strategy.aux" } else { "strategy.lower" }, &aux);
        match (upper, lower, aux) {
            (Some(u), Some(l), Some(a)) => Ok([u, l, a]),
            _ => {
                issues.dedup();
                Err(issues)
            }
        }
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, Vec<ConfigIssue>> {
        let h = &self.hyperparams;
        let mut issues = Vec::new();
        let mode = match h.mode.as_str() {
            "stochastic" => OracleMode::Stochastic,
            "deterministic" => OracleMode::Deterministic,
            other => {
                issues.push(ConfigIssue::new(
                    "hyperparams.mode",
                    format!("unknown mode `{other}` (expected stochastic or deterministic)"),
                ));
                OracleMode::Stochastic
            }
        };
        let hp = Hyperparams {
            alpha: h.alpha.into(),
            beta: h.beta.into(),
            gamma: h.gamma.into(),
            theta: h.theta,
            iterations: h.iterations,
            batch_size: h.batch_size,
            mode,
        };
        issues.extend(hp.issues().iter().map(|e| ConfigIssue::from_core("hyperparams", e)));
        if h.iterations == 0 {
            issues.push(ConfigIssue::new("hyperparams.iterations", "must be at least 1"));
        }
        if issues.is_empty() {
            Ok(hp)
        } else {
            Err(issues)
        }
    }

    pub fn stepper(&self) -> Result<Stepper, ConfigIssue> {
        match self.run.engine.as_str() {
            "generic" => Ok(Stepper::Generic),
            "recursive" => Ok(Stepper::Recursive),
            other => Err(ConfigIssue::new(
                "run.engine",
                format!("unknown engine `{other}` (expected generic or recursive)"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.problem.n(), 10);
        assert_eq!(cfg.hyperparams.iterations, 3000);
        assert_eq!(cfg.run.metrics_stride, 10);
    }

    #[test]
    fn family_specific_defaults() {
        let cfg = ExperimentConfig::from_toml("[problem]\nfamily = \"policy_eval\"\nn = 4\n").unwrap();
        match cfg.problem {
            ProblemConfig::PolicyEval { n, num_states, discount, .. } => {
                assert_eq!((n, num_states, discount), (4, 200, 0.95));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedules_parse_in_both_forms() {
        let cfg = ExperimentConfig::from_toml("[hyperparams]\nalpha = 0.1\nbeta = { c0 = 1.0, c1 = 500.0, c2 = 0.01 }\n").unwrap();
        assert_eq!(cfg.hyperparams.alpha, StepConfig::Constant(0.1));
        assert_eq!(StepSchedule::from(cfg.hyperparams.beta).at(100), 1.0 / 501.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[run]\nseeed = 3\n").unwrap_err();
        assert!(err.to_string().contains("seeed"), "{err}");
        assert!(ExperimentConfig::from_toml("[problem]\nfamily = \"synthetic\"\nstates = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[topology.upper]\nweight = 3\n").is_err());
    }

    #[test]
    fn bad_strategy_names_the_key() {
        let cfg = ExperimentConfig::from_toml("[strategy]\nlower = \"gossip\"\n").unwrap();
        let issues = cfg.strategies().unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].key, "strategy.lower");
    }

    #[test]
    fn aux_strategy_follows_lower() {
        let cfg = ExperimentConfig::from_toml("[strategy]\nupper = \"atc-gt\"\nlower = \"extra\"\n").unwrap();
        assert_eq!(cfg.strategies().unwrap(), [Strategy::AtcGt, Strategy::Extra, Strategy::Extra]);
    }

    #[test]
    fn level_overrides_take_precedence() {
        let cfg = ExperimentConfig::from_toml("[topology]\nkind = \"complete\"\n[topology.lower]\nkind = \"five_peer\"\n").unwrap();
        let levels = cfg.topology.levels();
        assert_eq!(levels[0].1.kind.as_deref(), Some("complete"));
        assert_eq!(levels[1].0, "topology.lower");
        assert_eq!(levels[1].1.kind.as_deref(), Some("five_peer"));
    }

    mod round_trip {
        use super::*;
        use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Just, Strategy as Gen};

        fn step() -> impl Gen<Value = StepConfig> {
            prop_oneof![
                (1e-6..1.0f64).prop_map(StepConfig::Constant),
                (0.01..10.0f64, 1.0..1e4f64, 0.0..1.0f64).prop_map(|(c0, c1, c2)| StepConfig::Schedule { c0, c1, c2 }),
            ]
        }

        fn problem() -> impl Gen<Value = ProblemConfig> {
            prop_oneof![
                (1..64usize, 1..40usize, 1..40usize, 0.0..2.0f64, any::<u64>()).prop_map(|(n, p, q, sigma_g, seed)| {
                    ProblemConfig::Synthetic { n, p, q, sigma_g, sigma_h: 0.1, c_r: 1e-3, seed }
                }),
                (1..64usize, 2..300usize, 1..20usize, 0.0..0.999f64).prop_map(|(n, num_states, features, discount)| {
                    ProblemConfig::PolicyEval { n, num_states, features, discount, reward_noise_std: 0.1, seed: 3 }
                }),
                (1..64usize, 1..30usize, 1..5usize, 0.1..3.0f64).prop_map(|(n, dim, q, spread)| {
                    ProblemConfig::SingleLevel { n, dim, q, spread, noise_std: 0.0, seed: 1 }
                }),
            ]
        }

        fn spec() -> impl Gen<Value = TopologySpec> {
            (
                proptest::option::of(prop_oneof![Just("ring"), Just("complete"), Just("grid")]),
                proptest::option::of(0.0..1.0f64),
                proptest::option::of(1..9usize),
            )
                .prop_map(|(kind, a, rows)| TopologySpec {
                    kind: kind.map(String::from),
                    a,
                    rows,
                    cols: rows,
                    ..Default::default()
                })
        }

        proptest! {
            #[test]
            fn serialize_then_parse_is_identity(
                problem in problem(),
                shared in spec(),
                lower in proptest::option::of(spec()),
                alpha in step(),
                beta in step(),
                theta in 0.01..1.0f64,
                aux in proptest::option::of(Just("atc-gt".to_string())),
                seed in any::<u64>(),
                replicates in 1..10usize,
            ) {
                let mut cfg = ExperimentConfig { problem, ..Default::default() };
                cfg.topology.set_shared(shared);
                cfg.topology.lower = lower;
                cfg.strategy.aux = aux;
                cfg.hyperparams.alpha = alpha;
                cfg.hyperparams.beta = beta;
                cfg.hyperparams.theta = theta;
                cfg.run.master_seed = seed;
                cfg.run.replicates = replicates;
                let text = cfg.to_toml();
                prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{}", text);
            }
        }
    }
}
