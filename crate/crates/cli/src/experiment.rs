//! Turning a parsed config into problem, topologies and engine settings.

use std::path::Path;

use nalgebra::DMatrix;
use sparkle_core::engine::{Hyperparams, LevelPlan, LevelPlans, Stepper};
use sparkle_core::problems::{
    make_policy_eval, make_single_level, make_synthetic_bilevel, BilevelProblem, PolicyEvalParams, QuadraticObjective,
    SyntheticParams,
};
use sparkle_core::strategy::Strategy;
use sparkle_core::topology::{build_topology, ring_weight_for_rho, MixingMatrix, TopologyKind};

use crate::config::{ExperimentConfig, ProblemConfig, TopologySpec};
use crate::error::{CliError, ConfigIssue};

pub type DynProblem = dyn BilevelProblem + Send + Sync;

/// A fully validated experiment, ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: Box<DynProblem>,
    /// Mixing matrices of the upper, lower and auxiliary levels as configured.
    pub mixing: [MixingMatrix; 3],
    pub strategies: [Strategy; 3],
    pub plans: LevelPlans,
    pub hyperparams: Hyperparams,
    pub stepper: Stepper,
}

impl Experiment {
    /// Validate every section and build the experiment. All problems found
    /// are reported together.
    pub fn resolve(config: ExperimentConfig) -> Result<Self, CliError> {
        let mut issues = Vec::new();
        let problem = build_problem(&config.problem).map_err(|i| issues.push(i)).ok();
        let n = config.problem.n();

        let mut mixing = Vec::with_capacity(3);
        for (key, spec) in config.topology.levels() {
            match build_mixing(&key, &spec, n) {
                Ok(w) => mixing.push(w),
                Err(issue) => {
                    if !issues.contains(&issue) {
                        issues.push(issue);
                    }
                }
            }
        }
        let strategies = config.strategies().map_err(|i| issues.extend(i)).ok();
        let hyperparams = config.hyperparams().map_err(|i| issues.extend(i)).ok();
        let stepper = config.stepper().map_err(|i| issues.push(i)).ok();
        if config.run.replicates == 0 {
            issues.push(ConfigIssue::new("run.replicates", "must be at least 1"));
        }
        if config.run.metrics_stride == 0 {
            issues.push(ConfigIssue::new("run.metrics_stride", "must be at least 1"));
        }

        let plans = match (&strategies, mixing.len()) {
            (Some(s), 3) => {
                let keys = ["strategy.upper", "strategy.lower", "strategy.aux"];
                let built: Vec<_> = (0..3)
                    .map(|l| LevelPlan::new(s[l], &mixing[l], config.strategy.pd_shift).map_err(|e| ConfigIssue::from_core(keys[l], &e)))
                    .collect();
                match built.iter().find_map(|b| b.as_ref().err()) {
                    Some(issue) => {
                        issues.push(issue.clone());
                        None
                    }
                    None => {
                        let mut it = built.into_iter().map(|b| b.unwrap());
                        Some(LevelPlans {
                            upper: it.next().unwrap(),
                            lower: it.next().unwrap(),
                            aux: it.next().unwrap(),
                        })
                    }
                }
            }
            _ => None,
        };
        if let (Some(s), Some(Stepper::Recursive)) = (&strategies, stepper) {
            if s.contains(&Strategy::DgdBaseline) {
                issues.push(ConfigIssue::new("run.engine", "the recursive engine has no form for the dgd baseline"));
            }
        }

        if !issues.is_empty() {
            return Err(CliError::Config(issues));
        }
        let mixing: [MixingMatrix; 3] = mixing.try_into().expect("three levels");
        Ok(Self {
            config,
            problem: problem.unwrap(),
            mixing,
            strategies: strategies.unwrap(),
            plans: plans.unwrap(),
            hyperparams: hyperparams.unwrap(),
            stepper: stepper.unwrap(),
        })
    }
}

pub fn build_problem(cfg: &ProblemConfig) -> Result<Box<DynProblem>, ConfigIssue> {
    let wrap = |e: sparkle_core::SparkleError| ConfigIssue::from_core("problem", &e);
    Ok(match *cfg {
        ProblemConfig::Synthetic {
            n,
            p,
            q,
            sigma_g,
            sigma_h,
            c_r,
            seed,
        } => Box::new(
            make_synthetic_bilevel(&SyntheticParams {
                n,
                p,
                q,
                sigma_g,
                sigma_h,
                c_r,
                seed,
            })
            .map_err(wrap)?,
        ),
        ProblemConfig::PolicyEval {
            n,
            num_states,
            features,
            discount,
            reward_noise_std,
            seed,
        } => Box::new(
            make_policy_eval(&PolicyEvalParams {
                n,
                num_states,
                features,
                discount,
                reward_noise_std,
                seed,
            })
            .map_err(wrap)?,
        ),
        ProblemConfig::SingleLevel {
            n,
            dim,
            q,
            spread,
            noise_std,
            seed,
        } => {
            let inner = QuadraticObjective::random(n, dim, spread, noise_std, seed).map_err(wrap)?;
            Box::new(make_single_level(inner, q).map_err(wrap)?)
        }
    })
}

/// Graph family and parameters of `spec`, checking that only keys used by
/// the kind are present.
pub fn topology_kind(key: &str, spec: &TopologySpec, n: usize) -> Result<TopologyKind, ConfigIssue> {
    let kind = spec
        .kind
        .as_deref()
        .ok_or_else(|| ConfigIssue::new(format!("{key}.kind"), "missing graph kind"))?;
    let allowed: &[&str] = match kind {
        "complete" | "five_peer" => &[],
        "ring_adjusted" => &["a", "rho"],
        "torus" => &["rows", "cols"],
        "custom" => &["path"],
        other => {
            return Err(ConfigIssue::new(
                format!("{key}.kind"),
                format!("unknown graph kind `{other}` (expected complete, ring_adjusted, five_peer, torus or custom)"),
            ))
        }
    };
    let present = [
        ("a", spec.a.is_some()),
        ("rho", spec.rho.is_some()),
        ("rows", spec.rows.is_some()),
        ("cols", spec.cols.is_some()),
        ("path", spec.path.is_some()),
    ];
    if let Some((name, _)) = present.iter().find(|(name, set)| *set && !allowed.contains(name)) {
        return Err(ConfigIssue::new(format!("{key}.{name}"), format!("not used by graph kind `{kind}`")));
    }
    Ok(match kind {
        "complete" => TopologyKind::Complete,
        "five_peer" => TopologyKind::FivePeer,
        "ring_adjusted" => match (spec.a, spec.rho) {
            (Some(a), None) => TopologyKind::RingAdjusted { a },
            (None, Some(rho)) => TopologyKind::RingAdjusted {
                a: ring_weight_for_rho(n, rho).map_err(|e| ConfigIssue::new(format!("{key}.rho"), e.to_string()))?,
            },
            (Some(_), Some(_)) => return Err(ConfigIssue::new(format!("{key}.rho"), "give either `a` or `rho`, not both")),
            (None, None) => return Err(ConfigIssue::new(format!("{key}.a"), "ring_adjusted needs `a` or `rho`")),
        },
        "torus" => match (spec.rows, spec.cols) {
            (Some(rows), Some(cols)) => TopologyKind::Torus { rows, cols },
            _ => return Err(ConfigIssue::new(format!("{key}.rows"), "torus needs both `rows` and `cols`")),
        },
        _ => {
            let path = spec.path.as_ref().expect("checked above");
            let w = read_weights(path).map_err(|m| ConfigIssue::new(format!("{key}.path"), m))?;
            TopologyKind::Custom(w)
        }
    })
}

pub fn build_mixing(key: &str, spec: &TopologySpec, n: usize) -> Result<MixingMatrix, ConfigIssue> {
    let kind = topology_kind(key, spec, n)?;
    let field = match kind {
        TopologyKind::RingAdjusted { .. } if spec.rho.is_some() => "rho",
        TopologyKind::RingAdjusted { .. } => "a",
        TopologyKind::Torus { .. } => "rows",
        TopologyKind::Custom(_) => "path",
        _ => "kind",
    };
    build_topology(&kind, n).map_err(|e| ConfigIssue::new(format!("{key}.{field}"), e.to_string()))
}

/// Read a weight file: the agent count on the first line, then one
/// whitespace-separated row per line. `#` starts a comment.
pub fn read_weights(path: &Path) -> Result<DMatrix<f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_weights(&text)
}

pub fn parse_weights(text: &str) -> Result<DMatrix<f64>, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (first, header) = lines.next().ok_or("empty weight file")?;
    let n: usize = header
        .parse()
        .map_err(|_| format!("line {first}: expected the agent count, found `{header}`"))?;
    if n == 0 {
        return Err(format!("line {first}: agent count must be positive"));
    }
    let mut w = DMatrix::zeros(n, n);
    for row in 0..n {
        let (line_no, line) = lines.next().ok_or_else(|| format!("expected {n} rows, found {row}"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {line_no}: `{t}` is not a number")))
            .collect::<Result<_, _>>()?;
        if vals.len() != n {
            return Err(format!("line {line_no}: expected {n} entries, found {}", vals.len()));
        }
        for (j, v) in vals.into_iter().enumerate() {
            w[(row, j)] = v;
        }
    }
    if let Some((line_no, _)) = lines.next() {
        return Err(format!("line {line_no}: trailing data after {n} rows"));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_file_round_trip() {
        let w = parse_weights("# three agents\n3\n0.5 0.25 0.25\n0.25 0.5 0.25 # row 2\n0.25 0.25 0.5\n").unwrap();
        assert_eq!(w[(1, 1)], 0.5);
        assert_eq!(w.row(2).sum(), 1.0);
    }

    #[test]
    fn malformed_weight_files_are_reported() {
        assert!(parse_weights("").unwrap_err().contains("empty"));
        assert!(parse_weights("2\n1 0\n").unwrap_err().contains("expected 2 rows"));
        assert!(parse_weights("2\n1 0\n0 x\n").unwrap_err().contains("`x`"));
        assert!(parse_weights("2\n1 0 0\n0 1\n").unwrap_err().contains("expected 2 entries"));
        assert!(parse_weights("1\n1\n1\n").unwrap_err().contains("trailing"));
    }

    #[test]
    fn stray_topology_keys_are_named() {
        let spec = TopologySpec {
            kind: Some("complete".into()),
            a: Some(0.3),
            ..Default::default()
        };
        assert_eq!(topology_kind("topology", &spec, 4).unwrap_err().key, "topology.a");
    }

    #[test]
    fn unreachable_rho_is_a_config_error() {
        let spec = TopologySpec {
            kind: Some("ring_adjusted".into()),
            rho: Some(0.647),
            ..Default::default()
        };
        assert_eq!(build_mixing("topology", &spec, 10).unwrap_err().key, "topology.rho");
        let ok = TopologySpec { rho: Some(0.9), ..spec };
        assert!((build_mixing("topology", &ok, 10).unwrap().rho() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn all_problems_are_reported_together() {
        let cfg = ExperimentConfig::from_toml("[strategy]\nupper = \"nope\"\n[hyperparams]\ntheta = 2.0\n[run]\nreplicates = 0\n").unwrap();
        match Experiment::resolve(cfg) {
            Err(CliError::Config(issues)) => {
                let keys: Vec<_> = issues.iter().map(|i| i.key.as_str()).collect();
                assert!(keys.contains(&"strategy.upper"), "{keys:?}");
                assert!(keys.contains(&"hyperparams.theta"), "{keys:?}");
                assert!(keys.contains(&"run.replicates"), "{keys:?}");
            }
            other => panic!("{:?}", other.err()),
        }
    }
}
