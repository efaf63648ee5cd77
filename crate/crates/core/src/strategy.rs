//! Heterogeneity-correction strategies expressed as `(A, B², C)` triples.
//!
//! Every strategy is a matrix polynomial in the mixing matrix `W`. The dual
//! correction only ever enters the primal update through `B·d`, so the
//! engine carries `e = B·d` and only `B²` is stored here.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Result, SparkleError};
use crate::topology::{mix, symmetrize_mean, MixingMatrix, STOCHASTIC_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Exact diffusion.
    Ed,
    Extra,
    /// Adapt-then-combine gradient tracking.
    AtcGt,
    SemiAtcGt,
    NonAtcGt,
    /// Plain diffusion without correction, kept as a baseline.
    DgdBaseline,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Ed,
        Strategy::Extra,
        Strategy::AtcGt,
        Strategy::SemiAtcGt,
        Strategy::NonAtcGt,
        Strategy::DgdBaseline,
    ];

    pub const CORRECTED: [Strategy; 5] = [
        Strategy::Ed,
        Strategy::Extra,
        Strategy::AtcGt,
        Strategy::SemiAtcGt,
        Strategy::NonAtcGt,
    ];

    /// Name used in configuration files.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ed => "ed",
            Strategy::Extra => "extra",
            Strategy::AtcGt => "atc-gt",
            Strategy::SemiAtcGt => "semi-atc-gt",
            Strategy::NonAtcGt => "non-atc-gt",
            Strategy::DgdBaseline => "dgd",
        }
    }

    /// ED and EXTRA are analysed with a positive definite `W`.
    pub fn wants_positive_definite(self) -> bool {
        matches!(self, Strategy::Ed | Strategy::Extra)
    }

    pub fn uses_dual(self) -> bool {
        self != Strategy::DgdBaseline
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SparkleError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| SparkleError::UnknownStrategy(s.into()))
    }
}

/// Communication matrices of one optimization level.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyMatrices {
    pub a_mat: DMatrix<f64>,
    pub b_sq: DMatrix<f64>,
    pub c_mat: DMatrix<f64>,
    pub strategy: Strategy,
    pub uses_dual: bool,
}

/// The `(A, B², C)` triple of `strategy` over `w`.
pub fn strategy_matrices(strategy: Strategy, w: &MixingMatrix) -> StrategyMatrices {
    let n = w.n();
    let id = DMatrix::<f64>::identity(n, n);
    let wm = w.weights().clone();
    let square = |m: &DMatrix<f64>| {
        let mut sq = mix(m, m);
        symmetrize_mean(&mut sq);
        sq
    };
    let w2 = square(&wm);
    let lap = &id - &wm;
    let lap2 = square(&lap);
    let (a_mat, b_sq, c_mat) = match strategy {
        Strategy::Ed => (wm.clone(), lap, wm),
        Strategy::Extra => (id, lap, wm),
        Strategy::AtcGt => (w2.clone(), lap2, w2),
        Strategy::SemiAtcGt => (wm, lap2, w2),
        Strategy::NonAtcGt => (id, lap2, w2),
        Strategy::DgdBaseline => (wm.clone(), DMatrix::zeros(n, n), wm),
    };
    StrategyMatrices {
        a_mat,
        b_sq,
        c_mat,
        strategy,
        uses_dual: strategy.uses_dual(),
    }
}

impl StrategyMatrices {
    /// Check the structural invariants of the triple.
    pub fn validate(&self) -> Result<()> {
        let n = self.a_mat.nrows();
        for (name, m) in [("a_mat", &self.a_mat), ("b_sq", &self.b_sq), ("c_mat", &self.c_mat)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(SparkleError::Validation {
                    check: "shape",
                    detail: format!("{name} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols()),
                });
            }
        }
        for (name, m) in [("a_mat", &self.a_mat), ("c_mat", &self.c_mat)] {
            let err = max_stochastic_error(m);
            if err > STOCHASTIC_TOL {
                return Err(SparkleError::Validation {
                    check: "doubly_stochastic",
                    detail: format!("{name} row/column sums off by {err:e}"),
                });
            }
        }
        let null_err = (0..n).map(|i| libm::fabs(self.b_sq.row(i).sum())).fold(0.0, f64::max);
        if null_err > STOCHASTIC_TOL {
            return Err(SparkleError::Validation {
                check: "b_sq_null_space",
                detail: format!("|B²·1| = {null_err:e}"),
            });
        }
        let asym = (&self.b_sq - self.b_sq.transpose()).amax();
        if asym > STOCHASTIC_TOL {
            return Err(SparkleError::Validation {
                check: "b_sq_symmetry",
                detail: format!("max asymmetry {asym:e}"),
            });
        }
        let min_eig = self.b_sq.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(SparkleError::Validation {
                check: "b_sq_psd",
                detail: format!("smallest eigenvalue {min_eig:e}"),
            });
        }
        if !self.uses_dual && self.b_sq.amax() != 0.0 {
            return Err(SparkleError::Validation {
                check: "b_sq_zero_without_dual",
                detail: format!("baseline carries a nonzero B² ({:e})", self.b_sq.amax()),
            });
        }
        Ok(())
    }
}

fn max_stochastic_error(m: &DMatrix<f64>) -> f64 {
    let rows = (0..m.nrows()).map(|i| libm::fabs(m.row(i).sum() - 1.0));
    let cols = (0..m.ncols()).map(|j| libm::fabs(m.column(j).sum() - 1.0));
    rows.chain(cols).fold(0.0, f64::max)
}

/// Placement of mixing in a gradient-tracking recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerPlacement {
    /// `s⁺ = W(s − h)`, `h⁺ = W(h + Δg)`.
    Atc,
    /// `s⁺ = Ws − h`, `h⁺ = W(h + Δg)`.
    SemiAtc,
    /// `s⁺ = Ws − h`, `h⁺ = Wh + Δg`.
    NonAtc,
}

impl TrackerPlacement {
    /// Whether the iterate step is mixed after subtracting the tracker.
    pub fn mixes_step(self) -> bool {
        self == TrackerPlacement::Atc
    }

    /// Whether the tracker increment is mixed together with the tracker.
    pub fn mixes_increment(self) -> bool {
        self != TrackerPlacement::NonAtc
    }

    /// Whether the initial tracker is `W·g⁰` rather than `g⁰`.
    pub fn mixes_initial(self) -> bool {
        self != TrackerPlacement::NonAtc
    }
}

/// Efficient per-level recursion equivalent to a corrected strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecursionForm {
    /// `s⁺ = W(2s − s⁻ − Δg)` when `mix_gradient`, else `W(2s − s⁻) − Δg`.
    TwoStep { mix_gradient: bool },
    Tracker(TrackerPlacement),
}

pub fn recursion_form(strategy: Strategy) -> Result<RecursionForm> {
    Ok(match strategy {
        Strategy::Ed => RecursionForm::TwoStep { mix_gradient: true },
        Strategy::Extra => RecursionForm::TwoStep { mix_gradient: false },
        Strategy::AtcGt => RecursionForm::Tracker(TrackerPlacement::Atc),
        Strategy::SemiAtcGt => RecursionForm::Tracker(TrackerPlacement::SemiAtc),
        Strategy::NonAtcGt => RecursionForm::Tracker(TrackerPlacement::NonAtc),
        Strategy::DgdBaseline => return Err(SparkleError::NoRecursionForm(strategy)),
    })
}

/// The mixing matrix a level should run with.
///
/// ED and EXTRA levels whose `W` is not strictly positive definite are
/// switched to `(I + W) / 2` when `pd_shift` is set. Returns the matrix and
/// whether the shift happened.
pub fn effective_mixing(strategy: Strategy, w: &MixingMatrix, pd_shift: bool) -> Result<(MixingMatrix, bool)> {
    if pd_shift && strategy.wants_positive_definite() && !w.is_positive_definite() {
        log::info!(
            "{strategy}: lambda_min(W) = {:.3e} <= 0, using (I + W)/2",
            w.lambda_min()
        );
        return Ok((w.lazy()?, true));
    }
    Ok((w.clone(), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_topology, TopologyKind};

    fn ring(n: usize, a: f64) -> MixingMatrix {
        build_topology(&TopologyKind::RingAdjusted { a }, n).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("gt".parse::<Strategy>(), Err(SparkleError::UnknownStrategy(_))));
    }

    #[test]
    fn ed_on_complete_graph() {
        let w = build_topology(&TopologyKind::Complete, 4).unwrap();
        let m = strategy_matrices(Strategy::Ed, &w);
        let avg = DMatrix::from_element(4, 4, 0.25);
        assert!((&m.a_mat - &avg).amax() < 1e-15);
        assert!((&m.c_mat - &avg).amax() < 1e-15);
        assert!((&m.b_sq - (DMatrix::identity(4, 4) - avg)).amax() < 1e-15);
        m.validate().unwrap();
    }

    #[test]
    fn atc_gt_b_sq_annihilates_ones() {
        let w = ring(10, 0.4);
        let m = strategy_matrices(Strategy::AtcGt, &w);
        // Oracle: (I - W)² by explicit loops.
        let wm = w.weights();
        let mut lap = DMatrix::<f64>::zeros(10, 10);
        for i in 0..10 {
            for j in 0..10 {
                lap[(i, j)] = if i == j { 1.0 } else { 0.0 } - wm[(i, j)];
            }
        }
        let mut expected = DMatrix::<f64>::zeros(10, 10);
        for i in 0..10 {
            for j in 0..10 {
                expected[(i, j)] = (0..10).map(|k| lap[(i, k)] * lap[(k, j)]).sum();
            }
        }
        assert!((&m.b_sq - &expected).amax() < 1e-14);
        for i in 0..10 {
            assert!(m.b_sq.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn leading_matrix_is_twice_w() {
        let w = ring(9, 0.3);
        let n = w.n();
        let two_w = w.weights() * 2.0;
        for s in Strategy::CORRECTED {
            let m = strategy_matrices(s, &w);
            let lead = DMatrix::identity(n, n) - &m.b_sq + &m.c_mat;
            assert!((&lead - &two_w).amax() < 1e-12, "{s}");
        }
    }

    #[test]
    fn triples_are_valid_and_commute_with_w() {
        let w = ring(12, 0.25);
        for s in Strategy::ALL {
            let m = strategy_matrices(s, &w);
            m.validate().unwrap();
            let wm = w.weights();
            for x in [&m.a_mat, &m.b_sq, &m.c_mat] {
                assert!((x * wm - wm * x).amax() < 1e-10, "{s}");
            }
        }
        assert!(!strategy_matrices(Strategy::DgdBaseline, &w).uses_dual);
    }

    #[test]
    fn broken_triple_is_rejected() {
        let w = ring(5, 0.5);
        let mut m = strategy_matrices(Strategy::Ed, &w);
        m.b_sq[(0, 0)] += 0.1;
        assert!(matches!(m.validate(), Err(SparkleError::Validation { check: "b_sq_null_space", .. })));
        let mut m = strategy_matrices(Strategy::DgdBaseline, &w);
        m.b_sq = strategy_matrices(Strategy::Ed, &w).b_sq;
        assert!(m.validate().is_err());
    }

    #[test]
    fn recursion_forms() {
        assert_eq!(recursion_form(Strategy::Ed).unwrap(), RecursionForm::TwoStep { mix_gradient: true });
        assert_eq!(recursion_form(Strategy::Extra).unwrap(), RecursionForm::TwoStep { mix_gradient: false });
        assert_eq!(
            recursion_form(Strategy::AtcGt).unwrap(),
            RecursionForm::Tracker(TrackerPlacement::Atc)
        );
        assert_eq!(
            recursion_form(Strategy::NonAtcGt).unwrap(),
            RecursionForm::Tracker(TrackerPlacement::NonAtc)
        );
        assert!(matches!(
            recursion_form(Strategy::DgdBaseline),
            Err(SparkleError::NoRecursionForm(Strategy::DgdBaseline))
        ));
    }

    #[test]
    fn pd_shift_only_for_ed_and_extra() {
        let w = ring(16, 1.0 / 3.0);
        let (m, shifted) = effective_mixing(Strategy::Ed, &w, true).unwrap();
        assert!(shifted);
        assert!(m.lambda_min() >= 0.0);
        let (_, shifted) = effective_mixing(Strategy::Ed, &w, false).unwrap();
        assert!(!shifted);
        let (_, shifted) = effective_mixing(Strategy::AtcGt, &w, true).unwrap();
        assert!(!shifted);
        let pd = ring(16, 0.6);
        let (_, shifted) = effective_mixing(Strategy::Extra, &pd, true).unwrap();
        assert!(!shifted);
    }
}
