//! Mixing matrices for the communication graph and their spectral data.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Result, SparkleError};

/// Row/column sums must match 1 to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Eigenvalues this close to 1 in magnitude count as 1.
pub const UNIT_EIGEN_TOL: f64 = 1e-10;

/// Graph families the simulator can build.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyKind {
    /// Uniform averaging, `w[i][j] = 1/n`.
    Complete,
    /// Ring with self weight `a` and `(1 - a) / 2` on each neighbor.
    RingAdjusted { a: f64 },
    /// Weight 0.2 on self and on the two nearest neighbors on each side.
    FivePeer,
    /// Wrap-around grid, weight 1/5 on self and each 4-neighbor.
    Torus { rows: usize, cols: usize },
    /// Caller-supplied weights, validated but never repaired.
    Custom(DMatrix<f64>),
}

/// A validated symmetric doubly stochastic mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    /// Eigenvalues in descending order.
    eigenvalues: Vec<f64>,
    rho: f64,
}

impl MixingMatrix {
    /// Validate `w` and cache its spectrum.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(SparkleError::DimensionMismatch {
                what: "mixing matrix columns",
                expected: w.nrows(),
                found: w.ncols(),
            });
        }
        if w.nrows() == 0 {
            return Err(SparkleError::invalid("n", "mixing matrix must be at least 1x1"));
        }
        let eigenvalues = sorted_eigenvalues(&w)?;
        let report = run_checks(&w, Some(&eigenvalues));
        if let Some(failed) = report.iter().find(|c| !c.passed && !c.informational) {
            return Err(SparkleError::Validation {
                check: failed.name,
                detail: failed.detail.clone(),
            });
        }
        let rho = second_largest_magnitude(&eigenvalues);
        Ok(Self { w, eigenvalues, rho })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `max(|λ₂|, |λₙ|)`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gap(&self) -> f64 {
        1.0 - self.rho
    }

    /// Eigenvalues sorted in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_min(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    /// True when every eigenvalue exceeds [`UNIT_EIGEN_TOL`].
    pub fn is_positive_definite(&self) -> bool {
        self.lambda_min() > UNIT_EIGEN_TOL
    }

    /// The lazy version `(I + W) / 2`, whose spectrum lies in `[0, 1]`.
    pub fn lazy(&self) -> Result<Self> {
        let n = self.n();
        let mut w = (DMatrix::identity(n, n) + &self.w) * 0.5;
        symmetrize_exact(&mut w);
        Self::from_matrix(w)
    }
}

/// Build the mixing matrix of a graph family on `n` agents.
pub fn build_topology(kind: &TopologyKind, n: usize) -> Result<MixingMatrix> {
    if n == 0 {
        return Err(SparkleError::invalid("n", "agent count must be positive"));
    }
    let w = match kind {
        TopologyKind::Complete => DMatrix::from_element(n, n, 1.0 / n as f64),
        TopologyKind::RingAdjusted { a } => {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(SparkleError::invalid("a", format!("ring self weight must lie in (0, 1), got {a}")));
            }
            circulant(n, &[(0, *a), (1, (1.0 - a) / 2.0), (n - 1, (1.0 - a) / 2.0)])
        }
        TopologyKind::FivePeer => {
            if n < 5 {
                return Err(SparkleError::invalid("n", format!("five-peer graph needs n >= 5, got {n}")));
            }
            circulant(n, &[(0, 0.2), (1, 0.2), (2, 0.2), (n - 1, 0.2), (n - 2, 0.2)])
        }
        TopologyKind::Torus { rows, cols } => {
            if rows * cols != n {
                return Err(SparkleError::invalid(
                    "torus",
                    format!("rows * cols = {} does not match n = {n}", rows * cols),
                ));
            }
            torus(*rows, *cols)
        }
        TopologyKind::Custom(w) => {
            if w.nrows() != n {
                return Err(SparkleError::DimensionMismatch {
                    what: "custom mixing matrix rows",
                    expected: n,
                    found: w.nrows(),
                });
            }
            w.clone()
        }
    };
    MixingMatrix::from_matrix(w)
}

/// `1 - ρ(W)`.
pub fn spectral_gap(m: &MixingMatrix) -> f64 {
    m.gap()
}

/// Eigenvalues of the adjusted ring, `a + (1 - a) cos(2πk/n)` for `k = 0..n`.
pub fn ring_eigenvalues(n: usize, a: f64) -> Vec<f64> {
    (0..n)
        .map(|k| a + (1.0 - a) * libm::cos(2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// Self weight `a` for which the adjusted ring on `n` agents has `ρ = rho`.
///
/// Picks the larger of the two solutions so the matrix is as lazy as
/// possible. Fails when `rho` is below the smallest value any adjusted ring
/// on `n` agents can reach.
pub fn ring_weight_for_rho(n: usize, rho: f64) -> Result<f64> {
    if n < 3 {
        return Err(SparkleError::invalid("n", "rho inversion needs n >= 3"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SparkleError::invalid("rho", format!("target must lie in (0, 1), got {rho}")));
    }
    let c1 = libm::cos(2.0 * PI / n as f64);
    let c_min = (1..n)
        .map(|k| libm::cos(2.0 * PI * k as f64 / n as f64))
        .fold(f64::INFINITY, f64::min);
    let a = (rho - c1) / (1.0 - c1);
    let lowest = a + (1.0 - a) * c_min;
    if a <= 0.0 || a >= 1.0 || libm::fabs(lowest) > rho + 1e-12 {
        // ρ is minimized where the two extreme eigenvalues balance.
        let a_star = -(c1 + c_min) / (2.0 - c1 - c_min);
        let best = a_star + (1.0 - a_star) * c1;
        return Err(SparkleError::invalid(
            "rho",
            format!("{rho} is unreachable for an adjusted ring with n = {n} (minimum {best:.4})"),
        ));
    }
    Ok(a)
}

/// Outcome of one structural check on a candidate mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Informational checks never make a matrix invalid.
    pub informational: bool,
    pub detail: String,
}

/// Run every mixing-matrix check on `w` and report each outcome.
pub fn validate_mixing(w: &DMatrix<f64>) -> Vec<CheckResult> {
    if w.nrows() != w.ncols() || w.nrows() == 0 {
        return alloc::vec![CheckResult {
            name: "square",
            passed: false,
            informational: false,
            detail: format!("matrix is {}x{}", w.nrows(), w.ncols()),
        }];
    }
    match sorted_eigenvalues(w) {
        Ok(eig) => run_checks(w, Some(&eig)),
        Err(_) => run_checks(w, None),
    }
}

fn run_checks(w: &DMatrix<f64>, eigenvalues: Option<&[f64]>) -> Vec<CheckResult> {
    let n = w.nrows();
    let mut out = Vec::with_capacity(6);

    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max(libm::fabs(w[(i, j)] - w[(j, i)]));
        }
    }
    out.push(CheckResult {
        name: "symmetry",
        passed: asym == 0.0,
        informational: false,
        detail: format!("max |w_ij - w_ji| = {asym:e}"),
    });

    let min_entry = w.iter().copied().fold(f64::INFINITY, f64::min);
    out.push(CheckResult {
        name: "nonnegativity",
        passed: min_entry >= 0.0,
        informational: false,
        detail: format!("min entry = {min_entry}"),
    });

    let row_err = (0..n)
        .map(|i| libm::fabs(w.row(i).sum() - 1.0))
        .fold(0.0, f64::max);
    out.push(CheckResult {
        name: "row_stochastic",
        passed: row_err <= STOCHASTIC_TOL,
        informational: false,
        detail: format!("max |row sum - 1| = {row_err:e}"),
    });
    let col_err = (0..n)
        .map(|j| libm::fabs(w.column(j).sum() - 1.0))
        .fold(0.0, f64::max);
    out.push(CheckResult {
        name: "column_stochastic",
        passed: col_err <= STOCHASTIC_TOL,
        informational: false,
        detail: format!("max |column sum - 1| = {col_err:e}"),
    });

    match eigenvalues {
        Some(eig) => {
            let unit = eig.iter().filter(|l| libm::fabs(**l) >= 1.0 - UNIT_EIGEN_TOL).count();
            let top_is_one = libm::fabs(eig[0] - 1.0) < UNIT_EIGEN_TOL;
            let rho = second_largest_magnitude(eig);
            out.push(CheckResult {
                name: "strong_connectivity",
                passed: top_is_one && unit == 1,
                informational: false,
                detail: format!("rho = {rho}, eigenvalues of unit magnitude = {unit}"),
            });
            let lmin = eig[eig.len() - 1];
            let psd = lmin >= -UNIT_EIGEN_TOL;
            let strict = lmin > UNIT_EIGEN_TOL;
            out.push(CheckResult {
                name: "positive_definite",
                passed: psd,
                informational: true,
                detail: if strict {
                    format!("strictly PD, lambda_min = {lmin}")
                } else if psd {
                    format!("PSD but not strictly PD, lambda_min = {lmin}")
                } else {
                    format!("indefinite, lambda_min = {lmin}")
                },
            });
        }
        None => out.push(CheckResult {
            name: "strong_connectivity",
            passed: false,
            informational: false,
            detail: String::from("eigensolver did not converge"),
        }),
    }
    out
}

fn sorted_eigenvalues(w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = w.nrows();
    // Eigenvalues of the symmetric part; asymmetry is reported separately.
    let sym = (w + w.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or_else(|| SparkleError::Numeric(format!("symmetric eigensolver did not converge for n = {n}")))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn second_largest_magnitude(sorted_desc: &[f64]) -> f64 {
    if sorted_desc.len() < 2 {
        return 0.0;
    }
    libm::fabs(sorted_desc[1]).max(libm::fabs(sorted_desc[sorted_desc.len() - 1]))
}

/// Symmetric circulant matrix from `(offset, weight)` pairs. Offsets that
/// coincide on small rings accumulate.
fn circulant(n: usize, taps: &[(usize, f64)]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &(off, weight) in taps {
            w[(i, (i + off) % n)] += weight;
        }
    }
    symmetrize_exact(&mut w);
    w
}

fn torus(rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    let mut w = DMatrix::zeros(n, n);
    let idx = |r: usize, c: usize| r * cols + c;
    for r in 0..rows {
        for c in 0..cols {
            let i = idx(r, c);
            for j in [
                i,
                idx((r + 1) % rows, c),
                idx((r + rows - 1) % rows, c),
                idx(r, (c + 1) % cols),
                idx(r, (c + cols - 1) % cols),
            ] {
                w[(i, j)] += 0.2;
            }
        }
    }
    symmetrize_exact(&mut w);
    w
}

/// Copy the upper triangle onto the lower one so symmetry is bit-exact.
/// `s · m`, summing column `i` over `j = i, i+1, …` cyclically.
///
/// Every output column sees its terms in the same order relative to its own
/// index, so for circulant `m` identical input columns give bit-identical
/// output columns. Zero weights are skipped.
pub fn mix(s: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (dim, n) = s.shape();
    assert_eq!(m.nrows(), n, "mixing matrix does not match the column count");
    let mut out = DMatrix::zeros(dim, m.ncols());
    for i in 0..m.ncols() {
        for t in 0..n {
            let j = (i + t) % n;
            let w = m[(j, i)];
            if w == 0.0 {
                continue;
            }
            let src = s.column(j);
            for (o, v) in out.column_mut(i).iter_mut().zip(src.iter()) {
                *o += w * v;
            }
        }
    }
    out
}

/// `(m + mᵀ) / 2` entrywise, which is exactly symmetric and keeps a
/// circulant matrix circulant.
pub(crate) fn symmetrize_mean(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn symmetrize_exact(w: &mut DMatrix<f64>) {
    let n = w.nrows();
    for i in 0..n {
        for j in 0..i {
            w[(i, j)] = w[(j, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent circulant oracle: enumerate the closed-form spectrum.
    fn ring_rho_oracle(n: usize, a: f64) -> f64 {
        (1..n)
            .map(|k| libm::fabs(a + (1.0 - a) * libm::cos(2.0 * PI * k as f64 / n as f64)))
            .fold(0.0, f64::max)
    }

    fn assert_doubly_stochastic(m: &MixingMatrix) {
        let w = m.weights();
        for i in 0..m.n() {
            assert!((w.row(i).sum() - 1.0).abs() <= 1e-12);
            assert!((w.column(i).sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn complete_graph_is_uniform_with_zero_rho() {
        let m = build_topology(&TopologyKind::Complete, 8).unwrap();
        assert!(m.weights().iter().all(|&x| x == 0.125));
        assert!(m.rho() < 1e-12);
        assert!((spectral_gap(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_node_ring_collapses_to_uniform() {
        let m = build_topology(&TopologyKind::RingAdjusted { a: 1.0 / 3.0 }, 3).unwrap();
        for x in m.weights().iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(m.rho() < 1e-12);
    }

    #[test]
    fn ring_matches_circulant_oracle() {
        // Frozen from the oracle: n = 10, a = 0.4.
        let oracle = ring_rho_oracle(10, 0.4);
        assert!((oracle - 0.885_410_196_624_968_5).abs() < 1e-12);
        let m = build_topology(&TopologyKind::RingAdjusted { a: 0.4 }, 10).unwrap();
        assert!((m.rho() - oracle).abs() < 1e-10);
        assert!((m.gap() - 0.114_589_803_375_031_5).abs() < 1e-10);
        for n in [4, 10, 33] {
            for a in [0.2, 1.0 / 3.0, 0.5, 0.8] {
                let m = build_topology(&TopologyKind::RingAdjusted { a }, n).unwrap();
                assert!((m.rho() - ring_rho_oracle(n, a)).abs() < 1e-10, "n={n} a={a}");
            }
        }
    }

    #[test]
    fn ring_gap_scales_inverse_quadratically() {
        let gap = |n| build_topology(&TopologyKind::RingAdjusted { a: 0.4 }, n).unwrap().gap();
        for (small, large) in [(8, 16), (16, 32)] {
            let ratio = gap(small) / gap(large);
            assert!((3.2..=4.8).contains(&ratio), "{small}->{large}: {ratio}");
        }
    }

    #[test]
    fn families_are_doubly_stochastic() {
        let kinds = [
            (TopologyKind::Complete, 7),
            (TopologyKind::RingAdjusted { a: 0.3 }, 2),
            (TopologyKind::RingAdjusted { a: 0.3 }, 12),
            (TopologyKind::FivePeer, 5),
            (TopologyKind::FivePeer, 10),
            (TopologyKind::Torus { rows: 4, cols: 4 }, 16),
            (TopologyKind::Torus { rows: 2, cols: 5 }, 10),
        ];
        for (kind, n) in kinds {
            let m = build_topology(&kind, n).unwrap();
            assert_doubly_stochastic(&m);
            assert!(m.rho() < 1.0);
        }
    }

    #[test]
    fn five_peer_weights() {
        let m = build_topology(&TopologyKind::FivePeer, 10).unwrap();
        let w = m.weights();
        assert_eq!(w[(0, 0)], 0.2);
        assert_eq!(w[(0, 2)], 0.2);
        assert_eq!(w[(0, 8)], 0.2);
        assert_eq!(w[(0, 3)], 0.0);
    }

    #[test]
    fn too_small_or_bad_parameters_are_rejected() {
        assert!(build_topology(&TopologyKind::FivePeer, 4).is_err());
        assert!(build_topology(&TopologyKind::RingAdjusted { a: 1.0 }, 5).is_err());
        assert!(build_topology(&TopologyKind::RingAdjusted { a: 0.0 }, 5).is_err());
        assert!(build_topology(&TopologyKind::Torus { rows: 3, cols: 3 }, 10).is_err());
        assert!(build_topology(&TopologyKind::Complete, 0).is_err());
    }

    #[test]
    fn identity_fails_strong_connectivity() {
        let checks = validate_mixing(&DMatrix::identity(4, 4));
        let sc = checks.iter().find(|c| c.name == "strong_connectivity").unwrap();
        assert!(!sc.passed);
        let err = MixingMatrix::from_matrix(DMatrix::identity(4, 4)).unwrap_err();
        assert!(matches!(err, SparkleError::Validation { check: "strong_connectivity", .. }));
    }

    #[test]
    fn complete_four_passes_and_is_not_strictly_pd() {
        let checks = validate_mixing(&DMatrix::from_element(4, 4, 0.25));
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        let pd = checks.iter().find(|c| c.name == "positive_definite").unwrap();
        assert!(pd.informational);
        assert!(pd.detail.contains("not strictly PD"));
    }

    #[test]
    fn negative_entry_fails_nonnegativity() {
        let mut w = DMatrix::from_element(3, 3, 1.0 / 3.0);
        w[(0, 1)] = -0.01;
        w[(1, 0)] = -0.01;
        w[(0, 0)] = 2.0 / 3.0 + 0.01;
        w[(1, 1)] = 2.0 / 3.0 + 0.01;
        let checks = validate_mixing(&w);
        let nn = checks.iter().find(|c| c.name == "nonnegativity").unwrap();
        assert!(!nn.passed);
    }

    #[test]
    fn asymmetric_and_non_stochastic_are_named() {
        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.4, 0.6]);
        let err = MixingMatrix::from_matrix(w).unwrap_err();
        assert!(matches!(err, SparkleError::Validation { check: "symmetry", .. }));
        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.6, 0.5]);
        let err = MixingMatrix::from_matrix(w).unwrap_err();
        assert!(matches!(err, SparkleError::Validation { check: "row_stochastic", .. }));
        let checks = validate_mixing(&DMatrix::zeros(2, 3));
        assert_eq!(checks[0].name, "square");
    }

    #[test]
    fn rho_inversion_round_trips() {
        for (n, target) in [(10, 0.828), (10, 0.924), (10, 0.99), (16, 0.95)] {
            let a = ring_weight_for_rho(n, target).unwrap();
            assert!((ring_rho_oracle(n, a) - target).abs() < 1e-12);
        }
        // Ten-node rings cannot mix faster than rho ~ 0.8257.
        assert!(ring_weight_for_rho(10, 0.647).is_err());
    }

    #[test]
    fn lazy_matrix_is_psd() {
        let m = build_topology(&TopologyKind::RingAdjusted { a: 1.0 / 3.0 }, 16).unwrap();
        assert!(m.lambda_min() < 0.0);
        let lazy = m.lazy().unwrap();
        assert!(lazy.lambda_min() >= 0.0);
        assert!((lazy.rho() - (1.0 + m.eigenvalues()[1]) / 2.0).abs() < 1e-12);
    }
}
