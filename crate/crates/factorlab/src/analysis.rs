//! Transfer matrices and principal component analysis of transfer profiles.
//!
//! A transfer matrix holds the accuracy of every source-to-target pair from a
//! one-to-one sweep. Treating each source row as a sample and decomposing the
//! column-centered matrix into principal components surfaces latent structure
//! behind transfer failure: every domain gets a signed activation per
//! component, and the sign split of a component is a candidate two-group
//! factor assignment for masked adaptation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::masking::{FactorAssignment, MaskError};
use crate::world::TransferFixture;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("matrix must be at least 2x2, got {m}x{m}")]
    TooSmall { m: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("got {got} cells, expected a {m}x{m} grid")]
    BadCellCount { got: usize, m: usize },
    #[error("diagonal cell ({index},{index}) must be empty in an off-diagonal grid")]
    UnexpectedDiagonal { index: usize },
    #[error("cell ({row},{col}) is {value}, expected a finite accuracy in [0, 1]")]
    BadAccuracy { row: usize, col: usize, value: f64 },
    #[error("fill value {value} is not a finite accuracy in [0, 1]")]
    BadFill { value: f64 },
    #[error("diagonal policy is Absent; fill the diagonal before analysis")]
    DiagonalAbsent,
    #[error("cell ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric at ({row},{col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("requested {requested} components, only {available} available")]
    BadComponentCount { requested: usize, available: usize },
    #[error("total variance is zero, ratios are undefined")]
    ZeroVariance,
    #[error("activation {index} is too close to zero to assign a sign")]
    DegenerateActivation { index: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// How the diagonal of a transfer matrix is populated. One-to-one sweeps do
/// not measure a domain against itself, so the diagonal starts out absent and
/// must be resolved before analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiagonalPolicy {
    /// Diagonal cells carry no value.
    Absent,
    /// Diagonal cells hold a uniform placeholder written by `fill_diagonal`.
    Filled(f64),
    /// Diagonal cells came from the data itself.
    Measured,
}

/// Square accuracy matrix indexed `(source row, target column)`, 0-based.
/// Failed measurements are stored as NaN and rejected by `pca`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    m: usize,
    cells: Vec<f64>,
    policy: DiagonalPolicy,
}

fn check_accuracy(row: usize, col: usize, value: f64) -> Result<(), AnalysisError> {
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(AnalysisError::BadAccuracy { row, col, value });
    }
    Ok(())
}

impl TransferMatrix {
    /// Builds a matrix from a row-major grid of off-diagonal cells. `None`
    /// off the diagonal marks a failed measurement; diagonal slots must be
    /// `None` and the policy starts as `Absent`.
    pub fn from_off_diagonal(m: usize, cells: &[Option<f64>]) -> Result<Self, AnalysisError> {
        if m < 2 {
            return Err(AnalysisError::TooSmall { m });
        }
        if cells.len() != m * m {
            return Err(AnalysisError::BadCellCount {
                got: cells.len(),
                m,
            });
        }
        let mut values = vec![f64::NAN; m * m];
        for row in 0..m {
            for col in 0..m {
                if let Some(v) = cells[row * m + col] {
                    if row == col {
                        return Err(AnalysisError::UnexpectedDiagonal { index: row });
                    }
                    check_accuracy(row, col, v)?;
                    values[row * m + col] = v;
                }
            }
        }
        Ok(Self {
            m,
            cells: values,
            policy: DiagonalPolicy::Absent,
        })
    }

    /// Builds a fully measured matrix, diagonal included.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AnalysisError> {
        let m = rows.len();
        if m < 2 {
            return Err(AnalysisError::TooSmall { m });
        }
        let mut cells = Vec::with_capacity(m * m);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(AnalysisError::RaggedRow {
                    row: r,
                    got: row.len(),
                    expected: m,
                });
            }
            for (c, &v) in row.iter().enumerate() {
                check_accuracy(r, c, v)?;
                cells.push(v);
            }
        }
        Ok(Self {
            m,
            cells,
            policy: DiagonalPolicy::Measured,
        })
    }

    /// Imports a validated accuracy fixture. Fixture ids are 1-based; id `k`
    /// lands at index `k - 1`.
    pub fn from_fixture(fixture: &TransferFixture) -> Self {
        Self::from_off_diagonal(fixture.num_domains(), fixture.cells())
            .expect("fixture grids are validated on load")
    }

    pub fn num_domains(&self) -> usize {
        self.m
    }

    pub fn policy(&self) -> DiagonalPolicy {
        self.policy
    }

    /// Cell value at 0-based `(row, col)`. NaN marks absent or failed cells.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.m && col < self.m, "cell index out of range");
        self.cells[row * self.m + col]
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with every diagonal cell overwritten by `value`.
    pub fn fill_diagonal(&self, value: f64) -> Result<Self, AnalysisError> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(AnalysisError::BadFill { value });
        }
        let mut out = self.clone();
        for i in 0..self.m {
            out.cells[i * self.m + i] = value;
        }
        out.policy = DiagonalPolicy::Filled(value);
        Ok(out)
    }

    /// CSV snapshot with 1-based ids and 4 decimal places. Failed cells print
    /// as `NaN`; diagonal rows are omitted while the policy is `Absent`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,accuracy\n");
        for row in 0..self.m {
            for col in 0..self.m {
                if row == col && self.policy == DiagonalPolicy::Absent {
                    continue;
                }
                let v = self.cells[row * self.m + col];
                if v.is_finite() {
                    let _ = writeln!(out, "{},{},{:.4}", row + 1, col + 1, v);
                } else {
                    let _ = writeln!(out, "{},{},NaN", row + 1, col + 1);
                }
            }
        }
        out
    }
}

const JACOBI_SWEEPS: usize = 100;

fn rotate(m: &mut [f64], ij: usize, kl: usize, s: f64, tau: f64) {
    let g = m[ij];
    let h = m[kl];
    m[ij] = g - s * (h + g * tau);
    m[kl] = h + s * (g - h * tau);
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order paired with unit eigenvectors.
/// Eigenvector signs are arbitrary.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), AnalysisError> {
    let n = matrix.len();
    if n == 0 {
        return Err(AnalysisError::Empty);
    }
    for (r, row) in matrix.iter().enumerate() {
        if row.len() != n {
            return Err(AnalysisError::RaggedRow {
                row: r,
                got: row.len(),
                expected: n,
            });
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(AnalysisError::NonFinite { row: r, col: c });
            }
        }
    }
    for r in 0..n {
        for c in r + 1..n {
            let a = matrix[r][c];
            let b = matrix[c][r];
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(AnalysisError::NotSymmetric { row: r, col: c });
            }
        }
    }

    let mut a: Vec<f64> = matrix.iter().flatten().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let mut b: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut d = b.clone();
    let mut z = vec![0.0; n];

    let mut converged = false;
    for sweep in 0..JACOBI_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q].abs();
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
        let tresh = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let g = 100.0 * a[p * n + q].abs();
                // Late sweeps zero entries that no longer move the diagonal.
                if sweep > 3
                    && d[p].abs() + g == d[p].abs()
                    && d[q].abs() + g == d[q].abs()
                {
                    a[p * n + q] = 0.0;
                } else if a[p * n + q].abs() > tresh {
                    let h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        a[p * n + q] / h
                    } else {
                        let theta = 0.5 * h / a[p * n + q];
                        let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            -t
                        } else {
                            t
                        }
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    let h = t * a[p * n + q];
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[p * n + q] = 0.0;
                    for j in 0..p {
                        rotate(&mut a, j * n + p, j * n + q, s, tau);
                    }
                    for j in p + 1..q {
                        rotate(&mut a, p * n + j, j * n + q, s, tau);
                    }
                    for j in q + 1..n {
                        rotate(&mut a, p * n + j, q * n + j, s, tau);
                    }
                    for j in 0..n {
                        rotate(&mut v, j * n + p, j * n + q, s, tau);
                    }
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    if !converged {
        return Err(AnalysisError::NoConvergence {
            sweeps: JACOBI_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row * n + col]).collect())
        .collect();
    Ok((eigenvalues, eigenvectors))
}

/// Principal components of a transfer matrix with rows as samples.
#[derive(Debug, Clone)]
pub struct PcaResult {
    eigenvalues: Vec<f64>,
    components: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    mean: Vec<f64>,
    total_variance: f64,
}

/// Column-centered PCA of a complete transfer matrix. The covariance uses the
/// n-1 divisor. Component signs are fixed so the loading with the largest
/// magnitude is positive, and activations are the projections of each
/// centered row onto each component.
pub fn pca(matrix: &TransferMatrix) -> Result<PcaResult, AnalysisError> {
    if matrix.policy() == DiagonalPolicy::Absent {
        return Err(AnalysisError::DiagonalAbsent);
    }
    let m = matrix.num_domains();
    for row in 0..m {
        for col in 0..m {
            if !matrix.get(row, col).is_finite() {
                return Err(AnalysisError::NonFinite { row, col });
            }
        }
    }

    let mean: Vec<f64> = (0..m)
        .map(|c| (0..m).map(|r| matrix.get(r, c)).sum::<f64>() / m as f64)
        .collect();
    let mut centered = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            centered[r * m + c] = matrix.get(r, c) - mean[c];
        }
    }

    let denom = (m - 1) as f64;
    let mut cov = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let s: f64 = (0..m).map(|r| centered[r * m + i] * centered[r * m + j]).sum();
            cov[i][j] = s / denom;
            cov[j][i] = s / denom;
        }
    }

    let (mut eigenvalues, mut components) = symmetric_eigen(&cov)?;
    // The covariance is a Gram matrix, so negative eigenvalues are rounding
    // noise and get clamped to zero.
    let scale = eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    for v in &mut eigenvalues {
        if *v < 0.0 && *v >= -1e-9 * scale.max(1e-300) {
            *v = 0.0;
        }
    }
    for comp in &mut components {
        let mut best = 0;
        for (i, &x) in comp.iter().enumerate() {
            if x.abs() > comp[best].abs() {
                best = i;
            }
        }
        if comp[best] < 0.0 {
            for x in comp.iter_mut() {
                *x = -*x;
            }
        }
    }
    let activations: Vec<Vec<f64>> = components
        .iter()
        .map(|comp| {
            (0..m)
                .map(|r| (0..m).map(|c| centered[r * m + c] * comp[c]).sum())
                .collect()
        })
        .collect();
    let total_variance = eigenvalues.iter().sum();
    Ok(PcaResult {
        eigenvalues,
        components,
        activations,
        mean,
        total_variance,
    })
}

impl PcaResult {
    pub fn num_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn num_domains(&self) -> usize {
        self.activations.first().map_or(0, Vec::len)
    }

    /// Retained eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Loadings of component `c` over the feature columns.
    pub fn component(&self, c: usize) -> &[f64] {
        &self.components[c]
    }

    /// Per-domain scores on component `c`.
    pub fn activations(&self, c: usize) -> &[f64] {
        &self.activations[c]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sum of the retained eigenvalues.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Eigenvalues normalized by the retained total, so a truncated result
    /// reports ratios within its own subspace.
    pub fn explained_variance_ratio(&self) -> Result<Vec<f64>, AnalysisError> {
        if self.total_variance <= 0.0 {
            return Err(AnalysisError::ZeroVariance);
        }
        Ok(self
            .eigenvalues
            .iter()
            .map(|&v| v / self.total_variance)
            .collect())
    }

    /// Keeps the leading `k` components and recomputes the retained total.
    pub fn truncated(&self, k: usize) -> Result<PcaResult, AnalysisError> {
        if k == 0 || k > self.eigenvalues.len() {
            return Err(AnalysisError::BadComponentCount {
                requested: k,
                available: self.eigenvalues.len(),
            });
        }
        let eigenvalues: Vec<f64> = self.eigenvalues[..k].to_vec();
        let total_variance = eigenvalues.iter().sum();
        Ok(PcaResult {
            eigenvalues,
            components: self.components[..k].to_vec(),
            activations: self.activations[..k].to_vec(),
            mean: self.mean.clone(),
            total_variance,
        })
    }

    /// CSV summary with one row per `(component, domain)` pair, 1-based ids
    /// and 4 decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,domain,activation,eigenvalue,ratio\n");
        let ratios = self.explained_variance_ratio().ok();
        for (c, acts) in self.activations.iter().enumerate() {
            for (i, &a) in acts.iter().enumerate() {
                let ratio = match &ratios {
                    Some(r) => format!("{:.4}", r[c]),
                    None => "NaN".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{},{},{:.4},{:.4},{}",
                    c + 1,
                    i + 1,
                    a,
                    self.eigenvalues[c],
                    ratio
                );
            }
        }
        out
    }
}

/// Splits domains into "positive" and "negative" groups by activation sign.
/// Near-zero activations have no trustworthy side and are rejected.
pub fn sign_grouping(
    factor: impl Into<String>,
    activations: &[f64],
) -> Result<FactorAssignment, AnalysisError> {
    let mut values = Vec::with_capacity(activations.len());
    for (i, &a) in activations.iter().enumerate() {
        if !a.is_finite() || a.abs() <= 1e-12 {
            return Err(AnalysisError::DegenerateActivation { index: i });
        }
        values.push(if a > 0.0 { "positive" } else { "negative" }.to_string());
    }
    Ok(FactorAssignment::new(factor, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_accuracy_fixture, shipped_fixture_path};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Frozen by an independent LAPACK decomposition of the shipped fixture
    // with the diagonal filled at 1.0.
    const FROZEN_EIGENVALUES: [f64; 10] = [
        0.19123405205369579,
        0.03848650532354786,
        0.03149554639678607,
        0.019262736106830075,
        0.01271296507651042,
        0.00886145256165077,
        0.0053416115490513,
        0.004687993426574528,
        0.002804369427549547,
        0.002100040805076319,
    ];
    const FROZEN_PC1: [f64; 11] = [
        -0.06933046182620309,
        0.33778195695644186,
        0.4537146123964972,
        -0.48691080009171855,
        -0.5433507606362833,
        -0.49820818217245294,
        0.34153297307678543,
        -0.3086059011569988,
        0.5575463194912311,
        -0.25335002934702255,
        0.4691802733097233,
    ];
    const FROZEN_PC2: [f64; 11] = [
        0.20168223735068064,
        0.1364823945145508,
        0.03055300890741116,
        -0.005849760343991435,
        -0.23340148033846722,
        -0.21466374803033414,
        0.15259381046401035,
        0.12787206648986216,
        -0.344687222714189,
        0.23967754328816496,
        -0.09025884958769961,
    ];
    const FROZEN_PC3: [f64; 11] = [
        -0.2706800893674458,
        0.059286441417178926,
        -0.14414312898288154,
        0.11640871081696703,
        -0.17806638454758297,
        0.14834197579084357,
        0.025937551674263513,
        -0.19138350212828562,
        -0.023911768966773765,
        0.2894424700236722,
        0.16876772427004427,
    ];

    fn shipped_matrix() -> TransferMatrix {
        let fixture = load_accuracy_fixture(shipped_fixture_path()).unwrap();
        TransferMatrix::from_fixture(&fixture)
            .fill_diagonal(1.0)
            .unwrap()
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(
            TransferMatrix::from_off_diagonal(1, &[None]),
            Err(AnalysisError::TooSmall { m: 1 })
        ));
        assert!(matches!(
            TransferMatrix::from_off_diagonal(2, &[None, Some(0.5), None]),
            Err(AnalysisError::BadCellCount { got: 3, m: 2 })
        ));
        assert!(matches!(
            TransferMatrix::from_off_diagonal(2, &[Some(0.9), Some(0.5), Some(0.5), None]),
            Err(AnalysisError::UnexpectedDiagonal { index: 0 })
        ));
        assert!(matches!(
            TransferMatrix::from_off_diagonal(2, &[None, Some(1.5), Some(0.5), None]),
            Err(AnalysisError::BadAccuracy { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            TransferMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5]]),
            Err(AnalysisError::RaggedRow {
                row: 1,
                got: 1,
                expected: 2
            })
        ));
        assert!(matches!(
            TransferMatrix::from_rows(&[vec![0.5]]),
            Err(AnalysisError::TooSmall { m: 1 })
        ));
    }

    #[test]
    fn failed_cells_are_nan_and_block_pca() {
        let m = TransferMatrix::from_off_diagonal(2, &[None, None, Some(0.5), None]).unwrap();
        assert!(m.get(0, 1).is_nan());
        assert!(!m.is_complete());
        let filled = m.fill_diagonal(1.0).unwrap();
        assert!(matches!(
            pca(&filled),
            Err(AnalysisError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn fill_diagonal_sets_policy_and_values() {
        let m = TransferMatrix::from_off_diagonal(2, &[None, Some(0.6), Some(0.7), None]).unwrap();
        assert_eq!(m.policy(), DiagonalPolicy::Absent);
        assert!(m.get(0, 0).is_nan());
        assert!(matches!(pca(&m), Err(AnalysisError::DiagonalAbsent)));
        assert!(matches!(
            m.fill_diagonal(f64::NAN),
            Err(AnalysisError::BadFill { .. })
        ));
        assert!(matches!(
            m.fill_diagonal(1.5),
            Err(AnalysisError::BadFill { .. })
        ));
        let filled = m.fill_diagonal(1.0).unwrap();
        assert_eq!(filled.policy(), DiagonalPolicy::Filled(1.0));
        assert!(filled.get(0, 0) == 1.0 && filled.get(1, 1) == 1.0);
        assert!(filled.get(0, 1) == 0.6 && filled.get(1, 0) == 0.7);
        assert!(filled.is_complete());
    }

    #[test]
    fn fixture_import_keeps_cell_positions() {
        let fixture = load_accuracy_fixture(shipped_fixture_path()).unwrap();
        let m = TransferMatrix::from_fixture(&fixture);
        assert_eq!(m.num_domains(), 11);
        assert!((m.get(0, 1) - 0.67).abs() < 1e-12);
        assert!((m.get(7, 0) - 0.83).abs() < 1e-12);
        assert!((m.get(8, 5) - 0.30).abs() < 1e-12);
        assert!(m.get(4, 4).is_nan());
    }

    #[test]
    fn eigen_solves_known_two_by_two() {
        let (vals, vecs) = symmetric_eigen(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let r = 1.0 / 2.0f64.sqrt();
        assert!((vecs[0][0].abs() - r).abs() < 1e-12);
        assert!((vecs[0][1].abs() - r).abs() < 1e-12);
        assert!((vecs[0][0] - vecs[0][1]).abs() < 1e-12 || (vecs[0][0] + vecs[0][1]).abs() < 1e-12);
        assert!((vecs[0][0] * vecs[1][0] + vecs[0][1] * vecs[1][1]).abs() < 1e-12);
    }

    #[test]
    fn eigen_rejects_bad_matrices() {
        assert!(matches!(symmetric_eigen(&[]), Err(AnalysisError::Empty)));
        assert!(matches!(
            symmetric_eigen(&[vec![1.0], vec![1.0, 2.0]]),
            Err(AnalysisError::RaggedRow { .. })
        ));
        assert!(matches!(
            symmetric_eigen(&[vec![1.0, 2.0], vec![3.0, 1.0]]),
            Err(AnalysisError::NotSymmetric { row: 0, col: 1 })
        ));
        assert!(matches!(
            symmetric_eigen(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]),
            Err(AnalysisError::NonFinite { .. })
        ));
    }

    // Independent oracle: shift the matrix to positive definite, extract the
    // dominant eigenpair by power iteration, then peel it off by Hotelling
    // deflation and repeat.
    fn power_spectrum(matrix: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
        let n = matrix.len();
        let maxabs = matrix
            .iter()
            .flatten()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let shift = 1.0 + n as f64 * maxabs;
        let mut b: Vec<Vec<f64>> = matrix.to_vec();
        for i in 0..n {
            b[i][i] += shift;
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (lam, v) = dominant_eigenpair(&b);
            for i in 0..n {
                for j in 0..n {
                    b[i][j] -= lam * v[i] * v[j];
                }
            }
            out.push((lam - shift, v));
        }
        out
    }

    fn dominant_eigenpair(b: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let n = b.len();
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.137 * i as f64).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut x {
            *v /= norm;
        }
        for _ in 0..200_000 {
            let mut y = vec![0.0; n];
            for i in 0..n {
                y[i] = (0..n).map(|j| b[i][j] * x[j]).sum();
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for v in &mut y {
                *v /= norm;
            }
            let delta = y
                .iter()
                .zip(&x)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            x = y;
            if delta < 1e-15 {
                break;
            }
        }
        let mut bx = vec![0.0; n];
        for i in 0..n {
            bx[i] = (0..n).map(|j| b[i][j] * x[j]).sum();
        }
        let lam = x.iter().zip(&bx).map(|(a, b)| a * b).sum();
        (lam, x)
    }

    #[test]
    fn eigen_matches_power_iteration_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let n = 5;
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i..n {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    m[i][j] = v;
                    m[j][i] = v;
                }
            }
            let (vals, vecs) = symmetric_eigen(&m).unwrap();
            let oracle = power_spectrum(&m);
            for k in 0..n {
                assert!(
                    (vals[k] - oracle[k].0).abs() < 1e-8,
                    "eigenvalue {k}: jacobi {} oracle {}",
                    vals[k],
                    oracle[k].0
                );
                let dot: f64 = vecs[k].iter().zip(&oracle[k].1).map(|(a, b)| a * b).sum();
                assert!(dot.abs() > 1.0 - 1e-6, "eigenvector {k} mismatch: |dot| {}", dot.abs());
            }
        }
    }

    #[test]
    fn fixture_spectrum_matches_frozen_values() {
        let result = pca(&shipped_matrix()).unwrap();
        assert_eq!(result.num_components(), 11);
        for (k, &frozen) in FROZEN_EIGENVALUES.iter().enumerate() {
            assert!(
                (result.eigenvalues()[k] - frozen).abs() < 1e-10,
                "eigenvalue {k}: {} vs {}",
                result.eigenvalues()[k],
                frozen
            );
        }
        // Centering leaves rank 10, so the last eigenvalue vanishes.
        assert!(result.eigenvalues()[10].abs() < 1e-12);
        assert!((result.total_variance() - 0.31698727272727273).abs() < 1e-12);
        let sum: f64 = result.eigenvalues().iter().sum();
        assert!((result.total_variance() - sum).abs() < 1e-12);
        let ratios = result.explained_variance_ratio().unwrap();
        assert!((ratios[0] - 0.6032862152741016).abs() < 1e-9);
        assert!((ratios[1] - 0.12141340878584932).abs() < 1e-9);
        assert!((ratios[2] - 0.09935902512995842).abs() < 1e-9);
    }

    #[test]
    fn fixture_truncation_renormalizes_over_leading_subspace() {
        let result = pca(&shipped_matrix()).unwrap();
        let top3 = result.truncated(3).unwrap();
        assert_eq!(top3.num_components(), 3);
        assert!((top3.total_variance() - 0.2612161037740297).abs() < 1e-12);
        let ratios = top3.explained_variance_ratio().unwrap();
        assert!((ratios[0] - 0.7320913576565964).abs() < 1e-9);
        assert!((ratios[1] - 0.14733588307726).abs() < 1e-9);
        assert!((ratios[2] - 0.1205727592661436).abs() < 1e-9);
        assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            result.truncated(0),
            Err(AnalysisError::BadComponentCount { .. })
        ));
        assert!(matches!(
            result.truncated(12),
            Err(AnalysisError::BadComponentCount { .. })
        ));
    }

    #[test]
    fn fixture_activations_match_frozen_values() {
        let result = pca(&shipped_matrix()).unwrap();
        for (frozen, got) in [
            (&FROZEN_PC1[..], result.activations(0)),
            (&FROZEN_PC2[..], result.activations(1)),
            (&FROZEN_PC3[..], result.activations(2)),
        ] {
            for (i, (&f, &g)) in frozen.iter().zip(got).enumerate() {
                assert!((f - g).abs() < 1e-9, "domain {i}: {g} vs {f}");
            }
        }
    }

    #[test]
    fn fixture_covariance_spectrum_matches_power_iteration() {
        let matrix = shipped_matrix();
        let m = matrix.num_domains();
        let mean: Vec<f64> = (0..m)
            .map(|c| (0..m).map(|r| matrix.get(r, c)).sum::<f64>() / m as f64)
            .collect();
        let mut cov = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let s: f64 = (0..m)
                    .map(|r| (matrix.get(r, i) - mean[i]) * (matrix.get(r, j) - mean[j]))
                    .sum();
                cov[i][j] = s / (m - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let oracle = power_spectrum(&cov);
        let result = pca(&matrix).unwrap();
        for k in 0..3 {
            assert!(
                (result.eigenvalues()[k] - oracle[k].0).abs() < 1e-9,
                "eigenvalue {k}: {} vs oracle {}",
                result.eigenvalues()[k],
                oracle[k].0
            );
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let result = pca(&shipped_matrix()).unwrap();
        let k = result.num_components();
        for a in 0..k {
            for b in a..k {
                let dot: f64 = result
                    .component(a)
                    .iter()
                    .zip(result.component(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9, "dot({a},{b}) = {dot}");
            }
        }
    }

    #[test]
    fn component_signs_put_largest_loading_positive() {
        let result = pca(&shipped_matrix()).unwrap();
        for c in 0..result.num_components() {
            let comp = result.component(c);
            let mut best = 0;
            for (i, &x) in comp.iter().enumerate() {
                if x.abs() > comp[best].abs() {
                    best = i;
                }
            }
            assert!(comp[best] >= 0.0, "component {c} has negative peak loading");
        }
    }

    #[test]
    fn rows_reconstruct_from_full_rank_scores() {
        let matrix = shipped_matrix();
        let result = pca(&matrix).unwrap();
        let m = matrix.num_domains();
        for r in 0..m {
            for c in 0..m {
                let mut v = result.mean()[c];
                for k in 0..result.num_components() {
                    v += result.activations(k)[r] * result.component(k)[c];
                }
                assert!(
                    (v - matrix.get(r, c)).abs() < 1e-9,
                    "cell ({r},{c}): {v} vs {}",
                    matrix.get(r, c)
                );
            }
        }
    }

    #[test]
    fn sign_grouping_splits_by_activation_sign() {
        let result = pca(&shipped_matrix()).unwrap();
        let assignment = sign_grouping("pc1_sign", result.activations(0)).unwrap();
        assert_eq!(assignment.factor(), "pc1_sign");
        let groups = assignment.groups();
        assert_eq!(groups["positive"], vec![1, 2, 6, 8, 10]);
        assert_eq!(groups["negative"], vec![0, 3, 4, 5, 7, 9]);
        assert!(matches!(
            sign_grouping("bad", &[0.5, 0.0]),
            Err(AnalysisError::DegenerateActivation { index: 1 })
        ));
        assert!(matches!(
            sign_grouping("bad", &[0.5, f64::NAN]),
            Err(AnalysisError::DegenerateActivation { index: 1 })
        ));
    }

    #[test]
    fn csv_exports_are_stable_and_rounded() {
        let matrix = shipped_matrix();
        let csv = matrix.to_csv();
        assert_eq!(csv, matrix.to_csv());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("source,target,accuracy"));
        assert_eq!(lines.next(), Some("1,1,1.0000"));
        assert_eq!(lines.next(), Some("1,2,0.6700"));
        assert_eq!(csv.lines().count(), 1 + 121);

        let absent = TransferMatrix::from_fixture(
            &load_accuracy_fixture(shipped_fixture_path()).unwrap(),
        );
        assert_eq!(absent.to_csv().lines().count(), 1 + 110);

        let result = pca(&matrix).unwrap().truncated(3).unwrap();
        let pcsv = result.to_csv();
        assert_eq!(pcsv, result.to_csv());
        let mut lines = pcsv.lines();
        assert_eq!(
            lines.next(),
            Some("component,domain,activation,eigenvalue,ratio")
        );
        assert_eq!(lines.next(), Some("1,1,-0.0693,0.1912,0.7321"));
        assert_eq!(pcsv.lines().count(), 1 + 33);
    }

    #[test]
    fn pca_runs_well_under_a_second() {
        let start = std::time::Instant::now();
        let result = pca(&shipped_matrix()).unwrap();
        assert!(result.num_components() == 11);
        assert!(start.elapsed().as_millis() < 1000);
    }

    #[test]
    fn degenerate_matrix_reports_zero_variance() {
        let rows = vec![vec![0.5; 3]; 3];
        let matrix = TransferMatrix::from_rows(&rows).unwrap();
        let result = pca(&matrix).unwrap();
        assert!(result.total_variance() == 0.0);
        assert!(matches!(
            result.explained_variance_ratio(),
            Err(AnalysisError::ZeroVariance)
        ));
        assert!(result.to_csv().contains("NaN"));
    }
}
