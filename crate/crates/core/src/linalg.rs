//! Dense numerical kernel shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Storage is column-major, which makes
//! `vec` (column stacking) a plain copy of the backing slice. Eigenvalue and
//! singular value decompositions are delegated to `faer`.

use faer::Mat;
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type Complex64 = Complex<f64>;

/// Probabilities below this value are reported as this value.
pub const PROB_FLOOR: f64 = 2.2e-16;

/// Relative gap under which two computed eigenvalues are treated as one cluster
/// when building eigenvectors.
const CLUSTER_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("SVD did not converge")]
    SvdFailed,
    #[error("matrix is numerically singular (infinite condition number)")]
    Singular,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

fn ensure_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

/// Column-stacking vectorization.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: refolds a vector of length `rows * cols` column by column.
pub fn vec_inverse(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(LinalgError::Dimension(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Matrix::from_column_slice(rows, cols, v))
}

/// Row-major nested representation used by the JSON artifacts.
pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(LinalgError::Dimension("ragged row-major array".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(nrows, ncols, &flat))
}

/// Eigen-structure of a real square matrix.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    /// Unit-norm eigenvectors as columns, present when the matrix is diagonalizable.
    pub eigenvectors: Option<DMatrix<Complex64>>,
    /// Spectral condition number of the eigenvector matrix.
    pub kappa_v: Option<f64>,
}

impl Spectrum {
    pub fn is_diagonalizable(&self) -> bool {
        self.eigenvectors.is_some()
    }
}

fn to_faer(m: &Matrix) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn to_faer_complex(m: &DMatrix<Complex64>) -> Mat<Complex64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a real square matrix via Hessenberg reduction and shifted QR.
///
/// Fails loudly when the iteration does not converge.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>> {
    let n = ensure_square(m)?;
    ensure_finite(m)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    to_faer(m)
        .eigenvalues()
        .map_err(|_| LinalgError::NoConvergence)
}

pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Eigenvalues plus eigenvectors (when they exist) and their conditioning.
///
/// Eigenvectors come from the null space of `M - λI` computed by a complex SVD.
/// Eigenvalues closer than a relative 1e-6 are grouped, and a cluster of size
/// `k` is accepted only if `M - λI` has `k` negligible singular values;
/// otherwise the matrix is reported as defective.
pub fn spectrum(m: &Matrix) -> Result<Spectrum> {
    let eigs = eigenvalues(m)?;
    let spectral_radius = eigs.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let n = m.nrows();
    let scale = spectral_norm(m)?.max(1.0);

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut assigned = vec![false; n];
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let mut group = vec![i];
        assigned[i] = true;
        for j in (i + 1)..n {
            if !assigned[j] && (eigs[i] - eigs[j]).norm() <= CLUSTER_TOL * eigs[i].norm().max(1.0) {
                group.push(j);
                assigned[j] = true;
            }
        }
        clusters.push(group);
    }

    let cm = m.map(|v| Complex64::new(v, 0.0));
    let mut vecs = DMatrix::<Complex64>::zeros(n, n);
    let mut diagonalizable = true;
    for group in &clusters {
        let k = group.len();
        let center = group.iter().map(|&i| eigs[i]).sum::<Complex64>() / k as f64;
        let shifted = &cm - DMatrix::<Complex64>::identity(n, n) * center;
        let svd = to_faer_complex(&shifted)
            .svd()
            .map_err(|_| LinalgError::SvdFailed)?;
        let (sv, v) = (svd.S().column_vector(), svd.V());
        // singular values are sorted in nonincreasing order
        if sv[n - k].re > CLUSTER_TOL * scale {
            diagonalizable = false;
            break;
        }
        for (slot, col) in group.iter().zip(n - k..n) {
            let norm = (0..n).map(|r| v[(r, col)].norm_sqr()).sum::<f64>().sqrt();
            for r in 0..n {
                vecs[(r, *slot)] = v[(r, col)] / norm;
            }
        }
    }

    let (eigenvectors, kappa_v) = if diagonalizable {
        let sv = to_faer_complex(&vecs)
            .singular_values()
            .map_err(|_| LinalgError::SvdFailed)?;
        let max = sv.iter().copied().fold(0.0, f64::max);
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= f64::EPSILON * max * n as f64 {
            (None, None)
        } else {
            (Some(vecs), Some(max / min))
        }
    } else {
        (None, None)
    };

    Ok(Spectrum {
        eigenvalues: eigs,
        spectral_radius,
        eigenvectors,
        kappa_v,
    })
}

pub fn singular_values(m: &Matrix) -> Result<Vector> {
    ensure_finite(m)?;
    if m.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let sv = to_faer(m)
        .singular_values()
        .map_err(|_| LinalgError::SvdFailed)?;
    Ok(Vector::from_vec(sv))
}

/// Largest singular value (Euclidean-induced norm).
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

/// `‖M‖‖M⁻¹‖ = σ_max / σ_min`.
pub fn condition_number_spectral(m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    let sv = singular_values(m)?;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if n == 0 || min <= f64::EPSILON * max * n as f64 {
        return Err(LinalgError::Singular);
    }
    Ok(max / min)
}

/// Default truncation level relative to `σ_max`.
pub fn default_rank_tol(m: &Matrix) -> f64 {
    m.nrows().max(m.ncols()) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse together with the numerical rank.
///
/// Singular values below `rank_tol * σ_max` are treated as zero.
pub fn pseudoinverse_with_rank(m: &Matrix, rank_tol: f64) -> Result<(Matrix, usize)> {
    ensure_finite(m)?;
    let (r, c) = m.shape();
    if m.is_empty() {
        return Ok((Matrix::zeros(c, r), 0));
    }
    let svd = to_faer(m).thin_svd().map_err(|_| LinalgError::SvdFailed)?;
    let (u, sv, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let cutoff = rank_tol * sv[0];
    let rank = sv.iter().take_while(|&&s| s > cutoff && s > 0.0).count();
    // pinv = V_r Σ_r⁻¹ U_rᵀ
    let pinv = Matrix::from_fn(c, r, |i, j| {
        (0..rank).map(|k| v[(i, k)] * u[(j, k)] / sv[k]).sum()
    });
    Ok((pinv, rank))
}

pub fn pseudoinverse(m: &Matrix, rank_tol: Option<f64>) -> Result<Matrix> {
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(m));
    pseudoinverse_with_rank(m, tol).map(|(p, _)| p)
}

pub fn trace(m: &Matrix) -> f64 {
    m.diagonal().sum()
}

/// Standard normal tail probability, `Q(x) = 0.5 erfc(x / √2)`.
pub fn q_function(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return 1.0;
    }
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

pub fn erf(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

/// Serde adapter: matrices travel as row-major nested arrays.
pub mod rows_serde {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Serde wrapper for a matrix in row-major form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowMajor(#[serde(with = "rows_serde")] pub Matrix);
