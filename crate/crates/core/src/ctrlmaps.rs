//! Data-driven controller maps `K = F(U, X)`.
//!
//! Every map works on a [`TrainingData`] record whose `X` may have been
//! perturbed; `U` travels with the record. The sign convention is `u = Kx`,
//! so the closed loop is `A + BK`.

use crate::linalg::{self, Matrix, RowMajor};
use crate::lti::{LtiError, LtiSystem, TrainingData};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtrlError {
    #[error(transparent)]
    Data(#[from] LtiError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("Riccati iteration did not converge after {iterations} iterations (last step {last_step:e}); identified pair is likely not stabilizable")]
    DareNoConvergence { iterations: usize, last_step: f64 },
    #[error("invalid LQR weights: {0}")]
    Weights(String),
}

pub type Result<T> = std::result::Result<T, CtrlError>;

/// Gain produced by a map, with a flag for rank-deficient regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct MapOutput {
    pub gain: Matrix,
    pub rank_deficient: bool,
}

/// Name and hyperparameters of a map, as selected on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDescriptor {
    pub name: String,
    pub params: serde_json::Value,
}

/// A deterministic data-driven design procedure.
pub trait ControllerMap: Send + Sync {
    fn evaluate(&self, data: &TrainingData) -> Result<MapOutput>;
    fn descriptor(&self) -> MapDescriptor;
}

/// `K = U0 · pinv(X0)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PinvMap;

impl ControllerMap for PinvMap {
    fn evaluate(&self, data: &TrainingData) -> Result<MapOutput> {
        pinv_map(data)
    }

    fn descriptor(&self) -> MapDescriptor {
        MapDescriptor {
            name: "pinv".into(),
            params: serde_json::json!({}),
        }
    }
}

pub fn pinv_map(data: &TrainingData) -> Result<MapOutput> {
    let snap = data.snapshot_matrices()?;
    let tol = linalg::default_rank_tol(&snap.x0);
    let (pinv, rank) = linalg::pseudoinverse_with_rank(&snap.x0, tol)?;
    Ok(MapOutput {
        gain: &snap.u0 * pinv,
        rank_deficient: rank < data.n,
    })
}

/// Least-squares model `[Â B̂] = X1 · pinv([X0; U0])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Identified {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    pub rank_deficient: bool,
}

pub fn identify(data: &TrainingData) -> Result<Identified> {
    let snap = data.snapshot_matrices()?;
    let (n, m, t) = (data.n, data.m, data.horizon);
    let mut regressor = Matrix::zeros(n + m, t);
    regressor.rows_mut(0, n).copy_from(&snap.x0);
    regressor.rows_mut(n, m).copy_from(&snap.u0);
    let tol = linalg::default_rank_tol(&regressor);
    let (pinv, rank) = linalg::pseudoinverse_with_rank(&regressor, tol)?;
    let theta = &snap.x1 * pinv;
    Ok(Identified {
        a_hat: theta.columns(0, n).into_owned(),
        b_hat: theta.columns(n, m).into_owned(),
        rank_deficient: rank < n + m,
    })
}

/// Symmetric PSD state weight and symmetric PD input weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    q: Matrix,
    r: Matrix,
}

impl LqrWeights {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        let symmetric =
            |m: &Matrix| m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !symmetric(&q) || !symmetric(&r) {
            return Err(CtrlError::Weights(
                "Q and R must be square and symmetric".into(),
            ));
        }
        if linalg::eigenvalues(&q)?.iter().any(|l| l.re < -1e-12) {
            return Err(CtrlError::Weights("Q must be positive semidefinite".into()));
        }
        if r.clone().cholesky().is_none() {
            return Err(CtrlError::Weights("R must be positive definite".into()));
        }
        Ok(Self { q, r })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: Matrix::identity(n, n),
            r: Matrix::identity(m, m),
        }
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }
}

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 100_000;

/// Fixed-point Riccati iteration
/// `P ← Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, started at `P = Q`.
pub fn dare_solve(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(CtrlError::Weights(
            "DARE operands have inconsistent shapes".into(),
        ));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut last_step = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let pa = &p * a;
        let pb = &p * b;
        let s = r + &bt * &pb;
        let bpa = &bt * &pa;
        let gain = match s.clone().cholesky() {
            Some(ch) => ch.solve(&bpa),
            None => s.lu().solve(&bpa).ok_or_else(|| {
                CtrlError::Weights("R + BᵀPB became singular during iteration".into())
            })?,
        };
        let mut next = q + &at * &pa - (&at * &pb) * gain;
        next = (&next + next.transpose()) * 0.5;
        last_step = (&next - &p).norm();
        if !last_step.is_finite() {
            break;
        }
        p = next;
        if last_step <= DARE_TOL {
            return Ok(p);
        }
    }
    Err(CtrlError::DareNoConvergence {
        iterations: DARE_MAX_ITER,
        last_step,
    })
}

/// `K = −(R + BᵀPB)⁻¹ BᵀPA` for a solved Riccati matrix `P`.
pub fn lqr_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let rhs = &bt * p * a;
    let k = s
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CtrlError::Weights("R + BᵀPB is singular".into()))?;
    Ok(-k)
}

/// Certainty equivalence: identify `(Â, B̂)` by least squares, then LQR.
#[derive(Debug, Clone, PartialEq)]
pub struct CeLqrMap {
    pub weights: LqrWeights,
}

impl CeLqrMap {
    pub fn new(weights: LqrWeights) -> Self {
        Self { weights }
    }
}

impl ControllerMap for CeLqrMap {
    fn evaluate(&self, data: &TrainingData) -> Result<MapOutput> {
        ce_lqr_map(data, &self.weights)
    }

    fn descriptor(&self) -> MapDescriptor {
        MapDescriptor {
            name: "ce-lqr".into(),
            params: serde_json::json!({
                "q": linalg::to_rows(&self.weights.q),
                "r": linalg::to_rows(&self.weights.r),
            }),
        }
    }
}

pub fn ce_lqr_map(data: &TrainingData, weights: &LqrWeights) -> Result<MapOutput> {
    let id = identify(data)?;
    if weights.q.nrows() != data.n || weights.r.nrows() != data.m {
        return Err(CtrlError::Weights(
            "weight dimensions do not match the data".into(),
        ));
    }
    let p = dare_solve(&id.a_hat, &id.b_hat, &weights.q, &weights.r)?;
    Ok(MapOutput {
        gain: lqr_gain(&id.a_hat, &id.b_hat, &weights.r, &p)?,
        rank_deficient: id.rank_deficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub stable: bool,
    pub rho: f64,
}

/// Checks `ρ(A + BK) < 1`.
pub fn check_stability(sys: &LtiSystem, k: &Matrix) -> Result<StabilityCheck> {
    let rho = linalg::spectral_radius(&sys.closed_loop(k)?)?;
    Ok(StabilityCheck {
        stable: rho < 1.0,
        rho,
    })
}

/// Serializable map selection: `{"name": "pinv"}` or
/// `{"name": "ce-lqr", "q": [[..]], "r": [[..]]}` (weights default to identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum MapSpec {
    #[serde(rename = "pinv")]
    Pinv,
    #[serde(rename = "ce-lqr")]
    CeLqr {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<RowMajor>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<RowMajor>,
    },
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec::CeLqr { q: None, r: None }
    }
}

impl MapSpec {
    /// Parses the short descriptor names used on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "pinv" => Some(MapSpec::Pinv),
            "ce-lqr" => Some(MapSpec::default()),
            _ => None,
        }
    }

    pub fn build(&self, n: usize, m: usize) -> Result<Box<dyn ControllerMap>> {
        Ok(match self {
            MapSpec::Pinv => Box::new(PinvMap),
            MapSpec::CeLqr { q, r } => {
                let q = q
                    .as_ref()
                    .map_or_else(|| Matrix::identity(n, n), |q| q.0.clone());
                let r = r
                    .as_ref()
                    .map_or_else(|| Matrix::identity(m, m), |r| r.0.clone());
                if q.nrows() != n || r.nrows() != m {
                    return Err(CtrlError::Weights(format!(
                        "Q must be {n}x{n} and R {m}x{m}"
                    )));
                }
                Box::new(CeLqrMap::new(LqrWeights::new(q, r)?))
            }
        })
    }
}
