//! Finite-difference sensitivity of a controller map with respect to `vec(X)`,
//! and the linearized perturbed closed loop `A_cl + Σ z_i B J_i`.

use crate::ctrlmaps::{ControllerMap, CtrlError};
use crate::linalg::{self, Matrix, RowMajor};
use crate::lti::{LtiError, LtiSystem, TrainingData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("invalid perturbation model: {0}")]
    Model(String),
    #[error("map failed at the nominal data: {0}")]
    Nominal(CtrlError),
    #[error("nominal controller violates closed-loop stability (rho = {0})")]
    NotStabilizing(f64),
    #[error("bundle has no B·J products attached")]
    MissingProducts,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Map(#[from] CtrlError),
    #[error(transparent)]
    Data(#[from] LtiError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, SensitivityError>;

/// Compromised entries of `vec(X)` (0-based, column-stacked) and their standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    support: Vec<usize>,
    sigmas: Vec<f64>,
}

impl PerturbationModel {
    /// `vec_len` is the length of `vec(X)` the indices refer to.
    pub fn new(support: Vec<usize>, sigmas: Vec<f64>, vec_len: usize) -> Result<Self> {
        if support.len() != sigmas.len() {
            return Err(SensitivityError::Model(format!(
                "{} indices but {} standard deviations",
                support.len(),
                sigmas.len()
            )));
        }
        let mut sorted = support.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(SensitivityError::Model(
                "support indices must be unique".into(),
            ));
        }
        if let Some(&bad) = support.iter().find(|&&i| i >= vec_len) {
            return Err(SensitivityError::Model(format!(
                "index {bad} outside vec(X) of length {vec_len}"
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(SensitivityError::Model(
                "standard deviations must be positive and finite".into(),
            ));
        }
        Ok(Self { support, sigmas })
    }

    pub fn uniform(support: Vec<usize>, sigma: f64, vec_len: usize) -> Result<Self> {
        let sigmas = vec![sigma; support.len()];
        Self::new(support, sigmas, vec_len)
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Same support with every σ multiplied by `scale > 0`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        let sigmas = self.sigmas.iter().map(|s| s * scale).collect();
        let len = self.support.iter().max().map_or(0, |m| m + 1);
        Self::new(self.support.clone(), sigmas, len)
    }
}

/// Where the `B` in `B·J_i` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BSource {
    /// Ground-truth plant input matrix (validation experiments).
    True,
    /// Least-squares estimate `B̂` from the nominal data.
    Identified,
}

impl std::fmt::Display for BSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BSource::True => "true",
            BSource::Identified => "identified",
        })
    }
}

/// A probe of the map that failed while differencing one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFailure {
    pub index: usize,
    pub reason: String,
}

/// Jacobian columns of `vec(F)` on the perturbation support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BundleDoc", into = "BundleDoc")]
pub struct JacobianBundle {
    pub m: usize,
    pub n: usize,
    pub support: Vec<usize>,
    pub steps: Vec<f64>,
    /// `vec(∂F/∂x_i)`, length `m·n` each; empty for failed columns.
    pub columns: Vec<Vec<f64>>,
    pub failures: Vec<ColumnFailure>,
    b: Option<(Matrix, BSource)>,
    products: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDoc {
    m: usize,
    n: usize,
    indices: Vec<usize>,
    steps: Vec<f64>,
    columns: Vec<Vec<f64>>,
    #[serde(default)]
    failures: Vec<ColumnFailure>,
    #[serde(default)]
    b: Option<RowMajor>,
    #[serde(default)]
    b_source: Option<BSource>,
}

impl From<JacobianBundle> for BundleDoc {
    fn from(j: JacobianBundle) -> Self {
        let (b, b_source) = match j.b {
            Some((b, src)) => (Some(RowMajor(b)), Some(src)),
            None => (None, None),
        };
        Self {
            m: j.m,
            n: j.n,
            indices: j.support,
            steps: j.steps,
            columns: j.columns,
            failures: j.failures,
            b,
            b_source,
        }
    }
}

impl TryFrom<BundleDoc> for JacobianBundle {
    type Error = SensitivityError;

    fn try_from(doc: BundleDoc) -> Result<Self> {
        let k = doc.indices.len();
        if doc.steps.len() != k || doc.columns.len() != k {
            return Err(SensitivityError::Dimension(
                "indices, steps and columns differ in length".into(),
            ));
        }
        if doc
            .columns
            .iter()
            .any(|c| !c.is_empty() && c.len() != doc.m * doc.n)
        {
            return Err(SensitivityError::Dimension(
                "Jacobian column has the wrong length".into(),
            ));
        }
        let bundle = JacobianBundle {
            m: doc.m,
            n: doc.n,
            support: doc.indices,
            steps: doc.steps,
            columns: doc.columns,
            failures: doc.failures,
            b: None,
            products: Vec::new(),
        };
        match (doc.b, doc.b_source) {
            (Some(b), Some(src)) => bundle.with_b(b.0, src),
            (None, None) => Ok(bundle),
            _ => Err(SensitivityError::Dimension(
                "b and b_source must be given together".into(),
            )),
        }
    }
}

impl JacobianBundle {
    /// `J_i = vec⁻¹(J_i^v)` as an `m x n` matrix, for the `k`-th support entry.
    pub fn j_matrix(&self, k: usize) -> Result<Matrix> {
        Ok(linalg::vec_inverse(&self.columns[k], self.m, self.n)?)
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    /// Attaches `B` and caches every `B·J_i`.
    pub fn with_b(mut self, b: Matrix, source: BSource) -> Result<Self> {
        if b.shape() != (self.n, self.m) {
            return Err(SensitivityError::Dimension(format!(
                "B must be {}x{}, got {}x{}",
                self.n,
                self.m,
                b.nrows(),
                b.ncols()
            )));
        }
        if !self.is_complete() {
            return Err(SensitivityError::Dimension(format!(
                "{} Jacobian columns failed; products need every column",
                self.failures.len()
            )));
        }
        self.products = (0..self.support.len())
            .map(|k| self.j_matrix(k).map(|j| &b * j))
            .collect::<Result<_>>()?;
        self.b = Some((b, source));
        Ok(self)
    }

    /// Cached `B·J_i`, one per support entry.
    pub fn products(&self) -> Result<&[Matrix]> {
        if self.b.is_none() {
            return Err(SensitivityError::MissingProducts);
        }
        Ok(&self.products)
    }

    pub fn b_source(&self) -> Option<BSource> {
        self.b.as_ref().map(|(_, s)| *s)
    }
}

/// Default central-difference step for entry value `x`: `cbrt(eps)·max(1, |x|)`.
pub fn default_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// `[vec F(X + hE_i) − vec F(X − hE_i)] / 2h`.
pub fn fd_column(
    map: &dyn ControllerMap,
    data: &TrainingData,
    index: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let plus = map.evaluate(&data.perturbed(&[index], &[h])?)?.gain;
    let minus = map.evaluate(&data.perturbed(&[index], &[-h])?)?.gain;
    Ok(linalg::vec(&((plus - minus) / (2.0 * h)))
        .as_slice()
        .to_vec())
}

/// Central-difference Jacobian on `support`, with steps scaled by `step_factor`.
pub fn fd_jacobian_scaled(
    map: &dyn ControllerMap,
    data: &TrainingData,
    support: &[usize],
    step_factor: f64,
) -> Result<JacobianBundle> {
    let nominal = map.evaluate(data).map_err(SensitivityError::Nominal)?.gain;
    let (m, n) = nominal.shape();
    let flat = data.x.as_slice();
    if let Some(&bad) = support.iter().find(|&&i| i >= flat.len()) {
        return Err(SensitivityError::Model(format!(
            "index {bad} outside vec(X)"
        )));
    }
    let steps: Vec<f64> = support
        .iter()
        .map(|&i| step_factor * default_step(flat[i]))
        .collect();
    let results: Vec<Result<Vec<f64>>> = support
        .par_iter()
        .zip(steps.par_iter())
        .map(|(&i, &h)| fd_column(map, data, i, h))
        .collect();
    let mut columns = Vec::with_capacity(support.len());
    let mut failures = Vec::new();
    for (&index, r) in support.iter().zip(results) {
        match r {
            Ok(c) => columns.push(c),
            Err(e) => {
                failures.push(ColumnFailure {
                    index,
                    reason: e.to_string(),
                });
                columns.push(Vec::new());
            }
        }
    }
    Ok(JacobianBundle {
        m,
        n,
        support: support.to_vec(),
        steps,
        columns,
        failures,
        b: None,
        products: Vec::new(),
    })
}

pub fn fd_jacobian(
    map: &dyn ControllerMap,
    data: &TrainingData,
    support: &[usize],
) -> Result<JacobianBundle> {
    fd_jacobian_scaled(map, data, support, 1.0)
}

/// Jacobian over every entry of `vec(X)`.
pub fn fd_jacobian_full(map: &dyn ControllerMap, data: &TrainingData) -> Result<JacobianBundle> {
    let all: Vec<usize> = (0..data.vec_len()).collect();
    fd_jacobian(map, data, &all)
}

/// `A_cl + Σ z_i B J_i` using the bundle's cached products.
pub fn first_order_acl(a_cl: &Matrix, bundle: &JacobianBundle, z: &[f64]) -> Result<Matrix> {
    let products = bundle.products()?;
    if z.len() != products.len() {
        return Err(SensitivityError::Dimension(format!(
            "{} perturbation values for {} support entries",
            z.len(),
            products.len()
        )));
    }
    if a_cl.shape() != (bundle.n, bundle.n) {
        return Err(SensitivityError::Dimension(
            "A_cl has the wrong shape".into(),
        ));
    }
    let mut out = a_cl.clone();
    for (zi, bj) in z.iter().zip(products) {
        out += bj * *zi;
    }
    Ok(out)
}

/// One row of the linearization-residual study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub scale: f64,
    /// Mean of `‖Ã_exact − Ã_first_order‖` over the accepted trials.
    pub mean_residual: f64,
    /// Mean of `‖vec Z‖`.
    pub mean_z_norm: f64,
    /// `mean_residual / sqrt(mean_z_norm)`; zero when no perturbation was applied.
    pub normalized: f64,
    pub trials: usize,
    pub skipped: usize,
}

/// Compares the exact perturbed closed loop `A + B·F(U, X+Z)` with its
/// first-order model for each σ scale. Uses the ground-truth `B`.
///
/// Trial `t` at every scale reuses the same standard normal draws so that the
/// rows differ only by scale.
#[allow(clippy::too_many_arguments)]
pub fn linearization_residual(
    map: &dyn ControllerMap,
    sys: &LtiSystem,
    data: &TrainingData,
    model: &PerturbationModel,
    scales: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<ResidualRow>> {
    let nominal = map.evaluate(data).map_err(SensitivityError::Nominal)?.gain;
    let a_cl = sys.closed_loop(&nominal)?;
    let rho = linalg::spectral_radius(&a_cl)?;
    if rho >= 1.0 {
        return Err(SensitivityError::NotStabilizing(rho));
    }
    let bundle = fd_jacobian(map, data, model.support())?.with_b(sys.b().clone(), BSource::True)?;

    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(SensitivityError::Model(format!("invalid scale {scale}")));
        }
        let outcomes: Vec<Option<(f64, f64)>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let z: Vec<f64> = model
                    .sigmas()
                    .iter()
                    .map(|s| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        scale * s * e
                    })
                    .collect();
                let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let perturbed = data.perturbed(model.support(), &z).ok()?;
                let k = map.evaluate(&perturbed).ok()?.gain;
                let exact = sys.closed_loop(&k).ok()?;
                let approx = first_order_acl(&a_cl, &bundle, &z).ok()?;
                let resid = linalg::spectral_norm(&(exact - approx)).ok()?;
                Some((resid, z_norm))
            })
            .collect();
        let accepted: Vec<(f64, f64)> = outcomes.iter().flatten().copied().collect();
        let used = accepted.len();
        let (mean_residual, mean_z_norm) = if used == 0 {
            (0.0, 0.0)
        } else {
            let r = accepted.iter().map(|p| p.0).sum::<f64>() / used as f64;
            let z = accepted.iter().map(|p| p.1).sum::<f64>() / used as f64;
            (r, z)
        };
        let normalized = if mean_z_norm > 0.0 {
            mean_residual / mean_z_norm.sqrt()
        } else {
            0.0
        };
        rows.push(ResidualRow {
            scale,
            mean_residual,
            mean_z_norm,
            normalized,
            trials,
            skipped: trials - used,
        });
    }
    Ok(rows)
}
