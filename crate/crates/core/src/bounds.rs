//! Closed-form instability certificates for the perturbed closed loop.
//!
//! With `Δ = Σ z_i B J_i` and Gaussian `z_i`, the lower bound comes from the
//! folded-normal law of `tr(A_cl + Δ)` and the upper bound from a matrix
//! Gaussian tail inequality combined with an eigenvalue-perturbation estimate.

use crate::linalg::{self, Matrix, PROB_FLOOR};
use crate::sensitivity::{BSource, JacobianBundle, SensitivityError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("nominal closed loop is not stable (rho = {0}); bounds require rho < 1")]
    NotStable(f64),
    #[error("nominal closed loop is singular; its condition number is infinite")]
    SingularClosedLoop,
    #[error("closed loop is not diagonalizable")]
    NotDiagonalizable,
    #[error("support is empty")]
    EmptySupport,
    #[error("{sigmas} standard deviations for {support} support entries")]
    Length { sigmas: usize, support: usize },
    #[error("variance parameter {v_bar} exceeds its envelope {envelope}")]
    EnvelopeViolated { v_bar: f64, envelope: f64 },
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

pub const ENVELOPE_TOL: f64 = 1e-10;

fn products_for<'a>(bundle: &'a JacobianBundle, sigmas: &[f64]) -> Result<&'a [Matrix]> {
    let products = bundle.products()?;
    if products.len() != sigmas.len() {
        return Err(BoundsError::Length {
            sigmas: sigmas.len(),
            support: products.len(),
        });
    }
    Ok(products)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    /// `max{‖Σ σ²BJ(BJ)ᵀ‖, ‖Σ σ²(BJ)ᵀBJ‖}`.
    pub v_bar: f64,
    /// `Σ σ² tr(BJ)²`.
    pub v_lower: f64,
}

pub fn variance_params(bundle: &JacobianBundle, sigmas: &[f64]) -> Result<VarianceParams> {
    let products = products_for(bundle, sigmas)?;
    let n = bundle.n;
    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n);
    let mut v_lower = 0.0;
    for (bj, s) in products.iter().zip(sigmas) {
        let w = s * s;
        left.gemm(w, bj, &bj.transpose(), 1.0);
        right.gemm(w, &bj.transpose(), bj, 1.0);
        v_lower += w * linalg::trace(bj).powi(2);
    }
    let v_bar = linalg::spectral_norm(&left)?.max(linalg::spectral_norm(&right)?);
    Ok(VarianceParams { v_bar, v_lower })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub v_bar: f64,
    pub v_lower: f64,
    /// `‖A_cl‖‖A_cl⁻¹‖`, the constant used in the upper bound.
    pub kappa: f64,
    /// Condition number of the eigenvector matrix, when `A_cl` is diagonalizable.
    pub kappa_v: Option<f64>,
    pub mu: f64,
    pub rho_nominal: f64,
    pub lower: f64,
    pub upper_raw: f64,
    pub upper_clamped: f64,
    pub mode: Option<BSource>,
}

fn floor_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

/// Lower and upper bounds on `P[ρ(Ã_cl) ≥ 1]`.
///
/// A zero variance parameter yields an exactly zero bound; otherwise bounds
/// below `PROB_FLOOR` are reported as `PROB_FLOOR`.
pub fn instability_bounds(
    a_cl: &Matrix,
    params: VarianceParams,
    mode: Option<BSource>,
) -> Result<BoundsReport> {
    let spectrum = linalg::spectrum(a_cl)?;
    let rho = spectrum.spectral_radius;
    if rho >= 1.0 {
        return Err(BoundsError::NotStable(rho));
    }
    let kappa = match linalg::condition_number_spectral(a_cl) {
        Ok(k) => k,
        Err(linalg::LinalgError::Singular) => return Err(BoundsError::SingularClosedLoop),
        Err(e) => return Err(e.into()),
    };
    let n = a_cl.nrows() as f64;
    let mu = linalg::trace(a_cl);
    let VarianceParams { v_bar, v_lower } = params;

    let lower = if v_lower > 0.0 {
        let s = v_lower.sqrt();
        floor_prob((linalg::q_function((n + mu) / s) + linalg::q_function((n - mu) / s)).min(1.0))
    } else if mu.abs() >= n {
        1.0
    } else {
        0.0
    };
    let upper_raw = if v_bar > 0.0 {
        floor_prob(2.0 * n * (-(1.0 - rho).powi(2) / (2.0 * v_bar * kappa * kappa)).exp())
    } else {
        0.0
    };
    Ok(BoundsReport {
        v_bar,
        v_lower,
        kappa,
        kappa_v: spectrum.kappa_v,
        mu,
        rho_nominal: rho,
        lower,
        upper_raw,
        upper_clamped: upper_raw.min(1.0),
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub gamma: f64,
    pub support_size: usize,
    /// `2Q(2/√(γ²|supp|))`.
    pub bound: f64,
    /// The same quantity written as `1 − erf(1/√(0.5γ²|supp|))`.
    pub bound_erf: f64,
}

/// Support-size rate bound, `γ = min_i σ_i · min diag(BJ_i)`.
pub fn rate_certificate(bundle: &JacobianBundle, sigmas: &[f64]) -> Result<RateBound> {
    let products = products_for(bundle, sigmas)?;
    if products.is_empty() {
        return Err(BoundsError::EmptySupport);
    }
    let gamma = products
        .iter()
        .zip(sigmas)
        .map(|(bj, s)| s * bj.diagonal().min())
        .fold(f64::INFINITY, f64::min);
    Ok(rate_bound(gamma, products.len()))
}

pub fn rate_bound(gamma: f64, support_size: usize) -> RateBound {
    let g2k = gamma * gamma * support_size as f64;
    RateBound {
        gamma,
        support_size,
        bound: 2.0 * linalg::q_function(2.0 / g2k.sqrt()),
        bound_erf: 1.0 - linalg::erf(1.0 / (0.5 * g2k).sqrt()),
    }
}

/// Whether `v_lower ≥ |supp| n² γ²`, the step that links the rate bound to
/// the trace lower bound. It can fail for mixed-sign diagonals.
pub fn rate_chain_holds(v_lower: f64, n: usize, rate: &RateBound) -> bool {
    v_lower >= rate.support_size as f64 * (n * n) as f64 * rate.gamma * rate.gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sigma_max: f64,
    /// `max_i ‖B J_i‖`.
    pub j_max: f64,
    /// `σ_max² |supp| J_max²`.
    pub envelope: f64,
    pub v_bar: f64,
}

/// Computes the `v̄` envelope and fails if `v̄` exceeds it by more than `ENVELOPE_TOL`.
pub fn jmax_envelope(bundle: &JacobianBundle, sigmas: &[f64]) -> Result<Envelope> {
    let products = products_for(bundle, sigmas)?;
    if products.is_empty() {
        return Err(BoundsError::EmptySupport);
    }
    let sigma_max = sigmas.iter().copied().fold(0.0, f64::max);
    let j_max = products
        .iter()
        .map(linalg::spectral_norm)
        .collect::<linalg::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let envelope = sigma_max * sigma_max * products.len() as f64 * j_max * j_max;
    let v_bar = variance_params(bundle, sigmas)?.v_bar;
    if v_bar > envelope + ENVELOPE_TOL {
        return Err(BoundsError::EnvelopeViolated { v_bar, envelope });
    }
    Ok(Envelope {
        sigma_max,
        j_max,
        envelope,
        v_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BauerFikeReport {
    pub samples: usize,
    pub kappa_v: f64,
    pub kappa: f64,
    /// Samples with `ρ(A_cl + Δ) > ρ(A_cl) + κ(V)‖Δ‖`.
    pub violations: usize,
    /// Samples violating the same inequality with `κ = ‖A_cl‖‖A_cl⁻¹‖`.
    pub violations_kappa: usize,
}

/// Checks the spectral-radius perturbation estimate on each `Δ` in `deltas`.
pub fn bauer_fike_check(a_cl: &Matrix, deltas: &[Matrix]) -> Result<BauerFikeReport> {
    let spectrum = linalg::spectrum(a_cl)?;
    let kappa_v = spectrum.kappa_v.ok_or(BoundsError::NotDiagonalizable)?;
    let kappa = linalg::condition_number_spectral(a_cl).unwrap_or(f64::INFINITY);
    let rho = spectrum.spectral_radius;
    // slack for rounding in the eigen-solver
    let slack = 1e-12 * (1.0 + rho);
    let mut violations = 0;
    let mut violations_kappa = 0;
    for d in deltas {
        let rho_pert = linalg::spectral_radius(&(a_cl + d))?;
        let norm = linalg::spectral_norm(d)?;
        if rho_pert > rho + kappa_v * norm + slack {
            violations += 1;
        }
        if rho_pert > rho + kappa * norm + slack {
            violations_kappa += 1;
        }
    }
    Ok(BauerFikeReport {
        samples: deltas.len(),
        kappa_v,
        kappa,
        violations,
        violations_kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::JacobianBundle;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Bundle whose `B·J_i` equal `products` when `B = I` and `m = n`.
    fn bundle_from(products: &[Matrix]) -> JacobianBundle {
        let n = products[0].nrows();
        let value = serde_json::json!({
            "m": n,
            "n": n,
            "indices": (0..products.len()).collect::<Vec<_>>(),
            "steps": vec![1e-6; products.len()],
            "columns": products.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>(),
            "b": linalg::to_rows(&Matrix::identity(n, n)),
            "b_source": "true",
        });
        serde_json::from_value(value).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_identity_term() {
        let b = bundle_from(&[Matrix::identity(3, 3)]);
        let v = variance_params(&b, &[1.0]).unwrap();
        assert_abs_diff_eq!(v.v_bar, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v.v_lower, 9.0, epsilon = 1e-14);
        let zero = variance_params(&b, &[0.0]).unwrap();
        assert_eq!((zero.v_bar, zero.v_lower), (0.0, 0.0));
    }

    #[test]
    fn variance_matches_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ps: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 3)).collect();
            let sig = [0.3, 1.7, 0.9];
            let got = variance_params(&bundle_from(&ps), &sig).unwrap();
            let mut l = Matrix::zeros(3, 3);
            let mut r = Matrix::zeros(3, 3);
            let mut vl = 0.0;
            for (p, s) in ps.iter().zip(sig) {
                l += p * p.transpose() * (s * s);
                r += p.transpose() * p * (s * s);
                vl += (s * p[(0, 0)] + s * p[(1, 1)] + s * p[(2, 2)]).powi(2);
            }
            // symmetric PSD: spectral norm is the top eigenvalue
            let top = |m: &Matrix| m.clone().symmetric_eigen().eigenvalues.max();
            assert!((got.v_bar - top(&l).max(top(&r))).abs() <= 1e-12);
            assert!((got.v_lower - vl).abs() <= 1e-12);
        }
    }

    #[test]
    fn instability_bounds_limits() {
        let a_cl = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, -0.5, 0.2, -0.2]));
        // mu = 0: lower = 2Q(n/sqrt(v))
        let r = instability_bounds(
            &a_cl,
            VarianceParams {
                v_bar: 1.0,
                v_lower: 4.0,
            },
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(r.mu, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.lower, 2.0 * linalg::q_function(2.0), epsilon = 1e-15);
        let tiny = instability_bounds(
            &a_cl,
            VarianceParams {
                v_bar: 1e-6,
                v_lower: 1e-6,
            },
            None,
        )
        .unwrap();
        assert_eq!(tiny.upper_raw, PROB_FLOOR);
        assert_eq!(tiny.lower, PROB_FLOOR);
        let zero = instability_bounds(
            &a_cl,
            VarianceParams {
                v_bar: 0.0,
                v_lower: 0.0,
            },
            None,
        )
        .unwrap();
        assert_eq!((zero.lower, zero.upper_raw), (0.0, 0.0));
        let huge = instability_bounds(
            &a_cl,
            VarianceParams {
                v_bar: 1e12,
                v_lower: 1e12,
            },
            None,
        )
        .unwrap();
        assert!(huge.lower > 0.999);
        assert!(huge.upper_raw > 7.9 && huge.upper_clamped == 1.0);
        assert_abs_diff_eq!(huge.kappa, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(huge.kappa_v.unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn instability_bounds_reject_unstable_and_singular() {
        let unstable = Matrix::from_diagonal_element(2, 2, 1.0);
        let p = VarianceParams {
            v_bar: 1.0,
            v_lower: 1.0,
        };
        assert!(matches!(
            instability_bounds(&unstable, p, None),
            Err(BoundsError::NotStable(_))
        ));
        let singular = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert_eq!(
            instability_bounds(&singular, p, None),
            Err(BoundsError::SingularClosedLoop)
        );
    }

    proptest! {
        #[test]
        fn lower_monotone_in_sigma(v in 1e-4f64..1e3, dv in 1e-6f64..10.0, mu in -3.9f64..3.9) {
            prop_assume!(mu.abs() > 1e-3);
            let a_cl = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![mu / 4.0; 4]));
            let at = |vl| instability_bounds(&a_cl, VarianceParams { v_bar: 1.0, v_lower: vl }, None).unwrap().lower;
            prop_assert!(at(v + dv) >= at(v) - 1e-15);
        }

        #[test]
        fn upper_monotone(v in 1e-4f64..1e2, f in 1.0f64..3.0, r in 0.05f64..0.9, dr in 0.0f64..0.09) {
            let diag = |rho: f64| Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![rho, rho * 0.5]));
            let up = |a: &Matrix, vb| instability_bounds(a, VarianceParams { v_bar: vb, v_lower: 1.0 }, None).unwrap().upper_raw;
            prop_assert!(up(&diag(r), v * f) >= up(&diag(r), v));
            prop_assert!(up(&diag(r + dr), v) >= up(&diag(r), v) - 1e-15);
            // larger kappa at the same spectral radius
            let skewed = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![r, r * 0.5 / f]));
            prop_assert!(up(&skewed, v) >= up(&diag(r), v) - 1e-15);
        }
    }

    #[test]
    fn rate_bound_identity_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let gamma = rng.random_range(-2.0..2.0);
            let k = rng.random_range(1..500);
            let r = rate_bound(gamma, k);
            assert!((r.bound - r.bound_erf).abs() <= 1e-12);
        }
        assert_eq!(rate_bound(0.0, 10).bound, 0.0);
        assert!(rate_bound(0.5, 10_000_000).bound > 0.99);
    }

    #[test]
    fn rate_uses_smallest_scaled_diagonal() {
        let p1 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.2]));
        let p2 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.4, 0.3]));
        let r = rate_certificate(&bundle_from(&[p1, p2]), &[1.0, 0.25]).unwrap();
        assert_abs_diff_eq!(r.gamma, 0.075, epsilon = 1e-15);
        assert_eq!(r.support_size, 2);
        let v = variance_params(&bundle_from(&[Matrix::identity(2, 2) * 0.3]), &[1.0]).unwrap();
        let rate = rate_certificate(&bundle_from(&[Matrix::identity(2, 2) * 0.3]), &[1.0]).unwrap();
        assert!(rate_chain_holds(v.v_lower, 2, &rate));
    }

    #[test]
    fn envelope_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let single = bundle_from(&[random(&mut rng, 3)]);
        let e = jmax_envelope(&single, &[0.7]).unwrap();
        assert!(e.v_bar <= e.envelope + ENVELOPE_TOL);
        let ps: Vec<Matrix> = (0..5).map(|_| random(&mut rng, 3)).collect();
        let b = bundle_from(&ps);
        let sig = [0.1, 0.2, 0.3, 0.4, 0.5];
        let e1 = jmax_envelope(&b, &sig).unwrap();
        let doubled: Vec<f64> = sig.iter().map(|s| s * 2.0).collect();
        let e2 = jmax_envelope(&b, &doubled).unwrap();
        assert!((e2.envelope - 4.0 * e1.envelope).abs() <= 1e-12 * e2.envelope);
        assert!(e1.v_bar <= e1.envelope);
    }

    #[test]
    fn bauer_fike_on_normal_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a_cl = Matrix::from_row_slice(2, 2, &[0.5, -0.3, 0.3, 0.5]);
        let zero = bauer_fike_check(&a_cl, &[Matrix::zeros(2, 2)]).unwrap();
        assert_eq!(zero.violations, 0);
        let deltas: Vec<Matrix> = (0..1000)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-4.0..0.0));
                Matrix::from_fn(2, 2, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    scale * v
                })
            })
            .collect();
        let r = bauer_fike_check(&a_cl, &deltas).unwrap();
        assert_abs_diff_eq!(r.kappa_v, 1.0, epsilon = 1e-8);
        assert_eq!(r.violations, 0);
        let jordan = Matrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        assert_eq!(
            bauer_fike_check(&jordan, &deltas),
            Err(BoundsError::NotDiagonalizable)
        );
    }
}
