//! Monte Carlo estimate of `P[ρ(Ã_cl) ≥ 1]` under Gaussian perturbation of `X`.
//!
//! Each trial draws from its own ChaCha stream keyed by `(seed, trial)`, so the
//! report does not depend on how trials are scheduled across threads.

use crate::ctrlmaps::ControllerMap;
use crate::linalg::{self, Matrix};
use crate::lti::{LtiSystem, TrainingData};
use crate::sensitivity::{self, JacobianBundle, PerturbationModel, SensitivityError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("cannot draw {k} distinct indices from {len}")]
    SupportTooLarge { k: usize, len: usize },
    #[error("nominal controller is not stabilizing (rho = {0}); refusing to estimate")]
    NominalUnstable(f64),
    #[error("first-order mode needs a Jacobian bundle with B attached")]
    MissingBundle,
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Map(#[from] crate::ctrlmaps::CtrlError),
    #[error(transparent)]
    Data(#[from] crate::lti::LtiError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, McError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Recompute `K̃ = F(U, X + Z)` every trial.
    Exact,
    /// Use `A_cl + Σ z_i B J_i`.
    FirstOrder,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Exact => "exact",
            Mode::FirstOrder => "first_order",
        })
    }
}

/// Independent `N(0, σ_i²)` draws, one per support entry.
pub fn sample_z<R: RngCore + ?Sized>(model: &PerturbationModel, rng: &mut R) -> Vec<f64> {
    model
        .sigmas()
        .iter()
        .map(|s| {
            let e: f64 = StandardNormal.sample(rng);
            s * e
        })
        .collect()
}

/// `k` distinct indices drawn uniformly from `0..len`, in increasing order.
pub fn random_support<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > len {
        return Err(McError::SupportTooLarge { k, len });
    }
    let mut idx = rand::seq::index::sample(rng, len, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    (
        (center - half).max(0.0).min(p),
        (center + half).min(1.0).max(p),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub unstable_count: usize,
    pub skipped: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl MonteCarloReport {
    pub fn stable_count(&self) -> usize {
        self.trials - self.unstable_count - self.skipped
    }

    /// Full width of the confidence interval.
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Everything a Monte Carlo run needs besides the perturbation scale.
pub struct McSetup<'a> {
    pub sys: &'a LtiSystem,
    pub data: &'a TrainingData,
    pub map: &'a dyn ControllerMap,
    /// Required for [`Mode::FirstOrder`].
    pub bundle: Option<&'a JacobianBundle>,
}

/// Per-trial generator: the `trial`-th stream of the ChaCha key derived from `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

#[derive(Clone, Copy)]
enum Outcome {
    Stable,
    Unstable,
    Skipped,
}

pub fn estimate_instability(
    setup: &McSetup<'_>,
    model: &PerturbationModel,
    trials: usize,
    mode: Mode,
    seed: u64,
) -> Result<MonteCarloReport> {
    let nominal = setup.map.evaluate(setup.data)?.gain;
    let a_cl = setup.sys.closed_loop(&nominal)?;
    let rho = linalg::spectral_radius(&a_cl)?;
    if rho >= 1.0 {
        return Err(McError::NominalUnstable(rho));
    }
    if mode == Mode::FirstOrder {
        let bundle = setup.bundle.ok_or(McError::MissingBundle)?;
        bundle.products().map_err(|_| McError::MissingBundle)?;
        if bundle.support != model.support() {
            return Err(SensitivityError::Dimension(
                "bundle support differs from the model support".into(),
            )
            .into());
        }
    }

    let run = |t: usize| -> Outcome {
        let mut rng = trial_rng(seed, t as u64);
        let z = sample_z(model, &mut rng);
        let closed: Option<Matrix> = match mode {
            Mode::Exact => setup
                .data
                .perturbed(model.support(), &z)
                .ok()
                .and_then(|d| setup.map.evaluate(&d).ok())
                .and_then(|out| setup.sys.closed_loop(&out.gain).ok()),
            Mode::FirstOrder => setup
                .bundle
                .and_then(|b| sensitivity::first_order_acl(&a_cl, b, &z).ok()),
        };
        match closed.and_then(|m| linalg::spectral_radius(&m).ok()) {
            Some(r) if r >= 1.0 => Outcome::Unstable,
            Some(_) => Outcome::Stable,
            None => Outcome::Skipped,
        }
    };
    let outcomes: Vec<Outcome> = (0..trials).into_par_iter().map(run).collect();

    let unstable_count = outcomes
        .iter()
        .filter(|o| matches!(o, Outcome::Unstable))
        .count();
    let skipped = outcomes
        .iter()
        .filter(|o| matches!(o, Outcome::Skipped))
        .count();
    let used = trials - skipped;
    let p_hat = if used == 0 {
        0.0
    } else {
        unstable_count as f64 / used as f64
    };
    let (ci_low, ci_high) = wilson_interval(unstable_count, used, Z_95);
    Ok(MonteCarloReport {
        trials,
        unstable_count,
        skipped,
        p_hat,
        ci_low,
        ci_high,
        mode,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrlmaps::{CeLqrMap, LqrWeights, PinvMap};
    use crate::lti::{collect_seeded, vehicle_model, Selector};
    use crate::sensitivity::{fd_jacobian, BSource};

    fn setup_data() -> (LtiSystem, TrainingData) {
        let sys = vehicle_model(0.1).unwrap();
        let data = collect_seeded(&sys, 1, 100, Selector::FullTrajectory, 1).unwrap();
        (sys, data)
    }

    fn support_model(data: &TrainingData, sigma: f64, seed: u64) -> PerturbationModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = random_support(data.vec_len(), 20, &mut rng).unwrap();
        PerturbationModel::uniform(support, sigma, data.vec_len()).unwrap()
    }

    #[test]
    fn tiny_sigma_draws_are_tiny() {
        let model = PerturbationModel::uniform(vec![0, 1, 2], 1e-30, 3).unwrap();
        let z = sample_z(&model, &mut trial_rng(1, 0));
        assert!(z.iter().all(|v| v.abs() < 1e-28));
    }

    #[test]
    fn sample_mean_is_centered() {
        let model = PerturbationModel::new(vec![0, 1], vec![1.0, 3.0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..draws {
            let z = sample_z(&model, &mut rng);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for (s, sigma) in sums.iter().zip([1.0, 3.0]) {
            assert!((s / draws as f64).abs() <= 4.0 * sigma / (draws as f64).sqrt());
        }
    }

    #[test]
    fn draws_replay_under_seed() {
        let model = PerturbationModel::uniform(vec![3, 7], 0.5, 10).unwrap();
        assert_eq!(
            sample_z(&model, &mut trial_rng(5, 9)),
            sample_z(&model, &mut trial_rng(5, 9))
        );
        assert_ne!(
            sample_z(&model, &mut trial_rng(5, 9)),
            sample_z(&model, &mut trial_rng(5, 10))
        );
    }

    #[test]
    fn support_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            random_support(6, 6, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
        let one = random_support(6, 1, &mut rng).unwrap();
        assert!(one.len() == 1 && one[0] < 6);
        assert_eq!(
            random_support(3, 4, &mut rng),
            Err(McError::SupportTooLarge { k: 4, len: 3 })
        );
    }

    #[test]
    fn support_is_uniform() {
        // chi-square over 20 cells, 19 dof; 99.9% quantile is about 43.8
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cells = 20;
        let draws = 100_000;
        let mut counts = vec![0usize; cells];
        for _ in 0..draws {
            for i in random_support(cells, 3, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = (3 * draws) as f64 / cells as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn wilson_coverage() {
        let (p, n, reps) = (0.1, 2000, 500);
        let mut covered = 0;
        for r in 0..reps {
            let mut rng = trial_rng(77, r);
            let hits = (0..n).filter(|_| rng.random::<f64>() < p).count();
            let (lo, hi) = wilson_interval(hits, n, Z_95);
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        assert!(
            covered as f64 / reps as f64 >= 0.93,
            "coverage {covered}/{reps}"
        );
        let (lo, hi) = wilson_interval(0, 100, Z_95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn negligible_noise_is_always_stable() {
        let (sys, data) = setup_data();
        let map = CeLqrMap::new(LqrWeights::identity(4, 2));
        let model = support_model(&data, 1e-12, 3);
        let setup = McSetup {
            sys: &sys,
            data: &data,
            map: &map,
            bundle: None,
        };
        let r = estimate_instability(&setup, &model, 2000, Mode::Exact, 1).unwrap();
        assert_eq!(r.unstable_count, 0);
        assert_eq!(r.p_hat, 0.0);
        assert!(r.ci_low <= r.p_hat && r.p_hat <= r.ci_high);
        assert_eq!(r.stable_count() + r.unstable_count + r.skipped, r.trials);
    }

    #[test]
    fn refuses_unstable_nominal() {
        let (sys, data) = setup_data();
        let model = support_model(&data, 1.0, 3);
        let setup = McSetup {
            sys: &sys,
            data: &data,
            map: &PinvMap,
            bundle: None,
        };
        assert!(matches!(
            estimate_instability(&setup, &model, 10, Mode::Exact, 1),
            Err(McError::NominalUnstable(_))
        ));
    }

    #[test]
    fn first_order_requires_bundle() {
        let (sys, data) = setup_data();
        let map = CeLqrMap::new(LqrWeights::identity(4, 2));
        let model = support_model(&data, 1.0, 3);
        let setup = McSetup {
            sys: &sys,
            data: &data,
            map: &map,
            bundle: None,
        };
        assert_eq!(
            estimate_instability(&setup, &model, 10, Mode::FirstOrder, 1),
            Err(McError::MissingBundle)
        );
    }

    #[test]
    fn modes_agree_in_linear_regime_and_replay() {
        let (sys, data) = setup_data();
        let map = CeLqrMap::new(LqrWeights::identity(4, 2));
        let model = support_model(&data, 1e-4, 3);
        let bundle = fd_jacobian(&map, &data, model.support())
            .unwrap()
            .with_b(sys.b().clone(), BSource::True)
            .unwrap();
        let setup = McSetup {
            sys: &sys,
            data: &data,
            map: &map,
            bundle: Some(&bundle),
        };
        let exact = estimate_instability(&setup, &model, 500, Mode::Exact, 9).unwrap();
        let fo = estimate_instability(&setup, &model, 500, Mode::FirstOrder, 9).unwrap();
        assert!(exact.ci_low <= fo.ci_high && fo.ci_low <= exact.ci_high);
        let again = estimate_instability(&setup, &model, 500, Mode::FirstOrder, 9).unwrap();
        assert_eq!(fo, again);
    }
}
