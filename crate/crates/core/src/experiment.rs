//! Experiment configuration and the command implementations behind the CLI.
//!
//! Every command is a pure function of the configuration (plus any artifact
//! passed in explicitly), so reruns produce byte-identical outputs.

use crate::bounds::{self, BoundsError, BoundsReport, Envelope};
use crate::ctrlmaps::{self, ControllerMap, CtrlError, MapDescriptor, MapSpec, StabilityCheck};
use crate::linalg::{self, Matrix, RowMajor, PROB_FLOOR};
use crate::lti::{self, LtiError, LtiSystem, Selector, TrainingData};
use crate::mc::{self, McError, McSetup, Mode, MonteCarloReport};
use crate::sensitivity::{self, BSource, JacobianBundle, PerturbationModel, SensitivityError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("nominal controller violates closed-loop stability: rho(A+BK) = {0}")]
    NotStabilizing(f64),
    #[error("data collection: {0}")]
    Data(#[from] LtiError),
    #[error("controller design: {0}")]
    Map(#[from] CtrlError),
    #[error("sensitivity: {0}")]
    Sensitivity(#[from] SensitivityError),
    #[error("bounds: {0}")]
    Bounds(#[from] BoundsError),
    #[error("monte carlo: {0}")]
    MonteCarlo(#[from] McError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Vehicle { ts: f64 },
    Explicit { a: RowMajor, b: RowMajor },
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::Vehicle { ts: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SupportSpec {
    /// `size` indices drawn uniformly from `vec(X)`.
    Size(usize),
    /// Explicit 0-based indices into `vec(X)`.
    Indices(Vec<usize>),
}

impl Default for SupportSpec {
    fn default() -> Self {
        SupportSpec::Size(50)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSweep {
    Values(Vec<f64>),
    LogRange { from: f64, to: f64, points: usize },
}

impl Default for SigmaSweep {
    fn default() -> Self {
        SigmaSweep::LogRange {
            from: 1e-5,
            to: 1e-1,
            points: 10,
        }
    }
}

impl SigmaSweep {
    pub fn values(&self) -> Vec<f64> {
        match self {
            SigmaSweep::Values(v) => v.clone(),
            SigmaSweep::LogRange { from, to, points } => log_grid(*from, *to, *points),
        }
    }
}

/// `points` log-spaced values from `from` to `to`, endpoints exact.
pub fn log_grid(from: f64, to: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![from],
        _ => {
            let (a, b) = (from.log10(), to.log10());
            (0..points)
                .map(|i| match i {
                    0 => from,
                    i if i == points - 1 => to,
                    i => 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Config {
    pub horizons: Vec<usize>,
    pub trials: usize,
    pub support_size: usize,
    /// Overrides the top-level map for this study.
    pub map: Option<MapSpec>,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            horizons: vec![100, 200, 400],
            trials: 15,
            support_size: 50,
            map: Some(MapSpec::Pinv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub horizon: usize,
    pub experiments: usize,
    pub selector: Selector,
    pub map: MapSpec,
    pub support: SupportSpec,
    pub sigmas: SigmaSweep,
    pub trials: usize,
    pub mode: Mode,
    pub seed: u64,
    pub b_source: BSource,
    pub fig2: Fig2Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::default(),
            horizon: 200,
            experiments: 1,
            selector: Selector::FullTrajectory,
            map: MapSpec::default(),
            support: SupportSpec::default(),
            sigmas: SigmaSweep::default(),
            trials: 2000,
            mode: Mode::Exact,
            seed: 0,
            b_source: BSource::True,
            fig2: Fig2Config::default(),
        }
    }
}

// stream tags for derived seeds
const DATA_STREAM: u64 = 0;
const SUPPORT_STREAM: u64 = 1;
const MC_STREAM: u64 = 2;
const FIG2_STREAM: u64 = 3;

/// SplitMix64 finalizer applied to `seed` combined with `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn system(&self) -> Result<LtiSystem> {
        Ok(match &self.system {
            SystemSpec::Vehicle { ts } => lti::vehicle_model(*ts)?,
            SystemSpec::Explicit { a, b } => LtiSystem::new(a.0.clone(), b.0.clone())?,
        })
    }

    pub fn build_map(&self) -> Result<Box<dyn ControllerMap>> {
        let sys = self.system()?;
        Ok(self.map.build(sys.n(), sys.m())?)
    }

    fn vec_len(&self, sys: &LtiSystem) -> usize {
        self.selector.rows(sys.n(), self.horizon) * self.experiments
    }

    /// Checks every module precondition that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        let sys = self.system()?;
        if self.horizon == 0 || self.experiments == 0 {
            return bad("horizon and experiments must be at least 1".into());
        }
        // both maps work on snapshot matrices of a single full trajectory
        if self.selector != Selector::FullTrajectory || self.experiments != 1 {
            return bad(
                "the data-driven maps need experiments = 1 with the full_trajectory selector"
                    .into(),
            );
        }
        self.map.build(sys.n(), sys.m())?;
        let len = self.vec_len(&sys);
        match &self.support {
            SupportSpec::Size(k) if *k == 0 || *k > len => {
                return bad(format!("support size {k} must be in 1..={len}"));
            }
            SupportSpec::Indices(idx) => {
                PerturbationModel::uniform(idx.clone(), 1.0, len)?;
                if idx.is_empty() {
                    return bad("support must not be empty".into());
                }
            }
            _ => {}
        }
        let sigmas = self.sigmas.values();
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("sigma sweep must contain positive finite values".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        let f2 = &self.fig2;
        if f2.horizons.is_empty() || f2.horizons.contains(&0) || f2.trials == 0 {
            return bad("fig2 needs non-empty positive horizons and trials >= 1".into());
        }
        for &t in &f2.horizons {
            if f2.support_size == 0 || f2.support_size > sys.n() * t {
                return bad(format!(
                    "fig2 support size {} does not fit T = {t}",
                    f2.support_size
                ));
            }
        }
        if let Some(m) = &f2.map {
            m.build(sys.n(), sys.m())?;
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, DATA_STREAM)
    }

    pub fn mc_seed(&self) -> u64 {
        derive_seed(self.seed, MC_STREAM)
    }
}

pub fn collect_data(cfg: &ExperimentConfig) -> Result<TrainingData> {
    let sys = cfg.system()?;
    Ok(lti::collect_seeded(
        &sys,
        cfg.experiments,
        cfg.horizon,
        cfg.selector.clone(),
        cfg.data_seed(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub map: MapDescriptor,
    pub gain: RowMajor,
    pub rho: f64,
    pub stable: bool,
    pub rank_deficient: bool,
}

pub fn design(cfg: &ExperimentConfig, data: &TrainingData) -> Result<Design> {
    let sys = cfg.system()?;
    let map = cfg.build_map()?;
    let out = map.evaluate(data)?;
    let StabilityCheck { stable, rho } = ctrlmaps::check_stability(&sys, &out.gain)?;
    Ok(Design {
        map: map.descriptor(),
        gain: RowMajor(out.gain),
        rho,
        stable,
        rank_deficient: out.rank_deficient,
    })
}

pub fn support(cfg: &ExperimentConfig, data: &TrainingData) -> Result<Vec<usize>> {
    match &cfg.support {
        SupportSpec::Indices(idx) => Ok(idx.clone()),
        SupportSpec::Size(k) => {
            let mut rng = mc::trial_rng(derive_seed(cfg.seed, SUPPORT_STREAM), 0);
            Ok(mc::random_support(data.vec_len(), *k, &mut rng)?)
        }
    }
}

/// `B` for the `B·J_i` products according to the configured source.
pub fn b_matrix(source: BSource, sys: &LtiSystem, data: &TrainingData) -> Result<Matrix> {
    Ok(match source {
        BSource::True => sys.b().clone(),
        BSource::Identified => ctrlmaps::identify(data)?.b_hat,
    })
}

pub fn jacobian(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    support: &[usize],
) -> Result<JacobianBundle> {
    let sys = cfg.system()?;
    let map = cfg.build_map()?;
    let bundle = sensitivity::fd_jacobian(map.as_ref(), data, support)?;
    if !bundle.is_complete() {
        return Ok(bundle);
    }
    Ok(bundle.with_b(b_matrix(cfg.b_source, &sys, data)?, cfg.b_source)?)
}

fn nominal_closed_loop(cfg: &ExperimentConfig, data: &TrainingData) -> Result<Matrix> {
    let sys = cfg.system()?;
    let k = cfg.build_map()?.evaluate(data)?.gain;
    let check = ctrlmaps::check_stability(&sys, &k)?;
    if !check.stable {
        return Err(ExperimentError::NotStabilizing(check.rho));
    }
    Ok(sys.closed_loop(&k)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsPoint {
    pub sigma: f64,
    pub report: BoundsReport,
    pub envelope: Envelope,
}

/// Bounds at one uniform σ, given the nominal closed loop and a bundle with `B` attached.
pub fn bounds_at(a_cl: &Matrix, bundle: &JacobianBundle, sigma: f64) -> Result<BoundsPoint> {
    let sigmas = vec![sigma; bundle.support.len()];
    let params = bounds::variance_params(bundle, &sigmas)?;
    let report = bounds::instability_bounds(a_cl, params, bundle.b_source())?;
    let envelope = bounds::jmax_envelope(bundle, &sigmas)?;
    Ok(BoundsPoint {
        sigma,
        report,
        envelope,
    })
}

pub fn bounds_sweep(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    bundle: &JacobianBundle,
) -> Result<Vec<BoundsPoint>> {
    let a_cl = nominal_closed_loop(cfg, data)?;
    cfg.sigmas
        .values()
        .into_iter()
        .map(|s| bounds_at(&a_cl, bundle, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub sigma: f64,
    pub report: MonteCarloReport,
}

pub fn mc_sweep(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    bundle: Option<&JacobianBundle>,
) -> Result<Vec<McPoint>> {
    let sys = cfg.system()?;
    let map = cfg.build_map()?;
    let support = match bundle {
        Some(b) => b.support.clone(),
        None => support(cfg, data)?,
    };
    let setup = McSetup {
        sys: &sys,
        data,
        map: map.as_ref(),
        bundle,
    };
    cfg.sigmas
        .values()
        .into_iter()
        .map(|sigma| {
            let model = PerturbationModel::uniform(support.clone(), sigma, data.vec_len())?;
            let report =
                mc::estimate_instability(&setup, &model, cfg.trials, cfg.mode, cfg.mc_seed())?;
            Ok(McPoint { sigma, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub sigma: f64,
    pub bounds: Option<BoundsPoint>,
    pub mc: Option<MonteCarloReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1 {
    pub design: Design,
    pub support: Vec<usize>,
    pub rows: Vec<Fig1Row>,
}

/// Bounds and Monte Carlo estimate over the σ sweep. A failure at one σ is
/// recorded on its row and the sweep continues.
pub fn run_fig1(cfg: &ExperimentConfig) -> Result<Fig1> {
    let sys = cfg.system()?;
    let data = collect_data(cfg)?;
    let design = design(cfg, &data)?;
    if !design.stable {
        return Err(ExperimentError::NotStabilizing(design.rho));
    }
    let support = support(cfg, &data)?;
    let bundle = jacobian(cfg, &data, &support)?;
    let a_cl = sys.closed_loop(&design.gain.0)?;
    let map = cfg.build_map()?;
    let setup = McSetup {
        sys: &sys,
        data: &data,
        map: map.as_ref(),
        bundle: bundle.products().is_ok().then_some(&bundle),
    };
    let rows = cfg
        .sigmas
        .values()
        .into_iter()
        .map(|sigma| {
            let mut errors = Vec::new();
            let bounds = bounds_at(&a_cl, &bundle, sigma)
                .map_err(|e| errors.push(e.to_string()))
                .ok();
            let mc = PerturbationModel::uniform(support.clone(), sigma, data.vec_len())
                .map_err(ExperimentError::from)
                .and_then(|model| {
                    Ok(mc::estimate_instability(
                        &setup,
                        &model,
                        cfg.trials,
                        cfg.mode,
                        cfg.mc_seed(),
                    )?)
                })
                .map_err(|e| errors.push(e.to_string()))
                .ok();
            Fig1Row {
                sigma,
                bounds,
                mc,
                error: (!errors.is_empty()).then(|| errors.join("; ")),
            }
        })
        .collect();
    Ok(Fig1 {
        design,
        support,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub horizon: usize,
    pub mean_j_max: f64,
    pub std_j_max: f64,
    pub samples: Vec<f64>,
    pub envelopes: Vec<Envelope>,
}

/// Mean and sample standard deviation of `J_max` over seeded trials for each horizon.
///
/// Trial `s` uses the same input stream at every horizon, so shorter records
/// are prefixes of longer ones.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<Vec<Fig2Row>> {
    let sys = cfg.system()?;
    let f2 = &cfg.fig2;
    let map = f2
        .map
        .as_ref()
        .unwrap_or(&cfg.map)
        .build(sys.n(), sys.m())?;
    let mut rows = Vec::with_capacity(f2.horizons.len());
    for &horizon in &f2.horizons {
        let mut samples = Vec::with_capacity(f2.trials);
        let mut envelopes = Vec::with_capacity(f2.trials);
        for s in 0..f2.trials as u64 {
            let trial_seed = derive_seed(derive_seed(cfg.seed, FIG2_STREAM), s);
            let data = lti::collect_seeded(&sys, 1, horizon, Selector::FullTrajectory, trial_seed)?;
            let mut rng = mc::trial_rng(derive_seed(trial_seed, SUPPORT_STREAM), horizon as u64);
            let support = mc::random_support(data.vec_len(), f2.support_size, &mut rng)?;
            let bundle = sensitivity::fd_jacobian(map.as_ref(), &data, &support)?
                .with_b(b_matrix(cfg.b_source, &sys, &data)?, cfg.b_source)?;
            let envelope = bounds::jmax_envelope(&bundle, &vec![1.0; support.len()])?;
            samples.push(envelope.j_max);
            envelopes.push(envelope);
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(Fig2Row {
            horizon,
            mean_j_max: mean,
            std_j_max: var.sqrt(),
            samples,
            envelopes,
        });
    }
    Ok(rows)
}

/// Shortest round-trip formatting for CSV cells.
fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:e}")
    }
}

pub fn collect_csv(data: &TrainingData) -> String {
    format!(
        "n,m,T,N,p,seed\n{},{},{},{},{},{}\n",
        data.n,
        data.m,
        data.horizon,
        data.experiments,
        data.p(),
        data.seed.map_or_else(String::new, |s| s.to_string())
    )
}

pub fn design_csv(d: &Design) -> String {
    format!(
        "map,rho,stable,rank_deficient\n{},{},{},{}\n",
        d.map.name,
        num(d.rho),
        d.stable,
        d.rank_deficient
    )
}

pub fn jacobian_csv(bundle: &JacobianBundle) -> String {
    let mut out = String::from("index,step,j_norm,bj_norm\n");
    let products = bundle.products().ok();
    for (k, (&idx, &h)) in bundle.support.iter().zip(&bundle.steps).enumerate() {
        let j_norm = bundle
            .j_matrix(k)
            .ok()
            .and_then(|j| linalg::spectral_norm(&j).ok())
            .unwrap_or(f64::NAN);
        let bj_norm = products
            .and_then(|p| linalg::spectral_norm(&p[k]).ok())
            .unwrap_or(f64::NAN);
        let _ = writeln!(out, "{idx},{},{},{}", num(h), num(j_norm), num(bj_norm));
    }
    out
}

pub fn bounds_csv(points: &[BoundsPoint]) -> String {
    let mut out =
        String::from("sigma_scale,v_bar,v_lower,kappa,mu,rho,lower,upper_raw,upper_clamped\n");
    for p in points {
        let r = &p.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            num(p.sigma),
            num(r.v_bar),
            num(r.v_lower),
            num(r.kappa),
            num(r.mu),
            num(r.rho_nominal),
            num(r.lower),
            num(r.upper_raw),
            num(r.upper_clamped)
        );
    }
    out
}

pub fn mc_csv(points: &[McPoint]) -> String {
    let mut out = String::from("sigma_scale,trials,p_hat,ci_low,ci_high,mode,seed\n");
    for p in points {
        let r = &p.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            num(p.sigma),
            r.trials,
            num(r.p_hat),
            num(r.ci_low),
            num(r.ci_high),
            r.mode,
            r.seed
        );
    }
    out
}

/// Bound columns are floored at `PROB_FLOOR`; Monte Carlo columns are raw.
pub fn fig1_csv(fig: &Fig1) -> String {
    let mut out = String::from("sigma,lower,p_hat,ci_low,ci_high,upper_clamped\n");
    for row in &fig.rows {
        let (lower, upper) = row.bounds.as_ref().map_or((f64::NAN, f64::NAN), |b| {
            (
                b.report.lower.max(PROB_FLOOR),
                b.report.upper_clamped.max(PROB_FLOOR),
            )
        });
        let (p, lo, hi) = row.mc.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| {
            (m.p_hat, m.ci_low, m.ci_high)
        });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            num(row.sigma),
            num(lower),
            num(p),
            num(lo),
            num(hi),
            num(upper)
        );
    }
    out
}

pub fn fig2_csv(rows: &[Fig2Row]) -> String {
    let mut out = String::from("T,mean_j_max,std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.horizon,
            num(r.mean_j_max),
            num(r.std_j_max)
        );
    }
    out
}
