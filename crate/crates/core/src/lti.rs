//! Discrete-time plants, trajectory simulation and experiment records.

use crate::linalg::{self, Matrix, RowMajor, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, LtiError>;

/// `x(t+1) = A x(t) + B u(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: Matrix,
    b: Matrix,
}

impl LtiSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(LtiError::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(LtiError::Dimension(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        linalg::ensure_finite(&a)?;
        linalg::ensure_finite(&b)?;
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `A + BK`.
    pub fn closed_loop(&self, k: &Matrix) -> Result<Matrix> {
        if k.shape() != (self.m(), self.n()) {
            return Err(LtiError::Dimension(format!(
                "gain must be {}x{}, got {}x{}",
                self.m(),
                self.n(),
                k.nrows(),
                k.ncols()
            )));
        }
        Ok(&self.a + &self.b * k)
    }
}

/// Planar vehicle: two decoupled double integrators sampled at `ts`.
pub fn vehicle_model(ts: f64) -> Result<LtiSystem> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(LtiError::Invalid(format!(
            "sampling time must be positive, got {ts}"
        )));
    }
    #[rustfmt::skip]
    let a = Matrix::from_row_slice(4, 4, &[
        1.0, ts,  0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, ts,
        0.0, 0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let b = Matrix::from_row_slice(4, 2, &[
        0.0, 0.0,
        ts,  0.0,
        0.0, 0.0,
        0.0, ts,
    ]);
    LtiSystem::new(a, b)
}

/// Returns the states `x(1), ..., x(T)` driven by `inputs = u(0), ..., u(T-1)`.
pub fn simulate(sys: &LtiSystem, x0: &Vector, inputs: &[Vector]) -> Result<Vec<Vector>> {
    if x0.len() != sys.n() {
        return Err(LtiError::Dimension(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            sys.n()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut x = x0.clone();
    for (t, u) in inputs.iter().enumerate() {
        if u.len() != sys.m() {
            return Err(LtiError::Dimension(format!(
                "input at t={t} has length {}, expected {}",
                u.len(),
                sys.m()
            )));
        }
        x = sys.a() * &x + sys.b() * u;
        states.push(x.clone());
    }
    Ok(states)
}

/// Which samples of each stacked trajectory `(x(1); ...; x(T))` are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    FullTrajectory,
    FinalState,
    Custom { c: RowMajor },
}

impl Selector {
    /// Number of recorded rows `p`.
    pub fn rows(&self, n: usize, horizon: usize) -> usize {
        match self {
            Selector::FullTrajectory => n * horizon,
            Selector::FinalState => n,
            Selector::Custom { c } => c.0.nrows(),
        }
    }

    /// The `p x nT` selection matrix `C`.
    pub fn matrix(&self, n: usize, horizon: usize) -> Matrix {
        match self {
            Selector::FullTrajectory => Matrix::identity(n * horizon, n * horizon),
            Selector::FinalState => {
                let mut c = Matrix::zeros(n, n * horizon);
                c.view_mut((0, n * (horizon - 1)), (n, n))
                    .fill_with_identity();
                c
            }
            Selector::Custom { c } => c.0.clone(),
        }
    }

    fn apply(&self, stacked: &Vector, n: usize, horizon: usize) -> Vector {
        match self {
            Selector::FullTrajectory => stacked.clone(),
            Selector::FinalState => stacked.rows(n * (horizon - 1), n).into_owned(),
            Selector::Custom { c } => &c.0 * stacked,
        }
    }
}

/// Distribution of the excitation inputs applied during data collection.
pub trait InputLaw {
    fn draw(&self, m: usize, rng: &mut dyn rand::RngCore) -> Vector;
}

/// I.i.d. zero-mean Gaussian inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInput {
    pub std_dev: f64,
}

impl Default for GaussianInput {
    fn default() -> Self {
        Self { std_dev: 1.0 }
    }
}

impl InputLaw for GaussianInput {
    fn draw(&self, m: usize, rng: &mut dyn rand::RngCore) -> Vector {
        Vector::from_fn(m, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.std_dev * z
        })
    }
}

/// Record of `N` experiments of length `T`.
///
/// Column `i` of `u` stacks `u_i(0), ..., u_i(T-1)`; column `i` of `x` is
/// `C (x_i(1); ...; x_i(T))`. Initial states are kept in `x0s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrainingDataDoc", into = "TrainingDataDoc")]
pub struct TrainingData {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub experiments: usize,
    pub selector: Selector,
    pub u: Matrix,
    pub x: Matrix,
    pub x0s: Matrix,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingDataDoc {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "N")]
    experiments: usize,
    selector: Selector,
    #[serde(rename = "U")]
    u: RowMajor,
    #[serde(rename = "X")]
    x: RowMajor,
    x0s: RowMajor,
    seed: Option<u64>,
}

impl From<TrainingData> for TrainingDataDoc {
    fn from(d: TrainingData) -> Self {
        Self {
            n: d.n,
            m: d.m,
            horizon: d.horizon,
            experiments: d.experiments,
            selector: d.selector,
            u: RowMajor(d.u),
            x: RowMajor(d.x),
            x0s: RowMajor(d.x0s),
            seed: d.seed,
        }
    }
}

impl TryFrom<TrainingDataDoc> for TrainingData {
    type Error = LtiError;

    fn try_from(doc: TrainingDataDoc) -> Result<Self> {
        let data = TrainingData {
            n: doc.n,
            m: doc.m,
            horizon: doc.horizon,
            experiments: doc.experiments,
            selector: doc.selector,
            u: doc.u.0,
            x: doc.x.0,
            x0s: doc.x0s.0,
            seed: doc.seed,
        };
        data.validate()?;
        Ok(data)
    }
}

impl TrainingData {
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    /// Length of `vec(X)`.
    pub fn vec_len(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = |what: &str, m: &Matrix, r: usize, c: usize| {
            if m.shape() != (r, c) {
                Err(LtiError::Dimension(format!(
                    "{what} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        if self.horizon == 0 || self.experiments == 0 {
            return Err(LtiError::Invalid("T and N must be at least 1".into()));
        }
        let p = self.selector.rows(self.n, self.horizon);
        if let Selector::Custom { c } = &self.selector {
            if c.0.ncols() != self.n * self.horizon {
                return Err(LtiError::Dimension(
                    "custom selector must have nT columns".into(),
                ));
            }
        }
        dims("U", &self.u, self.m * self.horizon, self.experiments)?;
        dims("X", &self.x, p, self.experiments)?;
        dims("x0s", &self.x0s, self.n, self.experiments)?;
        linalg::ensure_finite(&self.u)?;
        linalg::ensure_finite(&self.x)?;
        Ok(())
    }

    /// Copy with `X` replaced; used to evaluate maps at perturbed data.
    pub fn with_x(&self, x: Matrix) -> Result<Self> {
        if x.shape() != self.x.shape() {
            return Err(LtiError::Dimension(
                "replacement X has the wrong shape".into(),
            ));
        }
        Ok(Self { x, ..self.clone() })
    }

    /// Adds `values[k]` to entry `support[k]` of `vec(X)`.
    pub fn perturbed(&self, support: &[usize], values: &[f64]) -> Result<Self> {
        if support.len() != values.len() {
            return Err(LtiError::Dimension(
                "support and values differ in length".into(),
            ));
        }
        let mut out = self.clone();
        let flat = out.x.as_mut_slice();
        for (&i, &z) in support.iter().zip(values) {
            let slot = flat
                .get_mut(i)
                .ok_or_else(|| LtiError::Dimension(format!("index {i} outside vec(X)")))?;
            *slot += z;
        }
        Ok(out)
    }

    /// Split a single full-trajectory experiment into `(X0, X1, U0)`.
    ///
    /// `X0 = [x(0), ..., x(T-1)]`, `X1 = [x(1), ..., x(T)]`, `U0 = [u(0), ..., u(T-1)]`.
    pub fn snapshot_matrices(&self) -> Result<Snapshots> {
        if self.selector != Selector::FullTrajectory {
            return Err(LtiError::Invalid(
                "snapshots need the full-trajectory selector".into(),
            ));
        }
        if self.experiments != 1 {
            return Err(LtiError::Invalid(format!(
                "snapshots need a single experiment, got N = {}",
                self.experiments
            )));
        }
        let (n, m, t) = (self.n, self.m, self.horizon);
        let x1 = Matrix::from_column_slice(n, t, self.x.as_slice());
        let u0 = Matrix::from_column_slice(m, t, self.u.as_slice());
        let mut x0 = Matrix::zeros(n, t);
        x0.column_mut(0).copy_from(&self.x0s.column(0));
        if t > 1 {
            x0.columns_mut(1, t - 1).copy_from(&x1.columns(0, t - 1));
        }
        Ok(Snapshots { x0, x1, u0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots {
    pub x0: Matrix,
    pub x1: Matrix,
    pub u0: Matrix,
}

/// Runs `experiments` experiments from `x0 = 0` with inputs from `law`.
pub fn collect<R: Rng>(
    sys: &LtiSystem,
    experiments: usize,
    horizon: usize,
    selector: Selector,
    law: &dyn InputLaw,
    rng: &mut R,
) -> Result<TrainingData> {
    collect_from(
        sys,
        &Matrix::zeros(sys.n(), experiments.max(1)),
        experiments,
        horizon,
        selector,
        law,
        rng,
    )
}

/// Like [`collect`] but with explicit initial states (one column per experiment).
pub fn collect_from<R: Rng>(
    sys: &LtiSystem,
    x0s: &Matrix,
    experiments: usize,
    horizon: usize,
    selector: Selector,
    law: &dyn InputLaw,
    rng: &mut R,
) -> Result<TrainingData> {
    let (n, m) = (sys.n(), sys.m());
    if experiments == 0 || horizon == 0 {
        return Err(LtiError::Invalid("N and T must be at least 1".into()));
    }
    if x0s.shape() != (n, experiments) {
        return Err(LtiError::Dimension("x0s must be n x N".into()));
    }
    let p = selector.rows(n, horizon);
    if let Selector::Custom { c } = &selector {
        if c.0.ncols() != n * horizon {
            return Err(LtiError::Dimension(
                "custom selector must have nT columns".into(),
            ));
        }
    }
    let mut u = Matrix::zeros(m * horizon, experiments);
    let mut x = Matrix::zeros(p, experiments);
    for i in 0..experiments {
        let inputs: Vec<Vector> = (0..horizon).map(|_| law.draw(m, rng)).collect();
        let x0 = x0s.column(i).into_owned();
        let states = simulate(sys, &x0, &inputs)?;
        for (t, ut) in inputs.iter().enumerate() {
            u.view_mut((t * m, i), (m, 1)).copy_from(ut);
        }
        let mut stacked = Vector::zeros(n * horizon);
        for (t, xt) in states.iter().enumerate() {
            stacked.rows_mut(t * n, n).copy_from(xt);
        }
        x.column_mut(i)
            .copy_from(&selector.apply(&stacked, n, horizon));
    }
    Ok(TrainingData {
        n,
        m,
        horizon,
        experiments,
        selector,
        u,
        x,
        x0s: x0s.clone(),
        seed: None,
    })
}

/// [`collect`] with Gaussian inputs and a ChaCha stream keyed by `seed`.
pub fn collect_seeded(
    sys: &LtiSystem,
    experiments: usize,
    horizon: usize,
    selector: Selector,
    seed: u64,
) -> Result<TrainingData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = collect(
        sys,
        experiments,
        horizon,
        selector,
        &GaussianInput::default(),
        &mut rng,
    )?;
    data.seed = Some(seed);
    Ok(data)
}
