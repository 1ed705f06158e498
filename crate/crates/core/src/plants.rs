//! Discrete-time plant models and the benchmark environments.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_shape, Error, Result};
use crate::matkit::{dare_gain, SymMatrix};

/// Gravitational acceleration used by the pendulum-family models.
pub const GRAVITY: f64 = 9.81;

/// Nominal LTI plant `x⁺ = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantLti {
    pub a_g: DMatrix<f64>,
    pub b_g: DMatrix<f64>,
    pub c_g: DMatrix<f64>,
}

impl PlantLti {
    pub fn new(a_g: DMatrix<f64>, b_g: DMatrix<f64>, c_g: DMatrix<f64>) -> Result<Self> {
        let n = a_g.nrows();
        ensure_shape("A_G", a_g.shape(), (n, n))?;
        if b_g.nrows() != n {
            return Err(contract("B_G row count must match A_G"));
        }
        if c_g.ncols() != n {
            return Err(contract("C_G column count must match A_G"));
        }
        Ok(Self { a_g, b_g, c_g })
    }

    pub fn n_state(&self) -> usize {
        self.a_g.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b_g.ncols()
    }

    pub fn n_output(&self) -> usize {
        self.c_g.nrows()
    }

    /// Stabilizability of (A, B) and detectability of (A, C), checked by
    /// solving the control and filter Riccati equations.
    pub fn check_stabilizable_detectable(&self) -> Result<()> {
        let q = SymMatrix::identity(self.n_state());
        dare_gain(&self.a_g, &self.b_g, &q, &SymMatrix::identity(self.n_input())).map_err(|e| {
            Error::Contract(format!("(A_G, B_G) is not stabilizable: {e}"))
        })?;
        dare_gain(
            &self.a_g.transpose(),
            &self.c_g.transpose(),
            &q,
            &SymMatrix::identity(self.n_output()),
        )
        .map_err(|e| Error::Contract(format!("(A_G, C_G) is not detectable: {e}")))?;
        Ok(())
    }
}

/// One step of the nominal plant. `y` is computed from the pre-step state.
pub fn step_lti(
    plant: &PlantLti,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != plant.n_state() || u.len() != plant.n_input() {
        return Err(contract(format!(
            "step_lti: expected x in R^{} and u in R^{}, got {} and {}",
            plant.n_state(),
            plant.n_input(),
            x.len(),
            u.len()
        )));
    }
    let y = &plant.c_g * x;
    let x_next = &plant.a_g * x + &plant.b_g * u;
    Ok((x_next, y))
}

/// Causal perturbation operator `q = Δ(p)` used for simulation.
pub trait Uncertainty: Send + Sync + fmt::Debug {
    fn n_p(&self) -> usize;
    fn n_q(&self) -> usize;
    /// Output at the current time given the p-trace up to and including it.
    fn eval(&self, p_history: &[DVector<f64>]) -> DVector<f64>;
    fn is_memoryless(&self) -> bool {
        true
    }
}

/// `Δ(p) = p − sin(p)` applied elementwise.
#[derive(Debug, Clone, Copy)]
pub struct SineDeficit {
    pub dim: usize,
}

impl Uncertainty for SineDeficit {
    fn n_p(&self) -> usize {
        self.dim
    }
    fn n_q(&self) -> usize {
        self.dim
    }
    fn eval(&self, p_history: &[DVector<f64>]) -> DVector<f64> {
        match p_history.last() {
            Some(p) => p.map(|v| v - v.sin()),
            None => DVector::zeros(self.dim),
        }
    }
}

/// Uncertain plant F_u(G, Δ).
#[derive(Debug, Clone)]
pub struct UncertainPlant {
    pub a_g: DMatrix<f64>,
    pub b_g1: DMatrix<f64>,
    pub b_g2: DMatrix<f64>,
    pub c_g1: DMatrix<f64>,
    pub d_g1: DMatrix<f64>,
    pub c_g2: DMatrix<f64>,
    pub delta: Arc<dyn Uncertainty>,
}

impl UncertainPlant {
    pub fn new(
        a_g: DMatrix<f64>,
        b_g1: DMatrix<f64>,
        b_g2: DMatrix<f64>,
        c_g1: DMatrix<f64>,
        d_g1: DMatrix<f64>,
        c_g2: DMatrix<f64>,
        delta: Arc<dyn Uncertainty>,
    ) -> Result<Self> {
        let n = a_g.nrows();
        ensure_shape("A_G", a_g.shape(), (n, n))?;
        let n_q = b_g1.ncols();
        let n_p = c_g1.nrows();
        ensure_shape("B_G1", b_g1.shape(), (n, n_q))?;
        if b_g2.nrows() != n {
            return Err(contract("B_G2 row count must match A_G"));
        }
        ensure_shape("C_G1", c_g1.shape(), (n_p, n))?;
        ensure_shape("D_G1", d_g1.shape(), (n_p, n_q))?;
        if c_g2.ncols() != n {
            return Err(contract("C_G2 column count must match A_G"));
        }
        if delta.n_p() != n_p || delta.n_q() != n_q {
            return Err(contract("Δ dimensions do not match (n_p, n_q)"));
        }
        Ok(Self {
            a_g,
            b_g1,
            b_g2,
            c_g1,
            d_g1,
            c_g2,
            delta,
        })
    }

    pub fn n_state(&self) -> usize {
        self.a_g.nrows()
    }
    pub fn n_input(&self) -> usize {
        self.b_g2.ncols()
    }
    pub fn n_output(&self) -> usize {
        self.c_g2.nrows()
    }
    pub fn n_p(&self) -> usize {
        self.c_g1.nrows()
    }
    pub fn n_q(&self) -> usize {
        self.b_g1.ncols()
    }

    /// The plant with Δ removed (q ≡ 0).
    pub fn nominal(&self) -> PlantLti {
        PlantLti {
            a_g: self.a_g.clone(),
            b_g: self.b_g2.clone(),
            c_g: self.c_g2.clone(),
        }
    }
}

/// Output of one uncertain-plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainStep {
    pub x_next: DVector<f64>,
    pub y: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// One step of F_u(G, Δ). `p_history` holds the p values of earlier steps;
/// the caller appends the returned `p` to it.
pub fn step_uncertain(
    plant: &UncertainPlant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    p_history: &[DVector<f64>],
) -> Result<UncertainStep> {
    if x.len() != plant.n_state() || u.len() != plant.n_input() {
        return Err(contract("step_uncertain: state or input dimension mismatch"));
    }
    if plant.d_g1.iter().any(|&v| v != 0.0) {
        return Err(Error::UnsupportedModel(
            "D_G1 ≠ 0 closes an algebraic loop through Δ; only D_G1 = 0 is simulated".into(),
        ));
    }
    let p = &plant.c_g1 * x;
    let mut hist: Vec<DVector<f64>> = Vec::with_capacity(p_history.len() + 1);
    if plant.delta.is_memoryless() {
        hist.push(p.clone());
    } else {
        hist.extend_from_slice(p_history);
        hist.push(p.clone());
    }
    let q = plant.delta.eval(&hist);
    let y = &plant.c_g2 * x;
    let x_next = &plant.a_g * x + &plant.b_g1 * &q + &plant.b_g2 * u;
    Ok(UncertainStep { x_next, y, p, q })
}

#[derive(Debug, Clone)]
pub enum PlantModel {
    Lti(PlantLti),
    Uncertain(UncertainPlant),
}

impl PlantModel {
    pub fn n_state(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_state(),
            PlantModel::Uncertain(p) => p.n_state(),
        }
    }
    pub fn n_input(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_input(),
            PlantModel::Uncertain(p) => p.n_input(),
        }
    }
    pub fn n_output(&self) -> usize {
        match self {
            PlantModel::Lti(p) => p.n_output(),
            PlantModel::Uncertain(p) => p.n_output(),
        }
    }
    pub fn output_matrix(&self) -> &DMatrix<f64> {
        match self {
            PlantModel::Lti(p) => &p.c_g,
            PlantModel::Uncertain(p) => &p.c_g2,
        }
    }
    /// Nominal LTI part (Δ removed for uncertain plants).
    pub fn nominal(&self) -> PlantLti {
        match self {
            PlantModel::Lti(p) => p.clone(),
            PlantModel::Uncertain(p) => p.nominal(),
        }
    }

    /// The same plant with its measured output divided elementwise by
    /// `normalizer`, i.e. the model as seen through the controller input.
    pub fn with_normalized_output(&self, normalizer: &[f64]) -> Self {
        let scale = |c: &DMatrix<f64>| {
            let mut c = c.clone();
            for (i, mut row) in c.row_iter_mut().enumerate() {
                row /= normalizer[i];
            }
            c
        };
        match self {
            PlantModel::Lti(p) => PlantModel::Lti(PlantLti {
                a_g: p.a_g.clone(),
                b_g: p.b_g.clone(),
                c_g: scale(&p.c_g),
            }),
            PlantModel::Uncertain(p) => {
                let mut q = p.clone();
                q.c_g2 = scale(&p.c_g2);
                PlantModel::Uncertain(q)
            }
        }
    }

    /// Advances the plant one step; returns `(x_next, y)` with y from the
    /// pre-step state.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p_history: &mut Vec<DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            PlantModel::Lti(p) => step_lti(p, x, u),
            PlantModel::Uncertain(p) => {
                let s = step_uncertain(p, x, u, p_history)?;
                if !p.delta.is_memoryless() {
                    p_history.push(s.p);
                }
                Ok((s.x_next, s.y))
            }
        }
    }
}

/// `r = alive + Σ wᵢ xᵢ² + Σ cⱼ uⱼ²` (weights carry their own sign).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticReward {
    pub alive: f64,
    pub state_weights: Vec<f64>,
    pub control_weights: Vec<f64>,
}

impl QuadraticReward {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let sx: f64 = self
            .state_weights
            .iter()
            .zip(x.iter())
            .map(|(w, v)| w * v * v)
            .sum();
        let su: f64 = self
            .control_weights
            .iter()
            .zip(u.iter())
            .map(|(w, v)| w * v * v)
            .sum();
        self.alive + sx + su
    }
}

/// Independent uniform initial state per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSampler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InitSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.lo.len(),
            self.lo.iter().zip(&self.hi).map(|(&lo, &hi)| {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    PendulumLinear,
    PendulumNonlinear,
    Cartpole,
    Pendubot,
    Vehicle,
    Power39,
}

impl EnvName {
    pub const ALL: [EnvName; 6] = [
        EnvName::PendulumLinear,
        EnvName::PendulumNonlinear,
        EnvName::Cartpole,
        EnvName::Pendubot,
        EnvName::Vehicle,
        EnvName::Power39,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvName::PendulumLinear => "pendulum-linear",
            EnvName::PendulumNonlinear => "pendulum-nonlinear",
            EnvName::Cartpole => "cartpole",
            EnvName::Pendubot => "pendubot",
            EnvName::Vehicle => "vehicle",
            EnvName::Power39 => "power39",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .iter()
            .copied()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown environment `{s}` (expected one of: {})",
                    EnvName::ALL.map(|e| e.as_str()).join(", ")
                ))
            })
    }
}

/// A benchmark task: plant, reward, observation limits and episode rules.
#[derive(Debug, Clone)]
pub struct Environment {
    pub name: EnvName,
    pub seed: u64,
    pub plant: PlantModel,
    pub reward: QuadraticReward,
    /// Per-output admissible interval; leaving it ends the episode.
    pub obs_limits: Vec<(f64, f64)>,
    /// Per-output divisor applied before the controller sees y.
    pub obs_normalizer: Vec<f64>,
    pub horizon_cap: usize,
    pub init_sampler: InitSampler,
    /// Decay rate used for training on this task.
    pub rho: f64,
    /// Default (n_ξ, n_φ).
    pub default_sizes: (usize, usize),
    /// Sector of Δ for uncertain plants.
    pub delta_sector: Option<(f64, f64)>,
}

impl Environment {
    pub fn output_in_limits(&self, y: &DVector<f64>) -> bool {
        y.iter()
            .zip(&self.obs_limits)
            .all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi)
    }

    pub fn normalize(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter().zip(&self.obs_normalizer).map(|(v, s)| v / s),
        )
    }

    /// Plant as seen by the controller (outputs already normalized).
    pub fn synthesis_plant(&self) -> PlantModel {
        self.plant.with_normalized_output(&self.obs_normalizer)
    }
}

/// Inertia, damping and Laplacian matrices of the power-network model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerData {
    #[serde(rename = "Mp")]
    pub mp: Vec<f64>,
    #[serde(rename = "D")]
    pub d: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<f64>,
}

const BUNDLED_POWER_DATA: &str = include_str!("../data/power39.json");

impl PowerData {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_POWER_DATA).expect("bundled power data is valid JSON")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dim(&self) -> Result<usize> {
        let n = (self.mp.len() as f64).sqrt().round() as usize;
        if n == 0 || n * n != self.mp.len() || self.d.len() != n * n || self.l.len() != n * n {
            return Err(contract("power data arrays must all be n×n"));
        }
        Ok(n)
    }

    /// Sanity check: L symmetric PSD with exactly one (near) zero eigenvalue,
    /// Mp positive definite.
    pub fn check(&self) -> Result<usize> {
        let n = self.dim()?;
        let l = DMatrix::from_row_slice(n, n, &self.l);
        if (&l - l.transpose()).norm() > 1e-12 * l.norm().max(1.0) {
            return Err(contract("Laplacian L is not symmetric"));
        }
        let eig = crate::matkit::sym_eig(&SymMatrix::new(l.clone())?)?;
        let tol = 1e-9 * l.norm().max(1.0);
        let zeros = eig.values.iter().filter(|v| v.abs() <= tol).count();
        if eig.values[0] < -tol || zeros != 1 {
            return Err(contract(
                "Laplacian L must be PSD with exactly one zero eigenvalue",
            ));
        }
        let mp = DMatrix::from_row_slice(n, n, &self.mp);
        crate::matkit::cholesky(&SymMatrix::new(mp)?)
            .map_err(|_| contract("inertia matrix Mp must be positive definite"))?;
        Ok(n)
    }
}

pub fn make_env(name: &str, seed: u64) -> Result<Environment> {
    make_env_with_power_data(name, seed, None)
}

/// Builds an environment; `power_data` overrides the bundled power-network
/// parameters.
pub fn make_env_with_power_data(
    name: &str,
    seed: u64,
    power_data: Option<&Path>,
) -> Result<Environment> {
    let name: EnvName = name.parse()?;
    let env = match name {
        EnvName::PendulumLinear | EnvName::PendulumNonlinear => pendulum(name, seed)?,
        EnvName::Cartpole => cartpole(seed)?,
        EnvName::Pendubot => pendubot(seed)?,
        EnvName::Vehicle => vehicle(seed)?,
        EnvName::Power39 => {
            let data = match power_data {
                Some(p) => PowerData::from_file(p)?,
                None => PowerData::bundled(),
            };
            power39(seed, &data)?
        }
    };
    Ok(env)
}

/// Fraction of the limit range used for initial states of cartpole and pendubot.
pub const UNDERACTUATED_INIT_WIDTH: f64 = 0.1;

fn middle_half(limits: &[(f64, f64)], n: usize, observed: &[usize]) -> (Vec<f64>, Vec<f64>) {
    middle_band(limits, n, observed, 0.5)
}

/// Box centred in the limits covering `width` of each limited range.
fn middle_band(
    limits: &[(f64, f64)],
    n: usize,
    observed: &[usize],
    width: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    for (k, &idx) in observed.iter().enumerate() {
        let (a, b) = limits[k];
        let mid = 0.5 * (a + b);
        let half = 0.5 * width * (b - a);
        lo[idx] = mid - half;
        hi[idx] = mid + half;
    }
    (lo, hi)
}

fn pendulum(name: EnvName, seed: u64) -> Result<Environment> {
    let (m, l, mu, dt) = (0.15, 0.5, 0.5, 0.02);
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[1.0, dt, GRAVITY * dt / l, 1.0 - mu * dt / (m * l * l)],
    );
    let b = DMatrix::from_row_slice(2, 1, &[0.0, dt / (m * l * l)]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let limits = vec![(-0.15, 0.15)];
    let (mut lo, mut hi) = middle_half(&limits, 2, &[0]);
    lo[1] = -0.05;
    hi[1] = 0.05;
    let (plant, delta_sector) = match name {
        EnvName::PendulumLinear => (PlantModel::Lti(PlantLti::new(a, b, c)?), None),
        _ => {
            let b1 = DMatrix::from_row_slice(2, 1, &[0.0, -GRAVITY * dt / l]);
            let c1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
            let plant = UncertainPlant::new(
                a,
                b1,
                b,
                c1,
                DMatrix::zeros(1, 1),
                c,
                Arc::new(SineDeficit { dim: 1 }),
            )?;
            (PlantModel::Uncertain(plant), Some((0.0, 0.41)))
        }
    };
    Ok(Environment {
        name,
        seed,
        plant,
        reward: QuadraticReward {
            alive: 1.0,
            state_weights: vec![-100.0, -10.0],
            control_weights: vec![100.0],
        },
        obs_limits: limits,
        obs_normalizer: vec![0.15],
        horizon_cap: 200,
        init_sampler: InitSampler { lo, hi },
        rho: 1.0,
        default_sizes: (16, 16),
        delta_sector,
    })
}

fn cartpole(seed: u64) -> Result<Environment> {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, -0.001, 0.02, 0.0, //
            0.0, 1.005, 0.0, 0.02, //
            0.0, -0.079, 1.0, -0.001, //
            0.0, 0.55, 0.0, 1.005,
        ],
    );
    let b = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.04, -0.04]);
    let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let limits = vec![(-1.0, 1.0), (-half_pi, half_pi)];
    // underactuated: the middle half is not recoverable even under full-state LQR
    let (lo, hi) = middle_band(&limits, 4, &[0, 1], UNDERACTUATED_INIT_WIDTH);
    Ok(Environment {
        name: EnvName::Cartpole,
        seed,
        plant: PlantModel::Lti(PlantLti::new(a, b, c)?),
        reward: QuadraticReward {
            alive: 5.0,
            state_weights: vec![-1.0, -1.0, -0.04, -0.1],
            control_weights: vec![-0.2],
        },
        obs_limits: limits,
        obs_normalizer: vec![1.0, half_pi],
        horizon_cap: 200,
        init_sampler: InitSampler { lo, hi },
        rho: 0.98,
        default_sizes: (16, 16),
        delta_sector: None,
    })
}

fn pendubot(seed: u64) -> Result<Environment> {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.01, 0.0, 0.0, //
            0.6738, 1.0, -0.2483, 0.0, //
            0.0, 0.0, 1.0, 0.01, //
            -0.6953, 0.0, 1.0532, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(4, 1, &[0.0, 0.4487, 0.0, -0.8509]);
    let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let limits = vec![(-1.0, 1.0), (-1.0, 1.0)];
    let (lo, hi) = middle_band(&limits, 4, &[0, 2], UNDERACTUATED_INIT_WIDTH);
    Ok(Environment {
        name: EnvName::Pendubot,
        seed,
        plant: PlantModel::Lti(PlantLti::new(a, b, c)?),
        reward: QuadraticReward {
            alive: 5.0,
            state_weights: vec![-1.0, -0.05, -1.0, -0.05],
            control_weights: vec![-0.2],
        },
        obs_limits: limits,
        obs_normalizer: vec![1.0, 1.0],
        horizon_cap: 200,
        init_sampler: InitSampler { lo, hi },
        rho: 0.98,
        default_sizes: (16, 16),
        delta_sector: None,
    })
}

/// Vehicle lateral-error model, forward-Euler discretized at 0.02 s with
/// zero road curvature.
fn vehicle(seed: u64) -> Result<Environment> {
    let (m, iz, a_f, b_r) = (1573.0, 2873.0, 1.1, 1.58);
    let (caf, car, u_long) = (-80000.0, -80000.0, 30.0);
    let dt = 0.02;
    let ac = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            (caf + car) / (m * u_long),
            -(caf + car) / m,
            (a_f * caf - b_r * car) / (m * u_long),
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            (a_f * caf - b_r * car) / (iz * u_long),
            -(a_f * caf - b_r * car) / iz,
            (a_f * a_f * caf + b_r * b_r * car) / (iz * u_long),
        ],
    );
    let bc = DMatrix::from_row_slice(4, 1, &[0.0, -caf / m, 0.0, -a_f * caf / iz]);
    let a = DMatrix::identity(4, 4) + ac * dt;
    let b = bc * dt;
    let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let limits = vec![(-10.0, 10.0), (-1.0, 1.0)];
    let (lo, hi) = middle_half(&limits, 4, &[0, 2]);
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    Ok(Environment {
        name: EnvName::Vehicle,
        seed,
        plant: PlantModel::Lti(PlantLti::new(a, b, c)?),
        reward: QuadraticReward {
            alive: 5.0,
            state_weights: vec![-0.01, -0.04, -1.0, -0.04],
            control_weights: vec![-72.0 / pi2],
        },
        obs_limits: limits,
        obs_normalizer: vec![10.0, 1.0],
        horizon_cap: 200,
        init_sampler: InitSampler { lo, hi },
        rho: 0.98,
        default_sizes: (16, 16),
        delta_sector: None,
    })
}

fn power39(seed: u64, data: &PowerData) -> Result<Environment> {
    let n = data.check()?;
    let dt = 0.2;
    let mp = DMatrix::from_row_slice(n, n, &data.mp);
    let d = DMatrix::from_row_slice(n, n, &data.d);
    let l = DMatrix::from_row_slice(n, n, &data.l);
    let mp_inv = crate::matkit::spd_inverse(&SymMatrix::new(mp)?)?.into_inner();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&eye);
    a.view_mut((0, n), (n, n)).copy_from(&(&eye * dt));
    a.view_mut((n, 0), (n, n)).copy_from(&(-(&mp_inv * &l) * dt));
    a.view_mut((n, n), (n, n))
        .copy_from(&(&eye - (&mp_inv * &d) * dt));
    let mut b = DMatrix::zeros(2 * n, n);
    b.view_mut((n, 0), (n, n)).copy_from(&(&mp_inv * dt));
    let mut c = DMatrix::zeros(n, 2 * n);
    c.view_mut((0, 0), (n, n)).copy_from(&eye);
    let limits = vec![(-0.5, 0.5); n];
    let observed: Vec<usize> = (0..n).collect();
    let (lo, hi) = middle_half(&limits, 2 * n, &observed);
    let state_weights = vec![-1.0; 2 * n];
    Ok(Environment {
        name: EnvName::Power39,
        seed,
        plant: PlantModel::Lti(PlantLti::new(a, b, c)?),
        reward: QuadraticReward {
            alive: 5.0,
            state_weights,
            control_weights: vec![-0.2; n],
        },
        obs_limits: limits,
        obs_normalizer: vec![0.5; n],
        horizon_cap: 200,
        init_sampler: InitSampler { lo, hi },
        rho: 0.98,
        default_sizes: (20, 20),
        delta_sector: None,
    })
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Horizon,
    LimitViolation,
}

/// One episode. `states` has one more entry than `controls`: it ends with
/// the state reached after the last control (or the violating state).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    /// Raw plant outputs y(k) for each acted step.
    pub outputs: Vec<DVector<f64>>,
    /// Normalized outputs fed to the controller.
    pub observations: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub rewards: Vec<f64>,
    pub termination: Termination,
    /// A non-finite value was encountered.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.controls.len()
    }
    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A controller driven by normalized outputs. The episode state is owned by
/// the caller through `Self::State`.
pub trait Policy {
    type State;
    fn reset(&self) -> Self::State;
    /// Control for the current normalized observation; advances the state.
    fn act(
        &self,
        state: &mut Self::State,
        observation: &DVector<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<DVector<f64>>;
}

/// The all-zero controller.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub n_u: usize,
}

impl Policy for ZeroPolicy {
    type State = ();
    fn reset(&self) {}
    fn act(&self, _: &mut (), _: &DVector<f64>, _: &mut dyn rand::RngCore) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.n_u))
    }
}

pub fn rollout<P: Policy>(
    env: &Environment,
    policy: &P,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory> {
    let x0 = env.init_sampler.sample(rng);
    rollout_from(env, policy, x0, rng)
}

/// Runs one episode from `x0` with the controller state reset.
pub fn rollout_from<P: Policy>(
    env: &Environment,
    policy: &P,
    x0: DVector<f64>,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory> {
    if x0.len() != env.plant.n_state() {
        return Err(contract("initial state dimension mismatch"));
    }
    let mut state = policy.reset();
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        outputs: Vec::new(),
        observations: Vec::new(),
        controls: Vec::new(),
        rewards: Vec::new(),
        termination: Termination::Horizon,
        diverged: false,
    };
    let mut x = x0;
    let mut p_history = Vec::new();
    let c_out = env.plant.output_matrix();
    for _ in 0..env.horizon_cap {
        if !x.iter().all(|v| v.is_finite()) {
            traj.diverged = true;
            traj.termination = Termination::LimitViolation;
            return Ok(traj);
        }
        let y = c_out * &x;
        if !env.output_in_limits(&y) {
            traj.termination = Termination::LimitViolation;
            return Ok(traj);
        }
        let obs = env.normalize(&y);
        let u = policy.act(&mut state, &obs, rng)?;
        if !u.iter().all(|v| v.is_finite()) {
            traj.diverged = true;
            traj.termination = Termination::LimitViolation;
            return Ok(traj);
        }
        let r = env.reward.eval(&x, &u);
        let (x_next, _) = env.plant.step(&x, &u, &mut p_history)?;
        traj.outputs.push(y);
        traj.observations.push(obs);
        traj.controls.push(u);
        traj.rewards.push(r);
        traj.states.push(x_next.clone());
        x = x_next;
    }
    if !x.iter().all(|v| v.is_finite()) {
        traj.diverged = true;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_lti_origin_is_fixed() {
        let env = make_env("cartpole", 0).unwrap();
        let p = env.plant.nominal();
        let (xn, y) = step_lti(&p, &DVector::zeros(4), &DVector::zeros(1)).unwrap();
        assert_eq!(xn, DVector::zeros(4));
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn pendulum_matrix_entries() {
        let env = make_env("pendulum-linear", 0).unwrap();
        let p = env.plant.nominal();
        let (xn, y) = step_lti(&p, &dvector![0.1, 0.0], &dvector![0.0]).unwrap();
        assert!((xn[0] - 0.1).abs() < 1e-15);
        assert!((xn[1] - 0.3924 * 0.1).abs() < 1e-15);
        assert!((y[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cartpole_angle_column() {
        let env = make_env("cartpole", 0).unwrap();
        let (xn, _) =
            step_lti(&env.plant.nominal(), &dvector![0.0, 1.0, 0.0, 0.0], &dvector![0.0]).unwrap();
        assert_eq!(xn.as_slice(), &[-0.001, 1.005, -0.079, 0.55]);
    }

    #[test]
    fn step_lti_dimension_mismatch() {
        let env = make_env("cartpole", 0).unwrap();
        assert!(matches!(
            step_lti(&env.plant.nominal(), &DVector::zeros(3), &DVector::zeros(1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nonlinear_pendulum_delta() {
        let env = make_env("pendulum-nonlinear", 0).unwrap();
        let PlantModel::Uncertain(p) = &env.plant else {
            panic!("expected uncertain plant")
        };
        let s = step_uncertain(p, &DVector::zeros(2), &DVector::zeros(1), &[]).unwrap();
        assert_eq!(s.x_next, DVector::zeros(2));
        assert_eq!(s.q, DVector::zeros(1));
        let s = step_uncertain(p, &dvector![1.0, 0.0], &dvector![0.0], &[]).unwrap();
        assert!((s.q[0] - 0.158529).abs() < 1e-6);
        let s = step_uncertain(p, &dvector![1.4, 0.0], &dvector![0.0], &[]).unwrap();
        assert!(s.q[0] / 1.4 <= 0.41);
        // The nonlinear step reproduces the sine pendulum.
        let s = step_uncertain(p, &dvector![0.3, 0.2], &dvector![0.1], &[]).unwrap();
        let dt: f64 = 0.02;
        let expected = GRAVITY * dt / 0.5 * 0.3f64.sin() + (1.0 - 0.5 * dt / (0.15 * 0.25)) * 0.2
            + dt / (0.15 * 0.25) * 0.1;
        assert!((s.x_next[1] - expected).abs() < 1e-14);
    }

    #[test]
    fn algebraic_loop_rejected() {
        let p = UncertainPlant::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::identity(1, 1),
            Arc::new(SineDeficit { dim: 1 }),
        )
        .unwrap();
        let err = step_uncertain(&p, &dvector![0.1], &dvector![0.0], &[]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedModel(_)));
    }

    #[test]
    fn registry() {
        let env = make_env("pendulum-linear", 0).unwrap();
        assert_eq!(env.obs_limits, vec![(-0.15, 0.15)]);
        let r = env.reward.eval(&dvector![0.1, 0.2], &dvector![0.3]);
        assert!((r - (1.0 - 100.0 * 0.01 - 10.0 * 0.04 + 100.0 * 0.09)).abs() < 1e-12);

        let env = make_env("vehicle", 0).unwrap();
        let pi = std::f64::consts::PI;
        assert!((env.reward.control_weights[0] + 72.0 / (pi * pi)).abs() < 1e-15);

        let env = make_env("power39", 0).unwrap();
        assert_eq!(env.plant.n_state(), 20);
        assert_eq!(env.plant.n_input(), 10);
        assert_eq!(env.default_sizes, (20, 20));

        assert!(matches!(make_env("bogus", 0), Err(Error::Usage(_))));
        let missing = make_env_with_power_data("power39", 0, Some(Path::new("/no/such/file.json")));
        assert!(matches!(missing, Err(Error::Io(_))));
    }

    #[test]
    fn all_plants_satisfy_assumption() {
        for name in EnvName::ALL {
            let env = make_env(name.as_str(), 0).unwrap();
            env.synthesis_plant().nominal().check_stabilizable_detectable().unwrap();
        }
    }

    #[test]
    fn power_data_sanity() {
        assert_eq!(PowerData::bundled().check().unwrap(), 10);
        let mut bad = PowerData::bundled();
        bad.l[1] += 0.5;
        assert!(bad.check().is_err());
    }

    #[test]
    fn rollout_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = make_env("vehicle", 0).unwrap();
        let zero = ZeroPolicy { n_u: 1 };
        let t = rollout_from(&env, &zero, DVector::zeros(4), &mut rng).unwrap();
        assert_eq!(t.len(), 200);
        assert!(t.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert_eq!(t.termination, Termination::Horizon);

        let env = make_env("pendulum-linear", 0).unwrap();
        let t = rollout_from(&env, &zero, dvector![0.2, 0.0], &mut rng).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.termination, Termination::LimitViolation);

        for name in EnvName::ALL {
            let env = make_env(name.as_str(), 0).unwrap();
            let zero = ZeroPolicy { n_u: env.plant.n_input() };
            for _ in 0..5 {
                let t = rollout(&env, &zero, &mut rng).unwrap();
                assert!(t.len() <= 200);
                assert_eq!(t.states.len(), t.len() + 1);
                assert_eq!(t.rewards.len(), t.len());
                assert!(t.rewards.iter().all(|r| r.is_finite()));
            }
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let env = make_env("pendubot", 0).unwrap();
        let zero = ZeroPolicy { n_u: 1 };
        let a = rollout(&env, &zero, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = rollout(&env, &zero, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_sector_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x: f64 = rng.random_range(-1.4..=1.4);
            let q = x - x.sin();
            assert!(q * x >= 0.0);
            if x > 0.0 {
                assert!(q <= 0.41 * x);
            } else {
                assert!(q >= 0.41 * x);
            }
        }
    }

    proptest! {
        #[test]
        fn step_lti_is_linear(
            x1 in prop::collection::vec(-2.0f64..2.0, 4),
            x2 in prop::collection::vec(-2.0f64..2.0, 4),
            u1 in -2.0f64..2.0,
            u2 in -2.0f64..2.0,
        ) {
            let env = make_env("pendubot", 0).unwrap();
            let p = env.plant.nominal();
            let (x1, x2) = (DVector::from_vec(x1), DVector::from_vec(x2));
            let (a, ya) = step_lti(&p, &(&x1 + &x2), &dvector![u1 + u2]).unwrap();
            let (b, yb) = step_lti(&p, &x1, &dvector![u1]).unwrap();
            let (c, yc) = step_lti(&p, &x2, &dvector![u2]).unwrap();
            prop_assert!((a - b - c).amax() <= 1e-12);
            prop_assert!((ya - yb - yc).amax() <= 1e-12);
        }
    }
}
