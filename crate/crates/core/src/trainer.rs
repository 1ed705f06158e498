//! Projected policy gradient: Gaussian exploration around the RNN output,
//! reward-to-go REINFORCE with backpropagation through time, Adam, and a
//! projection onto the certified set after every epoch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conic::{SolveReport, SolverSettings, WarmStart};
use crate::error::{contract, Error, Result};
use crate::lmi::{
    assemble_sequential, default_epsilon, initial_certificate, recursive_feasibility_check,
    solve_lmi, theta_hash, Certificate, LmiPoint, LmiSolveOptions, LoopModel, ObserverWeights, ThetaMap, ThetaMode,
};
use crate::matkit::{spd_inverse, SymMatrix};
use crate::plants::{make_env, rollout, rollout_from, Environment, Policy, Termination, Trajectory};
use crate::rnnctl::{
    phi_tilde, phi_tilde_derivative, Activation, ControllerBlocks, ControllerDims,
    TransformedParams,
};
use crate::serde_mat;

/// Gaussian policy `u ~ N(μ(θ̃, y₀..y_k), diag(exp(2·log_std)))` where μ is
/// the transformed-form RNN output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    pub theta: TransformedParams,
    #[serde(with = "serde_mat::vector")]
    pub log_std: DVector<f64>,
}

/// Deterministic rollouts of the mean controller.
#[derive(Debug, Clone, Copy)]
pub struct MeanPolicy<'a>(pub &'a TransformedParams);

impl Policy for MeanPolicy<'_> {
    type State = DVector<f64>;
    fn reset(&self) -> DVector<f64> {
        DVector::zeros(self.0.blocks.a_k.nrows())
    }
    fn act(&self, xi: &mut DVector<f64>, y: &DVector<f64>, _: &mut dyn RngCore) -> Result<DVector<f64>> {
        let s = crate::rnnctl::controller_step_transformed(self.0, xi, y);
        *xi = s.xi_next;
        Ok(s.u)
    }
}

impl Policy for StochasticPolicy {
    type State = DVector<f64>;

    fn reset(&self) -> DVector<f64> {
        DVector::zeros(self.theta.blocks.a_k.nrows())
    }

    fn act(
        &self,
        xi: &mut DVector<f64>,
        y: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        let s = crate::rnnctl::controller_step_transformed(&self.theta, xi, y);
        *xi = s.xi_next;
        let mut u = s.u;
        for (ui, ls) in u.iter_mut().zip(self.log_std.iter()) {
            let e: f64 = rng.sample(StandardNormal);
            *ui += ls.exp() * e;
        }
        Ok(u)
    }
}

/// Forward pass of the mean controller over recorded observations.
struct Forward {
    xi: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    sz: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
}

fn forward(theta: &TransformedParams, ys: &[DVector<f64>]) -> Forward {
    let b = &theta.blocks;
    let radius = theta.sectors.radius();
    let mut xi = DVector::zeros(b.a_k.nrows());
    let mut out = Forward {
        xi: Vec::with_capacity(ys.len()),
        v: Vec::with_capacity(ys.len()),
        sz: Vec::with_capacity(ys.len()),
        mu: Vec::with_capacity(ys.len()),
    };
    for y in ys {
        let v = &b.c_k2 * &xi + &b.d_k3 * y;
        let sz = phi_tilde(theta.activation, &theta.sectors, &v).component_mul(&radius);
        let mu = &b.c_k1 * &xi + &b.d_k1 * &sz + &b.d_k2 * y;
        let next = &b.a_k * &xi + &b.b_k1 * &sz + &b.b_k2 * y;
        out.xi.push(xi);
        out.v.push(v);
        out.sz.push(sz);
        out.mu.push(mu);
        xi = next;
    }
    out
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl StochasticPolicy {
    pub fn new(theta: TransformedParams, init_log_std: f64) -> Result<Self> {
        let n_u = theta.dims()?.n_u;
        Ok(Self {
            theta,
            log_std: DVector::from_element(n_u, init_log_std),
        })
    }

    /// Sum of log-densities of the recorded controls.
    pub fn log_prob(&self, ys: &[DVector<f64>], us: &[DVector<f64>]) -> Result<f64> {
        if ys.len() != us.len() {
            return Err(contract("observation and control sequences differ in length"));
        }
        let f = forward(&self.theta, ys);
        let mut lp = 0.0;
        for (u, mu) in us.iter().zip(&f.mu) {
            for j in 0..u.len() {
                let s = self.log_std[j].exp();
                let e = (u[j] - mu[j]) / s;
                lp -= 0.5 * e * e + self.log_std[j] + 0.5 * LN_2PI;
            }
        }
        Ok(lp)
    }

    /// Gradient of `Σ_k w_k log π(u_k | y_0..y_k)` with respect to θ̃ (flat)
    /// and log_std, by backpropagation through the whole sequence.
    pub fn weighted_log_prob_grad(
        &self,
        ys: &[DVector<f64>],
        us: &[DVector<f64>],
        weights: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if ys.len() != us.len() || ys.len() != weights.len() {
            return Err(contract("sequence lengths differ"));
        }
        let th = &self.theta;
        let b = &th.blocks;
        let dims = th.dims()?;
        let radius = th.sectors.radius();
        let f = forward(th, ys);
        let inv_var = self.log_std.map(|l| (-2.0 * l).exp());
        let mut g = ControllerBlocks::zeros(dims);
        let mut g_log_std = DVector::zeros(dims.n_u);
        let mut lam = DVector::<f64>::zeros(dims.n_xi);
        for k in (0..ys.len()).rev() {
            let w = weights[k];
            let diff = &us[k] - &f.mu[k];
            let g_mu = diff.component_mul(&inv_var) * w;
            for j in 0..dims.n_u {
                g_log_std[j] += w * (diff[j] * diff[j] * inv_var[j] - 1.0);
            }
            let g_sz = b.d_k1.tr_mul(&g_mu) + b.b_k1.tr_mul(&lam);
            let dphi = phi_tilde_derivative(th.activation, &th.sectors, &f.v[k]);
            let g_v = g_sz.component_mul(&radius).component_mul(&dphi);
            let (xi, sz, y) = (&f.xi[k], &f.sz[k], &ys[k]);
            g.c_k1.ger(1.0, &g_mu, xi, 1.0);
            g.d_k1.ger(1.0, &g_mu, sz, 1.0);
            g.d_k2.ger(1.0, &g_mu, y, 1.0);
            g.a_k.ger(1.0, &lam, xi, 1.0);
            g.b_k1.ger(1.0, &lam, sz, 1.0);
            g.b_k2.ger(1.0, &lam, y, 1.0);
            g.c_k2.ger(1.0, &g_v, xi, 1.0);
            g.d_k3.ger(1.0, &g_v, y, 1.0);
            lam = b.c_k1.tr_mul(&g_mu) + b.a_k.tr_mul(&lam) + b.c_k2.tr_mul(&g_v);
        }
        Ok((g.flatten(), g_log_std))
    }
}

/// Gradient of the expected return over (θ̃, log_std).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub theta: DVector<f64>,
    pub log_std: DVector<f64>,
}

/// Reward-to-go `Q̂_k = Σ_{t≥k} γ^{t−k} r_t`.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        acc = rewards[k] + gamma * acc;
        out[k] = acc;
    }
    out
}

/// REINFORCE estimate: mean over all steps of `Q̂_k ∇ log π(u_k | ·)`.
/// With `mean_baseline`, the batch mean of Q̂ is subtracted first.
pub fn estimate_gradient(
    batch: &[Trajectory],
    policy: &StochasticPolicy,
    gamma: f64,
    mean_baseline: bool,
) -> Result<PolicyGradient> {
    let steps: usize = batch.iter().map(|t| t.len()).sum();
    if steps == 0 {
        return Err(contract("cannot estimate a gradient from an empty batch"));
    }
    let q: Vec<Vec<f64>> = batch.iter().map(|t| reward_to_go(&t.rewards, gamma)).collect();
    let base = if mean_baseline {
        q.iter().flatten().sum::<f64>() / steps as f64
    } else {
        0.0
    };
    let dims = policy.theta.dims()?;
    let mut g_theta = DVector::zeros(dims.n_params());
    let mut g_std = DVector::zeros(dims.n_u);
    for (traj, qs) in batch.iter().zip(&q) {
        if traj.is_empty() {
            continue;
        }
        let w: Vec<f64> = qs.iter().map(|v| v - base).collect();
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (gt, gs) = policy.weighted_log_prob_grad(&traj.observations, &traj.controls, &w)?;
        g_theta += gt;
        g_std += gs;
    }
    let n = steps as f64;
    Ok(PolicyGradient {
        theta: g_theta / n,
        log_std: g_std / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    #[serde(with = "serde_mat::vector")]
    pub m: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub v: DVector<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One descent step along `grad`, each component clipped to `[−clip, clip]`
/// before the moment updates.
pub fn adam_step(
    params: &DVector<f64>,
    grad: &DVector<f64>,
    state: &mut AdamState,
    lr: f64,
    clip: f64,
) -> Result<DVector<f64>> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(contract("Adam parameter, gradient and moment sizes differ"));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut out = params.clone();
    for i in 0..n {
        let g = grad[i].clamp(-clip, clip);
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        out[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Projected,
    BaselinePg,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projected" => Ok(Self::Projected),
            "baseline-pg" => Ok(Self::BaselinePg),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected projected or baseline-pg)"
            ))),
        }
    }
}

/// Projection solver tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub margin: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            eps_abs: s.eps_abs,
            eps_rel: s.eps_rel,
            max_iter: s.max_iter,
            margin: 1e-6,
        }
    }
}

impl ProjectionConfig {
    pub fn options(&self) -> LmiSolveOptions {
        LmiSolveOptions {
            settings: SolverSettings {
                eps_abs: self.eps_abs,
                eps_rel: self.eps_rel,
                max_iter: self.max_iter,
                ..SolverSettings::default()
            },
            margin: self.margin,
            fallback: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub seed: u64,
    pub n_xi: usize,
    pub n_phi: usize,
    pub rho: f64,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_steps: usize,
    pub horizon_cap: usize,
    pub epochs: usize,
    pub clip_magnitude: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gamma: f64,
    pub mean_baseline: bool,
    pub init_log_std: f64,
    pub mode: TrainMode,
    pub projection: ProjectionConfig,
    /// Optional power-network data file for power39.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_data: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for an environment: its default sizes and rate.
    pub fn for_env(env: &str) -> Result<Self> {
        let e = make_env(env, 0)?;
        Ok(Self {
            env: e.name.as_str().to_string(),
            seed: 0,
            n_xi: e.default_sizes.0,
            n_phi: e.default_sizes.1,
            rho: e.rho,
            activation: Activation::Tanh,
            learning_rate: 1e-3,
            batch_steps: 6000,
            horizon_cap: 200,
            epochs: 1000,
            clip_magnitude: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gamma: 1.0,
            mean_baseline: false,
            init_log_std: 0.1f64.ln(),
            mode: TrainMode::Projected,
            projection: ProjectionConfig::default(),
            power_data: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 1000 {
            return Err(contract("epochs is capped at 1000"));
        }
        if self.batch_steps == 0 || self.horizon_cap == 0 {
            return Err(contract("batch_steps and horizon_cap must be positive"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(contract(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.learning_rate > 0.0 && self.clip_magnitude > 0.0) {
            return Err(contract("learning rate and clip magnitude must be positive"));
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        let mut env =
            crate::plants::make_env_with_power_data(&self.env, self.seed, self.power_data.as_deref())?;
        env.horizon_cap = self.horizon_cap;
        Ok(env)
    }
}

/// Per-epoch record. `seconds` is wall-clock and excluded from run
/// comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub episodes: usize,
    pub steps: usize,
    pub limit_violations: usize,
    pub diverged_count: usize,
    /// Hash of θ̃ used to sample this epoch's batch.
    pub theta_hash: String,
    pub min_eig_residual: Option<f64>,
    pub recursive_feasible: Option<bool>,
    pub repair_weight: Option<f64>,
    pub projection: Option<SolveReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// `certificates[i]` certifies the controller after `i` updates.
    pub certificates: Vec<Certificate>,
    pub policy: StochasticPolicy,
    pub wall_clock: f64,
}

/// Episodes of one batch, each with its own stream derived from
/// `(seed, epoch, index)`; the result does not depend on the thread count.
pub fn sample_batch(
    env: &Environment,
    policy: &StochasticPolicy,
    seed: u64,
    epoch: u64,
    batch_steps: usize,
) -> Result<Vec<Trajectory>> {
    let threads = sampler_threads();
    let chunk = (threads * 4).max(8);
    let mut out: Vec<Trajectory> = Vec::new();
    let mut steps = 0usize;
    let mut next = 0u64;
    while steps < batch_steps {
        let ids: Vec<u64> = (next..next + chunk as u64).collect();
        next += chunk as u64;
        let results = run_parallel(&ids, threads, |i| {
            let mut rng = episode_rng(seed, epoch, i);
            rollout(env, policy, &mut rng)
        });
        for r in results {
            let t = r?;
            // Zero-length episodes (initial state outside limits) still count.
            steps += t.len().max(1);
            out.push(t);
            if steps >= batch_steps {
                break;
            }
        }
    }
    Ok(out)
}

pub fn episode_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// `STABSYN_THREADS`, else the available parallelism.
pub fn sampler_threads() -> usize {
    std::env::var("STABSYN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run_parallel<T: Send, F: Fn(u64) -> T + Sync>(ids: &[u64], threads: usize, f: F) -> Vec<T> {
    if threads <= 1 || ids.len() <= 1 {
        return ids.iter().map(|&i| f(i)).collect();
    }
    let per = ids.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(per)
            .map(|c| s.spawn(|| c.iter().map(|&i| f(i)).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    })
}

/// Random θ̃ with Glorot-uniform blocks, used by the unconstrained baseline.
pub fn random_params(dims: ControllerDims, activation: Activation, rng: &mut impl Rng) -> Result<TransformedParams> {
    let t = TransformedParams::zeros(dims, activation)?;
    let mut blocks = t.blocks.clone();
    for m in [
        &mut blocks.a_k,
        &mut blocks.b_k1,
        &mut blocks.b_k2,
        &mut blocks.c_k1,
        &mut blocks.d_k1,
        &mut blocks.d_k2,
        &mut blocks.c_k2,
        &mut blocks.d_k3,
    ] {
        let lim = (6.0 / (m.nrows() + m.ncols()).max(1) as f64).sqrt();
        m.iter_mut().for_each(|v| *v = rng.random_range(-lim..=lim));
    }
    Ok(TransformedParams { blocks, ..t })
}

fn batch_stats(batch: &[Trajectory]) -> (f64, f64, usize, usize, usize) {
    let returns: Vec<f64> = batch.iter().map(|t| t.total_reward()).collect();
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let violations = batch.iter().filter(|t| t.termination == Termination::LimitViolation).count();
    let diverged = batch.iter().filter(|t| t.diverged).count();
    let steps = batch.iter().map(|t| t.len()).sum();
    (mean, var.sqrt(), violations, diverged, steps)
}

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Run-directory writer.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(root.join("certs"))?;
        fs::create_dir_all(root.join("params"))?;
        fs::write(root.join("config.json"), serde_json::to_string_pretty(config)?)?;
        fs::write(root.join("rewards.csv"), "epoch,mean,std,diverged_count\n")?;
        Ok(Self { root: root.to_path_buf() })
    }

    fn params(&self, i: usize, p: &StochasticPolicy) -> Result<()> {
        fs::write(
            self.root.join("params").join(format!("epoch_{i}.json")),
            serde_json::to_string_pretty(p)?,
        )?;
        Ok(())
    }

    fn cert(&self, i: usize, c: &Certificate) -> Result<()> {
        fs::write(
            self.root.join("certs").join(format!("epoch_{i}.json")),
            serde_json::to_string_pretty(c)?,
        )?;
        Ok(())
    }

    fn reward_row(&self, r: &EpochRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(self.root.join("rewards.csv"))?;
        writeln!(
            f,
            "{},{},{},{}",
            r.epoch,
            fmt17(r.mean_reward),
            fmt17(r.std_reward),
            r.limit_violations
        )?;
        Ok(())
    }

    fn run(&self, run: &TrainRun) -> Result<()> {
        fs::write(self.root.join("run.json"), serde_json::to_string_pretty(run)?)?;
        Ok(())
    }
}

/// State carried between projected epochs.
struct Projector {
    model: LoopModel,
    map: ThetaMap,
    p: DMatrix<f64>,
    lambda: DVector<f64>,
    point: LmiPoint,
    warm: Option<WarmStart>,
    opts: LmiSolveOptions,
    rho: f64,
}

struct ProjectionOutcome {
    theta: TransformedParams,
    certificate: Certificate,
    report: SolveReport,
    min_eig: f64,
    recursive_feasible: bool,
    repair_weight: f64,
}

impl Projector {
    fn project(&mut self, theta_prime: &DVector<f64>) -> Result<ProjectionOutcome> {
        let q1_target = spd_inverse(&SymMatrix::new(self.p.clone())?)?.into_inner();
        let q2_target = self.lambda.map(|v| 1.0 / v);
        let eps = default_epsilon(&q1_target, &q2_target);
        let inst = assemble_sequential(&self.map, &self.p, &self.lambda, self.rho, ThetaMode::Free, eps)?;
        let target = LmiPoint {
            q1: q1_target,
            q2: q2_target,
            theta: theta_prime.clone(),
            lambda: self.point.lambda.clone(),
        };
        let opts = LmiSolveOptions {
            fallback: Some(self.point.clone()),
            ..self.opts.clone()
        };
        let sol = solve_lmi(&inst, &target, self.warm.as_ref(), &opts).map_err(|e| {
            Error::Projection(format!(
                "projection onto the certified set failed; the previous iterate should have been feasible: {e}"
            ))
        })?;
        let theta = self.map.params(sol.point.theta.as_slice())?;
        let certificate = Certificate::from_point(&inst, &sol.point, &self.model, &theta)?;
        let p_next = certificate.p.clone();
        let l_next = DVector::from_column_slice(&certificate.lambda);
        let next_eps = default_epsilon(&sol.point.q1, &sol.point.q2);
        let next = assemble_sequential(&self.map, &p_next, &l_next, self.rho, ThetaMode::Free, next_eps)?;
        let recursive_feasible = recursive_feasibility_check(&sol.point, &next)?;
        let out = ProjectionOutcome {
            theta,
            certificate,
            report: sol.report.clone(),
            min_eig: sol.check.min_eig,
            recursive_feasible,
            repair_weight: sol.repair_weight,
        };
        self.p = p_next;
        self.lambda = l_next;
        self.point = sol.point;
        if sol.warm.x.len() == inst.layout.n_vars() {
            self.warm = Some(sol.warm);
        }
        Ok(out)
    }
}

/// Algorithm 1. Writes the run directory when `out` is given.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainRun> {
    config.validate()?;
    let start = Instant::now();
    let env = config.environment()?;
    let n_y = env.plant.n_output();
    let n_u = env.plant.n_input();
    let dims = ControllerDims {
        n_xi: config.n_xi,
        n_phi: config.n_phi,
        n_y,
        n_u,
    };
    let dir = out.map(|p| RunDir::create(p, config)).transpose()?;

    let mut certificates = Vec::new();
    let (theta0, mut projector) = match config.mode {
        TrainMode::Projected => {
            let model = LoopModel::from_env(&env, config.rho)?;
            let opts = config.projection.options();
            let weights = ObserverWeights::from_reward(&model.plant_part(), &env.reward)?;
            let (init, map) =
                initial_certificate(&model, dims, config.activation, config.rho, &weights, &opts)?;
            certificates.push(init.certificate.clone());
            let projector = Projector {
                model,
                map,
                p: init.p0,
                lambda: init.lambda0,
                point: init.point,
                warm: None,
                opts,
                rho: config.rho,
            };
            (init.theta0, Some(projector))
        }
        TrainMode::BaselinePg => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u64::MAX);
            (random_params(dims, config.activation, &mut rng)?, None)
        }
    };
    let mut policy = StochasticPolicy::new(theta0, config.init_log_std)?;
    if let Some(d) = &dir {
        d.params(0, &policy)?;
        if let Some(c) = certificates.first() {
            d.cert(0, c)?;
        }
    }

    let n_theta = dims.n_params();
    let mut adam = AdamState::new(n_theta + n_u, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let batch = sample_batch(&env, &policy, config.seed, epoch as u64, config.batch_steps)?;
        let (mean, std, violations, diverged, steps) = batch_stats(&batch);
        let theta_hash_now = theta_hash(&policy.theta);
        let grad = estimate_gradient(&batch, &policy, config.gamma, config.mean_baseline)?;

        let mut params = policy.theta.blocks.flatten();
        params = params.insert_rows(n_theta, n_u, 0.0);
        params.rows_mut(n_theta, n_u).copy_from(&policy.log_std);
        let mut descent = -grad.theta;
        descent = descent.insert_rows(n_theta, n_u, 0.0);
        descent.rows_mut(n_theta, n_u).copy_from(&(-grad.log_std));
        let updated = adam_step(&params, &descent, &mut adam, config.learning_rate, config.clip_magnitude)?;
        let theta_prime = updated.rows(0, n_theta).into_owned();
        policy.log_std = updated.rows(n_theta, n_u).into_owned();

        let mut record = EpochRecord {
            epoch,
            mean_reward: mean,
            std_reward: std,
            episodes: batch.len(),
            steps,
            limit_violations: violations,
            diverged_count: diverged,
            theta_hash: theta_hash_now,
            min_eig_residual: None,
            recursive_feasible: None,
            repair_weight: None,
            projection: None,
            seconds: 0.0,
        };
        match projector.as_mut() {
            Some(pr) => {
                let o = pr.project(&theta_prime)?;
                policy.theta = o.theta;
                record.min_eig_residual = Some(o.min_eig);
                record.recursive_feasible = Some(o.recursive_feasible);
                record.repair_weight = Some(o.repair_weight);
                record.projection = Some(o.report);
                if let Some(d) = &dir {
                    d.cert(epoch + 1, &o.certificate)?;
                }
                certificates.push(o.certificate);
            }
            None => {
                policy.theta = policy.theta.with_flat(theta_prime.as_slice())?;
            }
        }
        record.seconds = t0.elapsed().as_secs_f64();
        if let Some(d) = &dir {
            d.params(epoch + 1, &policy)?;
            d.reward_row(&record)?;
        }
        records.push(record);
    }
    let run = TrainRun {
        config: config.clone(),
        epochs: records,
        certificates,
        policy,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = &dir {
        d.run(&run)?;
    }
    Ok(run)
}

/// Result of checking `‖x(k)‖ ≤ √cond(P)·ρᵏ·‖x(0)‖` on deterministic rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub episodes: usize,
    /// Largest `‖x(k)‖ / (√cond(P)·ρᵏ·‖x(0)‖)` seen.
    pub max_ratio: f64,
    pub envelope_violations: usize,
    pub limit_violations: usize,
    pub max_final_norm: f64,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.envelope_violations == 0
    }
}

/// Envelope check of a certified controller on rollouts of the mean
/// policy from the environment's initial-state distribution.
pub fn envelope_check(
    env: &Environment,
    theta: &TransformedParams,
    cert: &Certificate,
    episodes: usize,
    seed: u64,
) -> Result<EnvelopeReport> {
    let bound = cert.envelope();
    let policy = MeanPolicy(theta);
    let mut rep = EnvelopeReport {
        episodes,
        max_ratio: 0.0,
        envelope_violations: 0,
        limit_violations: 0,
        max_final_norm: 0.0,
    };
    for i in 0..episodes {
        let mut rng = episode_rng(seed, u64::from(u32::MAX), i as u64);
        let x0 = env.init_sampler.sample(&mut rng);
        let t = rollout_from(env, &policy, x0, &mut rng)?;
        let n0 = t.states[0].norm();
        let mut violated = false;
        for (k, x) in t.states.iter().enumerate() {
            let limit = bound * cert.rho.powi(k as i32) * n0;
            let ratio = if limit > 0.0 {
                x.norm() / limit
            } else if x.norm() == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            rep.max_ratio = rep.max_ratio.max(ratio);
            if x.norm() > limit * (1.0 + 1e-6) {
                violated = true;
            }
        }
        if violated || t.diverged {
            rep.envelope_violations += 1;
        }
        if t.termination == Termination::LimitViolation {
            rep.limit_violations += 1;
        }
        let last = t.states.last().map(|x| x.norm()).unwrap_or(0.0);
        rep.max_final_norm = rep.max_final_norm.max(last);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_policy(seed: u64) -> StochasticPolicy {
        let dims = ControllerDims { n_xi: 3, n_phi: 2, n_y: 2, n_u: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let th = random_params(dims, Activation::Tanh, &mut rng).unwrap();
        let mut p = StochasticPolicy::new(th, 0.1f64.ln()).unwrap();
        p.log_std = DVector::from_fn(2, |_, _| rng.random_range(-1.0..0.0));
        p
    }

    fn episode(p: &StochasticPolicy, len: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<_> = (0..len).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let mut xi = p.reset();
        let us = ys.iter().map(|y| p.act(&mut xi, y, &mut rng).unwrap()).collect();
        (ys, us)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = tiny_policy(seed);
            let (ys, us) = episode(&p, 5, 100 + seed);
            let w = vec![1.0; 5];
            let (gt, gs) = p.weighted_log_prob_grad(&ys, &us, &w).unwrap();
            let flat = p.theta.blocks.flatten();
            let h = 1e-6;
            for i in 0..flat.len() {
                let mut a = flat.clone();
                a[i] += h;
                let mut b = flat.clone();
                b[i] -= h;
                let pa = StochasticPolicy { theta: p.theta.with_flat(a.as_slice()).unwrap(), ..p.clone() };
                let pb = StochasticPolicy { theta: p.theta.with_flat(b.as_slice()).unwrap(), ..p.clone() };
                let fd = (pa.log_prob(&ys, &us).unwrap() - pb.log_prob(&ys, &us).unwrap()) / (2.0 * h);
                assert!((fd - gt[i]).abs() <= 1e-4 * fd.abs().max(1.0), "param {i}: {fd} vs {}", gt[i]);
            }
            for j in 0..2 {
                let mut pa = p.clone();
                pa.log_std[j] += h;
                let mut pb = p.clone();
                pb.log_std[j] -= h;
                let fd = (pa.log_prob(&ys, &us).unwrap() - pb.log_prob(&ys, &us).unwrap()) / (2.0 * h);
                assert!((fd - gs[j]).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_step_scalar_score() {
        let dims = ControllerDims { n_xi: 1, n_phi: 1, n_y: 1, n_u: 1 };
        let mut th = TransformedParams::zeros(dims, Activation::Tanh).unwrap();
        th.blocks.d_k2[(0, 0)] = 0.7;
        let s: f64 = 0.3;
        let p = StochasticPolicy { theta: th, log_std: DVector::from_element(1, s.ln()) };
        let y = DVector::from_element(1, 1.5);
        let u = DVector::from_element(1, 0.2);
        let traj = Trajectory {
            states: vec![DVector::zeros(1); 2],
            outputs: vec![y.clone()],
            observations: vec![y],
            controls: vec![u],
            rewards: vec![2.0],
            termination: Termination::Horizon,
            diverged: false,
        };
        let g = estimate_gradient(&[traj], &p, 1.0, false).unwrap();
        let expected = 2.0 * (0.2 - 0.7 * 1.5) * 1.5 / (s * s);
        // d_k2 is the sixth block; with these sizes its flat index is 5.
        assert!((g.theta[5] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_gradient() {
        let p = tiny_policy(1);
        let (ys, us) = episode(&p, 4, 9);
        let traj = Trajectory {
            states: vec![DVector::zeros(1); 5],
            outputs: ys.clone(),
            observations: ys,
            controls: us,
            rewards: vec![0.0; 4],
            termination: Termination::Horizon,
            diverged: false,
        };
        let g = estimate_gradient(&[traj], &p, 1.0, false).unwrap();
        assert!(g.theta.iter().all(|v| *v == 0.0));
        assert!(g.log_std.iter().all(|v| *v == 0.0));
        assert!(estimate_gradient(&[], &p, 1.0, false).is_err());
    }

    #[test]
    fn reward_to_go_sums_tail() {
        assert_eq!(reward_to_go(&[1.0, 2.0, 3.0], 1.0), vec![6.0, 5.0, 3.0]);
        assert_eq!(reward_to_go(&[1.0, 2.0], 0.5), vec![2.0, 2.0]);
    }

    #[test]
    fn adam_examples() {
        let mut st = AdamState::new(1, 0.9, 0.999, 1e-8);
        let p = DVector::from_element(1, 0.0);
        let p1 = adam_step(&p, &DVector::from_element(1, 1.0), &mut st, 1e-3, 10.0).unwrap();
        assert!((p1[0] + 1e-3).abs() < 1e-10);

        let mut a = AdamState::new(1, 0.9, 0.999, 1e-8);
        let mut b = AdamState::new(1, 0.9, 0.999, 1e-8);
        let pa = adam_step(&p, &DVector::from_element(1, 100.0), &mut a, 1e-3, 10.0).unwrap();
        let pb = adam_step(&p, &DVector::from_element(1, 10.0), &mut b, 1e-3, 10.0).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);

        let m_before = a.m.clone();
        let pz = adam_step(&pa, &DVector::zeros(1), &mut a, 1e-3, 10.0).unwrap();
        assert!(a.m[0].abs() < m_before[0].abs());
        assert!(pz[0] < pa[0]);
        let mut fresh = AdamState::new(2, 0.9, 0.999, 1e-8);
        let q = DVector::from_element(2, 3.0);
        assert_eq!(adam_step(&q, &DVector::zeros(2), &mut fresh, 1e-3, 10.0).unwrap(), q);
        assert!(adam_step(&q, &DVector::zeros(1), &mut fresh, 1e-3, 10.0).is_err());
    }

    #[test]
    fn batch_is_independent_of_thread_count() {
        let env = make_env("cartpole", 0).unwrap();
        let dims = ControllerDims { n_xi: 3, n_phi: 2, n_y: 2, n_u: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = random_params(dims, Activation::Tanh, &mut rng).unwrap();
        let p = StochasticPolicy::new(th, -1.0).unwrap();
        let ids: Vec<u64> = (0..10).collect();
        let f = |i: u64| {
            let mut r = episode_rng(3, 1, i);
            rollout(&env, &p, &mut r).unwrap()
        };
        assert_eq!(run_parallel(&ids, 1, f), run_parallel(&ids, 3, f));
        let b = sample_batch(&env, &p, 3, 1, 300).unwrap();
        let steps: usize = b.iter().map(|t| t.len().max(1)).sum();
        assert!(steps >= 300);
        let drop_last: usize = b[..b.len() - 1].iter().map(|t| t.len().max(1)).sum();
        assert!(drop_last < 300);
    }

    #[test]
    fn bandit_moves_mean_toward_optimum() {
        // One-step episodes with reward −(u − 1)²; only d̃_K2 matters.
        let dims = ControllerDims { n_xi: 1, n_phi: 1, n_y: 1, n_u: 1 };
        let th = TransformedParams::zeros(dims, Activation::Tanh).unwrap();
        let mut p = StochasticPolicy::new(th, 0.3f64.ln()).unwrap();
        let n = dims.n_params();
        let mut adam = AdamState::new(n, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = DVector::from_element(1, 1.0);
        for _ in 0..50 {
            let batch: Vec<Trajectory> = (0..200)
                .map(|_| {
                    let mut xi = p.reset();
                    let u = p.act(&mut xi, &y, &mut rng).unwrap();
                    let r = -(u[0] - 1.0).powi(2);
                    Trajectory {
                        states: vec![DVector::zeros(1); 2],
                        outputs: vec![y.clone()],
                        observations: vec![y.clone()],
                        controls: vec![u],
                        rewards: vec![r],
                        termination: Termination::Horizon,
                        diverged: false,
                    }
                })
                .collect();
            let g = estimate_gradient(&batch, &p, 1.0, true).unwrap();
            let next = adam_step(&p.theta.blocks.flatten(), &-g.theta, &mut adam, 1e-2, 10.0).unwrap();
            p.theta = p.theta.with_flat(next.as_slice()).unwrap();
        }
        let d = p.theta.blocks.d_k2[(0, 0)];
        assert!(d > 0.3, "mean gain {d} did not move toward 1");
    }

    #[test]
    fn zero_epochs_keeps_initial_certificate() {
        let mut cfg = TrainConfig::for_env("pendulum-linear").unwrap();
        cfg.epochs = 0;
        cfg.n_xi = 3;
        cfg.n_phi = 3;
        let dir = tempfile::tempdir().unwrap();
        let run = train(&cfg, Some(dir.path())).unwrap();
        assert!(run.epochs.is_empty());
        assert_eq!(run.certificates.len(), 1);
        assert!(dir.path().join("certs/epoch_0.json").exists());
        assert!(dir.path().join("params/epoch_0.json").exists());
        let csv = fs::read_to_string(dir.path().join("rewards.csv")).unwrap();
        assert_eq!(csv, "epoch,mean,std,diverged_count\n");
    }

    #[test]
    fn short_projected_run_is_recursively_feasible_and_deterministic() {
        let mut cfg = TrainConfig::for_env("pendulum-linear").unwrap();
        cfg.epochs = 3;
        cfg.n_xi = 4;
        cfg.n_phi = 4;
        cfg.batch_steps = 600;
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.mean_reward.to_bits(), rb.mean_reward.to_bits());
            assert_eq!(ra.theta_hash, rb.theta_hash);
            assert_eq!(ra.recursive_feasible, Some(true));
            assert!(ra.min_eig_residual.unwrap() >= -1e-7);
        }
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.certificates.len(), 4);
        let env = cfg.environment().unwrap();
        let model = LoopModel::from_env(&env, cfg.rho).unwrap();
        let last = a.certificates.last().unwrap();
        assert!(last.condition_max_eig(&model, &a.policy.theta).unwrap() <= 1e-7);
    }

    #[test]
    fn policy_json_round_trip_is_exact() {
        let p = tiny_policy(4);
        let text = serde_json::to_string(&p).unwrap();
        let back: StochasticPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let cfg = TrainConfig::for_env("vehicle").unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
