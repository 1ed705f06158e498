use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stabsyn::lmi::{verify_controller, LoopModel, Verification};
use stabsyn::plants::{make_env_with_power_data, rollout, EnvName, Environment, Termination, Trajectory};
use stabsyn::rnnctl::TransformedParams;
use stabsyn::trainer::{
    envelope_check, episode_rng, fmt17, train, MeanPolicy, ProjectionConfig, StochasticPolicy,
    TrainConfig, TrainMode,
};
use stabsyn::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INIT: u8 = 2;
const EXIT_NOT_CERTIFIED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "stabsyn", version, about = "Certified RNN controller training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a controller (projected or unconstrained policy gradient).
    Train {
        #[arg(long)]
        env: Option<String>,
        /// JSON training configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory (default: runs/<env>-<mode>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Network data file for power39 (default: bundled stand-in data).
        #[arg(long)]
        power_data: Option<PathBuf>,
    },
    /// Roll out a controller and write trajectories.csv and summary.json.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Use the mean controller instead of sampling exploration noise.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rate for the reported envelope ratio (default: the environment's).
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Network data file for power39 (default: bundled stand-in data).
        #[arg(long)]
        power_data: Option<PathBuf>,
    },
    /// Search for a stability certificate and check its decay envelope.
    Verify {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Network data file for power39 (default: bundled stand-in data).
        #[arg(long)]
        power_data: Option<PathBuf>,
    },
    /// List the benchmark environments.
    ListEnvs,
    /// Copy a certificate out of a run directory.
    ExportCert {
        #[arg(long)]
        run: PathBuf,
        /// Epoch to export (default: the last one written).
        #[arg(long)]
        epoch: Option<usize>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A parameter file: either a trainer snapshot or bare θ̃.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ParamsFile {
    Policy(StochasticPolicy),
    Theta(TransformedParams),
}

#[derive(Debug, Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    args: T,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    env: String,
    episodes: usize,
    deterministic: bool,
    seed: u64,
    rho: f64,
    mean_reward: f64,
    std_reward: f64,
    diverged_count: usize,
    /// Largest ‖x(k)‖ / (ρᵏ‖x(0)‖) over all episodes and steps.
    max_decay_ratio: f64,
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    env: String,
    rho: f64,
    certified: bool,
    reason: Option<String>,
    cond_p: Option<f64>,
    min_eig_residual: Option<f64>,
    envelope_episodes: usize,
    envelope_violations: Option<usize>,
    max_envelope_ratio: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Contract(_) | Error::Io(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_INIT,
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Train {
            env,
            config,
            seed,
            mode,
            epochs,
            out,
            power_data,
        } => cmd_train(env, config, seed, mode, epochs, out, power_data),
        Command::Eval {
            params,
            env,
            episodes,
            deterministic,
            seed,
            rho,
            out,
            power_data,
        } => cmd_eval(&params, &env, episodes, deterministic, seed, rho, &out, power_data.as_deref()),
        Command::Verify {
            params,
            env,
            rho,
            seed,
            out,
            power_data,
        } => cmd_verify(&params, &env, rho, seed, &out, power_data.as_deref()),
        Command::ListEnvs => cmd_list_envs(),
        Command::ExportCert { run, epoch, out } => cmd_export_cert(&run, epoch, out.as_deref()),
    }
}

fn cmd_train(
    env: Option<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<String>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
    power_data: Option<PathBuf>,
) -> Result<ExitCode, Error> {
    let mut cfg = match (&config, &env) {
        (Some(path), _) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => TrainConfig::for_env(name)?,
        (None, None) => return Err(Error::Usage("train needs --env or --config".into())),
    };
    if let Some(name) = env {
        if name != cfg.env {
            // Sizes and rate follow the new environment's defaults.
            let base = TrainConfig::for_env(&name)?;
            cfg.env = base.env;
            cfg.n_xi = base.n_xi;
            cfg.n_phi = base.n_phi;
            cfg.rho = base.rho;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m.parse::<TrainMode>()?;
    }
    if let Some(n) = epochs {
        cfg.epochs = n;
    }
    if power_data.is_some() {
        cfg.power_data = power_data;
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let out = out.unwrap_or_else(|| {
        let mode = match cfg.mode {
            TrainMode::Projected => "projected",
            TrainMode::BaselinePg => "baseline-pg",
        };
        PathBuf::from("runs").join(format!("{}-{mode}-seed{}", cfg.env, cfg.seed))
    });
    let run = train(&cfg, Some(&out))?;
    let last = run.epochs.last();
    println!(
        "env {} mode {:?} epochs {} certificates {} final mean reward {} wall clock {:.2}s",
        cfg.env,
        cfg.mode,
        run.epochs.len(),
        run.certificates.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.mean_reward)),
        run.wall_clock
    );
    println!("run directory: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_env(name: &str, seed: u64, power_data: Option<&Path>) -> Result<Environment, Error> {
    make_env_with_power_data(name, seed, power_data)
}

fn load_params(path: &Path, env: &Environment) -> Result<ParamsFile, Error> {
    let text = fs::read_to_string(path)?;
    let parsed: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Usage(format!("{}: not a parameter file: {e}", path.display())))?;
    let theta = match &parsed {
        ParamsFile::Policy(p) => &p.theta,
        ParamsFile::Theta(t) => t,
    };
    let dims = theta.dims()?;
    if dims.n_y != env.plant.n_output() || dims.n_u != env.plant.n_input() {
        return Err(Error::Usage(format!(
            "controller has {} inputs and {} outputs; {} has {} outputs and {} inputs",
            dims.n_y,
            dims.n_u,
            env.name,
            env.plant.n_output(),
            env.plant.n_input()
        )));
    }
    Ok(parsed)
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, args: T) -> Result<(), Error> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn cmd_eval(
    params: &Path,
    env_name: &str,
    episodes: usize,
    deterministic: bool,
    seed: u64,
    rho: Option<f64>,
    out: &Path,
    power_data: Option<&Path>,
) -> Result<ExitCode, Error> {
    let env = load_env(env_name, seed, power_data)?;
    let rho = rho.unwrap_or(env.rho);
    let parsed = load_params(params, &env)?;
    let (theta, policy) = match parsed {
        ParamsFile::Policy(p) => (p.theta.clone(), Some(p)),
        ParamsFile::Theta(t) => (t, None),
    };
    if !deterministic && policy.is_none() {
        return Err(Error::Usage(
            "bare controller parameters carry no exploration noise; pass --deterministic".into(),
        ));
    }
    fs::create_dir_all(out)?;
    write_manifest(
        out,
        "eval",
        serde_json::json!({
            "params": params, "env": env.name, "episodes": episodes,
            "deterministic": deterministic, "seed": seed, "rho": rho,
        }),
    )?;

    let mut trajs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = episode_rng(seed, u64::from(u32::MAX) - 1, i as u64);
        let t = match (&policy, deterministic) {
            (Some(p), false) => rollout(&env, p, &mut rng)?,
            _ => rollout(&env, &MeanPolicy(&theta), &mut rng)?,
        };
        trajs.push(t);
    }
    write_trajectories(&out.join("trajectories.csv"), &env, &trajs)?;

    let totals: Vec<f64> = trajs.iter().map(Trajectory::total_reward).collect();
    let n = totals.len().max(1) as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let summary = EvalSummary {
        env: env.name.to_string(),
        episodes,
        deterministic,
        seed,
        rho,
        mean_reward: if totals.is_empty() { 0.0 } else { mean },
        std_reward: var.sqrt(),
        diverged_count: trajs
            .iter()
            .filter(|t| t.diverged || t.termination == Termination::LimitViolation)
            .count(),
        max_decay_ratio: trajs.iter().map(|t| decay_ratio(t, rho)).fold(0.0, f64::max),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "episodes {} mean reward {:.4} diverged {} max decay ratio {:.4e}",
        summary.episodes, summary.mean_reward, summary.diverged_count, summary.max_decay_ratio
    );
    Ok(ExitCode::SUCCESS)
}

fn decay_ratio(t: &Trajectory, rho: f64) -> f64 {
    let n0 = t.states[0].norm();
    if n0 == 0.0 {
        return 0.0;
    }
    t.states
        .iter()
        .enumerate()
        .map(|(k, x)| x.norm() / (rho.powi(k as i32) * n0))
        .fold(0.0, f64::max)
}

/// One row per visited state; the final state has empty control and reward.
fn write_trajectories(path: &Path, env: &Environment, trajs: &[Trajectory]) -> Result<(), Error> {
    let n = env.plant.n_state();
    let m = env.plant.n_input();
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = vec!["episode".to_string(), "k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("r".into());
    writeln!(f, "{}", header.join(","))?;
    for (e, t) in trajs.iter().enumerate() {
        for (k, x) in t.states.iter().enumerate() {
            let mut row = vec![e.to_string(), k.to_string()];
            row.extend(x.iter().map(|&v| fmt17(v)));
            match (t.controls.get(k), t.rewards.get(k)) {
                (Some(u), Some(&r)) => {
                    row.extend(u.iter().map(|&v| fmt17(v)));
                    row.push(fmt17(r));
                }
                _ => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            writeln!(f, "{}", row.join(","))?;
        }
    }
    f.flush()?;
    Ok(())
}

fn cmd_verify(
    params: &Path,
    env_name: &str,
    rho: Option<f64>,
    seed: u64,
    out: &Path,
    power_data: Option<&Path>,
) -> Result<ExitCode, Error> {
    let env = load_env(env_name, seed, power_data)?;
    let rho = rho.unwrap_or(env.rho);
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Usage(format!("--rho must lie in (0, 1], got {rho}")));
    }
    let theta = match load_params(params, &env)? {
        ParamsFile::Policy(p) => p.theta,
        ParamsFile::Theta(t) => t,
    };
    fs::create_dir_all(out)?;
    write_manifest(
        out,
        "verify",
        serde_json::json!({ "params": params, "env": env.name, "rho": rho, "seed": seed }),
    )?;
    let model = LoopModel::from_env(&env, rho)?;
    let episodes = 100;
    let verdict = verify_controller(&model, &theta, rho, &ProjectionConfig::default().options())?;
    let mut summary = VerifySummary {
        env: env.name.to_string(),
        rho,
        certified: false,
        reason: None,
        cond_p: None,
        min_eig_residual: None,
        envelope_episodes: episodes,
        envelope_violations: None,
        max_envelope_ratio: None,
    };
    let code = match verdict {
        Verification::Certified(cert) => {
            fs::write(out.join("certificate.json"), serde_json::to_string_pretty(&cert)?)?;
            let report = envelope_check(&env, &theta, &cert, episodes, seed)?;
            summary.cond_p = Some(cert.cond_p);
            summary.min_eig_residual = Some(cert.min_eig_residual);
            summary.envelope_violations = Some(report.envelope_violations);
            summary.max_envelope_ratio = Some(report.max_ratio);
            println!(
                "certificate found: rho {} cond(P) {:.6e} min-eig residual {:.3e}",
                cert.rho, cert.cond_p, cert.min_eig_residual
            );
            println!(
                "envelope: {} of {} rollouts violate, max ratio {:.6}",
                report.envelope_violations, episodes, report.max_ratio
            );
            summary.certified = report.holds();
            if report.holds() {
                ExitCode::SUCCESS
            } else {
                summary.reason = Some("decay envelope violated on rollouts".into());
                ExitCode::from(EXIT_NOT_CERTIFIED)
            }
        }
        Verification::NotCertified { reason } => {
            println!("{reason}");
            summary.reason = Some(reason);
            ExitCode::from(EXIT_NOT_CERTIFIED)
        }
    };
    fs::write(out.join("verify.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(code)
}

fn cmd_list_envs() -> Result<ExitCode, Error> {
    println!("{:<20} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "name", "n_x", "n_u", "n_y", "rho", "n_xi", "n_phi");
    for name in EnvName::ALL {
        let env = load_env(name.as_str(), 0, None)?;
        println!(
            "{:<20} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            name.as_str(),
            env.plant.n_state(),
            env.plant.n_input(),
            env.plant.n_output(),
            env.rho,
            env.default_sizes.0,
            env.default_sizes.1
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_cert(run: &Path, epoch: Option<usize>, out: Option<&Path>) -> Result<ExitCode, Error> {
    let certs = run.join("certs");
    let epoch = match epoch {
        Some(e) => e,
        None => last_epoch(&certs)?,
    };
    let path = certs.join(format!("epoch_{epoch}.json"));
    if !path.exists() {
        return Err(Error::Usage(format!("no certificate at {}", path.display())));
    }
    let cert: stabsyn::lmi::Certificate = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let text = serde_json::to_string_pretty(&cert)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn last_epoch(certs: &Path) -> Result<usize, Error> {
    let mut last = None;
    for entry in fs::read_dir(certs)
        .map_err(|e| Error::Usage(format!("{}: {e}", certs.display())))?
    {
        let name = entry?.file_name();
        let Some(i) = name
            .to_str()
            .and_then(|s| s.strip_prefix("epoch_"))
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        last = last.max(Some(i));
    }
    last.ok_or_else(|| Error::Usage(format!("no certificates in {}", certs.display())))
}
