use std::fs;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stabsyn::lmi::{
    initial_certificate, observer_controller, verify_controller, LmiSolveOptions, LoopModel, ObserverWeights,
    Verification,
};
use stabsyn::matkit::spectral_radius;
use stabsyn::plants::{make_env, EnvName, UNDERACTUATED_INIT_WIDTH};
use stabsyn::rnnctl::{Activation, ControllerDims};
use stabsyn::trainer::{envelope_check, train, TrainConfig, TrainMode};

fn dims_for(env: &str, n_xi: usize, n_phi: usize) -> ControllerDims {
    let e = make_env(env, 0).unwrap();
    ControllerDims {
        n_xi,
        n_phi,
        n_y: e.plant.n_output(),
        n_u: e.plant.n_input(),
    }
}

#[test]
fn initial_states_lie_inside_the_limits() {
    for name in EnvName::ALL {
        let env = make_env(name.as_str(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = env.init_sampler.sample(&mut rng);
            let y = env.plant.output_matrix() * &x;
            assert!(env.output_in_limits(&y), "{name}: {y}");
        }
    }
}

#[test]
fn underactuated_boxes_are_narrowed() {
    for name in ["cartpole", "pendubot"] {
        let env = make_env(name, 0).unwrap();
        let c = env.plant.output_matrix();
        let lo = c * DVector::from_column_slice(&env.init_sampler.lo);
        let hi = c * DVector::from_column_slice(&env.init_sampler.hi);
        for (k, &(a, b)) in env.obs_limits.iter().enumerate() {
            let width = (hi[k] - lo[k]) / (b - a);
            assert!((width - UNDERACTUATED_INIT_WIDTH).abs() < 1e-12, "{name} output {k}: {width}");
        }
    }
}

#[test]
fn reward_weighted_observer_is_rho_stable_everywhere() {
    for name in EnvName::ALL {
        let env = make_env(name.as_str(), 0).unwrap();
        let model = LoopModel::from_env(&env, env.rho).unwrap();
        let plant = model.plant_part();
        let w = ObserverWeights::from_reward(&plant, &env.reward).unwrap();
        let n = plant.n_state();
        let theta = observer_controller(&plant, dims_for(name.as_str(), n, 2), Activation::Tanh, env.rho, &w).unwrap();
        let cl = stabsyn::rnnctl::assemble_closed_loop(&theta, &plant).unwrap();
        let rad = spectral_radius(&cl.a).unwrap();
        assert!(rad < env.rho, "{name}: spectral radius {rad}");
    }
}

#[test]
fn initial_controller_verifies_independently() {
    for name in ["pendulum-linear", "vehicle", "pendulum-nonlinear"] {
        let env = make_env(name, 0).unwrap();
        let model = LoopModel::from_env(&env, env.rho).unwrap();
        let plant = model.plant_part();
        let w = ObserverWeights::from_reward(&plant, &env.reward).unwrap();
        let opts = LmiSolveOptions::default();
        let dims = dims_for(name, plant.n_state().max(4), 4);
        let (init, _) = initial_certificate(&model, dims, Activation::Tanh, env.rho, &w, &opts).unwrap();
        match verify_controller(&model, &init.theta0, env.rho, &opts).unwrap() {
            Verification::Certified(c) => {
                assert!(c.min_eig_residual >= -1e-7);
                let rep = envelope_check(&env, &init.theta0, &c, 50, 11).unwrap();
                assert!(rep.holds(), "{name}: max ratio {}", rep.max_ratio);
            }
            Verification::NotCertified { reason } => panic!("{name}: {reason}"),
        }
    }
}

#[test]
fn rewards_csv_values_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::for_env("pendulum-linear").unwrap();
    cfg.epochs = 2;
    cfg.batch_steps = 800;
    let run = train(&cfg, Some(dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("rewards.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (row, rec) in rows.iter().zip(&run.epochs) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), rec.epoch);
        assert_eq!(f[1].parse::<f64>().unwrap().to_bits(), rec.mean_reward.to_bits());
        assert_eq!(f[2].parse::<f64>().unwrap().to_bits(), rec.std_reward.to_bits());
    }
    let cfg_back: TrainConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn pendulum_reward_trend_does_not_fall() {
    // Compares the first and last 10-epoch averages within a noise band of
    // three standard errors of the batch means.
    for seed in 0..3 {
        let mut cfg = TrainConfig::for_env("pendulum-linear").unwrap();
        cfg.seed = seed;
        cfg.epochs = 40;
        cfg.batch_steps = 2000;
        cfg.mode = TrainMode::Projected;
        let run = train(&cfg, None).unwrap();
        let avg = |r: &[stabsyn::trainer::EpochRecord]| r.iter().map(|e| e.mean_reward).sum::<f64>() / r.len() as f64;
        let first = avg(&run.epochs[..10]);
        let last = avg(&run.epochs[30..]);
        let se = run
            .epochs
            .iter()
            .map(|e| e.std_reward / (e.episodes as f64).sqrt())
            .fold(0.0, f64::max);
        assert!(last >= first - 3.0 * se, "seed {seed}: first {first}, last {last}, se {se}");
    }
}
