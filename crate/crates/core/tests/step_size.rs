use nalgebra::{DMatrix, DVector};

use psofed::analysis::{
    estimate_correlation, expected_matrices, mean_recursion_step, step_size_bound, ConvergenceConfig, ConvergenceSetup,
    ExtendedSystem,
};
use psofed::data::{draw_client_params, ClientDataSource};
use psofed::experiment::{ExperimentConfig, Preset};
use psofed::masks::Scheme;
use psofed::rff::RffMapper;
use psofed::seeds;

#[test]
fn experiment_step_size_lies_inside_bound() {
    let cfg = ExperimentConfig::preset(Preset::Paper);
    let seed = 11;
    let params = draw_client_params(cfg.clients, &cfg.ranges, seed).unwrap();
    let mapper = RffMapper::new(cfg.window, cfg.dim, cfg.bandwidth, seed).unwrap();
    let blocks: Vec<DMatrix<f64>> = params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut src = ClientDataSource::test(*p, cfg.window, seed, k).unwrap();
            estimate_correlation(&mut src, &mapper, 100_000).unwrap()
        })
        .collect();
    let bound = step_size_bound(&blocks).unwrap();
    println!("bound = {} for step {}", bound.value(), cfg.step);
    assert!(bound.admits(cfg.step));
}

#[test]
fn mean_error_recursion_decays_inside_bound() {
    let (clients, dim) = (4, 6);
    let blocks: Vec<DMatrix<f64>> = (0..clients)
        .map(|k| {
            let g = DMatrix::from_fn(dim, dim, |i, j| (((i * 7 + j * 3 + k) % 5) as f64 - 2.0) / 5.0);
            &g * g.transpose() + DMatrix::identity(dim, dim) * 0.2
        })
        .collect();
    let system = ExtendedSystem::new(DVector::from_element(dim, 1.0), blocks).unwrap();
    let step = 0.5 * system.step_size_bound().unwrap().value();
    let (ea, eb) = expected_matrices(Scheme::Coordinated, dim, 3, 3, clients, 2).unwrap();
    let mut w = DVector::from_fn((clients + 1) * dim, |i, _| (i as f64).sin() + 1.5);
    let initial = w.norm();
    for _ in 0..500 {
        w = mean_recursion_step(&ea, &eb, &system.r_e, step, &w).unwrap();
    }
    assert!(w.norm() < 1e-6 * initial, "{} vs {initial}", w.norm());
}

#[test]
fn time_averaged_mse_is_non_increasing_after_burn_in() {
    let cfg = ConvergenceConfig::default();
    let setup = ConvergenceSetup::new(&cfg).unwrap();
    let step = 0.5 * setup.bound.value();
    let dim = cfg.dim;
    // Excess test MSE of the global model over a noiseless linear target
    // pooled across clients: w~^T R w~ with R the mean client correlation.
    let pooled = setup.system.r_blocks.iter().fold(DMatrix::zeros(dim, dim), |acc, r| acc + r) / cfg.clients as f64;
    let mut mse = vec![0.0; cfg.rounds];
    for t in 0..200 {
        setup
            .simulate(step, seeds::run_seed(77, t), |n, w| {
                let g = w.rows(0, dim);
                mse[n] += g.dot(&(&pooled * g));
            })
            .unwrap();
    }
    // Time average from the first round, inspected once the transient is over.
    let burn_in = 200;
    let mut sum = 0.0;
    let running: Vec<f64> = mse
        .iter()
        .enumerate()
        .map(|(i, m)| {
            sum += m;
            sum / (i + 1) as f64
        })
        .collect();
    let rises = running[burn_in..].windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(rises, 0, "time-averaged MSE rose {rises} times");
}
