//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting; run with `--nocapture` to see them.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psofed::analysis::{
    build_a, build_b, error_recursion_step, extended_inputs, verify_with_setup, ConvergenceConfig,
    ConvergenceSetup, ExtendedSystem,
};
use psofed::experiment::{build_federation, run_experiment, ExperimentConfig, Preset, RunData};
use psofed::fed::{Algorithm, ClientState, Federation, Sample, ServerState};
use psofed::masks::{self, Scheme, SelectionMask};
use psofed::rff::RffMapper;
use psofed::seeds;

fn report(criterion: u8, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {criterion}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_full_sharing_matches_online_fed() {
    let start = Instant::now();
    let base = ExperimentConfig { rounds: 1000, ..ExperimentConfig::preset(Preset::Desk) };
    let pso = ExperimentConfig { shared: base.dim, algorithm: Algorithm::PsoFed, ..base.clone() };
    let online = ExperimentConfig { algorithm: Algorithm::OnlineFed, ..base.clone() };
    let mut worst = 0.0f64;
    for s in 0..20 {
        let seed = seeds::run_seed(0xACCE, s);
        let mut data_a = RunData::new(&pso, seed).unwrap();
        let mut data_b = RunData::new(&online, seed).unwrap();
        let mut fed_a = build_federation(&pso, seed).unwrap();
        let mut fed_b = build_federation(&online, seed).unwrap();
        for _ in 0..base.rounds {
            fed_a.run_round(&data_a.next_samples().unwrap()).unwrap();
            fed_b.run_round(&data_b.next_samples().unwrap()).unwrap();
            for (a, b) in fed_a.global_model().iter().zip(fed_b.global_model()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-12 && elapsed < 60.0;
    report(1, pass, format!("max |dw| = {worst:e} over 20 seeds x 1000 rounds, {elapsed:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_2_each_coordinate_shared_m_times_per_d_rounds() {
    let mut cases = 0usize;
    let mut failures = 0usize;
    for dim in 1..=12 {
        for count in 0..=dim {
            for offset in 0..dim {
                let mut mask = SelectionMask::contiguous(dim, count, 1, offset).unwrap();
                let history: Vec<SelectionMask> = (0..2 * dim)
                    .map(|_| {
                        let current = mask.clone();
                        mask.advance();
                        current
                    })
                    .collect();
                for start in 0..dim {
                    let mut hits = vec![0usize; dim];
                    for m in &history[start..start + dim] {
                        for &i in m.active() {
                            hits[i] += 1;
                        }
                    }
                    cases += 1;
                    if hits.iter().any(|&h| h != count) {
                        failures += 1;
                    }
                }
            }
        }
    }
    let pass = failures == 0;
    report(2, pass, format!("{cases} windows checked, {failures} violations"));
    assert!(pass);
}

fn random_mask(rng: &mut ChaCha8Rng, dim: usize) -> SelectionMask {
    let active: Vec<usize> = (0..dim).filter(|_| rng.random_bool(0.5)).collect();
    SelectionMask::new(dim, active, rng.random_range(1..=dim)).unwrap()
}

/// Sum of the `D x D` blocks in block row `row`.
fn block_row_sum(m: &DMatrix<f64>, row: usize, dim: usize) -> DMatrix<f64> {
    let blocks = m.ncols() / dim;
    let mut sum = DMatrix::zeros(dim, dim);
    for c in 0..blocks {
        sum += m.view((row * dim, c * dim), (dim, dim));
    }
    sum
}

#[test]
fn criterion_3_fixed_point_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_fixed = 0.0f64;
    // Rows with 0/1 entries, or weights 1/|S| that are exact in binary, must
    // sum to I bit for bit. With |S| in {3, 5, 6} the stored weight is itself
    // rounded, so the sum can only be exact up to one unit in the last place.
    let mut exact_rows = 0usize;
    let mut exact_violations = 0usize;
    let mut rounded_rows = 0usize;
    let mut worst_rounded = 0.0f64;
    for _ in 0..1000 {
        let clients = rng.random_range(1..=6);
        let dim = rng.random_range(1..=8);
        let masks: Vec<SelectionMask> = (0..clients).map(|_| random_mask(&mut rng, dim)).collect();
        let mut part: Vec<bool> = (0..clients).map(|_| rng.random_bool(0.5)).collect();
        part[rng.random_range(0..clients)] = true;
        let count = part.iter().filter(|&&p| p).count();
        let a = build_a(&masks, &part).unwrap();
        let advanced: Vec<SelectionMask> = masks.iter().map(SelectionMask::advanced).collect();
        let b = build_b(&advanced, &part, count).unwrap();

        let w = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let stacked = DVector::from_fn((clients + 1) * dim, |i, _| w[i % dim]);
        worst_fixed = worst_fixed.max((&a * &stacked - &stacked).amax());
        worst_fixed = worst_fixed.max((&b * &stacked - &stacked).amax());

        let eye = DMatrix::<f64>::identity(dim, dim);
        for (m, binary_weights) in [(&a, true), (&b, count.is_power_of_two())] {
            for row in 0..=clients {
                let dev = (block_row_sum(m, row, dim) - &eye).amax();
                if binary_weights {
                    exact_rows += 1;
                    if dev != 0.0 {
                        exact_violations += 1;
                    }
                } else {
                    rounded_rows += 1;
                    worst_rounded = worst_rounded.max(dev);
                }
            }
        }
    }
    let pass = worst_fixed <= 1e-12 && exact_violations == 0 && worst_rounded <= f64::EPSILON;
    report(
        3,
        pass,
        format!(
            "1000 configs, max fixed-point residual {worst_fixed:e}; {exact_rows} block rows with binary weights, \
             {exact_violations} not exactly I; {rounded_rows} rows with rounded 1/|S|, max dev {worst_rounded:e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_step_size_bound_separates_convergence_and_divergence() {
    let start = Instant::now();
    let cfg = ConvergenceConfig::default();
    assert_eq!((cfg.clients, cfg.dim, cfg.rounds), (10, 16, 2000));
    let setup = ConvergenceSetup::new(&cfg).unwrap();
    let bound = setup.bound.value();
    let inside = verify_with_setup(&setup, 0.5 * bound, 200).unwrap();
    let outside = verify_with_setup(&setup, 2.5 * bound, 200).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = inside.verdict() == "converged" && outside.verdict() == "diverged" && elapsed < 120.0;
    report(
        4,
        pass,
        format!(
            "bound {bound:.4}; 0.5x: {} (final/initial {:.4}); 2.5x: {} ({} of 200 trials diverged); {elapsed:.1}s",
            inside.verdict(),
            inside.final_norm / inside.initial_norm,
            outside.verdict(),
            outside.diverged_trials
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_traffic_is_one_fifth_of_online_fed() {
    let base = ExperimentConfig { rounds: 2000, ..ExperimentConfig::preset(Preset::Paper) };
    assert_eq!((base.shared, base.dim, base.per_round), (40, 200, 4));
    let pso = ExperimentConfig { algorithm: Algorithm::PsoFed, ..base.clone() };
    let online = ExperimentConfig { algorithm: Algorithm::OnlineFed, ..base.clone() };
    let seed = 5;
    let mut data_a = RunData::new(&pso, seed).unwrap();
    let mut data_b = RunData::new(&online, seed).unwrap();
    let mut fed_a = build_federation(&pso, seed).unwrap();
    let mut fed_b = build_federation(&online, seed).unwrap();
    let mut bad_rounds = 0usize;
    for _ in 0..base.rounds {
        fed_a.run_round(&data_a.next_samples().unwrap()).unwrap();
        fed_b.run_round(&data_b.next_samples().unwrap()).unwrap();
        let (a, b) = (fed_a.traffic(), fed_b.traffic());
        let exact = 5 * a.up == b.up && 5 * a.down == b.down;
        if !exact || a.total() as f64 / b.total() as f64 != 0.2 {
            bad_rounds += 1;
        }
    }
    let pass = bad_rounds == 0;
    report(
        5,
        pass,
        format!(
            "{} rounds, {bad_rounds} off-ratio, final {} vs {} scalars",
            base.rounds,
            fed_a.traffic().total(),
            fed_b.traffic().total()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_learning_curve_shape() {
    let start = Instant::now();
    let base = ExperimentConfig { runs: 50, rounds: 2000, ..ExperimentConfig::preset(Preset::Paper) };
    assert_eq!((base.clients, base.dim, base.step, base.per_round), (100, 200, 0.75, 4));
    let run = |algorithm, shared, scheme| {
        run_experiment(&ExperimentConfig { algorithm, shared, scheme, ..base.clone() }).unwrap()
    };
    let online = run(Algorithm::OnlineFed, base.dim, Scheme::Coordinated);
    let m40 = run(Algorithm::PsoFed, 40, Scheme::Coordinated);
    let m1 = run(Algorithm::PsoFed, 1, Scheme::Coordinated);
    let m1_unc = run(Algorithm::PsoFed, 1, Scheme::Uncoordinated);
    let elapsed = start.elapsed().as_secs_f64();

    let ss = |r: &psofed::experiment::ExperimentResult| r.steady_state_db(0.1);
    let gap_a = (ss(&m40) - ss(&online)).abs();
    let a = gap_a <= 1.0;

    let early = base.rounds / 10 - 1;
    let (m1_early, m40_early) = (m1.records[early].mse_db, m40.records[early].mse_db);
    let gap_b = (ss(&m1) - ss(&m40)).abs();
    let b = m1_early > m40_early && gap_b <= 2.0;

    let (coord, unc) = (m1.rounds_to_drop(5.0), m1_unc.rounds_to_drop(5.0));
    let c = match (coord, unc) {
        (Some(x), Some(y)) => x <= y,
        (Some(_), None) => true,
        _ => false,
    };
    let timely = elapsed < 600.0;

    let pass = a && b && c && timely;
    report(
        6,
        pass,
        format!(
            "(a) steady state M40 {:.2} dB vs online {:.2} dB, gap {gap_a:.2}: {a}; \
             (b) round {} M1 {m1_early:.2} dB vs M40 {m40_early:.2} dB, steady-state gap {gap_b:.2}: {b}; \
             (c) -5 dB at round {coord:?} coordinated vs {unc:?} uncoordinated: {c}; {elapsed:.0}s",
            ss(&m40),
            ss(&online),
            early + 1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_rff_kernel_fidelity() {
    let window = 4;
    let mapper = RffMapper::new(window, 2000, 1.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..window).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let radius = 2.0 * rng.random::<f64>();
        v.iter().map(|x| x / norm * radius).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x, y) = (point(&mut rng), point(&mut rng));
        let zx = mapper.map(&x).unwrap();
        let zy = mapper.map(&y).unwrap();
        let approx: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
        let dist2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        worst = worst.max((approx - (-dist2 / 2.0).exp()).abs());
    }
    let pass = worst < 0.05;
    report(7, pass, format!("D = 2000, 100 pairs, max error {worst:.4}"));
    assert!(pass);
}

#[test]
fn criterion_8_round_matches_extended_error_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let clients = rng.random_range(1..=5);
        let dim = rng.random_range(1..=6);
        let shared = rng.random_range(0..=dim);
        let shift = rng.random_range(1..=dim);
        let per_round = rng.random_range(1..=clients);
        let scheme = if rng.random_bool(0.5) { Scheme::Coordinated } else { Scheme::Uncoordinated };
        let step = rng.random_range(0.05..1.0);
        let masks = masks::init(scheme, dim, shared, shift, clients, trial).unwrap();

        let w_star = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let mut server = ServerState::new(dim, trial);
        server.w_global = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let states: Vec<ClientState> = masks
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut c = ClientState::new(k, m.clone(), step);
                c.w_local = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                c
            })
            .collect();
        let features: Vec<Vec<f64>> =
            (0..clients).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let samples: Vec<Sample> = features
            .iter()
            .map(|z| Sample { z: z.clone(), y: z.iter().zip(w_star.iter()).map(|(a, b)| a * b).sum() })
            .collect();

        let system = ExtendedSystem::new(w_star, vec![DMatrix::identity(dim, dim); clients]).unwrap();
        let locals: Vec<&[f64]> = states.iter().map(|c| c.w_local.as_slice()).collect();
        let before = system.error_vector(&server.w_global, &locals).unwrap();

        let selected = server.select_clients(clients, per_round).unwrap();
        let part: Vec<bool> = (0..clients).map(|k| selected.contains(&k)).collect();
        let a = build_a(&masks, &part).unwrap();
        let advanced: Vec<SelectionMask> = masks.iter().map(SelectionMask::advanced).collect();
        let b = build_b(&advanced, &part, per_round).unwrap();
        let z_e = extended_inputs(&features).unwrap();
        let expected = error_recursion_step(&a, &b, &z_e, &vec![0.0; clients], step, &before).unwrap();

        let mut fed = Federation::new(Algorithm::PsoFed, server, states, per_round).unwrap();
        let report = fed.run_round(&samples).unwrap();
        assert_eq!(report.selected, selected);
        let locals: Vec<&[f64]> = fed.clients().iter().map(|c| c.w_local.as_slice()).collect();
        let after = system.error_vector(fed.global_model(), &locals).unwrap();
        worst = worst.max((after - expected).amax());
    }
    let pass = worst < 1e-10;
    report(8, pass, format!("100 configurations, max deviation {worst:e}"));
    assert!(pass);
}
