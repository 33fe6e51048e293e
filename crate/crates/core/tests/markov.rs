use nalgebra::DMatrix;
use otfp::dual;
use otfp::linalg;
use otfp::markov::{
    backward_g, enumerate_paths, exact_mean_residual, flattened_problem, forward_marginals, tilted_chain,
    tracking_solve, MarkovProblem, TrackingOptions,
};
use otfp::solvers::{solve_fpr, SolveOptions};
use otfp::stochastic::SAOptions;
use otfp::{Error, Point, QuadraticPenalty};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stochastic_row<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0)).collect();
    let t: f64 = w.iter().sum();
    let mut w: Vec<f64> = w.iter().map(|v| v / t).collect();
    // Exact unit sum so the stochasticity check is not at the mercy of rounding.
    let head: f64 = w[..s - 1].iter().sum();
    w[s - 1] = 1.0 - head;
    w
}

fn random_chain<R: Rng>(rng: &mut R, s: usize, m: usize) -> MarkovProblem {
    let states = (0..s).map(|_| Point::scalar(rng.random_range(-1.0..1.0)).unwrap()).collect();
    let nu0 = stochastic_row(rng, s);
    let kernels = (0..m)
        .map(|_| {
            let rows: Vec<f64> = (0..s).flat_map(|_| stochastic_row(rng, s)).collect();
            DMatrix::from_row_slice(s, s, &rows)
        })
        .collect();
    let utility: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lo = utility.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = utility.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let reference = (0..m).map(|_| lo + (hi - lo) * rng.random_range(0.2..0.8)).collect();
    MarkovProblem::new(states, nu0, kernels, utility, reference, rng.random_range(0.2..2.0)).unwrap()
}

fn two_state(r: f64) -> MarkovProblem {
    let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
    let pts = vec![Point::scalar(0.0).unwrap(), Point::scalar(1.0).unwrap()];
    MarkovProblem::homogeneous(pts, vec![0.5, 0.5], p, vec![0.0, 1.0], vec![r; 4], 0.5).unwrap()
}

#[test]
fn tilted_chain_factorizes_the_path_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 1..=3 {
        for m in 1..=3 {
            let mp = random_chain(&mut rng, s, m);
            for _ in 0..3 {
                let lambda: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                let x0 = rng.random_range(0..s);
                let flat = flattened_problem(&mp, x0).unwrap();
                let paths = enumerate_paths(&mp, x0);
                for (row, (x_path, _)) in paths.iter().enumerate() {
                    let chain = tilted_chain(&mp, &lambda, x_path).unwrap();
                    let kernel = dual::kernel_row(&flat, &lambda, mp.epsilon(), row);
                    for (col, (y_path, _)) in paths.iter().enumerate() {
                        let prod: f64 = (1..=m).map(|k| chain.check[k - 1][(y_path[k - 1], y_path[k])]).product();
                        assert!((prod - kernel[col]).abs() < 1e-12, "{prod} vs {}", kernel[col]);
                    }
                    let b = dual::soft_min_b(&flat, &lambda, mp.epsilon(), row);
                    assert!((chain.b - b).abs() < 1e-12 * (1.0 + b.abs()));
                    let (log_g, b2) = backward_g(&mp, &lambda, x_path).unwrap();
                    assert_eq!(b2, chain.b);
                    assert_eq!(log_g, chain.log_g);
                    assert!((b2 - mp.epsilon() * log_g[0][x_path[0]]).abs() == 0.0);
                }
            }
        }
    }
}

#[test]
fn check_kernels_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mp = random_chain(&mut rng, 4, 3);
    let lambda = [1.5, -3.0, 0.2];
    let path = mp.sample_path(&mut rng);
    let chain = tilted_chain(&mp, &lambda, &path).unwrap();
    for c in &chain.check {
        for y in 0..4 {
            assert!((c.row(y).sum() - 1.0).abs() < 1e-14);
            assert!(c.row(y).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn forward_marginals_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mp = random_chain(&mut rng, 3, 3);
    let lambda = [0.4, -0.9, 1.3];
    let x0 = 1;
    let flat = flattened_problem(&mp, x0).unwrap();
    let paths = enumerate_paths(&mp, x0);
    for (row, (x_path, _)) in paths.iter().enumerate() {
        let (nu, mt) = forward_marginals(&mp, &lambda, x_path).unwrap();
        let kernel = dual::kernel_row(&flat, &lambda, mp.epsilon(), row);
        for k in 1..=3 {
            let mut expect = [0.0; 3];
            for (col, (y_path, _)) in paths.iter().enumerate() {
                expect[y_path[k]] += kernel[col];
            }
            for y in 0..3 {
                assert!((nu[k - 1][y] - expect[y]).abs() < 1e-12);
            }
            let eu: f64 = expect.iter().zip(mp.utility()).map(|(p, u)| p * u).sum();
            assert!((mt[k - 1] - (eu - mp.reference()[k - 1])).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_residual_is_the_path_space_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mp = random_chain(&mut rng, 3, 2);
    let lambda = [0.8, -0.5];
    let eps = mp.epsilon();
    let zeta: Vec<f64> = lambda.iter().map(|l| l / eps).collect();
    let mut expect = vec![0.0; 2];
    for (x0, &w0) in mp.nu0().iter().enumerate() {
        let g = dual::grad_j(&flattened_problem(&mp, x0).unwrap(), &zeta, eps);
        for (a, v) in expect.iter_mut().zip(g) {
            *a += w0 * v;
        }
    }
    let got = exact_mean_residual(&mp, &lambda).unwrap();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn shifting_utility_and_reference_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mp = random_chain(&mut rng, 3, 3);
    let shifted = MarkovProblem::new(
        mp.states().to_vec(),
        mp.nu0().to_vec(),
        mp.kernels().to_vec(),
        mp.utility().iter().map(|u| u + 7.0).collect(),
        mp.reference().iter().map(|r| r + 7.0).collect(),
        mp.epsilon(),
    )
    .unwrap();
    let lambda = [0.3, 1.1, -0.6];
    let path = mp.sample_path(&mut rng);
    let a = tilted_chain(&mp, &lambda, &path).unwrap();
    let b = tilted_chain(&shifted, &lambda, &path).unwrap();
    for (x, y) in a.check.iter().zip(&b.check) {
        assert!((x - y).amax() < 1e-12);
    }
    assert!((a.b - b.b).abs() < 1e-12);
}

#[test]
fn zero_multiplier_leaves_only_the_cost_tilt() {
    // Coincident states: no cost, no tilt, the nominal chain is recovered.
    let p = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]);
    let pts = vec![Point::scalar(0.0).unwrap(), Point::scalar(0.0).unwrap()];
    let mp = MarkovProblem::homogeneous(pts, vec![0.5, 0.5], p.clone(), vec![0.0, 1.0], vec![0.5; 3], 0.4).unwrap();
    let chain = tilted_chain(&mp, &[0.0; 3], &[0, 1, 1, 0]).unwrap();
    for c in &chain.check {
        assert!((c - &p).amax() < 1e-15);
    }
    assert!(chain.b.abs() < 1e-15);
}

#[test]
fn tracking_matches_path_space_newton() {
    // A point-mass start makes the whole problem one flattened instance.
    let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
    let pts = vec![Point::scalar(0.0).unwrap(), Point::scalar(1.0).unwrap()];
    let mp = MarkovProblem::homogeneous(pts, vec![1.0, 0.0], p, vec![0.0, 1.0], vec![0.4, 0.6, 0.7], 0.5).unwrap();
    let flat = flattened_problem(&mp, 0).unwrap();
    let newton = solve_fpr(&flat, mp.epsilon(), &SolveOptions::default()).unwrap();
    assert!(newton.converged);
    assert!(linalg::norm_inf(&exact_mean_residual(&mp, &newton.lambda_star).unwrap()) < 1e-8);
    let opts = TrackingOptions {
        sa: SAOptions { a: 20.0, horizon: 50_000, seed: 3, record_every: 5_000, ..Default::default() },
        eval_paths: 5_000,
    };
    let res = tracking_solve(&mp, None, &opts).unwrap();
    let z_star = newton.zeta_star();
    let d: f64 = res.trace.averaged_zeta.iter().zip(&z_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(d <= 0.05 * (1.0 + linalg::norm2(&z_star)), "{:?} vs {z_star:?}", res.trace.averaged_zeta);
    assert!(res.report.max_error < 0.02);
}

#[test]
fn unreachable_reference() {
    let mp = two_state(2.0);
    let err = tracking_solve(&mp, None, &TrackingOptions::default()).unwrap_err();
    assert!(matches!(err, Error::TargetOutOfRange { target, .. } if target == 2.0));

    let pen = QuadraticPenalty::new(10.0).unwrap();
    let opts = TrackingOptions {
        sa: SAOptions { a: 20.0, horizon: 50_000, seed: 1, record_every: 10_000, ..Default::default() },
        eval_paths: 2_000,
    };
    let res = tracking_solve(&mp, Some(&pen), &opts).unwrap();
    let lambda = res.trace.averaged_lambda();
    let m = exact_mean_residual(&mp, &lambda).unwrap();
    // Stationarity m − ∇R*(−λ) with ∇R*(x) = x/κ.
    let stat: Vec<f64> = m.iter().zip(&lambda).map(|(a, l)| a + l / 10.0).collect();
    assert!(linalg::norm_inf(&stat) < 0.02, "{stat:?}");
    // The penalized optimum pushes toward the reference but cannot reach it.
    assert!(res.report.rows.iter().all(|r| r.achieved > 0.5 && r.achieved < 1.0));
}

#[test]
fn tracking_is_reproducible() {
    let mp = two_state(0.7);
    let opts = TrackingOptions {
        sa: SAOptions { a: 20.0, horizon: 2_000, seed: 9, ..Default::default() },
        eval_paths: 500,
    };
    assert_eq!(tracking_solve(&mp, None, &opts).unwrap(), tracking_solve(&mp, None, &opts).unwrap());
}
