use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rqr_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use rqr_core::losses::{beta_pinball, pinball, BetaConfig, QuantileLevel};
use rqr_core::net::{self, AdamConfig, LayerSpec, Mlp};
use rqr_core::trainers::{
    fit_reference, train, train_alpha, train_beta_qr, train_qr, train_rcp, LrSchedule, Method,
    TrainConfig, Trim,
};

fn level(a: f64) -> QuantileLevel {
    QuantileLevel::new(a).unwrap()
}

fn random_data(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            xs[i * d..(i + 1) * d].iter().sum::<f64>().sin() * 2.0 + e
        })
        .collect();
    Dataset::new("random", xs, d, ys).unwrap()
}

fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let ys = xs
        .iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            2.0 * x + 1.0 + 0.3 * e
        })
        .collect();
    Dataset::new("linear", xs, 1, ys).unwrap()
}

fn config(method: Method, epochs: usize, batch: Option<usize>) -> TrainConfig {
    let mut cfg = TrainConfig::new(&[0.3], method).unwrap();
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.convergence_tol = 0.0;
    cfg.seed = 5;
    cfg.adam = AdamConfig::with_learning_rate(0.01);
    cfg
}

fn trajectory(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut steps = Vec::new();
    let mut obs = |m: &Mlp| steps.push(m.params().to_vec());
    train_alpha(data, arch, cfg, cfg.alphas[0], Some(&mut obs)).unwrap();
    steps
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn limiting_cases_reproduce_plain_trajectories() {
    let data = random_data(40, 2, 1);
    let arch = net::relu_mlp(2, 8);

    let qr = trajectory(&data, &arch, &config(Method::Qr, 100, None));
    assert_eq!(qr.len(), 100);
    let tqr = trajectory(
        &data,
        &arch,
        &config(
            Method::Tqr {
                trim: Trim::Count(40),
            },
            100,
            None,
        ),
    );
    assert!(max_gap(&qr, &tqr) <= 1e-6);
    let rcp = trajectory(
        &data,
        &arch,
        &config(
            Method::Rcp {
                lambda: 1e6,
                gamma_lr: 0.01,
                outer_iters: 4,
                inner_steps: 25,
            },
            4,
            None,
        ),
    );
    assert!(max_gap(&qr, &rcp) <= 1e-6);

    // mini-batches: same seed, same batch order
    let qr = trajectory(&data, &arch, &config(Method::Qr, 10, Some(4)));
    assert_eq!(qr.len(), 100);
    let beta = trajectory(
        &data,
        &arch,
        &config(
            Method::BetaQr {
                beta: 1e-8,
                sigma: 1.0,
            },
            10,
            Some(4),
        ),
    );
    assert!(max_gap(&qr, &beta) <= 1e-6);
}

#[test]
fn levels_are_fitted_independently() {
    let data = random_data(60, 1, 2);
    let arch = net::relu_mlp(1, 6);
    let mut joint = TrainConfig::new(
        &[0.25, 0.5, 0.75],
        Method::BetaQr {
            beta: 0.5,
            sigma: 1.0,
        },
    )
    .unwrap();
    joint.epochs = 20;
    joint.batch_size = Some(16);
    let together = train(&data, &arch, &joint).unwrap();
    for fit in &together.fits {
        let single = TrainConfig {
            alphas: vec![fit.alpha],
            ..joint.clone()
        };
        let alone = train(&data, &arch, &single).unwrap();
        assert_eq!(alone.fits[0], *fit);
    }
}

#[test]
fn clean_linear_median_slope() {
    let data = linear_data(1000, 3);
    let mut cfg = TrainConfig::new(&[0.5], Method::Qr).unwrap();
    cfg.epochs = 3000;
    cfg.adam = AdamConfig::with_learning_rate(0.01);
    let fit = train_qr(&data, &net::linear(1), &cfg).unwrap();
    let f = &fit.fits[0];
    let slope = f.predict(&[1.0]).unwrap() - f.predict(&[0.0]).unwrap();
    assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
}

/// Smallest total loss over constant candidates on a fine grid.
fn scan_min(ys: &[f64], lo: f64, hi: f64, loss: &dyn Fn(f64) -> f64) -> f64 {
    (0..=200_000)
        .map(|k| lo + (hi - lo) * k as f64 / 200_000.0)
        .map(|c| total(ys, c, loss))
        .fold(f64::INFINITY, f64::min)
}

fn total(ys: &[f64], c: f64, loss: &dyn Fn(f64) -> f64) -> f64 {
    ys.iter().map(|y| loss(y - c)).sum()
}

fn constant_fit(ys: &[f64], alpha: f64, method: Method, epochs: usize, lr: f64) -> f64 {
    // all-zero feature: only the bias can move the prediction
    let data = Dataset::new("const", vec![0.0; ys.len()], 1, ys.to_vec()).unwrap();
    let mut cfg = TrainConfig::new(&[alpha], method).unwrap();
    cfg.epochs = epochs;
    cfg.standardize = false;
    cfg.convergence_tol = 0.0;
    cfg.adam = AdamConfig::with_learning_rate(lr);
    cfg.lr_schedule = LrSchedule::Linear;
    let fit = train(&data, &net::linear(1), &cfg).unwrap();
    fit.fits[0].predict(&[0.0]).unwrap()
}

#[test]
fn beta_constant_resists_a_far_outlier() {
    let mut ys = vec![0.0; 99];
    ys.push(1e6);
    let beta = Method::BetaQr {
        beta: 1.0,
        sigma: 1.0,
    };
    let c = constant_fit(&ys, 0.5, beta.clone(), 3000, 0.01);
    assert!(c.abs() < 1e-2, "beta median {c}");
    assert!(constant_fit(&ys, 0.5, Method::Qr, 3000, 0.01).abs() < 1e-2);

    // at α = 0.9 the sample quantile moves off the bulk; β-QR stays near it
    let mut ys: Vec<f64> = (0..85).map(|i| i as f64 / 85.0).collect();
    ys.extend((0..15).map(|i| 50.0 + 3.0 * i as f64));
    let a = level(0.9);
    let cfg = BetaConfig::with_beta(1.0).unwrap();
    let plain = |r: f64| pinball(r, a);
    let robust_loss = |r: f64| beta_pinball(r, a, cfg);
    let qr = constant_fit(&ys, 0.9, Method::Qr, 5000, 0.05);
    let robust = constant_fit(&ys, 0.9, beta, 5000, 0.05);
    let best = scan_min(&ys, 0.0, 100.0, &plain);
    assert!(total(&ys, qr, &plain) - best < 1e-3 * best, "qr {qr}");
    let best = scan_min(&ys, 0.0, 100.0, &robust_loss);
    assert!(
        total(&ys, robust, &robust_loss) - best < 1e-3 * best,
        "beta {robust}"
    );
    assert!(robust < 1.0 && qr > 1.0, "qr {qr}, beta {robust}");
}

#[test]
fn largest_shift_lands_on_the_gross_outlier() {
    let mut hits = 0;
    for seed in 0..3 {
        let mut data_rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let clean = linear_data(50, 200 + seed);
        let target = data_rng.random_range(0..50);
        let mut ys = clean.responses().to_vec();
        ys[target] += 30.0;
        let data = Dataset::new("one outlier", clean.features().to_vec(), 1, ys).unwrap();
        let mut cfg = TrainConfig::new(
            &[0.5],
            Method::Rcp {
                lambda: 0.1,
                gamma_lr: 0.05,
                outer_iters: 100,
                inner_steps: 20,
            },
        )
        .unwrap();
        cfg.seed = seed;
        cfg.epochs = 100;
        let fit = train_rcp(&data, &net::linear(1), &cfg).unwrap();
        let g = fit.fits[0].gammas.as_ref().unwrap();
        assert_eq!(g.len(), 50);
        let argmax = (0..50)
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap();
        hits += usize::from(argmax == target);
    }
    assert!(hits >= 2, "{hits} of 3");
}

#[test]
fn trajectories_are_finite_and_end_below_the_start() {
    let spec = SyntheticSpec {
        n: 300,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let arch = net::relu_mlp(1, 16);
    let methods = [
        Method::Qr,
        Method::Tqr {
            trim: Trim::Fraction(0.95),
        },
        Method::BetaQr {
            beta: 1.0,
            sigma: 1.0,
        },
        Method::Rcp {
            lambda: 0.5,
            gamma_lr: 0.01,
            outer_iters: 20,
            inner_steps: 20,
        },
    ];
    for method in methods {
        let rcp = matches!(method, Method::Rcp { .. });
        let mut cfg = TrainConfig::new(&[0.25, 0.75], method).unwrap();
        cfg.epochs = 20;
        cfg.batch_size = if rcp { None } else { Some(32) };
        let fit = train(&data, &arch, &cfg).unwrap();
        for f in &fit.fits {
            assert!(f.trajectory.iter().all(|v| v.is_finite()));
            assert!(f.final_loss <= f.initial_loss, "{:?}", fit.method);
        }
    }
}

#[test]
fn reference_on_clean_data_agrees_with_every_trainer() {
    let data = linear_data(200, 9).with_mask(vec![true; 200]).unwrap();
    let arch = net::linear(1);
    let mut base = TrainConfig::new(&[0.5], Method::Qr).unwrap();
    base.epochs = 2000;
    base.adam = AdamConfig::with_learning_rate(0.01);
    let reference = fit_reference(&data, &arch, &base).unwrap();
    let plain = train_qr(&data, &arch, &base).unwrap();
    assert_eq!(reference.fits[0].model, plain.fits[0].model);

    let target = &reference.fits[0];
    let beta = TrainConfig {
        method: Method::BetaQr {
            beta: 0.5,
            sigma: 1.0,
        },
        ..base.clone()
    };
    let tqr = TrainConfig {
        method: Method::Tqr {
            trim: Trim::Fraction(0.98),
        },
        ..base.clone()
    };
    let rcp = TrainConfig {
        method: Method::Rcp {
            lambda: 1.0,
            gamma_lr: 0.01,
            outer_iters: 40,
            inner_steps: 50,
        },
        epochs: 40,
        ..base.clone()
    };
    for cfg in [beta, tqr, rcp] {
        let fit = train(&data, &arch, &cfg).unwrap();
        let f = &fit.fits[0];
        for x in [0.0, 2.5, 5.0] {
            let gap = (f.predict(&[x]).unwrap() - target.predict(&[x]).unwrap()).abs();
            assert!(gap < 0.15, "{:?} at {x}: {gap}", fit.method);
        }
    }
}

#[test]
fn beta_entry_point_checks_the_method() {
    let data = linear_data(10, 0);
    let cfg = TrainConfig::new(&[0.5], Method::Qr).unwrap();
    assert!(train_beta_qr(&data, &net::linear(1), &cfg).is_err());
}

#[test]
fn linear_schedule_decays_to_the_last_epoch() {
    let s = LrSchedule::Linear;
    assert_eq!(s.rate(0.1, 1, 10), 0.1);
    assert!((s.rate(0.1, 10, 10) - 0.01).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.rate(0.1, 7, 10), 0.1);
}
