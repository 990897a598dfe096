use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rqr_core::losses::{
    beta_pinball, beta_pinball_dr, pinball, pinball_dr, BetaConfig, QuantileLevel,
};
use rqr_core::net::{self, Mlp, Workspace};

const H: f64 = 1e-5;
const REL: f64 = 1e-5;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * a.abs().max(b.abs()).max(1e-6)
}

/// A random network and input whose pre-activations all sit at least 1e-3
/// from the relu kink.
fn sample(rng: &mut ChaCha8Rng) -> (Mlp, Vec<f64>) {
    loop {
        let d = rng.random_range(1..=3);
        let arch = if rng.random_bool(0.3) {
            net::linear(d)
        } else {
            net::relu_mlp(d, rng.random_range(2..=8))
        };
        let mut model = Mlp::new(&arch, rng.random()).unwrap();
        for p in model.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut ws = Workspace::default();
        model.forward_train(&x, &mut ws).unwrap();
        let clear = ws
            .pre_activations()
            .iter()
            .take(arch.len() - 1)
            .flatten()
            .all(|z| z.abs() > 1e-3);
        if clear {
            return (model, x);
        }
    }
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (model, x) = sample(&mut rng);
        let grads = model.backward(&x, 1.0).unwrap();
        for j in 0..model.param_count() {
            let mut plus = model.clone();
            plus.params_mut()[j] += H;
            let mut minus = model.clone();
            minus.params_mut()[j] -= H;
            let fd = (plus.forward(&x).unwrap() - minus.forward(&x).unwrap()) / (2.0 * H);
            assert!(
                close(fd, grads.as_slice()[j]),
                "param {j}: {fd} vs {}",
                grads.as_slice()[j]
            );
        }
    }
}

#[test]
fn loss_gradients_chain_through_the_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut done = 0;
    while done < 100 {
        let (model, x) = sample(&mut rng);
        let y = model.forward(&x).unwrap() + rng.random_range(-3.0..3.0);
        let r = y - model.forward(&x).unwrap();
        if r.abs() <= 1e-3 {
            continue;
        }
        let a = QuantileLevel::new(rng.random_range(0.05..0.95)).unwrap();
        let cfg = BetaConfig::new(rng.random_range(0.1..3.0), rng.random_range(0.5..2.0)).unwrap();
        let losses: [(&dyn Fn(f64) -> f64, f64); 2] = [
            (&|r| pinball(r, a), pinball_dr(r, a)),
            (&|r| beta_pinball(r, a, cfg), beta_pinball_dr(r, a, cfg)),
        ];
        for (loss, dr) in losses {
            let grads = model.backward(&x, -dr).unwrap();
            for j in 0..model.param_count() {
                let mut plus = model.clone();
                plus.params_mut()[j] += H;
                let mut minus = model.clone();
                minus.params_mut()[j] -= H;
                let fd = (loss(y - plus.forward(&x).unwrap())
                    - loss(y - minus.forward(&x).unwrap()))
                    / (2.0 * H);
                assert!(
                    close(fd, grads.as_slice()[j]),
                    "param {j}: {fd} vs {}",
                    grads.as_slice()[j]
                );
            }
        }
        done += 1;
    }
}
