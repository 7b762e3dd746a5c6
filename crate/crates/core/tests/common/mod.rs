//! Helpers shared by the integration test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rscvae::latent::JsImpl;
use rscvae::losses::{batch_objective, batch_objective_with_grad, LossWeights, Role, TrainingMode};
use rscvae::networks::{EncoderSpec, Vae};
use rscvae::nn::Slot;
use rscvae::tensor::Tensor;

fn inputs(n: usize, side: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * side * side).map(|_| rng.random_range(0.0..1.0)).collect();
    let e: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    (
        Tensor::from_vec(&[n, 1, side, side], x).unwrap(),
        Tensor::from_vec(&[n, d], e).unwrap(),
    )
}

fn objective(model: &Vae<f64>, x: &Tensor<f64>, noise: &Tensor<f64>, mode: TrainingMode, roles: &[Role], js: JsImpl) -> f64 {
    let pass = model.train_forward(x, noise.clone()).unwrap();
    batch_objective(mode, &pass.trace, roles, &LossWeights::default(), js).unwrap()
}

/// Adds `delta` to the `k`-th scalar parameter in visiting order.
fn nudge(model: &mut Vae<f64>, k: usize, delta: f64) {
    let mut seen = 0;
    model.visit(&mut |_, slot| {
        if let Slot::Param(p) = slot {
            let n = p.value.len();
            if (seen..seen + n).contains(&k) {
                p.value.data_mut()[k - seen] += delta;
            }
            seen += n;
        }
    });
}

fn analytic(model: &mut Vae<f64>) -> Vec<f64> {
    let mut g = Vec::new();
    model.visit(&mut |_, slot| {
        if let Slot::Param(p) = slot {
            g.extend_from_slice(p.grad.data());
        }
    });
    g
}

fn name_of(model: &mut Vae<f64>, k: usize) -> String {
    let mut seen = 0;
    let mut out = String::new();
    model.visit(&mut |name, slot| {
        if let Slot::Param(p) = slot {
            let n = p.value.len();
            if (seen..seen + n).contains(&k) {
                out = format!("{name}[{}]", k - seen);
            }
            seen += n;
        }
    });
    out
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares backpropagated parameter gradients of the full training objective with
/// central differences on `coords` random coordinates (all of them when `None`).
pub fn grad_check(spec: &EncoderSpec, mode: TrainingMode, roles: &[Role], js: JsImpl, coords: Option<usize>) -> GradCheck {
    let mut model = Vae::<f64>::new_unchecked(spec, 11).unwrap();
    let side = spec.input_shape.1;
    let (x, noise) = inputs(roles.len(), side, spec.latent_dim, 5);

    model.zero_grad();
    let pass = model.train_forward(&x, noise.clone()).unwrap();
    let eval = batch_objective_with_grad(mode, &pass.trace, roles, &LossWeights::default(), js).unwrap();
    model.backward(pass, &eval.grads).unwrap();
    let grad = analytic(&mut model);

    let picks: Vec<usize> = match coords {
        None => (0..grad.len()).collect(),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..k).map(|_| rng.random_range(0..grad.len())).collect()
        }
    };
    // Small steps keep the probes from crossing activation and |x - x̂| kinks.
    let h = 1e-7;
    let mut worst = (0.0, 0);
    for &k in &picks {
        nudge(&mut model, k, h);
        let up = objective(&model, &x, &noise, mode, roles, js);
        nudge(&mut model, k, -2.0 * h);
        let down = objective(&model, &x, &noise, mode, roles, js);
        nudge(&mut model, k, h);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-2);
        if rel > worst.0 {
            worst = (rel, k);
        }
    }
    GradCheck {
        worst_rel: worst.0,
        worst_param: name_of(&mut model, worst.1),
        checked: picks.len(),
    }
}

/// 8×8 single-channel images, D = 8, narrow widths.
pub fn tiny_spec() -> EncoderSpec {
    let mut s = EncoderSpec::small(1, 8).with_widths(&[2, 3, 4, 4]);
    s.input_shape = (1, 8, 8);
    s
}
