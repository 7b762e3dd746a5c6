//! Adam and the warm-restart cosine learning-rate schedule.

use crate::networks::Vae;
use crate::nn::Slot;
use crate::tensor::{Real, Tensor};

/// `½·lr0·(1 + cos(π·(epoch mod t_max)/t_max))`, restarting every `t_max` epochs.
pub fn cosine_lr(epoch: usize, lr0: f64, t_max: usize) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let phase = (epoch % t_max) as f64 / t_max as f64;
    (0.5 * lr0 * (1.0 + (std::f64::consts::PI * phase).cos())).max(0.0)
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `model` from its accumulated gradient.
    pub fn step(&mut self, model: &mut Vae<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (T::c(self.beta1), T::c(self.beta2), T::c(self.eps));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(lr / c1);
        let c2_sqrt = T::c(c2.sqrt());
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit(&mut |_, slot| {
            let Slot::Param(p) = slot else { return };
            if m_all.len() <= idx {
                m_all.push(Tensor::zeros(p.value.shape()));
                v_all.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (m_all[idx].data_mut(), v_all[idx].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Backbone, EncoderSpec};

    #[test]
    fn cosine_schedule_points() {
        assert!((cosine_lr(0, 0.01, 50) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(25, 0.01, 50) - 0.005).abs() < 1e-15);
        assert!((cosine_lr(50, 0.01, 50) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(75, 0.01, 50) - 0.005).abs() < 1e-15);
        for e in 0..200 {
            let lr = cosine_lr(e, 0.01, 50);
            let direct = 0.5 * 0.01 * (1.0 + (std::f64::consts::PI * (e % 50) as f64 / 50.0).cos());
            assert!((lr - direct).abs() < 1e-15);
            assert!(lr > 0.0 && lr <= 0.01);
        }
    }

    fn mini() -> Vae<f64> {
        let spec = EncoderSpec {
            input_shape: (1, 8, 8),
            latent_dim: 8,
            backbone: Backbone::SmallConv,
            widths: vec![2, 2, 2, 2],
        };
        Vae::new_unchecked(&spec, 3).unwrap()
    }

    #[test]
    fn first_adam_step_moves_each_weight_by_lr_times_sign() {
        let mut vae = mini();
        let before = vae.named_tensors();
        vae.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = if i % 2 == 0 { 0.3 } else { -2.0 };
                }
            }
        });
        let mut opt = Adam::default();
        opt.step(&mut vae, 0.01);
        for ((_, a), (_, b)) in before.iter().zip(vae.named_tensors()) {
            if a == &b {
                continue;
            }
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let expected = if i % 2 == 0 { -0.01 } else { 0.01 };
                assert!((y - x - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut vae = mini();
        let before = vae.named_tensors();
        vae.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.grad.fill(1.5);
            }
        });
        let mut opt = Adam::default();
        opt.step(&mut vae, 0.0);
        opt.step(&mut vae, 0.0);
        assert_eq!(before, vae.named_tensors());
    }
}
