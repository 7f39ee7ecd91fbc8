//! Adam with bias correction, stepping every parameter of a module.

use serde::{Deserialize, Serialize};

use super::param::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<M: Module<f32>>(&mut self, module: &mut M) {
        let n = module.num_params();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        module.visit_mut("", &mut |_, p| {
            for (i, (w, g)) in p.value.iter_mut().zip(p.grad.iter_mut()).enumerate() {
                let k = off + i;
                m[k] = b1 * m[k] + (1.0 - b1) * *g;
                v[k] = b2 * v[k] + (1.0 - b2) * *g * *g;
                *w -= lr_t * m[k] / (v[k].sqrt() + eps);
                *g = 0.0;
            }
            off += p.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin: Linear<f32> = Linear::new(3, 2, &mut rng);
        let before = lin.flat_values();
        lin.weight.grad.iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 0.5 } else { -2.0 });
        lin.bias.grad.iter_mut().for_each(|g| *g = 1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut lin);
        let after = lin.flat_values();
        let grads = [0.5f32, -2.0, 0.5, -2.0, 0.5, -2.0, 1.0, 1.0];
        for ((a, b), g) in after.iter().zip(&before).zip(grads) {
            assert!(((a - b) + 0.01 * g.signum()).abs() < 1e-6);
        }
        assert!(lin.flat_grads().iter().all(|g| *g == 0.0));
    }
}
