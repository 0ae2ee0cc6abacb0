//! Adam with bias correction and a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-slot moment estimates; slots are indices chosen by the caller
/// (parameter ids), so the optimizer never sees parameters it does not update.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    slots: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, slots: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every `(slot, value, grad)` triple.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (usize, &'a mut Tensor, &'a Tensor)>) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (slot, value, grad) in updates {
            if self.slots.len() <= slot {
                self.slots.resize(slot + 1, None);
            }
            let n = value.numel();
            let st = self.slots[slot].get_or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let data = value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        adam.step([(0, &mut x, &g)]);
        assert!((x.data()[0] - 0.9).abs() < 1e-6);
        assert!((x.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        let mut x = Tensor::new(&[1], vec![4.0]).unwrap();
        for _ in 0..500 {
            let g = Tensor::new(&[1], vec![2.0 * (x.data()[0] - 1.5)]).unwrap();
            adam.step([(0, &mut x, &g)]);
        }
        assert!((x.data()[0] - 1.5).abs() < 1e-2);
    }
}
