//! Adam optimizer over named parameter tables, with support for excluding a
//! frozen name set from updates entirely (their moment buffers stay zero and
//! the parameters stay bit-identical).

use crate::tensor::Tensor;
use std::collections::{HashMap, HashSet};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    state: HashMap<String, (Tensor<f32>, Tensor<f32>)>,
    frozen: HashSet<String>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: lr as f32,
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Exclude `names` from all future updates.
    pub fn set_frozen(&mut self, names: HashSet<String>) {
        self.frozen = names;
    }

    pub fn frozen(&self) -> &HashSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Advance the step counter; call once per optimization step before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to a parameter, unless it is frozen.
    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>) {
        assert!(self.t > 0, "begin_step must run before update");
        if self.frozen.contains(name) {
            return;
        }
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        let pd = param.data_mut();
        for (((p, g), mi), vi) in pd
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }

    /// Sum of absolute moment entries for a parameter; zero when the
    /// parameter has never been updated.
    pub fn moment_l1(&self, name: &str) -> f64 {
        self.state
            .get(name)
            .map(|(m, v)| {
                m.data().iter().map(|x| x.abs() as f64).sum::<f64>()
                    + v.data().iter().map(|x| x.abs() as f64).sum::<f64>()
            })
            .unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_moves_parameters_toward_negative_gradient() {
        let mut opt = Adam::new(0.1, 0.0, 0.99);
        let mut p = Tensor::new(&[2], vec![1.0f32, -1.0]);
        let g = Tensor::new(&[2], vec![1.0f32, -1.0]);
        opt.begin_step();
        opt.update("p", &mut p, &g);
        assert!(p.data()[0] < 1.0);
        assert!(p.data()[1] > -1.0);
    }

    #[test]
    fn frozen_parameters_never_move_and_keep_zero_moments() {
        let mut opt = Adam::new(0.1, 0.0, 0.99);
        opt.set_frozen(["a".to_string()].into_iter().collect());
        let mut a = Tensor::new(&[2], vec![0.5f32, 0.25]);
        let before = a.clone();
        let g = Tensor::new(&[2], vec![3.0f32, -3.0]);
        for _ in 0..10 {
            opt.begin_step();
            opt.update("a", &mut a, &g);
        }
        assert!(a.bit_eq(&before));
        assert_eq!(opt.moment_l1("a"), 0.0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut opt = Adam::new(2e-3, 0.0, 0.99);
            let mut p = Tensor::new(&[3], vec![0.1f32, 0.2, 0.3]);
            for i in 1..=5 {
                let g = p.map(|v| v * i as f32);
                opt.begin_step();
                opt.update("p", &mut p, &g);
            }
            p
        };
        assert!(run().bit_eq(&run()));
    }
}
