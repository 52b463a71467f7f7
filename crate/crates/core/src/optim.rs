use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step, before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `param` from `grad` (already clipped/scaled).
    pub fn update<T: Scalar>(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T], lr: f64) {
        assert!(self.step > 0, "begin_step must precede update");
        let n = param.len();
        let (m, v) = self
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i].to_f64().expect("finite gradient");
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let delta = lr * mhat / (vhat.sqrt() + eps);
            if delta != 0.0 {
                *p = T::of(p.to_f64().expect("finite weight") - delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g and v̂ = g² after one step, so Δ = -lr·g/(|g| + ε).
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = [0.3, -4.0, 1e-3];
        adam.begin_step();
        adam.update("p", &mut p, &g, 0.01);
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(g)
            .map(|(w, gi)| w - 0.01 * gi / (gi.abs() + 1e-8))
            .collect();
        for (a, b) in p.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn second_step_hand_computed() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        adam.begin_step();
        adam.update("p", &mut p, &[1.0], 0.1);
        adam.begin_step();
        adam.update("p", &mut p, &[3.0], 0.1);
        let m = 0.9 * 0.1 + 0.1 * 3.0;
        let v = 0.999 * 0.001 + 0.001 * 9.0;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let first = -0.1 * 1.0 / (1.0 + 1e-8);
        let expected = first - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f32>::new(vec![2], vec![0.25, -0.5]).unwrap();
        let before = p.clone();
        for _ in 0..10 {
            adam.begin_step();
            adam.update("p", &mut p, &[1.0, -1.0], 0.0);
        }
        assert_eq!(p, before);
    }
}
