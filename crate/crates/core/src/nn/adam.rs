use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam descent step using the gradients held in `store`.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) {
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let step_size = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(eps);

    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let vhat = v[i] * inv_c2;
            *w -= step_size * m[i] / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = vals.len();
        s.add("w", Tensor::matrix(1, n, vals).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(vec![1.0, -2.0, 3.5]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut s, &mut st);
        }
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(vec![0.0]);
        s.iter_mut().next().unwrap().grad.data_mut()[0] = 1.0;
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&s, cfg);
        adam_step(&mut s, &mut st);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = -cfg.lr / (1.0 + cfg.eps);
        let got = s.iter().next().unwrap().tensor.data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut s = store(vec![0.3, -0.7]);
            let mut st = AdamState::new(&s, AdamConfig::default());
            for k in 0..10 {
                let p = s.iter_mut().next().unwrap();
                let w = p.tensor.data().to_vec();
                p.grad.data_mut()[0] = 2.0 * w[0] + k as f64 * 0.01;
                p.grad.data_mut()[1] = (w[1] * 3.0).sin();
                adam_step(&mut s, &mut st);
            }
            let out = s.iter().next().unwrap().tensor.clone();
            out
        };
        assert_eq!(run(), run());
    }
}
