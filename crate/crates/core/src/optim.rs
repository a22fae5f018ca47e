//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment accumulators mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    /// One update `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64, config: &AdamConfig) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::invalid("gradients", "layout does not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        // Per-element arithmetic runs in f64; only storage is f32.
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let (b1, b2, eps) = (config.beta1, config.beta2, config.eps);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = g as f64;
                let m_new = b1 * *m as f64 + (1.0 - b1) * g;
                let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let step = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *p = (*p as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Hand-unrolled reference recurrence in f64 on f(x) = (x − 3)².
    #[test]
    fn matches_reference_trace() {
        let mut params = Params::new();
        params.insert("x", Tensor::from_vec(&[1], vec![0.5]).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        let lr = 0.1;

        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for step in 1..=25 {
            let g = 2.0 * (params.tensors()[0].data()[0] as f64 - 3.0);
            let mut grads = Params::new();
            grads.insert("x", Tensor::from_vec(&[1], vec![g as f32]).unwrap()).unwrap();
            state.update(&mut params, &grads, lr, &cfg).unwrap();

            let gr = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            x -= lr * mh / (vh.sqrt() + 1e-8);

            let got = params.tensors()[0].data()[0] as f64;
            assert!(((got - x) / x).abs() < 1e-6, "step {step}: {got} vs {x}");
        }
        assert_eq!(state.step, 25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr · sign(g) (up to ε).
        let mut params = Params::new();
        params.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut grads = params.zeros_like();
        grads.tensors_mut()[0].data_mut().copy_from_slice(&[0.37, -12.0]);
        let mut state = AdamState::new(&params);
        state.update(&mut params, &grads, 0.01, &AdamConfig::default()).unwrap();
        let p = params.tensors()[0].data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn rejects_layout_mismatch() {
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut other = Params::new();
        other.insert("w", Tensor::zeros(&[3])).unwrap();
        let mut state = AdamState::new(&params);
        assert!(state.update(&mut params, &other, 0.1, &AdamConfig::default()).is_err());
    }
}
