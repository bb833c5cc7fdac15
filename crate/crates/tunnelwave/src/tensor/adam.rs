//! Adam optimizer with bias correction.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &[ArrayD<f64>], hyper: AdamHyper) -> AdamState {
        AdamState {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            step: 0,
            hyper,
        }
    }

    /// One update over all parameters. Zero gradients leave both the
    /// parameter and its moments at rest only in the sense of no movement:
    /// moments still decay, matching the reference algorithm.
    pub fn apply(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr() {
        // At t = 1 the bias-corrected update is lr * g / (|g| + eps') which
        // is lr * sign(g) up to the epsilon.
        let mut params = vec![ArrayD::from_elem(IxDyn(&[3]), 1.0)];
        let grads = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -2.0, 1e-3]).unwrap()];
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(&params, hyper);
        state.apply(&mut params, &grads).unwrap();
        for (i, &g) in [0.5, -2.0, 1e-3].iter().enumerate() {
            let moved = params[0][IxDyn(&[i])] - 1.0;
            let expected = -hyper.lr * (g as f64).signum();
            assert!(
                (moved - expected).abs() < hyper.lr * 1e-4,
                "moved {moved} expected {expected}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![ArrayD::from_elem(IxDyn(&[4]), 2.5)];
        let grads = vec![ArrayD::zeros(IxDyn(&[4]))];
        let mut state = AdamState::new(&params, AdamHyper::default());
        for _ in 0..5 {
            state.apply(&mut params, &grads).unwrap();
        }
        assert!(params[0].iter().all(|&p| p == 2.5));
    }

    #[test]
    fn identical_sequences_are_bit_identical() {
        let run = || {
            let mut params = vec![ArrayD::from_elem(IxDyn(&[8]), 0.3)];
            let mut state = AdamState::new(&params, AdamHyper::default());
            for i in 0..50 {
                let grads = vec![ArrayD::from_shape_fn(IxDyn(&[8]), |d| {
                    ((d[0] + 1) as f64 * 0.01 * (i as f64 + 1.0)).sin()
                })];
                state.apply(&mut params, &grads).unwrap();
            }
            (params, state.m, state.v, state.step)
        };
        let (p1, m1, v1, s1) = run();
        let (p2, m2, v2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![ArrayD::<f64>::zeros(IxDyn(&[3]))];
        let grads = vec![ArrayD::<f64>::zeros(IxDyn(&[4]))];
        let mut state = AdamState::new(&params, AdamHyper::default());
        assert!(state.apply(&mut params, &grads).is_err());
    }
}
