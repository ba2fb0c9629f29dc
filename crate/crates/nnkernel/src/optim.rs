use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Fails without touching anything if a gradient is missing.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
        return Err(NnError::MissingGradient(name.clone()));
    }
    state.step += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.grad.take().expect("checked above");
        let data = p.data_mut();
        for i in 0..n {
            let gi = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(vec![0.0; n]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(grad: Option<Vec<f32>>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(&[2], vec![0.5, -1.5]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = grad;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(Some(vec![0.0, 0.0]));
        let before = s.get("w").unwrap().data().to_vec();
        let mut st = AdamState::new(AdamHyper::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after one step with unit gradient, so Δ = -lr/(1+eps).
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        s.get_mut("x").unwrap().grad = Some(vec![1.0]);
        let hyper = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let mut st = AdamState::new(hyper);
        adam_step(&mut s, &mut st).unwrap();
        let expected = 2.0 - 0.01 / (1.0 + 1e-8);
        assert!((s.get("x").unwrap().data()[0] - expected).abs() < 1e-6);
        assert_eq!(s.get("x").unwrap().grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut s = store_with(None);
        let mut st = AdamState::new(AdamHyper::default());
        match adam_step(&mut s, &mut st) {
            Err(NnError::MissingGradient(n)) => assert_eq!(n, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store_with(None);
            let mut st = AdamState::new(AdamHyper::default());
            for k in 0..5 {
                s.get_mut("w").unwrap().grad = Some(vec![0.3 * k as f32, -0.7]);
                adam_step(&mut s, &mut st).unwrap();
            }
            s.get("w").unwrap().data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
