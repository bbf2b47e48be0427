use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for one [`ParameterStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    params.check_compatible(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let m = &state.first[name];
        let v = &state.second[name];
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]));
        s.insert("b", Tensor::row(vec![0.1, 0.2]));
        s
    }

    fn grads_like(s: &ParameterStore, v: f64) -> Gradients {
        s.iter()
            .map(|(k, t)| (k.to_string(), Tensor::filled(t.rows(), t.cols(), v)))
            .collect()
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let mut s = store();
        let before = s.clone();
        let mut opt = OptimizerState::new(0.001);
        let g = grads_like(&s, 1.0);
        adam_step(&mut s, &g, &mut opt).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let expected = -0.001 / (1.0 + ADAM_EPS);
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - expected).abs() < 1e-15);
            }
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut s = store();
        let before = s.clone();
        let mut opt = OptimizerState::new(0.01);
        adam_step(&mut s, &grads_like(&before, 0.0), &mut opt).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn identical_runs_give_identical_trajectories() {
        let run = || {
            let mut s = store();
            let mut opt = OptimizerState::new(0.05);
            for k in 0..25 {
                let g: Gradients = s
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.map(|x| (x * (k as f64 + 1.0)).sin())))
                    .collect();
                adam_step(&mut s, &g, &mut opt).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut s = store();
        let mut g = grads_like(&s, 1.0);
        g.insert("w".into(), Tensor::zeros(1, 1));
        assert!(adam_step(&mut s, &g, &mut OptimizerState::new(0.1)).is_err());
    }
}
