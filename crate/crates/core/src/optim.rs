//! Adam with per-parameter state, usable for both descent and ascent.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// First/second moment estimates and step count of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamId, MomentState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<ParamId, MomentState> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<ParamId, MomentState>) {
        self.state = state;
    }

    /// Apply one update to every parameter in `ids` that received a gradient.
    /// Parameters without a gradient (or not trainable) are left untouched.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        ids: &[ParamId],
        dir: Direction,
    ) {
        let c = self.config;
        let sign = match dir {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        };
        for &id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            let st = self.state.entry(id).or_insert_with(|| MomentState {
                step: 0,
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            });
            st.step += 1;
            let bc1 = 1.0 - libm::pow(c.beta1, st.step as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, st.step as f64);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.to_f64();
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let upd = sign * c.lr * mhat / (libm::sqrt(vhat) + c.eps);
                *w = T::from_f64(w.to_f64() + upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use alloc::string::ToString;

    fn quadratic_grad(store: &ParamStore<f64>, id: ParamId) -> Gradients<f64> {
        let mut g = Graph::new(store);
        let p = g.param(id);
        let zero = g.input(Tensor::zeros(&[1]));
        let l = g.l1(p, zero).unwrap();
        g.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w".to_string(), Tensor::new(&[1], vec![2.0]).unwrap(), true);
        let grads = quadratic_grad(&store, id);
        let mut opt = Adam::new(AdamConfig::new(0.1, (0.9, 0.999)));
        opt.step(&mut store, &grads, &[id], Direction::Descend);
        assert!((store.get(id).data()[0] - 1.9).abs() < 1e-6);
        let grads = quadratic_grad(&store, id);
        let mut up = Adam::new(AdamConfig::new(0.1, (0.9, 0.999)));
        up.step(&mut store, &grads, &[id], Direction::Ascend);
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_and_unlisted_params_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a".to_string(), Tensor::new(&[1], vec![1.0]).unwrap(), true);
        let b = store.add("b".to_string(), Tensor::new(&[1], vec![1.0]).unwrap(), false);
        let mut g = Graph::new(&store);
        let pa = g.param(a);
        let pb = g.param(b);
        let s = g.add(pa, pb).unwrap();
        let zero = g.input(Tensor::zeros(&[1]));
        let l = g.l1(s, zero).unwrap();
        let grads = g.backward(l).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.1, (0.5, 0.999)));
        opt.step(&mut store, &grads, &[b], Direction::Descend);
        assert_eq!(store.get(a).data()[0], 1.0);
        assert_eq!(store.get(b).data()[0], 1.0);
    }
}
