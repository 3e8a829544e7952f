//! Adam over a fixed set of parameters.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Gradients, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Updates taken so far.
    pub t: u64,
    pub ids: Vec<ParamId>,
    /// First and second moments, parallel to `ids`.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape().to_vec());
        Self {
            lr,
            beta1,
            beta2,
            t: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// One update from `grads`; parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id);
            let g = grads.param(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam", g.shape(), p.shape()));
                }
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
