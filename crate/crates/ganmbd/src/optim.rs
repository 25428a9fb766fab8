//! Adam optimizer over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tape::GradMap;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
pub struct Adam<S: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    /// Ids this optimizer updates (a subset of the store, e.g. only G or D).
    ids: Vec<ParamId>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, ids: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Ok(Adam { lr, beta1, beta2, eps: ADAM_EPS, t: 0, m, v, ids })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all managed parameters.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradMap<S>) -> Result<()> {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        for (slot, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Internal(format!(
                    "optimizer moment/grad shape mismatch for parameter {}",
                    id.index()
                )));
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Raw optimizer state, ordered like `ids`, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<S>], &[Tensor<S>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        if m.len() != self.ids.len() || v.len() != self.ids.len() {
            return Err(Error::checkpoint("optimizer state length mismatch"));
        }
        for (i, &id) in self.ids.iter().enumerate() {
            if m[i].shape() != self.m[i].shape() || v[i].shape() != self.v[i].shape() {
                return Err(Error::checkpoint(format!(
                    "optimizer moment shape mismatch for parameter {}",
                    id.index()
                )));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
