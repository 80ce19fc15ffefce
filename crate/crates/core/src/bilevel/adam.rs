//! Adam with bias correction and additive weight decay.

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Adam over one kind of parameter. The decay term is folded into the
/// gradient (g + wd * p) before the moment updates.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(
        store: &ParamStore<T>,
        kind: ParamKind,
        lr: f64,
        betas: (f64, f64),
        weight_decay: f64,
    ) -> Self {
        let ids = store.ids_of_kind(kind);
        let m = ids.iter().map(|id| Tensor::zeros(store.value(*id).shape())).collect();
        let v = ids.iter().map(|id| Tensor::zeros(store.value(*id).shape())).collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: super::ADAM_EPS,
            weight_decay,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all registered parameters. A missing gradient acts
    /// as zero (the decay term still applies). Rejects non-finite
    /// gradients before touching any state.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        for id in &self.ids {
            if let Some(g) = grads.get(*id) {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}`; step rejected",
                        store.params[id.0].name
                    )));
                }
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        for (slot, id) in self.ids.iter().enumerate() {
            let zero_grad;
            let g = match grads.get(*id) {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(store.value(*id).shape());
                    &zero_grad
                }
            };
            let p = store.value_mut(*id);
            let ps = p.as_mut_slice();
            let ms = self.m[slot].as_mut_slice();
            let vs = self.v[slot].as_mut_slice();
            for i in 0..ps.len() {
                let geff = g.as_slice()[i] + wd * ps[i];
                ms[i] = b1 * ms[i] + (one - b1) * geff;
                vs[i] = b2 * vs[i] + (one - b2) * geff * geff;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment arrays for checkpointing, keyed by slot order of `ids`.
    pub fn state(&self) -> (&[ParamId], &[Tensor<T>], &[Tensor<T>], u64) {
        (&self.ids, &self.m, &self.v, self.t)
    }

    pub fn restore_state(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) -> Result<()> {
        if m.len() != self.ids.len() || v.len() != self.ids.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} moment pairs, expected {}",
                m.len(),
                self.ids.len()
            )));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
