//! Adam optimizer over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters without a gradient are skipped
    /// and keep their moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::dim("adam", format!("grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] as f64;
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
                m[j] = mj as Real;
                v[j] = vj as Real;
                *w = (*w as f64 - lr * (mj / c1) / ((vj / c2).sqrt() + EPS)) as Real;
            }
        }
        Ok(())
    }
}
