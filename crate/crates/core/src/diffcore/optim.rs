use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Holds first/second moment estimates in the
/// same order as the store's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let val = p.value.data_mut();
            for i in 0..val.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                val[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }

    pub fn check_compatible(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self
                .m
                .iter()
                .zip(store.iter())
                .all(|(m, p)| m.shape() == p.value.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Migration("optimizer state does not match parameters".into()))
        }
    }
}
