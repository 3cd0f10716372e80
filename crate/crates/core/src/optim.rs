use stt_tensor::Tensor;

use crate::config::OptimizerConfig;
use crate::params::ParamStore;
use crate::{Error, Result};

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moments as checkpoint entries named `m.<param>` and `v.<param>`.
    pub fn entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let names = params.entries().iter().map(|(n, _)| n);
        let m = names.clone().zip(&self.m).map(|(n, t)| (format!("m.{n}"), t.clone()));
        let v = names.zip(&self.v).map(|(n, t)| (format!("v.{n}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(&mut self, params: &ParamStore, entries: Vec<(String, Tensor)>, step: u64) -> Result<()> {
        let expected = self.entries(params);
        let matches = entries.len() == expected.len()
            && entries.iter().zip(&expected).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape());
        if !matches {
            return Err(Error::shape("optimizer state", "moment entries do not match the parameters"));
        }
        let n = self.m.len();
        let mut tensors = entries.into_iter().map(|(_, t)| t);
        self.m = tensors.by_ref().take(n).collect();
        self.v = tensors.collect();
        self.step = step;
        Ok(())
    }
}
