//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamStore, ParamValue};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from per-parameter gradients (indexed like the store).
    /// Parameters without a gradient, frozen buffers and int8 weights are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Contract("optimizer step on a frozen model".into()));
        }
        if grads.len() != store.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let p = store.param(id);
            if !p.trainable || matches!(p.value, ParamValue::Int8(_)) {
                continue;
            }
            g.ensure_finite("gradient")?;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let w = store.tensor_mut(id)?;
            w.expect_same_shape(g)?;
            for (((wj, mj), vj), gj) in
                w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *wj -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *wj);
            }
            w.round_to_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Linear, Tensor::from_vec(vec![1.0, -1.0, 0.5]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.125, ..Default::default() });
        let g = Tensor::from_vec(vec![2.0, -3.0, 0.0]);
        opt.step(&mut s, &[Some(g)]).unwrap();
        let w = s.tensor(id).unwrap().data().to_vec();
        assert!((w[0] - 0.875).abs() < 1e-6);
        assert!((w[1] + 0.875).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Linear, Tensor::from_vec(vec![3.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let w = s.tensor(id).unwrap().data()[0];
            opt.step(&mut s, &[Some(Tensor::from_vec(vec![2.0 * (w - 1.0)]))]).unwrap();
        }
        assert!((s.tensor(id).unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_store_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Linear, Tensor::from_vec(vec![3.0]));
        s.freeze();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s, &[None]), Err(Error::Contract(_))));
    }
}
