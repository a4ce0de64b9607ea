use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates keyed by parameter name, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Adam with bias correction. Parameters without a gradient are left alone.
pub struct Adam {
    params: Vec<(String, Var)>,
    state: AdamState,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, hyper: AdamHyper) -> Result<Self> {
        if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", hyper.lr)));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Adam {
            params,
            state: AdamState { hyper, step: 0, m, v },
        })
    }

    /// Restores moments saved by [`Adam::state`]; names and shapes must match.
    pub fn restore(&mut self, saved: &AdamState) -> Result<()> {
        for (name, var) in &self.params {
            for (store, src) in [(&mut self.state.m, &saved.m), (&mut self.state.v, &saved.v)] {
                let t = src
                    .get(name)
                    .ok_or_else(|| Error::Integrity(format!("optimizer state lacks `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Integrity(format!("optimizer state for `{name}` has shape {:?}", t.dims())));
                }
                store.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.state.step = saved.step;
        self.state.hyper = saved.hyper;
        Ok(())
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamHyper { lr, beta1, beta2, eps } = self.state.hyper;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry their own graph; keeping it alive would chain every step
            let g = g.detach();
            let m = self.state.m.get_mut(name).expect("moment exists for every param");
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = self.state.v.get_mut(name).expect("moment exists for every param");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&self.state.m[name] / c1)?;
            let v_hat = (&self.state.v[name] / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
        }
        Ok(())
    }
}
