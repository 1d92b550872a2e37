//! Adam with per-parameter state keyed by parameter name.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Nothing is
    /// written if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, step: u64) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(shape_err("adam", p.shape(), g.shape()));
            }
            if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    name: alloc::format!("grad {name}"),
                    value: *v,
                });
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above");
            let n = g.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let c1 = 1.0 - libm::pow(beta1, st.step as f64);
            let c2 = 1.0 - libm::pow(beta2, st.step as f64);
            for (((w, gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    /// Drops state for parameters outside `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.state.retain(|k, _| keep(k));
    }
}
