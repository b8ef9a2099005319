use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments. Moments are kept per parameter name;
/// a fresh optimizer starts every stage.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `params`.
    /// Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = p.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            if m.len() != g.len() {
                // the tensor grew (classifier rows); new entries start from zero
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            let data = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
