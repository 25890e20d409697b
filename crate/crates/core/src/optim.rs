//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-parameter state is keyed by name, and a parameter's step count only
/// advances on steps where it actually received a gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> AdamW {
        AdamW {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter that holds a gradient. Parameters
    /// not reached by the last backward pass are left untouched, bit for bit.
    /// Returns how many parameters were updated.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<usize> {
        let c = self.config.clone();
        let mut updated = 0;
        for p in params {
            if !p.trainable() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            p.set_data(data)?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

/// Plain gradient descent, used by probes that need a fixed, stateless update.
pub fn sgd_step(params: Vec<&mut Param>, lr: f64) -> Result<()> {
    for p in params {
        if !p.trainable() {
            continue;
        }
        if let Some(g) = p.grad() {
            let data = p.data().iter().zip(&g).map(|(w, g)| w - lr * g).collect();
            p.set_data(data)?;
        }
    }
    Ok(())
}
