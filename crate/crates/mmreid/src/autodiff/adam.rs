//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Keeps first/second-moment state per parameter name. Both the state map
/// and each update loop are plain sequential passes, so a given sequence of
/// steps always produces identical parameters.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update across `(name, param, grad)` triples. Every named
    /// parameter must come with a gradient; a missing one means the caller
    /// forgot to run backward or routed the wrong set.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f64], Option<&'a [f64]>)>,
    {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, param, grad) in params {
            let grad = grad.ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            if grad.len() != param.len() {
                return Err(Error::BadShape {
                    op: "adam_step",
                    expected: format!("gradient of {} elements for {name}", param.len()),
                    got: vec![grad.len()],
                });
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
            if slot.m.len() != param.len() {
                return Err(Error::BadShape {
                    op: "adam_step",
                    expected: format!("stable size {} for {name}", slot.m.len()),
                    got: vec![param.len()],
                });
            }
            let c = &self.cfg;
            for i in 0..param.len() {
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * grad[i];
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                param[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
