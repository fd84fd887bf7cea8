//! Named parameter store shared by all model parts.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Flat name → tensor map. Model parts claim dotted prefixes ("enc.",
/// "lm.", …) so one set can hold a whole training stage and a checkpoint is
/// just this map plus a config echo.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn insert_randn(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) {
        self.map
            .insert(name.into(), Tensor::randn_scaled(shape, fan_in, rng));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.map.insert(name.into(), Tensor::zeros(shape).trainable());
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) {
        self.map
            .insert(name.into(), Tensor::full(shape, v).trainable());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingGrad(format!("parameter {name} not found")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.param(name, self.get(name)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Copy every entry under `prefix` into `dst` (same names).
    pub fn copy_prefix_into(&self, prefix: &str, dst: &mut ParamSet) {
        for (k, v) in &self.map {
            if k.starts_with(prefix) {
                dst.map.insert(k.clone(), v.clone());
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}
