//! Named parameters, Adam state and the milestone learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub(crate) m: Tensor<T>,
    pub(crate) v: Tensor<T>,
    pub(crate) step: u64,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: Tensor<T>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self { value, m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensor<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor<T> {
        &self.v
    }
}

/// Parameters keyed by dotted name (`"enc.c1.w"`), plus a frozen set.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    frozen: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Leaf handles for every parameter of a store on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for Bindings {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let hits: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let n = hits.len();
        self.frozen.extend(hits);
        n
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Zeroes Adam moments and step counters, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            e.m = Tensor::zeros(e.value.shape());
            e.v = Tensor::zeros(e.value.shape());
            e.step = 0;
        }
    }

    pub(crate) fn set_optimizer_state(&mut self, name: &str, m: Tensor<T>, v: Tensor<T>, step: u64) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return Err(Error::State(format!("moment shape mismatch for {name}")));
        }
        e.m = m;
        e.v = v;
        e.step = step;
        Ok(())
    }

    /// Places every parameter on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let var = tape.leaf(e.value.clone(), !self.frozen.contains(name));
                (name.clone(), var)
            })
            .collect();
        Bindings { vars }
    }

    /// Places every parameter on `tape` as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| (name.clone(), tape.constant(e.value.clone())))
            .collect();
        Bindings { vars }
    }

    /// Gradients of the unfrozen parameters after `tape.backward`.
    pub fn collect_grads(&self, tape: &Tape<T>, bindings: &Bindings) -> BTreeMap<String, Tensor<T>> {
        bindings
            .iter()
            .filter(|(name, _)| !self.frozen.contains(*name))
            .filter_map(|(name, var)| tape.grad(var).map(|g| (name.to_string(), g.clone())))
            .collect()
    }

    /// Bias-corrected Adam update of every unfrozen parameter.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<T>>, cfg: &AdamConfig) -> Result<()> {
        for (name, e) in &self.entries {
            if self.frozen.contains(name) {
                continue;
            }
            match grads.get(name) {
                None => return Err(Error::State(format!("missing gradient for {name}"))),
                Some(g) if g.shape() != e.value.shape() => {
                    return Err(Error::State(format!("gradient shape mismatch for {name}")))
                }
                Some(_) => {}
            }
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for (name, e) in self.entries.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = &grads[name];
            e.step += 1;
            let bc1 = T::one() - b1.powi(e.step as i32);
            let bc2 = T::one() - b2.powi(e.step as i32);
            let p = e.value.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step schedule dividing the base rate by 10 at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilestoneSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
}

impl MilestoneSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * 0.1f64.powi(passed as i32)
    }
}
