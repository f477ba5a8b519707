use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// One named parameter.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub frozen: bool,
    pub grad: Option<Tensor<T>>,
    adam: Option<AdamState<T>>,
}

impl<T: Real> ParamEntry<T> {
    pub fn has_optimizer_state(&self) -> bool {
        self.adam.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter registry, ordered by name.
///
/// Trainable entries carry Adam moment buffers; frozen entries carry none and
/// are skipped by [`ParamStore::adam_step`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        let adam = (!frozen).then(|| AdamState {
            m: vec![T::zero(); value.len()],
            v: vec![T::zero(); value.len()],
        });
        self.entries.insert(
            name,
            ParamEntry {
                value,
                frozen,
                grad: None,
                adam,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        e.frozen = frozen;
        if frozen {
            e.adam = None;
        } else if e.adam.is_none() {
            e.adam = Some(AdamState {
                m: vec![T::zero(); e.value.len()],
                v: vec![T::zero(); e.value.len()],
            });
        }
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> Result<()> {
        let names: Vec<String> = self.names_with_prefix(prefix).map(str::to_owned).collect();
        for n in names {
            self.set_frozen(&n, frozen)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all entries.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable_element_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copy of the values under `prefix`, for later bitwise audits.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    /// True when every snapshotted tensor still matches bit for bit.
    pub fn matches_snapshot(&self, snap: &BTreeMap<String, Tensor<T>>) -> bool {
        snap.iter().all(|(k, v)| {
            self.entries
                .get(k)
                .is_some_and(|e| e.value.bit_eq(v))
        })
    }

    /// Adds gradients into the matching entries' grad buffers.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter '{name}'")))?;
            if e.value.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient for '{name}' has shape {:?}, parameter is {:?}",
                    g.shape(),
                    e.value.shape()
                )));
            }
            match &mut e.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => e.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Multiplies every stored gradient by `factor` (e.g. `1/batch`).
    pub fn scale_grads(&mut self, factor: T) {
        for e in self.entries.values_mut() {
            if let Some(g) = &mut e.grad {
                for v in g.data_mut() {
                    *v = *v * factor;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// One bias-corrected Adam update of every trainable parameter, then
    /// clears all gradients. `t` is the 1-based step index.
    pub fn adam_step(&mut self, cfg: &AdamConfig, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::Contract("adam step index starts at 1".into()));
        }
        if let Some((name, _)) = self
            .entries
            .iter()
            .find(|(_, e)| !e.frozen && e.grad.is_none())
        {
            return Err(Error::Contract(format!(
                "no gradient for trainable parameter '{name}'"
            )));
        }
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for e in self.entries.values_mut() {
            let grad = e.grad.take();
            if e.frozen {
                continue;
            }
            let grad = grad.expect("checked above");
            let st = e.adam.as_mut().expect("trainable entries carry moments");
            for (((w, &g), m), v) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
