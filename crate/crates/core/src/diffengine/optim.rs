use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use super::graph::ParamGrads;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate policy for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub lr_mult: f64,
    pub frozen: bool,
}

/// Owns every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    values: Vec<Arc<Tensor>>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.groups.len());
        self.groups.push(ParamGroup {
            name: name.clone(),
            shape: value.shape().to_vec(),
            lr_mult: 1.0,
            frozen: false,
        });
        self.values.push(Arc::new(value));
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.groups.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn group(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.groups[id.0].frozen = frozen;
    }

    pub fn set_lr_mult(&mut self, id: ParamId, mult: f64) -> Result<()> {
        if !(mult > 0.0 && mult.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate multiplier must be positive, got {mult}"
            )));
        }
        self.groups[id.0].lr_mult = mult;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for g in &mut self.groups {
            g.frozen = true;
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.groups[id.0].shape.as_slice() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{:?}", self.groups[id.0].shape),
                format!("{:?}", value.shape()),
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Optimizer state: per-parameter moments plus the global step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update. Frozen groups and parameters without
    /// a gradient entry are left untouched. Any non-finite gradient aborts
    /// the whole step before anything is written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            let group = store.group(*id);
            if g.shape() != group.shape.as_slice() {
                return Err(Error::shape(
                    "Adam::step",
                    format!("{} {:?}", group.name, group.shape),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", group.name)));
            }
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.iter() {
            let group = store.group(*id);
            if group.frozen {
                continue;
            }
            let lr_eff = lr * group.lr_mult;
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            mom.steps += 1;
            let bc1 = 1.0 - b1.powi(mom.steps as i32);
            let bc2 = 1.0 - b2.powi(mom.steps as i32);
            let p = store.get_mut(*id);
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr_eff * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to `lr_min` at `total_steps`.
/// Out-of-range steps are clamped with a warning.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_min;
    }
    let s = if step > total_steps {
        log::warn!("cosine_lr: step {step} beyond total {total_steps}; clamping");
        total_steps
    } else {
        step
    };
    let progress = s as f64 / total_steps as f64;
    lr_min + (lr0 - lr_min) * 0.5 * (1.0 + (PI * progress).cos())
}
