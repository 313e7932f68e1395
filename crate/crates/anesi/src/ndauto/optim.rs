//! Named parameter storage and the Adam update rule.

use std::collections::BTreeMap;

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use super::AutoError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters with per-parameter Adam moment accumulators.
///
/// Iteration order is the name order (`BTreeMap`), which keeps every consumer
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let n = value.len();
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Insert every parameter into `tape` as a leaf and remember the mapping.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let mut map = BTreeMap::new();
        for (name, entry) in &self.entries {
            map.insert(name.clone(), tape.leaf(entry.value.clone()));
        }
        ParamBinding { map }
    }

    /// One Adam step with bias correction. Parameters absent from `grads` are
    /// left untouched; a non-finite gradient aborts with the parameter name.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), AutoError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| AutoError::UnknownParam(name.clone()))?;
            if g.shape() != entry.value.shape() {
                return Err(AutoError::ShapeMismatch(format!(
                    "adam_step: gradient {:?} against parameter `{name}` {:?}",
                    g.shape(),
                    entry.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(AutoError::NonFiniteGrad(name.clone()));
            }
            for (i, gv) in g.data().iter().enumerate() {
                entry.m[i] = BETA1 * entry.m[i] + (1.0 - BETA1) * gv;
                entry.v[i] = BETA2 * entry.v[i] + (1.0 - BETA2) * gv * gv;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                entry.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Mapping from parameter names to the tape leaves holding their values.
pub struct ParamBinding {
    map: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn node(&self, name: &str) -> Result<NodeId, AutoError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| AutoError::UnknownParam(name.to_string()))
    }

    /// Gradients for every bound parameter, zero-filled where the loss did
    /// not touch the leaf.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.map {
            let shape = store
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_default();
            out.insert(name.clone(), grads.wrt(*id, &shape));
        }
        out
    }
}
