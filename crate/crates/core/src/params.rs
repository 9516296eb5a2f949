//! Named parameter storage and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    /// Drops every parameter added after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids whose names start with any of `prefixes`.
    pub fn with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Adam with the usual decay constants (0.9, 0.999) and ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    trainable: Vec<ParamId>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, trainable: Vec<ParamId>, lr: f64) -> Self {
        let first = trainable
            .iter()
            .map(|&id| {
                let v = store.value(id);
                Matrix::zeros(v.rows(), v.cols())
            })
            .collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: first.clone(),
            first,
            trainable,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    /// Parameters absent from `grads` are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, &id) in self.trainable.iter().enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let value = store.value_mut(id);
            let grad = grads.get(id);
            for i in 0..value.data().len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                value.data_mut()[i] -= update;
            }
        }
    }
}
