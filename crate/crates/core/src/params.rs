//! Named parameter tensors, their gradients, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// An ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    lookup: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(m);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Copies every tensor of `other`; layouts must match.
    pub fn copy_from(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Glorot-uniform initialization for a `fan_in x fan_out` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, bound)
}

/// Sparse-by-tensor gradient accumulator aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { grads: vec![None; params.len()] }
    }

    pub fn add(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter adaptive first/second moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |p: &ParamSet| p.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { config, m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; tensors without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g.data()[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g.data()[j] * g.data()[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
