use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Identifies a trainable tensor: `group` picks the parameter set, `index`
/// the tensor inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: usize,
    pub index: usize,
}

/// Gradient for one parameter. Embedding tables receive row-sparse updates.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    fn add(&mut self, other: &GradBuf) {
        match (self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            (GradBuf::Rows { rows: a, .. }, GradBuf::Rows { rows: b, .. }) => {
                for (r, g) in b {
                    match a.get_mut(r) {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        None => {
                            a.insert(*r, g.clone());
                        }
                    }
                }
            }
            (GradBuf::Dense(a), GradBuf::Rows { width, rows }) => {
                for (r, g) in rows {
                    a[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            (this @ GradBuf::Rows { .. }, GradBuf::Dense(b)) => {
                let mut dense = b.clone();
                if let GradBuf::Rows { width, rows } = this {
                    for (r, g) in rows.iter() {
                        dense[r * *width..(r + 1) * *width]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                *this = GradBuf::Dense(dense);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            GradBuf::Dense(a) => a.iter_mut().for_each(|x| *x *= s),
            GradBuf::Rows { rows, .. } => rows
                .values_mut()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= s)),
        }
    }

    /// Adds this gradient into a dense buffer of `len` elements.
    pub fn add_into(&self, out: &mut [f64]) {
        match self {
            GradBuf::Dense(a) => out.iter_mut().zip(a).for_each(|(x, y)| *x += y),
            GradBuf::Rows { width, rows } => {
                for (r, g) in rows {
                    out[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.add_into(&mut out);
        out
    }
}

/// Parameter gradients produced by one backward pass, keyed by [`ParamKey`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, GradBuf>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, key: ParamKey, g: GradBuf) {
        match self.map.get_mut(&key) {
            Some(acc) => acc.add(&g),
            None => {
                self.map.insert(key, g);
            }
        }
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add(g),
                None => {
                    self.map.insert(*k, g.clone());
                }
            }
        }
    }

    /// Sums a list of gradients in order. The fixed order makes batch
    /// reductions reproducible regardless of how they were computed.
    pub fn sum_ordered(parts: impl IntoIterator<Item = Gradients>) -> Gradients {
        let mut acc = Gradients::new();
        for p in parts {
            acc.merge(&p);
        }
        acc
    }

    pub fn scale(&mut self, s: f64) {
        self.map.values_mut().for_each(|g| g.scale(s));
    }

    pub fn get(&self, key: ParamKey) -> Option<&GradBuf> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &GradBuf)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = usize> + '_ {
        let mut last = None;
        self.map.keys().filter_map(move |k| {
            if last == Some(k.group) {
                None
            } else {
                last = Some(k.group);
                Some(k.group)
            }
        })
    }
}

/// A named, ordered collection of tensors: the learnable weights of one model
/// component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds every tensor into `g`. With `group = Some(k)` tensors whose
    /// `trainable` flag is set become gradient leaves keyed `(k, index)`;
    /// everything else is a frozen borrowed constant.
    pub fn bind<'p>(
        &'p self,
        g: &mut Graph<'p>,
        group: Option<usize>,
        trainable: impl Fn(usize) -> bool,
    ) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| match group {
                Some(group) if trainable(i) => g.param(t, ParamKey { group, index: i }),
                _ => g.frozen(t),
            })
            .collect()
    }

    /// Writes the `group` part of `grads` into each tensor's gradient slot.
    /// Tensors without a gradient get an explicit zero gradient.
    pub fn accumulate(&mut self, group: usize, grads: &Gradients) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let slot = t.grad_mut();
            if let Some(g) = grads.get(ParamKey { group, index: i }) {
                g.add_into(slot);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces tensor values from another set with identical layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layout differs".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy_from",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            a.data_mut().copy_from_slice(b.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
