//! Minimal dense-matrix neural network substrate with hand-written
//! backpropagation.

mod adam;
mod tape;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, OptimizerState};
pub use tape::{NodeId, Tape};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First `rows` rows.
    pub fn top_rows(&self, rows: usize) -> Mat {
        Mat::from_vec(rows, self.cols, self.data[..rows * self.cols].to_vec())
    }
}

/// Index of a tensor inside [`Parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named trainable matrix (vectors are `1 × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; panics on duplicate names (a programming error).
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(rows * cols, data.len(), "tensor `{name}` shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate tensor `{name}`");
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Glorot-uniform matrix.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = crate::math::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, rows, cols, data)
    }

    /// Embedding table with small uniform entries.
    pub fn add_embedding<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / crate::math::sqrt(cols as f64);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, rows, cols, data)
    }

    pub fn add_const(&mut self, name: &str, cols: usize, value: f64) -> ParamId {
        self.add(name, 1, cols, vec![value; cols])
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    #[inline]
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Ids of every tensor whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| t.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Copies every tensor of `other` whose name starts with `prefix`
    /// (shapes must match).
    pub fn copy_prefix_from(&mut self, other: &Parameters, prefix: &str) -> Result<()> {
        for t in other.tensors.iter().filter(|t| t.name.starts_with(prefix)) {
            let id = self.id(&t.name)?;
            let dst = self.tensor_mut(id);
            if dst.rows != t.rows || dst.cols != t.cols {
                return Err(Error::InvalidArgument(format!("shape mismatch for `{}`", t.name)));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// Rebuilds from raw tensors (e.g. after deserialization).
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut p = Parameters::new();
        for t in tensors {
            if p.index.contains_key(&t.name) || t.rows * t.cols != t.data.len() {
                return Err(Error::InvalidArgument(format!("bad tensor `{}`", t.name)));
            }
            p.index.insert(t.name.clone(), p.tensors.len());
            p.tensors.push(t);
        }
        Ok(p)
    }
}

/// Gradient buffers aligned with a [`Parameters`] set.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &Parameters) -> Self {
        Grads {
            data: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// `out (n×m) += a (n×k) · b (k×m)`.
#[inline]
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}
