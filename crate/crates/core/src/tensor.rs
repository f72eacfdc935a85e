//! Dense f32 kernels shared by the runtime and the sparsity engine.
//!
//! Storage is f32, row-major. Dot products accumulate in f64 across four
//! lanes keyed by `index % 4`; the gathered variant uses the same lane
//! assignment, so a gather over every index reproduces the contiguous
//! kernel bit for bit, and a gather that skips indices equals the
//! contiguous kernel applied to a zero-masked input.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// L2 norm of every column.
    pub fn column_norms(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.cols];
        for r in 0..self.rows {
            for (a, &w) in acc.iter_mut().zip(self.row(r)) {
                *a += f64::from(w) * f64::from(w);
            }
        }
        acc.into_iter().map(|a| a.sqrt() as f32).collect()
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the listed columns into a new matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Owned f32 vector. Derefs to a slice so kernels can take `&[f32]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl From<Vec<f32>> for Vector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

impl From<&[f32]> for Vector {
    fn from(v: &[f32]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

/// Elementwise nonlinearity of the FFN gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Silu,
    ReluSquared,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Silu => x / (1.0 + (-x).exp()),
            ActivationKind::ReluSquared => {
                let r = x.max(0.0);
                r * r
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::ReluSquared => "relu_squared",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "silu" | "swiglu" => Ok(Self::Silu),
            "relu_squared" | "relu2" => Ok(Self::ReluSquared),
            other => Err(Error::contract(format!("unknown activation `{other}`"))),
        }
    }
}

/// Counts multiply-adds executed by the matrix kernels that receive it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulAddCounter(pub u64);

impl MulAddCounter {
    #[inline]
    pub fn add(&mut self, n: usize) {
        self.0 += n as u64;
    }
}

/// f64-accumulated dot product over four interleaved lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += f64::from(x[0]) * f64::from(y[0]);
        acc[1] += f64::from(x[1]) * f64::from(y[1]);
        acc[2] += f64::from(x[2]) * f64::from(y[2]);
        acc[3] += f64::from(x[3]) * f64::from(y[3]);
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dot product restricted to `idx` (ascending), lane-compatible with [`dot`].
#[inline]
pub fn dot_gather(a: &[f32], b: &[f32], idx: &[usize]) -> f64 {
    let body = a.len() - a.len() % 4;
    let mut acc = [0f64; 4];
    let mut tail = 0f64;
    for &i in idx {
        let p = f64::from(a[i]) * f64::from(b[i]);
        if i < body {
            acc[i & 3] += p;
        } else {
            tail += p;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = m · v` without allocation or shape checks beyond debug asserts.
#[inline]
pub fn matvec_into(m: &Matrix, v: &[f32], out: &mut [f32], counter: &mut MulAddCounter) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), v) as f32;
    }
    counter.add(m.rows * m.cols);
}

/// `out = m[:, idx] · v[idx]`, skipping every other column.
pub fn matvec_gather_into(
    m: &Matrix,
    v: &[f32],
    idx: &[usize],
    out: &mut [f32],
    counter: &mut MulAddCounter,
) {
    debug_assert_eq!(m.cols, v.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot_gather(m.row(r), v, idx) as f32;
    }
    counter.add(m.rows * idx.len());
}

pub fn matvec(m: &Matrix, v: &[f32]) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            expected: m.cols,
            got: v.len(),
        });
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v, &mut out, &mut MulAddCounter::default());
    Ok(Vector(out))
}

/// `a · b` for row-major matrices.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            expected: a.cols,
            got: b.rows,
        });
    }
    let mut out = vec![0f64; a.rows * b.cols];
    for r in 0..a.rows {
        let orow = &mut out[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in a.row(r).iter().enumerate() {
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += f64::from(av) * f64::from(bv);
            }
        }
    }
    Matrix::new(a.rows, b.cols, out.into_iter().map(|x| x as f32).collect())
}

pub fn l2_norm(v: &[f32]) -> f32 {
    l2_norm_f64(v) as f32
}

pub(crate) fn l2_norm_f64(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub fn activation(kind: ActivationKind, v: &[f32]) -> Vector {
    Vector(v.iter().map(|&x| kind.apply(x)).collect())
}

pub const DEFAULT_RMS_EPS: f32 = 1e-5;

pub fn rms_norm(v: &[f32], gain: &[f32], eps: f32) -> Result<Vector> {
    if v.len() != gain.len() {
        return Err(Error::DimensionMismatch {
            op: "rms_norm",
            expected: v.len(),
            got: gain.len(),
        });
    }
    let mut out = vec![0.0; v.len()];
    rms_norm_into(v, gain, eps, &mut out);
    Ok(Vector(out))
}

#[inline]
pub fn rms_norm_into(v: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let ms = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>() / v.len() as f64;
    let inv = 1.0 / (ms + f64::from(eps)).sqrt();
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(gain) {
        *o = (f64::from(g) * f64::from(x) * inv) as f32;
    }
}

pub fn softmax(v: &[f32]) -> Vector {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Vector(out)
}

pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for x in v.iter_mut() {
        let e = (*x - max).exp();
        *x = e;
        sum += f64::from(e);
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x = (f64::from(*x) * inv) as f32;
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
