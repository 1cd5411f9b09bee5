//! Dense row-major `f64` matrices and seeded random streams.
//!
//! Every reduction in this module runs in a fixed order, so results are
//! bit-reproducible across runs on the same target. Dot products use four
//! interleaved partial sums combined as `(s0 + s1) + (s2 + s3)`; that order is
//! part of the contract, not a compiler choice.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    /// Builds a matrix from row-major data. Rejects wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "from_vec",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                left: (rows.len(), cols),
                right: (1, bad.len()),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// the entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Applies `f` to every entry. Fails with the flat index of the first
    /// entry whose image is not finite.
    pub fn elementwise(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for (index, &v) in self.data.iter().enumerate() {
            let y = f(v);
            if !y.is_finite() {
                return Err(Error::NonFinite {
                    op: "elementwise",
                    index,
                });
            }
            data.push(y);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), out_row);
        }
    }
    check_finite("matmul", &out.data)?;
    Ok(out)
}

/// `a × bᵀ`, the layout used by the forward pass (weights stored out × in).
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_transb",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let x = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(x, b.row(j));
        }
    }
    check_finite("matmul_transb", &out.data)?;
    Ok(out)
}

/// `aᵀ × b`, used for weight gradients.
pub fn matmul_transa(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_transa",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let b_row = b.row(r);
        for i in 0..a.cols {
            let s = a.data[r * a.cols + i];
            if s != 0.0 {
                axpy(s, b_row, &mut out.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    check_finite("matmul_transa", &out.data)?;
    Ok(out)
}

/// Dot product with a fixed four-way interleaved summation order.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len().min(y.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
        i += 4;
    }
    while i < n {
        s0 += x[i] * y[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3)
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Well-known stream ids, one per consumer of randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const EVAL_SUBSET: u64 = 3;
    pub const TRAIN_SUBSET: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
    /// Task `t` draws its permutation from stream `PERMUTATION_BASE + t`.
    pub const PERMUTATION_BASE: u64 = 1 << 32;
}

/// A seeded random stream: ChaCha8 keyed by `seed`, with the 64-bit ChaCha
/// stream word set to `stream_id`. Distinct ids give disjoint keystreams for
/// the same seed.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A stream sharing this stream's seed but with a different id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "uniform range requires finite lo < hi, got [{lo}, {hi})"
            )));
        }
        Ok(self.rng.random_range(lo..hi))
    }

    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
