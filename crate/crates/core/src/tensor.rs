//! Dense row-major tensors of rank at most 3 and the raw kernels the
//! autodiff graph is built on.
//!
//! Reductions (matrix products, sums, means, variances) accumulate in `f64`
//! regardless of the storage type, so results do not depend on instance
//! order beyond the final rounding to storage precision.

use std::fmt::{Debug, Display};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Storage scalar. Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    num_traits::Float + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Work size (multiply-accumulates) above which matrix products split rows
/// across the rayon pool. Row partitioning does not change any summation
/// order, so results are identical with or without threads.
const PAR_MACS: usize = 1 << 18;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Param(format!(
                "tensor rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| T::of(v)));
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row count of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.f64().abs()).fold(0.0, f64::max)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::dim(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, r) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let b: Vec<f64> = other.data.iter().map(|v| v.f64()).collect();
        let mut out = vec![T::zero(); m * r];
        if m == 0 || r == 0 {
            return Tensor::matrix(m, r, out);
        }
        let row_kernel = |(i, dst): (usize, &mut [T])| {
            let mut acc = vec![0.0f64; r];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                let a = a.f64();
                if a == 0.0 {
                    continue;
                }
                let b_row = &b[kk * r..(kk + 1) * r];
                for (c, &bv) in acc.iter_mut().zip(b_row) {
                    *c += a * bv;
                }
            }
            for (d, c) in dst.iter_mut().zip(acc) {
                *d = T::of(c);
            }
        };
        if m * k * r >= PAR_MACS && m > 1 {
            out.par_chunks_mut(r).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(r).enumerate().for_each(row_kernel);
        }
        Tensor::matrix(m, r, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        self.matmul(&other.transpose()?)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        self.transpose()?.matmul(other)
    }

    /// Outer/inner/axis split used by axis-wise kernels.
    pub(crate) fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, len, inner)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Param(format!(
                "softmax axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = vec![T::zero(); self.numel()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(self.data[idx(l)].f64());
                }
                let mut sum = 0.0;
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = (self.data[idx(l)].f64() - max).exp();
                    sum += *b;
                }
                for (l, b) in buf.iter().enumerate() {
                    out[idx(l)] = T::of(b / sum);
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Sums along `axis`, keeping every other extent (returned flat in
    /// row-major order of the remaining axes).
    pub(crate) fn axis_sums(&self, axis: usize) -> Vec<f64> {
        let (outer, len, inner) = self.axis_split(axis);
        let mut sums = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    sums[o * inner + i] += self.data[(o * len + l) * inner + i].f64();
                }
            }
        }
        sums
    }

    /// Column means of a matrix, accumulated in row order.
    pub fn mean_rows(&self) -> Result<Vec<f64>> {
        let (m, n) = self.require_matrix("mean_rows")?;
        if m == 0 {
            return Err(Error::EmptyBag);
        }
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v.f64();
            }
        }
        Ok(acc.into_iter().map(|a| a / m as f64).collect())
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_rows")?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", &self.shape, &[start, end]));
        }
        Tensor::matrix(end - start, n, self.data[start * n..end * n].to_vec())
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Tensor::matrix(m, w, out)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, n) = self.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::dim("gather_rows", &self.shape, &[i]));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), n, out)
    }
}

impl<T: Real> Tensor<T> {
    /// Concatenates matrices along the last axis.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat needs at least one part".into()))?;
        let m = first.rows();
        for p in parts {
            if p.rank() != 2 || p.rows() != m {
                return Err(Error::dim("concat_last_axis", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(m, total, out)
    }

    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat needs at least one part".into()))?;
        let n = first.cols();
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.rank() != 2 || p.cols() != n {
                return Err(Error::dim("concat_rows", first.shape(), p.shape()));
            }
            m += p.rows();
            out.extend_from_slice(p.data());
        }
        Tensor::matrix(m, n, out)
    }
}
