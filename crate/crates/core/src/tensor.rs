//! Dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a plain value. Differentiable computation wraps tensors
//! in nodes of a [`crate::tape::Tape`]; every numeric kernel the tape uses
//! lives here so that recorded and unrecorded evaluation share one
//! implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Row-major matrix constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for kernel outputs; finiteness is checked by the tape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of the matrix view: product of every dimension except the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    /// Columns of the matrix view: the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{context}: non-finite value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.numel(), other.numel());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_parts(shape.to_vec(), self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over the last dimension, giving an `rows x 1` column.
    pub fn sum_last(&self) -> Tensor {
        let c = self.cols();
        let data = self.data.chunks(c).map(|r| r.iter().sum()).collect();
        Tensor::from_parts(vec![self.rows(), 1], data)
    }

    /// Sum over rows, giving a `1 x cols` row.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Tensor::from_parts(vec![1, c], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn gemm(&self, trans_a: bool, other: &Tensor, trans_b: bool) -> Tensor {
        let (ar, ac) = (self.rows(), self.cols());
        let (br, bc) = (other.rows(), other.cols());
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        if m == 0 || n == 0 || k == 0 {
            return Tensor::from_parts(vec![m, n], out);
        }
        let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: strides and extents describe the owned buffers exactly.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::from_parts(vec![m, n], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.gemm(false, other, false)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_last(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    /// Pairwise squared Euclidean distances between the rows of `self`
    /// (`n x d`) and `other` (`m x d`).
    pub fn sq_euclid(&self, other: &Tensor) -> Tensor {
        let d = self.cols();
        let (n, m) = (self.rows(), other.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * d..(i + 1) * d];
            for j in 0..m {
                let b = &other.data[j * d..(j + 1) * d];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::from_parts(vec![idx.len(), c], out)
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(self.numel() * times);
        for r in self.data.chunks(c) {
            for _ in 0..times {
                out.extend_from_slice(r);
            }
        }
        Tensor::from_parts(vec![self.rows() * times, c], out)
    }

    /// Sums consecutive blocks of `seg` rows.
    pub fn segment_sum_rows(&self, seg: usize) -> Tensor {
        let c = self.cols();
        let groups = self.rows() / seg;
        let mut out = vec![0.0; groups * c];
        for (i, r) in self.data.chunks(c).enumerate() {
            let o = &mut out[(i / seg) * c..(i / seg + 1) * c];
            for (a, b) in o.iter_mut().zip(r) {
                *a += b;
            }
        }
        Tensor::from_parts(vec![groups, c], out)
    }

    pub fn concat_last(parts: &[&Tensor]) -> Tensor {
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row_slice(r));
            }
        }
        Tensor::from_parts(vec![rows, total], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        Tensor::from_parts(vec![rows, cols], out)
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1, 2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gemm_transposes_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.5, -1., 2., 1., 0., -3.]).unwrap();
        let abt = a.gemm(false, &b, true);
        assert_eq!(abt, a.matmul(&b.transpose()));
        let atb = a.gemm(true, &b, false);
        assert_eq!(atb, a.transpose().matmul(&b));
        assert_eq!(abt.data(), &[4.5, -8.0, 9.0, -14.0]);
    }

    #[test]
    fn segment_and_repeat_are_adjoint_shapes() {
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let r = x.repeat_rows(3);
        assert_eq!(r.shape(), &[6, 2]);
        let s = r.segment_sum_rows(3);
        assert_eq!(s.data(), &[3., 6., 9., 12.]);
    }
}
