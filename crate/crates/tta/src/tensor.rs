//! Dense row-major tensors.
//!
//! Plain value math lives here; the recorded (differentiable) versions of
//! these operations are in [`crate::autodiff`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array. Row-major, no views, no broadcasting beyond
/// the explicit row-wise helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when the tensor is viewed as a matrix of its trailing
    /// dimension.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&last) if last > 0 => self.data.len() / last,
            _ => 0,
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let w = self.last_dim();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f32_lossy()).collect(),
        }
    }

    pub fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<S> {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| S::from_f32_exact(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor<S>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Sum of squares, used for gradient-norm clipping.
    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    fn matmul_dims(&self, other: &Tensor<S>, tr_b: bool, op: &'static str) -> Result<(usize, usize, usize)> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() != 2 || b.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        let (m, k) = (a[0], a[1]);
        let (bk, bn) = if tr_b { (b[1], b[0]) } else { (b[0], b[1]) };
        if k != bk {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        Ok((m, k, bn))
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k, n) = self.matmul_dims(other, false, "matmul")?;
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &self.data, false, &other.data, false, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self @ otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k, n) = self.matmul_dims(other, true, "matmul_t")?;
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &self.data, false, &other.data, true, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ @ other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        let (k, m, n) = (a[0], a[1], b[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &self.data, true, &other.data, false, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor<S> {
        assert_eq!(self.shape.len(), 2, "transpose needs a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    /// Copies rows `indices` of `self` (a matrix) into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let rows = self.shape[0];
        let w = self.last_dim();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(Error::TokenOutOfRange { id: i, vocab: rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            shape: vec![indices.len(), w],
            data,
        })
    }

    /// Mean of the rows in `range`, as a vector of the trailing dimension.
    pub fn mean_rows(&self, range: std::ops::Range<usize>) -> Vec<S> {
        let w = self.last_dim();
        let mut acc = vec![S::zero(); w];
        let count = S::from_usize(range.len()).unwrap();
        for r in range {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
        acc
    }
}
