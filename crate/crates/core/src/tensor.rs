//! Dense row-major tensors and the element-wise kernels the merge rules are
//! built from.
//!
//! Values are always held as `f64`. The [`DType`] tag records the precision a
//! tensor is *stored* with on disk; arithmetic results are produced as `f64`
//! and callers narrow them explicitly with [`Tensor::to_dtype`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Bytes per element.
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn widest(self, other: DType) -> DType {
        self.max(other)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("inner dimensions do not agree: {left:?} x {right:?}")]
    DimensionMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected a 2-d matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("SVD did not converge within {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense, row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape { shape: shape.to_vec(), len });
    }
    Ok(())
}

impl Tensor {
    /// Builds an `f64` tensor, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { dtype: DType::F64, shape, data })
    }

    /// Like [`Tensor::new`] but accepts non-finite values. Used by readers that
    /// were explicitly told to let them through.
    pub fn from_raw(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { dtype, shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// fixtures and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::matrix(rows.len(), cols, data).expect("valid matrix literal")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self { dtype: DType::F64, shape, data: vec![value; len] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut t = Self::zeros(vec![n, n]);
        for (i, &d) in diag.iter().enumerate() {
            t.data[i * n + i] = d;
        }
        t
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Narrows (or widens) storage precision. Narrowing to `f32` rounds every
    /// value to the nearest `f32`.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = match dtype {
            DType::F64 => self.data.clone(),
            DType::F32 => self.data.iter().map(|&v| v as f32 as f64).collect(),
        };
        Tensor { dtype, shape: self.shape.clone(), data }
    }

    /// Same values, reinterpreted under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_shape(&shape, self.data.len())?;
        Ok(Tensor { dtype: self.dtype, shape, data: self.data.clone() })
    }

    /// `(rows, cols)` of a 2-d tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(TensorError::NotAMatrix(self.shape.clone())),
        }
    }

    /// Element `(i, j)` of a matrix. Panics when out of range.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[i * cols + j]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { dtype: DType::F64, shape: vec![n, m], data: out })
    }

    /// Bit-level equality of shape and values; distinguishes `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { dtype: DType::F64, shape: self.shape.clone(), data })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dtype: DType::F64, shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, |x, y| x + y)
}

pub fn ew_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, |x, y| x - y)
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, |x, y| x * y)
}

/// Element-wise `a / b` with divisors of magnitude below `eps` replaced by
/// `±eps` (an exact zero counts as positive). Returns the quotient and the
/// number of clamped divisors.
pub fn ew_div(a: &Tensor, b: &Tensor, eps: f64) -> Result<(Tensor, usize)> {
    let eps = eps.abs();
    let mut clamped = 0usize;
    let mut out = a.zip_with(b, |x, y| x / y)?;
    for ((q, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        if y.abs() < eps {
            clamped += 1;
            let divisor = if y.is_sign_negative() && y != 0.0 { -eps } else { eps };
            *q = x / divisor;
        }
    }
    Ok((out, clamped))
}

pub fn scale(a: &Tensor, t: f64) -> Tensor {
    a.map(|x| x * t)
}

/// `a + t * b`, where entries whose increment is exactly zero keep the bits of
/// `a` (including a negative zero).
pub fn add_scaled(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    a.zip_with(b, |x, y| {
        let inc = t * y;
        if inc == 0.0 {
            x
        } else {
            x + inc
        }
    })
}

/// Matrix product. Every output entry is reduced over the inner dimension in
/// ascending index order, so the result is bit-for-bit reproducible.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (n2, p) = b.dims2()?;
    if n != n2 {
        return Err(TensorError::DimensionMismatch { left: a.shape.clone(), right: b.shape.clone() });
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a.data[i * n + k];
            let brow = &b.data[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor { dtype: DType::F64, shape: vec![m, p], data: out })
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = ew_sub(a, b)?;
    Ok(frobenius_norm(&diff) / frobenius_norm(b).max(f64::MIN_POSITIVE))
}
