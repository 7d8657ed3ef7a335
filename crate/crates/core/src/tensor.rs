//! Dense row-major tensors over `f32`/`f64`.
//!
//! Values are immutable once constructed; reshape shares the underlying
//! buffer, everything else copies. All shape errors are reported through
//! [`crate::error::Error::ShapeMismatch`] rather than panics so callers
//! (CLI, FFI) can surface them.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element dtype tag, used for plan caching and checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element types tensors can hold.
pub trait Element:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Cloning is O(1) (shared buffer).
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element> {
    dims: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Element> Tensor<T> {
    /// Build a tensor, validating that `dims` is non-empty, has no zero
    /// extent, and matches `data.len()`.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let numel = checked_numel(&dims)?;
        if data.len() != numel {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { dims, data: data.into() })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel = checked_numel(&dims)?;
        Ok(Tensor { dims, data: vec![T::zero(); numel].into() })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let numel = checked_numel(&dims)?;
        Ok(Tensor { dims, data: vec![value; numel].into() })
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    /// Rank-1 tensor of length 1 holding `value`; the scalar convention
    /// used by reductions and losses.
    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value].into() }
    }

    /// Build from a function of the flat row-major index.
    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let numel = checked_numel(&dims)?;
        Ok(Tensor { dims, data: (0..numel).map(|i| f(i)).collect::<Vec<_>>().into() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Row-major strides for the current dims.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.dims[i + 1];
        }
        s
    }

    /// Element at a full multi-index. Panics on rank/bounds mismatch
    /// (intended for tests and small diagnostics, not hot loops).
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (d, (&i, &ext)) in idx.iter().zip(&self.dims).enumerate() {
            assert!(i < ext, "index {} out of bounds for dim {} (extent {})", i, d, ext);
            flat = flat * ext + i;
        }
        self.data[flat]
    }

    /// Same buffer under new dims (must preserve element count).
    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel = checked_numel(&dims)?;
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.dims,
                self.data.len(),
                dims,
                numel
            )));
        }
        Ok(Tensor { dims, data: Arc::clone(&self.data) })
    }

    /// The single element of a scalar tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected scalar, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    /// Elementwise combine with an identically-shaped tensor.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "zip_map dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { dims: self.dims.clone(), data: data.into() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference (shapes must match).
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// ||a - b||_2 / ||b||_2 in f64, with a tiny floor on the denominator.
    pub fn rel_l2_error(&self, reference: &Self) -> f64 {
        assert_eq!(self.dims, reference.dims, "rel_l2_error shape mismatch");
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (&a, &b) in self.data.iter().zip(reference.data.iter()) {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            num += (a - b) * (a - b);
            den += b * b;
        }
        (num / den.max(1e-300)).sqrt()
    }

    /// Lossy dtype conversion.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    /// Rank-2 transpose (copies).
    pub fn transpose2d(&self) -> Result<Self> {
        if self.dims.len() != 2 {
            return Err(Error::shape(format!(
                "transpose2d needs rank 2, got {:?}",
                self.dims
            )));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { dims: vec![c, r], data: out.into() })
    }

    /// True when both tensors have identical dims and identical bit
    /// patterns (stricter than `==` for exotic float values).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.dims)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("dims must be non-empty".to_string()));
    }
    let mut numel = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(Error::shape(format!("zero extent in dims {:?}", dims)));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::shape(format!("dims {:?} overflow usize", dims)))?;
    }
    Ok(numel)
}
