//! Dense row-major tensors and the primitives the QnA kernels are built from.
//!
//! Every operation here is a pure function of its inputs. Operations that can
//! allocate scratch memory take an [`AllocationLedger`] so callers can assert
//! on transient memory use.

mod io;
pub(crate) mod ledger;
pub(crate) mod ops;
mod rng;
mod window;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{QnaError, Result};

pub use io::{read_tensor, read_tensor_any, write_tensor, AnyTensor, TensorManifest};
pub use ledger::{AllocEvent, AllocationLedger};
pub use ops::{layernorm, matmul, matmul_tracked, reshape_permute, softmax_rows};
pub use rng::RngSeed;
pub use window::{conv2d, window_offsets, window_weighted_sum, window_weighted_sum_tracked, Padding, Window};

/// Element type tag, also the on-disk dtype byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = QnaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(QnaError::invalid("dtype", format!("unknown dtype `{other}`"))),
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    const DTYPE: DType;

    fn cast(v: f64) -> Self;
    fn widen(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice"))
    }
}

/// Dense row-major N-dimensional array.
///
/// Invariants: every dimension is positive, `data.len()` equals the product of
/// the shape, and every element is finite.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(QnaError::shape(op, "rank-0 tensors are not supported"));
    }
    if shape.contains(&0) {
        return Err(QnaError::shape(op, format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("Tensor::new", &shape)?;
        if n != data.len() {
            return Err(QnaError::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QnaError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from values already known to satisfy the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Like [`Tensor::from_parts`] but verifies finiteness, for op outputs.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QnaError::NonFinite { op });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("Tensor::full", &shape)?;
        if !value.is_finite() {
            return Err(QnaError::NonFinite { op: "Tensor::full" });
        }
        Ok(Tensor { shape, data: vec![value; n] })
    }

    /// Fills a tensor by evaluating `f` on each row-major flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("Tensor::from_fn", &shape)?;
        let data: Vec<T> = (0..n).map(f).collect();
        Self::checked("Tensor::from_fn", shape, data)
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * T::DTYPE.size()
    }

    fn flat_index(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(flat)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.flat_index(index).map(|i| self.data[i])
    }

    /// Returns a copy with one element replaced.
    pub fn with_value(&self, index: &[usize], value: T) -> Result<Self> {
        let flat = self.flat_index(index).ok_or_else(|| {
            QnaError::shape("Tensor::with_value", format!("index {index:?} out of range for {:?}", self.shape))
        })?;
        if !value.is_finite() {
            return Err(QnaError::NonFinite { op: "Tensor::with_value" });
        }
        let mut out = self.clone();
        out.data[flat] = value;
        Ok(out)
    }

    /// Returns a copy with the flat element `i` replaced.
    pub fn with_flat(&self, i: usize, value: T) -> Result<Self> {
        if i >= self.data.len() {
            return Err(QnaError::shape("Tensor::with_flat", format!("flat index {i} out of range")));
        }
        if !value.is_finite() {
            return Err(QnaError::NonFinite { op: "Tensor::with_flat" });
        }
        let mut out = self.clone();
        out.data[i] = value;
        Ok(out)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("Tensor::reshape", &shape)?;
        if n != self.data.len() {
            return Err(QnaError::shape("Tensor::reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::checked("Tensor::map", self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(QnaError::shape("Tensor::zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::checked("Tensor::zip_map", self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::cast(v.widen())).collect();
        // Narrowing f64 -> f32 can overflow to infinity; saturate instead.
        let data = data.into_iter().map(|v| if v.is_finite() { v } else { v.signum() * U::max_value() }).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a.widen() - b.widen()).abs()).fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.widen().abs()).fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.widen().to_bits() == b.widen().to_bits())
    }
}

/// Returns `(rows, cols)` for a rank-2 tensor.
pub(crate) fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(QnaError::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

/// Returns `(h, w, c)` for a rank-3 tensor.
pub(crate) fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(QnaError::shape(op, format!("expected rank 3 (H x W x C), got {s:?}"))),
    }
}
