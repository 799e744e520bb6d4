//! Four-dimensional NCHW tensors stored at their declared precision.

use std::fmt;

use half::bf16;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::{DType, Scalar};

/// Upper bound on the number of elements of any tensor the fuzzer builds.
pub const MAX_ELEMENTS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("tensor of {elements} elements exceeds the bound of {limit}")]
    ShapeTooLarge { elements: u128, limit: usize },
    #[error("all extents must be at least 1, got {0:?}")]
    ZeroExtent([usize; 4]),
    #[error("data length {got} does not match element count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Extents in (N, C, H, W) order. `w` is the width axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    /// Builds a shape, rejecting zero extents and anything above [`MAX_ELEMENTS`].
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Shape, TensorError> {
        Shape::from_dims([n, c, h, w])
    }

    pub fn from_dims(dims: [usize; 4]) -> Result<Shape, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(dims));
        }
        let elements = dims.iter().map(|&d| d as u128).product::<u128>();
        if elements > MAX_ELEMENTS as u128 {
            return Err(TensorError::ShapeTooLarge {
                elements,
                limit: MAX_ELEMENTS,
            });
        }
        Ok(Shape {
            n: dims[0],
            c: dims[1],
            h: dims[2],
            w: dims[3],
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn element_count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major offset of `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn offset_of(&self, idx: [usize; 4]) -> usize {
        self.offset(idx[0], idx[1], idx[2], idx[3])
    }

    /// Iterates all multi-indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = [usize; 4]> {
        let s = *self;
        (0..s.n).flat_map(move |n| {
            (0..s.c).flat_map(move |c| (0..s.h).flat_map(move |h| (0..s.w).map(move |w| [n, c, h, w])))
        })
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl Serialize for Shape {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.dims().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let dims = <[usize; 4]>::deserialize(deserializer)?;
        Shape::from_dims(dims).map_err(serde::de::Error::custom)
    }
}

/// Element storage at declared precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    BF16(Vec<bf16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::BF16(_) => DType::BF16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::BF16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_f64_iter(dtype: DType, values: impl Iterator<Item = f64>) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(values.map(f32::narrow).collect()),
            DType::F64 => TensorData::F64(values.collect()),
            DType::BF16 => TensorData::BF16(values.map(bf16::narrow).collect()),
        }
    }

    /// Picks elements by source index; `None` yields zero.
    fn gather(&self, idx: &[Option<usize>]) -> TensorData {
        fn pick<T: Copy>(src: &[T], idx: &[Option<usize>], zero: T) -> Vec<T> {
            idx.iter().map(|i| i.map_or(zero, |i| src[i])).collect()
        }
        match self {
            TensorData::F32(v) => TensorData::F32(pick(v, idx, 0.0)),
            TensorData::F64(v) => TensorData::F64(pick(v, idx, 0.0)),
            TensorData::BF16(v) => TensorData::BF16(pick(v, idx, bf16::ZERO)),
        }
    }
}

/// An immutable NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Shape, data: TensorData) -> Result<Tensor, TensorError> {
        if data.len() != shape.element_count() {
            return Err(TensorError::LengthMismatch {
                expected: shape.element_count(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Quantizes `values` to `dtype`.
    pub fn from_f64(shape: Shape, dtype: DType, values: &[f64]) -> Result<Tensor, TensorError> {
        if values.len() != shape.element_count() {
            return Err(TensorError::LengthMismatch {
                expected: shape.element_count(),
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: TensorData::from_f64_iter(dtype, values.iter().copied()),
        })
    }

    pub fn from_scalars<T: Scalar>(shape: Shape, dtype: DType, values: &[T]) -> Result<Tensor, TensorError> {
        if values.len() != shape.element_count() {
            return Err(TensorError::LengthMismatch {
                expected: shape.element_count(),
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: TensorData::from_f64_iter(dtype, values.iter().map(|v| v.widen())),
        })
    }

    pub fn zeros(shape: Shape, dtype: DType) -> Tensor {
        Tensor {
            shape,
            data: TensorData::from_f64_iter(dtype, std::iter::repeat_n(0.0, shape.element_count())),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        self.len() * self.dtype().byte_width()
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
            TensorData::BF16(v) => v[i].to_f64(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get_f64(i)).collect()
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        (0..self.len()).map(|i| T::narrow(self.get_f64(i))).collect()
    }

    /// Converts to `dtype` with round-to-nearest-even. Casting to the current
    /// dtype returns an identical tensor.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Tensor {
            shape: self.shape,
            data: TensorData::from_f64_iter(dtype, (0..self.len()).map(|i| self.get_f64(i))),
        }
    }

    /// Arithmetic mean over all elements, accumulated at F64.
    pub fn mean(&self) -> f64 {
        let sum: f64 = (0..self.len()).map(|i| self.get_f64(i)).sum();
        sum / self.len() as f64
    }

    pub fn has_nan(&self) -> bool {
        (0..self.len()).any(|i| self.get_f64(i).is_nan())
    }

    /// Bitwise equality of shape, dtype and every stored element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::BF16(a), TensorData::BF16(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    /// Builds a tensor of `shape` whose element at each output index is taken
    /// from `source(index)`, or zero when it returns `None`.
    pub fn remap(&self, shape: Shape, source: impl Fn([usize; 4]) -> Option<[usize; 4]>) -> Tensor {
        let idx: Vec<Option<usize>> = shape
            .indices()
            .map(|i| source(i).map(|j| self.shape.offset_of(j)))
            .collect();
        Tensor {
            shape,
            data: self.data.gather(&idx),
        }
    }

    /// Reinterprets the element order under a new shape of equal size.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Draws a tensor with elements i.i.d. uniform on [-1, 1], quantized to `dtype`.
pub fn random_seed_tensor<R: Rng + ?Sized>(shape: Shape, dtype: DType, rng: &mut R) -> Result<Tensor, TensorError> {
    let elements = shape.element_count();
    if elements > MAX_ELEMENTS {
        return Err(TensorError::ShapeTooLarge {
            elements: elements as u128,
            limit: MAX_ELEMENTS,
        });
    }
    let values: Vec<f64> = (0..elements).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::from_f64(shape, dtype, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seed_tensor_bounds_and_determinism() {
        let shape = Shape::new(1, 1, 1, 1).unwrap();
        let a = random_seed_tensor(shape, DType::F32, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.len(), 1);
        assert!((-1.0..=1.0).contains(&a.get_f64(0)));

        let shape = Shape::new(2, 3, 4, 5).unwrap();
        let a = random_seed_tensor(shape, DType::BF16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_seed_tensor(shape, DType::BF16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.to_f64_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        assert!(matches!(
            Shape::new(1, 1, 4096, 4097),
            Err(TensorError::ShapeTooLarge { .. })
        ));
        assert!(Shape::new(1, 1, 4096, 4096).is_ok());
        assert!(matches!(Shape::new(1, 0, 2, 2), Err(TensorError::ZeroExtent(_))));
    }

    #[test]
    fn storage_is_at_declared_precision() {
        let shape = Shape::new(1, 1, 1, 2).unwrap();
        let t = Tensor::from_f64(shape, DType::F32, &[0.1, 1.0 / 3.0]).unwrap();
        assert_eq!(t.get_f64(0), 0.1f32 as f64);
        let back = Tensor::from_f64(shape, DType::F32, &t.to_f64_vec()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn length_mismatch() {
        let shape = Shape::new(1, 1, 2, 2).unwrap();
        assert!(matches!(
            Tensor::from_f64(shape, DType::F64, &[1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, got: 3 })
        ));
    }
}
