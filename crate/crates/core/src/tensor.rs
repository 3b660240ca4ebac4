//! Dense row-major N-dimensional tensor value type.
//!
//! `Tensor` is a cheap-to-clone immutable value (`Arc` storage with
//! copy-on-write). Differentiation lives in [`crate::graph`]; this type only
//! holds data. Every buffer is counted by the allocation shim so `bench` mode
//! can report peak resident tensor bytes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::scalar::{f, Scalar};

static CURRENT_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Currently resident tensor bytes across all live buffers.
pub fn current_tensor_bytes() -> usize {
    CURRENT_BYTES.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak_tensor_bytes`].
pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Resets the peak counter to the current residency.
pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(CURRENT_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn track_alloc(bytes: usize) {
    let now = CURRENT_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(now, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    CURRENT_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Counted storage for tensor data.
#[derive(Debug)]
pub(crate) struct TensorBuf<T: Scalar> {
    data: Vec<T>,
}

impl<T: Scalar> TensorBuf<T> {
    fn new(data: Vec<T>) -> Self {
        track_alloc(data.len() * std::mem::size_of::<T>());
        TensorBuf { data }
    }
}

impl<T: Scalar> Clone for TensorBuf<T> {
    fn clone(&self) -> Self {
        TensorBuf::new(self.data.clone())
    }
}

impl<T: Scalar> Drop for TensorBuf<T> {
    fn drop(&mut self) {
        track_free(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Row-major strides for a shape. The empty shape (a scalar) has no strides.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Dense tensor with shared, copy-on-write storage.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    buf: Arc<TensorBuf<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the element count matches the shape.
    /// Every extent must be positive; the empty shape denotes a scalar.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::InvalidShape {
                op: "tensor",
                msg: format!("zero extent in {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CoreError::InvalidShape {
                op: "tensor",
                msg: format!(
                    "shape {shape:?} implies {expected} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            buf: Arc::new(TensorBuf::new(data)),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(TensorBuf::new(vec![T::zero(); n])),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(TensorBuf::new(vec![value; n])),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            buf: Arc::new(TensorBuf::new(vec![value])),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(TensorBuf::new(data)),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.buf.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.buf.data.is_empty()
    }

    /// True for single-element tensors (rank 0, or all extents 1).
    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.buf.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut Arc::make_mut(&mut self.buf).data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Same data, new shape. Element counts must agree.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.len() || shape.iter().any(|&e| e == 0) {
            return Err(CoreError::InvalidShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            buf: Arc::clone(&self.buf),
        })
    }

    pub fn first(&self) -> T {
        self.buf.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.buf.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.buf.data.iter().all(|v| v.is_finite())
    }

    /// Maps every element through `f` into a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            buf: Arc::new(TensorBuf::new(self.buf.data.iter().map(|&v| f(v)).collect())),
        }
    }

    /// Converts element type, used to lift f32 checkpoints into f64 checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            buf: Arc::new(TensorBuf::new(
                self.buf.data.iter().map(|&v| num_traits::cast(v).expect("scalar cast")).collect(),
            )),
        }
    }

    /// True when both tensors have identical shape and bit-identical data.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .as_slice()
                .iter()
                .zip(other.as_slice())
                .all(|(a, b)| f(*a).to_bits() == f(*b).to_bits())
    }

    /// Largest absolute elementwise difference; shapes must already agree.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (f(*a) - f(*b)).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.buf.data == other.buf.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }

    #[test]
    fn alloc_shim_tracks_bytes() {
        reset_peak_tensor_bytes();
        let before = current_tensor_bytes();
        {
            let t = Tensor::<f32>::zeros(&[256]);
            assert_eq!(current_tensor_bytes(), before + 1024);
            let c = t.clone(); // Arc clone, no new bytes
            assert_eq!(current_tensor_bytes(), before + 1024);
            drop(c);
            let mut m = t.clone();
            m.as_mut_slice()[0] = 1.0; // copy-on-write allocates
            assert_eq!(current_tensor_bytes(), before + 2048);
        }
        assert_eq!(current_tensor_bytes(), before);
        assert!(peak_tensor_bytes() >= before + 2048);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::<f64>::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.rank(), 0);
        assert_eq!(s.first(), 4.25);
    }
}
