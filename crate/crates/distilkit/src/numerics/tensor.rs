//! Dense row-major tensors and the instrumented allocation gauge.
//!
//! Every tensor payload is registered with a thread-local byte gauge on
//! construction and released on drop. The profiler reads the gauge's
//! high-water mark; nothing else in the crate allocates tensor-sized
//! buffers outside this type, so the gauge is the allocator of record for
//! memory measurements.

use std::cell::Cell;
use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type for all numeric paths: `f32` for training-speed compute,
/// `f64` for oracles and identity checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;

    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    /// Bit pattern widened to u64, for bit-exact comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    #[inline]
    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    #[inline]
    fn from_f64c(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Shorthand cast used throughout the numeric kernels.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64c(x)
}

// ── Allocation gauge ─────────────────────────────────────────────────

/// Fixed per-tensor bookkeeping charge added to the payload size, so that
/// reported peaks are stable across element types and shapes.
pub const TENSOR_OVERHEAD_BYTES: u64 = 64;

thread_local! {
    static LIVE_BYTES: Cell<u64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<u64> = const { Cell::new(0) };
}

fn gauge_alloc(bytes: u64) {
    LIVE_BYTES.with(|l| {
        let live = l.get() + bytes;
        l.set(live);
        PEAK_BYTES.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
}

fn gauge_free(bytes: u64) {
    LIVE_BYTES.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Current live tensor bytes on this thread (payload + overhead).
pub fn gauge_live_bytes() -> u64 {
    LIVE_BYTES.with(|l| l.get())
}

/// Resets the high-water mark to the current live figure and returns the
/// previous mark. Used by the profiler to bracket a run.
pub fn gauge_reset_peak() -> u64 {
    let live = gauge_live_bytes();
    PEAK_BYTES.with(|p| {
        let old = p.get();
        p.set(live);
        old
    })
}

pub fn gauge_peak_bytes() -> u64 {
    PEAK_BYTES.with(|p| p.get())
}

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
///
/// Data is immutable after forward construction except through
/// [`Tensor::data_mut`], which exists for optimizer updates between steps.
#[derive(Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Validating constructor: shape product must equal data length and all
    /// values must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Internal constructor for kernel outputs; skips the element scan
    /// (the tape performs its own finiteness surveillance on op outputs).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        gauge_alloc(data.len() as u64 * S::BYTES as u64 + TENSOR_OVERHEAD_BYTES);
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape, vec![S::zero(); numel])
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable payload access, intended for parameter updates between
    /// forward passes. Length is fixed; the gauge stays consistent.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts the payload to `f64` (oracle precision).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64c()).collect()
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        gauge_alloc(self.data.len() as u64 * S::BYTES as u64 + TENSOR_OVERHEAD_BYTES);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl<S: Scalar> Drop for Tensor<S> {
    fn drop(&mut self) {
        gauge_free(self.data.len() as u64 * S::BYTES as u64 + TENSOR_OVERHEAD_BYTES);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![1], vec![f32::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gauge_tracks_live_and_peak() {
        let base = gauge_live_bytes();
        gauge_reset_peak();
        {
            let _t = Tensor::<f32>::zeros(vec![1000]);
            assert_eq!(gauge_live_bytes() - base, 4000 + TENSOR_OVERHEAD_BYTES);
        }
        assert_eq!(gauge_live_bytes(), base);
        // first freed before the second: peak is one tensor, not two
        {
            let _a = Tensor::<f32>::zeros(vec![1000]);
        }
        {
            let _b = Tensor::<f32>::zeros(vec![1000]);
        }
        assert_eq!(gauge_peak_bytes() - base, 4000 + TENSOR_OVERHEAD_BYTES);
    }

    #[test]
    fn clone_is_gauge_balanced() {
        let base = gauge_live_bytes();
        let t = Tensor::<f64>::zeros(vec![10]);
        let u = t.clone();
        assert_eq!(gauge_live_bytes() - base, 2 * (80 + TENSOR_OVERHEAD_BYTES));
        drop(t);
        drop(u);
        assert_eq!(gauge_live_bytes(), base);
    }
}
