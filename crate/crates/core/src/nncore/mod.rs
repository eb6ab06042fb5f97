//! Minimal tensor and layer library with hand-written backward passes.
//!
//! Layers cache what their backward pass needs during `forward`; parameter
//! gradients accumulate into each parameter tensor's `grad` buffer until
//! cleared. Everything is generic over [`Real`] so the same code runs in
//! single precision for training and double precision for gradient checks.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod gemm;
pub mod gradcheck;
mod loss;
mod pool;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use activation::Relu;
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNorm2d, BN_EPS, BN_MOMENTUM};
pub(crate) use conv::im2col;
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use gemm::{gemm, Transpose};
pub use gradcheck::{
    gradient_check, gradient_check_floored, gradient_check_with, relative_error, relative_error_floored, CheckOptions,
    GradCheckReport, LayerObjective, Objective, ParamError, RELATIVE_FLOOR,
};
pub use loss::{softmax_ce, softmax_ce_backward};
pub(crate) use pool::region;
pub use pool::{AdaptiveAvgPool2d, MaxPool2d, ADAPTIVE_OUT};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("batch-norm training needs at least two values per channel")]
    DegenerateBatch,
    #[error("max pooling needs even spatial dimensions, got {0}x{1}")]
    OddSpatialDims(usize, usize),
    #[error("adaptive pooling input {0}x{1} is smaller than the 2x2 output")]
    TooSmall(usize, usize),
    #[error("dropout probability {0} not in [0, 1)")]
    BadProbability(f64),
    #[error("target class {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("backward called before forward")]
    NoForwardCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Scalar type the layers compute in.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and dimensions must keep every access inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

const LANES: usize = 8;

/// Sums in f64 regardless of `T`, over independent lanes so the loop
/// vectorizes.
#[inline(always)]
pub(crate) fn sum_f64<T: Real>(values: &[T]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let chunks = values.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| v.f64()).sum();
    for c in chunks {
        for k in 0..LANES {
            lanes[k] += c[k].f64();
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Sum and sum of squares in f64.
#[inline(always)]
pub(crate) fn moments_f64<T: Real>(values: &[T]) -> (f64, f64) {
    let (mut s, mut q) = ([0.0f64; LANES], [0.0f64; LANES]);
    let chunks = values.chunks_exact(LANES);
    let (mut ts, mut tq) = (0.0, 0.0);
    for v in chunks.remainder() {
        ts += v.f64();
        tq += v.f64() * v.f64();
    }
    for c in chunks {
        for k in 0..LANES {
            let v = c[k].f64();
            s[k] += v;
            q[k] += v * v;
        }
    }
    (s.iter().sum::<f64>() + ts, q.iter().sum::<f64>() + tq)
}

/// Dot product accumulated in f64.
#[inline(always)]
pub(crate) fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x.f64() * y.f64()).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            lanes[k] += x[k].f64() * y[k].f64();
        }
    }
    lanes.iter().sum::<f64>() + tail
}
