//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! The engine records every forward operation on a linear [`Tape`] and replays
//! it in reverse to accumulate gradients. The operator set is deliberately
//! small and smooth: stride-1 convolution, average pooling, nearest-neighbor
//! upsampling, ELU, elementwise arithmetic, and a handful of structured loss
//! kernels. There is no max-pooling, no strided convolution and no transposed
//! convolution anywhere; [`catalog::assert_catalog_smooth`] enforces that at
//! registration time.
//!
//! Training runs in `f32`; gradient verification instantiates the same tape
//! with `f64` so central finite differences are trustworthy.

mod adam;
mod catalog;
mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamOptimizer};
pub use catalog::{assert_catalog_smooth, catalog, forward_op, CatalogOp, OpAttrs};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Gradients, Op, Tape, ValueId};
pub use tensor::{numel, Tensor};

use std::fmt;

/// Floating-point element of tensors. Implemented for `f32` (training) and
/// `f64` (verification mode).
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn floor(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn powf(self, e: Self) -> Self {
                <$t>::powf(self, e)
            }
            #[inline]
            fn atan2(self, other: Self) -> Self {
                <$t>::atan2(self, other)
            }
            #[inline]
            fn floor(self) -> Self {
                <$t>::floor(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Errors raised by the autodiff engine.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("unknown operator id `{0}`")]
    UnknownOp(String),
    #[error("operator `{op}` missing attribute `{attr}`")]
    MissingAttr { op: String, attr: &'static str },
    #[error("operator `{op}` expects {expected} inputs, got {got}")]
    BadArity {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}
