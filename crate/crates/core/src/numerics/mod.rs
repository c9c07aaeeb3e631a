//! Dense tensors, 2-D FFTs, small complex linear algebra and circular
//! convolution. Everything above this layer is written against these types.

mod cmatrix;
pub(crate) mod conv;
mod fft;
pub(crate) mod spectral;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rustfft::FftNum;

pub use cmatrix::ComplexMatrix;
pub use conv::{circular_conv, circular_conv_direct, conv_transpose, conv_transpose_direct};
pub use fft::{fft2, ifft2, ComplexPlane, Fft2};
pub use spectral::{kernel_spectrum, FreqBlockOperator, HalfSpectrum, SpectralBatch};
pub use tensor::Tensor;

pub use num_complex::Complex;

/// Pivot magnitude below which LU factorization reports a singular matrix.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Scalar precision tag carried by checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Real scalar type used throughout the crate: `f32` for training, `f64`
/// for verification.
pub trait Real:
    Float + FftNum + Default + Sum + Display + Debug + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn lit(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
