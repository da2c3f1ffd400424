//! Scalar abstraction so the backbone runs in f32 for training/inference and
//! in f64 for gradient checks.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    #[inline]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $exp:path, $ln:path, $sqrt:path, $tanh:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[cfg(feature = "std")]
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[cfg(feature = "std")]
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }
            #[cfg(feature = "std")]
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[cfg(feature = "std")]
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32, libm::expf, libm::logf, libm::sqrtf, libm::tanhf);
impl_real!(f64, libm::exp, libm::log, libm::sqrt, libm::tanh);

/// `f64` math usable from the rest of the crate regardless of the `std` feature.
pub(crate) mod m {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        super::Real::exp(x)
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        super::Real::sqrt(x)
    }
    #[inline]
    pub fn powi(x: f64, n: u64) -> f64 {
        libm::pow(x, n as f64)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators; the reduction order is
/// fixed so results are reproducible.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let aa = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
