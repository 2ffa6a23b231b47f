//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Real scalar the library is generic over (`f32` or `f64`).
///
/// Special functions that `num_traits::Float` does not cover are provided
/// here so that each concrete type can route to its own libm routine.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// Lossy conversion from an `f64` literal or intermediate.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f64 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm_sq<S: Scalar>(a: &[S]) -> S {
    dot(a, a)
}

pub(crate) fn all_finite<S: Scalar>(a: &[S]) -> bool {
    a.iter().all(|v| v.is_finite())
}
