//! Scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssignOps};

/// Real number type usable for images, projections and optimizer state.
///
/// Implemented for `f32` and `f64`. Likelihood bookkeeping always promotes to
/// `f64` regardless of the image scalar.
pub trait Real:
    Float + FloatConst + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    #[inline]
    fn clamp_unit(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl<T> Real for T where
    T: Float + FloatConst + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
}
