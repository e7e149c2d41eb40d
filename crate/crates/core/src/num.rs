//! Scalar abstraction shared by the model and analysis code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating point scalar the model and analysis code is generic over: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        // FromPrimitive never fails for f32/f64 targets.
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {}
