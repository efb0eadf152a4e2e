use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar the whole toolkit is generic over.
///
/// Everything numerical in this crate is written against this trait so the
/// same code runs in `f32` for quick sweeps and `f64` for verification.
/// Tolerances quoted in the docs are `f64` tolerances; `f32` users should
/// expect them to scale with `Self::epsilon()`.
pub trait Real: NdFloat + FromPrimitive + Default + Sum {
    /// Converts an `f64` literal. Panics only if the literal is not
    /// representable at all, which never happens for the constants used here.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
