//! Scalar abstraction shared by the geometry and estimation code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by every numeric routine in the crate: f32 or f64.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Elementwise tolerance on `R·Rᵀ − I` and `det(R) − 1` accepted for a rotation.
    const ORTHONORMAL_TOL: f64;

    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Lossy conversion to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const ORTHONORMAL_TOL: f64 = 1e-9;
}

impl Real for f32 {
    const ORTHONORMAL_TOL: f64 = 1e-4;
}
