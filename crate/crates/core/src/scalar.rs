//! Floating point scalar abstraction shared by the geometry and metric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or tolerance.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    /// Widening conversion used at pixel-sampling boundaries.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Wraps an angle to `(-pi, pi]`.
    fn wrap_angle(self) -> Self {
        let tau = Self::TAU();
        let pi = Self::PI();
        let mut r = self - tau * ((self + pi) / tau).floor();
        // floor() lands on [-pi, pi); -pi itself is mapped onto +pi
        if r <= -pi {
            r = r + tau;
        }
        if r > pi {
            r = r - tau;
        }
        r
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(PI.wrap_angle(), PI);
        assert_eq!((-PI).wrap_angle(), PI);
        assert_eq!((2.0 * PI).wrap_angle(), 0.0);
        assert!(((3.0 * PI / 2.0).wrap_angle() + PI / 2.0).abs() < 1e-12);
        assert!(((-3.0 * PI / 2.0).wrap_angle() - PI / 2.0).abs() < 1e-12);
        assert_eq!(0.25f32.wrap_angle(), 0.25);
    }
}
