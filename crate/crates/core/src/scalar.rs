//! Scalar abstraction: the whole calculus is generic over the real field
//! underlying the complex matrix entries. `f32` and `f64` are the provided
//! instances; `f64` is what the CLI and the default tolerances target.

use nalgebra::{Complex, RealField};
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Real scalar the matrix algebra is built over.
///
/// Bundles nalgebra's `RealField` (field operations, square roots, arc
/// tangents) with the num-traits conversions needed for tolerance constants
/// and JSON round trips, plus seeded standard-normal sampling for the random
/// generators.
pub trait RealScalar: RealField + FromPrimitive + ToPrimitive + Copy {
    /// Draws one standard-normal sample from the given generator.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// True when the value is neither NaN nor infinite.
    fn finite(self) -> bool;

    /// Converts an `f64` constant into this scalar type.
    fn from_double(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// View as `f64`, used by the serialization layer.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real scalar converts to f64")
    }
}

impl RealScalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl RealScalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn finite(self) -> bool {
        self.is_finite()
    }
}

/// Complex entry with the given real and imaginary parts.
pub fn c<S: RealScalar>(re: f64, im: f64) -> Complex<S> {
    Complex::new(S::from_double(re), S::from_double(im))
}

/// Real scalar embedded as a complex entry.
pub fn cre<S: RealScalar>(x: S) -> Complex<S> {
    Complex::new(x, S::zero())
}
