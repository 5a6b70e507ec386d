//! Numerical calculus of flags of idempotents in matrix *-algebras.
//!
//! The library works inside `M_m(C)` viewed as a *-algebra: idempotent chains
//! (flags), the block decomposition they induce, the diagonal-truncation and
//! canonical-projection operators attached to a flag, triangular
//! factorization along a flag, local connections on trivialized bundles, and
//! frame transport over curves of orthogonal flags.
//!
//! Everything is generic over the real scalar backing the complex entries
//! (`f32` or `f64`); `Matrix64`, `Flag64`, and friends fix the common
//! double-precision choice.

pub mod algebra;
pub mod connection;
pub mod flag;
pub mod idempotent;
pub mod json;
pub mod scalar;
pub mod stiefel;
pub mod suites;

pub use scalar::RealScalar;

use nalgebra::Complex;

/// Dense complex matrix over real scalar `S`.
pub type CMatrix<S> = nalgebra::DMatrix<Complex<S>>;
/// Dense complex column vector over real scalar `S`.
pub type CVector<S> = nalgebra::DVector<Complex<S>>;

/// Double-precision complex matrix.
pub type Matrix64 = CMatrix<f64>;
/// Double-precision complex vector.
pub type Vector64 = CVector<f64>;
/// Double-precision complex scalar.
pub type Complex64 = Complex<f64>;
/// Double-precision tolerance bundle.
pub type Tolerance64 = algebra::Tolerance<f64>;
/// Double-precision flag.
pub type Flag64 = flag::Flag<f64>;
/// Double-precision orthogonal flag.
pub type OrthoFlag64 = flag::OrthoFlag<f64>;

/// Single-precision complex matrix.
pub type Matrix32 = CMatrix<f32>;
/// Single-precision complex vector.
pub type Vector32 = CVector<f32>;
/// Single-precision complex scalar.
pub type Complex32 = Complex<f32>;
