//! Idempotents, the one-sided order `p <= q  <=>  qp = p`, equivalence, and
//! the canonical self-adjoint representative of each equivalence class.

use crate::algebra::{
    dim_mismatch, random_mild_invertible, rel_residual, AlgebraError, RandomSource, Tolerance,
    RANK_THRESHOLD,
};
use crate::scalar::RealScalar;
use crate::CMatrix;
use nalgebra::{Complex, ComplexField, DMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdempotentError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("matrix is not idempotent (residual {residual:.3e})")]
    NotIdempotent { residual: f64 },
    #[error("matrix is not an orthogonal projection (residual {residual:.3e})")]
    NotOrthoProjection { residual: f64 },
}

/// An element p with p² = p (within `exact_rel`).
#[derive(Clone, Debug, PartialEq)]
pub struct Idempotent<S: RealScalar> {
    value: CMatrix<S>,
}

impl<S: RealScalar> Idempotent<S> {
    pub fn new(value: CMatrix<S>, tol: &Tolerance<S>) -> Result<Self, IdempotentError> {
        if value.nrows() != value.ncols() {
            return Err(dim_mismatch(&value, &value).into());
        }
        let residual = rel_residual(&(&value * &value), &value);
        if residual > tol.exact_rel {
            return Err(IdempotentError::NotIdempotent {
                residual: residual.as_f64(),
            });
        }
        Ok(Self { value })
    }

    pub(crate) fn new_unchecked(value: CMatrix<S>) -> Self {
        Self { value }
    }

    pub fn value(&self) -> &CMatrix<S> {
        &self.value
    }

    pub fn into_value(self) -> CMatrix<S> {
        self.value
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }

    /// The complementary idempotent `1 - p`.
    pub fn complement(&self) -> Self {
        let id: CMatrix<S> = DMatrix::identity(self.dim(), self.dim());
        Self {
            value: id - &self.value,
        }
    }
}

/// An idempotent that is also self-adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoProjection<S: RealScalar> {
    value: CMatrix<S>,
}

impl<S: RealScalar> OrthoProjection<S> {
    pub fn new(value: CMatrix<S>, tol: &Tolerance<S>) -> Result<Self, IdempotentError> {
        let p = Idempotent::new(value, tol)?;
        let residual = rel_residual(&p.value().adjoint(), p.value());
        if residual > tol.exact_rel {
            return Err(IdempotentError::NotOrthoProjection {
                residual: residual.as_f64(),
            });
        }
        Ok(Self {
            value: p.into_value(),
        })
    }

    pub(crate) fn new_unchecked(value: CMatrix<S>) -> Self {
        Self { value }
    }

    pub fn value(&self) -> &CMatrix<S> {
        &self.value
    }

    pub fn into_value(self) -> CMatrix<S> {
        self.value
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }

    /// Reinterpret as a plain idempotent.
    pub fn as_idempotent(&self) -> Idempotent<S> {
        Idempotent {
            value: self.value.clone(),
        }
    }
}

/// The order relation `p <= q`, i.e. `qp = p` within `exact_rel`.
///
/// This is deliberately one-sided; equivalence is the symmetrization.
pub fn leq<S: RealScalar>(
    p: &Idempotent<S>,
    q: &Idempotent<S>,
    tol: &Tolerance<S>,
) -> Result<bool, IdempotentError> {
    if p.dim() != q.dim() {
        return Err(dim_mismatch(p.value(), q.value()).into());
    }
    Ok(rel_residual(&(q.value() * p.value()), p.value()) <= tol.exact_rel)
}

/// `p ~ q  <=>  p <= q and q <= p` (same range, possibly different kernels'
/// orthogonal complements — for idempotents this means equality of ranges).
pub fn equivalent<S: RealScalar>(
    p: &Idempotent<S>,
    q: &Idempotent<S>,
    tol: &Tolerance<S>,
) -> Result<bool, IdempotentError> {
    Ok(leq(p, q, tol)? && leq(q, p, tol)?)
}

/// Orthonormal basis of the column space of `p`, as columns of an m x r
/// matrix, computed by Householder QR with column pivoting. The rank r is
/// the number of leading diagonal entries of R above `RANK_THRESHOLD *
/// ||p||`. Works for oblique (non-hermitian) idempotents.
pub(crate) fn range_basis<S: RealScalar>(p: &CMatrix<S>) -> CMatrix<S> {
    let m = p.nrows();
    let scale = p.norm();
    if scale == S::zero() {
        return DMatrix::zeros(m, 0);
    }
    let qr = p.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let cut = S::from_double(RANK_THRESHOLD) * scale;
    let mut rank = 0usize;
    while rank < r.nrows().min(r.ncols()) && r[(rank, rank)].modulus() > cut {
        rank += 1;
    }
    q.columns(0, rank).into_owned()
}

/// Orthogonal projection onto ran(p) for an idempotent p: the unique
/// self-adjoint representative of the equivalence class of p.
///
/// Computed from an orthonormal basis of the column space (singular vectors
/// above the fixed rank threshold); stabler than algebraic formulas when p
/// is far from normal.
pub fn orthogonalize<S: RealScalar>(
    p: &Idempotent<S>,
    _tol: &Tolerance<S>,
) -> Result<OrthoProjection<S>, IdempotentError> {
    let basis = range_basis(p.value());
    let q = &basis * basis.adjoint();
    // Symmetrize to kill the last rounding asymmetry.
    Ok(OrthoProjection::new_unchecked(
        (&q + q.adjoint()).scale(S::from_double(0.5)),
    ))
}

/// Coordinate projection `diag(1,...,1,0,...,0)` of the given rank.
pub(crate) fn coordinate_projection<S: RealScalar>(m: usize, rank: usize) -> CMatrix<S> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j && i < rank {
            Complex::new(S::one(), S::zero())
        } else {
            Complex::new(S::zero(), S::zero())
        }
    })
}

/// Random idempotent of the given rank: `s p s^{-1}` with p a coordinate
/// projection and s a mild perturbation of the identity, so conditioning
/// stays bounded.
pub fn random_idempotent<S: RealScalar>(
    src: &mut RandomSource,
    m: usize,
    rank: usize,
) -> Idempotent<S> {
    let p0 = coordinate_projection::<S>(m, rank);
    let s = random_mild_invertible::<S>(src, m);
    let sinv = s
        .clone()
        .lu()
        .try_inverse()
        .expect("mild perturbations of the identity are invertible");
    Idempotent::new_unchecked(&s * p0 * sinv)
}
