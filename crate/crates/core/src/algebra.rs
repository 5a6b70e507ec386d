//! The ambient *-algebra kernel: residual conventions, tolerances, corner
//! (sub)algebra inversion, exponential/logarithm on the unitary group, and
//! seeded random generators.
//!
//! Matrices are `CMatrix<S> = DMatrix<Complex<S>>` with the conjugate
//! transpose as involution. Every approximate equality in this crate is the
//! relative Frobenius residual `||lhs - rhs|| <= tol * (1 + ||rhs||)`.

use crate::scalar::{cre, RealScalar};
use crate::CMatrix;
use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Relative threshold on singular values used for every rank decision.
/// A singular value counts toward the rank when it exceeds
/// `RANK_THRESHOLD * ||m||`. Declared once; not configurable per call.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Errors raised by the matrix kernel.
#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("dimension mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("corner compression is numerically singular (sigma_min {sigma_min:.3e} <= {threshold:.3e})")]
    SingularCorner { sigma_min: f64, threshold: f64 },
    #[error("matrix is not skew-hermitian (residual {residual:.3e})")]
    NotSkewHermitian { residual: f64 },
    #[error("matrix is not unitary (residual {residual:.3e})")]
    NotUnitary { residual: f64 },
    #[error("principal logarithm undefined: eigenvalue within {margin:.3e} of -1")]
    BranchCut { margin: f64 },
    #[error("matrix is not an orthogonal projection (residual {residual:.3e})")]
    NotProjection { residual: f64 },
    #[error("matrix is numerically singular")]
    NotInvertible,
    #[error("tolerances must be strictly positive with algebraic_rel >= exact_rel")]
    BadTolerance,
}

/// Residual thresholds governing every approximate equality.
///
/// `algebraic_rel` guards identities that hold up to conditioning,
/// `exact_rel` guards identities that are exact in exact arithmetic,
/// `transport_rel` guards integrator accuracy. Defaults (1e-9, 1e-12, 1e-6)
/// are stated for `f64`.
#[derive(Clone, Debug)]
pub struct Tolerance<S: RealScalar> {
    pub algebraic_rel: S,
    pub exact_rel: S,
    pub transport_rel: S,
}

impl<S: RealScalar> Default for Tolerance<S> {
    fn default() -> Self {
        Self {
            algebraic_rel: S::from_double(1e-9),
            exact_rel: S::from_double(1e-12),
            transport_rel: S::from_double(1e-6),
        }
    }
}

impl<S: RealScalar> Tolerance<S> {
    /// Validated constructor: all thresholds strictly positive and
    /// `algebraic_rel >= exact_rel`.
    pub fn new(algebraic_rel: S, exact_rel: S, transport_rel: S) -> Result<Self, AlgebraError> {
        let pos = algebraic_rel > S::zero() && exact_rel > S::zero() && transport_rel > S::zero();
        if !pos || algebraic_rel < exact_rel {
            return Err(AlgebraError::BadTolerance);
        }
        Ok(Self {
            algebraic_rel,
            exact_rel,
            transport_rel,
        })
    }

    /// Every threshold multiplied by `factor` (the CLI escape hatch).
    pub fn scaled(&self, factor: S) -> Self {
        Self {
            algebraic_rel: self.algebraic_rel * factor,
            exact_rel: self.exact_rel * factor,
            transport_rel: self.transport_rel * factor,
        }
    }
}

pub(crate) fn dim_mismatch<S: RealScalar>(a: &CMatrix<S>, b: &CMatrix<S>) -> AlgebraError {
    AlgebraError::DimensionMismatch {
        left_rows: a.nrows(),
        left_cols: a.ncols(),
        right_rows: b.nrows(),
        right_cols: b.ncols(),
    }
}

/// Relative Frobenius residual `||lhs - rhs|| / (1 + ||rhs||)`.
pub fn rel_residual<S: RealScalar>(lhs: &CMatrix<S>, rhs: &CMatrix<S>) -> S {
    (lhs - rhs).norm() / (S::one() + rhs.norm())
}

/// True when `rel_residual(lhs, rhs) <= tol`.
pub fn is_close<S: RealScalar>(lhs: &CMatrix<S>, rhs: &CMatrix<S>, tol: S) -> bool {
    lhs.shape() == rhs.shape() && rel_residual(lhs, rhs) <= tol
}

/// Hermitian part `(m + m*) / 2`.
pub fn hermitian_part<S: RealScalar>(m: &CMatrix<S>) -> CMatrix<S> {
    (m + m.adjoint()).scale(S::from_double(0.5))
}

/// Skew-hermitian part `(m - m*) / 2`.
pub fn skew_part<S: RealScalar>(m: &CMatrix<S>) -> CMatrix<S> {
    (m - m.adjoint()).scale(S::from_double(0.5))
}

/// Number of singular values above `RANK_THRESHOLD * ||m||`.
pub fn numeric_rank<S: RealScalar>(m: &CMatrix<S>) -> usize {
    let scale = m.norm();
    if scale == S::zero() {
        return 0;
    }
    let cut = S::from_double(RANK_THRESHOLD) * scale;
    m.singular_values().iter().filter(|s| **s > cut).count()
}

fn extreme_singular_values<S: RealScalar>(m: &CMatrix<S>) -> (S, S) {
    let sv = m.singular_values();
    let mut lo = S::zero();
    let mut hi = S::zero();
    for (i, s) in sv.iter().enumerate() {
        if i == 0 || *s > hi {
            hi = *s;
        }
        if i == 0 || *s < lo {
            lo = *s;
        }
    }
    (lo, hi)
}

/// Inverse guarded by a condition check: errors when
/// `sigma_min <= algebraic_rel * sigma_max`.
pub fn checked_inverse<S: RealScalar>(
    m: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, AlgebraError> {
    if m.nrows() != m.ncols() {
        return Err(dim_mismatch(m, m));
    }
    let (lo, hi) = extreme_singular_values(m);
    if lo <= tol.algebraic_rel * hi {
        return Err(AlgebraError::NotInvertible);
    }
    m.clone().lu().try_inverse().ok_or(AlgebraError::NotInvertible)
}

/// Orthonormal basis of ran(p) for an orthogonal projection p, as the
/// columns of an m x r matrix (eigenvectors of p with eigenvalue near 1).
fn range_basis<S: RealScalar>(p: &CMatrix<S>) -> CMatrix<S> {
    let eig = hermitian_part(p).symmetric_eigen();
    let half = S::from_double(0.5);
    let cols: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&j| eig.eigenvalues[j] > half)
        .collect();
    let m = p.nrows();
    DMatrix::from_fn(m, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])])
}

fn check_projection<S: RealScalar>(p: &CMatrix<S>, tol: &Tolerance<S>) -> Result<(), AlgebraError> {
    let herm = rel_residual(&p.adjoint(), p);
    let idem = rel_residual(&(p * p), p);
    let res = if herm > idem { herm } else { idem };
    if res > tol.algebraic_rel {
        return Err(AlgebraError::NotProjection {
            residual: res.as_f64(),
        });
    }
    Ok(())
}

/// Inverse of the compression `p g p` inside the corner algebra `p A p`.
///
/// The result h satisfies `h = p h p` and `h (p g p) = (p g p) h = p` (the
/// unit of the corner). Computed by restricting g to an orthonormal basis of
/// ran(p), inverting the restricted block through its SVD, and re-embedding.
pub fn corner_inverse<S: RealScalar>(
    g: &CMatrix<S>,
    p: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, AlgebraError> {
    if g.shape() != p.shape() || g.nrows() != g.ncols() {
        return Err(dim_mismatch(g, p));
    }
    check_projection(p, tol)?;
    let b = range_basis(p);
    let r = b.ncols();
    let m = g.nrows();
    if r == 0 {
        return Ok(DMatrix::zeros(m, m));
    }
    let c = b.adjoint() * g * &b;
    let scale = c.norm();
    let (smin, _) = extreme_singular_values(&c);
    let threshold = tol.algebraic_rel * scale;
    let singular = || AlgebraError::SingularCorner {
        sigma_min: smin.as_f64(),
        threshold: threshold.as_f64(),
    };
    if smin <= threshold {
        return Err(singular());
    }
    let cinv = c.lu().try_inverse().ok_or_else(singular)?;
    Ok(&b * cinv * b.adjoint())
}

/// Inverse square root of a hermitian positive matrix restricted to ran(p),
/// re-embedded: the unique s = p s p with `s h s = p` for `h = p h p`.
pub fn corner_inv_sqrt<S: RealScalar>(
    h: &CMatrix<S>,
    p: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, AlgebraError> {
    if h.shape() != p.shape() || h.nrows() != h.ncols() {
        return Err(dim_mismatch(h, p));
    }
    check_projection(p, tol)?;
    let b = range_basis(p);
    let m = h.nrows();
    if b.ncols() == 0 {
        return Ok(DMatrix::zeros(m, m));
    }
    let c = hermitian_part(&(b.adjoint() * h * &b));
    let scale = c.norm();
    let eig = c.symmetric_eigen();
    let cut = S::from_double(RANK_THRESHOLD) * scale;
    let mut lo = S::zero();
    for (i, lam) in eig.eigenvalues.iter().enumerate() {
        if i == 0 || *lam < lo {
            lo = *lam;
        }
    }
    if lo <= cut {
        return Err(AlgebraError::SingularCorner {
            sigma_min: lo.as_f64(),
            threshold: cut.as_f64(),
        });
    }
    let d = DMatrix::from_diagonal(
        &eig.eigenvalues
            .map(|lam| Complex::new(S::one() / lam.sqrt(), S::zero())),
    );
    let root = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    Ok(&b * root * b.adjoint())
}

/// Exponential of a skew-hermitian matrix, via the eigendecomposition of the
/// hermitian matrix `-i a`; the result is unitary up to rounding.
pub fn exp_skew<S: RealScalar>(
    a: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, AlgebraError> {
    if a.nrows() != a.ncols() {
        return Err(dim_mismatch(a, a));
    }
    let res = rel_residual(&a.adjoint(), &(-a));
    if res > tol.algebraic_rel {
        return Err(AlgebraError::NotSkewHermitian {
            residual: res.as_f64(),
        });
    }
    let minus_i = Complex::new(S::zero(), -S::one());
    let h = hermitian_part(&(a * minus_i));
    let eig = h.symmetric_eigen();
    let phases = DMatrix::from_diagonal(
        &eig.eigenvalues
            .map(|th| Complex::new(th.cos(), th.sin())),
    );
    Ok(&eig.eigenvectors * phases * eig.eigenvectors.adjoint())
}

/// Principal logarithm of a unitary matrix: the skew-hermitian a with
/// `exp_skew(a) = u` and eigenphases in (-pi, pi).
///
/// Uses the Cayley transform `t = -i (u - 1)(u + 1)^{-1}`, which is hermitian
/// for unitary u with spectral values tan(theta/2); a hermitian
/// eigendecomposition of t then recovers the phases as `2 atan`. A spectrum
/// point at -1 makes `u + 1` singular, which is exactly the branch cut.
pub fn log_unitary<S: RealScalar>(
    u: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, AlgebraError> {
    if u.nrows() != u.ncols() {
        return Err(dim_mismatch(u, u));
    }
    let m = u.nrows();
    let id = DMatrix::identity(m, m);
    let res = rel_residual(&(u.adjoint() * u), &id);
    if res > tol.algebraic_rel {
        return Err(AlgebraError::NotUnitary {
            residual: res.as_f64(),
        });
    }
    let shifted = u + &id;
    let (lo, _) = extreme_singular_values(&shifted);
    if lo <= tol.algebraic_rel {
        return Err(AlgebraError::BranchCut { margin: lo.as_f64() });
    }
    let x = shifted
        .lu()
        .solve(&(u - &id))
        .ok_or(AlgebraError::NotInvertible)?;
    let minus_i = Complex::new(S::zero(), -S::one());
    let t = hermitian_part(&(x * minus_i));
    let eig = t.symmetric_eigen();
    let two = S::from_double(2.0);
    let d = DMatrix::from_diagonal(
        &eig.eigenvalues
            .map(|lam| Complex::new(S::zero(), two * lam.atan())),
    );
    let a = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    Ok(skew_part(&a))
}

/// General matrix exponential by scaling and squaring with a Taylor tail.
/// Utility for generating well-conditioned group elements `exp(a)`,
/// `||a|| <= 1`; not tuned for large-norm input.
pub fn expm<S: RealScalar>(a: &CMatrix<S>) -> CMatrix<S> {
    let m = a.nrows();
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let mut squarings = 0u32;
    let mut norm = a.norm();
    let quarter = S::from_double(0.25);
    let half = S::from_double(0.5);
    while norm > quarter && squarings < 60 {
        norm *= half;
        squarings += 1;
    }
    let scaled = a.scale(half.powi(squarings as i32));
    let mut sum = id.clone();
    let mut term = id;
    for k in 1..=16 {
        term = (&term * &scaled).scale(S::one() / S::from_double(k as f64));
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream. Identical seeds reproduce identical streams
/// bit-exactly; independent trials should each use [`RandomSource::derive`]
/// with their own index instead of sharing one source.
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for trial `index`.
    pub fn derive(&self, index: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(index ^ 0x6A09_E667_F3BC_C909)))
    }

    /// One standard-normal draw.
    pub fn normal<S: RealScalar>(&mut self) -> S {
        S::standard_normal(&mut self.rng)
    }

    /// One standard complex Gaussian draw (unit variance overall).
    pub fn complex_normal<S: RealScalar>(&mut self) -> Complex<S> {
        let s = S::from_double(std::f64::consts::FRAC_1_SQRT_2);
        Complex::new(self.normal::<S>() * s, self.normal::<S>() * s)
    }

    /// Matrix of independent complex Gaussian entries.
    pub fn gaussian_matrix<S: RealScalar>(&mut self, rows: usize, cols: usize) -> CMatrix<S> {
        DMatrix::from_fn(rows, cols, |_, _| self.complex_normal())
    }

    /// Vector of independent complex Gaussian entries.
    pub fn gaussian_vector<S: RealScalar>(&mut self, n: usize) -> crate::CVector<S> {
        DVector::from_fn(n, |_, _| self.complex_normal())
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Haar-like random unitary: QR of a complex Gaussian matrix with the
/// diagonal of R phase-normalized.
pub fn random_unitary<S: RealScalar>(src: &mut RandomSource, m: usize) -> CMatrix<S> {
    let g: CMatrix<S> = src.gaussian_matrix(m, m);
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    let phases = DVector::from_fn(m, |j, _| {
        let d: Complex<S> = r[(j, j)];
        let n = (d.re * d.re + d.im * d.im).sqrt();
        if n == S::zero() {
            Complex::new(S::one(), S::zero())
        } else {
            d / cre(n)
        }
    });
    q * DMatrix::from_diagonal(&phases)
}

/// Random skew-hermitian matrix scaled to the requested Frobenius norm.
pub fn random_skew<S: RealScalar>(src: &mut RandomSource, m: usize, norm: f64) -> CMatrix<S> {
    let g: CMatrix<S> = src.gaussian_matrix(m, m);
    let a = skew_part(&g);
    let n = a.norm();
    if n == S::zero() {
        return a;
    }
    a.scale(S::from_double(norm) / n)
}

/// Mildly conditioned invertible element `1 + n` with `||n|| = 0.4`.
pub fn random_mild_invertible<S: RealScalar>(src: &mut RandomSource, m: usize) -> CMatrix<S> {
    let g: CMatrix<S> = src.gaussian_matrix(m, m);
    let n = g.norm();
    let id: CMatrix<S> = DMatrix::identity(m, m);
    if n == S::zero() {
        return id;
    }
    id + g.scale(S::from_double(0.4) / n)
}

/// Well-conditioned group element `exp(a)` with `||a|| <= 1`.
pub fn random_group_element<S: RealScalar>(src: &mut RandomSource, m: usize) -> CMatrix<S> {
    let g: CMatrix<S> = src.gaussian_matrix(m, m);
    let n = g.norm();
    let a = if n > S::one() { g.scale(S::one() / n) } else { g };
    expm(&a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;
    use std::f64::consts::PI;

    type M = crate::Matrix64;

    fn tol() -> Tolerance<f64> {
        Tolerance::default()
    }

    #[test]
    fn tolerance_default_is_valid() {
        let t = tol();
        assert!(Tolerance::new(t.algebraic_rel, t.exact_rel, t.transport_rel).is_ok());
        assert!(Tolerance::<f64>::new(1e-12, 1e-9, 1e-6).is_err());
        assert!(Tolerance::<f64>::new(0.0, 1e-9, 1e-6).is_err());
    }

    #[test]
    fn corner_inverse_inverts_the_compression() {
        let g = M::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0, 0.0), c(7.0, 0.0)]));
        let p = M::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]));
        let h = corner_inverse(&g, &p, &tol()).unwrap();
        let expected =
            M::from_diagonal(&nalgebra::DVector::from_vec(vec![c(0.5, 0.0), c(0.0, 0.0)]));
        assert!(is_close(&h, &expected, 1e-14));
    }

    #[test]
    fn corner_inverse_of_identity_is_the_unit_of_the_corner() {
        let mut src = RandomSource::new(11);
        let u: M = random_unitary(&mut src, 5);
        let mut p = M::zeros(5, 5);
        for j in 0..2 {
            p[(j, j)] = c(1.0, 0.0);
        }
        let p = &u * p * u.adjoint();
        let id = M::identity(5, 5);
        let h = corner_inverse(&id, &p, &tol()).unwrap();
        assert!(is_close(&h, &p, 1e-12));
    }

    #[test]
    fn corner_inverse_rejects_zero_corner() {
        let g = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        let p = M::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]));
        match corner_inverse(&g, &p, &tol()) {
            Err(AlgebraError::SingularCorner { .. }) => {}
            other => panic!("expected SingularCorner, got {other:?}"),
        }
    }

    #[test]
    fn corner_inverse_commutes_with_p() {
        let mut src = RandomSource::new(3);
        let g: M = src.gaussian_matrix(6, 6);
        let u: M = random_unitary(&mut src, 6);
        let mut p0 = M::zeros(6, 6);
        for j in 0..3 {
            p0[(j, j)] = c(1.0, 0.0);
        }
        let p = &u * p0 * u.adjoint();
        let h = corner_inverse(&g, &p, &tol()).unwrap();
        assert!(is_close(&(&p * &h), &h, 1e-12));
        assert!(is_close(&(&h * &p), &h, 1e-12));
        let c_ = &p * &g * &p;
        assert!(is_close(&(&h * &c_), &p, 1e-10));
        assert!(is_close(&(&c_ * &h), &p, 1e-10));
    }

    #[test]
    fn exp_skew_matches_rotation_closed_form() {
        let th = PI / 2.0;
        let a = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(-th, 0.0), c(th, 0.0), c(0.0, 0.0)]);
        let u = exp_skew(&a, &tol()).unwrap();
        let expected =
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        assert!(is_close(&u, &expected, 1e-13));
    }

    #[test]
    fn exp_skew_of_zero_is_identity_and_scalar_pi_is_minus_one() {
        let z = M::zeros(3, 3);
        assert!(is_close(&exp_skew(&z, &tol()).unwrap(), &M::identity(3, 3), 1e-15));
        let a = M::from_row_slice(1, 1, &[c(0.0, PI)]);
        let u = exp_skew(&a, &tol()).unwrap();
        assert!(is_close(&u, &M::from_row_slice(1, 1, &[c(-1.0, 0.0)]), 1e-13));
    }

    #[test]
    fn exp_skew_rejects_non_skew_input() {
        let a = M::identity(2, 2);
        assert!(matches!(
            exp_skew(&a, &tol()),
            Err(AlgebraError::NotSkewHermitian { .. })
        ));
    }

    #[test]
    fn log_unitary_inverts_the_rotation() {
        let u = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        let a = log_unitary(&u, &tol()).unwrap();
        let th = PI / 2.0;
        let expected =
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(-th, 0.0), c(th, 0.0), c(0.0, 0.0)]);
        assert!(is_close(&a, &expected, 1e-13));
    }

    #[test]
    fn log_unitary_identity_is_zero_and_minus_one_hits_branch_cut() {
        let a = log_unitary(&M::identity(4, 4), &tol()).unwrap();
        assert!(a.norm() <= 1e-13);
        let neg = M::from_row_slice(1, 1, &[c(-1.0, 0.0)]);
        assert!(matches!(
            log_unitary(&neg, &tol()),
            Err(AlgebraError::BranchCut { .. })
        ));
    }

    #[test]
    fn log_unitary_rejects_non_unitary() {
        let m = M::identity(2, 2).scale(2.0);
        assert!(matches!(
            log_unitary(&m, &tol()),
            Err(AlgebraError::NotUnitary { .. })
        ));
    }

    #[test]
    fn exp_log_round_trip_small_norm() {
        for seed in 0..20 {
            let mut src = RandomSource::new(1000 + seed);
            let m = 2 + (seed as usize % 5);
            let a: M = random_skew(&mut src, m, 0.8);
            let u = exp_skew(&a, &tol()).unwrap();
            let b = log_unitary(&u, &tol()).unwrap();
            assert!(
                rel_residual(&b, &a) <= 1e-8,
                "round trip residual too large at seed {seed}"
            );
        }
    }

    #[test]
    fn random_unitary_is_unitary_and_deterministic() {
        for m in [1usize, 2, 5, 9] {
            let mut src = RandomSource::new(42);
            let u: M = random_unitary(&mut src, m);
            let id = M::identity(m, m);
            assert!((u.adjoint() * &u - &id).norm() <= 1e-12 * m as f64);
            assert!((&u * u.adjoint() - &id).norm() <= 1e-12 * m as f64);
            let mut src2 = RandomSource::new(42);
            let v: M = random_unitary(&mut src2, m);
            assert_eq!(u, v, "same (seed, m) must be bit-identical");
        }
    }

    #[test]
    fn expm_matches_exp_skew_on_skew_input() {
        let mut src = RandomSource::new(7);
        let a: M = random_skew(&mut src, 4, 0.9);
        let u = exp_skew(&a, &tol()).unwrap();
        let v = expm(&a);
        assert!(is_close(&v, &u, 1e-12));
    }

    #[test]
    fn checked_inverse_rejects_singular() {
        let m = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(
            checked_inverse(&m, &tol()),
            Err(AlgebraError::NotInvertible)
        ));
        let mut src = RandomSource::new(5);
        let g: M = random_mild_invertible(&mut src, 4);
        let gi = checked_inverse(&g, &tol()).unwrap();
        assert!(is_close(&(&g * &gi), &M::identity(4, 4), 1e-12));
    }

    #[test]
    fn numeric_rank_counts_projection_rank() {
        let mut src = RandomSource::new(9);
        let u: M = random_unitary(&mut src, 6);
        let mut p0 = M::zeros(6, 6);
        for j in 0..4 {
            p0[(j, j)] = c(1.0, 0.0);
        }
        let p = &u * p0 * u.adjoint();
        assert_eq!(numeric_rank(&p), 4);
        assert_eq!(numeric_rank(&M::zeros(3, 3)), 0);
    }

    #[test]
    fn corner_inv_sqrt_normalizes_the_corner() {
        let v = M::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let p = M::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]));
        let s = corner_inv_sqrt(&(v.adjoint() * &v), &p, &tol()).unwrap();
        let w = &v * s;
        assert!(is_close(&(w.adjoint() * &w), &p, 1e-13));
    }
}
