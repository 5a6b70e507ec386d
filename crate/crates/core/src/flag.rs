//! Flags of idempotents and the operator calculus they induce.
//!
//! A flag is a strictly increasing chain `0 < p_1 < ... < p_n < 1` of
//! idempotents with two-sided order relations. Equivalently (and this is how
//! flags are stored) it is a complete system of mutually orthogonal nonzero
//! idempotent blocks `q_j = p_j - p_{j-1}`, `j = 1..n+1`, summing to the
//! identity. The blocks induce:
//!
//! * the diagonal truncation `x -> sum_j q_j x q_j` (block-diagonal part),
//! * the projection `a -> sum_j q_j a (1 - p_{j-1})` onto the
//!   block-upper-triangular algebra along the strictly lower space,
//! * triangular subspaces/groups (block upper, strictly upper, unipotent,
//!   and their lower counterparts) with cheap membership residuals,
//! * a block LDU factorization `g = L M U` over the chain, and
//! * the invertible-group action on flags by conjugation.

use crate::algebra::{
    checked_inverse, dim_mismatch, random_mild_invertible, random_unitary, rel_residual,
    AlgebraError, RandomSource, Tolerance,
};
use crate::idempotent::{
    coordinate_projection, orthogonalize, range_basis, Idempotent, IdempotentError,
    OrthoProjection,
};
use crate::scalar::RealScalar;
use crate::CMatrix;
use nalgebra::DMatrix;
use std::ops::Deref;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlagError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Idempotent(#[from] IdempotentError),
    #[error("projections are not an increasing chain of idempotents (block {index}, residual {residual:.3e})")]
    NotAChain { index: usize, residual: f64 },
    #[error("chain is degenerate: block {index} vanishes (consecutive projections coincide)")]
    Degenerate { index: usize },
    #[error("blocks are not a complete orthogonal system ({kind} at block {index}, residual {residual:.3e})")]
    NotOrthogonalSystem {
        kind: &'static str,
        index: usize,
        residual: f64,
    },
    #[error("matrix has a nonzero block-diagonal part (residual {residual:.3e})")]
    NotInKernel { residual: f64 },
    #[error("element is outside the factorization domain: a corner compression is singular (sigma_min {sigma_min:.3e} <= {threshold:.3e})")]
    NotInOmega { sigma_min: f64, threshold: f64 },
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
}

enum SystemIssue {
    ZeroBlock { index: usize },
    Orthogonality { index: usize, residual: f64 },
    Completeness { residual: f64 },
}

/// Validate that `blocks` is a complete system of mutually orthogonal
/// nonzero idempotents: `q_j q_k = δ_jk q_j` and `Σ q_j = 1`, all within
/// `exact_rel`.
fn validate_system<S: RealScalar>(
    blocks: &[CMatrix<S>],
    tol: &Tolerance<S>,
) -> Result<(), SystemIssue> {
    let m = blocks[0].nrows();
    for (j, q) in blocks.iter().enumerate() {
        if q.norm() <= tol.exact_rel {
            return Err(SystemIssue::ZeroBlock { index: j + 1 });
        }
    }
    let mut worst = S::zero();
    let mut worst_index = 1usize;
    for (j, qj) in blocks.iter().enumerate() {
        for (k, qk) in blocks.iter().enumerate() {
            let prod = qj * qk;
            let res = if j == k {
                rel_residual(&prod, qj)
            } else {
                prod.norm()
            };
            if res > worst {
                worst = res;
                worst_index = j + 1;
            }
        }
    }
    if worst > tol.exact_rel {
        return Err(SystemIssue::Orthogonality {
            index: worst_index,
            residual: worst.as_f64(),
        });
    }
    let mut sum = DMatrix::zeros(m, m);
    for q in blocks {
        sum += q;
    }
    let res = rel_residual(&sum, &DMatrix::identity(m, m));
    if res > tol.exact_rel {
        return Err(SystemIssue::Completeness {
            residual: res.as_f64(),
        });
    }
    Ok(())
}

/// A strictly increasing chain of idempotents, stored through its block
/// system. The canonical data are the blocks; the chain projections are
/// their prefix sums.
#[derive(Clone, Debug, PartialEq)]
pub struct Flag<S: RealScalar> {
    dim: usize,
    blocks: Vec<CMatrix<S>>,
    projections: Vec<CMatrix<S>>,
}

impl<S: RealScalar> Flag<S> {
    /// Build from blocks assumed valid (callers must have validated).
    pub(crate) fn from_validated_blocks(blocks: Vec<CMatrix<S>>) -> Self {
        debug_assert!(blocks.len() >= 2);
        let dim = blocks[0].nrows();
        let n = blocks.len() - 1;
        let mut projections = Vec::with_capacity(n);
        let mut acc: CMatrix<S> = DMatrix::zeros(dim, dim);
        for q in &blocks[..n] {
            acc += q;
            projections.push(acc.clone());
        }
        Self {
            dim,
            blocks,
            projections,
        }
    }

    /// Ambient matrix dimension m.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of proper chain projections n (the flag length).
    pub fn steps(&self) -> usize {
        self.projections.len()
    }

    /// The blocks `q_1, ..., q_{n+1}`.
    pub fn blocks(&self) -> &[CMatrix<S>] {
        &self.blocks
    }

    /// The chain projections `p_1, ..., p_n` (prefix sums of the blocks).
    pub fn projections(&self) -> &[CMatrix<S>] {
        &self.projections
    }

    /// The complementary flag `(1 - p_n, ..., 1 - p_1)`: same blocks in
    /// reverse order.
    pub fn complement(&self) -> Self {
        let mut rev = self.blocks.clone();
        rev.reverse();
        Self::from_validated_blocks(rev)
    }
}

/// A flag whose projections are all self-adjoint: the canonical
/// representative of its orbit, and the kind of point frame transport and
/// bundle constructions work with.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoFlag<S: RealScalar> {
    inner: Flag<S>,
}

impl<S: RealScalar> OrthoFlag<S> {
    /// Validate self-adjointness of every block (hence of every projection).
    pub fn new(flag: Flag<S>, tol: &Tolerance<S>) -> Result<Self, FlagError> {
        for q in flag.blocks() {
            let res = rel_residual(&q.adjoint(), q);
            if res > tol.exact_rel {
                return Err(IdempotentError::NotOrthoProjection {
                    residual: res.as_f64(),
                }
                .into());
            }
        }
        Ok(Self { inner: flag })
    }

    pub(crate) fn new_unchecked(flag: Flag<S>) -> Self {
        Self { inner: flag }
    }

    pub fn as_flag(&self) -> &Flag<S> {
        &self.inner
    }

    pub fn into_flag(self) -> Flag<S> {
        self.inner
    }

    /// Complement of an orthogonal flag is orthogonal.
    pub fn complement(&self) -> Self {
        Self {
            inner: self.inner.complement(),
        }
    }
}

impl<S: RealScalar> Deref for OrthoFlag<S> {
    type Target = Flag<S>;

    fn deref(&self) -> &Flag<S> {
        &self.inner
    }
}

/// Decomposition of an arbitrary element into strictly lower, strictly
/// upper, and block-diagonal parts with respect to a flag.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangularSplit<S: RealScalar> {
    /// Strictly lower block-triangular component.
    pub lower: CMatrix<S>,
    /// Strictly upper block-triangular component.
    pub upper: CMatrix<S>,
    /// Block-diagonal component (the diagonal truncation of the input).
    pub diagonal: CMatrix<S>,
}

/// Block LDU factorization of an invertible element along a flag:
/// `lower * middle * upper` with `lower` lower unipotent, `middle`
/// block-diagonal invertible, `upper` upper unipotent.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagFactorization<S: RealScalar> {
    pub lower: CMatrix<S>,
    pub middle: CMatrix<S>,
    pub upper: CMatrix<S>,
}

/// Subspaces and groups attached to a flag, for membership residuals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// Block-diagonal algebra: everything commuting with the chain.
    D,
    /// Block upper-triangular algebra.
    Delta,
    /// Block lower-triangular algebra.
    DeltaHat,
    /// Upper unipotent group (identity plus strictly upper).
    N,
    /// Lower unipotent group.
    NHat,
    /// Strictly upper block-triangular subspace.
    Tn,
    /// Strictly lower block-triangular subspace.
    TnHat,
    /// Kernel of the diagonal truncation (vanishing block diagonal).
    KerPhi,
}

fn check_square_match<S: RealScalar>(flag: &Flag<S>, x: &CMatrix<S>) -> Result<(), FlagError> {
    if x.nrows() != flag.dim() || x.ncols() != flag.dim() {
        return Err(dim_mismatch(x, &flag.blocks()[0]).into());
    }
    Ok(())
}

/// Validate a chain of idempotents and build the flag.
///
/// The chain must be strictly increasing with two-sided order relations;
/// equivalently the difference blocks must form a complete orthogonal
/// system. `Degenerate` reports a repeated projection, `NotAChain` any other
/// failure of the block relations.
pub fn make_flag<S: RealScalar>(
    projections: &[Idempotent<S>],
    tol: &Tolerance<S>,
) -> Result<Flag<S>, FlagError> {
    assert!(!projections.is_empty(), "a flag needs at least one projection");
    let m = projections[0].dim();
    for p in projections {
        if p.dim() != m {
            return Err(dim_mismatch(p.value(), projections[0].value()).into());
        }
    }
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let mut blocks = Vec::with_capacity(projections.len() + 1);
    let mut prev: CMatrix<S> = DMatrix::zeros(m, m);
    for p in projections {
        blocks.push(p.value() - &prev);
        prev = p.value().clone();
    }
    blocks.push(id - &prev);
    match validate_system(&blocks, tol) {
        Ok(()) => Ok(Flag::from_validated_blocks(blocks)),
        Err(SystemIssue::ZeroBlock { index }) => Err(FlagError::Degenerate { index }),
        Err(SystemIssue::Orthogonality { index, residual }) => {
            Err(FlagError::NotAChain { index, residual })
        }
        Err(SystemIssue::Completeness { residual }) => Err(FlagError::NotAChain {
            index: projections.len() + 1,
            residual,
        }),
    }
}

/// Validate an orthogonal chain and build the flag.
pub fn make_ortho_flag<S: RealScalar>(
    projections: &[OrthoProjection<S>],
    tol: &Tolerance<S>,
) -> Result<OrthoFlag<S>, FlagError> {
    let plain: Vec<Idempotent<S>> = projections.iter().map(|p| p.as_idempotent()).collect();
    OrthoFlag::new(make_flag(&plain, tol)?, tol)
}

/// Build the flag whose chain projections are the prefix sums of a complete
/// orthogonal system of at least two blocks. Inverse of [`alpha_inverse`];
/// both round trips are bit-exact.
pub fn alpha<S: RealScalar>(
    system: &[Idempotent<S>],
    tol: &Tolerance<S>,
) -> Result<Flag<S>, FlagError> {
    if system.len() < 2 {
        return Err(FlagError::NotOrthogonalSystem {
            kind: "too few blocks",
            index: system.len(),
            residual: 0.0,
        });
    }
    let m = system[0].dim();
    for q in system {
        if q.dim() != m {
            return Err(dim_mismatch(q.value(), system[0].value()).into());
        }
    }
    let blocks: Vec<CMatrix<S>> = system.iter().map(|q| q.value().clone()).collect();
    match validate_system(&blocks, tol) {
        Ok(()) => Ok(Flag::from_validated_blocks(blocks)),
        Err(SystemIssue::ZeroBlock { index }) => Err(FlagError::NotOrthogonalSystem {
            kind: "zero block",
            index,
            residual: 0.0,
        }),
        Err(SystemIssue::Orthogonality { index, residual }) => {
            Err(FlagError::NotOrthogonalSystem {
                kind: "orthogonality",
                index,
                residual,
            })
        }
        Err(SystemIssue::Completeness { residual }) => Err(FlagError::NotOrthogonalSystem {
            kind: "completeness",
            index: blocks.len(),
            residual,
        }),
    }
}

/// The block system of a flag, returned verbatim as stored.
pub fn alpha_inverse<S: RealScalar>(flag: &Flag<S>) -> Vec<Idempotent<S>> {
    flag.blocks()
        .iter()
        .map(|q| Idempotent::new_unchecked(q.clone()))
        .collect()
}

fn block_truncate<S: RealScalar>(blocks: &[CMatrix<S>], x: &CMatrix<S>) -> CMatrix<S> {
    let m = x.nrows();
    let mut acc: CMatrix<S> = DMatrix::zeros(m, m);
    for q in blocks {
        acc += q * x * q;
    }
    acc
}

/// Block-diagonal part of `x` with respect to the flag: `sum_j q_j x q_j`.
/// A linear idempotent map whose range is the commutant of the chain.
pub fn diagonal_truncation<S: RealScalar>(
    flag: &Flag<S>,
    x: &CMatrix<S>,
) -> Result<CMatrix<S>, FlagError> {
    check_square_match(flag, x)?;
    Ok(block_truncate(flag.blocks(), x))
}

/// Block-diagonal compression `sum_j q_j a q_j` straight from an orthogonal
/// system; agrees bit-for-bit with `diagonal_truncation(alpha(q), a)`.
pub fn cpr_theta<S: RealScalar>(
    system: &[Idempotent<S>],
    a: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, FlagError> {
    assert!(!system.is_empty(), "empty orthogonal system");
    let blocks: Vec<CMatrix<S>> = system.iter().map(|q| q.value().clone()).collect();
    if let Err(issue) = validate_system(&blocks, tol) {
        return Err(match issue {
            SystemIssue::ZeroBlock { index } => FlagError::NotOrthogonalSystem {
                kind: "zero block",
                index,
                residual: 0.0,
            },
            SystemIssue::Orthogonality { index, residual } => FlagError::NotOrthogonalSystem {
                kind: "orthogonality",
                index,
                residual,
            },
            SystemIssue::Completeness { residual } => FlagError::NotOrthogonalSystem {
                kind: "completeness",
                index: blocks.len(),
                residual,
            },
        });
    }
    if a.nrows() != blocks[0].nrows() || a.ncols() != blocks[0].ncols() {
        return Err(dim_mismatch(a, &blocks[0]).into());
    }
    Ok(block_truncate(&blocks, a))
}

/// Projection `a -> sum_j q_j a (1 - p_{j-1})` onto the block
/// upper-triangular algebra; its kernel is the strictly lower subspace, and
/// it fixes the identity.
pub fn canonical_projection_e<S: RealScalar>(
    flag: &Flag<S>,
    a: &CMatrix<S>,
) -> Result<CMatrix<S>, FlagError> {
    check_square_match(flag, a)?;
    let m = flag.dim();
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let mut acc: CMatrix<S> = DMatrix::zeros(m, m);
    for (j, q) in flag.blocks().iter().enumerate() {
        let phat = if j == 0 {
            id.clone()
        } else {
            &id - &flag.projections()[j - 1]
        };
        acc += q * a * phat;
    }
    Ok(acc)
}

/// Maximum raw Frobenius residual of the defining relations of `space` at
/// `x`. Zero means exact membership; callers own the tolerance policy.
pub fn membership<S: RealScalar>(
    flag: &Flag<S>,
    x: &CMatrix<S>,
    space: Space,
) -> Result<S, FlagError> {
    check_square_match(flag, x)?;
    let m = flag.dim();
    let n = flag.steps();
    let id: CMatrix<S> = DMatrix::identity(m, m);
    // Extended chain p_0 = 0, p_1, ..., p_n, p_{n+1} = 1 and complements.
    let mut projs: Vec<CMatrix<S>> = Vec::with_capacity(n + 2);
    projs.push(DMatrix::zeros(m, m));
    projs.extend(flag.projections().iter().cloned());
    projs.push(id.clone());
    let phats: Vec<CMatrix<S>> = projs.iter().map(|p| &id - p).collect();
    let mut worst = S::zero();
    let mut record = |r: S| {
        if r > worst {
            worst = r;
        }
    };
    match space {
        Space::D => {
            for p in &projs[1..=n] {
                record((x * p - p * x).norm());
            }
        }
        Space::Delta => {
            for j in 1..=n {
                record((&phats[j] * x * &projs[j]).norm());
            }
        }
        Space::DeltaHat => {
            for j in 1..=n {
                record((&projs[j] * x * &phats[j]).norm());
            }
        }
        Space::N => {
            for j in 1..=n + 1 {
                record((&phats[j - 1] * x * &projs[j] - &flag.blocks()[j - 1]).norm());
            }
        }
        Space::NHat => {
            for j in 1..=n + 1 {
                record((&projs[j] * x * &phats[j - 1] - &flag.blocks()[j - 1]).norm());
            }
        }
        Space::Tn => {
            for j in 1..=n + 1 {
                record((&phats[j - 1] * x * &projs[j]).norm());
            }
        }
        Space::TnHat => {
            for j in 1..=n + 1 {
                record((&projs[j] * x * &phats[j - 1]).norm());
            }
        }
        Space::KerPhi => {
            record(block_truncate(flag.blocks(), x).norm());
        }
    }
    Ok(worst)
}

/// Split an element with vanishing block diagonal into its strictly lower
/// and strictly upper parts: returns `(y, z)` with `x = y + z`,
/// `y` strictly lower, `z` strictly upper.
pub fn kernel_split<S: RealScalar>(
    flag: &Flag<S>,
    x: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<(CMatrix<S>, CMatrix<S>), FlagError> {
    check_square_match(flag, x)?;
    let residual = block_truncate(flag.blocks(), x).norm();
    if residual > tol.algebraic_rel * (S::one() + x.norm()) {
        return Err(FlagError::NotInKernel {
            residual: residual.as_f64(),
        });
    }
    let m = flag.dim();
    let mut y: CMatrix<S> = DMatrix::zeros(m, m);
    let mut z: CMatrix<S> = DMatrix::zeros(m, m);
    for j in 1..flag.blocks().len() {
        let q = &flag.blocks()[j];
        let p_prev = &flag.projections()[j - 1];
        y += q * x * p_prev;
        z += p_prev * x * q;
    }
    Ok((y, z))
}

/// Full decomposition of `x` into strictly lower + strictly upper +
/// block-diagonal parts.
pub fn triangular_split<S: RealScalar>(
    flag: &Flag<S>,
    x: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<TriangularSplit<S>, FlagError> {
    check_square_match(flag, x)?;
    let diagonal = block_truncate(flag.blocks(), x);
    let (lower, upper) = kernel_split(flag, &(x - &diagonal), tol)?;
    Ok(TriangularSplit {
        lower,
        upper,
        diagonal,
    })
}

/// Inverse of the compression `p g p` inside the (possibly oblique) corner
/// `p A p` for an idempotent `p`: returns h with `h = p h p` and
/// `h (p g p) = (p g p) h = p`. Reduces to the hermitian corner inverse when
/// p is self-adjoint.
fn corner_solve<S: RealScalar>(
    g: &CMatrix<S>,
    p: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, FlagError> {
    let m = g.nrows();
    let basis = range_basis(p);
    if basis.ncols() == 0 {
        return Ok(DMatrix::zeros(m, m));
    }
    // Coordinates of the compression on ran(p) in the orthonormal basis.
    let c = basis.adjoint() * p * g * &basis;
    let scale = c.norm();
    let sv = c.singular_values();
    let mut smin = S::zero();
    for (i, s) in sv.iter().enumerate() {
        if i == 0 || *s < smin {
            smin = *s;
        }
    }
    let threshold = tol.algebraic_rel * scale;
    let singular = || FlagError::NotInOmega {
        sigma_min: smin.as_f64(),
        threshold: threshold.as_f64(),
    };
    if smin <= threshold {
        return Err(singular());
    }
    let cinv = c.lu().try_inverse().ok_or_else(singular)?;
    Ok(&basis * cinv * basis.adjoint() * p)
}

/// One descent step of the block LDU recursion, peeling the top projection:
/// with `p` the largest chain projection, `h = (pgp)^{-1}` in the corner,
/// and `e` the current unit,
///
/// `g = (e + (e-p) g h) * (pgp + (g - ghg)) * (e + h g (e-p))`
///
/// where `g - ghg` is supported in the complementary corner; the middle
/// factor's `pgp` part is then factorized recursively over the shorter
/// chain inside `p A p`.
/// The three factors produced by one descent: lower, block-diagonal, upper.
type LmuParts<S> = (CMatrix<S>, CMatrix<S>, CMatrix<S>);

fn lmu_descend_top<S: RealScalar>(
    projs: &[CMatrix<S>],
    g: &CMatrix<S>,
    e: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<LmuParts<S>, FlagError> {
    let Some(p) = projs.last() else {
        return Ok((e.clone(), g.clone(), e.clone()));
    };
    let h = corner_solve(g, p, tol)?;
    let ehat = e - p;
    let gh = g * &h;
    let hg = &h * g;
    let l0 = e + &ehat * &gh;
    let u0 = e + &hg * &ehat;
    let r = g - &gh * g;
    let core = p * g * p;
    let (l1, m1, u1) = lmu_descend_top(&projs[..projs.len() - 1], &core, p, tol)?;
    Ok((l0 * (l1 + &ehat), m1 + r, (u1 + &ehat) * u0))
}

/// Same block identity entered from the bottom projection: the corner part
/// `pgp` is final and the complementary part `g - ghg` is factorized
/// recursively over the translated chain `(p_2 - p_1, ..., p_n - p_1)`
/// inside `(e-p) A (e-p)`.
fn lmu_descend_bottom<S: RealScalar>(
    projs: &[CMatrix<S>],
    g: &CMatrix<S>,
    e: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<LmuParts<S>, FlagError> {
    let Some(p) = projs.first() else {
        return Ok((e.clone(), g.clone(), e.clone()));
    };
    let h = corner_solve(g, p, tol)?;
    let ehat = e - p;
    let gh = g * &h;
    let hg = &h * g;
    let l0 = e + &ehat * &gh;
    let u0 = e + &hg * &ehat;
    let r = g - &gh * g;
    let core = p * g * p;
    let translated: Vec<CMatrix<S>> = projs[1..].iter().map(|pj| pj - p).collect();
    let (l1, m1, u1) = lmu_descend_bottom(&translated, &r, &ehat, tol)?;
    Ok((l0 * (l1 + p), core + m1, (u1 + p) * u0))
}

fn check_factorize_input<S: RealScalar>(
    flag: &Flag<S>,
    g: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<(), FlagError> {
    check_square_match(flag, g)?;
    let sv = g.singular_values();
    let mut lo = S::zero();
    let mut hi = S::zero();
    for (i, s) in sv.iter().enumerate() {
        if i == 0 || *s < lo {
            lo = *s;
        }
        if i == 0 || *s > hi {
            hi = *s;
        }
    }
    if lo <= tol.algebraic_rel * hi {
        return Err(AlgebraError::NotInvertible.into());
    }
    Ok(())
}

/// Block LDU factorization `g = lower * middle * upper` along the flag:
/// `lower` lower unipotent, `middle` block-diagonal and invertible, `upper`
/// upper unipotent. Requires every compression `p_j g p_j` to be invertible
/// in its corner (otherwise `NotInOmega`). Descends from the top projection.
pub fn flag_factorize<S: RealScalar>(
    flag: &Flag<S>,
    g: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<FlagFactorization<S>, FlagError> {
    check_factorize_input(flag, g, tol)?;
    let e: CMatrix<S> = DMatrix::identity(flag.dim(), flag.dim());
    let (lower, middle, upper) = lmu_descend_top(flag.projections(), g, &e, tol)?;
    Ok(FlagFactorization {
        lower,
        middle,
        upper,
    })
}

/// Same factorization computed in the opposite descent order (peeling the
/// bottom projection first). The factorization is unique, so this must agree
/// with [`flag_factorize`] up to rounding — useful as an independent
/// cross-check.
pub fn flag_factorize_backward<S: RealScalar>(
    flag: &Flag<S>,
    g: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<FlagFactorization<S>, FlagError> {
    check_factorize_input(flag, g, tol)?;
    let e: CMatrix<S> = DMatrix::identity(flag.dim(), flag.dim());
    let (lower, middle, upper) = lmu_descend_bottom(flag.projections(), g, &e, tol)?;
    Ok(FlagFactorization {
        lower,
        middle,
        upper,
    })
}

/// The raw conjugated chain `(g p_j g^{-1})_j` before re-canonicalization.
pub fn conjugate_chain<S: RealScalar>(
    g: &CMatrix<S>,
    flag: &Flag<S>,
    tol: &Tolerance<S>,
) -> Result<Vec<CMatrix<S>>, FlagError> {
    if g.nrows() != flag.dim() || g.ncols() != flag.dim() {
        return Err(dim_mismatch(g, &flag.blocks()[0]).into());
    }
    let ginv = checked_inverse(g, tol)?;
    Ok(flag
        .projections()
        .iter()
        .map(|p| g * p * &ginv)
        .collect())
}

/// Action of an invertible element on a flag orbit: conjugate the chain and
/// return the canonical orthogonal representative of the result.
pub fn flag_action<S: RealScalar>(
    g: &CMatrix<S>,
    flag: &OrthoFlag<S>,
    tol: &Tolerance<S>,
) -> Result<OrthoFlag<S>, FlagError> {
    let conjugated = conjugate_chain(g, flag, tol)?;
    let mut projections = Vec::with_capacity(conjugated.len());
    for c in conjugated {
        projections.push(orthogonalize(&Idempotent::new_unchecked(c), tol)?);
    }
    make_ortho_flag(&projections, tol)
}

/// The k-th chain projection (1-based), a single Grassmannian point.
pub fn pr_k<S: RealScalar>(flag: &OrthoFlag<S>, k: usize) -> Result<OrthoProjection<S>, FlagError> {
    let n = flag.steps();
    if k == 0 || k > n {
        return Err(FlagError::IndexOutOfRange { index: k, len: n });
    }
    Ok(OrthoProjection::new_unchecked(
        flag.projections()[k - 1].clone(),
    ))
}

/// `steps` distinct ranks drawn from `1..dim`, sorted increasingly.
pub fn random_ranks(src: &mut RandomSource, dim: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps < dim, "need 1 <= steps < dim");
    let mut pool: Vec<usize> = (1..dim).collect();
    for i in 0..steps {
        let j = i + src.index(pool.len() - i);
        pool.swap(i, j);
    }
    let mut ranks = pool[..steps].to_vec();
    ranks.sort_unstable();
    ranks
}

/// Random orthogonal flag with the given chain ranks: blocks are spanned by
/// consecutive column groups of one random unitary.
pub fn random_ortho_flag<S: RealScalar>(
    src: &mut RandomSource,
    dim: usize,
    ranks: &[usize],
) -> OrthoFlag<S> {
    assert!(!ranks.is_empty() && ranks.windows(2).all(|w| w[0] < w[1]));
    assert!(ranks[0] >= 1 && ranks[ranks.len() - 1] < dim);
    let u: CMatrix<S> = random_unitary(src, dim);
    let mut blocks = Vec::with_capacity(ranks.len() + 1);
    let mut prev = 0usize;
    for &r in ranks.iter().chain(std::iter::once(&dim)) {
        let cols = u.columns(prev, r - prev);
        let b = cols * cols.adjoint();
        blocks.push((b.adjoint() + b).scale(S::from_double(0.5)));
        prev = r;
    }
    OrthoFlag::new_unchecked(Flag::from_validated_blocks(blocks))
}

/// Random (generally oblique) flag with the given chain ranks: a coordinate
/// flag conjugated by a mild similarity.
pub fn random_flag<S: RealScalar>(
    src: &mut RandomSource,
    dim: usize,
    ranks: &[usize],
) -> Flag<S> {
    assert!(!ranks.is_empty() && ranks.windows(2).all(|w| w[0] < w[1]));
    assert!(ranks[0] >= 1 && ranks[ranks.len() - 1] < dim);
    let s: CMatrix<S> = random_mild_invertible(src, dim);
    let sinv = s
        .clone()
        .lu()
        .try_inverse()
        .expect("mild perturbations of the identity are invertible");
    let mut blocks = Vec::with_capacity(ranks.len() + 1);
    let mut prev = 0usize;
    for &r in ranks.iter().chain(std::iter::once(&dim)) {
        let e: CMatrix<S> = coordinate_projection::<S>(dim, r) - coordinate_projection::<S>(dim, prev);
        blocks.push(&s * e * &sinv);
        prev = r;
    }
    Flag::from_validated_blocks(blocks)
}

/// Random element of the strictly upper subspace of a flag.
pub fn random_strictly_upper<S: RealScalar>(
    src: &mut RandomSource,
    flag: &Flag<S>,
) -> CMatrix<S> {
    let m = flag.dim();
    let x: CMatrix<S> = src.gaussian_matrix(m, m);
    let mut z: CMatrix<S> = DMatrix::zeros(m, m);
    let blocks = flag.blocks();
    for j in 0..blocks.len() {
        for k in (j + 1)..blocks.len() {
            z += &blocks[j] * &x * &blocks[k];
        }
    }
    z
}

/// Random element of the strictly lower subspace of a flag.
pub fn random_strictly_lower<S: RealScalar>(
    src: &mut RandomSource,
    flag: &Flag<S>,
) -> CMatrix<S> {
    let m = flag.dim();
    let x: CMatrix<S> = src.gaussian_matrix(m, m);
    let mut y: CMatrix<S> = DMatrix::zeros(m, m);
    let blocks = flag.blocks();
    for j in 0..blocks.len() {
        for k in (j + 1)..blocks.len() {
            y += &blocks[k] * &x * &blocks[j];
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{is_close, random_group_element};
    use crate::scalar::c;
    use proptest::prelude::*;

    type M = crate::Matrix64;

    fn tol() -> Tolerance<f64> {
        Tolerance::default()
    }

    fn idem(m: M) -> Idempotent<f64> {
        Idempotent::new(m, &tol()).unwrap()
    }

    fn diag(entries: &[f64]) -> M {
        let m = entries.len();
        M::from_fn(m, m, |i, j| {
            if i == j {
                c(entries[i], 0.0)
            } else {
                c(0.0, 0.0)
            }
        })
    }

    fn coordinate_flag_m2() -> Flag<f64> {
        make_flag(&[idem(diag(&[1.0, 0.0]))], &tol()).unwrap()
    }

    fn coordinate_flag_m3() -> Flag<f64> {
        make_flag(
            &[idem(diag(&[1.0, 0.0, 0.0])), idem(diag(&[1.0, 1.0, 0.0]))],
            &tol(),
        )
        .unwrap()
    }

    fn sample_flag(seed: u64, dim: usize, steps: usize) -> Flag<f64> {
        let mut src = RandomSource::new(seed);
        let ranks = random_ranks(&mut src, dim, steps.min(dim - 1));
        random_flag(&mut src, dim, &ranks)
    }

    #[test]
    fn make_flag_builds_coordinate_blocks() {
        let flag = coordinate_flag_m3();
        assert_eq!(flag.steps(), 2);
        assert_eq!(flag.blocks()[0], diag(&[1.0, 0.0, 0.0]));
        assert_eq!(flag.blocks()[1], diag(&[0.0, 1.0, 0.0]));
        assert_eq!(flag.blocks()[2], diag(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn make_flag_rejects_repeated_projection() {
        let p = idem(diag(&[1.0, 0.0]));
        assert!(matches!(
            make_flag(&[p.clone(), p], &tol()),
            Err(FlagError::Degenerate { index: 2 })
        ));
    }

    #[test]
    fn make_flag_rejects_unordered_projections() {
        let p = idem(diag(&[1.0, 0.0]));
        let q = idem(diag(&[0.0, 1.0]));
        assert!(matches!(
            make_flag(&[p, q], &tol()),
            Err(FlagError::NotAChain { .. })
        ));
    }

    #[test]
    fn alpha_builds_prefix_sums() {
        let system = [
            idem(diag(&[1.0, 0.0, 0.0])),
            idem(diag(&[0.0, 1.0, 0.0])),
            idem(diag(&[0.0, 0.0, 1.0])),
        ];
        let flag = alpha(&system, &tol()).unwrap();
        assert_eq!(flag.projections()[0], diag(&[1.0, 0.0, 0.0]));
        assert_eq!(flag.projections()[1], diag(&[1.0, 1.0, 0.0]));
    }

    #[test]
    fn alpha_one_step_system() {
        let p = diag(&[1.0, 0.0]);
        let system = [idem(p.clone()), idem(diag(&[0.0, 1.0]))];
        let flag = alpha(&system, &tol()).unwrap();
        assert_eq!(flag.steps(), 1);
        assert_eq!(flag.projections()[0], p);
    }

    #[test]
    fn alpha_rejects_incomplete_system() {
        let system = [idem(diag(&[1.0, 0.0, 0.0])), idem(diag(&[0.0, 1.0, 0.0]))];
        assert!(matches!(
            alpha(&system, &tol()),
            Err(FlagError::NotOrthogonalSystem { .. })
        ));
    }

    #[test]
    fn alpha_round_trips_are_bit_exact() {
        for seed in 0..10u64 {
            let flag = sample_flag(seed, 6, 1 + (seed as usize) % 4);
            let system = alpha_inverse(&flag);
            let rebuilt = alpha(&system, &tol()).unwrap();
            assert_eq!(rebuilt, flag);
            let system_again = alpha_inverse(&rebuilt);
            for (a, b) in system.iter().zip(system_again.iter()) {
                assert_eq!(a.value(), b.value());
            }
        }
    }

    #[test]
    fn truncation_extracts_block_diagonal() {
        let flag = coordinate_flag_m2();
        let x = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        let out = diagonal_truncation(&flag, &x).unwrap();
        assert_eq!(out, diag(&[1.0, 4.0]));

        let id = M::identity(2, 2);
        assert_eq!(diagonal_truncation(&flag, &id).unwrap(), id);

        let flag3 = coordinate_flag_m3();
        let ones = M::from_element(3, 3, c(1.0, 0.0));
        assert_eq!(
            diagonal_truncation(&flag3, &ones).unwrap(),
            M::identity(3, 3)
        );
    }

    #[test]
    fn theta_matches_truncation_bit_for_bit() {
        let mut src = RandomSource::new(77);
        for _ in 0..10 {
            let ranks = random_ranks(&mut src, 4, 2);
            let flag: Flag<f64> = random_flag(&mut src, 4, &ranks);
            let system = alpha_inverse(&flag);
            let a: M = src.gaussian_matrix(4, 4);
            let via_theta = cpr_theta(&system, &a, &tol()).unwrap();
            let via_flag = diagonal_truncation(&alpha(&system, &tol()).unwrap(), &a).unwrap();
            assert_eq!(via_theta, via_flag);
        }
    }

    #[test]
    fn theta_on_coordinate_system() {
        let system = [idem(diag(&[1.0, 0.0])), idem(diag(&[0.0, 1.0]))];
        let a = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        assert_eq!(cpr_theta(&system, &a, &tol()).unwrap(), diag(&[1.0, 4.0]));
        let id = M::identity(2, 2);
        assert_eq!(cpr_theta(&system, &id, &tol()).unwrap(), id);
    }

    #[test]
    fn projection_e_keeps_upper_kills_lower() {
        let flag = coordinate_flag_m2();
        let a = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        let out = canonical_projection_e(&flag, &a).unwrap();
        let expected =
            M::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(4.0, 0.0)]);
        assert_eq!(out, expected);

        let id = M::identity(2, 2);
        assert_eq!(canonical_projection_e(&flag, &id).unwrap(), id);

        let lower = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(5.0, 0.0), c(0.0, 0.0)]);
        assert!(canonical_projection_e(&flag, &lower).unwrap().norm() <= 1e-15);
    }

    #[test]
    fn membership_examples() {
        let flag = coordinate_flag_m2();
        let unitriangular =
            M::from_row_slice(2, 2, &[c(1.0, 0.0), c(5.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(membership(&flag, &unitriangular, Space::N).unwrap() <= 1e-15);

        let id = M::identity(2, 2);
        for space in [Space::N, Space::NHat, Space::D] {
            assert!(membership(&flag, &id, space).unwrap() <= 1e-15);
        }

        let lower = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(5.0, 0.0), c(0.0, 0.0)]);
        assert!(membership(&flag, &lower, Space::Tn).unwrap() > 1.0);
        assert!(membership(&flag, &lower, Space::TnHat).unwrap() <= 1e-15);
        assert!(membership(&flag, &lower, Space::KerPhi).unwrap() <= 1e-15);
    }

    #[test]
    fn kernel_split_example() {
        let flag = coordinate_flag_m2();
        let x = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(0.0, 0.0)]);
        let (y, z) = kernel_split(&flag, &x, &tol()).unwrap();
        assert_eq!(
            y,
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(3.0, 0.0), c(0.0, 0.0)])
        );
        assert_eq!(
            z,
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)])
        );

        let zero = M::zeros(2, 2);
        let (y0, z0) = kernel_split(&flag, &zero, &tol()).unwrap();
        assert_eq!(y0, zero);
        assert_eq!(z0, zero);

        let diag_x = diag(&[1.0, 2.0]);
        assert!(matches!(
            kernel_split(&flag, &diag_x, &tol()),
            Err(FlagError::NotInKernel { .. })
        ));
    }

    #[test]
    fn triangular_split_example_and_fixed_points() {
        let flag = coordinate_flag_m2();
        let x = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)]);
        let split = triangular_split(&flag, &x, &tol()).unwrap();
        assert_eq!(
            split.lower,
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(3.0, 0.0), c(0.0, 0.0)])
        );
        assert_eq!(
            split.upper,
            M::from_row_slice(2, 2, &[c(0.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)])
        );
        assert_eq!(split.diagonal, diag(&[1.0, 4.0]));

        let d = diag(&[5.0, -2.0]);
        let split_d = triangular_split(&flag, &d, &tol()).unwrap();
        assert!(split_d.lower.norm() <= 1e-15);
        assert!(split_d.upper.norm() <= 1e-15);
        assert_eq!(split_d.diagonal, d);
    }

    #[test]
    fn factorize_two_by_two_example() {
        let flag = coordinate_flag_m2();
        let g = M::from_row_slice(2, 2, &[c(2.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)]);
        let f = flag_factorize(&flag, &g, &tol()).unwrap();
        let l_expected =
            M::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.5, 0.0), c(1.0, 0.0)]);
        let u_expected =
            M::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(is_close(&f.lower, &l_expected, 1e-14));
        assert!(is_close(&f.middle, &diag(&[2.0, 0.5]), 1e-14));
        assert!(is_close(&f.upper, &u_expected, 1e-14));
        assert!(is_close(&(&f.lower * &f.middle * &f.upper), &g, 1e-14));

        let id = M::identity(2, 2);
        let fi = flag_factorize(&flag, &id, &tol()).unwrap();
        assert!(is_close(&fi.lower, &id, 1e-14));
        assert!(is_close(&fi.middle, &id, 1e-14));
        assert!(is_close(&fi.upper, &id, 1e-14));

        let swap = M::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        assert!(matches!(
            flag_factorize(&flag, &swap, &tol()),
            Err(FlagError::NotInOmega { .. })
        ));
    }

    #[test]
    fn factorize_descent_orders_agree() {
        for seed in 0..12u64 {
            let mut src = RandomSource::new(900 + seed);
            let dim = 3 + (seed as usize) % 4;
            let steps = 1 + (seed as usize) % (dim - 1).min(3);
            let ranks = random_ranks(&mut src, dim, steps);
            let flag: Flag<f64> = random_flag(&mut src, dim, &ranks);
            let g: M = random_group_element(&mut src, dim);
            let fwd = flag_factorize(&flag, &g, &tol()).unwrap();
            let bwd = flag_factorize_backward(&flag, &g, &tol()).unwrap();
            assert!(is_close(&fwd.lower, &bwd.lower, 1e-10));
            assert!(is_close(&fwd.middle, &bwd.middle, 1e-10));
            assert!(is_close(&fwd.upper, &bwd.upper, 1e-10));
        }
    }

    #[test]
    fn flag_action_identity_and_unitary() {
        let mut src = RandomSource::new(5);
        let ranks = random_ranks(&mut src, 5, 2);
        let flag: OrthoFlag<f64> = random_ortho_flag(&mut src, 5, &ranks);
        let id = M::identity(5, 5);
        let acted = flag_action(&id, &flag, &tol()).unwrap();
        for (a, b) in acted.projections().iter().zip(flag.projections()) {
            assert!(is_close(a, b, 1e-12));
        }

        let u: M = random_unitary(&mut src, 5);
        let acted_u = flag_action(&u, &flag, &tol()).unwrap();
        for (a, p) in acted_u.projections().iter().zip(flag.projections()) {
            let direct = &u * p * u.adjoint();
            assert!(is_close(a, &direct, 1e-11));
        }
    }

    #[test]
    fn upper_unitriangular_fixes_coordinate_flag() {
        let p = OrthoProjection::new(diag(&[1.0, 0.0]), &tol()).unwrap();
        let flag = make_ortho_flag(&[p], &tol()).unwrap();
        let g = M::from_row_slice(2, 2, &[c(1.0, 0.0), c(3.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let acted = flag_action(&g, &flag, &tol()).unwrap();
        for (a, b) in acted.projections().iter().zip(flag.projections()) {
            assert!(is_close(a, b, 1e-12));
        }
    }

    #[test]
    fn pr_k_bounds() {
        let mut src = RandomSource::new(8);
        let ranks = random_ranks(&mut src, 4, 2);
        let flag: OrthoFlag<f64> = random_ortho_flag(&mut src, 4, &ranks);
        assert_eq!(pr_k(&flag, 1).unwrap().value(), &flag.projections()[0]);
        assert_eq!(pr_k(&flag, 2).unwrap().value(), &flag.projections()[1]);
        assert!(matches!(
            pr_k(&flag, 0),
            Err(FlagError::IndexOutOfRange { index: 0, len: 2 })
        ));
        assert!(matches!(
            pr_k(&flag, 3),
            Err(FlagError::IndexOutOfRange { index: 3, len: 2 })
        ));
    }

    #[test]
    fn complement_reverses_blocks() {
        let flag = coordinate_flag_m3();
        let comp = flag.complement();
        assert_eq!(comp.projections()[0], diag(&[0.0, 0.0, 1.0]));
        assert_eq!(comp.projections()[1], diag(&[0.0, 1.0, 1.0]));
        let back = comp.complement();
        assert_eq!(back, flag);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn truncation_is_idempotent_and_complement_stable(
            seed in 0u64..1_000_000,
            dim in 2usize..9,
            steps in 1usize..4,
        ) {
            let flag = sample_flag(seed, dim, steps);
            let mut src = RandomSource::new(seed ^ 0xABCD);
            let x: M = src.gaussian_matrix(dim, dim);
            let t = tol();

            let once = diagonal_truncation(&flag, &x).unwrap();
            let twice = diagonal_truncation(&flag, &once).unwrap();
            prop_assert!(rel_residual(&twice, &once) <= t.exact_rel);

            let via_complement = diagonal_truncation(&flag.complement(), &x).unwrap();
            prop_assert!(rel_residual(&via_complement, &once) <= t.exact_rel);

            prop_assert!(membership(&flag, &once, Space::D).unwrap() <= 1e-10 * (1.0 + x.norm()));
        }

        #[test]
        fn projection_e_properties(
            seed in 0u64..1_000_000,
            dim in 2usize..9,
            steps in 1usize..4,
        ) {
            let flag = sample_flag(seed, dim, steps);
            let mut src = RandomSource::new(seed ^ 0x1234);
            let x: M = src.gaussian_matrix(dim, dim);
            let t = tol();

            let once = canonical_projection_e(&flag, &x).unwrap();
            let twice = canonical_projection_e(&flag, &once).unwrap();
            prop_assert!(rel_residual(&twice, &once) <= t.exact_rel * 10.0);

            // E after the truncation is the truncation.
            let phi = diagonal_truncation(&flag, &x).unwrap();
            let e_phi = canonical_projection_e(&flag, &phi).unwrap();
            prop_assert!(rel_residual(&e_phi, &phi) <= t.exact_rel * 10.0);

            // E - truncation lands in the strictly upper space.
            let upper_part = &once - &phi;
            prop_assert!(
                membership(&flag, &upper_part, Space::Tn).unwrap()
                    <= 1e-12 * (1.0 + x.norm())
            );

            // The strictly lower space is the kernel of E.
            let lower = random_strictly_lower(&mut src, &flag);
            let e_lower = canonical_projection_e(&flag, &lower).unwrap();
            prop_assert!(e_lower.norm() <= 1e-12 * (1.0 + lower.norm()));
        }

        #[test]
        fn kernel_split_reconstructs(
            seed in 0u64..1_000_000,
            dim in 2usize..9,
            steps in 1usize..4,
        ) {
            let flag = sample_flag(seed, dim, steps);
            let mut src = RandomSource::new(seed ^ 0x7777);
            let lower = random_strictly_lower(&mut src, &flag);
            let upper = random_strictly_upper(&mut src, &flag);
            let x = &lower + &upper;

            let (y, z) = kernel_split(&flag, &x, &tol()).unwrap();
            prop_assert!(rel_residual(&(&y + &z), &x) <= 1e-13);
            let scale = 1.0 + x.norm();
            prop_assert!(membership(&flag, &y, Space::TnHat).unwrap() <= 1e-12 * scale);
            prop_assert!(membership(&flag, &z, Space::Tn).unwrap() <= 1e-12 * scale);
            prop_assert!(rel_residual(&y, &lower) <= 1e-11);
            prop_assert!(rel_residual(&z, &upper) <= 1e-11);
        }

        #[test]
        fn factorization_round_trip(
            seed in 0u64..1_000_000,
            dim in 2usize..8,
            steps in 1usize..4,
        ) {
            let steps = steps.min(dim - 1);
            let mut src = RandomSource::new(seed);
            let ranks = random_ranks(&mut src, dim, steps);
            let flag: Flag<f64> = random_flag(&mut src, dim, &ranks);
            let g: M = random_group_element(&mut src, dim);
            match flag_factorize(&flag, &g, &tol()) {
                Ok(f) => {
                    let product = &f.lower * &f.middle * &f.upper;
                    prop_assert!((product - &g).norm() / g.norm() <= 1e-10);
                    let scale = 1.0 + g.norm();
                    prop_assert!(membership(&flag, &f.lower, Space::NHat).unwrap() <= 1e-9 * scale);
                    prop_assert!(membership(&flag, &f.upper, Space::N).unwrap() <= 1e-9 * scale);
                    prop_assert!(membership(&flag, &f.middle, Space::D).unwrap() <= 1e-9 * scale);
                }
                Err(FlagError::NotInOmega { .. }) => {
                    // Rare for well-conditioned group elements; acceptable.
                }
                Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
            }
        }
    }
}
