//! Stiefel-type realizations of flag manifolds and frame transport.
//!
//! A flag with top projection `p_n` can be realized concretely as the orbit
//! of `p_n` under left multiplication by invertible elements: the points are
//! matrices `v = g p_n`, the fiber over a flag is an orbit of the block
//! upper-triangular structure group, and the flag itself is recovered from
//! `v` through the ranges of `v p_1, ..., v p_n` ([`sigma_delta`]). Unitary
//! frames (`v* v = p_n`) form a sub-bundle on which the block-diagonal
//! compression of `u* du` acts as a principal connection form
//! ([`connection_form_omega`]); its kernel — the horizontal subspace — gives
//! parallel transport of frames along curves of orthogonal flags
//! ([`parallel_transport`]) and a covariant derivative of sections of the
//! tautological subbundles ([`covariant_derivative_taut`]).
//!
//! Conventions used throughout:
//!
//! * relative residuals are `||lhs - rhs||_F / (1 + ||rhs||_F)`;
//! * frames are column-unitary matrices acting on the left, so a frame `u`
//!   carries the template flag `delta` to the conjugated flag `u delta u*`;
//! * transported frames are *not* re-unitarized: drift away from unitarity
//!   is part of the error budget the integrator is accountable for.

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

use crate::algebra::{
    corner_inv_sqrt, exp_skew, hermitian_part, log_unitary, numeric_rank, rel_residual,
    AlgebraError, RandomSource, Tolerance,
};
use crate::flag::{
    alpha, diagonal_truncation, flag_factorize, membership, Flag, FlagError, OrthoFlag, Space,
};
use crate::idempotent::{range_basis, Idempotent};
use crate::scalar::RealScalar;
use crate::CMatrix;

/// Errors for the frame-bundle layer.
#[derive(Debug, Error)]
pub enum StiefelError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Flag(#[from] FlagError),
    /// A compression `v p_j` lost rank relative to the chain it came from.
    #[error("rank dropped at chain level {level}: expected {expected}, found {got}")]
    RankDeficient {
        level: usize,
        expected: usize,
        got: usize,
    },
    /// The point matrix has columns outside the range of the top projection.
    #[error("matrix is not supported on the top projection (v p_n != v, residual {residual:.3e})")]
    BadSupport { residual: f64 },
    /// `w* w` is not the top projection.
    #[error("frame is not a partial isometry (w* w != p_n, residual {residual:.3e})")]
    NotPartialIsometry { residual: f64 },
    /// An operation that needs hermitian chain projections got an oblique flag.
    #[error("template flag is not orthogonal (residual {residual:.3e})")]
    TemplateNotOrthogonal { residual: f64 },
    /// The acting element is outside the invertible block upper-triangular group.
    #[error("element is not in the structure group ({reason}, residual {residual:.3e})")]
    NotInStructureGroup { reason: &'static str, residual: f64 },
    /// A claimed tangent datum fails one of its defining identities.
    #[error("not a tangent vector: {what} (residual {residual:.3e})")]
    NotTangent { what: &'static str, residual: f64 },
    /// A fiber vector escapes the subspace it must lie in.
    #[error("vector at level {level} is not in its fiber (residual {residual:.3e})")]
    NotInFiber { level: usize, residual: f64 },
    /// Chain velocities do not come from a single infinitesimal motion.
    #[error("chain velocities are mutually inconsistent (residual {residual:.3e})")]
    InconsistentVelocities { residual: f64 },
    /// A frame does not carry the template flag to the expected flag.
    #[error("frame and flag are incompatible (residual {residual:.3e})")]
    NotCompatible { residual: f64 },
    /// Two flags disagree in shape (step count or a block rank).
    #[error("flag signatures differ at level {level}: {left} vs {right}")]
    SignatureMismatch {
        level: usize,
        left: usize,
        right: usize,
    },
    /// A curve sample moved too far for the transport integrator.
    #[error("curve step {index} is too large for transport (size {size:.3e})")]
    StepTooLarge { index: usize, size: f64 },
    #[error("index {index} out of range for a curve of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Newton iteration cap for one transport step.
const MAX_NEWTON: usize = 25;
/// Raw Frobenius bound on how far consecutive chain projections may move.
const STEP_BOUND: f64 = 0.2;
/// Transport steps are polished to this fraction of `transport_rel` so that
/// downstream difference quotients are not dominated by integrator slack.
const POLISH_FACTOR: f64 = 1e-3;

fn shape_mismatch<S: RealScalar>(a: &CMatrix<S>, rows: usize, cols: usize) -> AlgebraError {
    AlgebraError::DimensionMismatch {
        left_rows: a.nrows(),
        left_cols: a.ncols(),
        right_rows: rows,
        right_cols: cols,
    }
}

/// Rank of an idempotent block, read off its trace.
fn block_rank<S: RealScalar>(q: &CMatrix<S>) -> usize {
    q.trace().re.as_f64().round().max(0.0) as usize
}

/// Cumulative chain ranks `r_1 < ... < r_n` of a flag.
fn chain_ranks<S: RealScalar>(flag: &Flag<S>) -> Vec<usize> {
    let mut out = Vec::with_capacity(flag.steps());
    let mut acc = 0usize;
    for q in &flag.blocks()[..flag.steps()] {
        acc += block_rank(q);
        out.push(acc);
    }
    out
}

fn check_ortho_template<S: RealScalar>(
    flag: &Flag<S>,
    tol: &Tolerance<S>,
) -> Result<(), StiefelError> {
    let mut worst = S::zero();
    for p in flag.projections() {
        let r = rel_residual(&p.adjoint(), p);
        if r > worst {
            worst = r;
        }
    }
    if worst > tol.exact_rel {
        return Err(StiefelError::TemplateNotOrthogonal {
            residual: worst.as_f64(),
        });
    }
    Ok(())
}

/// Largest relative residual between corresponding chain projections.
///
/// Panics if the two flags do not even share dimension and step count; use
/// the typed errors of the calling operations for user-facing validation.
pub fn flag_residual<S: RealScalar>(a: &Flag<S>, b: &Flag<S>) -> S {
    assert_eq!(a.dim(), b.dim(), "flag dimensions differ");
    assert_eq!(a.steps(), b.steps(), "flag step counts differ");
    let mut worst = S::zero();
    for (pa, pb) in a.projections().iter().zip(b.projections()) {
        let r = rel_residual(pa, pb);
        if r > worst {
            worst = r;
        }
    }
    worst
}

/// The flag carried by a frame: every block conjugated by `u` and
/// re-symmetrized. The input blocks are hermitian, so the result is again an
/// orthogonal flag.
pub fn conjugate_flag<S: RealScalar>(template: &OrthoFlag<S>, u: &CMatrix<S>) -> OrthoFlag<S> {
    let blocks = template
        .blocks()
        .iter()
        .map(|q| hermitian_part(&(u * q * u.adjoint())))
        .collect();
    OrthoFlag::new_unchecked(Flag::from_validated_blocks(blocks))
}

/// A point of the matrix Stiefel realization: `v = g p_n` for some
/// invertible `g`, stored together with the template flag whose top
/// projection `p_n` it is modeled on.
#[derive(Clone, Debug)]
pub struct StiefelPoint<S: RealScalar> {
    v: CMatrix<S>,
    template: Flag<S>,
}

impl<S: RealScalar> StiefelPoint<S> {
    /// Validate that `v` is supported on the top projection (`v p_n = v`
    /// within `exact_rel`) and has the full chain rank `r_n`.
    pub fn new(
        v: CMatrix<S>,
        template: Flag<S>,
        tol: &Tolerance<S>,
    ) -> Result<Self, StiefelError> {
        let m = template.dim();
        if v.nrows() != m || v.ncols() != m {
            return Err(shape_mismatch(&v, m, m).into());
        }
        let pn = &template.projections()[template.steps() - 1];
        let support = rel_residual(&(&v * pn), &v);
        if support > tol.exact_rel {
            return Err(StiefelError::BadSupport {
                residual: support.as_f64(),
            });
        }
        let expected = *chain_ranks(&template).last().expect("nonempty chain");
        let got = numeric_rank(&v);
        if got != expected {
            return Err(StiefelError::RankDeficient {
                level: template.steps(),
                expected,
                got,
            });
        }
        Ok(Self { v, template })
    }

    pub fn v(&self) -> &CMatrix<S> {
        &self.v
    }

    pub fn template(&self) -> &Flag<S> {
        &self.template
    }

    pub fn dim(&self) -> usize {
        self.template.dim()
    }

    /// The full tuple `(v p_1, ..., v p_{n-1}, v)`; the last entry is the
    /// stored matrix itself, bit for bit.
    pub fn tuple(&self) -> Vec<CMatrix<S>> {
        let n = self.template.steps();
        let mut out = Vec::with_capacity(n);
        for p in &self.template.projections()[..n - 1] {
            out.push(&self.v * p);
        }
        out.push(self.v.clone());
        out
    }
}

/// A Stiefel point whose matrix is a partial isometry: `v* v = p_n`.
#[derive(Clone, Debug)]
pub struct UnitaryStiefelPoint<S: RealScalar> {
    point: StiefelPoint<S>,
}

impl<S: RealScalar> UnitaryStiefelPoint<S> {
    /// Validate `v* v = p_n` within `algebraic_rel`.
    pub fn new(point: StiefelPoint<S>, tol: &Tolerance<S>) -> Result<Self, StiefelError> {
        let pn = &point.template.projections()[point.template.steps() - 1];
        let residual = rel_residual(&(point.v.adjoint() * &point.v), pn);
        if residual > tol.algebraic_rel {
            return Err(StiefelError::NotPartialIsometry {
                residual: residual.as_f64(),
            });
        }
        Ok(Self { point })
    }

    pub fn point(&self) -> &StiefelPoint<S> {
        &self.point
    }

    pub fn v(&self) -> &CMatrix<S> {
        &self.point.v
    }

    pub fn into_point(self) -> StiefelPoint<S> {
        self.point
    }
}

/// The bundle map: recover the orthogonal flag whose level-`j` space is the
/// range of `v p_j`. Ranges are extracted with column-pivoted QR, so the
/// result is the canonical orthogonal representative regardless of how
/// oblique the template chain is.
pub fn sigma_delta<S: RealScalar>(
    point: &StiefelPoint<S>,
    tol: &Tolerance<S>,
) -> Result<OrthoFlag<S>, StiefelError> {
    let flag = &point.template;
    let m = flag.dim();
    let n = flag.steps();
    let ranks = chain_ranks(flag);
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let mut chain: Vec<CMatrix<S>> = Vec::with_capacity(n);
    for (j, (p, &rank)) in flag.projections().iter().zip(&ranks).enumerate() {
        let compressed = if j + 1 == n {
            point.v.clone()
        } else {
            &point.v * p
        };
        let basis = range_basis(&compressed);
        if basis.ncols() != rank {
            return Err(StiefelError::RankDeficient {
                level: j + 1,
                expected: rank,
                got: basis.ncols(),
            });
        }
        chain.push(hermitian_part(&(&basis * basis.adjoint())));
    }
    let mut blocks: Vec<Idempotent<S>> = Vec::with_capacity(n + 1);
    let mut prev: CMatrix<S> = DMatrix::zeros(m, m);
    for p in &chain {
        blocks.push(Idempotent::new_unchecked(p - &prev));
        prev = p.clone();
    }
    blocks.push(Idempotent::new_unchecked(&id - &prev));
    let canonical = alpha(&blocks, tol)?;
    Ok(OrthoFlag::new(canonical, tol)?)
}

/// Right action of the structure group (invertible block upper-triangular
/// elements) on Stiefel points. Only the corner representative `a p_n`
/// enters the product, so two group elements with the same corner act
/// identically.
pub fn structure_action<S: RealScalar>(
    point: &StiefelPoint<S>,
    a: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<StiefelPoint<S>, StiefelError> {
    let flag = &point.template;
    let m = flag.dim();
    if a.nrows() != m || a.ncols() != m {
        return Err(shape_mismatch(a, m, m).into());
    }
    let raw = membership(flag, a, Space::Delta)?;
    let rel = raw / (S::one() + a.norm());
    if rel > tol.algebraic_rel {
        return Err(StiefelError::NotInStructureGroup {
            reason: "element is not block upper-triangular",
            residual: rel.as_f64(),
        });
    }
    let singular = a.clone().singular_values();
    let (mut lo, mut hi) = (S::zero(), S::zero());
    for (i, s) in singular.iter().enumerate() {
        if i == 0 {
            lo = *s;
            hi = *s;
        } else {
            lo = lo.min(*s);
            hi = hi.max(*s);
        }
    }
    if lo <= tol.algebraic_rel * hi {
        return Err(StiefelError::NotInStructureGroup {
            reason: "element is numerically singular",
            residual: (lo / hi).as_f64(),
        });
    }
    let pn = &flag.projections()[flag.steps() - 1];
    let moved = &point.v * (a * pn);
    StiefelPoint::new(moved, flag.clone(), tol)
}

/// Reduce a Stiefel point to the unitary sub-bundle without moving it in the
/// bundle: the result satisfies `w* w = p_n` and has the same flag under
/// [`sigma_delta`].
///
/// The normalizing element is found by factorizing the invertible hermitian
/// extension `v* v + (1 - p_n)` along the (orthogonal) template chain as
/// `L M U`; then `a = U^{-1} M^{-1/2}` is block upper-triangular with
/// `a* (v* v) a = p_n` on the corner, and `w = v a p_n` is the reduced frame.
/// For a single-step chain this is exactly the corner inverse square root
/// `w = v (v* v)^{-1/2}`; for longer chains the triangular normalization is
/// what keeps every intermediate range — hence the flag — fixed.
pub fn unitary_reduce<S: RealScalar>(
    point: &StiefelPoint<S>,
    tol: &Tolerance<S>,
) -> Result<UnitaryStiefelPoint<S>, StiefelError> {
    let flag = &point.template;
    check_ortho_template(flag, tol)?;
    let m = flag.dim();
    let n = flag.steps();
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let pn = &flag.projections()[n - 1];
    let gram = hermitian_part(&(point.v.adjoint() * &point.v));
    let extended = &gram + (&id - pn);
    let fac = match flag_factorize(flag, &extended, tol) {
        Ok(f) => f,
        Err(FlagError::NotInOmega { .. }) | Err(FlagError::Algebra(AlgebraError::NotInvertible)) => {
            return Err(StiefelError::RankDeficient {
                level: n,
                expected: *chain_ranks(flag).last().expect("nonempty chain"),
                got: numeric_rank(&point.v),
            });
        }
        Err(e) => return Err(e.into()),
    };
    // Global inverse square root of the block-diagonal middle factor; taking
    // it through the hermitian functional calculus keeps it block-diagonal.
    let middle_inv_sqrt = corner_inv_sqrt(&fac.middle, &id, tol)?;
    let a = fac
        .upper
        .clone()
        .lu()
        .solve(&middle_inv_sqrt)
        .ok_or(StiefelError::Algebra(AlgebraError::NotInvertible))?;
    let w = &point.v * (a * pn);
    let reduced = StiefelPoint::new(w, flag.clone(), tol)?;
    UnitaryStiefelPoint::new(reduced, tol)
}

/// Principal connection form on unitary frames: the block-diagonal
/// compression `Phi_delta(u* X)` of a frame velocity. `u` must be unitary and
/// `u* X` skew-hermitian within `algebraic_rel`.
pub fn connection_form_omega<S: RealScalar>(
    template: &OrthoFlag<S>,
    u: &CMatrix<S>,
    x: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, StiefelError> {
    let m = template.dim();
    if u.nrows() != m || u.ncols() != m {
        return Err(shape_mismatch(u, m, m).into());
    }
    if x.nrows() != m || x.ncols() != m {
        return Err(shape_mismatch(x, m, m).into());
    }
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let unitary = rel_residual(&(u.adjoint() * u), &id);
    if unitary > tol.algebraic_rel {
        return Err(AlgebraError::NotUnitary {
            residual: unitary.as_f64(),
        }
        .into());
    }
    let a = u.adjoint() * x;
    let skew = (&a + a.adjoint()).norm() / (S::one() + a.norm());
    if skew > tol.algebraic_rel {
        return Err(StiefelError::NotTangent {
            what: "u* X is not skew-hermitian",
            residual: skew.as_f64(),
        });
    }
    Ok(diagonal_truncation(template.as_flag(), &a)?)
}

/// A tangent vector to the orthogonal-flag manifold at `base`: one hermitian
/// velocity per chain projection, each satisfying the linearized idempotent
/// equation `dp = dp p + p dp`.
#[derive(Clone, Debug)]
pub struct FlagTangent<S: RealScalar> {
    base: OrthoFlag<S>,
    velocities: Vec<CMatrix<S>>,
}

impl<S: RealScalar> FlagTangent<S> {
    pub fn new(
        base: OrthoFlag<S>,
        velocities: Vec<CMatrix<S>>,
        tol: &Tolerance<S>,
    ) -> Result<Self, StiefelError> {
        let m = base.dim();
        let n = base.steps();
        if velocities.len() != n {
            return Err(StiefelError::SignatureMismatch {
                level: 0,
                left: velocities.len(),
                right: n,
            });
        }
        for (j, (dp, p)) in velocities.iter().zip(base.projections()).enumerate() {
            if dp.nrows() != m || dp.ncols() != m {
                return Err(shape_mismatch(dp, m, m).into());
            }
            let scale = S::one() + dp.norm();
            let herm = (dp - dp.adjoint()).norm() / scale;
            if herm > tol.exact_rel {
                return Err(StiefelError::NotTangent {
                    what: "chain velocity is not hermitian",
                    residual: herm.as_f64(),
                });
            }
            let lin = (dp - (dp * p + p * dp)).norm() / scale;
            if lin > tol.algebraic_rel {
                return Err(StiefelError::NotTangent {
                    what: "chain velocity violates the linearized idempotent equation",
                    residual: lin.as_f64(),
                });
            }
            let _ = j;
        }
        Ok(Self { base, velocities })
    }

    pub fn zero(base: OrthoFlag<S>) -> Self {
        let m = base.dim();
        let velocities = (0..base.steps()).map(|_| DMatrix::zeros(m, m)).collect();
        Self { base, velocities }
    }

    pub fn base(&self) -> &OrthoFlag<S> {
        &self.base
    }

    pub fn velocities(&self) -> &[CMatrix<S>] {
        &self.velocities
    }
}

/// Solve `[a, p_j] = b_j` for the unique *horizontal* skew generator `a`
/// (zero block diagonal) given velocities already pulled back to the
/// template frame. Each strictly-upper block of `a` is overdetermined by
/// several `j`; the candidates are averaged and must agree within
/// `algebraic_rel`.
fn horizontal_generator<S: RealScalar>(
    template: &OrthoFlag<S>,
    pulled: &[CMatrix<S>],
    algebraic_rel: S,
) -> Result<CMatrix<S>, StiefelError> {
    let m = template.dim();
    let blocks = template.blocks();
    let nb = blocks.len();
    let scale = S::one()
        + pulled
            .iter()
            .map(|b| b.norm())
            .fold(S::zero(), |acc, x| acc.max(x));
    let mut a: CMatrix<S> = DMatrix::zeros(m, m);
    let mut worst = S::zero();
    for i in 0..nb {
        for k in (i + 1)..nb {
            let mut candidates: Vec<CMatrix<S>> = Vec::with_capacity(k - i);
            for b in &pulled[i..k] {
                candidates.push(-(&blocks[i] * b * &blocks[k]));
            }
            let count = S::from_double(candidates.len() as f64);
            let mut mean: CMatrix<S> = DMatrix::zeros(m, m);
            for cand in &candidates {
                mean += cand;
            }
            mean = mean.scale(S::one() / count);
            for cand in &candidates {
                let dev = (cand - &mean).norm() / scale;
                if dev > worst {
                    worst = dev;
                }
            }
            a += &mean - mean.adjoint();
        }
    }
    if worst > algebraic_rel {
        return Err(StiefelError::InconsistentVelocities {
            residual: worst.as_f64(),
        });
    }
    for (b, p) in pulled.iter().zip(template.projections()) {
        let resid = (&a * p - p * &a - b).norm() / scale;
        if resid > worst {
            worst = resid;
        }
    }
    if worst > algebraic_rel {
        return Err(StiefelError::InconsistentVelocities {
            residual: worst.as_f64(),
        });
    }
    Ok(a)
}

/// Horizontal lift of a flag tangent to the frame `u`: the unique `X = u a`
/// with `a` skew, block-off-diagonal for the template, and
/// `[u a u*, p_j] = dp_j` for every level. The frame must actually sit over
/// the tangent's base flag (`u delta u* = base`).
pub fn horizontal_lift_flag<S: RealScalar>(
    template: &OrthoFlag<S>,
    tangent: &FlagTangent<S>,
    u: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<CMatrix<S>, StiefelError> {
    let m = template.dim();
    if u.nrows() != m || u.ncols() != m {
        return Err(shape_mismatch(u, m, m).into());
    }
    if tangent.base.steps() != template.steps() {
        return Err(StiefelError::SignatureMismatch {
            level: 0,
            left: tangent.base.steps(),
            right: template.steps(),
        });
    }
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let unitary = rel_residual(&(u.adjoint() * u), &id);
    if unitary > tol.algebraic_rel {
        return Err(AlgebraError::NotUnitary {
            residual: unitary.as_f64(),
        }
        .into());
    }
    let carried = conjugate_flag(template, u);
    let compat = flag_residual(carried.as_flag(), tangent.base.as_flag());
    if compat > tol.algebraic_rel {
        return Err(StiefelError::NotCompatible {
            residual: compat.as_f64(),
        });
    }
    let pulled: Vec<CMatrix<S>> = tangent
        .velocities
        .iter()
        .map(|dp| u.adjoint() * dp * u)
        .collect();
    let a = horizontal_generator(template, &pulled, tol.algebraic_rel)?;
    Ok(u * a)
}

/// The transported frame history along a curve of orthogonal flags.
#[derive(Clone, Debug)]
pub struct FrameHistory<S: RealScalar> {
    /// One frame per curve sample; `frames[0]` is the supplied initial frame.
    pub frames: Vec<CMatrix<S>>,
    /// Largest block-diagonal component of any per-step frame increment,
    /// relative to the increment size — a direct check that the motion was
    /// horizontal.
    pub max_vertical_residual: S,
}

/// Result of [`parallel_transport`]: the final frame plus the transport
/// quality diagnostics.
#[derive(Clone, Debug)]
pub struct Transport<S: RealScalar> {
    pub u: CMatrix<S>,
    pub max_vertical_residual: S,
    /// Residual between the flag carried by the final frame and the final
    /// curve sample.
    pub final_flag_residual: S,
}

/// One predictor/corrector step: rotate the current frame horizontally until
/// it carries the template onto `target`. Velocities are always measured
/// from the flag the frame *currently* carries, which keeps every lift
/// exactly compatible and folds drift correction into the predictor.
fn transport_step<S: RealScalar>(
    template: &OrthoFlag<S>,
    u: &CMatrix<S>,
    target: &OrthoFlag<S>,
    step_index: usize,
    tol: &Tolerance<S>,
    relaxed_rel: S,
) -> Result<(CMatrix<S>, S), StiefelError> {
    let polish = tol.transport_rel * S::from_double(POLISH_FACTOR);
    let mut current = u.clone();
    let mut iter = 0usize;
    loop {
        let carried = conjugate_flag(template, &current);
        let resid = flag_residual(carried.as_flag(), target.as_flag());
        if resid <= polish {
            break;
        }
        if iter >= MAX_NEWTON {
            if resid <= tol.transport_rel {
                break;
            }
            return Err(StiefelError::StepTooLarge {
                index: step_index,
                size: resid.as_f64(),
            });
        }
        let pulled: Vec<CMatrix<S>> = target
            .projections()
            .iter()
            .zip(carried.projections())
            .map(|(t, c)| current.adjoint() * (t - c) * &current)
            .collect();
        let a = horizontal_generator(template, &pulled, relaxed_rel)?;
        current = &current * exp_skew(&a, tol)?;
        iter += 1;
    }
    // Horizontality diagnostic: the logarithm of the accumulated increment
    // should have no block-diagonal part in the frame where the step began.
    let start_flag = conjugate_flag(template, u);
    let increment = &current * u.adjoint();
    let ell = log_unitary(&increment, tol)?;
    let vertical = diagonal_truncation(start_flag.as_flag(), &ell)?;
    let vertical_rel = vertical.norm() / (S::one() + ell.norm());
    Ok((current, vertical_rel))
}

/// Transport the initial frame `u0` across every sample of `curve`,
/// returning the whole frame history. `u0` must be unitary and must carry
/// the template onto the first sample.
pub fn transport_frames<S: RealScalar>(
    template: &OrthoFlag<S>,
    curve: &[OrthoFlag<S>],
    u0: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<FrameHistory<S>, StiefelError> {
    if curve.is_empty() {
        return Err(StiefelError::IndexOutOfRange { index: 0, len: 0 });
    }
    let m = template.dim();
    if u0.nrows() != m || u0.ncols() != m {
        return Err(shape_mismatch(u0, m, m).into());
    }
    let id: CMatrix<S> = DMatrix::identity(m, m);
    let unitary = rel_residual(&(u0.adjoint() * u0), &id);
    if unitary > tol.algebraic_rel {
        return Err(AlgebraError::NotUnitary {
            residual: unitary.as_f64(),
        }
        .into());
    }
    let template_ranks = chain_ranks(template.as_flag());
    for sample in curve {
        if sample.dim() != m || sample.steps() != template.steps() {
            return Err(StiefelError::SignatureMismatch {
                level: 0,
                left: sample.steps(),
                right: template.steps(),
            });
        }
        let ranks = chain_ranks(sample.as_flag());
        for (level, (got, want)) in ranks.iter().zip(&template_ranks).enumerate() {
            if got != want {
                return Err(StiefelError::SignatureMismatch {
                    level: level + 1,
                    left: *got,
                    right: *want,
                });
            }
        }
    }
    let compat = flag_residual(conjugate_flag(template, u0).as_flag(), curve[0].as_flag());
    if compat > tol.algebraic_rel {
        return Err(StiefelError::NotCompatible {
            residual: compat.as_f64(),
        });
    }
    let mut frames = Vec::with_capacity(curve.len());
    frames.push(u0.clone());
    let mut max_vertical = S::zero();
    for k in 0..curve.len() - 1 {
        let mut step_size = S::zero();
        for (pa, pb) in curve[k]
            .projections()
            .iter()
            .zip(curve[k + 1].projections())
        {
            let d = (pb - pa).norm();
            if d > step_size {
                step_size = d;
            }
        }
        if step_size.as_f64() > STEP_BOUND {
            return Err(StiefelError::StepTooLarge {
                index: k,
                size: step_size.as_f64(),
            });
        }
        // Finite-difference velocities violate the strict tangency and
        // consistency identities at second order in the step, so the lift
        // inside a step runs with the tolerance opened up accordingly.
        let slack = S::from_double(4.0) * step_size * step_size;
        let relaxed_rel = tol.algebraic_rel.max(slack);
        let (next, vertical) = transport_step(
            template,
            frames.last().expect("nonempty"),
            &curve[k + 1],
            k,
            tol,
            relaxed_rel,
        )?;
        if vertical > max_vertical {
            max_vertical = vertical;
        }
        frames.push(next);
    }
    Ok(FrameHistory {
        frames,
        max_vertical_residual: max_vertical,
    })
}

/// Parallel transport along a sampled curve of orthogonal flags: first-order
/// horizontal predictor with Newton correction per step. Returns the final
/// frame together with the accumulated diagnostics.
pub fn parallel_transport<S: RealScalar>(
    template: &OrthoFlag<S>,
    curve: &[OrthoFlag<S>],
    u0: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<Transport<S>, StiefelError> {
    let history = transport_frames(template, curve, u0, tol)?;
    let last = history.frames.last().expect("nonempty");
    let final_flag_residual = flag_residual(
        conjugate_flag(template, last).as_flag(),
        curve.last().expect("nonempty").as_flag(),
    );
    Ok(Transport {
        u: last.clone(),
        max_vertical_residual: history.max_vertical_residual,
        final_flag_residual,
    })
}

/// An element of the direct sum of tautological subbundles over one flag:
/// one matrix per chain level, each with column space inside the range of
/// its projection (`p_j v_j = v_j`).
#[derive(Clone, Debug)]
pub struct TautologicalElement<S: RealScalar> {
    base: OrthoFlag<S>,
    components: Vec<CMatrix<S>>,
}

impl<S: RealScalar> TautologicalElement<S> {
    pub fn new(
        base: OrthoFlag<S>,
        components: Vec<CMatrix<S>>,
        tol: &Tolerance<S>,
    ) -> Result<Self, StiefelError> {
        let m = base.dim();
        let n = base.steps();
        if components.len() != n {
            return Err(StiefelError::SignatureMismatch {
                level: 0,
                left: components.len(),
                right: n,
            });
        }
        for (j, (v, p)) in components.iter().zip(base.projections()).enumerate() {
            if v.nrows() != m || v.ncols() != m {
                return Err(shape_mismatch(v, m, m).into());
            }
            let residual = (p * v - v).norm() / (S::one() + v.norm());
            if residual > tol.exact_rel {
                return Err(StiefelError::NotInFiber {
                    level: j + 1,
                    residual: residual.as_f64(),
                });
            }
        }
        Ok(Self { base, components })
    }

    pub fn base(&self) -> &OrthoFlag<S> {
        &self.base
    }

    pub fn components(&self) -> &[CMatrix<S>] {
        &self.components
    }
}

/// Frame-carrying unitary between two orthogonal flags of the same
/// signature, assembled block by block from range bases: `u = sum_j W_j V_j*`
/// sends each block of `from` onto the corresponding block of `to`.
pub fn align_flags<S: RealScalar>(
    from: &OrthoFlag<S>,
    to: &OrthoFlag<S>,
) -> Result<CMatrix<S>, StiefelError> {
    let m = from.dim();
    if to.dim() != m {
        return Err(shape_mismatch(&to.projections()[0], m, m).into());
    }
    if from.steps() != to.steps() {
        return Err(StiefelError::SignatureMismatch {
            level: 0,
            left: from.steps(),
            right: to.steps(),
        });
    }
    let mut u: CMatrix<S> = DMatrix::zeros(m, m);
    for (j, (qf, qt)) in from.blocks().iter().zip(to.blocks()).enumerate() {
        let vb = range_basis(qf);
        let wb = range_basis(qt);
        if vb.ncols() != wb.ncols() {
            return Err(StiefelError::SignatureMismatch {
                level: j + 1,
                left: vb.ncols(),
                right: wb.ncols(),
            });
        }
        u += &wb * vb.adjoint();
    }
    Ok(u)
}

/// Covariant derivative of a section of the tautological sum along a sampled
/// curve, evaluated at an interior sample `t_index` by a central difference
/// in the transported frame:
/// `D sigma (t) = u_t d/dt (u_t^* sigma(t))` on the grid `t_k = k / N`.
///
/// The frames come from [`transport_frames`] with the canonical initial
/// frame `align_flags(template, curve[0])`; the result does not depend on
/// that choice, because any two admissible initial frames differ by a
/// block-diagonal unitary, under which transport is exactly equivariant.
pub fn covariant_derivative_taut<S, F>(
    template: &OrthoFlag<S>,
    curve: &[OrthoFlag<S>],
    section: F,
    t_index: usize,
    tol: &Tolerance<S>,
) -> Result<Vec<CMatrix<S>>, StiefelError>
where
    S: RealScalar,
    F: Fn(usize) -> TautologicalElement<S>,
{
    let len = curve.len();
    if len < 3 || t_index == 0 || t_index + 1 >= len {
        return Err(StiefelError::IndexOutOfRange {
            index: t_index,
            len,
        });
    }
    let u0 = align_flags(template, &curve[0])?;
    let history = transport_frames(template, curve, &u0, tol)?;
    let mut elements = Vec::with_capacity(3);
    for k in [t_index - 1, t_index, t_index + 1] {
        let element = section(k);
        if element.base.steps() != curve[k].steps() || element.base.dim() != curve[k].dim() {
            return Err(StiefelError::SignatureMismatch {
                level: 0,
                left: element.base.steps(),
                right: curve[k].steps(),
            });
        }
        let drift = flag_residual(element.base.as_flag(), curve[k].as_flag());
        if drift > tol.algebraic_rel {
            return Err(StiefelError::NotCompatible {
                residual: drift.as_f64(),
            });
        }
        elements.push(element);
    }
    let factor = S::from_double((len - 1) as f64 / 2.0);
    let u_prev = &history.frames[t_index - 1];
    let u_here = &history.frames[t_index];
    let u_next = &history.frames[t_index + 1];
    let mut out = Vec::with_capacity(template.steps());
    for j in 0..template.steps() {
        let ahead = u_next.adjoint() * &elements[2].components[j];
        let behind = u_prev.adjoint() * &elements[0].components[j];
        out.push(u_here * ((ahead - behind).scale(factor)));
    }
    Ok(out)
}

/// Random well-conditioned Stiefel point over the given template.
pub fn random_stiefel_point<S: RealScalar>(
    src: &mut RandomSource,
    template: &Flag<S>,
    tol: &Tolerance<S>,
) -> StiefelPoint<S> {
    let g: CMatrix<S> = crate::algebra::random_group_element(src, template.dim());
    let pn = &template.projections()[template.steps() - 1];
    StiefelPoint::new(g * pn, template.clone(), tol)
        .expect("group element times top projection is a valid point")
}

/// Random skew-hermitian matrix with zero block diagonal for the flag — a
/// horizontal direction at every frame over it.
pub fn random_horizontal_skew<S: RealScalar>(
    src: &mut RandomSource,
    flag: &OrthoFlag<S>,
    norm: f64,
) -> CMatrix<S> {
    let s = crate::algebra::random_skew(src, flag.dim(), norm);
    let d = diagonal_truncation(flag.as_flag(), &s).expect("matching dimensions");
    s - d
}

/// Random block-diagonal unitary for the flag, assembled per block from
/// independent small unitaries.
pub fn random_block_diagonal_unitary<S: RealScalar>(
    src: &mut RandomSource,
    flag: &OrthoFlag<S>,
) -> CMatrix<S> {
    let m = flag.dim();
    let mut out: CMatrix<S> = DMatrix::zeros(m, m);
    for q in flag.blocks() {
        let basis = range_basis(q);
        let r = basis.ncols();
        if r == 0 {
            continue;
        }
        let small: CMatrix<S> = crate::algebra::random_unitary(src, r);
        out += &basis * small * basis.adjoint();
    }
    out
}

/// Rotation curve in dimension two: the coordinate line turned by `theta`,
/// sampled at `samples` uniform points `t_k = k / samples` of `[0, 1)`.
/// Returns the template flag together with the samples.
///
/// The grid stops one step short of `t = 1`, so transporting the identity
/// frame along it approaches [`rotation_limit`]`(theta)` at first order: the
/// error is `~ sqrt(2) theta / samples` with halving ratio `1/2`. (The
/// sampled polyline itself is transported essentially exactly — all its
/// horizontal carriers commute — so the first-order term measures the grid,
/// not integrator drift.)
pub fn rotation_curve<S: RealScalar>(
    theta: S,
    samples: usize,
) -> (OrthoFlag<S>, Vec<OrthoFlag<S>>) {
    assert!(samples >= 2, "need at least two samples");
    let template = coordinate_line_flag::<S>();
    let mut out = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = S::from_double(k as f64 / samples as f64);
        out.push(rotated_line_flag(theta * t));
    }
    (template, out)
}

/// The planar rotation by `theta` — the closed-form limit of transporting
/// the identity frame along [`rotation_curve`].
pub fn rotation_limit<S: RealScalar>(theta: S) -> CMatrix<S> {
    let (c, s) = (theta.cos(), theta.sin());
    DMatrix::from_row_slice(
        2,
        2,
        &[
            Complex::new(c, S::zero()),
            Complex::new(-s, S::zero()),
            Complex::new(s, S::zero()),
            Complex::new(c, S::zero()),
        ],
    )
}

fn coordinate_line_flag<S: RealScalar>() -> OrthoFlag<S> {
    rotated_line_flag(S::zero())
}

fn rotated_line_flag<S: RealScalar>(angle: S) -> OrthoFlag<S> {
    let (c, s) = (angle.cos(), angle.sin());
    let line: CMatrix<S> = DMatrix::from_row_slice(
        2,
        2,
        &[
            Complex::new(c * c, S::zero()),
            Complex::new(c * s, S::zero()),
            Complex::new(s * c, S::zero()),
            Complex::new(s * s, S::zero()),
        ],
    );
    let id: CMatrix<S> = DMatrix::identity(2, 2);
    let co = &id - &line;
    OrthoFlag::new_unchecked(Flag::from_validated_blocks(vec![line, co]))
}

/// Curve of flags obtained by conjugating `base` with `exp(t h)` on a
/// uniform grid `t in [0, 1]`. When `h` has zero block diagonal for `base`
/// (see [`random_horizontal_skew`]), the exact parallel transport of the
/// identity frame along the whole curve is `exp(h)`.
pub fn conjugation_curve<S: RealScalar>(
    base: &OrthoFlag<S>,
    h: &CMatrix<S>,
    steps: usize,
    tol: &Tolerance<S>,
) -> Result<Vec<OrthoFlag<S>>, StiefelError> {
    assert!(steps >= 1, "need at least one step");
    let m = base.dim();
    if h.nrows() != m || h.ncols() != m {
        return Err(shape_mismatch(h, m, m).into());
    }
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = S::from_double(k as f64 / steps as f64);
        let w = exp_skew(&h.scale(t), tol)?;
        let blocks = base
            .blocks()
            .iter()
            .map(|q| hermitian_part(&(&w * q * w.adjoint())))
            .collect();
        out.push(OrthoFlag::new_unchecked(Flag::from_validated_blocks(
            blocks,
        )));
    }
    Ok(out)
}
