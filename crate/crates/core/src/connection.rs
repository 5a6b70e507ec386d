//! Connection calculus in a fixed local trivialization.
//!
//! A chart-level connection is its Christoffel symbol: a callable sending a
//! chart point `x`, a base velocity `y`, and a fiber vector `xi` to a fiber
//! vector, bilinear in `(y, xi)`. On top of that datum this module provides
//! the connector (the fiber component of the induced projection onto the
//! vertical subbundle), the horizontal lift, the vertical/horizontal
//! splitting residual, pull-backs along fiberwise-invertible bundle
//! morphisms, covariant derivatives of sections, and the tangent group of
//! the invertible matrices (semidirect product of the group with its Lie
//! algebra).
//!
//! User-supplied callables must be safe to invoke concurrently: they are
//! shared behind `Arc` and must not mutate interior state. Derivatives of
//! user maps default to central finite differences with step
//! `1e-5 * (1 + ||x||)`; maps are assumed complex-differentiable, so callers
//! with non-holomorphic charts should supply exact derivatives.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::algebra::{checked_inverse, AlgebraError, RandomSource, Tolerance};
use crate::scalar::{cre, RealScalar};
use crate::{CMatrix, CVector};

/// Errors raised by the chart-level connection calculus.
#[derive(Debug, Error)]
pub enum ConnectionError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("fiber map is numerically singular (sigma_min {sigma_min:.3e} <= {threshold:.3e})")]
    SingularFiberMap { sigma_min: f64, threshold: f64 },
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ConnectionError> {
    if expected == got {
        Ok(())
    } else {
        Err(ConnectionError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Christoffel symbol: `(x, y, xi) -> fiber vector`, bilinear in `(y, xi)`.
pub type ChristoffelFn<S> = dyn Fn(&CVector<S>, &CVector<S>, &CVector<S>) -> Result<CVector<S>, ConnectionError>
    + Send
    + Sync;

/// Chart map between base models, `x -> zeta(x)`.
pub type ChartMapFn<S> = dyn Fn(&CVector<S>) -> CVector<S> + Send + Sync;

/// Chart derivative, `x -> Jacobian of zeta at x`.
pub type JacobianFn<S> = dyn Fn(&CVector<S>) -> CMatrix<S> + Send + Sync;

/// Fiberwise linear map, `x -> d(x)` acting on fiber vectors.
pub type FiberMapFn<S> = dyn Fn(&CVector<S>) -> CMatrix<S> + Send + Sync;

/// A tangent vector of the trivialized bundle: base point `x`, fiber point
/// `xi`, base velocity `y`, fiber velocity `eta`.
#[derive(Clone, Debug)]
pub struct TangentChartVector<S: RealScalar> {
    pub x: CVector<S>,
    pub xi: CVector<S>,
    pub y: CVector<S>,
    pub eta: CVector<S>,
}

impl<S: RealScalar> TangentChartVector<S> {
    pub fn new(x: CVector<S>, xi: CVector<S>, y: CVector<S>, eta: CVector<S>) -> Self {
        Self { x, xi, y, eta }
    }
}

/// A connection on a trivialized bundle with base model `C^base_dim` and
/// fiber model `C^fiber_dim`, stored as its Christoffel symbol.
#[derive(Clone)]
pub struct LocalConnection<S: RealScalar> {
    base_dim: usize,
    fiber_dim: usize,
    symbol: Arc<ChristoffelFn<S>>,
}

impl<S: RealScalar> fmt::Debug for LocalConnection<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalConnection")
            .field("base_dim", &self.base_dim)
            .field("fiber_dim", &self.fiber_dim)
            .finish_non_exhaustive()
    }
}

impl<S: RealScalar> LocalConnection<S> {
    /// Connection with an arbitrary Christoffel callable. The callable is
    /// trusted to be bilinear in `(y, xi)`; evaluation validates output
    /// length but not bilinearity.
    pub fn new<F>(base_dim: usize, fiber_dim: usize, symbol: F) -> Self
    where
        F: Fn(&CVector<S>, &CVector<S>, &CVector<S>) -> Result<CVector<S>, ConnectionError>
            + Send
            + Sync
            + 'static,
    {
        Self {
            base_dim,
            fiber_dim,
            symbol: Arc::new(symbol),
        }
    }

    /// The flat connection: Christoffel symbol identically zero.
    pub fn flat(base_dim: usize, fiber_dim: usize) -> Self {
        Self::new(base_dim, fiber_dim, move |_, _, _| {
            Ok(CVector::zeros(fiber_dim))
        })
    }

    /// Constant-coefficient connection: component `i` of the symbol is the
    /// bilinear form `y^T coeffs[i] xi` (plain transpose, no conjugation).
    /// Each coefficient must be `base_dim x fiber_dim`; `fiber_dim` is the
    /// number of coefficients.
    pub fn constant(coeffs: Vec<CMatrix<S>>) -> Result<Self, ConnectionError> {
        Self::affine(coeffs, Vec::new())
    }

    /// Connection whose coefficient matrices depend affinely on the chart
    /// point: component `i` is `y^T (constant[i] + sum_j x_j linear[i][j]) xi`.
    /// `linear` may be empty (constant coefficients); otherwise it must
    /// supply one `base_dim x fiber_dim` matrix per component and chart
    /// coordinate.
    pub fn affine(
        constant: Vec<CMatrix<S>>,
        linear: Vec<Vec<CMatrix<S>>>,
    ) -> Result<Self, ConnectionError> {
        let fiber_dim = constant.len();
        check_dim("coefficient list", 1.max(fiber_dim), fiber_dim)?;
        let base_dim = constant[0].nrows();
        for m in &constant {
            check_dim("coefficient rows", base_dim, m.nrows())?;
            check_dim("coefficient cols", fiber_dim, m.ncols())?;
        }
        if !linear.is_empty() {
            check_dim("linear coefficient list", fiber_dim, linear.len())?;
            for per_coordinate in &linear {
                check_dim("linear coefficients per component", base_dim, per_coordinate.len())?;
                for m in per_coordinate {
                    check_dim("linear coefficient rows", base_dim, m.nrows())?;
                    check_dim("linear coefficient cols", fiber_dim, m.ncols())?;
                }
            }
        }
        Ok(Self::new(base_dim, fiber_dim, move |x, y, xi| {
            let mut out = CVector::zeros(fiber_dim);
            for i in 0..fiber_dim {
                let mut m = constant[i].clone();
                if !linear.is_empty() {
                    for j in 0..base_dim {
                        m += &linear[i][j] * x[j];
                    }
                }
                out[i] = (y.transpose() * m * xi)[(0, 0)];
            }
            Ok(out)
        }))
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    /// Evaluates the Christoffel symbol, validating all dimensions.
    pub fn christoffel(
        &self,
        x: &CVector<S>,
        y: &CVector<S>,
        xi: &CVector<S>,
    ) -> Result<CVector<S>, ConnectionError> {
        check_dim("chart point", self.base_dim, x.len())?;
        check_dim("base velocity", self.base_dim, y.len())?;
        check_dim("fiber vector", self.fiber_dim, xi.len())?;
        let out = (self.symbol)(x, y, xi)?;
        check_dim("christoffel value", self.fiber_dim, out.len())?;
        Ok(out)
    }
}

/// Connector: the fiber velocity corrected by the Christoffel term,
/// `eta + Gamma(x)(y, xi)`. Vanishes exactly on horizontal lifts and
/// reproduces `eta` on vertical vectors (`y = 0`).
pub fn connector<S: RealScalar>(
    conn: &LocalConnection<S>,
    v: &TangentChartVector<S>,
) -> Result<CVector<S>, ConnectionError> {
    check_dim("fiber velocity", conn.fiber_dim(), v.eta.len())?;
    let gamma = conn.christoffel(&v.x, &v.y, &v.xi)?;
    Ok(&v.eta + gamma)
}

/// Horizontal lift of the base velocity `y` at `(x, xi)`:
/// `(x, xi, y, -Gamma(x)(y, xi))`. The connector of the result is zero.
pub fn horizontal_lift<S: RealScalar>(
    conn: &LocalConnection<S>,
    x: &CVector<S>,
    y: &CVector<S>,
    xi: &CVector<S>,
) -> Result<TangentChartVector<S>, ConnectionError> {
    let gamma = conn.christoffel(x, y, xi)?;
    Ok(TangentChartVector {
        x: x.clone(),
        xi: xi.clone(),
        y: y.clone(),
        eta: -gamma,
    })
}

/// Norm of the defect in reconstructing `v` as its vertical part
/// `(x, xi, 0, connector(v))` plus the horizontal lift of `(y, xi)`. The
/// reconstruction is an algebraic identity, so the residual is rounding
/// noise only.
pub fn splitting_residual<S: RealScalar>(
    conn: &LocalConnection<S>,
    v: &TangentChartVector<S>,
) -> Result<S, ConnectionError> {
    let k = connector(conn, v)?;
    let lift = horizontal_lift(conn, &v.x, &v.y, &v.xi)?;
    let dx = (&lift.x - &v.x).norm_squared();
    let dxi = (&lift.xi - &v.xi).norm_squared();
    let dy = (&lift.y - &v.y).norm_squared();
    let deta = (k + &lift.eta - &v.eta).norm_squared();
    Ok((dx + dxi + dy + deta).sqrt())
}

/// A morphism of trivialized bundles: a chart map `zeta` between base
/// models together with a fiberwise linear map `x -> d(x)`. The chart
/// derivative may be supplied exactly; otherwise it is computed by central
/// finite differences.
#[derive(Clone)]
pub struct BundleMorphismLocal<S: RealScalar> {
    in_base: usize,
    out_base: usize,
    in_fiber: usize,
    out_fiber: usize,
    chart_map: Arc<ChartMapFn<S>>,
    chart_jacobian: Option<Arc<JacobianFn<S>>>,
    fiber_linear: Arc<FiberMapFn<S>>,
}

impl<S: RealScalar> fmt::Debug for BundleMorphismLocal<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BundleMorphismLocal")
            .field("in_base", &self.in_base)
            .field("out_base", &self.out_base)
            .field("in_fiber", &self.in_fiber)
            .field("out_fiber", &self.out_fiber)
            .field("exact_jacobian", &self.chart_jacobian.is_some())
            .finish_non_exhaustive()
    }
}

fn fd_step<S: RealScalar>(x: &CVector<S>) -> S {
    S::from_double(1e-5) * (S::one() + x.norm())
}

fn fd_jacobian<S: RealScalar>(
    f: &Arc<ChartMapFn<S>>,
    x: &CVector<S>,
    out_dim: usize,
) -> CMatrix<S> {
    let h = fd_step(x);
    let inv_2h = S::from_double(0.5) / h;
    let mut jac = CMatrix::zeros(out_dim, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp[k] += cre(h);
        let mut xm = x.clone();
        xm[k] -= cre(h);
        let col = (f(&xp) - f(&xm)).scale(inv_2h);
        jac.column_mut(k).copy_from(&col);
    }
    jac
}

fn fd_directional<S: RealScalar, F>(f: &F, x: &CVector<S>, y: &CVector<S>) -> CVector<S>
where
    F: Fn(&CVector<S>) -> CVector<S> + ?Sized,
{
    let h = fd_step(x);
    let inv_2h = S::from_double(0.5) / h;
    let xp = x + y.scale(h);
    let xm = x - y.scale(h);
    (f(&xp) - f(&xm)).scale(inv_2h)
}

impl<S: RealScalar> BundleMorphismLocal<S> {
    /// Morphism from a bundle with base model `C^in_base` and fiber
    /// `C^in_fiber` to one with base `C^out_base` and fiber `C^out_fiber`.
    pub fn new<Z, D>(
        in_base: usize,
        out_base: usize,
        in_fiber: usize,
        out_fiber: usize,
        zeta: Z,
        d: D,
    ) -> Self
    where
        Z: Fn(&CVector<S>) -> CVector<S> + Send + Sync + 'static,
        D: Fn(&CVector<S>) -> CMatrix<S> + Send + Sync + 'static,
    {
        Self {
            in_base,
            out_base,
            in_fiber,
            out_fiber,
            chart_map: Arc::new(zeta),
            chart_jacobian: None,
            fiber_linear: Arc::new(d),
        }
    }

    /// Attaches an exact chart derivative, replacing the finite-difference
    /// fallback.
    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&CVector<S>) -> CMatrix<S> + Send + Sync + 'static,
    {
        self.chart_jacobian = Some(Arc::new(jacobian));
        self
    }

    /// The identity morphism on a bundle with the given models.
    pub fn identity(base_dim: usize, fiber_dim: usize) -> Self {
        Self::new(
            base_dim,
            base_dim,
            fiber_dim,
            fiber_dim,
            |x: &CVector<S>| x.clone(),
            move |_: &CVector<S>| CMatrix::identity(fiber_dim, fiber_dim),
        )
        .with_jacobian(move |_: &CVector<S>| CMatrix::identity(base_dim, base_dim))
    }

    pub fn in_base_dim(&self) -> usize {
        self.in_base
    }

    pub fn out_base_dim(&self) -> usize {
        self.out_base
    }

    pub fn in_fiber_dim(&self) -> usize {
        self.in_fiber
    }

    pub fn out_fiber_dim(&self) -> usize {
        self.out_fiber
    }

    /// Evaluates the chart map, validating dimensions on both ends.
    pub fn zeta(&self, x: &CVector<S>) -> Result<CVector<S>, ConnectionError> {
        check_dim("chart point", self.in_base, x.len())?;
        let out = (self.chart_map)(x);
        check_dim("chart image", self.out_base, out.len())?;
        Ok(out)
    }

    /// Chart derivative at `x`: the supplied closed form when present,
    /// otherwise a central finite difference column by column.
    pub fn jacobian(&self, x: &CVector<S>) -> Result<CMatrix<S>, ConnectionError> {
        check_dim("chart point", self.in_base, x.len())?;
        let jac = match &self.chart_jacobian {
            Some(j) => j(x),
            None => fd_jacobian(&self.chart_map, x, self.out_base),
        };
        check_dim("jacobian rows", self.out_base, jac.nrows())?;
        check_dim("jacobian cols", self.in_base, jac.ncols())?;
        Ok(jac)
    }

    /// Evaluates the fiber map `d(x)`, validating its shape.
    pub fn fiber_map(&self, x: &CVector<S>) -> Result<CMatrix<S>, ConnectionError> {
        check_dim("chart point", self.in_base, x.len())?;
        let d = (self.fiber_linear)(x);
        check_dim("fiber map rows", self.out_fiber, d.nrows())?;
        check_dim("fiber map cols", self.in_fiber, d.ncols())?;
        Ok(d)
    }

    /// Image of a tangent vector under the morphism in trivialized
    /// coordinates: `(zeta(x), d(x) xi, zeta'(x) y, d(x) eta)` — the fiber
    /// map acts slotwise on the fiber components.
    pub fn push_tangent(
        &self,
        v: &TangentChartVector<S>,
    ) -> Result<TangentChartVector<S>, ConnectionError> {
        check_dim("fiber vector", self.in_fiber, v.xi.len())?;
        check_dim("base velocity", self.in_base, v.y.len())?;
        check_dim("fiber velocity", self.in_fiber, v.eta.len())?;
        let d = self.fiber_map(&v.x)?;
        let jac = self.jacobian(&v.x)?;
        Ok(TangentChartVector {
            x: self.zeta(&v.x)?,
            xi: &d * &v.xi,
            y: jac * &v.y,
            eta: d * &v.eta,
        })
    }

    /// Composite morphism `self ∘ inner` (first `inner`, then `self`). The
    /// exact chart derivative is chained when both factors supply one;
    /// otherwise the composite falls back to finite differences.
    pub fn compose(&self, inner: &Self) -> Result<Self, ConnectionError> {
        check_dim("base models at the seam", self.in_base, inner.out_base)?;
        check_dim("fiber models at the seam", self.in_fiber, inner.out_fiber)?;
        let outer_map = Arc::clone(&self.chart_map);
        let inner_map = Arc::clone(&inner.chart_map);
        let zeta = {
            let (outer_map, inner_map) = (Arc::clone(&outer_map), Arc::clone(&inner_map));
            move |x: &CVector<S>| outer_map(&inner_map(x))
        };
        let jacobian = match (&self.chart_jacobian, &inner.chart_jacobian) {
            (Some(jo), Some(ji)) => {
                let (jo, ji) = (Arc::clone(jo), Arc::clone(ji));
                let inner_map = Arc::clone(&inner_map);
                Some(Arc::new(move |x: &CVector<S>| jo(&inner_map(x)) * ji(x))
                    as Arc<JacobianFn<S>>)
            }
            _ => None,
        };
        let outer_fiber = Arc::clone(&self.fiber_linear);
        let inner_fiber = Arc::clone(&inner.fiber_linear);
        let d = move |x: &CVector<S>| outer_fiber(&inner_map(x)) * inner_fiber(x);
        Ok(Self {
            in_base: inner.in_base,
            out_base: self.out_base,
            in_fiber: inner.in_fiber,
            out_fiber: self.out_fiber,
            chart_map: Arc::new(zeta),
            chart_jacobian: jacobian,
            fiber_linear: Arc::new(d),
        })
    }
}

/// Pull-back of a connection along a fiberwise-invertible morphism:
/// the new Christoffel symbol is
/// `Gamma(x)(y, xi) = d(x)^{-1} Gamma~(zeta(x))(zeta'(x) y, d(x) xi)`.
///
/// Invertibility of `d(x)` cannot be checked over the whole chart up front;
/// it is enforced at every evaluation, where a fiber map with smallest
/// singular value at or below `algebraic_rel` raises `SingularFiberMap`
/// rather than being regularized.
pub fn pullback<S: RealScalar>(
    target: &LocalConnection<S>,
    morphism: &BundleMorphismLocal<S>,
    tol: &Tolerance<S>,
) -> Result<LocalConnection<S>, ConnectionError> {
    check_dim("target base model", target.base_dim(), morphism.out_base_dim())?;
    check_dim("target fiber model", target.fiber_dim(), morphism.out_fiber_dim())?;
    check_dim(
        "fiber models (square fiber map)",
        morphism.out_fiber_dim(),
        morphism.in_fiber_dim(),
    )?;
    let target = target.clone();
    let morphism = morphism.clone();
    let threshold = tol.algebraic_rel;
    Ok(LocalConnection::new(
        morphism.in_base_dim(),
        morphism.in_fiber_dim(),
        move |x, y, xi| {
            let d = morphism.fiber_map(x)?;
            let sigma_min = d
                .singular_values()
                .iter()
                .copied()
                .reduce(|a, b| if b < a { b } else { a });
            if let Some(s) = sigma_min {
                if s <= threshold {
                    return Err(ConnectionError::SingularFiberMap {
                        sigma_min: s.as_f64(),
                        threshold: threshold.as_f64(),
                    });
                }
            }
            let image = morphism.zeta(x)?;
            let pushed_y = morphism.jacobian(x)? * y;
            let pushed_xi = &d * xi;
            let gamma = target.christoffel(&image, &pushed_y, &pushed_xi)?;
            d.lu()
                .solve(&gamma)
                .ok_or(ConnectionError::Algebra(AlgebraError::NotInvertible))
        },
    ))
}

/// Covariant derivative of a section along `y` at `x`:
/// `D xi(x)[y] + Gamma(x)(y, xi(x))`, the section derivative taken by
/// central finite differences with step `1e-5 * (1 + ||x||)`.
pub fn covariant_derivative_chart<S: RealScalar, F>(
    conn: &LocalConnection<S>,
    section: F,
    x: &CVector<S>,
    y: &CVector<S>,
) -> Result<CVector<S>, ConnectionError>
where
    F: Fn(&CVector<S>) -> CVector<S>,
{
    check_dim("chart point", conn.base_dim(), x.len())?;
    check_dim("base direction", conn.base_dim(), y.len())?;
    let xi = section(x);
    check_dim("section value", conn.fiber_dim(), xi.len())?;
    let eta = fd_directional(&section, x, y);
    connector(
        conn,
        &TangentChartVector {
            x: x.clone(),
            xi,
            y: y.clone(),
            eta,
        },
    )
}

/// Product in the tangent group of the invertible matrices:
/// `(g1, X1) * (g2, X2) = (g1 g2, g2^{-1} X1 g2 + X2)`.
pub fn tangent_group_mul<S: RealScalar>(
    g1: &CMatrix<S>,
    x1: &CMatrix<S>,
    g2: &CMatrix<S>,
    x2: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<(CMatrix<S>, CMatrix<S>), ConnectionError> {
    let m = g1.nrows();
    for (what, a) in [
        ("first group element", g1),
        ("first tangent slot", x1),
        ("second group element", g2),
        ("second tangent slot", x2),
    ] {
        check_dim(what, m, a.nrows())?;
        check_dim(what, m, a.ncols())?;
    }
    checked_inverse(g1, tol)?;
    let g2_inv = checked_inverse(g2, tol)?;
    Ok((g1 * g2, g2_inv * x1 * g2 + x2))
}

/// Inverse in the tangent group: `(g, X)^{-1} = (g^{-1}, -g X g^{-1})`, so
/// that multiplying on either side returns the unit `(1, 0)`.
pub fn tangent_group_inverse<S: RealScalar>(
    g: &CMatrix<S>,
    x: &CMatrix<S>,
    tol: &Tolerance<S>,
) -> Result<(CMatrix<S>, CMatrix<S>), ConnectionError> {
    let m = g.nrows();
    check_dim("group element", m, g.ncols())?;
    check_dim("tangent slot", m, x.nrows())?;
    check_dim("tangent slot", m, x.ncols())?;
    let g_inv = checked_inverse(g, tol)?;
    let conjugated = g * x * &g_inv;
    Ok((g_inv, -conjugated))
}

/// Random connection with coefficient matrices depending affinely on the
/// chart point (Gaussian entries, mild scales). Used by the randomized
/// identity checks.
pub fn random_affine_connection<S: RealScalar>(
    src: &mut RandomSource,
    base_dim: usize,
    fiber_dim: usize,
) -> LocalConnection<S> {
    let constant: Vec<CMatrix<S>> = (0..fiber_dim)
        .map(|_| {
            src.gaussian_matrix(base_dim, fiber_dim)
                .scale(S::from_double(0.5))
        })
        .collect();
    let linear: Vec<Vec<CMatrix<S>>> = (0..fiber_dim)
        .map(|_| {
            (0..base_dim)
                .map(|_| {
                    src.gaussian_matrix(base_dim, fiber_dim)
                        .scale(S::from_double(0.3))
                })
                .collect()
        })
        .collect();
    LocalConnection::affine(constant, linear).expect("generated coefficients are consistent")
}

/// Random bundle morphism whose chart map is quadratic,
/// `zeta(x) = A x + (x^T Q_i x)_i`, and whose fiber map is affine in `x`
/// and uniformly invertible. With `constant_fiber` the fiber map is frozen
/// at a single invertible matrix. With `exact_jacobian` the closed-form
/// chart derivative is attached; otherwise evaluations fall back to central
/// finite differences.
pub fn random_quadratic_morphism<S: RealScalar>(
    src: &mut RandomSource,
    in_base: usize,
    out_base: usize,
    fiber_dim: usize,
    constant_fiber: bool,
    exact_jacobian: bool,
) -> BundleMorphismLocal<S> {
    let linear_part: CMatrix<S> = src.gaussian_matrix(in_base.max(out_base), in_base.max(out_base))
        .view((0, 0), (out_base, in_base))
        .into_owned();
    let quadratic: Vec<CMatrix<S>> = (0..out_base)
        .map(|_| {
            src.gaussian_matrix(in_base, in_base)
                .scale(S::from_double(0.3))
        })
        .collect();
    let d0: CMatrix<S> = crate::algebra::random_mild_invertible(src, fiber_dim);
    let d_linear: Vec<CMatrix<S>> = if constant_fiber {
        Vec::new()
    } else {
        (0..in_base)
            .map(|_| {
                let g = src.gaussian_matrix::<S>(fiber_dim, fiber_dim);
                let norm = g.norm().max(S::from_double(1e-12));
                let budget = S::from_double(0.1 / in_base as f64);
                g.scale(budget / norm)
            })
            .collect()
    };

    let (a_map, q_map) = (linear_part.clone(), quadratic.clone());
    let zeta = move |x: &CVector<S>| {
        let mut out = &a_map * x;
        for (i, q) in q_map.iter().enumerate() {
            out[i] += (x.transpose() * q * x)[(0, 0)];
        }
        out
    };
    let d = move |x: &CVector<S>| {
        let mut out = d0.clone();
        for (j, dj) in d_linear.iter().enumerate() {
            out += dj * x[j];
        }
        out
    };
    let morphism = BundleMorphismLocal::new(in_base, out_base, fiber_dim, fiber_dim, zeta, d);
    if exact_jacobian {
        morphism.with_jacobian(move |x: &CVector<S>| {
            let mut jac = linear_part.clone();
            for (i, q) in quadratic.iter().enumerate() {
                let row = (x.transpose() * (q + q.transpose())).transpose();
                for k in 0..row.len() {
                    jac[(i, k)] += row[k];
                }
            }
            jac
        })
    } else {
        morphism
    }
}
