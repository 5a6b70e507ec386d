//! Seeded verification suites: batched randomized checks of the library's
//! invariants, aggregated into machine-readable reports.
//!
//! Each suite runs `trials` independent random instances at a fixed ambient
//! dimension. Every check inside a trial produces a residual divided by the
//! tolerance that governs it, so a reported `max_residual` of at most `1.0`
//! means every identity held within its declared bound; the declared suite
//! tolerance is therefore always `1.0`, and `failures` counts the trials
//! whose worst normalized residual exceeded it. Loosening the passed
//! [`Tolerance`] loosens every check coherently.
//!
//! Trials are embarrassingly parallel: each gets its own random stream
//! derived from `(seed, trial index)`, and the aggregation uses only order-
//! independent reductions (max and count), so reports are byte-deterministic
//! for a given `(suite, dim, trials, seed, tolerance)` regardless of thread
//! scheduling.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{
    random_group_element, random_mild_invertible, random_skew, random_unitary, rel_residual,
    RandomSource, Tolerance,
};
use crate::connection::{
    connector, covariant_derivative_chart, horizontal_lift, pullback, random_affine_connection,
    random_quadratic_morphism, splitting_residual, LocalConnection, TangentChartVector,
};
use crate::flag::{
    alpha, alpha_inverse, canonical_projection_e, cpr_theta, diagonal_truncation, flag_factorize,
    flag_factorize_backward, kernel_split, membership, random_flag, random_ortho_flag,
    random_ranks, triangular_split, Flag, FlagError, OrthoFlag, Space,
};
use crate::scalar::RealScalar;
use crate::stiefel::{
    align_flags, conjugation_curve, connection_form_omega, flag_residual, parallel_transport,
    random_block_diagonal_unitary, random_horizontal_skew, random_stiefel_point, rotation_curve,
    rotation_limit, sigma_delta, structure_action, unitary_reduce,
};
use crate::CMatrix;

/// Ambient dimensions a suite accepts.
pub const DIM_RANGE: std::ops::RangeInclusive<usize> = 2..=64;

/// One row of the transport convergence table: endpoint error at a sample
/// count, and the ratio to the previous row's error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub samples: usize,
    pub error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

/// Aggregated outcome of one suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub trials: usize,
    pub failures: usize,
    /// Worst residual across all trials and checks, normalized by the
    /// governing tolerance: at most `1.0` exactly when `failures == 0`.
    pub max_residual: f64,
    pub seed: u64,
    pub elapsed_ms: u64,
    /// First-order convergence table, present for the transport suite (and
    /// `all`, which includes it).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Vec<ConvergenceRow>>,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("unknown suite `{name}`; expected flags, connections, stiefel, transport, or all")]
    UnknownSuite { name: String },
    #[error("dimension {dim} is outside the supported range 2..=64")]
    BadDimension { dim: usize },
}

/// Worst-over-checks accumulator for one trial.
struct Worst(f64);

impl Worst {
    fn new() -> Self {
        Self(0.0)
    }

    /// Record `residual / bound`; non-finite values count as hard failures.
    fn check<S: RealScalar>(&mut self, residual: S, bound: S) {
        let ratio = residual.as_f64() / bound.as_f64();
        self.0 = self.0.max(if ratio.is_finite() { ratio } else { f64::INFINITY });
    }

    /// Record an already-normalized ratio.
    fn ratio(&mut self, ratio: f64) {
        self.0 = self.0.max(if ratio.is_finite() { ratio } else { f64::INFINITY });
    }

    fn fail(&mut self) {
        self.0 = f64::INFINITY;
    }
}

/// Run the named suite. Deterministic in `(name, dim, trials, seed, tol)`.
pub fn run_suite<S: RealScalar>(
    name: &str,
    dim: usize,
    trials: usize,
    seed: u64,
    tol: &Tolerance<S>,
) -> Result<SuiteReport, SuiteError> {
    if !DIM_RANGE.contains(&dim) {
        return Err(SuiteError::BadDimension { dim });
    }
    let start = std::time::Instant::now();
    let (ratios, convergence) = match name {
        "flags" => (run_trials(dim, trials, seed, tol, flags_trial), None),
        "connections" => (run_trials(dim, trials, seed, tol, connections_trial), None),
        "stiefel" => (run_trials(dim, trials, seed, tol, stiefel_trial), None),
        "transport" => {
            let mut ratios = run_trials(dim, trials, seed, tol, transport_trial);
            let (table_ratio, table) = rotation_convergence_table(tol);
            ratios.push(table_ratio);
            (ratios, Some(table))
        }
        "all" => {
            let mut ratios = Vec::new();
            for trial in [flags_trial, connections_trial, stiefel_trial, transport_trial] {
                ratios.extend(run_trials(dim, trials, seed, tol, trial));
            }
            let (table_ratio, table) = rotation_convergence_table(tol);
            ratios.push(table_ratio);
            (ratios, Some(table))
        }
        other => {
            return Err(SuiteError::UnknownSuite {
                name: other.to_string(),
            })
        }
    };
    // A check that failed outright (an operation refused to run at all)
    // reports the largest finite ratio: JSON has no infinities, and the
    // `failures == 0 iff max_residual <= 1` invariant must survive them.
    let ratios: Vec<f64> = ratios
        .into_iter()
        .map(|r| if r.is_finite() { r } else { f64::MAX })
        .collect();
    let failures = ratios.iter().filter(|&&r| r > 1.0).count();
    let max_residual = ratios.iter().copied().fold(0.0f64, f64::max);
    Ok(SuiteReport {
        suite: name.to_string(),
        trials: ratios.len(),
        failures,
        max_residual,
        seed,
        elapsed_ms: start.elapsed().as_millis() as u64,
        convergence,
    })
}

fn run_trials<S: RealScalar>(
    dim: usize,
    trials: usize,
    seed: u64,
    tol: &Tolerance<S>,
    trial: fn(RandomSource, usize, &Tolerance<S>) -> f64,
) -> Vec<f64> {
    let root = RandomSource::new(seed);
    (0..trials)
        .into_par_iter()
        .map(|k| trial(root.derive(k as u64), dim, tol))
        .collect()
}

fn random_chain_ranks(src: &mut RandomSource, dim: usize) -> Vec<usize> {
    let max_steps = (dim - 1).min(3);
    let steps = 1 + src.index(max_steps);
    random_ranks(src, dim, steps)
}

/// Tolerance used while *building* random instances: the caller's tolerance
/// loosened to at least the defaults. The tolerance under test governs only
/// the checks; if it is tightened below what rounding can meet, instance
/// construction must still succeed so the checks get to report the failures
/// instead of the trial dying.
fn generation_tolerance<S: RealScalar>(tol: &Tolerance<S>) -> Tolerance<S> {
    let base = Tolerance::<S>::default();
    Tolerance {
        algebraic_rel: tol.algebraic_rel.max(base.algebraic_rel),
        exact_rel: tol.exact_rel.max(base.exact_rel),
        transport_rel: tol.transport_rel.max(base.transport_rel),
    }
}

/// An invertible block upper-triangular element: the upper-triangular part
/// of a mild perturbation of the identity.
fn random_upper_invertible<S: RealScalar>(
    src: &mut RandomSource,
    flag: &Flag<S>,
    tol: &Tolerance<S>,
) -> CMatrix<S> {
    let g: CMatrix<S> = random_mild_invertible(src, flag.dim());
    let split = triangular_split(flag, &g, &generation_tolerance(tol))
        .expect("a fresh random element splits within the generation tolerance");
    split.diagonal + split.upper
}

/// Truncation calculus, canonical projection, splitting, factorization, and
/// the system/flag bijection.
fn flags_trial<S: RealScalar>(mut src: RandomSource, dim: usize, tol: &Tolerance<S>) -> f64 {
    let mut worst = Worst::new();
    let ranks = random_chain_ranks(&mut src, dim);
    let flag: Flag<S> = random_flag(&mut src, dim, &ranks);
    let x: CMatrix<S> = src.gaussian_matrix(dim, dim);
    let scale = S::one() + x.norm();

    // Truncation is idempotent and blind to the complement's ordering.
    let phi = diagonal_truncation(&flag, &x).expect("matching dimensions");
    let phi2 = diagonal_truncation(&flag, &phi).expect("matching dimensions");
    worst.check(rel_residual(&phi2, &phi), tol.algebraic_rel);
    let phi_hat = diagonal_truncation(&flag.complement(), &x).expect("matching dimensions");
    worst.check(rel_residual(&phi_hat, &phi), tol.exact_rel);

    // Truncation is multiplicative on the block upper-triangular algebra.
    let a = random_upper_invertible(&mut src, &flag, tol);
    let b = random_upper_invertible(&mut src, &flag, tol);
    let lhs = diagonal_truncation(&flag, &(&a * &b)).expect("matching dimensions");
    let rhs = diagonal_truncation(&flag, &a).expect("matching dimensions")
        * diagonal_truncation(&flag, &b).expect("matching dimensions");
    worst.check(rel_residual(&lhs, &rhs), tol.algebraic_rel);

    // Canonical projection: idempotent, unital, kernel as declared.
    let e1 = canonical_projection_e(&flag, &x).expect("matching dimensions");
    let e2 = canonical_projection_e(&flag, &e1).expect("matching dimensions");
    worst.check(rel_residual(&e2, &e1), tol.algebraic_rel);
    let id: CMatrix<S> = DMatrix::identity(dim, dim);
    let e_id = canonical_projection_e(&flag, &id).expect("matching dimensions");
    worst.check(rel_residual(&e_id, &id), tol.algebraic_rel);

    // Kernel elements split into strictly-lower + strictly-upper parts.
    let k = &x - &phi;
    match kernel_split(&flag, &k, tol) {
        Ok((y, z)) => {
            worst.check(rel_residual(&(&y + &z), &k), tol.exact_rel);
            let my = membership(&flag, &y, Space::TnHat).expect("matching dimensions");
            let mz = membership(&flag, &z, Space::Tn).expect("matching dimensions");
            worst.check(my / scale, tol.algebraic_rel);
            worst.check(mz / scale, tol.algebraic_rel);
        }
        Err(_) => worst.fail(),
    }

    // Triangular factorization: reconstruction, memberships, and agreement
    // of the two descent orders. Genuine corner rejections are not bugs.
    let g: CMatrix<S> = random_group_element(&mut src, dim);
    match (
        flag_factorize(&flag, &g, tol),
        flag_factorize_backward(&flag, &g, tol),
    ) {
        (Ok(fac), Ok(fac_b)) => {
            let product = &fac.lower * &fac.middle * &fac.upper;
            worst.check(rel_residual(&product, &g), tol.algebraic_rel);
            let g_scale = S::one() + g.norm();
            for (part, space) in [
                (&fac.lower, Space::NHat),
                (&fac.middle, Space::D),
                (&fac.upper, Space::N),
            ] {
                let r = membership(&flag, part, space).expect("matching dimensions");
                worst.check(r / g_scale, tol.algebraic_rel);
            }
            worst.check(rel_residual(&fac_b.lower, &fac.lower), tol.algebraic_rel);
            worst.check(rel_residual(&fac_b.middle, &fac.middle), tol.algebraic_rel);
            worst.check(rel_residual(&fac_b.upper, &fac.upper), tol.algebraic_rel);
        }
        (Err(FlagError::NotInOmega { .. }), Err(FlagError::NotInOmega { .. })) => {}
        _ => worst.fail(),
    }

    // The system <-> flag bijection round trips, and the system-side
    // compression agrees with the flag-side truncation.
    let system = alpha_inverse(&flag);
    match alpha(&system, tol) {
        Ok(back) => {
            let mut r = S::zero();
            for (qa, qb) in back.blocks().iter().zip(flag.blocks()) {
                let d = rel_residual(qa, qb);
                if d > r {
                    r = d;
                }
            }
            worst.check(r, tol.exact_rel);
        }
        Err(_) => worst.fail(),
    }
    match cpr_theta(&system, &x, tol) {
        Ok(theta) => worst.check(rel_residual(&theta, &phi), tol.exact_rel),
        Err(_) => worst.fail(),
    }

    worst.0
}

/// Chart-level connection calculus: connector, lifts, splitting, pull-backs,
/// and the finite-difference covariant derivative.
fn connections_trial<S: RealScalar>(mut src: RandomSource, dim: usize, tol: &Tolerance<S>) -> f64 {
    let mut worst = Worst::new();
    // Chart models stay small regardless of the ambient dimension: the
    // checks are dimension-uniform and small models keep suites fast.
    let base_dim = 2 + src.index(3);
    let fiber_dim = 2 + src.index(3.min(dim));
    let conn: LocalConnection<S> = random_affine_connection(&mut src, base_dim, fiber_dim);
    let x = src.gaussian_vector(base_dim);
    let y = src.gaussian_vector(base_dim);
    let xi = src.gaussian_vector(fiber_dim);
    let eta = src.gaussian_vector(fiber_dim);

    // Vertical vectors pass through the connector unchanged.
    let vertical = TangentChartVector::new(x.clone(), xi.clone(), DMatrix::zeros(base_dim, 1).column(0).into_owned(), eta.clone());
    match connector(&conn, &vertical) {
        Ok(k) => worst.check(rel_residual_vec(&k, &eta), tol.exact_rel),
        Err(_) => worst.fail(),
    }

    // The connector annihilates horizontal lifts, and the vertical +
    // horizontal decomposition reconstructs the input.
    match horizontal_lift(&conn, &x, &y, &xi) {
        Ok(lift) => match connector(&conn, &lift) {
            Ok(k) => {
                let r = k.norm() / (S::one() + lift.eta.norm());
                worst.check(r, tol.exact_rel);
            }
            Err(_) => worst.fail(),
        },
        Err(_) => worst.fail(),
    }
    let v = TangentChartVector::new(x.clone(), xi.clone(), y.clone(), eta.clone());
    match splitting_residual(&conn, &v) {
        Ok(r) => worst.check(r / (S::one() + eta.norm()), tol.exact_rel),
        Err(_) => worst.fail(),
    }

    // Pull-back along a quadratic morphism with exact chart derivative: the
    // connector squares commute, and pulling back the flat connection
    // yields the flat connection.
    let morphism =
        random_quadratic_morphism(&mut src, base_dim, base_dim, fiber_dim, false, true);
    match pullback(&conn, &morphism, tol) {
        Ok(pulled) => {
            let square = (|| -> Result<(), crate::connection::ConnectionError> {
                let k_pulled = connector(&pulled, &v)?;
                let d = morphism.fiber_map(&x)?;
                let k_target = connector(&conn, &morphism.push_tangent(&v)?)?;
                let r = rel_residual_vec(&(&d * k_pulled), &k_target);
                worst.check(r, tol.algebraic_rel);
                Ok(())
            })();
            if square.is_err() {
                worst.fail();
            }
        }
        Err(_) => worst.fail(),
    }
    let flat: LocalConnection<S> = LocalConnection::flat(base_dim, fiber_dim);
    let morphism_exact =
        random_quadratic_morphism(&mut src, base_dim, base_dim, fiber_dim, false, true);
    match pullback(&flat, &morphism_exact, tol) {
        Ok(pulled_flat) => match pulled_flat.christoffel(&x, &y, &xi) {
            Ok(gamma) => worst.check(gamma.norm() / (S::one() + xi.norm()), tol.exact_rel),
            Err(_) => worst.fail(),
        },
        Err(_) => worst.fail(),
    }

    // Finite-difference covariant derivative of an affine section matches
    // the closed form at FD accuracy.
    let a: CMatrix<S> = src.gaussian_matrix(fiber_dim, base_dim);
    let c = src.gaussian_vector(fiber_dim);
    let section = |p: &crate::CVector<S>| &a * p + &c;
    match covariant_derivative_chart(&conn, section, &x, &y) {
        Ok(fd) => match conn.christoffel(&x, &y, &section(&x)) {
            Ok(gamma) => {
                let closed = &a * &y + gamma;
                worst.check(rel_residual_vec(&fd, &closed), tol.transport_rel);
            }
            Err(_) => worst.fail(),
        },
        Err(_) => worst.fail(),
    }

    worst.0
}

/// Frame-bundle contracts: the fibration, the structure action, unitary
/// reduction, and the frame connection form.
fn stiefel_trial<S: RealScalar>(mut src: RandomSource, dim: usize, tol: &Tolerance<S>) -> f64 {
    let mut worst = Worst::new();
    let ranks = random_chain_ranks(&mut src, dim);
    let template: OrthoFlag<S> = random_ortho_flag(&mut src, dim, &ranks);
    let point = random_stiefel_point(&mut src, &template, &generation_tolerance(tol));

    // The fibration is constant on structure-group orbits.
    let sigma = match sigma_delta(&point, tol) {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    let a = random_upper_invertible(&mut src, &template, tol);
    match structure_action(&point, &a, tol) {
        Ok(moved) => match sigma_delta(&moved, tol) {
            Ok(sigma_moved) => worst.check(
                flag_residual(sigma_moved.as_flag(), sigma.as_flag()),
                tol.algebraic_rel,
            ),
            Err(_) => worst.fail(),
        },
        Err(_) => worst.fail(),
    }

    // Unitary reduction lands on a partial isometry over the same flag.
    match unitary_reduce(&point, tol) {
        Ok(reduced) => {
            let w = reduced.v();
            let pn = &template.projections()[template.steps() - 1];
            worst.check(rel_residual(&(w.adjoint() * w), pn), tol.algebraic_rel);
            match sigma_delta(reduced.point(), tol) {
                Ok(sigma_w) => worst.check(
                    flag_residual(sigma_w.as_flag(), sigma.as_flag()),
                    tol.algebraic_rel,
                ),
                Err(_) => worst.fail(),
            }
        }
        Err(_) => worst.fail(),
    }

    // Frame connection form: reproduces vertical generators, is equivariant
    // under block-diagonal frame changes, and splits tangents.
    let u: CMatrix<S> = random_unitary(&mut src, dim);
    let skew: CMatrix<S> = random_skew(&mut src, dim, 1.0);
    let vertical = diagonal_truncation(template.as_flag(), &skew).expect("matching dimensions");
    let x_vert = &u * &vertical;
    match connection_form_omega(&template, &u, &x_vert, tol) {
        Ok(w1) => worst.check(rel_residual(&w1, &vertical), tol.algebraic_rel),
        Err(_) => worst.fail(),
    }
    let g = random_block_diagonal_unitary(&mut src, &template);
    let ug = &u * &g;
    let x_full = &u * &skew;
    let translated = &x_full * &g;
    match (
        connection_form_omega(&template, &u, &x_full, tol),
        connection_form_omega(&template, &ug, &translated, tol),
    ) {
        (Ok(omega_u), Ok(omega_ug)) => {
            let expected = g.adjoint() * &omega_u * &g;
            worst.check(rel_residual(&omega_ug, &expected), tol.algebraic_rel);
            // Horizontal + vertical reconstruction and projector idempotency.
            let horizontal = &skew - &omega_u;
            worst.check(
                rel_residual(&(&u * (&horizontal + &omega_u)), &x_full),
                tol.exact_rel,
            );
            let twice =
                diagonal_truncation(template.as_flag(), &omega_u).expect("matching dimensions");
            worst.check(rel_residual(&twice, &omega_u), tol.algebraic_rel);
        }
        _ => worst.fail(),
    }

    worst.0
}

/// Transport along conjugation curves against the closed-form answer.
fn transport_trial<S: RealScalar>(mut src: RandomSource, dim: usize, tol: &Tolerance<S>) -> f64 {
    let mut worst = Worst::new();
    let ranks = random_chain_ranks(&mut src, dim);
    let base: OrthoFlag<S> = random_ortho_flag(&mut src, dim, &ranks);
    let h = random_horizontal_skew(&mut src, &base, 0.6);
    let expected = match crate::algebra::exp_skew(&h, tol) {
        Ok(e) => e,
        Err(_) => return f64::INFINITY,
    };
    let curve = match conjugation_curve(&base, &h, 48, tol) {
        Ok(c) => c,
        Err(_) => return f64::INFINITY,
    };
    let u0 = match align_flags(&base, &curve[0]) {
        Ok(u) => u,
        Err(_) => return f64::INFINITY,
    };
    match parallel_transport(&base, &curve, &u0, tol) {
        Ok(out) => {
            worst.check(rel_residual(&out.u, &expected), tol.transport_rel);
            worst.check(out.max_vertical_residual, tol.transport_rel);
            worst.check(out.final_flag_residual, tol.transport_rel);
            let id: CMatrix<S> = DMatrix::identity(dim, dim);
            worst.check(rel_residual(&(out.u.adjoint() * &out.u), &id), tol.algebraic_rel);
        }
        Err(_) => worst.fail(),
    }
    worst.0
}

/// Endpoint error of rotation transport over a doubling ladder of sample
/// counts. Returns the worst normalized deviation from first-order decay
/// together with the table itself.
fn rotation_convergence_table<S: RealScalar>(tol: &Tolerance<S>) -> (f64, Vec<ConvergenceRow>) {
    let theta = 1.3f64;
    let counts = [50usize, 100, 200, 400];
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(counts.len());
    let mut worst = Worst::new();
    // The half-open sampling grid undershoots the endpoint by theta/N, so
    // the expected error is sqrt(2)·theta/N; allow a factor-2 band.
    let constant = 2.0 * std::f64::consts::SQRT_2 * theta;
    for &samples in &counts {
        let (template, curve) = rotation_curve::<S>(S::from_double(theta), samples);
        let u0: CMatrix<S> = DMatrix::identity(2, 2);
        let error = match parallel_transport(&template, &curve, &u0, tol) {
            Ok(out) => {
                let id: CMatrix<S> = DMatrix::identity(2, 2);
                worst.check(
                    rel_residual(&(out.u.adjoint() * &out.u), &id),
                    tol.algebraic_rel,
                );
                (&out.u - rotation_limit(S::from_double(theta))).norm().as_f64()
            }
            Err(_) => {
                worst.fail();
                // Largest finite value rather than infinity: the table must
                // stay representable in JSON even when a transport refuses
                // to run at the tolerance under test.
                f64::MAX
            }
        };
        worst.ratio(error * samples as f64 / constant);
        let ratio = rows
            .last()
            .map(|prev: &ConvergenceRow| (error / prev.error).min(f64::MAX));
        if let Some(r) = ratio {
            // First-order decay: doubling the samples should halve the
            // error; [0.3, 0.7] maps to a normalized ratio of at most 1.
            worst.ratio((r - 0.5).abs() / 0.2);
        }
        rows.push(ConvergenceRow {
            samples,
            error,
            ratio,
        });
    }
    (worst.0, rows)
}

fn rel_residual_vec<S: RealScalar>(lhs: &crate::CVector<S>, rhs: &crate::CVector<S>) -> S {
    (lhs - rhs).norm() / (S::one() + rhs.norm())
}
