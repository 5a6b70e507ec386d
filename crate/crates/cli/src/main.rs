//! `flagcalc`: verification suites and one-shot computations over the flag
//! calculus, with JSON files in and JSON files out.
//!
//! Reports and results are JSON (reports on standard output, tool results to
//! `--output`); human-readable summaries go to standard error. Exit codes:
//! `0` success, `2` domain error (the input parsed but describes something
//! the operation rejects, e.g. a singular corner), `1` I/O or format error.
//! `FLAGCALC_SEED` overrides `--seed` when set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flagcalc_core::algebra::Tolerance;
use flagcalc_core::flag::{alpha, diagonal_truncation, flag_factorize, make_flag, OrthoFlag};
use flagcalc_core::idempotent::{orthogonalize, Idempotent};
use flagcalc_core::json::{self, FlagJson, JsonError, MatrixJson, TransportJson};
use flagcalc_core::stiefel::{align_flags, parallel_transport, sigma_delta, StiefelPoint};
use flagcalc_core::suites::run_suite;
use flagcalc_core::{Matrix64, OrthoFlag64, Tolerance64};

#[derive(Parser)]
#[command(
    name = "flagcalc",
    version,
    about = "Flag calculus in matrix *-algebras: verification suites, factorization, truncation, and frame transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded verification suite and print its JSON report.
    Verify {
        /// One of: flags, connections, stiefel, transport, all.
        suite: String,
        /// Ambient matrix dimension for the random instances (2..=64).
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Number of random trials per suite.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Root seed for the trial streams (FLAGCALC_SEED overrides).
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Scale factor applied to the default tolerances.
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Triangular factorization of a matrix along a flag: writes
    /// {"lower", "middle", "upper"}.
    Factor {
        /// Matrix JSON file holding the element to factor.
        #[arg(long)]
        input: PathBuf,
        /// Flag JSON file ({"dim", "projections": [...]}).
        #[arg(long)]
        flag: PathBuf,
        /// Destination for the factorization JSON.
        #[arg(long)]
        output: PathBuf,
        /// Scale factor applied to the default tolerances.
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Block-diagonal truncation of a matrix along a flag: writes a matrix.
    Truncate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        flag: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Orthogonal projection with the same range as an input idempotent:
    /// writes a matrix.
    Orthogonalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Orthogonal flag carried by a frame over a template flag: writes a
    /// flag.
    Sigma {
        /// Matrix JSON file holding the frame (supported on the top
        /// projection of the flag).
        #[arg(long)]
        input: PathBuf,
        /// Template flag JSON file.
        #[arg(long)]
        flag: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
    /// Parallel frame transport along a sampled curve of orthogonal flags:
    /// writes {"u", "max_vertical_residual", "final_flag_residual"}.
    Transport {
        /// Curve JSON file ({"template": flag, "samples": [flag, ...]}).
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Resample the curve to this many points (spectral rounding of the
        /// piecewise-linear interpolant) before integrating.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        tol: f64,
    },
}

/// Failure classified by exit code: I/O and format problems exit 1, domain
/// rejections exit 2.
enum CliError {
    IoOrFormat(String),
    Domain(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::IoOrFormat(_) => 1,
            CliError::Domain(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::IoOrFormat(m) | CliError::Domain(m) => m,
        }
    }
}

/// Domain error carrying the typed rejection name (e.g. `NotInOmega`) so
/// diagnostics stay greppable.
fn domain<E: std::fmt::Debug + std::fmt::Display>(err: E) -> CliError {
    let debug = format!("{err:?}");
    let name = debug
        .split([' ', '{', '('])
        .next()
        .unwrap_or("Rejected")
        .to_string();
    CliError::Domain(format!("{name}: {err}"))
}

fn format_error(err: JsonError) -> CliError {
    CliError::IoOrFormat(err.to_string())
}

fn io_error(path: &Path, err: std::io::Error) -> CliError {
    CliError::IoOrFormat(format!("{}: {err}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Verify {
            suite,
            dim,
            trials,
            seed,
            tol,
        } => verify(&suite, dim, trials, seed, tol),
        Command::Factor {
            input,
            flag,
            output,
            tol,
        } => factor(&input, &flag, &output, tol),
        Command::Truncate {
            input,
            flag,
            output,
            tol,
        } => truncate(&input, &flag, &output, tol),
        Command::Orthogonalize { input, output, tol } => orthogonalize_tool(&input, &output, tol),
        Command::Sigma {
            input,
            flag,
            output,
            tol,
        } => sigma(&input, &flag, &output, tol),
        Command::Transport {
            curve,
            output,
            steps,
            tol,
        } => transport(&curve, &output, steps, tol),
    }
}

fn make_tolerance(scale: f64) -> Result<Tolerance64, CliError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CliError::Domain(format!(
            "BadTolerance: --tol must be a positive finite scale factor, got {scale}"
        )));
    }
    Ok(Tolerance::default().scaled(scale))
}

fn effective_seed(flag_seed: u64) -> Result<u64, CliError> {
    match std::env::var("FLAGCALC_SEED") {
        Ok(text) => text.trim().parse::<u64>().map_err(|_| {
            CliError::IoOrFormat(format!(
                "FLAGCALC_SEED must be an unsigned 64-bit integer, got `{text}`"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(flag_seed),
        Err(std::env::VarError::NotUnicode(_)) => Err(CliError::IoOrFormat(
            "FLAGCALC_SEED is not valid unicode".to_string(),
        )),
    }
}

fn verify(suite: &str, dim: usize, trials: usize, seed: u64, tol: f64) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let seed = effective_seed(seed)?;
    let report = run_suite::<f64>(suite, dim, trials, seed, &tolerance).map_err(domain)?;
    let line = serde_json::to_string(&report)
        .expect("suite reports always serialize");
    println!("{line}");
    eprintln!(
        "suite {}: {} checks, {} failures, max residual {:.3e} (tolerance 1.0), seed {}, {} ms",
        report.suite, report.trials, report.failures, report.max_residual, report.seed,
        report.elapsed_ms
    );
    if report.failures > 0 {
        return Err(CliError::Domain(format!(
            "SuiteFailures: suite {} reported {} failing checks",
            report.suite, report.failures
        )));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .expect("results hold only finite numbers and strings");
    text.push('\n');
    write_text(path, &text)
}

fn load_matrix(path: &Path) -> Result<Matrix64, CliError> {
    json::matrix_from_str::<f64>(&read_text(path)?).map_err(format_error)
}

fn load_flag(path: &Path, tol: &Tolerance64) -> Result<flagcalc_core::Flag64, CliError> {
    let projections = json::flag_from_str::<f64>(&read_text(path)?).map_err(format_error)?;
    flag_from_matrices(projections, tol)
}

fn flag_from_matrices(
    projections: Vec<Matrix64>,
    tol: &Tolerance64,
) -> Result<flagcalc_core::Flag64, CliError> {
    let idempotents: Vec<Idempotent<f64>> = projections
        .into_iter()
        .map(|p| Idempotent::new(p, tol))
        .collect::<Result<_, _>>()
        .map_err(domain)?;
    make_flag(&idempotents, tol).map_err(domain)
}

fn ortho_flag_from_json(encoded: &FlagJson, tol: &Tolerance64) -> Result<OrthoFlag64, CliError> {
    let projections = encoded.to_projection_matrices::<f64>().map_err(format_error)?;
    let flag = flag_from_matrices(projections, tol)?;
    OrthoFlag::new(flag, tol).map_err(domain)
}

fn factor(input: &Path, flag_path: &Path, output: &Path, tol: f64) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let g = load_matrix(input)?;
    let flag = load_flag(flag_path, &tolerance)?;
    let fac = flag_factorize(&flag, &g, &tolerance).map_err(domain)?;
    write_json(
        output,
        &serde_json::json!({
            "lower": MatrixJson::from_matrix(&fac.lower),
            "middle": MatrixJson::from_matrix(&fac.middle),
            "upper": MatrixJson::from_matrix(&fac.upper),
        }),
    )?;
    eprintln!(
        "factored a {0}x{0} element along a {1}-step flag into {2}",
        g.nrows(),
        flag.steps(),
        output.display()
    );
    Ok(())
}

fn truncate(input: &Path, flag_path: &Path, output: &Path, tol: f64) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let x = load_matrix(input)?;
    let flag = load_flag(flag_path, &tolerance)?;
    let compressed = diagonal_truncation(&flag, &x).map_err(domain)?;
    write_json(output, &serde_json::json!(MatrixJson::from_matrix(&compressed)))?;
    eprintln!(
        "wrote the block-diagonal truncation of a {0}x{0} element to {1}",
        x.nrows(),
        output.display()
    );
    Ok(())
}

fn orthogonalize_tool(input: &Path, output: &Path, tol: f64) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let p = Idempotent::new(load_matrix(input)?, &tolerance).map_err(domain)?;
    let q = orthogonalize(&p, &tolerance).map_err(domain)?;
    write_json(output, &serde_json::json!(MatrixJson::from_matrix(q.value())))?;
    eprintln!(
        "wrote the orthogonal projection sharing the idempotent's range to {}",
        output.display()
    );
    Ok(())
}

fn sigma(input: &Path, flag_path: &Path, output: &Path, tol: f64) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let v = load_matrix(input)?;
    let flag = load_flag(flag_path, &tolerance)?;
    let point = StiefelPoint::new(v, flag, &tolerance).map_err(domain)?;
    let carried = sigma_delta(&point, &tolerance).map_err(domain)?;
    write_json(output, &serde_json::json!(FlagJson::from_flag(carried.as_flag())))?;
    eprintln!("wrote the carried flag to {}", output.display());
    Ok(())
}

/// Ranks of the chain projections (their traces; exact integers for valid
/// flags).
fn chain_ranks_of(flag: &flagcalc_core::Flag64) -> Vec<usize> {
    flag.projections()
        .iter()
        .map(|p| p.trace().re.round() as usize)
        .collect()
}

fn transport(
    curve_path: &Path,
    output: &Path,
    steps: Option<usize>,
    tol: f64,
) -> Result<(), CliError> {
    let tolerance = make_tolerance(tol)?;
    let encoded = json::curve_from_str(&read_text(curve_path)?).map_err(format_error)?;
    let template = ortho_flag_from_json(&encoded.template, &tolerance)?;
    let samples: Vec<OrthoFlag64> = encoded
        .samples
        .iter()
        .map(|f| ortho_flag_from_json(f, &tolerance))
        .collect::<Result<_, _>>()?;
    let ranks = chain_ranks_of(&template);
    for (k, sample) in samples.iter().enumerate() {
        if sample.dim() != template.dim() || chain_ranks_of(sample) != ranks {
            return Err(CliError::Domain(format!(
                "SignatureMismatch: sample {k} does not share the template's \
                 dimension and chain ranks"
            )));
        }
    }
    let samples = match steps {
        Some(n) => resample_curve(&template, &samples, n)?,
        None => samples,
    };
    let u0 = align_flags(&template, &samples[0]).map_err(domain)?;
    let result = parallel_transport(&template, &samples, &u0, &tolerance).map_err(domain)?;
    write_json(output, &serde_json::json!(TransportJson::from_transport(&result)))?;
    eprintln!(
        "transported a frame across {} samples: max vertical residual {:.3e}, final flag residual {:.3e}",
        samples.len(),
        result.max_vertical_residual,
        result.final_flag_residual
    );
    Ok(())
}

/// Resample a curve to `n` points: linearly interpolate the chain
/// projections between adjacent samples, then round jointly back to an
/// orthogonal flag through the spectral decomposition of the summed chain.
fn resample_curve(
    template: &OrthoFlag64,
    samples: &[OrthoFlag64],
    n: usize,
) -> Result<Vec<OrthoFlag64>, CliError> {
    if n < 2 {
        return Err(CliError::Domain(format!(
            "BadStepCount: --steps must be at least 2, got {n}"
        )));
    }
    let ranks = chain_ranks_of(template);
    if samples.len() == 1 {
        return Ok(vec![samples[0].clone(); n]);
    }
    let segments = (samples.len() - 1) as f64;
    let m = template.dim();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let position = segments * k as f64 / (n - 1) as f64;
        let left = (position.floor() as usize).min(samples.len() - 2);
        let w = position - left as f64;
        let mut summed: Matrix64 = Matrix64::zeros(m, m);
        for j in 0..ranks.len() {
            let a = &samples[left].projections()[j];
            let b = &samples[left + 1].projections()[j];
            summed += a.scale(1.0 - w) + b.scale(w);
        }
        out.push(spectral_flag(&summed, &ranks)?);
    }
    Ok(out)
}

/// Nearest orthogonal flag with the given chain ranks to a hermitian
/// "staircase score": eigenvectors grouped by descending eigenvalue become
/// the blocks. The score of an exact flag (the sum of its projections) has
/// integer eigenvalues separated by 1, so nearby inputs round stably.
fn spectral_flag(score: &Matrix64, ranks: &[usize]) -> Result<OrthoFlag64, CliError> {
    let m = score.nrows();
    let hermitian = (score + score.adjoint()).scale(0.5);
    let eigen = hermitian.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("hermitian eigenvalues are finite")
    });
    let tolerance = Tolerance::default();
    let mut blocks: Vec<Idempotent<f64>> = Vec::with_capacity(ranks.len() + 1);
    let mut prev = 0usize;
    for &r in ranks.iter().chain(std::iter::once(&m)) {
        let mut basis = Matrix64::zeros(m, r - prev);
        for (c, &which) in order[prev..r].iter().enumerate() {
            basis.set_column(c, &eigen.eigenvectors.column(which));
        }
        let q = &basis * basis.adjoint();
        let q = (&q + q.adjoint()).scale(0.5);
        blocks.push(Idempotent::new(q, &tolerance).map_err(domain)?);
        prev = r;
    }
    let flag = alpha(&blocks, &tolerance).map_err(domain)?;
    OrthoFlag::new(flag, &tolerance).map_err(domain)
}
