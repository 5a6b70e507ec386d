//! End-to-end checks of the `flagcalc` binary: byte-determinism of seeded
//! reports, golden outputs for the one-shot tools, the exit-code contract
//! (0 success, 2 domain rejection, 1 I/O or format trouble), and the
//! environment seed override.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flagcalc_core::json::{self, CurveJson, FlagJson};
use flagcalc_core::stiefel::{rotation_curve, rotation_limit};
use flagcalc_core::Matrix64;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flagcalc"));
    cmd.env_remove("FLAGCALC_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("the binary launches")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by exit, not by a signal")
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf8")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf8")
}

/// Parse the report from stdout and zero the only timing field, leaving
/// everything that must be reproducible.
fn normalized_report(out: &Output) -> Value {
    let mut report: Value =
        serde_json::from_str(&stdout_text(out)).expect("stdout is a JSON report");
    report["elapsed_ms"] = Value::from(0u64);
    report
}

fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).expect("test input writes");
    path
}

/// Row-major real 2x2 matrix JSON: entries `[a, b, c, d]` become
/// `[[a, b], [c, d]]`.
fn matrix2(entries: [f64; 4]) -> String {
    format!(
        r#"{{"rows":2,"cols":2,"data":[[{},0],[{},0],[{},0],[{},0]]}}"#,
        entries[0], entries[1], entries[2], entries[3]
    )
}

fn coordinate_flag2() -> String {
    format!(
        r#"{{"dim":2,"projections":[{}]}}"#,
        matrix2([1.0, 0.0, 0.0, 0.0])
    )
}

fn matrix_from_value(value: &Value) -> Matrix64 {
    json::matrix_from_str::<f64>(&value.to_string()).expect("matrix JSON decodes")
}

fn matrix_from_file(path: &Path) -> Matrix64 {
    json::matrix_from_str::<f64>(&std::fs::read_to_string(path).expect("output file reads"))
        .expect("output file holds matrix JSON")
}

fn rel_error(got: &Matrix64, want: &Matrix64) -> f64 {
    (got - want).norm() / (1.0 + want.norm())
}

#[test]
fn criterion_10_cli_determinism_and_exit_codes() {
    // Repeated seeded invocations must agree byte for byte once the timing
    // field is zeroed.
    let args = ["verify", "flags", "--dim", "4", "--trials", "25", "--seed", "42"];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(exit_code(&first), 0, "criterion 10: clean suite must exit 0");
    let a = normalized_report(&first);
    let b = normalized_report(&second);
    assert_eq!(
        serde_json::to_string(&a).expect("report serializes"),
        serde_json::to_string(&b).expect("report serializes"),
        "criterion 10: repeated seeded reports must be byte-identical"
    );
    assert_eq!(a["failures"], Value::from(0u64), "criterion 10: flags suite must be clean");
    assert!(a["max_residual"].as_f64().expect("max_residual is a number") <= 1.0);

    // The transport suite also reports the first-order convergence table,
    // and stays deterministic with it.
    let targs = ["verify", "transport", "--dim", "2", "--trials", "1", "--seed", "7"];
    let t1 = run(&targs);
    let t2 = run(&targs);
    assert_eq!(exit_code(&t1), 0, "criterion 10: transport suite must exit 0");
    let ta = normalized_report(&t1);
    assert_eq!(ta, normalized_report(&t2), "criterion 10: transport reports must repeat");
    let table = ta["convergence"]
        .as_array()
        .expect("criterion 10: transport reports include the convergence table");
    assert_eq!(table.len(), 4, "criterion 10: table covers four sample counts");
    for row in &table[1..] {
        let ratio = row["ratio"].as_f64().expect("later rows carry error ratios");
        assert!(
            (0.3..=0.7).contains(&ratio),
            "criterion 10: first-order halving ratio out of band: {ratio}"
        );
    }

    // Golden factorization: exit 0 and the unique triangular factors.
    let dir = TempDir::new().expect("tempdir");
    let g_path = write_file(dir.path(), "g.json", &matrix2([2.0, 1.0, 1.0, 1.0]));
    let flag_path = write_file(dir.path(), "flag.json", &coordinate_flag2());
    let factors_path = dir.path().join("factors.json");
    let factored = run(&[
        "factor",
        "--input",
        g_path.to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        factors_path.to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&factored), 0, "criterion 10: golden factorization must exit 0");
    let factors: Value = serde_json::from_str(
        &std::fs::read_to_string(&factors_path).expect("factor output reads"),
    )
    .expect("factor output is JSON");
    let lower = matrix_from_value(&factors["lower"]);
    let middle = matrix_from_value(&factors["middle"]);
    let upper = matrix_from_value(&factors["upper"]);
    let want_lower =
        json::matrix_from_str::<f64>(&matrix2([1.0, 0.0, 0.5, 1.0])).expect("golden decodes");
    let want_middle =
        json::matrix_from_str::<f64>(&matrix2([2.0, 0.0, 0.0, 0.5])).expect("golden decodes");
    let want_upper =
        json::matrix_from_str::<f64>(&matrix2([1.0, 0.5, 0.0, 1.0])).expect("golden decodes");
    let g = json::matrix_from_str::<f64>(&matrix2([2.0, 1.0, 1.0, 1.0])).expect("golden decodes");
    let worst = rel_error(&lower, &want_lower)
        .max(rel_error(&middle, &want_middle))
        .max(rel_error(&upper, &want_upper))
        .max(rel_error(&(&lower * &middle * &upper), &g));
    assert!(
        worst <= 1.0e-12,
        "criterion 10: golden factors off by {worst:.3e}"
    );

    // Truncating the identity along any flag returns the identity.
    let id_path = write_file(dir.path(), "id.json", &matrix2([1.0, 0.0, 0.0, 1.0]));
    let trunc_path = dir.path().join("truncated.json");
    let truncated = run(&[
        "truncate",
        "--input",
        id_path.to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        trunc_path.to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&truncated), 0, "criterion 10: identity truncation must exit 0");
    let id = json::matrix_from_str::<f64>(&matrix2([1.0, 0.0, 0.0, 1.0])).expect("golden decodes");
    let trunc_err = rel_error(&matrix_from_file(&trunc_path), &id);
    assert!(
        trunc_err <= 1.0e-15,
        "criterion 10: identity truncation off by {trunc_err:.3e}"
    );

    // The coordinate swap has a singular corner compression: domain error.
    let swap_path = write_file(dir.path(), "swap.json", &matrix2([0.0, 1.0, 1.0, 0.0]));
    let rejected = run(&[
        "factor",
        "--input",
        swap_path.to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        dir.path().join("rejected.json").to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&rejected), 2, "criterion 10: singular corner must exit 2");
    assert!(
        stderr_text(&rejected).contains("NotInOmega"),
        "criterion 10: diagnostic must name NotInOmega, got: {}",
        stderr_text(&rejected)
    );

    // Missing and malformed inputs are I/O or format errors.
    let missing = run(&[
        "factor",
        "--input",
        dir.path().join("absent.json").to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        dir.path().join("never.json").to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&missing), 1, "criterion 10: missing input must exit 1");
    let garbled_path = write_file(dir.path(), "garbled.json", "not json {");
    let garbled = run(&[
        "factor",
        "--input",
        garbled_path.to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        dir.path().join("never.json").to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&garbled), 1, "criterion 10: malformed input must exit 1");

    // Domain errors in verify: impossible dimension, unknown suite.
    assert_eq!(
        exit_code(&run(&["verify", "all", "--dim", "1", "--trials", "2"])),
        2,
        "criterion 10: dimension 1 must exit 2"
    );
    assert_eq!(
        exit_code(&run(&["verify", "nonsense"])),
        2,
        "criterion 10: unknown suite must exit 2"
    );

    println!(
        "PASS criterion 10: seeded reports byte-identical, exit-code goldens hold \
         (worst golden residual {worst:.3e} within 1e-12)"
    );
}

#[test]
fn environment_seed_overrides_the_flag() {
    let with_env = bin()
        .env("FLAGCALC_SEED", "7")
        .args(["verify", "flags", "--dim", "4", "--trials", "10", "--seed", "42"])
        .output()
        .expect("the binary launches");
    assert_eq!(exit_code(&with_env), 0);
    let overridden = normalized_report(&with_env);
    assert_eq!(overridden["seed"], Value::from(7u64));
    let direct = run(&["verify", "flags", "--dim", "4", "--trials", "10", "--seed", "7"]);
    assert_eq!(
        overridden,
        normalized_report(&direct),
        "the environment seed must reproduce the --seed run exactly"
    );

    let bad = bin()
        .env("FLAGCALC_SEED", "banana")
        .args(["verify", "flags", "--dim", "4", "--trials", "2"])
        .output()
        .expect("the binary launches");
    assert_eq!(exit_code(&bad), 1, "an unparseable seed is a format error");
}

#[test]
fn failing_suites_exit_2_but_still_print_the_report() {
    // Shrinking every tolerance by nine orders of magnitude makes honest
    // rounding look like failure; the report must still arrive on stdout.
    let tight = run(&[
        "verify", "flags", "--dim", "4", "--trials", "5", "--seed", "1", "--tol", "1e-9",
    ]);
    assert_eq!(exit_code(&tight), 2);
    let report = normalized_report(&tight);
    assert!(report["failures"].as_u64().expect("failures is a count") > 0);
    assert!(stderr_text(&tight).contains("SuiteFailures"));

    // A nonpositive tolerance scale is rejected before any work happens.
    let zero = run(&["verify", "flags", "--dim", "4", "--trials", "2", "--tol", "0"]);
    assert_eq!(exit_code(&zero), 2);
    assert!(stderr_text(&zero).contains("BadTolerance"));
}

#[test]
fn orthogonalize_writes_the_range_projection() {
    let dir = TempDir::new().expect("tempdir");
    let oblique_path = write_file(dir.path(), "oblique.json", &matrix2([1.0, 1.0, 0.0, 0.0]));
    let out_path = dir.path().join("projection.json");
    let out = run(&[
        "orthogonalize",
        "--input",
        oblique_path.to_str().expect("utf8 path"),
        "--output",
        out_path.to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&out), 0);
    let want = json::matrix_from_str::<f64>(&matrix2([1.0, 0.0, 0.0, 0.0])).expect("golden");
    let err = rel_error(&matrix_from_file(&out_path), &want);
    assert!(err <= 1.0e-12, "range projection off by {err:.3e}");
}

#[test]
fn sigma_reports_the_carried_flag() {
    let dir = TempDir::new().expect("tempdir");
    let frame_path = write_file(dir.path(), "frame.json", &matrix2([1.0, 0.0, 0.0, 0.0]));
    let flag_path = write_file(dir.path(), "flag.json", &coordinate_flag2());
    let out_path = dir.path().join("carried.json");
    let out = run(&[
        "sigma",
        "--input",
        frame_path.to_str().expect("utf8 path"),
        "--flag",
        flag_path.to_str().expect("utf8 path"),
        "--output",
        out_path.to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&out), 0);
    let projections =
        json::flag_from_str::<f64>(&std::fs::read_to_string(&out_path).expect("output reads"))
            .expect("output is flag JSON");
    assert_eq!(projections.len(), 1);
    let want = json::matrix_from_str::<f64>(&matrix2([1.0, 0.0, 0.0, 0.0])).expect("golden");
    let err = rel_error(&projections[0], &want);
    assert!(err <= 1.0e-12, "carried flag off by {err:.3e}");
}

#[test]
fn transport_tool_follows_the_planar_rotation() {
    let theta = 0.8_f64;
    let samples = 200_usize;
    let (template, curve) = rotation_curve(theta, samples);
    let encoded = CurveJson {
        template: FlagJson::from_flag(template.as_flag()),
        samples: curve.iter().map(|s| FlagJson::from_flag(s.as_flag())).collect(),
    };
    let dir = TempDir::new().expect("tempdir");
    let curve_path = write_file(
        dir.path(),
        "curve.json",
        &serde_json::to_string(&encoded).expect("curve serializes"),
    );
    let out_path = dir.path().join("transport.json");
    let out = run(&[
        "transport",
        "--curve",
        curve_path.to_str().expect("utf8 path"),
        "--output",
        out_path.to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_text(&out));
    let result: Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).expect("output reads"))
            .expect("output is JSON");
    let u = matrix_from_value(&result["u"]);
    // The sampling grid stops one step short of t = 1, so the transported
    // frame matches the rotation at the last sampled angle.
    let want = rotation_limit(theta * (samples as f64 - 1.0) / samples as f64);
    let err = rel_error(&u, &want);
    assert!(err <= 1.0e-8, "transported frame off by {err:.3e}");
    assert!(result["max_vertical_residual"].as_f64().expect("number") <= 1.0e-6);
    assert!(result["final_flag_residual"].as_f64().expect("number") <= 1.0e-8);

    // Resampling the curve before integrating must stay on the orbit.
    let resampled_path = dir.path().join("resampled.json");
    let resampled = run(&[
        "transport",
        "--curve",
        curve_path.to_str().expect("utf8 path"),
        "--output",
        resampled_path.to_str().expect("utf8 path"),
        "--steps",
        "101",
    ]);
    assert_eq!(exit_code(&resampled), 0, "stderr: {}", stderr_text(&resampled));
    let coarse: Value =
        serde_json::from_str(&std::fs::read_to_string(&resampled_path).expect("output reads"))
            .expect("output is JSON");
    let coarse_u = matrix_from_value(&coarse["u"]);
    let coarse_err = rel_error(&coarse_u, &want);
    assert!(coarse_err <= 1.0e-6, "resampled transport off by {coarse_err:.3e}");
    assert!(coarse["final_flag_residual"].as_f64().expect("number") <= 1.0e-8);

    // Too few resample points cannot carry a curve.
    let refused = run(&[
        "transport",
        "--curve",
        curve_path.to_str().expect("utf8 path"),
        "--output",
        dir.path().join("never.json").to_str().expect("utf8 path"),
        "--steps",
        "1",
    ]);
    assert_eq!(exit_code(&refused), 2);
    assert!(stderr_text(&refused).contains("BadStepCount"));
}

#[test]
fn transport_rejects_samples_of_the_wrong_signature() {
    // A valid flag in the wrong dimension is sound JSON and a sound flag,
    // but cannot sit on the template's curve.
    let line3 = r#"{"dim":3,"projections":[{"rows":3,"cols":3,"data":[[1,0],[0,0],[0,0],[0,0],[0,0],[0,0],[0,0],[0,0],[0,0]]}]}"#;
    let curve = format!(
        r#"{{"template":{},"samples":[{},{}]}}"#,
        coordinate_flag2(),
        coordinate_flag2(),
        line3
    );
    let dir = TempDir::new().expect("tempdir");
    let curve_path = write_file(dir.path(), "mixed.json", &curve);
    let out = run(&[
        "transport",
        "--curve",
        curve_path.to_str().expect("utf8 path"),
        "--output",
        dir.path().join("never.json").to_str().expect("utf8 path"),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr_text(&out).contains("SignatureMismatch"),
        "stderr: {}",
        stderr_text(&out)
    );
}
