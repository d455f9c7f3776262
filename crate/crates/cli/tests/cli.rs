use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/fid_synthetic.csv");

fn nvdephase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvdephase"))
        .args(args)
        .env_remove("NVDEPHASE_OUT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn first_row(csv: &Path) -> (f64, f64) {
    let text = std::fs::read_to_string(csv).unwrap();
    let row = text.lines().find(|l| l.starts_with(|c: char| c.is_ascii_digit())).unwrap();
    let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
    (v[0], v[1])
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_fid_analytic_starts_at_0_40() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvdephase(&["simulate", "--protocol", "fid", "--engine", "analytic", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (tau, signal) = first_row(&dir.path().join("trace.csv"));
    assert_eq!(tau, 0.0);
    assert!((signal - 0.40).abs() < 1e-12, "{signal}");
    let rec = read_json(&dir.path().join("trace.json"));
    assert_eq!(rec["schema_version"], 1);
    assert_eq!(rec["trace"]["schema_version"], 1);
    assert_eq!(rec["config"]["protocol"]["phi0"], 0.0);
}

#[test]
fn seeded_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = nvdephase(&["simulate", "--shots", "0", "--seed", "7", "--out", s(d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["trace.csv", "trace.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn noisy_run_reproduces_from_its_echo_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = nvdephase(&["simulate", "--shots", "500", "--seed", "7", "--threads", "1", "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = a.join("trace.json");
    let o = nvdephase(&["simulate", "--config", s(&echo), "--threads", "3", "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace.csv", "trace.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nvdephase"))
        .args(["simulate", "--set", "protocol.tau_grid=[0, 1]"])
        .env("NVDEPHASE_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("trace.csv").exists());
}

#[test]
fn hahn_lindblad_completes_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = nvdephase(&["simulate", "--protocol", "hahn", "--engine", "lindblad", "--out", s(dir.path())]);
    let secs = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 60.0, "{secs:.1} s");
    let rec = read_json(&dir.path().join("trace.json"));
    assert_eq!(rec["config"]["protocol"]["protocol"], "hahn");
    assert_eq!(rec["trace"]["tau"].as_array().unwrap().len(), 384);
}

#[test]
fn config_typo_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"spin": {"t1e_ms": 5.5, "t2star_mss": 8.66}}"#).unwrap();
    let o = nvdephase(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("t2star_mss"));
    let o = nvdephase(&["simulate", "--set", "protocol.shotz=3", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("trace.csv").exists());
}

#[test]
fn stiff_generator_is_a_numeric_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvdephase(&[
        "simulate",
        "--engine",
        "lindblad",
        "--set",
        "protocol.kappa=1e9",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn fit_fixture(extra: &[&str]) -> (Output, Value) {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["fit", FIXTURE, "--out", s(dir.path())];
    args.extend_from_slice(extra);
    let o = nvdephase(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("fid_synthetic.fit.json"));
    (o, report)
}

fn param(report: &Value, fit: &str, name: &str) -> Value {
    report[fit]["params"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == name)
        .unwrap()
        .clone()
}

#[test]
fn fit_of_fixture_reports_c0_and_t2star() {
    let (o, report) = fit_fixture(&[]);
    let out = stdout(&o);
    assert!(out.contains("c0") && out.contains("T2* (ms)") && out.contains("13C, FID"), "{out}");
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["converged"], true);
    let c0 = param(&report, "envelope", "c0");
    let t2 = param(&report, "envelope", "t2");
    assert!((c0["value"].as_f64().unwrap() - 0.80).abs() < 0.05, "{c0}");
    assert!((t2["value"].as_f64().unwrap() - 8.66).abs() < 1.0, "{t2}");
    assert!(c0["stderr"].as_f64().unwrap() > 0.0);
    let d0 = param(&report, "background", "d0")["value"].as_f64().unwrap();
    assert!((d0 - 0.086).abs() < 0.005, "{d0}");
}

#[test]
fn mask_holds_kappa_fixed() {
    let (o, report) = fit_fixture(&["--mask", "kappa=fixed:0.0606"]);
    let k = param(&report, "background", "kappa");
    assert_eq!(k["fixed"], true);
    assert_eq!(k["value"].as_f64().unwrap(), 0.0606);
    assert_eq!(param(&report, "envelope", "kappa")["value"].as_f64().unwrap(), 0.0606);
    assert!(stdout(&o).contains("(fixed)"));

    let dir = tempfile::tempdir().unwrap();
    let o = nvdephase(&["fit", FIXTURE, "--mask", "t2=fixed:3", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn global_fit_runs_on_fixture() {
    let (_, report) = fit_fixture(&["--global"]);
    let c0 = param(&report, "global", "c0")["value"].as_f64().unwrap();
    assert!((c0 - 0.80).abs() < 0.05, "{c0}");
}

#[test]
fn constant_trace_warns_and_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = std::fs::read_to_string(FIXTURE).unwrap();
    let mut text = String::from("# schema_version: 1\ntau_ms,signal,stderr\n");
    for line in fixture.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())) {
        text += &format!("{},0.35,0\n", line.split(',').next().unwrap());
    }
    let path = dir.path().join("flat.csv");
    std::fs::write(&path, text).unwrap();
    let o = nvdephase(&["fit", s(&path), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let report = read_json(&dir.path().join("flat.fit.json"));
    assert_eq!(report["converged"], false);
}

#[test]
fn validate_passes_and_prints_nu_minus_1() {
    let o = nvdephase(&["validate"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    let row = out.lines().find(|l| l.starts_with("precession frequency m_S=-1")).unwrap();
    assert!(row.contains("0.110 MHz") && row.ends_with("PASS"), "{row}");
    let sum = out.lines().find(|l| l.starts_with("population sum")).unwrap();
    let v: f64 = sum.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(v < 1e-12, "{sum}");
    assert!(out.contains(", 0 failed"));
}

#[test]
fn validate_fails_on_wrong_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"spin": {"a_zx": 0.3}}"#).unwrap();
    let o = nvdephase(&["validate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

fn svg_ok(p: &PathBuf) -> String {
    let text = std::fs::read_to_string(p).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    text
}

#[test]
fn plot_trace_and_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvdephase(&["fit", FIXTURE, "--out", s(dir.path())]);
    assert!(o.status.success());
    let report = dir.path().join("fid_synthetic.fit.json");
    let o = nvdephase(&["plot", FIXTURE, s(&report), "--log", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace_svg = svg_ok(&dir.path().join("fid_synthetic.svg"));
    // two window panels, each with data and a fitted overlay
    assert_eq!(trace_svg.matches("<polyline").count(), 2);
    let env_svg = svg_ok(&dir.path().join("fid_synthetic.fit.svg"));
    assert!(env_svg.contains("Background") && env_svg.contains("Oscillation amplitude"));
}

#[test]
fn plot_of_empty_trace_errors_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "# schema_version: 1\ntau_ms,signal,stderr\n").unwrap();
    let out = dir.path().join("plots");
    let o = nvdephase(&["plot", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let o = nvdephase(&["plot", s(&dir.path().join("missing.csv")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
