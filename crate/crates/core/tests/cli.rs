use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drem_mrac::experiment::BENCHMARK_TOML;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drem-mrac"))
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn report(dir: &Path, file: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(file)).unwrap()).unwrap()
}

#[test]
fn describe_benchmark() {
    let o = exec(&["describe", "builtin:benchmark"]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    assert!(t.contains("n = 4 states, m = 2 inputs"), "{t}");
    assert!(t.contains("controllability: rank 4 = n"), "{t}");
    assert!(t.contains("A_ref: Hurwitz"), "{t}");
    assert!(t.contains("matching residual"), "{t}");
}

#[test]
fn describe_flags_dependent_inputs_and_unstable_reference() {
    let dir = tempfile::tempdir().unwrap();
    let dependent = BENCHMARK_TOML.replace(
        "  [0.0,    0.0],\n  [0.0,    0.012],\n  [27.276, 0.576],\n  [0.395, -1.362],",
        "  [0.0, 0.0],\n  [1.0, 2.0],\n  [2.0, 4.0],\n  [0.5, 1.0],",
    );
    assert_ne!(dependent, BENCHMARK_TOML);
    let cfg = write_config(dir.path(), "dep.toml", &dependent);
    let o = exec(&["describe", &cfg]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    assert!(t.contains("rank 1 < 2"), "{t}");

    let unstable = BENCHMARK_TOML.replace(
        "[-0.204,  3.22,  -0.145,  -2.961]",
        "[-0.204,  3.22,  -0.145,  2.961]",
    );
    assert_ne!(unstable, BENCHMARK_TOML);
    let cfg = write_config(dir.path(), "unstable.toml", &unstable);
    let t = text(&exec(&["describe", &cfg]));
    assert!(t.contains("Hurwitz failure"), "{t}");
}

#[test]
fn dimension_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = BENCHMARK_TOML.replace(
        "  [0.0,    0.0,    1.0,    0.0],\n  [0.049, -0.083,  0.0,   -1.0],\n  [0.0,   -4.55,  -1.70,   0.172],\n  [0.0,    3.382, -0.065, -0.089],",
        "  [0.0, 0.0],\n  [0.049, -0.083],\n  [0.0, -4.55],\n  [0.0, 3.382],",
    );
    assert_ne!(bad, BENCHMARK_TOML);
    let cfg = write_config(dir.path(), "bad.toml", &bad);
    let o = exec(&["run", &cfg]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(2), "{t}");
    assert!(t.contains("plant.a: must be square"), "{t}");
}

#[test]
fn syntax_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "broken.toml", "name = \"x\"\n\n[plant\n");
    let o = exec(&["describe", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("line 3"), "{}", text(&o));
}

#[test]
fn missing_gamma1_warns_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "nog.toml",
        &BENCHMARK_TOML.replace("gamma1 = 10.0\n", ""),
    );
    let out = dir.path().join("out");
    let o = exec(&[
        "run",
        &cfg,
        "--T",
        "0.5",
        "--dt",
        "1e-3",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let t = text(&o);
    assert!(
        t.contains("warning: adaptation.gamma1 not set; using 10"),
        "{t}"
    );
    let r = report(&out, "benchmark_report.json");
    assert!(r["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|w| w.as_str().unwrap().contains("gamma1")));
}

#[test]
fn matched_run_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = exec(&[
        "run",
        "builtin:matched",
        "--T",
        "1",
        "--dt",
        "1e-3",
        "--out-dir",
        out,
        "--seed",
        "7",
    ]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(0), "{t}");
    let csv = fs::read_to_string(dir.path().join("matched.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,x1,x2,x3,x4,xref1"), "{header}");
    assert!(
        header.ends_with("thetatilde_norm,xi_norm,switch_flag"),
        "{header}"
    );
    assert_eq!(csv.lines().count(), 1 + 1001);
    let r = report(dir.path(), "matched_report.json");
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["seed"], 7);
    assert_eq!(r["exit_code"], 0);
    assert_eq!(r["run"]["integrator"], "rk4");
    let asserts = r["assertions"].as_array().unwrap();
    assert!(!asserts.is_empty());
    assert!(asserts.iter().all(|a| a["passed"] == true), "{asserts:?}");
}

#[test]
fn short_benchmark_fails_tracking_assertion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = exec(&[
        "run",
        "builtin:benchmark",
        "--T",
        "1",
        "--dt",
        "1e-3",
        "--out-dir",
        out,
    ]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(1), "{t}");
    assert!(t.contains("FAIL final_tracking_error"), "{t}");
    assert!(t.contains("PASS gamma_switch_count"), "{t}");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = BENCHMARK_TOML.replace(
        "[filter]",
        "[controller]\ntheta_hat0 = [[1e4, 0.0], [0.0, 0.0], [1e4, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]\n\n[filter]",
    );
    let cfg = write_config(dir.path(), "div.toml", &body);
    let out = dir.path().join("o");
    let o = exec(&[
        "run",
        &cfg,
        "--T",
        "2",
        "--dt",
        "1e-3",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(3), "{t}");
    assert!(t.contains("non-finite"), "{t}");
    let r = report(&out, "benchmark_report.json");
    assert_eq!(r["exit_code"], 3);
}

#[test]
fn bad_override_exits_2() {
    let o = exec(&["run", "builtin:benchmark", "--csv-precision", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = exec(&["run", "builtin:benchmark", "--dt=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("dt must be positive"));
}

#[test]
fn identical_runs_write_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        let o = exec(&[
            "run",
            "builtin:benchmark",
            "--T",
            "0.5",
            "--dt",
            "1e-3",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.code().is_some());
        bytes.push(fs::read(out.join("benchmark.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn batch_runs_each_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = exec(&[
        "run",
        "builtin:matched",
        "builtin:slow_gain",
        "--T",
        "0.5",
        "--dt",
        "1e-3",
        "--out-dir",
        out,
    ]);
    assert!(o.status.code().is_some());
    assert!(dir.path().join("matched.csv").exists());
    assert!(dir.path().join("slow_gain.csv").exists());
}

#[test]
fn small_gamma1_records_slower_decay() {
    let dir = tempfile::tempdir().unwrap();
    let slope = |name: &str| {
        let out = dir.path().join(name);
        exec(&[
            "run",
            &format!("builtin:{name}"),
            "--T",
            "2",
            "--dt",
            "1e-3",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        let r = report(&out, &format!("{name}_report.json"));
        r["assertions"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["name"] == "theta_tilde_decay_slope")
            .unwrap()["measured"]
            .as_f64()
            .unwrap()
    };
    let fast = slope("benchmark");
    let slow = slope("slow_gain");
    assert!(slow > fast, "slow {slow} fast {fast}");
    assert!(slow < 0.0);
}

#[test]
fn compare_needs_baseline_section() {
    let dir = tempfile::tempdir().unwrap();
    let body = BENCHMARK_TOML.replace("[baseline]", "[unused]");
    let body = body
        .lines()
        .skip_while(|l| !l.starts_with("name"))
        .filter(|l| {
            !l.starts_with("[unused]")
                && !l.starts_with("gamma = 1e-146")
                && !l.starts_with("signs")
        })
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = write_config(dir.path(), "nob.toml", &body);
    let o = exec(&[
        "compare",
        &cfg,
        "--T",
        "0.2",
        "--dt",
        "1e-3",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let t = text(&o);
    assert_eq!(o.status.code(), Some(2), "{t}");
    assert!(t.contains("[baseline]"), "{t}");
}

#[test]
fn compare_writes_one_trace_per_law() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = exec(&[
        "compare",
        "builtin:benchmark",
        "--T",
        "1",
        "--dt",
        "1e-3",
        "--out-dir",
        out,
    ]);
    let t = text(&o);
    assert!(o.status.code().is_some(), "{t}");
    for f in [
        "benchmark_proposed.csv",
        "benchmark_baseline_as_printed.csv",
        "benchmark_baseline_corrected.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let r = report(dir.path(), "benchmark_compare_report.json");
    assert_eq!(r["runs"].as_array().unwrap().len(), 3);
    let indep: Vec<&Value> = r["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["name"] == "regression_law_independent")
        .collect();
    assert_eq!(indep.len(), 2);
    assert!(indep.iter().all(|a| a["passed"] == true), "{indep:?}");
}
