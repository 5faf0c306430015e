//! End-to-end tests of the binary against the shipped example configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn intobs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intobs"))
}

fn run(args: &[&str]) -> Output {
    intobs()
        .args(args)
        .current_dir(workspace_root())
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    let got = out.status.code().expect("no signal");
    assert_eq!(
        got,
        code,
        "expected exit {code}, got {got}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn example1_config() -> String {
    workspace_root()
        .join("configs/example1.json")
        .display()
        .to_string()
}

fn acc_config() -> String {
    workspace_root().join("configs/acc.json").display().to_string()
}

#[test]
fn config_files_match_builtin_fixtures() {
    let (sys_file, _, scen_file) =
        intobs::format::load_config(&workspace_root().join("configs/example1.json")).unwrap();
    let (sys_fix, _, scen_fix) = intobs::fixtures::fixture_example1().unwrap();
    assert_eq!(sys_file.a_matrix, sys_fix.a_matrix);
    assert_eq!(sys_file.c_matrix, sys_fix.c_matrix);
    assert_eq!(sys_file.nn, sys_fix.nn);
    assert_eq!(scen_file.u_lower, scen_fix.u_lower);
    assert_eq!(scen_file.dt, scen_fix.dt);

    let (sys_file, _, scen_file) =
        intobs::format::load_config(&workspace_root().join("configs/acc.json")).unwrap();
    let (sys_fix, _, scen_fix) = intobs::fixtures::fixture_acc().unwrap();
    assert_eq!(sys_file.a_matrix, sys_fix.a_matrix);
    assert_eq!(sys_file.c_matrix, sys_fix.c_matrix);
    assert_eq!(sys_file.b_matrix, sys_fix.b_matrix);
    assert_eq!(sys_file.nn, sys_fix.nn);
    assert_eq!(sys_file.nn_embedding, sys_fix.nn_embedding);
    assert_eq!(sys_file.nn_visible_inputs, sys_fix.nn_visible_inputs);
    assert_eq!(scen_file.x0, scen_fix.x0);
    assert_eq!(scen_file.t_end, scen_fix.t_end);
}

#[test]
fn synthesize_and_simulate_state_driven_example() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("example1_report.json");
    let out = run(&[
        "synthesize",
        "--config",
        &example1_config(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(report.exists());

    let trace = dir.path().join("example1_trace.csv");
    let out = run(&[
        "simulate",
        "--config",
        &example1_config(),
        "--report",
        report.to_str().unwrap(),
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let text = fs::read_to_string(&trace).unwrap();
    // header plus 10001 records at dt = 1e-3 over [0, 10]
    assert_eq!(text.lines().count(), 10_002);
    assert!(text.lines().next().unwrap().starts_with("t,x1,x2,xl1,xl2"));

    // byte-identical reruns
    let trace2 = dir.path().join("example1_trace_again.csv");
    let out = run(&[
        "simulate",
        "--config",
        &example1_config(),
        "--report",
        report.to_str().unwrap(),
        "--out",
        trace2.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert_eq!(fs::read(&trace).unwrap(), fs::read(&trace2).unwrap());

    // the check command accepts the synthesized report
    let out = run(&[
        "check",
        "--config",
        &example1_config(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    // replaying the trace's own measurement columns reproduces the bounds
    let monitored = dir.path().join("example1_monitor.csv");
    let out = run(&[
        "monitor",
        "--config",
        &example1_config(),
        "--report",
        report.to_str().unwrap(),
        "--measurements",
        trace.to_str().unwrap(),
        "--out",
        monitored.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let sim_rows: Vec<&str> = text.lines().skip(1).collect();
    let mon_text = fs::read_to_string(&monitored).unwrap();
    let mon_rows: Vec<&str> = mon_text.lines().skip(1).collect();
    assert_eq!(sim_rows.len(), mon_rows.len());
    // spot-check the final bounds agree to replay tolerance
    let last_sim: Vec<f64> = sim_rows
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let last_mon: Vec<f64> = mon_rows
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    // trace columns: t,x1,x2,xl1,xl2,xu1,xu2,...; monitor: t,xl1,xl2,xu1,xu2
    for i in 0..4 {
        assert!((last_sim[3 + i] - last_mon[1 + i]).abs() <= 1e-6);
    }
}

#[test]
fn synthesize_acc_default_mode_reports_infeasible_step() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("acc_report.json");
    let out = run(&[
        "synthesize",
        "--config",
        &acc_config(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("step 4"),
        "diagnosis must name the failing step: {stderr}"
    );
    assert!(!report.exists());
}

#[test]
fn acc_flow_with_metzler_mode() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("acc_metzler.json");
    let out = run(&[
        "synthesize",
        "--config",
        &acc_config(),
        "--out",
        report.to_str().unwrap(),
        "--mode",
        "metzler",
    ]);
    assert_exit(&out, 0);

    let trace = dir.path().join("acc_trace.csv");
    // measurements are sampled and held over each 1e-2 step, so exactly
    // observed channels carry a hold-lag of that order; check at the
    // hold-scale tolerance
    let out = run(&[
        "simulate",
        "--config",
        &acc_config(),
        "--report",
        report.to_str().unwrap(),
        "--out",
        trace.to_str().unwrap(),
        "--tol",
        "0.05",
    ]);
    assert_exit(&out, 0);
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 10_002);
}

#[test]
fn tampered_report_is_exposed_by_simulation_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(&[
        "synthesize",
        "--config",
        &example1_config(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    // break the upper gain: a large first-row entry destroys the Metzler
    // structure of A - L C and drags the upper bound below the state
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    doc["l_upper"][0][0] = serde_json::json!(50.0);
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string(&doc).unwrap()).unwrap();

    let trace = dir.path().join("tampered_trace.csv");
    let out = run(&[
        "simulate",
        "--config",
        &example1_config(),
        "--report",
        tampered.to_str().unwrap(),
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_exit(&out, 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("violations"), "violation listing expected: {stdout}");
    assert!(stdout.contains("escaped"), "violation listing expected: {stdout}");

    let out = run(&[
        "check",
        "--config",
        &example1_config(),
        "--report",
        tampered.to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("NOT Metzler"), "{stdout}");
}

#[test]
fn validate_passes_on_fixture_configs() {
    for config in [example1_config(), acc_config()] {
        let out = run(&["validate", "--config", &config, "--samples", "2000"]);
        assert_exit(&out, 0);
    }
}

#[test]
fn config_errors_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown field -> config error (2)
    let bad = dir.path().join("bad.json");
    let mut doc: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(workspace_root().join("configs/example1.json")).unwrap(),
    )
    .unwrap();
    doc["unexpected_key"] = serde_json::json!(1);
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = run(&[
        "synthesize",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unexpected_key"), "{stderr}");

    // missing file -> io error (5)
    let out = run(&[
        "synthesize",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 5);

    // infeasible constructed system -> exit 3 with step diagnosis
    let infeasible = dir.path().join("infeasible.json");
    fs::write(
        &infeasible,
        r#"{
  "A": [[1]],
  "C": [[0]],
  "f": ["0"],
  "beta": 0,
  "network": {"layers": [{"activation": "purelin", "weights": [[0, 0]], "bias": [0]}]},
  "nn_input_mode": "state_driven",
  "embedding": [[1]],
  "decomposition": {
    "f_lower": ["0"], "f_upper": ["0"],
    "gamma_lower_1": 0, "gamma_lower_2": 0, "gamma_upper_1": 0, "gamma_upper_2": 0,
    "rho_lower": [0], "rho_upper": [0]
  },
  "scenario": {
    "u": ["0"], "u_lower": [0], "u_upper": [0],
    "x0": [0], "x0_lower": [-1], "x0_upper": [1],
    "t_end": 1, "dt": 0.01
  }
}"#,
    )
    .unwrap();
    let out = run(&[
        "synthesize",
        "--config",
        infeasible.to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("step 4"), "{stderr}");
}

#[test]
fn dt_override_changes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    assert_exit(
        &run(&[
            "synthesize",
            "--config",
            &example1_config(),
            "--out",
            report.to_str().unwrap(),
        ]),
        0,
    );
    let trace = dir.path().join("trace.csv");
    let out = run(&[
        "simulate",
        "--config",
        &example1_config(),
        "--report",
        report.to_str().unwrap(),
        "--out",
        trace.to_str().unwrap(),
        "--dt-override",
        "0.01",
    ]);
    assert_exit(&out, 0);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 1002);
}
