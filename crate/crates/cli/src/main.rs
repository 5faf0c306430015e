//! Command-line front-end: synthesize observer designs from config files,
//! simulate and monitor the closed loop, validate decompositions and
//! re-check reports.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 infeasible synthesis or
//! failed check, 4 bracketing/assumption violation, 5 I/O error.

use clap::{Parser, Subcommand, ValueEnum};
use intobs::format::{load_config, load_report, save_report, ConfigError};
use intobs::monitor::{
    check_bracketing, error_metrics, read_measurement_csv, replay_measurements,
    simulate_closed_loop, write_trace_csv, MonitorError,
};
use intobs::nn::make_auxiliary_pair;
use intobs::plant::{validate_decomposition, Scenario};
use intobs::synthesis::{
    design_pipeline, is_metzler, recompute_certificate, synthesize_gains_metzler, verify_design,
    DesignReport, GainMode, SynthesisError, STRICT_MARGIN,
};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_VIOLATION: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(
    name = "intobs",
    about = "Interval-observer synthesis and run-time safety monitoring",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthesisMode {
    /// Full pipeline: chain, stable gains and decay certificate.
    Stable,
    /// Positivity-only gains (no convergence certificate).
    Metzler,
}

#[derive(Subcommand)]
enum Command {
    /// Run the design pipeline on a config and write a report.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "stable")]
        mode: SynthesisMode,
    },
    /// Co-simulate the plant and estimator, write the trace CSV and check
    /// bracketing.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bracketing tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Override the scenario's integration step.
        #[arg(long)]
        dt_override: Option<f64>,
    },
    /// Replay a measurement CSV through the estimator and write the
    /// estimated bounds.
    Monitor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample-check the bounding decomposition of a config.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-verify a report's design conditions by substitution.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Minimum acceptable margin on the strict conditions.
        #[arg(long, default_value_t = STRICT_MARGIN - 1e-9)]
        tol: f64,
    },
}

fn config_exit(err: &ConfigError) -> u8 {
    match err {
        ConfigError::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn monitor_exit(err: &MonitorError) -> u8 {
    match err {
        MonitorError::Io(_) | MonitorError::Csv { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Synthesize { config, out, mode } => cmd_synthesize(&config, &out, mode),
        Command::Simulate {
            config,
            report,
            out,
            tol,
            dt_override,
        } => cmd_simulate(&config, &report, &out, tol, dt_override),
        Command::Monitor {
            config,
            report,
            measurements,
            out,
        } => cmd_monitor(&config, &report, &measurements, &out),
        Command::Validate {
            config,
            samples,
            seed,
        } => cmd_validate(&config, samples, seed),
        Command::Check {
            config,
            report,
            tol,
        } => cmd_check(&config, &report, tol),
    };
    ExitCode::from(code)
}

fn cmd_synthesize(config: &Path, out: &Path, mode: SynthesisMode) -> u8 {
    let (system, decomp, scenario) = match load_config(config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return config_exit(&e);
        }
    };
    let report = match mode {
        SynthesisMode::Stable => design_pipeline(
            &system,
            &decomp,
            &scenario.u_lower,
            &scenario.u_upper,
            system.nn_input_mode,
        ),
        SynthesisMode::Metzler => {
            synthesize_gains_metzler(&system.a_matrix, &system.c_matrix).map(|design| {
                DesignReport {
                    design,
                    chain: None,
                    certificate: None,
                    aux_pair: make_auxiliary_pair(&system.nn),
                    u_lower: scenario.u_lower.clone(),
                    u_upper: scenario.u_upper.clone(),
                    diagnostics: Default::default(),
                }
            })
        }
    };
    let report = match report {
        Ok(r) => r,
        Err(e @ SynthesisError::Infeasible { .. }) => {
            eprintln!("error (exit code {EXIT_INFEASIBLE}): {e}");
            return EXIT_INFEASIBLE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = save_report(&report, out) {
        eprintln!("error: {e}");
        return config_exit(&e);
    }
    println!("design mode: {}", report.design.mode.name());
    if let Some(cert) = &report.certificate {
        println!(
            "certificate: lambda {:.6e}, C {:.6e}, r {:.6e}",
            cert.lambda, cert.big_c, cert.radius_r
        );
    }
    if let Some(sub) = &report.diagnostics.substitution {
        println!("substitution margin: {:.3e}", sub.min_margin());
    }
    println!("report written to {}", out.display());
    EXIT_OK
}

fn load_pair(
    config: &Path,
    report: &Path,
) -> Result<
    (
        intobs::plant::LipschitzSystem,
        intobs::plant::BoundingDecomposition,
        Scenario,
        DesignReport,
    ),
    u8,
> {
    let (system, decomp, scenario) = load_config(config).map_err(|e| {
        eprintln!("error: {e}");
        config_exit(&e)
    })?;
    let report = load_report(report, &system).map_err(|e| {
        eprintln!("error: {e}");
        config_exit(&e)
    })?;
    Ok((system, decomp, scenario, report))
}

fn cmd_simulate(
    config: &Path,
    report_path: &Path,
    out: &Path,
    tol: f64,
    dt_override: Option<f64>,
) -> u8 {
    let (system, decomp, mut scenario, report) = match load_pair(config, report_path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if let Some(dt) = dt_override {
        scenario = match Scenario::new(
            scenario.u_signal.clone(),
            scenario.u_lower.clone(),
            scenario.u_upper.clone(),
            scenario.x0.clone(),
            scenario.x0_lower.clone(),
            scenario.x0_upper.clone(),
            scenario.t_end,
            dt,
        ) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        };
    }
    let trace = match simulate_closed_loop(&system, &report, &decomp, &scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return monitor_exit(&e);
        }
    };
    let file = match File::create(out) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", out.display());
            return EXIT_IO;
        }
    };
    let mut writer = BufWriter::new(file);
    if let Err(e) = write_trace_csv(&trace, &mut writer) {
        eprintln!("error: {e}");
        return EXIT_IO;
    }
    println!("trace written to {} ({} rows)", out.display(), trace.len());
    if let Some(cert) = &report.certificate {
        match error_metrics(&trace, cert) {
            Ok(m) => println!(
                "error metrics: max width {:.6e}, final width {:.6e}, envelope {}",
                m.max_width,
                m.final_width,
                if m.envelope_ok { "holds" } else { "VIOLATED" }
            ),
            Err(e) => eprintln!("warning: metrics unavailable: {e}"),
        }
    }
    let violations = check_bracketing(&trace, tol);
    if violations.pass() {
        println!("bracketing: clean at tolerance {tol:e}");
        EXIT_OK
    } else {
        println!(
            "bracketing: {} violations at tolerance {tol:e}, worst {:.6e}",
            violations.violations.len(),
            violations.worst
        );
        for v in violations.violations.iter().take(10) {
            println!(
                "  t = {:.6}, state {} escaped {} bound by {:.6e}",
                v.t,
                v.index + 1,
                match v.side {
                    intobs::monitor::ViolationSide::Lower => "the lower",
                    intobs::monitor::ViolationSide::Upper => "the upper",
                },
                v.magnitude
            );
        }
        if violations.violations.len() > 10 {
            println!("  ... {} more", violations.violations.len() - 10);
        }
        EXIT_VIOLATION
    }
}

fn cmd_monitor(
    config: &Path,
    report_path: &Path,
    measurements: &Path,
    out: &Path,
) -> u8 {
    let (system, decomp, scenario, report) = match load_pair(config, report_path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let file = match File::open(measurements) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot open {}: {e}", measurements.display());
            return EXIT_IO;
        }
    };
    let stream = match read_measurement_csv(BufReader::new(file), system.num_outputs()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return monitor_exit(&e);
        }
    };
    let states = match replay_measurements(
        &system,
        &report,
        &decomp,
        scenario.x0_lower.clone(),
        scenario.x0_upper.clone(),
        &stream,
    ) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return monitor_exit(&e);
        }
    };
    let file = match File::create(out) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", out.display());
            return EXIT_IO;
        }
    };
    let mut writer = BufWriter::new(file);
    if let Err(e) = write_estimates_csv(&states, &mut writer) {
        eprintln!("error: {e}");
        return EXIT_IO;
    }
    println!(
        "estimated bounds for {} samples written to {}",
        states.len(),
        out.display()
    );
    EXIT_OK
}

fn write_estimates_csv<W: std::io::Write>(
    states: &[intobs::monitor::EstimatorState],
    out: &mut W,
) -> std::io::Result<()> {
    let n = states[0].x_lower.len();
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",xl{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",xu{i}"));
    }
    writeln!(out, "{header}")?;
    for s in states {
        let mut row = format!("{}", s.t);
        for v in s.x_lower.iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in s.x_upper.iter() {
            row.push_str(&format!(",{v}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn cmd_validate(config: &Path, samples: usize, seed: u64) -> u8 {
    let (system, decomp, _) = match load_config(config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return config_exit(&e);
        }
    };
    let report = match validate_decomposition(&system, &decomp, samples, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    println!(
        "{} samples: worst sandwich margin {:.6e}, worst growth margin {:.6e}",
        report.samples, report.worst_sandwich_margin, report.worst_growth_margin
    );
    if report.pass() {
        println!("decomposition assumptions hold on every sample");
        EXIT_OK
    } else {
        println!("{} violations", report.violations);
        if let Some(ce) = &report.counterexample {
            println!(
                "counterexample ({}, margin {:.6e}):",
                ce.assumption, ce.margin
            );
            println!("  x_lower = {:?}", ce.x_lower.as_slice());
            println!("  x       = {:?}", ce.x.as_slice());
            println!("  x_upper = {:?}", ce.x_upper.as_slice());
        }
        EXIT_VIOLATION
    }
}

fn cmd_check(config: &Path, report_path: &Path, tol: f64) -> u8 {
    let (system, decomp, _, report) = match load_pair(config, report_path) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let mut ok = true;
    for (name, cl) in [
        ("lower", report.design.closed_loop_lower()),
        ("upper", report.design.closed_loop_upper()),
    ] {
        match is_metzler(&cl, 1e-9) {
            Ok(true) => println!("closed loop ({name} gain): Metzler"),
            Ok(false) => {
                println!("closed loop ({name} gain): NOT Metzler");
                ok = false;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    if report.design.mode != GainMode::MetzlerOnly {
        let (ut_lower, ut_upper) =
            intobs::synthesis::effective_row_terms(&system, report.chain.as_ref());
        let check = verify_design(
            &report.design,
            decomp.gamma_lower(),
            decomp.gamma_upper(),
            &ut_lower,
            &ut_upper,
        );
        println!(
            "substitution margins: X positivity {:.3e}, Metzler off-diagonal {:.3e}/{:.3e}, \
             diagonal {:.3e}/{:.3e}, row condition {:.3e}/{:.3e}",
            check.x_positivity,
            check.metzler_offdiag_lower,
            check.metzler_offdiag_upper,
            check.metzler_diag_lower,
            check.metzler_diag_upper,
            check.row_sum_lower,
            check.row_sum_upper
        );
        if check.min_margin() < tol {
            println!("margin below tolerance {tol:e}");
            ok = false;
        }
        match (&report.certificate, recompute_certificate(&system, &decomp, &report)) {
            (Some(stored), Ok(fresh)) => {
                let drift = (stored.lambda - fresh.lambda).abs()
                    + (stored.theta - fresh.theta).abs()
                    + (stored.big_c - fresh.big_c).abs()
                    + (stored.radius_r - fresh.radius_r).abs();
                println!("certificate recomputation drift: {drift:.3e}");
                if drift > 1e-9 {
                    println!("stored certificate does not match the gains");
                    ok = false;
                }
            }
            (None, _) => {
                println!("no certificate stored");
                ok = false;
            }
            (_, Err(e)) => {
                println!("certificate recomputation failed: {e}");
                ok = false;
            }
        }
    }
    if ok {
        println!("report verified");
        EXIT_OK
    } else {
        println!("report check FAILED");
        EXIT_INFEASIBLE
    }
}
