//! Synthesizes a certified design for the bundled two-state system, runs
//! the closed loop and prints a short summary.

use intobs::fixtures::fixture_example1;
use intobs::monitor::{check_bracketing, error_metrics, simulate_closed_loop};
use intobs::plant::InputMode;
use intobs::synthesis::design_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (system, decomp, scenario) = fixture_example1()?;
    let report = design_pipeline(
        &system,
        &decomp,
        &scenario.u_lower,
        &scenario.u_upper,
        InputMode::StateDriven,
    )?;
    let cert = report.certificate.as_ref().expect("stable design");
    println!(
        "gains:\n  lower = {:?}\n  upper = {:?}",
        report.design.l_lower.as_slice(),
        report.design.l_upper.as_slice()
    );
    println!(
        "certificate: lambda = {:.4}, C = {:.4}, r = {:.4}",
        cert.lambda, cert.big_c, cert.radius_r
    );

    let trace = simulate_closed_loop(&system, &report, &decomp, &scenario)?;
    let violations = check_bracketing(&trace, 1e-6);
    let metrics = error_metrics(&trace, cert)?;
    println!(
        "simulated {} steps: {} bracketing violations, max interval width {:.4}, envelope {}",
        trace.len() - 1,
        violations.violations.len(),
        metrics.max_width,
        if metrics.envelope_ok { "holds" } else { "violated" }
    );
    Ok(())
}
