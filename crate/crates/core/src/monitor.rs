//! Closed-loop simulation and run-time monitoring.
//!
//! The estimator integrates the coupled pair
//!
//! ```text
//! xl' = A xl + [B u]_lo + f_lo(xl, xu, y) + [E phi]_lo + L_lo (y - C xl)
//! xu' = A xu + [B u]_hi + f_hi(xl, xu, y) + [E phi]_hi + L_hi (y - C xu)
//! ```
//!
//! where the bracketed terms are interval evaluations against the input
//! envelope and the auxiliary networks. Measurements are held constant
//! across each integration step (zero-order hold): [`simulate_closed_loop`]
//! advances the estimator through exactly the same code path as
//! [`monitor_step`], so replaying a recorded measurement stream reproduces
//! the simulated estimator trajectory.
//!
//! `simulate_closed_loop` is a pure function; `monitor_step` transforms an
//! owned state, so one monitoring session is sequential while independent
//! sessions are free to run concurrently.

use crate::nn::{aux_forward, NnError};
use crate::plant::{InputMode, LipschitzSystem, PlantError, Scenario};
use crate::synthesis::{DesignReport, GainMode, StabilityCertificate};
use nalgebra::DVector;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("non-finite derivative at t = {t}")]
    IntegrationFault { t: f64 },
    #[error("non-finite measurement at t = {t}")]
    MeasurementFault { t: f64 },
    #[error("{0}")]
    Dimension(String),
    #[error("plant error: {0}")]
    Plant(#[from] PlantError),
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("design is {design} but the system is {system}")]
    ModeMismatch {
        design: &'static str,
        system: &'static str,
    },
    #[error("scenario input envelope escapes the envelope the design was certified for")]
    EnvelopeMismatch,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("csv parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Classical fixed-step fourth-order Runge-Kutta step.
pub fn rk4_step<F>(
    field: &mut F,
    state: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, MonitorError>
where
    F: FnMut(&DVector<f64>, f64) -> Result<DVector<f64>, MonitorError>,
{
    assert!(dt > 0.0, "dt must be positive");
    let check = |k: &DVector<f64>, stage_t: f64| {
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MonitorError::IntegrationFault { t: stage_t })
        }
    };
    let k1 = field(state, t)?;
    check(&k1, t)?;
    let k2 = field(&(state + 0.5 * dt * &k1), t + 0.5 * dt)?;
    check(&k2, t + 0.5 * dt)?;
    let k3 = field(&(state + 0.5 * dt * &k2), t + 0.5 * dt)?;
    check(&k3, t + 0.5 * dt)?;
    let k4 = field(&(state + dt * &k3), t + dt)?;
    check(&k4, t + dt)?;
    Ok(state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Lower and upper estimator states at a given time.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub t: f64,
}

/// Splits `m v_box` by the sign of each entry of `m`, accumulating in one
/// pass so a degenerate box reproduces the plain product exactly.
fn signed_product(
    m: &nalgebra::DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let mut out_lo = DVector::zeros(m.nrows());
    let mut out_hi = DVector::zeros(m.nrows());
    for i in 0..m.nrows() {
        let mut acc_lo = 0.0;
        let mut acc_hi = 0.0;
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v >= 0.0 {
                acc_lo += v * lo[j];
                acc_hi += v * hi[j];
            } else {
                acc_lo += v * hi[j];
                acc_hi += v * lo[j];
            }
        }
        out_lo[i] = acc_lo;
        out_hi[i] = acc_hi;
    }
    (out_lo, out_hi)
}

/// Derivatives of the estimator pair under a fixed measurement.
fn estimator_derivative(
    system: &LipschitzSystem,
    report: &DesignReport,
    decomp: &crate::plant::BoundingDecomposition,
    x_lower: &DVector<f64>,
    x_upper: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), MonitorError> {
    let n_y = system.num_outputs();
    if y.len() != n_y {
        return Err(MonitorError::Dimension(format!(
            "measurement must have {n_y} components, got {}",
            y.len()
        )));
    }
    // Nonlinearity bounds from the decomposition.
    let (f_lo, f_hi) = decomp.eval_bounds(x_lower, x_upper, Some(y))?;
    // Auxiliary-network bounds over the certified input envelope.
    let (eta_lo, eta_hi) = match system.nn_input_mode {
        InputMode::StateDriven => {
            let n_x = system.num_states();
            let n_u = system.num_inputs();
            let mut lo = DVector::zeros(n_x + n_u);
            let mut hi = DVector::zeros(n_x + n_u);
            lo.rows_mut(0, n_x).copy_from(x_lower);
            hi.rows_mut(0, n_x).copy_from(x_upper);
            lo.rows_mut(n_x, n_u).copy_from(&report.u_lower);
            hi.rows_mut(n_x, n_u).copy_from(&report.u_upper);
            (lo, hi)
        }
        InputMode::OutputDriven => {
            let vis_lo = system.visible_inputs(&report.u_lower);
            let vis_hi = system.visible_inputs(&report.u_upper);
            let k = vis_lo.len();
            let mut lo = DVector::zeros(n_y + k);
            let mut hi = DVector::zeros(n_y + k);
            lo.rows_mut(0, n_y).copy_from(y);
            hi.rows_mut(0, n_y).copy_from(y);
            lo.rows_mut(n_y, k).copy_from(&vis_lo);
            hi.rows_mut(n_y, k).copy_from(&vis_hi);
            (lo, hi)
        }
    };
    let (phi_lo, phi_hi) = aux_forward(&report.aux_pair, &eta_lo, &eta_hi)?;
    let (embed_lo, embed_hi) = signed_product(&system.nn_embedding, &phi_lo, &phi_hi);
    let (feed_lo, feed_hi) = signed_product(&system.b_matrix, &report.u_lower, &report.u_upper);

    let d_lo = &system.a_matrix * x_lower
        + feed_lo
        + f_lo
        + embed_lo
        + &report.design.l_lower * (y - &system.c_matrix * x_lower);
    let d_hi = &system.a_matrix * x_upper
        + feed_hi
        + f_hi
        + embed_hi
        + &report.design.l_upper * (y - &system.c_matrix * x_upper);
    Ok((d_lo, d_hi))
}

/// Advances the estimator one step from an externally supplied
/// measurement, holding `y` constant across the step.
pub fn monitor_step(
    system: &LipschitzSystem,
    report: &DesignReport,
    decomp: &crate::plant::BoundingDecomposition,
    est: &EstimatorState,
    y: &DVector<f64>,
    dt: f64,
) -> Result<EstimatorState, MonitorError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MonitorError::MeasurementFault { t: est.t });
    }
    let n = system.num_states();
    let mut stacked = DVector::zeros(2 * n);
    stacked.rows_mut(0, n).copy_from(&est.x_lower);
    stacked.rows_mut(n, n).copy_from(&est.x_upper);
    let mut field = |z: &DVector<f64>, _t: f64| {
        let xl = z.rows(0, n).into_owned();
        let xu = z.rows(n, n).into_owned();
        let (dl, du) = estimator_derivative(system, report, decomp, &xl, &xu, y)?;
        let mut d = DVector::zeros(2 * n);
        d.rows_mut(0, n).copy_from(&dl);
        d.rows_mut(n, n).copy_from(&du);
        Ok(d)
    };
    let next = rk4_step(&mut field, &stacked, est.t, dt)?;
    Ok(EstimatorState {
        x_lower: next.rows(0, n).into_owned(),
        x_upper: next.rows(n, n).into_owned(),
        t: est.t + dt,
    })
}

/// Uniform-grid record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct Trace {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Lower error `x - xl` at step `k`.
    pub fn error_lower(&self, k: usize) -> DVector<f64> {
        &self.states[k] - &self.lower[k]
    }

    /// Upper error `xu - x` at step `k`.
    pub fn error_upper(&self, k: usize) -> DVector<f64> {
        &self.upper[k] - &self.states[k]
    }

    /// Largest interval width across components at step `k`.
    pub fn width(&self, k: usize) -> f64 {
        let mut w: f64 = 0.0;
        for i in 0..self.upper[k].len() {
            w = w.max(self.upper[k][i] - self.lower[k][i]);
        }
        w
    }
}

/// Co-integrates the plant and the estimator pair over the scenario grid.
///
/// The plant sees the continuous input signal at every integration stage;
/// the estimator sees the measurement sampled at the step start and the
/// certified input envelope, exactly as the streaming monitor would.
pub fn simulate_closed_loop(
    system: &LipschitzSystem,
    report: &DesignReport,
    decomp: &crate::plant::BoundingDecomposition,
    scenario: &Scenario,
) -> Result<Trace, MonitorError> {
    let mode_ok = match report.design.mode {
        GainMode::MetzlerOnly => true,
        GainMode::StableStateDriven => system.nn_input_mode == InputMode::StateDriven,
        GainMode::StableOutputDriven => system.nn_input_mode == InputMode::OutputDriven,
    };
    if !mode_ok {
        return Err(MonitorError::ModeMismatch {
            design: report.design.mode.name(),
            system: system.nn_input_mode.name(),
        });
    }
    let n_u = system.num_inputs();
    if scenario.u_lower.len() != n_u
        || report.u_lower.len() != n_u
        || scenario.x0.len() != system.num_states()
    {
        return Err(MonitorError::Dimension(
            "scenario dimensions do not match the system".to_string(),
        ));
    }
    // The estimator brackets the run only if the scenario's inputs stay
    // inside the envelope the design was certified for.
    for i in 0..n_u {
        if scenario.u_lower[i] < report.u_lower[i] - 1e-12
            || scenario.u_upper[i] > report.u_upper[i] + 1e-12
        {
            return Err(MonitorError::EnvelopeMismatch);
        }
    }

    let steps = scenario.steps();
    let dt = scenario.dt;
    let mut x = scenario.x0.clone();
    let mut est = EstimatorState {
        x_lower: scenario.x0_lower.clone(),
        x_upper: scenario.x0_upper.clone(),
        t: 0.0,
    };
    let mut trace = Trace {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        lower: Vec::with_capacity(steps + 1),
        upper: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let y = system.output(&x);
        let u_now = scenario.input_at(t)?;
        trace.times.push(t);
        trace.states.push(x.clone());
        trace.lower.push(est.x_lower.clone());
        trace.upper.push(est.x_upper.clone());
        trace.outputs.push(y.clone());
        trace.inputs.push(u_now);
        if k == steps {
            break;
        }
        // Plant step: continuous input signal at each stage.
        let mut plant_field = |state: &DVector<f64>, stage_t: f64| {
            let u = scenario.input_at(stage_t)?;
            Ok(system.eval_dynamics(state, &u)?)
        };
        let next_x = rk4_step(&mut plant_field, &x, t, dt)?;
        // Estimator step: the measurement sampled at the step start.
        est = monitor_step(system, report, decomp, &est, &y, dt)?;
        x = next_x;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub t: f64,
    pub index: usize,
    pub side: ViolationSide,
    pub magnitude: f64,
}

/// Every grid point where the true state escapes the estimated interval.
#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
    pub worst: f64,
    pub tol: f64,
}

impl ViolationReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Flags every grid point and component where `x < xl - tol` or
/// `x > xu + tol`.
pub fn check_bracketing(trace: &Trace, tol: f64) -> ViolationReport {
    assert!(tol >= 0.0, "tolerance must be nonnegative");
    let mut report = ViolationReport {
        violations: Vec::new(),
        worst: 0.0,
        tol,
    };
    for k in 0..trace.len() {
        let x = &trace.states[k];
        for i in 0..x.len() {
            let below = trace.lower[k][i] - x[i];
            let above = x[i] - trace.upper[k][i];
            if below > tol {
                report.violations.push(Violation {
                    t: trace.times[k],
                    index: i,
                    side: ViolationSide::Lower,
                    magnitude: below,
                });
                report.worst = report.worst.max(below);
            }
            if above > tol {
                report.violations.push(Violation {
                    t: trace.times[k],
                    index: i,
                    side: ViolationSide::Upper,
                    magnitude: above,
                });
                report.worst = report.worst.max(above);
            }
        }
    }
    report
}

/// Error metrics of a trace against a decay certificate.
#[derive(Debug, Clone)]
pub struct ErrorMetrics {
    /// 1-norm of the stacked error `(x - xl, xu - x)` per step.
    pub xi_norms: Vec<f64>,
    pub max_width: f64,
    pub final_width: f64,
    /// Whether the certificate envelope bounds the error at every step.
    pub envelope_ok: bool,
    /// Smallest slack of the envelope over the run (negative = violated).
    pub worst_envelope_slack: f64,
}

const ENVELOPE_TOL: f64 = 1e-6;

/// Per-step error norms, interval widths and the certificate envelope
/// check `|xi(t)|_1 <= big_c exp(-lambda t) |xi(0)|_1 + radius_r`.
pub fn error_metrics(
    trace: &Trace,
    cert: &StabilityCertificate,
) -> Result<ErrorMetrics, MonitorError> {
    if trace.is_empty() {
        return Err(MonitorError::EmptyTrace);
    }
    let xi_norm = |k: usize| {
        trace.error_lower(k).iter().map(|v| v.abs()).sum::<f64>()
            + trace.error_upper(k).iter().map(|v| v.abs()).sum::<f64>()
    };
    let xi0 = xi_norm(0);
    let t0 = trace.times[0];
    let mut metrics = ErrorMetrics {
        xi_norms: Vec::with_capacity(trace.len()),
        max_width: 0.0,
        final_width: trace.width(trace.len() - 1),
        envelope_ok: true,
        worst_envelope_slack: f64::INFINITY,
    };
    for k in 0..trace.len() {
        let xi = xi_norm(k);
        metrics.xi_norms.push(xi);
        metrics.max_width = metrics.max_width.max(trace.width(k));
        let bound =
            cert.big_c * (-cert.lambda * (trace.times[k] - t0)).exp() * xi0 + cert.radius_r;
        let slack = bound + ENVELOPE_TOL - xi;
        metrics.worst_envelope_slack = metrics.worst_envelope_slack.min(slack);
        if slack < 0.0 {
            metrics.envelope_ok = false;
        }
    }
    Ok(metrics)
}

/// Writes the trace as CSV: `t, x*, xl*, xu*, y*, u*`, one row per step,
/// full round-trip double precision.
pub fn write_trace_csv<W: Write>(trace: &Trace, out: &mut W) -> Result<(), MonitorError> {
    if trace.is_empty() {
        return Err(MonitorError::EmptyTrace);
    }
    let n = trace.states[0].len();
    let m = trace.outputs[0].len();
    let p = trace.inputs[0].len();
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",xl{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",xu{i}"));
    }
    for i in 1..=m {
        header.push_str(&format!(",y{i}"));
    }
    for i in 1..=p {
        header.push_str(&format!(",u{i}"));
    }
    writeln!(out, "{header}")?;
    for k in 0..trace.len() {
        let mut row = format!("{}", trace.times[k]);
        for v in trace.states[k].iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in trace.lower[k].iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in trace.upper[k].iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in trace.outputs[k].iter() {
            row.push_str(&format!(",{v}"));
        }
        for v in trace.inputs[k].iter() {
            row.push_str(&format!(",{v}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// A timestamped measurement stream: `t` plus `y*` columns (extra columns
/// such as `u*` are ignored).
pub fn read_measurement_csv<R: BufRead>(
    reader: R,
    num_outputs: usize,
) -> Result<Vec<(f64, DVector<f64>)>, MonitorError> {
    let mut rows = Vec::new();
    let mut y_cols: Option<Vec<usize>> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(cols) = y_cols.as_ref() else {
            // first non-empty line is the header
            if fields.first() != Some(&"t") {
                return Err(MonitorError::Csv {
                    line: idx + 1,
                    message: "first column must be `t`".to_string(),
                });
            }
            let mut cols = Vec::new();
            for want in 1..=num_outputs {
                let name = format!("y{want}");
                let pos = fields.iter().position(|&f| f == name).ok_or_else(|| {
                    MonitorError::Csv {
                        line: idx + 1,
                        message: format!("missing column `{name}`"),
                    }
                })?;
                cols.push(pos);
            }
            y_cols = Some(cols);
            continue;
        };
        let parse = |s: &str| -> Result<f64, MonitorError> {
            s.parse().map_err(|_| MonitorError::Csv {
                line: idx + 1,
                message: format!("invalid number `{s}`"),
            })
        };
        let t = parse(fields[0])?;
        let mut y = DVector::zeros(num_outputs);
        for (j, &pos) in cols.iter().enumerate() {
            let field = fields.get(pos).ok_or_else(|| MonitorError::Csv {
                line: idx + 1,
                message: "row shorter than header".to_string(),
            })?;
            y[j] = parse(field)?;
        }
        rows.push((t, y));
    }
    if rows.is_empty() {
        return Err(MonitorError::Csv {
            line: 0,
            message: "no measurement rows".to_string(),
        });
    }
    Ok(rows)
}

/// Replays a measurement stream through [`monitor_step`] from the given
/// initial bounds, returning the estimator trajectory at every sample.
pub fn replay_measurements(
    system: &LipschitzSystem,
    report: &DesignReport,
    decomp: &crate::plant::BoundingDecomposition,
    x0_lower: DVector<f64>,
    x0_upper: DVector<f64>,
    measurements: &[(f64, DVector<f64>)],
) -> Result<Vec<EstimatorState>, MonitorError> {
    if measurements.is_empty() {
        return Err(MonitorError::EmptyTrace);
    }
    let mut est = EstimatorState {
        x_lower: x0_lower,
        x_upper: x0_upper,
        t: measurements[0].0,
    };
    let mut out = Vec::with_capacity(measurements.len());
    out.push(est.clone());
    for w in measurements.windows(2) {
        let (t_now, ref y) = w[0];
        let (t_next, _) = w[1];
        let dt = t_next - t_now;
        if !dt.is_finite() || dt <= 0.0 {
            return Err(MonitorError::Csv {
                line: 0,
                message: format!("non-increasing timestamps at t = {t_now}"),
            });
        }
        est = monitor_step(system, report, decomp, &est, y, dt)?;
        out.push(est.clone());
    }
    Ok(out)
}
