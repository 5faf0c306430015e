//! Plant models: linear dynamics plus a Lipschitz nonlinearity and an
//! embedded feedforward network, together with the bounding decomposition
//! the estimator relies on and the scenario describing a run.
//!
//! The continuous-time model is
//!
//! ```text
//! x' = A x + B u + f(.) + E phi(eta)
//! y  = C x
//! ```
//!
//! where `f` reads either the state or the measured output (declared by
//! [`FSpace`]), `E` maps the network output into state-derivative channels
//! and `eta` is `[x; u]` (state-driven) or `[y; u']` (output-driven, with
//! `u'` the input components visible to the network). `B` is a direct
//! input feedthrough for input terms that enter linearly outside the
//! network; it is zero for most systems.
//!
//! Everything here is immutable after construction and evaluation is pure.

use crate::expr::{EvalContext, Expr, ExprError, Symbol};
use crate::nn::{NeuralNetwork, NnError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("{0}")]
    Dimension(String),
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("{what} references `{symbol}`, which is outside its allowed symbols ({allowed})")]
    ForbiddenSymbol {
        what: &'static str,
        symbol: String,
        allowed: &'static str,
    },
    #[error("scenario invalid: {0}")]
    Scenario(String),
}

/// Which vector the network reads alongside the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    StateDriven,
    OutputDriven,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::StateDriven => "state_driven",
            InputMode::OutputDriven => "output_driven",
        }
    }
}

/// Symbol space the nonlinearity `f` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FSpace {
    State,
    Output,
}

/// A neural-network-enabled plant with Lipschitz nonlinearity.
#[derive(Debug, Clone)]
pub struct LipschitzSystem {
    pub a_matrix: DMatrix<f64>,
    pub c_matrix: DMatrix<f64>,
    /// Direct input feedthrough (`n_x x n_u`), zero when absent.
    pub b_matrix: DMatrix<f64>,
    pub f: Vec<Expr>,
    pub f_space: FSpace,
    /// Lipschitz constant of `f`; carried for documentation and validation,
    /// not used by synthesis (the decomposition's gammas/rhos are).
    pub beta: f64,
    pub nn: NeuralNetwork,
    pub nn_input_mode: InputMode,
    /// Input components (0-based) fed to the network in output-driven mode.
    pub nn_visible_inputs: Vec<usize>,
    /// `n_x x n_L` map from network output to state-derivative channels.
    pub nn_embedding: DMatrix<f64>,
}

impl LipschitzSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_matrix: DMatrix<f64>,
        c_matrix: DMatrix<f64>,
        b_matrix: DMatrix<f64>,
        f: Vec<Expr>,
        f_space: FSpace,
        beta: f64,
        nn: NeuralNetwork,
        nn_input_mode: InputMode,
        nn_visible_inputs: Vec<usize>,
        nn_embedding: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n_x = a_matrix.nrows();
        if a_matrix.ncols() != n_x {
            return Err(PlantError::Dimension(format!(
                "A must be square, got {}x{}",
                a_matrix.nrows(),
                a_matrix.ncols()
            )));
        }
        if c_matrix.ncols() != n_x || c_matrix.nrows() == 0 {
            return Err(PlantError::Dimension(format!(
                "C must be n_y x {n_x} with n_y >= 1, got {}x{}",
                c_matrix.nrows(),
                c_matrix.ncols()
            )));
        }
        let n_y = c_matrix.nrows();
        if b_matrix.nrows() != n_x {
            return Err(PlantError::Dimension(format!(
                "B must have {n_x} rows, got {}",
                b_matrix.nrows()
            )));
        }
        let n_u = b_matrix.ncols();
        if f.len() != n_x {
            return Err(PlantError::Dimension(format!(
                "f must have {n_x} components, got {}",
                f.len()
            )));
        }
        for (component, e) in f.iter().enumerate() {
            for sym in e.symbols() {
                let ok = match (f_space, sym) {
                    (FSpace::State, Symbol::State(i)) => i < n_x,
                    (FSpace::Output, Symbol::Output(i)) => i < n_y,
                    _ => false,
                };
                if !ok {
                    return Err(PlantError::ForbiddenSymbol {
                        what: if f_space == FSpace::State {
                            "f (state space)"
                        } else {
                            "f (output space)"
                        },
                        symbol: format!("{sym} in component {}", component + 1),
                        allowed: "state symbols x<k> or output symbols y<k>, per f_space",
                    });
                }
            }
        }
        if beta < 0.0 {
            return Err(PlantError::Dimension(format!(
                "beta must be nonnegative, got {beta}"
            )));
        }
        let mut seen = vec![false; n_u];
        for &idx in &nn_visible_inputs {
            if idx >= n_u || seen[idx] {
                return Err(PlantError::Dimension(format!(
                    "nn_visible_inputs entry {} out of range or repeated (n_u = {n_u})",
                    idx + 1
                )));
            }
            seen[idx] = true;
        }
        let expected_nn_input = match nn_input_mode {
            InputMode::StateDriven => n_x + n_u,
            InputMode::OutputDriven => n_y + nn_visible_inputs.len(),
        };
        if nn.input_dim() != expected_nn_input {
            return Err(PlantError::Dimension(format!(
                "network input dim {} does not match {} mode requirement {expected_nn_input}",
                nn.input_dim(),
                nn_input_mode.name()
            )));
        }
        if nn_embedding.nrows() != n_x || nn_embedding.ncols() != nn.output_dim() {
            return Err(PlantError::Dimension(format!(
                "embedding must be {n_x}x{}, got {}x{}",
                nn.output_dim(),
                nn_embedding.nrows(),
                nn_embedding.ncols()
            )));
        }
        Ok(LipschitzSystem {
            a_matrix,
            c_matrix,
            b_matrix,
            f,
            f_space,
            beta,
            nn,
            nn_input_mode,
            nn_visible_inputs,
            nn_embedding,
        })
    }

    pub fn num_states(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn num_outputs(&self) -> usize {
        self.c_matrix.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b_matrix.ncols()
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c_matrix * x
    }

    /// Restricts `u` to the components visible to the network.
    pub fn visible_inputs(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nn_visible_inputs.len(), |i, _| {
            u[self.nn_visible_inputs[i]]
        })
    }

    /// Assembles the network input for the current mode.
    pub fn nn_input(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self.nn_input_mode {
            InputMode::StateDriven => {
                let mut v = DVector::zeros(x.len() + u.len());
                v.rows_mut(0, x.len()).copy_from(x);
                v.rows_mut(x.len(), u.len()).copy_from(u);
                v
            }
            InputMode::OutputDriven => {
                let y = self.output(x);
                let vis = self.visible_inputs(u);
                let mut v = DVector::zeros(y.len() + vis.len());
                v.rows_mut(0, y.len()).copy_from(&y);
                v.rows_mut(y.len(), vis.len()).copy_from(&vis);
                v
            }
        }
    }

    fn eval_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        let ctx = match self.f_space {
            FSpace::State => EvalContext {
                state: Some(x),
                ..Default::default()
            },
            FSpace::Output => EvalContext {
                output: Some(y),
                ..Default::default()
            },
        };
        let mut out = DVector::zeros(self.f.len());
        for (i, e) in self.f.iter().enumerate() {
            out[i] = e.eval(&ctx)?;
        }
        Ok(out)
    }

    /// State derivative `A x + B u + f + E phi` at the given point.
    pub fn eval_dynamics(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, PlantError> {
        if x.len() != self.num_states() || u.len() != self.num_inputs() {
            return Err(PlantError::Dimension(format!(
                "eval_dynamics expects x ({}) and u ({}), got {} and {}",
                self.num_states(),
                self.num_inputs(),
                x.len(),
                u.len()
            )));
        }
        let y = self.output(x);
        let f_val = self.eval_f(x, &y)?;
        let phi = self.nn.forward(&self.nn_input(x, u))?;
        Ok(&self.a_matrix * x + &self.b_matrix * u + f_val + &self.nn_embedding * phi)
    }
}

/// Bounding decomposition of the nonlinearity: functions of the state box
/// (and the measured output) that sandwich `f`, plus the growth scalars and
/// offsets that bound the gap.
#[derive(Debug, Clone)]
pub struct BoundingDecomposition {
    pub f_lower: Vec<Expr>,
    pub f_upper: Vec<Expr>,
    pub gamma_lower_1: f64,
    pub gamma_lower_2: f64,
    pub gamma_upper_1: f64,
    pub gamma_upper_2: f64,
    pub rho_lower: DVector<f64>,
    pub rho_upper: DVector<f64>,
}

impl BoundingDecomposition {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f_lower: Vec<Expr>,
        f_upper: Vec<Expr>,
        gamma_lower_1: f64,
        gamma_lower_2: f64,
        gamma_upper_1: f64,
        gamma_upper_2: f64,
        rho_lower: DVector<f64>,
        rho_upper: DVector<f64>,
    ) -> Result<Self, PlantError> {
        let n = f_lower.len();
        if f_upper.len() != n || rho_lower.len() != n || rho_upper.len() != n {
            return Err(PlantError::Dimension(
                "decomposition component counts disagree".to_string(),
            ));
        }
        for g in [gamma_lower_1, gamma_lower_2, gamma_upper_1, gamma_upper_2] {
            if g < 0.0 {
                return Err(PlantError::Dimension(format!(
                    "gamma scalars must be nonnegative, got {g}"
                )));
            }
        }
        if rho_lower.iter().chain(rho_upper.iter()).any(|&r| r < 0.0) {
            return Err(PlantError::Dimension(
                "rho vectors must be nonnegative".to_string(),
            ));
        }
        for e in f_lower.iter().chain(f_upper.iter()) {
            for sym in e.symbols() {
                let ok = matches!(
                    sym,
                    Symbol::StateLower(_) | Symbol::StateUpper(_) | Symbol::Output(_)
                );
                if !ok {
                    return Err(PlantError::ForbiddenSymbol {
                        what: "bounding decomposition",
                        symbol: sym.to_string(),
                        allowed: "xl<k>, xu<k>, y<k>",
                    });
                }
            }
        }
        Ok(BoundingDecomposition {
            f_lower,
            f_upper,
            gamma_lower_1,
            gamma_lower_2,
            gamma_upper_1,
            gamma_upper_2,
            rho_lower,
            rho_upper,
        })
    }

    pub fn gamma_lower(&self) -> f64 {
        self.gamma_lower_1 + self.gamma_lower_2
    }

    pub fn gamma_upper(&self) -> f64 {
        self.gamma_upper_1 + self.gamma_upper_2
    }

    /// Evaluates the stored bound expressions on a state box. `y` is the
    /// measured output, required when the expressions reference `y<k>`.
    pub fn eval_bounds(
        &self,
        x_lower: &DVector<f64>,
        x_upper: &DVector<f64>,
        y: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>), PlantError> {
        let ctx = EvalContext {
            state_lower: Some(x_lower),
            state_upper: Some(x_upper),
            output: y,
            ..Default::default()
        };
        let mut lo = DVector::zeros(self.f_lower.len());
        let mut hi = DVector::zeros(self.f_upper.len());
        for i in 0..lo.len() {
            lo[i] = self.f_lower[i].eval(&ctx)?;
            hi[i] = self.f_upper[i].eval(&ctx)?;
        }
        Ok((lo, hi))
    }
}

/// One sampled counterexample to a decomposition assumption.
#[derive(Debug, Clone)]
pub struct DecompositionCounterexample {
    pub x_lower: DVector<f64>,
    pub x: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub assumption: &'static str,
    pub margin: f64,
}

/// Result of Monte Carlo validation of a decomposition.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest sandwich slack `min(f - f_lo, f_hi - f)` seen.
    pub worst_sandwich_margin: f64,
    /// Smallest growth-bound slack seen.
    pub worst_growth_margin: f64,
    pub counterexample: Option<DecompositionCounterexample>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Half-width of the sampling range used by [`validate_decomposition`].
const VALIDATION_RANGE: f64 = 10.0;
const VALIDATION_SLACK: f64 = 1e-9;

/// Draws `sample_count` random boxes with interior points and checks both
/// decomposition assumptions elementwise. Violations are report content,
/// not errors.
pub fn validate_decomposition(
    system: &LipschitzSystem,
    decomp: &BoundingDecomposition,
    sample_count: usize,
    seed: u64,
) -> Result<ValidationReport, PlantError> {
    assert!(sample_count >= 1, "sample_count must be at least 1");
    let n = system.num_states();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        samples: sample_count,
        violations: 0,
        worst_sandwich_margin: f64::INFINITY,
        worst_growth_margin: f64::INFINITY,
        counterexample: None,
    };
    for _ in 0..sample_count {
        let center = DVector::from_fn(n, |_, _| {
            rng.random_range(-VALIDATION_RANGE..=VALIDATION_RANGE)
        });
        let half = DVector::from_fn(n, |_, _| rng.random_range(0.0..=VALIDATION_RANGE / 2.0));
        let x_lower = &center - &half;
        let x_upper = &center + &half;
        let x = DVector::from_fn(n, |i, _| rng.random_range(x_lower[i]..=x_upper[i]));
        let y = system.output(&x);
        let f_val = system.eval_f(&x, &y)?;
        let (f_lo, f_hi) = decomp.eval_bounds(&x_lower, &x_upper, Some(&y))?;

        let record = |assumption: &'static str,
                          margin: f64,
                          worst: &mut f64,
                          report_violations: &mut usize,
                          counterexample: &mut Option<DecompositionCounterexample>| {
            if margin < *worst {
                *worst = margin;
            }
            if margin < -VALIDATION_SLACK {
                *report_violations += 1;
                if counterexample.is_none() {
                    *counterexample = Some(DecompositionCounterexample {
                        x_lower: x_lower.clone(),
                        x: x.clone(),
                        x_upper: x_upper.clone(),
                        assumption,
                        margin,
                    });
                }
            }
        };

        for i in 0..n {
            record(
                "sandwich (lower)",
                f_val[i] - f_lo[i],
                &mut report.worst_sandwich_margin,
                &mut report.violations,
                &mut report.counterexample,
            );
            record(
                "sandwich (upper)",
                f_hi[i] - f_val[i],
                &mut report.worst_sandwich_margin,
                &mut report.violations,
                &mut report.counterexample,
            );
            let e_lo = x[i] - x_lower[i];
            let e_hi = x_upper[i] - x[i];
            record(
                "growth (lower)",
                decomp.gamma_lower_1 * e_lo + decomp.gamma_lower_2 * e_hi + decomp.rho_lower[i]
                    - (f_val[i] - f_lo[i]),
                &mut report.worst_growth_margin,
                &mut report.violations,
                &mut report.counterexample,
            );
            record(
                "growth (upper)",
                decomp.gamma_upper_1 * e_lo + decomp.gamma_upper_2 * e_hi + decomp.rho_upper[i]
                    - (f_hi[i] - f_val[i]),
                &mut report.worst_growth_margin,
                &mut report.violations,
                &mut report.counterexample,
            );
        }
    }
    Ok(report)
}

/// An input signal, its envelope, initial conditions and the time grid.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub u_signal: Vec<Expr>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub x0: DVector<f64>,
    pub x0_lower: DVector<f64>,
    pub x0_upper: DVector<f64>,
    pub t_end: f64,
    pub dt: f64,
}

/// Number of integration steps on the grid; the trace has one more record.
pub fn grid_steps(t_end: f64, dt: f64) -> usize {
    let raw = t_end / dt;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u_signal: Vec<Expr>,
        u_lower: DVector<f64>,
        u_upper: DVector<f64>,
        x0: DVector<f64>,
        x0_lower: DVector<f64>,
        x0_upper: DVector<f64>,
        t_end: f64,
        dt: f64,
    ) -> Result<Self, PlantError> {
        let n_u = u_signal.len();
        if u_lower.len() != n_u || u_upper.len() != n_u {
            return Err(PlantError::Scenario(format!(
                "input envelope must have {n_u} components"
            )));
        }
        let n_x = x0.len();
        if x0_lower.len() != n_x || x0_upper.len() != n_x {
            return Err(PlantError::Scenario(format!(
                "initial bounds must have {n_x} components"
            )));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(PlantError::Scenario(format!("dt must be positive, got {dt}")));
        }
        if t_end < dt {
            return Err(PlantError::Scenario(format!(
                "t_end ({t_end}) must be at least dt ({dt})"
            )));
        }
        for e in &u_signal {
            for sym in e.symbols() {
                if sym != Symbol::Time {
                    return Err(PlantError::ForbiddenSymbol {
                        what: "input signal",
                        symbol: sym.to_string(),
                        allowed: "t",
                    });
                }
            }
        }
        for i in 0..n_x {
            if x0_lower[i] > x0[i] || x0[i] > x0_upper[i] {
                return Err(PlantError::Scenario(format!(
                    "x0 component {} = {} outside [{}, {}]",
                    i + 1,
                    x0[i],
                    x0_lower[i],
                    x0_upper[i]
                )));
            }
        }
        let scenario = Scenario {
            u_signal,
            u_lower,
            u_upper,
            x0,
            x0_lower,
            x0_upper,
            t_end,
            dt,
        };
        // The envelope must hold on the whole grid.
        let steps = grid_steps(t_end, dt);
        for k in 0..=steps {
            let t = k as f64 * dt;
            let u = scenario.input_at(t)?;
            for i in 0..n_u {
                if u[i] < scenario.u_lower[i] - 1e-9 || u[i] > scenario.u_upper[i] + 1e-9 {
                    return Err(PlantError::Scenario(format!(
                        "u{}({t}) = {} escapes envelope [{}, {}]",
                        i + 1,
                        u[i],
                        scenario.u_lower[i],
                        scenario.u_upper[i]
                    )));
                }
            }
        }
        Ok(scenario)
    }

    pub fn input_at(&self, t: f64) -> Result<DVector<f64>, PlantError> {
        let ctx = EvalContext {
            time: Some(t),
            ..Default::default()
        };
        let mut u = DVector::zeros(self.u_signal.len());
        for (i, e) in self.u_signal.iter().enumerate() {
            u[i] = e.eval(&ctx)?;
        }
        Ok(u)
    }

    pub fn steps(&self) -> usize {
        grid_steps(self.t_end, self.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::fixtures;
    use crate::nn::{ActivationKind, Layer};

    fn zero_nn(inputs: usize, outputs: usize) -> NeuralNetwork {
        NeuralNetwork::new(vec![Layer::new(
            DMatrix::zeros(outputs, inputs),
            DVector::zeros(outputs),
            ActivationKind::Purelin,
        )
        .unwrap()])
        .unwrap()
    }

    fn linear_system() -> LipschitzSystem {
        LipschitzSystem::new(
            DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::zeros(2, 1),
            vec![Expr::Const(0.0), Expr::Const(0.0)],
            FSpace::State,
            0.0,
            zero_nn(3, 2),
            InputMode::StateDriven,
            vec![],
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn linear_part_only() {
        let sys = linear_system();
        let dx = sys
            .eval_dynamics(
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![0.0]),
            )
            .unwrap();
        assert_eq!(dx, DVector::from_vec(vec![-2.0, 3.0]));
    }

    #[test]
    fn superposition_when_linear() {
        let sys = linear_system();
        let u = DVector::from_vec(vec![0.0]);
        let x1 = DVector::from_vec(vec![0.3, -0.7]);
        let x2 = DVector::from_vec(vec![-1.1, 0.2]);
        let lhs = sys.eval_dynamics(&(&x1 + &x2), &u).unwrap();
        let rhs = sys.eval_dynamics(&x1, &u).unwrap() + sys.eval_dynamics(&x2, &u).unwrap();
        for i in 0..2 {
            assert!((lhs[i] - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let sys = linear_system();
        assert!(sys
            .eval_dynamics(&DVector::zeros(3), &DVector::zeros(1))
            .is_err());
    }

    #[test]
    fn nn_input_dim_checked_at_construction() {
        // network expects n_x + n_u = 3 inputs; give it 2
        let err = LipschitzSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            vec![Expr::Const(0.0), Expr::Const(0.0)],
            FSpace::State,
            0.0,
            zero_nn(2, 2),
            InputMode::StateDriven,
            vec![],
            DMatrix::identity(2, 2),
        );
        assert!(matches!(err, Err(PlantError::Dimension(_))));
    }

    #[test]
    fn exact_output_decomposition_evaluates_to_f_of_y() {
        let (_, decomp, _) = fixtures::fixture_acc().unwrap();
        let y = DVector::from_vec(vec![10.0, 50.0, 2.0]);
        let lo_box = DVector::zeros(6);
        let hi_box = DVector::zeros(6);
        let (lo, hi) = decomp.eval_bounds(&lo_box, &hi_box, Some(&y)).unwrap();
        assert_eq!(lo, hi);
        assert!((lo[2] - (-0.0144)).abs() < 1e-15);
        assert!((lo[5] - (-0.01)).abs() < 1e-15);
    }

    #[test]
    fn zero_decomposition_evaluates_to_zero() {
        let decomp = BoundingDecomposition::new(
            vec![Expr::Const(0.0); 2],
            vec![Expr::Const(0.0); 2],
            0.0,
            0.0,
            0.0,
            0.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let (lo, hi) = decomp
            .eval_bounds(&DVector::zeros(2), &DVector::zeros(2), None)
            .unwrap();
        assert_eq!(lo, DVector::zeros(2));
        assert_eq!(hi, DVector::zeros(2));
    }

    #[test]
    fn degenerate_box_keeps_sandwich() {
        // f = x1^2 on [0, 3] with interval bounds xl1*xl1 (wrong in general
        // but fine on a degenerate box) checks the evaluation plumbing only.
        let sys = LipschitzSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            vec![parse_expression("x1^2").unwrap()],
            FSpace::State,
            0.0,
            zero_nn(2, 1),
            InputMode::StateDriven,
            vec![],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let decomp = BoundingDecomposition::new(
            vec![parse_expression("xl1*xu1").unwrap()],
            vec![parse_expression("xu1*xu1").unwrap()],
            0.0,
            0.0,
            0.0,
            0.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        let x = DVector::from_vec(vec![2.0]);
        let y = sys.output(&x);
        let f_val = sys.eval_f(&x, &y).unwrap();
        let (lo, hi) = decomp.eval_bounds(&x, &x, Some(&y)).unwrap();
        assert!(lo[0] <= f_val[0] && f_val[0] <= hi[0]);
    }

    #[test]
    fn zero_f_validates_with_zero_margins() {
        let sys = linear_system();
        let decomp = BoundingDecomposition::new(
            vec![Expr::Const(0.0); 2],
            vec![Expr::Const(0.0); 2],
            0.0,
            0.0,
            0.0,
            0.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let report = validate_decomposition(&sys, &decomp, 500, 1).unwrap();
        assert!(report.pass());
        assert_eq!(report.worst_sandwich_margin, 0.0);
        assert_eq!(report.worst_growth_margin, 0.0);
    }

    #[test]
    fn broken_decomposition_yields_counterexample() {
        let sys = linear_system();
        // lower bound sits strictly above f = 0: sandwich must fail
        let decomp = BoundingDecomposition::new(
            vec![Expr::Const(1.0); 2],
            vec![Expr::Const(2.0); 2],
            0.0,
            0.0,
            0.0,
            0.0,
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let report = validate_decomposition(&sys, &decomp, 100, 2).unwrap();
        assert!(!report.pass());
        let ce = report.counterexample.expect("counterexample recorded");
        assert_eq!(ce.assumption, "sandwich (lower)");
        assert!(ce.margin < 0.0);
    }

    #[test]
    fn scenario_rejects_inverted_initial_box() {
        let err = Scenario::new(
            vec![Expr::Const(0.0)],
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-1.0]),
            1.0,
            0.1,
        );
        assert!(matches!(err, Err(PlantError::Scenario(_))));
    }

    #[test]
    fn scenario_rejects_envelope_escape() {
        let err = Scenario::new(
            vec![parse_expression("10*sin(5*t)").unwrap()],
            DVector::from_vec(vec![-5.0]),
            DVector::from_vec(vec![5.0]),
            DVector::zeros(1),
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![1.0]),
            10.0,
            0.001,
        );
        assert!(matches!(err, Err(PlantError::Scenario(_))));
    }

    #[test]
    fn grid_step_counts() {
        assert_eq!(grid_steps(10.0, 1e-3), 10_000);
        assert_eq!(grid_steps(100.0, 1e-2), 10_000);
        assert_eq!(grid_steps(1.05, 0.5), 2);
    }
}
