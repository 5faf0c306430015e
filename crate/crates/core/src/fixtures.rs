//! Built-in reference systems used by the test suite, the example configs
//! and the documentation.

use crate::expr::{parse_expression, Expr};
use crate::nn::{ActivationKind, Layer, NeuralNetwork};
use crate::plant::{BoundingDecomposition, FSpace, InputMode, LipschitzSystem, PlantError, Scenario};
use nalgebra::{DMatrix, DVector};

/// Two-state system with a 5-neuron tanh hidden layer driving both state
/// derivatives; the network reads the full state plus one bounded input.
///
/// Dynamics: `x' = A x + phi(x, u)`, `y = x2`, with
/// `A = [[-2, 1], [3, -5]]` and `u = 10 sin(5 t)` bounded in `[-10, 10]`.
/// The initial state is `(0, 0)` with estimator bounds `[-1, 1]^2`.
pub fn fixture_example1() -> Result<(LipschitzSystem, BoundingDecomposition, Scenario), PlantError>
{
    let a_matrix = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0]);
    let c_matrix = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let system = LipschitzSystem::new(
        a_matrix,
        c_matrix,
        DMatrix::zeros(2, 1),
        vec![Expr::Const(0.0), Expr::Const(0.0)],
        FSpace::State,
        0.0,
        example1_network(),
        InputMode::StateDriven,
        vec![],
        DMatrix::identity(2, 2),
    )?;
    let decomp = BoundingDecomposition::new(
        vec![Expr::Const(0.0), Expr::Const(0.0)],
        vec![Expr::Const(0.0), Expr::Const(0.0)],
        0.0,
        0.0,
        0.0,
        0.0,
        DVector::zeros(2),
        DVector::zeros(2),
    )?;
    let scenario = Scenario::new(
        vec![parse_expression("10*sin(5*t)").expect("fixture signal parses")],
        DVector::from_vec(vec![-10.0]),
        DVector::from_vec(vec![10.0]),
        DVector::zeros(2),
        DVector::from_vec(vec![-1.0, -1.0]),
        DVector::from_vec(vec![1.0, 1.0]),
        10.0,
        1e-3,
    )?;
    Ok((system, decomp, scenario))
}

/// The fixed weights of the two-layer network in [`fixture_example1`].
pub fn example1_network() -> NeuralNetwork {
    let w1 = DMatrix::from_row_slice(
        5,
        3,
        &[
            0.6266, 0.8433, 0.3241, //
            -0.2485, -1.5838, -0.5620, //
            0.5243, -1.4939, 1.1992, //
            -0.4300, -1.4659, 0.1102, //
            0.2629, 0.6789, -1.2695,
        ],
    );
    let b1 = DVector::from_vec(vec![-1.0191, -1.3852, 0.9549, -0.6011, -1.1719]);
    let w2 = DMatrix::from_row_slice(
        2,
        5,
        &[
            -0.4617, 0.6824, 0.2419, 0.0344, 0.4333, //
            -0.6691, 0.3819, 0.3326, -0.7591, -0.6569,
        ],
    );
    let b2 = DVector::from_vec(vec![-1.0719, -1.0741]);
    NeuralNetwork::new(vec![
        Layer::new(w1, b1, ActivationKind::Tanh).expect("fixture layer 1"),
        Layer::new(w2, b2, ActivationKind::Purelin).expect("fixture layer 2"),
    ])
    .expect("fixture network")
}

/// Time gap the cruise controller is tuned for, folded into its weights.
pub const ACC_TIME_GAP: f64 = 1.4;

/// Two-car adaptive-cruise-control system.
///
/// State `x = (x_l, v_l, a_l, x_e, v_e, a_e)`: position, velocity and
/// actual acceleration of the lead and ego car. Each car's acceleration
/// channel follows `a' = -2 a + 2 cmd - mu v^2` with friction
/// `mu = 1e-4`. The lead car command is the exogenous input `u1`,
/// constrained to `[-3, 2]`; the ego command comes from a speed/spacing
/// controller realized as a one-hidden-layer tanh network reading the
/// measurements `y = (v_e, d_rel, v_rel)` and the driver-set speed `u2`:
///
/// ```text
/// cmd_e = 2 tanh(k1 (d_rel - v_e t_gap) + k2 v_rel + k3 (v_set - v_e))
/// ```
///
/// with `k1 = 0.05`, `k2 = 0.3`, `k3 = 0.2` and `t_gap = 1.4 s` folded
/// into the first-layer weights. The friction terms depend only on
/// measured quantities (`v_l = y1 + y3`, `v_e = y1`), so the bounding
/// decomposition is exact: both bounds equal `f(y)`, with zero growth
/// scalars and offsets.
pub fn fixture_acc() -> Result<(LipschitzSystem, BoundingDecomposition, Scenario), PlantError> {
    let a_matrix = DMatrix::from_row_slice(
        6,
        6,
        &[
            0.0, 1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, -2.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, -2.0,
        ],
    );
    let c_matrix = DMatrix::from_row_slice(
        3,
        6,
        &[
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, -1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, -1.0, 0.0,
        ],
    );
    // The lead command enters linearly: channel 3 gets 2 u1.
    let mut b_matrix = DMatrix::zeros(6, 3);
    b_matrix[(2, 0)] = 2.0;
    // f(y): friction on both acceleration channels, exactly measurable.
    let zero = Expr::Const(0.0);
    let f = vec![
        zero.clone(),
        zero.clone(),
        parse_expression("-0.0001*(y1+y3)^2").expect("fixture friction"),
        zero.clone(),
        zero.clone(),
        parse_expression("-0.0001*y1^2").expect("fixture friction"),
    ];
    // Channel 6 gets twice the commanded ego acceleration.
    let mut embedding = DMatrix::zeros(6, 1);
    embedding[(5, 0)] = 2.0;
    let system = LipschitzSystem::new(
        a_matrix,
        c_matrix,
        b_matrix,
        f.clone(),
        FSpace::Output,
        0.0,
        acc_controller_network(),
        InputMode::OutputDriven,
        vec![1],
        embedding,
    )?;
    let decomp = BoundingDecomposition::new(
        f.clone(),
        f,
        0.0,
        0.0,
        0.0,
        0.0,
        DVector::zeros(6),
        DVector::zeros(6),
    )?;
    let scenario = Scenario::new(
        vec![
            parse_expression("1.2*sin(0.1*t)").expect("lead command"),
            parse_expression("30").expect("set speed"),
            parse_expression("1.4").expect("time gap"),
        ],
        DVector::from_vec(vec![-3.0, 30.0, ACC_TIME_GAP]),
        DVector::from_vec(vec![2.0, 30.0, ACC_TIME_GAP]),
        DVector::from_vec(vec![50.0, 25.0, 0.0, 0.0, 20.0, 0.0]),
        DVector::from_vec(vec![49.0, 24.0, -1.0, -1.0, 19.0, -1.0]),
        DVector::from_vec(vec![51.0, 26.0, 1.0, 1.0, 21.0, 1.0]),
        100.0,
        1e-2,
    )?;
    Ok((system, decomp, scenario))
}

/// The cruise controller of [`fixture_acc`]: inputs `(v_e, d_rel, v_rel,
/// v_set)`, one tanh unit, output scaled to the command range `[-2, 2]`.
pub fn acc_controller_network() -> NeuralNetwork {
    const K1: f64 = 0.05;
    const K2: f64 = 0.3;
    const K3: f64 = 0.2;
    let w1 = DMatrix::from_row_slice(1, 4, &[-(K1 * ACC_TIME_GAP + K3), K1, K2, K3]);
    let b1 = DVector::zeros(1);
    let w2 = DMatrix::from_row_slice(1, 1, &[2.0]);
    let b2 = DVector::zeros(1);
    NeuralNetwork::new(vec![
        Layer::new(w1, b1, ActivationKind::Tanh).expect("controller layer 1"),
        Layer::new(w2, b2, ActivationKind::Purelin).expect("controller layer 2"),
    ])
    .expect("controller network")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::validate_decomposition;

    #[test]
    fn example1_matrices_match_fixture_definition() {
        let (sys, _, scenario) = fixture_example1().unwrap();
        assert_eq!(
            sys.a_matrix,
            DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0])
        );
        assert_eq!(sys.c_matrix, DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
        assert_eq!(scenario.u_lower[0], -10.0);
        assert_eq!(scenario.u_upper[0], 10.0);
        assert_eq!(scenario.t_end, 10.0);
        assert_eq!(scenario.dt, 1e-3);
    }

    #[test]
    fn example1_f_is_zero_everywhere() {
        let (sys, _, _) = fixture_example1().unwrap();
        // with zero f and the network evaluated at zero input, the
        // derivative at the origin is exactly the network's contribution
        let dx = sys
            .eval_dynamics(&DVector::zeros(2), &DVector::zeros(1))
            .unwrap();
        let phi = sys.nn.forward(&DVector::zeros(3)).unwrap();
        assert_eq!(dx, phi);
    }

    #[test]
    fn example1_network_matches_reference_evaluator() {
        // independent straight-line evaluation with plain loops
        let nn = example1_network();
        let input = [0.0, 0.0, 0.0];
        let w1: [[f64; 3]; 5] = [
            [0.6266, 0.8433, 0.3241],
            [-0.2485, -1.5838, -0.5620],
            [0.5243, -1.4939, 1.1992],
            [-0.4300, -1.4659, 0.1102],
            [0.2629, 0.6789, -1.2695],
        ];
        let b1 = [-1.0191, -1.3852, 0.9549, -0.6011, -1.1719];
        let w2: [[f64; 5]; 2] = [
            [-0.4617, 0.6824, 0.2419, 0.0344, 0.4333],
            [-0.6691, 0.3819, 0.3326, -0.7591, -0.6569],
        ];
        let b2 = [-1.0719, -1.0741];
        let mut hidden = [0.0; 5];
        for i in 0..5 {
            let mut acc = b1[i];
            for j in 0..3 {
                acc += w1[i][j] * input[j];
            }
            hidden[i] = acc.tanh();
        }
        let mut want = [0.0; 2];
        for i in 0..2 {
            let mut acc = b2[i];
            for j in 0..5 {
                acc += w2[i][j] * hidden[j];
            }
            want[i] = acc;
        }
        let got = nn.forward(&DVector::from_vec(input.to_vec())).unwrap();
        for i in 0..2 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn acc_matrices_entry_for_entry() {
        let (sys, _, scenario) = fixture_acc().unwrap();
        let a_expected = DMatrix::from_row_slice(
            6,
            6,
            &[
                0.0, 1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, -2.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, -2.0,
            ],
        );
        let c_expected = DMatrix::from_row_slice(
            3,
            6,
            &[
                0.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
                1.0, 0.0, 0.0, -1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, -1.0, 0.0,
            ],
        );
        assert_eq!(sys.a_matrix, a_expected);
        assert_eq!(sys.c_matrix, c_expected);
        assert_eq!(scenario.u_lower[0], -3.0);
        assert_eq!(scenario.u_upper[0], 2.0);
    }

    #[test]
    fn acc_friction_values_by_hand() {
        let (sys, _, _) = fixture_acc().unwrap();
        // y = (v_e, d_rel, v_rel) = (10, 50, 2): v_l = 12
        // channel 3: -1e-4 * 12^2 = -0.0144; channel 6: -1e-4 * 10^2 = -0.01
        let y = DVector::from_vec(vec![10.0, 50.0, 2.0]);
        let ctx = crate::expr::EvalContext {
            output: Some(&y),
            ..Default::default()
        };
        let f3 = sys.f[2].eval(&ctx).unwrap();
        let f6 = sys.f[5].eval(&ctx).unwrap();
        assert!((f3 - (-0.0144)).abs() < 1e-15);
        assert!((f6 - (-0.01)).abs() < 1e-15);
        for i in [0, 1, 3, 4] {
            assert_eq!(sys.f[i].eval(&ctx).unwrap(), 0.0);
        }
    }

    #[test]
    fn acc_equilibrium_at_origin_with_zero_inputs() {
        let (sys, _, _) = fixture_acc().unwrap();
        let dx = sys
            .eval_dynamics(&DVector::zeros(6), &DVector::zeros(3))
            .unwrap();
        assert_eq!(dx, DVector::zeros(6));
    }

    #[test]
    fn acc_controller_realizes_the_control_law() {
        let nn = acc_controller_network();
        // (v_e, d_rel, v_rel, v_set)
        let input = DVector::from_vec(vec![20.0, 50.0, 5.0, 30.0]);
        let z = 0.05 * (50.0 - 20.0 * ACC_TIME_GAP) + 0.3 * 5.0 + 0.2 * (30.0 - 20.0);
        let want = 2.0 * z.tanh();
        let got = nn.forward(&input).unwrap();
        assert!((got[0] - want).abs() < 1e-12);
    }

    #[test]
    fn fixtures_validate_at_ten_thousand_samples() {
        for (sys, decomp) in [
            fixture_example1().map(|(s, d, _)| (s, d)).unwrap(),
            fixture_acc().map(|(s, d, _)| (s, d)).unwrap(),
        ] {
            let report = validate_decomposition(&sys, &decomp, 10_000, 42).unwrap();
            assert!(
                report.pass(),
                "fixture decomposition violated: {:?}",
                report.counterexample
            );
        }
    }
}
