//! Observer-gain synthesis: gap-bounding matrix chains for the auxiliary
//! networks, linear feasibility programs for Metzler / stable gains, decay
//! certificates, and the end-to-end design pipeline.
//!
//! Strict inequalities are tightened by [`STRICT_MARGIN`] before solving.
//! The weighted row condition always keeps its margin (that is what makes
//! the decay rate positive); Metzler rows are margined on a first attempt
//! and relaxed to the closed sign conditions on a retry, since measurement
//! sparsity can pin off-diagonal entries to exactly zero, which satisfies
//! the Metzler property but no strict version of it.
//!
//! All functions are pure; independent syntheses can run concurrently.

use crate::lp::{self, LinearConstraint, LpError, LpProblem, LpStatus};
use crate::nn::{lipschitz_bound, make_auxiliary_pair, AuxiliaryPair};
use crate::plant::{BoundingDecomposition, InputMode, LipschitzSystem};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use thiserror::Error;

/// Margin by which strict inequalities are tightened in every gain LP.
pub const STRICT_MARGIN: f64 = 1e-6;
/// Residual tolerance for chain and substitution checks.
pub const CHECK_TOL: f64 = 1e-8;
/// Default offset for the recursive chain construction.
pub const RECURSIVE_EPSILON: f64 = 1e-9;
/// Metzler tolerance enforced on synthesized designs.
const METZLER_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("{0}")]
    Dimension(String),
    #[error("lp failure: {0}")]
    Lp(#[from] LpError),
    #[error(
        "gain synthesis infeasible at pipeline step {step} ({mode}); first violated block: {block}"
    )]
    Infeasible {
        step: usize,
        mode: GainMode,
        block: ConstraintBlock,
    },
    #[error("chain LP reported {status:?}; the chain program is always feasible, so this indicates an encoding bug")]
    ChainEncoding { status: LpStatus },
    #[error("design does not satisfy the strict row condition: decay rate {lambda} <= 0")]
    CertificateInvalid { lambda: f64 },
    #[error("design mode {design} does not match system input mode {system}")]
    ModeMismatch {
        design: &'static str,
        system: &'static str,
    },
    #[error("chain violates {what} by {violation:.3e} at level {level}, entry ({i}, {j})")]
    ChainInvalid {
        what: &'static str,
        violation: f64,
        level: usize,
        i: usize,
        j: usize,
    },
    #[error("design validation failed: {0}")]
    DesignInvalid(String),
}

/// Which constraint family an LP row belongs to; used to name the first
/// violated block when a synthesis program is infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintBlock {
    XPositivity,
    MetzlerLower,
    MetzlerUpper,
    RowSumLower,
    RowSumUpper,
    Unknown,
}

impl fmt::Display for ConstraintBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ConstraintBlock::XPositivity => "X positivity",
            ConstraintBlock::MetzlerLower => "Metzler condition (lower gain)",
            ConstraintBlock::MetzlerUpper => "Metzler condition (upper gain)",
            ConstraintBlock::RowSumLower => "weighted row condition (lower gain)",
            ConstraintBlock::RowSumUpper => "weighted row condition (upper gain)",
            ConstraintBlock::Unknown => "unknown",
        };
        f.write_str(name)
    }
}

struct BlockMap {
    ranges: Vec<(std::ops::Range<usize>, ConstraintBlock)>,
}

impl BlockMap {
    fn new() -> Self {
        BlockMap { ranges: Vec::new() }
    }

    fn push(&mut self, range: std::ops::Range<usize>, block: ConstraintBlock) {
        self.ranges.push((range, block));
    }

    fn lookup(&self, row: usize) -> ConstraintBlock {
        self.ranges
            .iter()
            .find(|(r, _)| r.contains(&row))
            .map(|(_, b)| *b)
            .unwrap_or(ConstraintBlock::Unknown)
    }
}

/// True iff every off-diagonal entry of `m` is at least `-tol`.
pub fn is_metzler(m: &DMatrix<f64>, tol: f64) -> Result<bool, SynthesisError> {
    if m.nrows() != m.ncols() {
        return Err(SynthesisError::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] < -tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Nonnegative matrices `S_lo[l], S_hi[l]` (`l = 0..=L`, identity at `L`)
/// bounding the auxiliary-network output gap linearly in the input-box
/// width, plus the column split of the level-0 matrices.
#[derive(Debug, Clone)]
pub struct SMatrixChain {
    pub s_lower: Vec<DMatrix<f64>>,
    pub s_upper: Vec<DMatrix<f64>>,
    /// First `split_col` columns of the level-0 matrices.
    pub u_lower: DMatrix<f64>,
    pub u_upper: DMatrix<f64>,
    /// Remaining columns of the level-0 matrices.
    pub v_lower: DMatrix<f64>,
    pub v_upper: DMatrix<f64>,
    pub alpha: f64,
    pub split_col: usize,
}

impl SMatrixChain {
    /// Validates chain shape, nonnegativity, the identity seed and the link
    /// inequalities against `pair`, then splits level 0 at `split_col`.
    pub fn from_levels(
        s_lower: Vec<DMatrix<f64>>,
        s_upper: Vec<DMatrix<f64>>,
        pair: &AuxiliaryPair,
        alpha: f64,
        split_col: usize,
        tol: f64,
    ) -> Result<Self, SynthesisError> {
        let layers = pair.layers();
        let levels = layers.len() + 1;
        if s_lower.len() != levels || s_upper.len() != levels {
            return Err(SynthesisError::Dimension(format!(
                "chain needs {levels} levels, got {} / {}",
                s_lower.len(),
                s_upper.len()
            )));
        }
        let n_out = pair.output_dim();
        for (level, (lo, hi)) in s_lower.iter().zip(&s_upper).enumerate() {
            let want_cols = if level == 0 {
                pair.input_dim()
            } else {
                layers[level - 1].w_lower.nrows()
            };
            for (name, m) in [("lower", lo), ("upper", hi)] {
                if m.nrows() != n_out || m.ncols() != want_cols {
                    return Err(SynthesisError::Dimension(format!(
                        "chain {name} level {level} must be {n_out}x{want_cols}, got {}x{}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        if m[(i, j)] < -tol {
                            return Err(SynthesisError::ChainInvalid {
                                what: "nonnegativity",
                                violation: -m[(i, j)],
                                level,
                                i,
                                j,
                            });
                        }
                    }
                }
            }
        }
        let last = levels - 1;
        for i in 0..n_out {
            for j in 0..n_out {
                let want = if i == j { 1.0 } else { 0.0 };
                for (name, m) in [("lower", &s_lower[last]), ("upper", &s_upper[last])] {
                    let _ = name;
                    if (m[(i, j)] - want).abs() > tol {
                        return Err(SynthesisError::ChainInvalid {
                            what: "identity seed",
                            violation: (m[(i, j)] - want).abs(),
                            level: last,
                            i,
                            j,
                        });
                    }
                }
            }
        }
        for (level, layer) in layers.iter().enumerate().map(|(l, layer)| (l + 1, layer)) {
            let lhs_lower =
                (&s_lower[level] * &layer.w_upper - &s_upper[level] * &layer.w_lower) * alpha;
            let lhs_upper =
                (&s_upper[level] * &layer.w_upper - &s_lower[level] * &layer.w_lower) * alpha;
            for (what, lhs, rhs) in [
                ("lower link", &lhs_lower, &s_lower[level - 1]),
                ("upper link", &lhs_upper, &s_upper[level - 1]),
            ] {
                for i in 0..lhs.nrows() {
                    for j in 0..lhs.ncols() {
                        let violation = lhs[(i, j)] - rhs[(i, j)];
                        if violation > tol {
                            return Err(SynthesisError::ChainInvalid {
                                what,
                                violation,
                                level,
                                i,
                                j,
                            });
                        }
                    }
                }
            }
        }
        if split_col > pair.input_dim() {
            return Err(SynthesisError::Dimension(format!(
                "split column {split_col} exceeds chain input width {}",
                pair.input_dim()
            )));
        }
        let rest = pair.input_dim() - split_col;
        let u_lower = s_lower[0].columns(0, split_col).into_owned();
        let u_upper = s_upper[0].columns(0, split_col).into_owned();
        let v_lower = s_lower[0].columns(split_col, rest).into_owned();
        let v_upper = s_upper[0].columns(split_col, rest).into_owned();
        Ok(SMatrixChain {
            s_lower,
            s_upper,
            u_lower,
            u_upper,
            v_lower,
            v_upper,
            alpha,
            split_col,
        })
    }

    /// Sampled gap bound: `hi_out - lo_out <= S_lo[0] (eta - lo) +
    /// S_hi[0] (hi - eta)` for `lo <= eta <= hi`. Returns the worst slack.
    pub fn gap_bound_slack(
        &self,
        pair: &AuxiliaryPair,
        lo: &DVector<f64>,
        eta: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<f64, SynthesisError> {
        let (phi_lo, phi_hi) = crate::nn::aux_forward(pair, lo, hi)
            .map_err(|e| SynthesisError::Dimension(e.to_string()))?;
        let gap = &phi_hi - &phi_lo;
        let bound = &self.s_lower[0] * (eta - lo) + &self.s_upper[0] * (hi - eta);
        let mut worst = f64::INFINITY;
        for i in 0..gap.len() {
            worst = worst.min(bound[i] - gap[i]);
        }
        Ok(worst)
    }
}

/// Builds a chain by running the link recursion backwards from the
/// identity, padding each level with `epsilon` to keep the links strict.
pub fn recursive_s_chain(
    pair: &AuxiliaryPair,
    alpha: f64,
    epsilon: f64,
    split_col: usize,
) -> Result<SMatrixChain, SynthesisError> {
    assert!(alpha > 0.0, "alpha must be positive");
    assert!(epsilon > 0.0, "epsilon must be positive");
    let layers = pair.layers();
    let depth = layers.len();
    let n_out = pair.output_dim();
    let mut s_lower = vec![DMatrix::zeros(0, 0); depth + 1];
    let mut s_upper = vec![DMatrix::zeros(0, 0); depth + 1];
    s_lower[depth] = DMatrix::identity(n_out, n_out);
    s_upper[depth] = DMatrix::identity(n_out, n_out);
    for level in (1..=depth).rev() {
        let layer = &layers[level - 1];
        let cols = layer.w_lower.ncols();
        let pad = DMatrix::from_element(n_out, cols, epsilon);
        s_lower[level - 1] =
            (&s_lower[level] * &layer.w_upper - &s_upper[level] * &layer.w_lower) * alpha + &pad;
        s_upper[level - 1] =
            (&s_upper[level] * &layer.w_upper - &s_lower[level] * &layer.w_lower) * alpha + &pad;
    }
    SMatrixChain::from_levels(s_lower, s_upper, pair, alpha, split_col, CHECK_TOL)
}

/// Solves the chain linear program: minimize the total mass of the level-0
/// matrices subject to the link inequalities and nonnegativity, with the
/// identity seed at the output level.
pub fn synthesize_s_chain_lp(
    pair: &AuxiliaryPair,
    alpha: f64,
    split_col: usize,
) -> Result<SMatrixChain, SynthesisError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let layers = pair.layers();
    let depth = layers.len();
    let n_out = pair.output_dim();

    // Variable layout: levels 0..depth-1, lower then upper, row-major.
    let mut level_cols = Vec::with_capacity(depth);
    level_cols.push(pair.input_dim());
    for layer in layers.iter().take(depth - 1) {
        level_cols.push(layer.w_lower.nrows());
    }
    let mut lower_offset = vec![0usize; depth];
    let mut upper_offset = vec![0usize; depth];
    let mut num_vars = 0usize;
    for level in 0..depth {
        lower_offset[level] = num_vars;
        num_vars += n_out * level_cols[level];
        upper_offset[level] = num_vars;
        num_vars += n_out * level_cols[level];
    }
    let var = |offset: usize, cols: usize, i: usize, j: usize| offset + i * cols + j;

    let mut constraints = Vec::new();
    // Link inequalities for every level; the top level has the identity on
    // the left, which makes those rows constant lower bounds.
    for level in 1..=depth {
        let layer = &layers[level - 1];
        let cols_out = layer.w_lower.ncols();
        let prev_cols = level_cols[level - 1];
        debug_assert_eq!(cols_out, prev_cols);
        for i in 0..n_out {
            for j in 0..prev_cols {
                // lower link: alpha (S_lo[l] W_hi - S_hi[l] W_lo)_{ij} <= S_lo[l-1]_{ij}
                let mut lo_coeffs = vec![0.0; num_vars];
                let mut hi_coeffs = vec![0.0; num_vars];
                let mut lo_rhs = 0.0;
                let mut hi_rhs = 0.0;
                if level == depth {
                    // identity seed: constant left-hand side
                    let gap = alpha * (layer.w_upper[(i, j)] - layer.w_lower[(i, j)]);
                    lo_rhs = -gap;
                    hi_rhs = -gap;
                } else {
                    let k_count = layers[level - 1].w_lower.nrows();
                    debug_assert_eq!(k_count, level_cols[level]);
                    for k in 0..k_count {
                        let w_hi = layer.w_upper[(k, j)];
                        let w_lo = layer.w_lower[(k, j)];
                        if w_hi != 0.0 {
                            lo_coeffs[var(lower_offset[level], k_count, i, k)] += alpha * w_hi;
                            hi_coeffs[var(upper_offset[level], k_count, i, k)] += alpha * w_hi;
                        }
                        if w_lo != 0.0 {
                            lo_coeffs[var(upper_offset[level], k_count, i, k)] -= alpha * w_lo;
                            hi_coeffs[var(lower_offset[level], k_count, i, k)] -= alpha * w_lo;
                        }
                    }
                }
                lo_coeffs[var(lower_offset[level - 1], prev_cols, i, j)] -= 1.0;
                hi_coeffs[var(upper_offset[level - 1], prev_cols, i, j)] -= 1.0;
                constraints.push(LinearConstraint::le(lo_coeffs, lo_rhs));
                constraints.push(LinearConstraint::le(hi_coeffs, hi_rhs));
            }
        }
    }
    for j in 0..num_vars {
        let mut coeffs = vec![0.0; num_vars];
        coeffs[j] = 1.0;
        constraints.push(LinearConstraint::ge(coeffs, 0.0));
    }

    // Objective: total mass of the level-0 matrices.
    let mut objective = vec![0.0; num_vars];
    let cols0 = level_cols[0];
    for i in 0..n_out {
        for j in 0..cols0 {
            objective[var(lower_offset[0], cols0, i, j)] = 1.0;
            objective[var(upper_offset[0], cols0, i, j)] = 1.0;
        }
    }

    let outcome = lp::solve(&LpProblem {
        num_vars,
        objective,
        constraints,
    })?;
    if outcome.status != LpStatus::Optimal {
        return Err(SynthesisError::ChainEncoding {
            status: outcome.status,
        });
    }
    let point = outcome.point.expect("optimal outcome has a point");

    let mut s_lower = Vec::with_capacity(depth + 1);
    let mut s_upper = Vec::with_capacity(depth + 1);
    for level in 0..depth {
        let cols = level_cols[level];
        s_lower.push(DMatrix::from_fn(n_out, cols, |i, j| {
            point[var(lower_offset[level], cols, i, j)]
        }));
        s_upper.push(DMatrix::from_fn(n_out, cols, |i, j| {
            point[var(upper_offset[level], cols, i, j)]
        }));
    }
    s_lower.push(DMatrix::identity(n_out, n_out));
    s_upper.push(DMatrix::identity(n_out, n_out));
    SMatrixChain::from_levels(s_lower, s_upper, pair, alpha, split_col, CHECK_TOL)
}

/// Which synthesis produced a gain design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    MetzlerOnly,
    StableStateDriven,
    StableOutputDriven,
}

impl GainMode {
    pub fn name(self) -> &'static str {
        match self {
            GainMode::MetzlerOnly => "metzler_only",
            GainMode::StableStateDriven => "stable_state_driven",
            GainMode::StableOutputDriven => "stable_output_driven",
        }
    }
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Observer gains together with the scaling that produced them.
///
/// `l_lower = X^-1 y_lower` and `l_upper = X^-1 y_upper` hold by
/// construction; both closed-loop matrices `A - L C` are Metzler within
/// `1e-9` for synthesized designs.
#[derive(Debug, Clone)]
pub struct GainDesign {
    pub l_lower: DMatrix<f64>,
    pub l_upper: DMatrix<f64>,
    /// Diagonal of the positive scaling `X`.
    pub x_diag: DVector<f64>,
    pub y_lower: DMatrix<f64>,
    pub y_upper: DMatrix<f64>,
    pub a: f64,
    pub mode: GainMode,
    pub a_matrix: DMatrix<f64>,
    pub c_matrix: DMatrix<f64>,
}

impl GainDesign {
    /// Builds a design from LP output and enforces the Metzler invariant.
    #[allow(clippy::too_many_arguments)]
    fn from_lp(
        x_diag: DVector<f64>,
        y_lower: DMatrix<f64>,
        y_upper: DMatrix<f64>,
        a: f64,
        mode: GainMode,
        a_matrix: DMatrix<f64>,
        c_matrix: DMatrix<f64>,
    ) -> Result<Self, SynthesisError> {
        let n = x_diag.len();
        let mut l_lower = y_lower.clone();
        let mut l_upper = y_upper.clone();
        for i in 0..n {
            let xi = x_diag[i];
            if xi <= 0.0 {
                return Err(SynthesisError::DesignInvalid(format!(
                    "X diagonal entry {} is {xi}, expected positive",
                    i + 1
                )));
            }
            for k in 0..y_lower.ncols() {
                l_lower[(i, k)] /= xi;
                l_upper[(i, k)] /= xi;
            }
        }
        let design = GainDesign {
            l_lower,
            l_upper,
            x_diag,
            y_lower,
            y_upper,
            a,
            mode,
            a_matrix,
            c_matrix,
        };
        for (name, cl) in [
            ("lower", design.closed_loop_lower()),
            ("upper", design.closed_loop_upper()),
        ] {
            if !is_metzler(&cl, METZLER_TOL)? {
                return Err(SynthesisError::DesignInvalid(format!(
                    "closed-loop matrix for {name} gain is not Metzler"
                )));
            }
        }
        Ok(design)
    }

    /// Builds a design from externally supplied parts without enforcing the
    /// Metzler invariant. Used when loading report files: a tampered or
    /// hand-edited report must still load so the monitor can expose its
    /// violations at run time.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw_parts(
        l_lower: DMatrix<f64>,
        l_upper: DMatrix<f64>,
        x_diag: DVector<f64>,
        a: f64,
        mode: GainMode,
        a_matrix: DMatrix<f64>,
        c_matrix: DMatrix<f64>,
    ) -> Self {
        let x = DMatrix::from_diagonal(&x_diag);
        let y_lower = &x * &l_lower;
        let y_upper = &x * &l_upper;
        GainDesign {
            l_lower,
            l_upper,
            x_diag,
            y_lower,
            y_upper,
            a,
            mode,
            a_matrix,
            c_matrix,
        }
    }

    pub fn num_states(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn closed_loop_lower(&self) -> DMatrix<f64> {
        &self.a_matrix - &self.l_lower * &self.c_matrix
    }

    pub fn closed_loop_upper(&self) -> DMatrix<f64> {
        &self.a_matrix - &self.l_upper * &self.c_matrix
    }
}

/// Decay certificate for the estimator error: `|xi(t)|_1 <= big_c
/// exp(-lambda (t - t0)) |xi(t0)|_1 + radius_r` with weight vector `v`.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub lambda: f64,
    pub big_c: f64,
    pub radius_r: f64,
    pub theta: f64,
    pub v: DVector<f64>,
}

/// Substitution margins of a stable design, one per constraint family.
/// Positive margins mean the strict conditions hold with that much slack.
#[derive(Debug, Clone)]
pub struct SubstitutionCheck {
    pub x_positivity: f64,
    pub metzler_offdiag_lower: f64,
    pub metzler_diag_lower: f64,
    pub metzler_offdiag_upper: f64,
    pub metzler_diag_upper: f64,
    pub row_sum_lower: f64,
    pub row_sum_upper: f64,
}

impl SubstitutionCheck {
    pub fn min_margin(&self) -> f64 {
        [
            self.x_positivity,
            self.metzler_offdiag_lower,
            self.metzler_diag_lower,
            self.metzler_offdiag_upper,
            self.metzler_diag_upper,
            self.row_sum_lower,
            self.row_sum_upper,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
    }
}

fn zeros_like_u(n: usize) -> DMatrix<f64> {
    DMatrix::zeros(n, n)
}

/// Tightens an inequality by the strict margin.
fn tighten(mut c: LinearConstraint) -> LinearConstraint {
    match c.relation {
        lp::Relation::Le => c.rhs -= STRICT_MARGIN,
        lp::Relation::Ge => c.rhs += STRICT_MARGIN,
        lp::Relation::Eq => {}
    }
    c
}

/// Tightens a Metzler-block row only when requested and only when some
/// variable can influence it. The Metzler property is a closed condition:
/// an entry pinned to zero by the sparsity of `A` and `C` (or by a linear
/// relation the measurement structure forces between entries) satisfies it
/// with equality, and no margin can lift it. Gain programs therefore run
/// once with margined Metzler rows for a comfortably interior point and,
/// if that fails, once more with the closed rows.
fn tighten_metzler(c: LinearConstraint, strict: bool) -> LinearConstraint {
    if strict && c.coefficients.iter().any(|&v| v != 0.0) {
        tighten(c)
    } else {
        c
    }
}

/// Metzler-only feasibility: find `a` and gains with every off-diagonal of
/// `A - L C` nonnegative and every diagonal at least `a`.
pub fn synthesize_gains_metzler(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
) -> Result<GainDesign, SynthesisError> {
    match metzler_attempt(a_matrix, c_matrix, true) {
        Err(SynthesisError::Infeasible { .. }) => metzler_attempt(a_matrix, c_matrix, false),
        other => other,
    }
}

fn metzler_attempt(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    strict: bool,
) -> Result<GainDesign, SynthesisError> {
    let n = square_dims(a_matrix, c_matrix)?;
    let m = c_matrix.nrows();
    // Variables: l_lower (n*m), l_upper (n*m), a.
    let num_vars = 2 * n * m + 1;
    let l_lo = |i: usize, k: usize| i * m + k;
    let l_hi = |i: usize, k: usize| n * m + i * m + k;
    let a_var = num_vars - 1;

    let mut constraints = Vec::new();
    let mut blocks = BlockMap::new();
    for (block, l_var) in [
        (ConstraintBlock::MetzlerLower, &l_lo as &dyn Fn(usize, usize) -> usize),
        (ConstraintBlock::MetzlerUpper, &l_hi),
    ] {
        let start = constraints.len();
        for i in 0..n {
            for j in 0..n {
                // (A - L C)_{ij} >= 0 (off-diagonal) or >= a (diagonal):
                // sum_k C_{kj} L_{ik} (+ a if i == j) <= A_{ij}
                let mut coeffs = vec![0.0; num_vars];
                for k in 0..m {
                    coeffs[l_var(i, k)] += c_matrix[(k, j)];
                }
                if i == j {
                    coeffs[a_var] += 1.0;
                }
                constraints.push(tighten_metzler(
                    LinearConstraint::le(coeffs, a_matrix[(i, j)]),
                    strict,
                ));
            }
        }
        blocks.push(start..constraints.len(), block);
    }

    let outcome = lp::solve(&LpProblem::feasibility(num_vars, constraints))?;
    match outcome.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(SynthesisError::Infeasible {
                step: 4,
                mode: GainMode::MetzlerOnly,
                block: outcome
                    .infeasible_row
                    .map(|r| blocks.lookup(r))
                    .unwrap_or(ConstraintBlock::Unknown),
            });
        }
        LpStatus::Unbounded => {
            return Err(SynthesisError::DesignInvalid(
                "feasibility program reported unbounded".to_string(),
            ));
        }
    }
    let point = outcome.point.expect("optimal outcome has a point");
    let y_lower = DMatrix::from_fn(n, m, |i, k| point[l_lo(i, k)]);
    let y_upper = DMatrix::from_fn(n, m, |i, k| point[l_hi(i, k)]);
    GainDesign::from_lp(
        DVector::from_element(n, 1.0),
        y_lower,
        y_upper,
        point[a_var],
        GainMode::MetzlerOnly,
        a_matrix.clone(),
        c_matrix.clone(),
    )
}

fn square_dims(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<usize, SynthesisError> {
    if a.nrows() != a.ncols() {
        return Err(SynthesisError::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if c.ncols() != a.nrows() {
        return Err(SynthesisError::Dimension(format!(
            "C has {} columns, expected {}",
            c.ncols(),
            a.nrows()
        )));
    }
    Ok(a.nrows())
}

/// Shared LP for the stable syntheses. `u_term_lower` / `u_term_upper` are
/// the `n x n` gap-gain terms entering the weighted row condition (zero in
/// the output-driven variant).
fn gain_lp_stable(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    gamma_lower: f64,
    gamma_upper: f64,
    u_term_lower: &DMatrix<f64>,
    u_term_upper: &DMatrix<f64>,
    mode: GainMode,
) -> Result<GainDesign, SynthesisError> {
    match stable_attempt(
        a_matrix,
        c_matrix,
        gamma_lower,
        gamma_upper,
        u_term_lower,
        u_term_upper,
        mode,
        true,
    ) {
        Err(SynthesisError::Infeasible { .. }) => stable_attempt(
            a_matrix,
            c_matrix,
            gamma_lower,
            gamma_upper,
            u_term_lower,
            u_term_upper,
            mode,
            false,
        ),
        other => other,
    }
}

#[allow(clippy::too_many_arguments)]
fn stable_attempt(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    gamma_lower: f64,
    gamma_upper: f64,
    u_term_lower: &DMatrix<f64>,
    u_term_upper: &DMatrix<f64>,
    mode: GainMode,
    strict_metzler: bool,
) -> Result<GainDesign, SynthesisError> {
    let n = square_dims(a_matrix, c_matrix)?;
    let m = c_matrix.nrows();
    if gamma_lower < 0.0 || gamma_upper < 0.0 {
        return Err(SynthesisError::Dimension(
            "gamma scalars must be nonnegative".to_string(),
        ));
    }
    for (name, u) in [("lower", u_term_lower), ("upper", u_term_upper)] {
        if u.nrows() != n || u.ncols() != n {
            return Err(SynthesisError::Dimension(format!(
                "{name} gap-gain term must be {n}x{n}, got {}x{}",
                u.nrows(),
                u.ncols()
            )));
        }
    }

    // Variables: x (n), y_lower (n*m), y_upper (n*m), a.
    let num_vars = n + 2 * n * m + 1;
    let x_var = |i: usize| i;
    let y_lo = |i: usize, k: usize| n + i * m + k;
    let y_hi = |i: usize, k: usize| n + n * m + i * m + k;
    let a_var = num_vars - 1;

    let mut constraints = Vec::new();
    let mut blocks = BlockMap::new();

    // X 1 > 0, entrywise.
    let start = constraints.len();
    for i in 0..n {
        let mut coeffs = vec![0.0; num_vars];
        coeffs[x_var(i)] = 1.0;
        constraints.push(tighten(LinearConstraint::ge(coeffs, 0.0)));
    }
    blocks.push(start..constraints.len(), ConstraintBlock::XPositivity);

    // X A - Y C > a I, encoded entrywise. Off-diagonal strictness only
    // matters where a variable can act; pinned-zero entries reduce to the
    // closed Metzler sign check.
    for (block, y_var) in [
        (ConstraintBlock::MetzlerLower, &y_lo as &dyn Fn(usize, usize) -> usize),
        (ConstraintBlock::MetzlerUpper, &y_hi),
    ] {
        let start = constraints.len();
        for i in 0..n {
            for j in 0..n {
                // x_i A_{ij} - sum_k C_{kj} y_{ik} (- a if diagonal) >= 0
                let mut coeffs = vec![0.0; num_vars];
                coeffs[x_var(i)] += a_matrix[(i, j)];
                for k in 0..m {
                    coeffs[y_var(i, k)] -= c_matrix[(k, j)];
                }
                if i == j {
                    coeffs[a_var] -= 1.0;
                }
                constraints.push(tighten_metzler(
                    LinearConstraint::ge(coeffs, 0.0),
                    strict_metzler,
                ));
            }
        }
        blocks.push(start..constraints.len(), block);
    }

    // Weighted row condition, one row per state and gain:
    // sum_j (A_{ji} + gamma delta_{ij} + U_{ji}) x_j - sum_k C_{ki} sum_j y_{jk} < 0.
    // Strictness is essential here (it is what yields a positive decay
    // rate), so every row carries the margin.
    for (block, y_var, gamma, u_term) in [
        (
            ConstraintBlock::RowSumLower,
            &y_lo as &dyn Fn(usize, usize) -> usize,
            gamma_lower,
            u_term_lower,
        ),
        (ConstraintBlock::RowSumUpper, &y_hi, gamma_upper, u_term_upper),
    ] {
        let start = constraints.len();
        for i in 0..n {
            let mut coeffs = vec![0.0; num_vars];
            for j in 0..n {
                coeffs[x_var(j)] += a_matrix[(j, i)] + u_term[(j, i)];
            }
            coeffs[x_var(i)] += gamma;
            for k in 0..m {
                for j in 0..n {
                    coeffs[y_var(j, k)] -= c_matrix[(k, i)];
                }
            }
            constraints.push(tighten(LinearConstraint::le(coeffs, 0.0)));
        }
        blocks.push(start..constraints.len(), block);
    }

    let outcome = lp::solve(&LpProblem::feasibility(num_vars, constraints))?;
    match outcome.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(SynthesisError::Infeasible {
                step: 4,
                mode,
                block: outcome
                    .infeasible_row
                    .map(|r| blocks.lookup(r))
                    .unwrap_or(ConstraintBlock::Unknown),
            });
        }
        LpStatus::Unbounded => {
            return Err(SynthesisError::DesignInvalid(
                "feasibility program reported unbounded".to_string(),
            ));
        }
    }
    let point = outcome.point.expect("optimal outcome has a point");
    GainDesign::from_lp(
        DVector::from_fn(n, |i, _| point[x_var(i)]),
        DMatrix::from_fn(n, m, |i, k| point[y_lo(i, k)]),
        DMatrix::from_fn(n, m, |i, k| point[y_hi(i, k)]),
        point[a_var],
        mode,
        a_matrix.clone(),
        c_matrix.clone(),
    )
}

/// Stable gain synthesis for state-driven networks: the chain's level-0
/// state columns enter the row condition.
pub fn synthesize_gains_stable(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    gamma_lower: f64,
    gamma_upper: f64,
    chain: &SMatrixChain,
) -> Result<GainDesign, SynthesisError> {
    gain_lp_stable(
        a_matrix,
        c_matrix,
        gamma_lower,
        gamma_upper,
        &chain.u_lower,
        &chain.u_upper,
        GainMode::StableStateDriven,
    )
}

/// Stable gain synthesis for output-driven networks. The measured output
/// feeds the auxiliary networks exactly, so the gap-gain terms vanish and
/// the program depends only on the system matrices.
pub fn synthesize_gains_output_driven(
    a_matrix: &DMatrix<f64>,
    c_matrix: &DMatrix<f64>,
    gamma_lower: f64,
    gamma_upper: f64,
) -> Result<GainDesign, SynthesisError> {
    let n = square_dims(a_matrix, c_matrix)?;
    let zero = zeros_like_u(n);
    gain_lp_stable(
        a_matrix,
        c_matrix,
        gamma_lower,
        gamma_upper,
        &zero,
        &zero,
        GainMode::StableOutputDriven,
    )
}

/// Certificate from explicit row terms: `u_term_*` are the `n x n`
/// gap-gain matrices of the row condition and `disturbance` is the
/// constant error-growth vector whose weighted sum gives `theta`.
pub fn compute_certificate_general(
    design: &GainDesign,
    gamma_lower: f64,
    gamma_upper: f64,
    u_term_lower: &DMatrix<f64>,
    u_term_upper: &DMatrix<f64>,
    disturbance: &DVector<f64>,
) -> Result<StabilityCertificate, SynthesisError> {
    let n = design.num_states();
    let v = design.x_diag.clone();
    if v.iter().any(|&vi| vi <= 0.0) {
        return Err(SynthesisError::DesignInvalid(
            "certificate weight vector must be positive".to_string(),
        ));
    }
    if disturbance.len() != n {
        return Err(SynthesisError::Dimension(format!(
            "disturbance vector must have {n} components, got {}",
            disturbance.len()
        )));
    }
    let mut lambda = f64::INFINITY;
    for (gamma, l, u_term) in [
        (gamma_lower, &design.l_lower, u_term_lower),
        (gamma_upper, &design.l_upper, u_term_upper),
    ] {
        let row = design.a_matrix.transpose() * &v - design.c_matrix.transpose() * (l.transpose() * &v)
            + gamma * &v
            + u_term.transpose() * &v;
        for i in 0..n {
            lambda = lambda.min(-row[i] / v[i]);
        }
    }
    if lambda <= 0.0 {
        return Err(SynthesisError::CertificateInvalid { lambda });
    }
    let theta = disturbance.dot(&v);
    let v_min = v.min();
    let v_max = v.max();
    Ok(StabilityCertificate {
        lambda,
        big_c: v_max / v_min,
        radius_r: theta / (lambda * v_min),
        theta,
        v,
    })
}

/// Certificate in terms of a chain and the raw problem data: the gap-gain
/// terms come straight from the chain's level-0 split (zero when absent)
/// and `theta` collects the input-width and offset contributions.
#[allow(clippy::too_many_arguments)]
pub fn compute_certificate(
    design: &GainDesign,
    gamma_lower: f64,
    gamma_upper: f64,
    chain: Option<&SMatrixChain>,
    rho_lower: &DVector<f64>,
    rho_upper: &DVector<f64>,
    u_lower: &DVector<f64>,
    u_upper: &DVector<f64>,
) -> Result<StabilityCertificate, SynthesisError> {
    let n = design.num_states();
    let mut disturbance = rho_lower + rho_upper;
    let (ut_lower, ut_upper) = match chain {
        Some(chain) => {
            let width = u_upper - u_lower;
            if width.len() != chain.v_lower.ncols() {
                return Err(SynthesisError::Dimension(format!(
                    "input width has {} components, chain tail expects {}",
                    width.len(),
                    chain.v_lower.ncols()
                )));
            }
            let tail = (&chain.v_lower + &chain.v_upper) * width;
            if tail.len() != n {
                return Err(SynthesisError::Dimension(format!(
                    "chain output dimension {} does not match state dimension {n}",
                    tail.len()
                )));
            }
            disturbance += tail;
            (chain.u_lower.clone(), chain.u_upper.clone())
        }
        None => (zeros_like_u(n), zeros_like_u(n)),
    };
    compute_certificate_general(
        design,
        gamma_lower,
        gamma_upper,
        &ut_lower,
        &ut_upper,
        &disturbance,
    )
}

/// Substitutes a stable design back into its constraint families and
/// reports the margin of each.
pub fn verify_design(
    design: &GainDesign,
    gamma_lower: f64,
    gamma_upper: f64,
    u_term_lower: &DMatrix<f64>,
    u_term_upper: &DMatrix<f64>,
) -> SubstitutionCheck {
    let n = design.num_states();
    let x = DMatrix::from_diagonal(&design.x_diag);
    let v = &design.x_diag;
    let mut check = SubstitutionCheck {
        x_positivity: f64::INFINITY,
        metzler_offdiag_lower: f64::INFINITY,
        metzler_diag_lower: f64::INFINITY,
        metzler_offdiag_upper: f64::INFINITY,
        metzler_diag_upper: f64::INFINITY,
        row_sum_lower: f64::INFINITY,
        row_sum_upper: f64::INFINITY,
    };
    for i in 0..n {
        check.x_positivity = check.x_positivity.min(design.x_diag[i]);
    }
    for (y, off_margin, diag_margin) in [
        (
            &design.y_lower,
            &mut check.metzler_offdiag_lower,
            &mut check.metzler_diag_lower,
        ),
        (
            &design.y_upper,
            &mut check.metzler_offdiag_upper,
            &mut check.metzler_diag_upper,
        ),
    ] {
        let scaled = &x * &design.a_matrix - y * &design.c_matrix;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    *diag_margin = diag_margin.min(scaled[(i, i)] - design.a);
                } else {
                    *off_margin = off_margin.min(scaled[(i, j)]);
                }
            }
        }
    }
    for (gamma, l, u_term, margin) in [
        (
            gamma_lower,
            &design.l_lower,
            u_term_lower,
            &mut check.row_sum_lower,
        ),
        (
            gamma_upper,
            &design.l_upper,
            u_term_upper,
            &mut check.row_sum_upper,
        ),
    ] {
        let row = design.a_matrix.transpose() * v - design.c_matrix.transpose() * (l.transpose() * v)
            + gamma * v
            + u_term.transpose() * v;
        for i in 0..n {
            *margin = margin.min(-row[i]);
        }
    }
    check
}

/// Solver statuses and margins recorded by the pipeline.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub chain_lp_status: Option<LpStatus>,
    pub gain_lp_status: Option<LpStatus>,
    pub substitution: Option<SubstitutionCheck>,
    pub strict_margin: f64,
}

/// Everything the pipeline produces: gains, optional chain and
/// certificate, the auxiliary pair, the input envelope the design is
/// certified for, and solver diagnostics.
#[derive(Debug, Clone)]
pub struct DesignReport {
    pub design: GainDesign,
    pub chain: Option<SMatrixChain>,
    pub certificate: Option<StabilityCertificate>,
    pub aux_pair: AuxiliaryPair,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub diagnostics: Diagnostics,
}

/// Effective row terms for a design given its system: the embedding's
/// absolute value folds the network-output map into the chain terms.
/// Zero matrices when no chain applies (output-driven designs).
pub fn effective_row_terms(
    system: &LipschitzSystem,
    chain: Option<&SMatrixChain>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = system.num_states();
    match (system.nn_input_mode, chain) {
        (InputMode::StateDriven, Some(chain)) => {
            let e_abs = system.nn_embedding.abs();
            (&e_abs * &chain.u_lower, &e_abs * &chain.u_upper)
        }
        _ => (zeros_like_u(n), zeros_like_u(n)),
    }
}

/// Constant error-growth vector: offsets plus every input-width
/// contribution (through the chain tail and the direct feedthrough).
fn disturbance_vector(
    system: &LipschitzSystem,
    decomp: &BoundingDecomposition,
    chain: Option<&SMatrixChain>,
    u_lower: &DVector<f64>,
    u_upper: &DVector<f64>,
) -> DVector<f64> {
    let mut d = &decomp.rho_lower + &decomp.rho_upper;
    d += system.b_matrix.abs() * (u_upper - u_lower);
    if let Some(chain) = chain {
        let e_abs = system.nn_embedding.abs();
        let width = match system.nn_input_mode {
            InputMode::StateDriven => u_upper - u_lower,
            InputMode::OutputDriven => {
                system.visible_inputs(u_upper) - system.visible_inputs(u_lower)
            }
        };
        d += &e_abs * ((&chain.v_lower + &chain.v_upper) * width);
    }
    d
}

/// Runs the full design pipeline:
///
/// 1. build the auxiliary pair;
/// 2. solve the chain LP (state-driven always; output-driven only when the
///    network-visible inputs have positive width, since the chain then
///    feeds the certificate);
/// 3. split the level-0 matrices;
/// 4. solve the gain feasibility program;
/// 5. form the gains and the decay certificate.
pub fn design_pipeline(
    system: &LipschitzSystem,
    decomp: &BoundingDecomposition,
    u_lower: &DVector<f64>,
    u_upper: &DVector<f64>,
    mode: InputMode,
) -> Result<DesignReport, SynthesisError> {
    if mode != system.nn_input_mode {
        return Err(SynthesisError::ModeMismatch {
            design: mode.name(),
            system: system.nn_input_mode.name(),
        });
    }
    let n_u = system.num_inputs();
    if u_lower.len() != n_u || u_upper.len() != n_u {
        return Err(SynthesisError::Dimension(format!(
            "input envelope must have {n_u} components"
        )));
    }

    // Step 1: auxiliary networks.
    let aux_pair = make_auxiliary_pair(&system.nn);
    let alpha = lipschitz_bound(&system.nn);

    // Step 2 and 3: chain and split.
    let chain = match system.nn_input_mode {
        InputMode::StateDriven => Some(synthesize_s_chain_lp(
            &aux_pair,
            alpha,
            system.num_states(),
        )?),
        InputMode::OutputDriven => {
            let vis_width =
                system.visible_inputs(u_upper) - system.visible_inputs(u_lower);
            if vis_width.iter().any(|&w| w > 0.0) {
                Some(synthesize_s_chain_lp(
                    &aux_pair,
                    alpha,
                    system.num_outputs(),
                )?)
            } else {
                None
            }
        }
    };

    // Step 4: gain program.
    let (ut_lower, ut_upper) = effective_row_terms(system, chain.as_ref());
    let gain_mode = match system.nn_input_mode {
        InputMode::StateDriven => GainMode::StableStateDriven,
        InputMode::OutputDriven => GainMode::StableOutputDriven,
    };
    let design = gain_lp_stable(
        &system.a_matrix,
        &system.c_matrix,
        decomp.gamma_lower(),
        decomp.gamma_upper(),
        &ut_lower,
        &ut_upper,
        gain_mode,
    )?;

    // Step 5: certificate.
    let disturbance = disturbance_vector(system, decomp, chain.as_ref(), u_lower, u_upper);
    let certificate = compute_certificate_general(
        &design,
        decomp.gamma_lower(),
        decomp.gamma_upper(),
        &ut_lower,
        &ut_upper,
        &disturbance,
    )?;
    let substitution = verify_design(
        &design,
        decomp.gamma_lower(),
        decomp.gamma_upper(),
        &ut_lower,
        &ut_upper,
    );

    let diagnostics = Diagnostics {
        chain_lp_status: chain.as_ref().map(|_| LpStatus::Optimal),
        gain_lp_status: Some(LpStatus::Optimal),
        substitution: Some(substitution),
        strict_margin: STRICT_MARGIN,
    };

    Ok(DesignReport {
        design,
        chain,
        certificate: Some(certificate),
        aux_pair,
        u_lower: u_lower.clone(),
        u_upper: u_upper.clone(),
        diagnostics,
    })
}

/// Recomputes the certificate of a report from its own gains and chain.
/// Used to confirm report consistency and by the `check` command.
pub fn recompute_certificate(
    system: &LipschitzSystem,
    decomp: &BoundingDecomposition,
    report: &DesignReport,
) -> Result<StabilityCertificate, SynthesisError> {
    let (ut_lower, ut_upper) = effective_row_terms(system, report.chain.as_ref());
    let disturbance = disturbance_vector(
        system,
        decomp,
        report.chain.as_ref(),
        &report.u_lower,
        &report.u_upper,
    );
    compute_certificate_general(
        &report.design,
        decomp.gamma_lower(),
        decomp.gamma_upper(),
        &ut_lower,
        &ut_upper,
        &disturbance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{example1_network, fixture_acc, fixture_example1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn metzler_check_on_reference_gains() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let l_lower = DMatrix::from_row_slice(2, 1, &[0.0, 12.0394]);
        let l_upper = DMatrix::from_row_slice(2, 1, &[1.0, 8.0044]);
        let cl_lower = &a - &l_lower * &c;
        let cl_upper = &a - &l_upper * &c;
        assert!(is_metzler(&cl_lower, 0.0).unwrap());
        assert!(is_metzler(&cl_upper, 0.0).unwrap());
        assert_eq!(cl_lower, DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -17.0394]));
    }

    #[test]
    fn metzler_trivia() {
        assert!(is_metzler(&DMatrix::identity(3, 3), 0.0).unwrap());
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        assert!(!is_metzler(&bad, 0.0).unwrap());
        assert!(is_metzler(&bad, 1.0).unwrap());
        assert!(matches!(
            is_metzler(&DMatrix::zeros(2, 3), 0.0),
            Err(SynthesisError::NonSquare { .. })
        ));
    }

    #[test]
    fn recursive_chain_single_layer_approaches_alpha_abs_w() {
        let w = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -2.0, 0.25]);
        let nn = crate::nn::NeuralNetwork::new(vec![crate::nn::Layer::new(
            w.clone(),
            DVector::zeros(2),
            crate::nn::ActivationKind::Tanh,
        )
        .unwrap()])
        .unwrap();
        let pair = make_auxiliary_pair(&nn);
        let chain = recursive_s_chain(&pair, 1.0, 1e-12, 2).unwrap();
        let expect = w.abs();
        for i in 0..2 {
            for j in 0..2 {
                assert!((chain.s_lower[0][(i, j)] - expect[(i, j)]).abs() < 1e-10);
                assert!((chain.s_upper[0][(i, j)] - expect[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn recursive_chain_matches_independent_recursion() {
        // Duplicate implementation with plain nested vectors, kept apart
        // from the library's matrix code on purpose.
        let nn = example1_network();
        let pair = make_auxiliary_pair(&nn);
        let chain = recursive_s_chain(&pair, 1.0, 1e-9, 2).unwrap();

        let split = |w: &DMatrix<f64>| {
            let rows = w.nrows();
            let cols = w.ncols();
            let mut lo = vec![vec![0.0; cols]; rows];
            let mut hi = vec![vec![0.0; cols]; rows];
            for i in 0..rows {
                for j in 0..cols {
                    if w[(i, j)] < 0.0 {
                        lo[i][j] = w[(i, j)];
                    } else {
                        hi[i][j] = w[(i, j)];
                    }
                }
            }
            (lo, hi)
        };
        let mat_mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            let rows = a.len();
            let inner = b.len();
            let cols = b[0].len();
            let mut out = vec![vec![0.0; cols]; rows];
            for i in 0..rows {
                for j in 0..cols {
                    let mut acc = 0.0;
                    for k in 0..inner {
                        acc += a[i][k] * b[k][j];
                    }
                    out[i][j] = acc;
                }
            }
            out
        };
        type SplitRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);
        let layers: Vec<SplitRows> = nn.layers().iter().map(|l| split(&l.weight)).collect();
        let eps = 1e-9;
        let mut s_lo = vec![vec![0.0; 2]; 2];
        let mut s_hi = vec![vec![0.0; 2]; 2];
        for (i, row) in s_lo.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (i, row) in s_hi.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (w_lo, w_hi) in layers.iter().rev() {
            let a = mat_mul(&s_lo, w_hi);
            let b = mat_mul(&s_hi, w_lo);
            let c = mat_mul(&s_hi, w_hi);
            let d = mat_mul(&s_lo, w_lo);
            let cols = w_lo[0].len();
            let mut next_lo = vec![vec![0.0; cols]; 2];
            let mut next_hi = vec![vec![0.0; cols]; 2];
            for i in 0..2 {
                for j in 0..cols {
                    next_lo[i][j] = a[i][j] - b[i][j] + eps;
                    next_hi[i][j] = c[i][j] - d[i][j] + eps;
                }
            }
            s_lo = next_lo;
            s_hi = next_hi;
        }
        for i in 0..2 {
            for j in 0..3 {
                assert!((chain.s_lower[0][(i, j)] - s_lo[i][j]).abs() < 1e-12);
                assert!((chain.s_upper[0][(i, j)] - s_hi[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recursive_chain_zero_weights() {
        let nn = crate::nn::NeuralNetwork::new(vec![crate::nn::Layer::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            crate::nn::ActivationKind::Purelin,
        )
        .unwrap()])
        .unwrap();
        let pair = make_auxiliary_pair(&nn);
        let chain = recursive_s_chain(&pair, 1.0, 1e-9, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(chain.s_lower[0][(i, j)], 1e-9);
                assert_eq!(chain.s_upper[0][(i, j)], 1e-9);
            }
        }
    }

    #[test]
    fn chain_lp_single_layer_is_alpha_abs_w() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, -0.75, 3.0, 0.0]);
        let nn = crate::nn::NeuralNetwork::new(vec![crate::nn::Layer::new(
            w.clone(),
            DVector::zeros(2),
            crate::nn::ActivationKind::Sigmoid,
        )
        .unwrap()])
        .unwrap();
        let pair = make_auxiliary_pair(&nn);
        let alpha = 0.25;
        let chain = synthesize_s_chain_lp(&pair, alpha, 2).unwrap();
        let expect = w.abs() * alpha;
        for i in 0..2 {
            for j in 0..3 {
                assert!((chain.s_lower[0][(i, j)] - expect[(i, j)]).abs() < 1e-8);
                assert!((chain.s_upper[0][(i, j)] - expect[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn chain_lp_dominated_by_recursive_chain() {
        let nn = example1_network();
        let pair = make_auxiliary_pair(&nn);
        let lp_chain = synthesize_s_chain_lp(&pair, 1.0, 2).unwrap();
        let rec_chain = recursive_s_chain(&pair, 1.0, 1e-6, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!(
                    lp_chain.s_lower[0][(i, j)] <= rec_chain.s_lower[0][(i, j)] + 1e-8,
                    "lower ({i},{j})"
                );
                assert!(
                    lp_chain.s_upper[0][(i, j)] <= rec_chain.s_upper[0][(i, j)] + 1e-8,
                    "upper ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn chain_lp_zero_weights_gives_zero() {
        let nn = crate::nn::NeuralNetwork::new(vec![crate::nn::Layer::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            crate::nn::ActivationKind::Purelin,
        )
        .unwrap()])
        .unwrap();
        let pair = make_auxiliary_pair(&nn);
        let chain = synthesize_s_chain_lp(&pair, 1.0, 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!(chain.s_lower[0][(i, j)].abs() <= 1e-9);
                assert!(chain.s_upper[0][(i, j)].abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sampled_gap_bound_holds_for_both_chains() {
        let nn = example1_network();
        let pair = make_auxiliary_pair(&nn);
        let chains = [
            synthesize_s_chain_lp(&pair, 1.0, 2).unwrap(),
            recursive_s_chain(&pair, 1.0, 1e-9, 2).unwrap(),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for chain in &chains {
            for _ in 0..200 {
                let lo = DVector::from_fn(3, |_, _| rng.random_range(-2.0..=2.0));
                let width = DVector::from_fn(3, |_, _| rng.random_range(0.0..=2.0));
                let hi = &lo + &width;
                let eta = DVector::from_fn(3, |i, _| rng.random_range(lo[i]..=hi[i]));
                let slack = chain.gap_bound_slack(&pair, &lo, &eta, &hi).unwrap();
                assert!(slack >= -1e-8, "gap bound violated by {slack}");
            }
        }
    }

    #[test]
    fn chain_construction_rejects_bad_levels() {
        let nn = example1_network();
        let pair = make_auxiliary_pair(&nn);
        let good = recursive_s_chain(&pair, 1.0, 1e-9, 2).unwrap();

        // non-identity seed
        let mut s_lower = good.s_lower.clone();
        s_lower[2][(0, 1)] = 0.5;
        assert!(matches!(
            SMatrixChain::from_levels(s_lower, good.s_upper.clone(), &pair, 1.0, 2, CHECK_TOL),
            Err(SynthesisError::ChainInvalid {
                what: "identity seed",
                ..
            })
        ));

        // negative entry
        let mut s_lower = good.s_lower.clone();
        s_lower[1][(0, 0)] = -0.1;
        assert!(matches!(
            SMatrixChain::from_levels(s_lower, good.s_upper.clone(), &pair, 1.0, 2, CHECK_TOL),
            Err(SynthesisError::ChainInvalid {
                what: "nonnegativity",
                ..
            })
        ));

        // violated link: the level-0 matrix is too small to dominate
        let mut s_lower = good.s_lower.clone();
        s_lower[0] = DMatrix::zeros(2, 3);
        assert!(matches!(
            SMatrixChain::from_levels(s_lower, good.s_upper.clone(), &pair, 1.0, 2, CHECK_TOL),
            Err(SynthesisError::ChainInvalid {
                what: "lower link",
                ..
            })
        ));
    }

    #[test]
    fn metzler_gains_for_two_state_system() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let design = synthesize_gains_metzler(&a, &c).unwrap();
        assert_eq!(design.mode, GainMode::MetzlerOnly);
        assert!(is_metzler(&design.closed_loop_lower(), 1e-9).unwrap());
        assert!(is_metzler(&design.closed_loop_upper(), 1e-9).unwrap());
    }

    #[test]
    fn metzler_gains_trivial_with_identity_output() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.25, -1.0]);
        let c = DMatrix::identity(2, 2);
        assert!(synthesize_gains_metzler(&a, &c).is_ok());
    }

    #[test]
    fn metzler_gains_infeasible_with_zero_output_map() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        let c = DMatrix::zeros(1, 2);
        match synthesize_gains_metzler(&a, &c) {
            Err(SynthesisError::Infeasible { step: 4, block, .. }) => {
                assert!(matches!(
                    block,
                    ConstraintBlock::MetzlerLower | ConstraintBlock::MetzlerUpper
                ));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    fn example1_chain() -> (SMatrixChain, DMatrix<f64>, DMatrix<f64>) {
        let nn = example1_network();
        let pair = make_auxiliary_pair(&nn);
        let chain = synthesize_s_chain_lp(&pair, 1.0, 2).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 3.0, -5.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        (chain, a, c)
    }

    #[test]
    fn stable_gains_for_example_system() {
        let (chain, a, c) = example1_chain();
        let design = synthesize_gains_stable(&a, &c, 0.0, 0.0, &chain).unwrap();
        let check = verify_design(&design, 0.0, 0.0, &chain.u_lower, &chain.u_upper);
        assert!(
            check.min_margin() >= STRICT_MARGIN - 1e-9,
            "margins too small: {check:?}"
        );
        // definition of the gains from the scaling
        for i in 0..2 {
            assert!(
                (design.l_lower[(i, 0)] * design.x_diag[i] - design.y_lower[(i, 0)]).abs()
                    < 1e-9
            );
            assert!(
                (design.l_upper[(i, 0)] * design.x_diag[i] - design.y_upper[(i, 0)]).abs()
                    < 1e-9
            );
        }
    }

    #[test]
    fn stable_gains_scalar_trivial_case() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let zero = DMatrix::zeros(1, 1);
        let design = gain_lp_stable(&a, &c, 0.0, 0.0, &zero, &zero, GainMode::StableStateDriven)
            .unwrap();
        let cert = compute_certificate_general(&design, 0.0, 0.0, &zero, &zero, &DVector::zeros(1))
            .unwrap();
        assert!(cert.lambda > 0.0);
        assert_eq!(cert.theta, 0.0);
        assert_eq!(cert.radius_r, 0.0);
        assert_eq!(cert.big_c, 1.0);
    }

    #[test]
    fn stable_gains_infeasible_when_growth_dominates() {
        // gamma = 10 with no measurement: the row condition needs
        // (-1 + 10) x < 0 with x > 0, impossible.
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let c = DMatrix::from_row_slice(1, 1, &[0.0]);
        let zero = DMatrix::zeros(1, 1);
        // which block phase 1 leaves violated is its choice; infeasibility
        // is the contract
        assert!(matches!(
            gain_lp_stable(&a, &c, 10.0, 10.0, &zero, &zero, GainMode::StableStateDriven),
            Err(SynthesisError::Infeasible { step: 4, .. })
        ));
    }

    #[test]
    fn output_driven_scalar_unstable_is_infeasible() {
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let c = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(matches!(
            synthesize_gains_output_driven(&a, &c, 0.0, 0.0),
            Err(SynthesisError::Infeasible { step: 4, .. })
        ));
    }

    #[test]
    fn output_driven_infeasible_on_cruise_control_matrices() {
        // The position rows pin the second gain column-sum to be both
        // strictly positive (lead position row) and strictly negative (ego
        // position row): the relative-distance measurement enters the two
        // rows with opposite signs while both columns of the drift matrix
        // are zero. No margin or scaling fixes that, so the program is
        // structurally infeasible. See the repository notes for the full
        // derivation.
        let (sys, _, _) = fixture_acc().unwrap();
        match synthesize_gains_output_driven(&sys.a_matrix, &sys.c_matrix, 0.0, 0.0) {
            Err(SynthesisError::Infeasible {
                step: 4,
                mode: GainMode::StableOutputDriven,
                block,
            }) => {
                assert!(matches!(
                    block,
                    ConstraintBlock::RowSumLower | ConstraintBlock::RowSumUpper
                ));
            }
            other => panic!("expected structural infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn output_driven_feasible_whenever_state_driven_is() {
        // dropping nonnegative gap-gain terms only relaxes the row
        // condition, so output-driven feasibility follows from state-driven
        // feasibility; checked on random fully-measured systems.
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut feasible_seen = 0;
        for _ in 0..20 {
            let n = rng.random_range(1..=3usize);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..=2.0));
            let c = DMatrix::identity(n, n);
            let u_term = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..=0.5));
            let state = gain_lp_stable(
                &a,
                &c,
                0.1,
                0.1,
                &u_term,
                &u_term,
                GainMode::StableStateDriven,
            );
            if state.is_ok() {
                feasible_seen += 1;
                assert!(
                    synthesize_gains_output_driven(&a, &c, 0.1, 0.1).is_ok(),
                    "output-driven program must be a relaxation"
                );
            }
        }
        assert!(feasible_seen > 0, "random generator never produced a feasible case");
    }

    #[test]
    fn certificate_theta_is_linear_in_input_width() {
        let (chain, a, c) = example1_chain();
        let design = synthesize_gains_stable(&a, &c, 0.0, 0.0, &chain).unwrap();
        let rho = DVector::zeros(2);
        let u_lo = DVector::from_vec(vec![-10.0]);
        let u_hi = DVector::from_vec(vec![10.0]);
        let cert1 = compute_certificate(&design, 0.0, 0.0, Some(&chain), &rho, &rho, &u_lo, &u_hi)
            .unwrap();
        let cert2 = compute_certificate(
            &design,
            0.0,
            0.0,
            Some(&chain),
            &rho,
            &rho,
            &(2.0 * &u_lo),
            &(2.0 * &u_hi),
        )
        .unwrap();
        assert!((cert2.theta - 2.0 * cert1.theta).abs() < 1e-9 * cert1.theta.abs().max(1.0));
        assert_eq!(cert1.lambda, cert2.lambda);
    }

    #[test]
    fn pipeline_completes_on_state_driven_fixture() {
        let (sys, decomp, scenario) = fixture_example1().unwrap();
        let report = design_pipeline(
            &sys,
            &decomp,
            &scenario.u_lower,
            &scenario.u_upper,
            InputMode::StateDriven,
        )
        .unwrap();
        assert!(report.chain.is_some());
        let cert = report.certificate.as_ref().unwrap();
        assert!(cert.lambda > 0.0);
        assert!(cert.big_c >= 1.0);
        assert!(cert.radius_r >= 0.0);
        assert!(is_metzler(&report.design.closed_loop_lower(), 1e-9).unwrap());
        assert!(is_metzler(&report.design.closed_loop_upper(), 1e-9).unwrap());
        let check = report.diagnostics.substitution.as_ref().unwrap();
        assert!(check.min_margin() >= STRICT_MARGIN - 1e-9);
    }

    #[test]
    fn pipeline_reports_step_four_infeasibility_on_acc() {
        let (sys, decomp, scenario) = fixture_acc().unwrap();
        match design_pipeline(
            &sys,
            &decomp,
            &scenario.u_lower,
            &scenario.u_upper,
            InputMode::OutputDriven,
        ) {
            Err(SynthesisError::Infeasible { step: 4, mode, .. }) => {
                assert_eq!(mode, GainMode::StableOutputDriven);
            }
            other => panic!("expected step-4 infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_rejects_mode_mismatch() {
        let (sys, decomp, scenario) = fixture_example1().unwrap();
        assert!(matches!(
            design_pipeline(
                &sys,
                &decomp,
                &scenario.u_lower,
                &scenario.u_upper,
                InputMode::OutputDriven,
            ),
            Err(SynthesisError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn certificate_recomputation_is_exact() {
        let (sys, decomp, scenario) = fixture_example1().unwrap();
        let report = design_pipeline(
            &sys,
            &decomp,
            &scenario.u_lower,
            &scenario.u_upper,
            InputMode::StateDriven,
        )
        .unwrap();
        let cert = report.certificate.as_ref().unwrap();
        let again = recompute_certificate(&sys, &decomp, &report).unwrap();
        assert!((cert.lambda - again.lambda).abs() <= 1e-12);
        assert!((cert.theta - again.theta).abs() <= 1e-12 * cert.theta.abs().max(1.0));
        assert!((cert.big_c - again.big_c).abs() <= 1e-12);
        assert!((cert.radius_r - again.radius_r).abs() <= 1e-12 * cert.radius_r.abs().max(1.0));
    }
}
