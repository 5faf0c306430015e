//! Dense two-phase simplex solver with Bland's anti-cycling rule.
//!
//! All decision variables are free; internally each is split into a
//! positive and a negative part. Strict inequalities from callers are
//! handled by [`feasible_point`], which tightens every inequality by an
//! explicit margin before solving, so any point it returns satisfies the
//! strict originals.
//!
//! Bland's rule (lowest eligible entering column, ratio ties broken by the
//! lowest basic variable index) makes every solve deterministic: identical
//! problems produce identical outcomes. `solve` is a pure function over its
//! input; problems may be shared read-only across threads.

use thiserror::Error;

/// A point reported feasible must satisfy every constraint within this.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Pivots smaller in magnitude than this are numerically degenerate.
pub const PIVOT_TOL: f64 = 1e-11;
/// Reduced costs above `-REDUCED_COST_TOL` are treated as optimal.
const REDUCED_COST_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("constraint {row} has {got} coefficients but the problem has {want} variables")]
    BadConstraint { row: usize, got: usize, want: usize },
    #[error(
        "numerically degenerate pivot in constraint row {row} (|pivot| = {magnitude:.3e} < 1e-11)"
    )]
    DegeneratePivot { row: usize, magnitude: f64 },
    #[error("simplex iteration limit reached ({0} iterations)")]
    IterationLimit(usize),
    #[error("solver produced a point violating constraint {row} by {residual:.3e}")]
    ResidualCheck { row: usize, residual: f64 },
    #[error("internal simplex invariant broken: {0}")]
    Internal(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

/// One row `coefficients . x  <relation>  rhs`.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub coefficients: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn le(coefficients: Vec<f64>, rhs: f64) -> Self {
        LinearConstraint {
            coefficients,
            relation: Relation::Le,
            rhs,
        }
    }

    pub fn ge(coefficients: Vec<f64>, rhs: f64) -> Self {
        LinearConstraint {
            coefficients,
            relation: Relation::Ge,
            rhs,
        }
    }

    pub fn eq(coefficients: Vec<f64>, rhs: f64) -> Self {
        LinearConstraint {
            coefficients,
            relation: Relation::Eq,
            rhs,
        }
    }

    /// Signed violation of the constraint at `x`: positive means violated.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let value: f64 = self
            .coefficients
            .iter()
            .zip(x)
            .map(|(c, v)| c * v)
            .sum();
        match self.relation {
            Relation::Le => value - self.rhs,
            Relation::Ge => self.rhs - value,
            Relation::Eq => (value - self.rhs).abs(),
        }
    }
}

/// Minimization problem over free variables. An all-zero objective makes it
/// a pure feasibility problem.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<LinearConstraint>,
}

impl LpProblem {
    pub fn feasibility(num_vars: usize, constraints: Vec<LinearConstraint>) -> Self {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            constraints,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub point: Option<Vec<f64>>,
    pub objective_value: Option<f64>,
    /// On infeasibility: first constraint row still violated at the phase-1
    /// optimum. Lets callers name the offending constraint block.
    pub infeasible_row: Option<usize>,
}

impl LpOutcome {
    fn infeasible(row: Option<usize>) -> Self {
        LpOutcome {
            status: LpStatus::Infeasible,
            point: None,
            objective_value: None,
            infeasible_row: row,
        }
    }

    fn unbounded() -> Self {
        LpOutcome {
            status: LpStatus::Unbounded,
            point: None,
            objective_value: None,
            infeasible_row: None,
        }
    }
}

/// Solves a pure feasibility problem after tightening every inequality by
/// `strict_margin` (`a . x <= b` becomes `a . x <= b - margin`, `>=`
/// likewise; equalities are left alone). Callers encode strict rows as
/// ordinary inequalities and pick the margin.
pub fn feasible_point(
    num_vars: usize,
    constraints: &[LinearConstraint],
    strict_margin: f64,
) -> Result<LpOutcome, LpError> {
    assert!(strict_margin > 0.0, "strict margin must be positive");
    let tightened = constraints
        .iter()
        .map(|c| {
            let rhs = match c.relation {
                Relation::Le => c.rhs - strict_margin,
                Relation::Ge => c.rhs + strict_margin,
                Relation::Eq => c.rhs,
            };
            LinearConstraint {
                coefficients: c.coefficients.clone(),
                relation: c.relation,
                rhs,
            }
        })
        .collect();
    solve(&LpProblem::feasibility(num_vars, tightened))
}

struct Tableau {
    /// Constraint matrix rows over all columns (structural, slack,
    /// artificial); right-hand sides kept separately.
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    /// Basic variable (column index) of each row.
    basis: Vec<usize>,
    /// For each row, the original constraint index it came from.
    origin: Vec<usize>,
    /// Reduced-cost row and its objective cell.
    cost: Vec<f64>,
    cost_rhs: f64,
    num_cols: usize,
    /// artificial column -> row of origin
    artificial_rows: Vec<usize>,
}

enum StepOutcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let pivot = self.rows[row][col];
        let inv = 1.0 / pivot;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        self.rhs[row] *= inv;
        self.rows[row][col] = 1.0;
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let factor = self.rows[r][col];
            if factor != 0.0 {
                for c in 0..self.num_cols {
                    self.rows[r][c] -= factor * self.rows[row][c];
                }
                self.rows[r][col] = 0.0;
                self.rhs[r] -= factor * self.rhs[row];
            }
        }
        let factor = self.cost[col];
        if factor != 0.0 {
            for c in 0..self.num_cols {
                self.cost[c] -= factor * self.rows[row][c];
            }
            self.cost[col] = 0.0;
            self.cost_rhs -= factor * self.rhs[row];
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations until optimality or unboundedness, using
    /// Bland's rule. `allowed_cols` bounds the entering-column search.
    fn run(&mut self, allowed_cols: usize) -> Result<StepOutcome, LpError> {
        let max_iterations = 50_000 + 200 * (self.rows.len() + self.num_cols);
        for _ in 0..max_iterations {
            let entering = (0..allowed_cols).find(|&j| self.cost[j] < -REDUCED_COST_TOL);
            let Some(col) = entering else {
                return Ok(StepOutcome::Optimal);
            };
            let mut leaving: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.rows.len() {
                let coeff = self.rows[r][col];
                if coeff > PIVOT_TOL {
                    let ratio = self.rhs[r] / coeff;
                    let better = match leaving {
                        None => true,
                        Some(cur) => {
                            ratio < best_ratio - 1e-12
                                || (ratio <= best_ratio + 1e-12 && self.basis[r] < self.basis[cur])
                        }
                    };
                    if better {
                        leaving = Some(r);
                        best_ratio = ratio;
                    }
                }
            }
            match leaving {
                Some(row) => self.pivot(row, col),
                None => {
                    // No usable pivot. A strictly positive but sub-threshold
                    // coefficient is a degenerate pivot, not unboundedness.
                    let mut tiny: Option<(usize, f64)> = None;
                    for r in 0..self.rows.len() {
                        let coeff = self.rows[r][col];
                        if coeff > 0.0 && tiny.is_none_or(|(_, best)| coeff > best) {
                            tiny = Some((r, coeff));
                        }
                    }
                    if let Some((row, magnitude)) = tiny {
                        return Err(LpError::DegeneratePivot {
                            row: self.origin[row],
                            magnitude,
                        });
                    }
                    return Ok(StepOutcome::Unbounded);
                }
            }
        }
        Err(LpError::IterationLimit(max_iterations))
    }
}

/// Two-phase simplex over the free-variable split form.
pub fn solve(problem: &LpProblem) -> Result<LpOutcome, LpError> {
    let n = problem.num_vars;
    for (row, c) in problem.constraints.iter().enumerate() {
        if c.coefficients.len() != n {
            return Err(LpError::BadConstraint {
                row,
                got: c.coefficients.len(),
                want: n,
            });
        }
    }
    let m = problem.constraints.len();

    // Count slack and artificial columns after rhs normalization.
    let mut slack_count = 0;
    let mut artificial_count = 0;
    let mut normalized: Vec<(Vec<f64>, Relation, f64)> = Vec::with_capacity(m);
    for c in &problem.constraints {
        let (coeffs, relation, rhs) = if c.rhs < 0.0 {
            let flipped: Vec<f64> = c.coefficients.iter().map(|v| -v).collect();
            let rel = match c.relation {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
            (flipped, rel, -c.rhs)
        } else {
            (c.coefficients.clone(), c.relation, c.rhs)
        };
        match relation {
            Relation::Le => slack_count += 1,
            Relation::Ge => {
                slack_count += 1;
                artificial_count += 1;
            }
            Relation::Eq => artificial_count += 1,
        }
        normalized.push((coeffs, relation, rhs));
    }

    let structural = 2 * n;
    let slack_start = structural;
    let artificial_start = slack_start + slack_count;
    let num_cols = artificial_start + artificial_count;

    let mut tableau = Tableau {
        rows: vec![vec![0.0; num_cols]; m],
        rhs: vec![0.0; m],
        basis: vec![0; m],
        origin: (0..m).collect(),
        cost: vec![0.0; num_cols],
        cost_rhs: 0.0,
        num_cols,
        artificial_rows: Vec::with_capacity(artificial_count),
    };

    let mut next_slack = slack_start;
    let mut next_artificial = artificial_start;
    for (r, (coeffs, relation, rhs)) in normalized.iter().enumerate() {
        for (j, &v) in coeffs.iter().enumerate() {
            tableau.rows[r][j] = v;
            tableau.rows[r][n + j] = -v;
        }
        tableau.rhs[r] = *rhs;
        match relation {
            Relation::Le => {
                tableau.rows[r][next_slack] = 1.0;
                tableau.basis[r] = next_slack;
                next_slack += 1;
            }
            Relation::Ge => {
                tableau.rows[r][next_slack] = -1.0;
                next_slack += 1;
                tableau.rows[r][next_artificial] = 1.0;
                tableau.basis[r] = next_artificial;
                tableau.artificial_rows.push(r);
                next_artificial += 1;
            }
            Relation::Eq => {
                tableau.rows[r][next_artificial] = 1.0;
                tableau.basis[r] = next_artificial;
                tableau.artificial_rows.push(r);
                next_artificial += 1;
            }
        }
    }

    // Phase 1: minimize the sum of artificials. Price out the basic ones.
    if artificial_count > 0 {
        for j in artificial_start..num_cols {
            tableau.cost[j] = 1.0;
        }
        for &r in tableau.artificial_rows.clone().iter() {
            for c in 0..num_cols {
                tableau.cost[c] -= tableau.rows[r][c];
            }
            tableau.cost_rhs -= tableau.rhs[r];
        }
        match tableau.run(num_cols)? {
            StepOutcome::Optimal => {}
            StepOutcome::Unbounded => {
                return Err(LpError::Internal("phase 1 cannot be unbounded"));
            }
        }
        let phase1_value = -tableau.cost_rhs;
        if phase1_value > FEASIBILITY_TOL {
            let row = tableau
                .basis
                .iter()
                .enumerate()
                .find(|(r, &b)| b >= artificial_start && tableau.rhs[*r] > FEASIBILITY_TOL)
                .map(|(r, _)| tableau.origin[r]);
            return Ok(LpOutcome::infeasible(row));
        }
        // Drive remaining zero-level artificials out of the basis; rows
        // that cannot pivot are redundant and get dropped.
        let mut r = 0;
        while r < tableau.rows.len() {
            if tableau.basis[r] >= artificial_start {
                let col = (0..artificial_start)
                    .filter(|&j| tableau.rows[r][j].abs() > PIVOT_TOL)
                    .max_by(|&a, &b| {
                        tableau.rows[r][a]
                            .abs()
                            .partial_cmp(&tableau.rows[r][b].abs())
                            .unwrap()
                    });
                match col {
                    Some(col) => tableau.pivot(r, col),
                    None => {
                        tableau.rows.swap_remove(r);
                        tableau.rhs.swap_remove(r);
                        tableau.basis.swap_remove(r);
                        tableau.origin.swap_remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }
        // Drop artificial columns entirely.
        for row in tableau.rows.iter_mut() {
            row.truncate(artificial_start);
        }
        tableau.num_cols = artificial_start;
    }

    // Phase 2: minimize the real objective.
    tableau.cost = vec![0.0; tableau.num_cols];
    tableau.cost_rhs = 0.0;
    for j in 0..n {
        tableau.cost[j] = problem.objective[j];
        tableau.cost[n + j] = -problem.objective[j];
    }
    for r in 0..tableau.rows.len() {
        let cb = tableau.cost[tableau.basis[r]];
        if cb != 0.0 {
            for c in 0..tableau.num_cols {
                tableau.cost[c] -= cb * tableau.rows[r][c];
            }
            tableau.cost[tableau.basis[r]] = 0.0;
            tableau.cost_rhs -= cb * tableau.rhs[r];
        }
    }
    match tableau.run(tableau.num_cols)? {
        StepOutcome::Optimal => {}
        StepOutcome::Unbounded => return Ok(LpOutcome::unbounded()),
    }

    // Extract the free variables from their split parts.
    let mut split = vec![0.0; 2 * n];
    for (r, &b) in tableau.basis.iter().enumerate() {
        if b < 2 * n {
            split[b] = tableau.rhs[r];
        }
    }
    let point: Vec<f64> = (0..n).map(|j| split[j] - split[n + j]).collect();
    let objective_value: f64 = problem
        .objective
        .iter()
        .zip(&point)
        .map(|(c, v)| c * v)
        .sum();

    // Soundness re-check: the reported point must satisfy every original
    // constraint within tolerance.
    for (row, c) in problem.constraints.iter().enumerate() {
        let violation = c.violation(&point);
        if violation > FEASIBILITY_TOL {
            return Err(LpError::ResidualCheck {
                row,
                residual: violation,
            });
        }
    }

    Ok(LpOutcome {
        status: LpStatus::Optimal,
        point: Some(point),
        objective_value: Some(objective_value),
        infeasible_row: None,
    })
}
