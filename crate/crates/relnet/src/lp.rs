//! Dense linear-program solver.
//!
//! Self-contained two-phase primal simplex over a dense tableau. Problems are
//! stated as `max/min c·x` subject to `Ax <= b` plus per-variable bounds
//! (lower bounds default to 0, upper bounds optional). Equality constraints
//! are encoded by callers as paired inequalities; the solver API stays
//! inequality-only.
//!
//! The pivot rule is Dantzig (most improving reduced cost) with a switch to
//! Bland's rule after a run of degenerate pivots, which guarantees
//! termination. Identical problem bytes produce identical solution bytes.
//!
//! Problem sizes in this crate are small (hundreds to low thousands of
//! variables), so no sparse factorization is used.

use std::fmt;

const PIVOT_EPS: f64 = 1e-9;
const DEGENERATE_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Tolerances used by [`solve_lp`] and [`verify_solution`].
#[derive(Debug, Clone, Copy)]
pub struct LpTolerances {
    /// Maximum allowed constraint violation for a point to count as feasible.
    pub feasibility: f64,
}

impl Default for LpTolerances {
    fn default() -> Self {
        LpTolerances { feasibility: 1e-8 }
    }
}

/// A dense inequality-form linear program: optimize `c·x` s.t. `Ax <= b`,
/// `lower <= x <= upper`.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<Option<f64>>,
    pub var_labels: Vec<String>,
    pub row_labels: Vec<String>,
}

impl LpProblem {
    pub fn new(sense: Sense, num_vars: usize) -> Self {
        LpProblem {
            sense,
            objective: vec![0.0; num_vars],
            rows: Vec::new(),
            rhs: Vec::new(),
            lower: vec![0.0; num_vars],
            upper: vec![None; num_vars],
            var_labels: (0..num_vars).map(|j| format!("x{j}")).collect(),
            row_labels: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds the constraint `sum coeffs[k].1 * x[coeffs[k].0] <= rhs`.
    pub fn push_row(&mut self, label: impl Into<String>, coeffs: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.num_vars()];
        for &(j, c) in coeffs {
            row[j] += c;
        }
        self.rows.push(row);
        self.rhs.push(rhs);
        self.row_labels.push(label.into());
    }

    pub fn set_lower(&mut self, var: usize, bound: f64) {
        self.lower[var] = bound;
    }

    pub fn set_upper(&mut self, var: usize, bound: f64) {
        self.upper[var] = Some(bound);
    }

    /// Fixes a variable to a constant value.
    pub fn fix(&mut self, var: usize, value: f64) {
        self.lower[var] = value;
        self.upper[var] = Some(value);
    }

    pub fn row(&self, i: usize) -> (&[f64], f64) {
        (&self.rows[i], self.rhs[i])
    }

    pub fn bounds(&self, var: usize) -> (f64, Option<f64>) {
        (self.lower[var], self.upper[var])
    }
}

impl fmt::Display for LpProblem {
    /// Plain-text tableau dump: one line for the objective, one per
    /// constraint row, then the variable bounds.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sense = match self.sense {
            Sense::Maximize => "max",
            Sense::Minimize => "min",
        };
        write!(f, "{sense}")?;
        for (j, c) in self.objective.iter().enumerate() {
            if *c != 0.0 {
                write!(f, " {:+} {}", c, self.var_labels[j])?;
            }
        }
        writeln!(f)?;
        for (i, row) in self.rows.iter().enumerate() {
            write!(f, "{}:", self.row_labels[i])?;
            for (j, a) in row.iter().enumerate() {
                if *a != 0.0 {
                    write!(f, " {:+} {}", a, self.var_labels[j])?;
                }
            }
            writeln!(f, " <= {}", self.rhs[i])?;
        }
        for j in 0..self.num_vars() {
            match self.upper[j] {
                Some(u) => writeln!(f, "{} <= {} <= {}", self.lower[j], self.var_labels[j], u)?,
                None => writeln!(f, "{} <= {}", self.lower[j], self.var_labels[j])?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal values; empty unless status is `Optimal`.
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest constraint or bound violation of `x`.
    pub max_residual: f64,
    pub iterations: usize,
}

/// Per-constraint violation report for a candidate point.
#[derive(Debug, Clone, Default)]
pub struct ResidualReport {
    pub max_violation: f64,
    /// Constraint rows violated beyond the tolerance: (row index, amount).
    pub violated_rows: Vec<(usize, f64)>,
    /// Variable bounds violated beyond the tolerance: (var index, amount).
    pub violated_bounds: Vec<(usize, f64)>,
}

/// Checks a primal point against every constraint row and bound.
pub fn verify_solution(problem: &LpProblem, x: &[f64], tol: &LpTolerances) -> ResidualReport {
    let mut report = ResidualReport::default();
    for (i, row) in problem.rows.iter().enumerate() {
        let lhs: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
        let violation = lhs - problem.rhs[i];
        report.max_violation = report.max_violation.max(violation);
        if violation > tol.feasibility {
            report.violated_rows.push((i, violation));
        }
    }
    for j in 0..problem.num_vars() {
        let mut violation = problem.lower[j] - x[j];
        if let Some(u) = problem.upper[j] {
            violation = violation.max(x[j] - u);
        }
        report.max_violation = report.max_violation.max(violation);
        if violation > tol.feasibility {
            report.violated_bounds.push((j, violation));
        }
    }
    report
}

/// Solves the program. Never panics on well-formed input; infeasible and
/// unbounded problems are reported through the status field.
pub fn solve_lp(problem: &LpProblem, tol: &LpTolerances) -> LpSolution {
    Tableau::build(problem).solve(problem, tol)
}

/// Dense simplex tableau. Variables are remapped to shifted columns
/// (`x = lower + x'`), fixed variables are substituted out, and finite upper
/// bounds become extra rows.
struct Tableau {
    /// (rows+1) x (cols+1) matrix, last row = objective, last col = rhs.
    t: Vec<f64>,
    stride: usize,
    m: usize,
    n_struct: usize,
    n_total: usize,
    n_artificial: usize,
    basis: Vec<usize>,
    /// Structural column index for each free (non-fixed) problem variable.
    col_of_var: Vec<Option<usize>>,
}

impl Tableau {
    fn build(p: &LpProblem) -> Tableau {
        let nv = p.num_vars();
        let mut col_of_var: Vec<Option<usize>> = vec![None; nv];
        let mut n_struct = 0;
        for j in 0..nv {
            let fixed = matches!(p.upper[j], Some(u) if u <= p.lower[j]);
            if !fixed {
                col_of_var[j] = Some(n_struct);
                n_struct += 1;
            }
        }

        // Row set: original rows plus one row per finite upper bound.
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::with_capacity(p.num_rows());
        for (i, row) in p.rows.iter().enumerate() {
            let mut b = p.rhs[i];
            let mut coeffs = Vec::new();
            for (j, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                b -= a * p.lower[j];
                if let Some(c) = col_of_var[j] {
                    coeffs.push((c, a));
                }
            }
            rows.push((coeffs, b));
        }
        for j in 0..nv {
            if let (Some(c), Some(u)) = (col_of_var[j], p.upper[j]) {
                rows.push((vec![(c, 1.0)], u - p.lower[j]));
            }
        }

        let m = rows.len();
        // Sign-normalize so every rhs is nonnegative; negated rows need an
        // artificial variable, others get a plain slack basis.
        let mut n_artificial = 0;
        for (_, b) in &rows {
            if *b < 0.0 {
                n_artificial += 1;
            }
        }
        let n_total = n_struct + m + n_artificial;
        let stride = n_total + 1;
        let mut t = vec![0.0; (m + 1) * stride];
        let mut basis = vec![0usize; m];
        let mut next_art = n_struct + m;
        for (i, (coeffs, b)) in rows.iter().enumerate() {
            let flip = if *b < 0.0 { -1.0 } else { 1.0 };
            for &(c, a) in coeffs {
                t[i * stride + c] = flip * a;
            }
            t[i * stride + n_struct + i] = flip; // slack: +1 or -1
            t[i * stride + n_total] = flip * b;
            if flip < 0.0 {
                t[i * stride + next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            } else {
                basis[i] = n_struct + i;
            }
        }

        Tableau {
            t,
            stride,
            m,
            n_struct,
            n_total,
            n_artificial,
            basis,
            col_of_var,
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.stride + c]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let stride = self.stride;
        let piv = self.t[row * stride + col];
        let inv = 1.0 / piv;
        for c in 0..stride {
            self.t[row * stride + c] *= inv;
        }
        self.t[row * stride + col] = 1.0;
        for r in 0..=self.m {
            if r == row {
                continue;
            }
            let factor = self.t[r * stride + col];
            if factor == 0.0 {
                continue;
            }
            for c in 0..stride {
                self.t[r * stride + c] -= factor * self.t[row * stride + c];
            }
            self.t[r * stride + col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Runs the simplex loop on the current objective row (to be maximized,
    /// stored negated in the usual tableau convention). Returns false when
    /// unbounded.
    fn run(&mut self, allowed_cols: usize, iterations: &mut usize) -> bool {
        let mut degenerate_run = 0usize;
        loop {
            *iterations += 1;
            let bland = degenerate_run > DEGENERATE_LIMIT;
            // Entering column: reduced cost < -eps in the objective row.
            let mut col = None;
            let mut best = -PIVOT_EPS;
            for c in 0..allowed_cols {
                let rc = self.at(self.m, c);
                if rc < -PIVOT_EPS {
                    if bland {
                        col = Some(c);
                        break;
                    }
                    if rc < best {
                        best = rc;
                        col = Some(c);
                    }
                }
            }
            let Some(col) = col else {
                return true; // optimal
            };
            // Ratio test; ties broken by smallest basis variable for
            // determinism (and Bland's anti-cycling guarantee).
            let mut row: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.m {
                let a = self.at(r, col);
                if a > PIVOT_EPS {
                    let ratio = self.at(r, self.n_total) / a;
                    let better = match row {
                        None => true,
                        Some(prev) => {
                            ratio < best_ratio - PIVOT_EPS
                                || (ratio < best_ratio + PIVOT_EPS
                                    && self.basis[r] < self.basis[prev])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        row = Some(r);
                    }
                }
            }
            let Some(row) = row else {
                return false; // unbounded
            };
            if best_ratio.abs() <= PIVOT_EPS {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(row, col);
        }
    }

    fn solve(mut self, p: &LpProblem, tol: &LpTolerances) -> LpSolution {
        let mut iterations = 0usize;
        let stride = self.stride;

        if self.n_artificial > 0 {
            // Phase 1: minimize the sum of artificials. The objective row is
            // the (negated) sum of the rows holding an artificial basis.
            for c in 0..stride {
                self.t[self.m * stride + c] = 0.0;
            }
            for r in 0..self.m {
                if self.basis[r] >= self.n_struct + self.m {
                    for c in 0..stride {
                        self.t[self.m * stride + c] -= self.t[r * stride + c];
                    }
                }
            }
            for a in self.n_struct + self.m..self.n_total {
                self.t[self.m * stride + a] = 0.0;
            }
            self.run(self.n_struct + self.m, &mut iterations);
            let phase1 = -self.at(self.m, self.n_total);
            if phase1 > tol.feasibility.max(1e-7) {
                return LpSolution {
                    status: LpStatus::Infeasible,
                    x: Vec::new(),
                    objective: f64::NAN,
                    max_residual: phase1,
                    iterations,
                };
            }
            // Drive any artificial still in the basis out of it.
            for r in 0..self.m {
                if self.basis[r] >= self.n_struct + self.m {
                    let mut entering = None;
                    for c in 0..self.n_struct + self.m {
                        if self.at(r, c).abs() > PIVOT_EPS {
                            entering = Some(c);
                            break;
                        }
                    }
                    if let Some(c) = entering {
                        self.pivot(r, c);
                    }
                    // An all-zero row is redundant; its artificial stays
                    // basic at value zero, which is harmless.
                }
            }
        }

        // Phase 2: install the real objective, priced out against the basis.
        let max_sign = match p.sense {
            Sense::Maximize => 1.0,
            Sense::Minimize => -1.0,
        };
        for c in 0..stride {
            self.t[self.m * stride + c] = 0.0;
        }
        for (j, col) in self.col_of_var.iter().enumerate() {
            if let Some(c) = *col {
                self.t[self.m * stride + c] = -max_sign * p.objective[j];
            }
        }
        for r in 0..self.m {
            let b = self.basis[r];
            let factor = self.t[self.m * stride + b];
            if factor != 0.0 {
                for c in 0..stride {
                    self.t[self.m * stride + c] -= factor * self.t[r * stride + c];
                }
                self.t[self.m * stride + b] = 0.0;
            }
        }
        let ok = self.run(self.n_struct + self.m, &mut iterations);
        if !ok {
            return LpSolution {
                status: LpStatus::Unbounded,
                x: Vec::new(),
                objective: match p.sense {
                    Sense::Maximize => f64::INFINITY,
                    Sense::Minimize => f64::NEG_INFINITY,
                },
                max_residual: 0.0,
                iterations,
            };
        }

        let mut x = vec![0.0; p.num_vars()];
        for (j, col) in self.col_of_var.iter().enumerate() {
            x[j] = p.lower[j];
            if let Some(c) = *col {
                for r in 0..self.m {
                    if self.basis[r] == c {
                        x[j] += self.at(r, self.n_total);
                        break;
                    }
                }
            }
        }
        let objective: f64 = p.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        let report = verify_solution(p, &x, tol);
        LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
            max_residual: report.max_violation,
            iterations,
        }
    }
}
