//! Small dense two-phase simplex.
//!
//! The allocation programs solved here have at most a dozen variables and
//! constraints, so a plain tableau with Bland's rule is both fast enough
//! (microseconds) and immune to cycling. Minimization form over `x >= 0`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn le(coeffs: Vec<f64>, rhs: f64) -> Self {
        Constraint {
            coeffs,
            relation: Relation::Le,
            rhs,
        }
    }

    pub fn ge(coeffs: Vec<f64>, rhs: f64) -> Self {
        Constraint {
            coeffs,
            relation: Relation::Ge,
            rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

const PIVOT_EPS: f64 = 1e-10;
const FEAS_EPS: f64 = 1e-7;

struct Tableau {
    rows: Vec<Vec<f64>>, // m rows of n_total + 1 (rhs)
    cost: Vec<f64>,      // reduced costs, length n_total + 1 (last = -objective)
    basis: Vec<usize>,
    n_total: usize,
    blocked: Vec<bool>, // columns barred from entering (artificials in phase 2)
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        debug_assert!(p.abs() > PIVOT_EPS);
        let inv = 1.0 / p;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        for i in 0..self.rows.len() {
            if i == row {
                continue;
            }
            let f = self.rows[i][col];
            if f != 0.0 {
                for j in 0..=self.n_total {
                    self.rows[i][j] -= f * self.rows[row][j];
                }
            }
        }
        let f = self.cost[col];
        if f != 0.0 {
            for j in 0..=self.n_total {
                self.cost[j] -= f * self.rows[row][j];
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations until optimal or unbounded. Bland's rule on
    /// both the entering and leaving choices.
    fn optimize(&mut self) -> bool {
        loop {
            let mut entering = None;
            for j in 0..self.n_total {
                if !self.blocked[j] && self.cost[j] < -PIVOT_EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return true;
            };
            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][col];
                if a > PIVOT_EPS {
                    let ratio = self.rows[i][self.n_total] / a;
                    let better = match leaving {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - PIVOT_EPS
                                || (ratio < lr + PIVOT_EPS && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return false; // unbounded
            };
            self.pivot(row, col);
        }
    }
}

/// Minimizes `objective . x` subject to `constraints` and `x >= 0`.
pub fn solve(objective: &[f64], constraints: &[Constraint]) -> LpOutcome {
    let n = objective.len();
    let m = constraints.len();

    // Normalize rows to non-negative rhs, then count slack/artificial needs.
    let mut rows_in: Vec<(Vec<f64>, Relation, f64)> = Vec::with_capacity(m);
    for c in constraints {
        debug_assert_eq!(c.coeffs.len(), n, "constraint arity mismatch");
        if c.rhs < 0.0 {
            let flipped = match c.relation {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
            rows_in.push((c.coeffs.iter().map(|v| -v).collect(), flipped, -c.rhs));
        } else {
            rows_in.push((c.coeffs.clone(), c.relation, c.rhs));
        }
    }

    let n_slack = rows_in
        .iter()
        .filter(|(_, r, _)| *r != Relation::Eq)
        .count();
    let n_art = rows_in
        .iter()
        .filter(|(_, r, _)| *r != Relation::Le)
        .count();
    let n_total = n + n_slack + n_art;

    let mut rows = vec![vec![0.0; n_total + 1]; m];
    let mut basis = vec![0usize; m];
    let mut art_cols = Vec::with_capacity(n_art);
    let mut next_slack = n;
    let mut next_art = n + n_slack;

    for (i, (coeffs, rel, rhs)) in rows_in.iter().enumerate() {
        rows[i][..n].copy_from_slice(coeffs);
        rows[i][n_total] = *rhs;
        match rel {
            Relation::Le => {
                rows[i][next_slack] = 1.0;
                basis[i] = next_slack;
                next_slack += 1;
            }
            Relation::Ge => {
                rows[i][next_slack] = -1.0;
                next_slack += 1;
                rows[i][next_art] = 1.0;
                basis[i] = next_art;
                art_cols.push(next_art);
                next_art += 1;
            }
            Relation::Eq => {
                rows[i][next_art] = 1.0;
                basis[i] = next_art;
                art_cols.push(next_art);
                next_art += 1;
            }
        }
    }

    let mut t = Tableau {
        rows,
        cost: vec![0.0; n_total + 1],
        basis,
        n_total,
        blocked: vec![false; n_total],
    };

    // Phase 1: minimize the sum of artificials. Their rows start basic, so
    // the reduced-cost row is minus the sum of those rows.
    if n_art > 0 {
        for j in 0..=n_total {
            let mut s = 0.0;
            for (i, b) in t.basis.iter().enumerate() {
                if art_cols.contains(b) {
                    s += t.rows[i][j];
                }
            }
            t.cost[j] = -s;
        }
        for &a in &art_cols {
            t.cost[a] += 1.0;
        }
        if !t.optimize() {
            // Phase 1 objective is bounded below by zero; unbounded cannot
            // happen with finite data.
            return LpOutcome::Infeasible;
        }
        let phase1 = -t.cost[n_total];
        if phase1 > FEAS_EPS {
            return LpOutcome::Infeasible;
        }
        // Drive remaining artificials out of the basis where possible.
        for i in 0..m {
            if art_cols.contains(&t.basis[i]) {
                if let Some(col) = (0..n + n_slack).find(|&j| t.rows[i][j].abs() > PIVOT_EPS) {
                    t.pivot(i, col);
                }
            }
        }
        for &a in &art_cols {
            t.blocked[a] = true;
        }
    }

    // Phase 2: reduced costs for the real objective given the current basis.
    let mut cost = vec![0.0; n_total + 1];
    cost[..n].copy_from_slice(objective);
    for (i, &b) in t.basis.iter().enumerate() {
        let cb = if b < n { objective[b] } else { 0.0 };
        if cb != 0.0 {
            for j in 0..=n_total {
                cost[j] -= cb * t.rows[i][j];
            }
        }
    }
    t.cost = cost;

    if !t.optimize() {
        return LpOutcome::Unbounded;
    }

    let mut x = vec![0.0; n];
    for (i, &b) in t.basis.iter().enumerate() {
        if b < n {
            x[b] = t.rows[i][t.n_total];
        }
    }
    let objective_value = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    LpOutcome::Optimal {
        x,
        objective: objective_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(out: LpOutcome) -> (Vec<f64>, f64) {
        match out {
            LpOutcome::Optimal { x, objective } => (x, objective),
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn maximization_via_negation() {
        // max x + y s.t. x + 2y <= 4, 3x + y <= 6  ->  optimum at (1.6, 1.2).
        let out = solve(
            &[-1.0, -1.0],
            &[
                Constraint::le(vec![1.0, 2.0], 4.0),
                Constraint::le(vec![3.0, 1.0], 6.0),
            ],
        );
        let (x, obj) = optimal(out);
        assert!((x[0] - 1.6).abs() < 1e-9);
        assert!((x[1] - 1.2).abs() < 1e-9);
        assert!((obj + 2.8).abs() < 1e-9);
    }

    #[test]
    fn ge_constraints_need_phase_one() {
        // min x + y s.t. x + y >= 2, x <= 1.5  ->  objective 2.
        let out = solve(
            &[1.0, 1.0],
            &[
                Constraint::ge(vec![1.0, 1.0], 2.0),
                Constraint::le(vec![1.0, 0.0], 1.5),
            ],
        );
        let (_, obj) = optimal(out);
        assert!((obj - 2.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        let out = solve(
            &[1.0],
            &[
                Constraint::ge(vec![1.0], 5.0),
                Constraint::le(vec![1.0], 1.0),
            ],
        );
        assert_eq!(out, LpOutcome::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        // min -x with x only bounded below.
        let out = solve(&[-1.0], &[Constraint::ge(vec![1.0], 1.0)]);
        assert_eq!(out, LpOutcome::Unbounded);
    }

    #[test]
    fn equality_constraints() {
        // min 2x + 3y s.t. x + y = 4, x >= 1  ->  x = 4, y = 0 is blocked by
        // nothing, objective 8... check: cost favors x (2 < 3), so x = 4.
        let out = solve(
            &[2.0, 3.0],
            &[
                Constraint {
                    coeffs: vec![1.0, 1.0],
                    relation: Relation::Eq,
                    rhs: 4.0,
                },
                Constraint::ge(vec![1.0, 0.0], 1.0),
            ],
        );
        let (x, obj) = optimal(out);
        assert!((x[0] - 4.0).abs() < 1e-9);
        assert!((obj - 8.0).abs() < 1e-9);
    }

    #[test]
    fn negative_rhs_is_normalized() {
        // x - y <= -1 with min x + y  ->  y >= x + 1, optimum (0, 1).
        let out = solve(&[1.0, 1.0], &[Constraint::le(vec![1.0, -1.0], -1.0)]);
        let (x, obj) = optimal(out);
        assert!((x[1] - 1.0).abs() < 1e-9, "{x:?}");
        assert!((obj - 1.0).abs() < 1e-9);
    }
}
