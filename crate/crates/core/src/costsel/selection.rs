//! Server-selection policies: round-robin, k-closest, and the cost-aware
//! assignment program.
//!
//! The cost-aware variant assigns per-region request allocations
//! `alpha[i][j]` (region i, peering link j) to minimize the projected excess
//! of each link's load over its current billing-percentile mark,
//! `sum_j max(B_j + L_j - F_j, 0)` with `B_j = sum_i m_i alpha_ij Rhat_ij`,
//! subject to per-region rate guarantees, a window cap, a link capacity cap,
//! and a quadratic variance budget `alpha' Q alpha + b' alpha + T^2 <= gamma^2`
//! with `Q_jj = Var(R_j) + Rhat_j^2`, `Q_jl = Rhat_j Rhat_l`, `b_j = -2 T
//! Rhat_j`. Q is positive semidefinite, so the program is convex; it is
//! solved as an epigraph LP refined with cutting planes on the quadratic
//! constraints.

use crate::domain::{ServerId, SimDuration};
use crate::simplex::{solve as lp_solve, Constraint, LpOutcome};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("selection program is infeasible")]
    Infeasible,
    #[error("cutting-plane refinement did not converge")]
    DidNotConverge,
}

/// Rotating round-robin assignment state.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundRobinState {
    pub counter: u64,
}

/// Returns `k` consecutive servers modulo `n_servers` starting at the
/// rotation counter, then advances the counter by `k`.
pub fn select_round_robin(
    state: &mut RoundRobinState,
    k: u32,
    n_servers: u32,
) -> Vec<ServerId> {
    assert!(k <= n_servers, "cannot select {k} of {n_servers} servers");
    let start = state.counter;
    state.counter = (state.counter + k as u64) % n_servers as u64;
    (0..k as u64)
        .map(|i| ServerId(((start + i) % n_servers as u64) as u32))
        .collect()
}

/// The `k` servers with the lowest round-trip time; ties break toward lower
/// server ids.
pub fn select_k_closest(rtts: &[(ServerId, SimDuration)], k: usize) -> Vec<ServerId> {
    assert!(k <= rtts.len());
    let mut sorted: Vec<_> = rtts.to_vec();
    sorted.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(s, _)| s).collect()
}

/// One client region: expected arrivals this period, the rate it must be
/// guaranteed, and the per-link rate statistics observed from that region.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub expected_arrivals: f64,
    pub target_rate: f64,
    pub mean_rates: Vec<f64>,
    pub rate_variances: Vec<f64>,
}

/// One peering link: its current billing-percentile mark, present load, and
/// capacity, all in the same rate unit as `B_j`.
#[derive(Debug, Clone, Copy)]
pub struct LinkSpec {
    pub percentile_mark: f64,
    pub current_load: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionProblem {
    pub regions: Vec<RegionSpec>,
    pub links: Vec<LinkSpec>,
    pub max_window: f64,
    pub variance_budget: f64,
}

/// Reading of the excess objective: sum of per-link excess (default) or the
/// worst single link. Both are convex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveMode {
    #[default]
    SumExcess,
    MaxExcess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAssignment {
    /// `alpha[i][j]`: requests region `i` directs at link `j`.
    pub alpha: Vec<Vec<f64>>,
    /// Per-region target rates, kept for assignment trimming.
    targets: Vec<f64>,
    /// Per-region link rates.
    rates: Vec<Vec<f64>>,
    /// Objective value in the chosen mode.
    pub objective: f64,
}

impl SelectionAssignment {
    /// Servers a region's clients are assigned to. Excess-cost ties leave
    /// the allocation degenerate (any split across under-mark links costs
    /// the same), so the assignment is trimmed to the smallest allocation
    /// prefix that still covers the region's rate guarantee; handing every
    /// faintly-loaded link to the clients would fan their traffic out and
    /// defeat the cost objective.
    pub fn assigned_servers(&self, region: usize) -> Vec<ServerId> {
        let mut order: Vec<usize> = (0..self.alpha[region].len())
            .filter(|&j| self.alpha[region][j] > 1e-6)
            .collect();
        order.sort_by(|&a, &b| {
            self.alpha[region][b]
                .partial_cmp(&self.alpha[region][a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut covered = 0.0;
        let mut picked = Vec::new();
        for j in order {
            picked.push(ServerId(j as u32));
            covered += self.alpha[region][j] * self.rates[region][j];
            if covered >= self.targets[region] - 1e-9 {
                break;
            }
        }
        picked.sort();
        picked
    }
}

impl SelectionProblem {
    fn quad_matrix(&self, i: usize) -> Vec<Vec<f64>> {
        let r = &self.regions[i];
        let j_n = r.mean_rates.len();
        let mut q = vec![vec![0.0; j_n]; j_n];
        for a in 0..j_n {
            for b in 0..j_n {
                q[a][b] = if a == b {
                    r.rate_variances[a] + r.mean_rates[a] * r.mean_rates[a]
                } else {
                    r.mean_rates[a] * r.mean_rates[b]
                };
            }
        }
        q
    }

    /// `alpha' Q alpha + b' alpha + T^2 - gamma^2` for region `i`; feasible
    /// when non-positive.
    pub fn variance_residual(&self, i: usize, alpha_i: &[f64]) -> f64 {
        let r = &self.regions[i];
        let q = self.quad_matrix(i);
        let mut quad = 0.0;
        for a in 0..alpha_i.len() {
            for b in 0..alpha_i.len() {
                quad += alpha_i[a] * q[a][b] * alpha_i[b];
            }
        }
        let lin: f64 = alpha_i
            .iter()
            .zip(&r.mean_rates)
            .map(|(a, rate)| -2.0 * r.target_rate * rate * a)
            .sum();
        quad + lin + r.target_rate * r.target_rate
            - self.variance_budget * self.variance_budget
    }

    /// Unconstrained minimum of region `i`'s variance expression - a lower
    /// bound for the constrained problem, so a budget below it is infeasible
    /// no matter what the other constraints allow. Q = diag(var) + r r', so
    /// the stationary point comes from one Sherman-Morrison solve.
    pub fn variance_floor(&self, i: usize) -> f64 {
        let r = &self.regions[i];
        if r.rate_variances.iter().any(|v| *v <= 1e-12) {
            // A variance-free path can hit the target exactly.
            return 0.0;
        }
        let t = r.target_rate;
        // alpha* = T * D^-1 r / (1 + r' D^-1 r); plug into the quadratic.
        let dinv_r: Vec<f64> = r
            .mean_rates
            .iter()
            .zip(&r.rate_variances)
            .map(|(rate, var)| rate / var)
            .collect();
        let denom = 1.0
            + r.mean_rates
                .iter()
                .zip(&dinv_r)
                .map(|(rate, d)| rate * d)
                .sum::<f64>();
        let alpha: Vec<f64> = dinv_r.iter().map(|d| t * d / denom).collect();
        self.variance_residual(i, &alpha) + self.variance_budget * self.variance_budget
    }

    /// Whether any region's variance budget is unreachable even ignoring the
    /// other constraints.
    pub fn variance_budget_unreachable(&self) -> bool {
        (0..self.regions.len())
            .any(|i| self.variance_floor(i) > self.variance_budget * self.variance_budget + 1e-9)
    }

    /// Projected load each allocation adds to link `j`.
    pub fn induced_load(&self, alpha: &[Vec<f64>], j: usize) -> f64 {
        self.regions
            .iter()
            .zip(alpha)
            .map(|(r, a)| r.expected_arrivals * a[j] * r.mean_rates[j])
            .sum()
    }

    /// Excess objective at a given allocation.
    pub fn objective_at(&self, alpha: &[Vec<f64>], mode: ObjectiveMode) -> f64 {
        let excess = |j: usize| {
            (self.induced_load(alpha, j) + self.links[j].current_load
                - self.links[j].percentile_mark)
                .max(0.0)
        };
        match mode {
            ObjectiveMode::SumExcess => (0..self.links.len()).map(excess).sum(),
            ObjectiveMode::MaxExcess => (0..self.links.len())
                .map(excess)
                .fold(0.0_f64, f64::max),
        }
    }
}

const MAX_CUTS: usize = 80;
const CUT_TOL: f64 = 1e-10;

/// Solves the cost-aware assignment program. The returned allocation
/// satisfies every constraint to within 1e-6.
pub fn select_optimized(
    prob: &SelectionProblem,
    mode: ObjectiveMode,
) -> Result<SelectionAssignment, SelectError> {
    let regions = prob.regions.len();
    let links = prob.links.len();
    assert!(regions > 0 && links > 0);
    for r in &prob.regions {
        assert_eq!(r.mean_rates.len(), links);
        assert_eq!(r.rate_variances.len(), links);
    }
    if prob.variance_budget_unreachable() {
        // Cheaper than letting the cutting planes discover it.
        return Err(SelectError::Infeasible);
    }

    let n_alpha = regions * links;
    let n_slack = match mode {
        ObjectiveMode::SumExcess => links,
        ObjectiveMode::MaxExcess => 1,
    };
    let n = n_alpha + n_slack;
    let var = |i: usize, j: usize| i * links + j;

    let mut objective = vec![0.0; n];
    for s in 0..n_slack {
        objective[n_alpha + s] = 1.0;
    }

    let mut base: Vec<Constraint> = Vec::new();
    // Rate guarantee per region.
    for (i, r) in prob.regions.iter().enumerate() {
        let mut row = vec![0.0; n];
        for j in 0..links {
            row[var(i, j)] = r.mean_rates[j];
        }
        base.push(Constraint::ge(row, r.target_rate));
    }
    // Window cap per allocation variable.
    for i in 0..regions {
        for j in 0..links {
            let mut row = vec![0.0; n];
            row[var(i, j)] = 1.0;
            base.push(Constraint::le(row, prob.max_window));
        }
    }
    // Hinge epigraph and capacity per link.
    for (j, l) in prob.links.iter().enumerate() {
        let mut hinge = vec![0.0; n];
        let mut cap = vec![0.0; n];
        for (i, r) in prob.regions.iter().enumerate() {
            let coeff = r.expected_arrivals * r.mean_rates[j];
            hinge[var(i, j)] = coeff;
            cap[var(i, j)] = coeff;
        }
        let slack_col = match mode {
            ObjectiveMode::SumExcess => n_alpha + j,
            ObjectiveMode::MaxExcess => n_alpha,
        };
        hinge[slack_col] = -1.0;
        base.push(Constraint::le(hinge, l.percentile_mark - l.current_load));
        base.push(Constraint::le(cap, l.capacity - l.current_load));
    }

    let scale = prob
        .regions
        .iter()
        .map(|r| r.target_rate * r.target_rate)
        .fold(prob.variance_budget * prob.variance_budget, f64::max)
        .max(1.0);

    let mut cuts: Vec<Constraint> = Vec::new();
    for _ in 0..MAX_CUTS {
        let mut constraints = base.clone();
        constraints.extend(cuts.iter().cloned());
        let x = match lp_solve(&objective, &constraints) {
            LpOutcome::Optimal { x, .. } => x,
            LpOutcome::Infeasible => return Err(SelectError::Infeasible),
            LpOutcome::Unbounded => unreachable!("objective bounded below by zero"),
        };
        let alpha: Vec<Vec<f64>> = (0..regions)
            .map(|i| (0..links).map(|j| x[var(i, j)]).collect())
            .collect();

        // Cut every region whose variance budget is violated at this vertex.
        let mut violated = false;
        for i in 0..regions {
            let resid = prob.variance_residual(i, &alpha[i]);
            if resid > CUT_TOL * scale {
                violated = true;
                let q = prob.quad_matrix(i);
                let r = &prob.regions[i];
                let mut grad = vec![0.0; links];
                for a in 0..links {
                    for b in 0..links {
                        grad[a] += 2.0 * q[a][b] * alpha[i][b];
                    }
                    grad[a] += -2.0 * r.target_rate * r.mean_rates[a];
                }
                // First-order outer approximation:
                // grad . (alpha - alpha0) + q(alpha0) <= 0.
                let mut row = vec![0.0; n];
                let mut rhs = -resid;
                for j in 0..links {
                    row[var(i, j)] = grad[j];
                    rhs += grad[j] * alpha[i][j];
                }
                cuts.push(Constraint::le(row, rhs));
            }
        }
        if !violated {
            let objective = prob.objective_at(&alpha, mode);
            return Ok(SelectionAssignment {
                alpha,
                targets: prob.regions.iter().map(|r| r.target_rate).collect(),
                rates: prob.regions.iter().map(|r| r.mean_rates.clone()).collect(),
                objective,
            });
        }
    }
    Err(SelectError::DidNotConverge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RngStream;

    #[test]
    fn round_robin_rotates_in_blocks() {
        let mut st = RoundRobinState::default();
        assert_eq!(
            select_round_robin(&mut st, 3, 10),
            vec![ServerId(0), ServerId(1), ServerId(2)]
        );
        assert_eq!(
            select_round_robin(&mut st, 3, 10),
            vec![ServerId(3), ServerId(4), ServerId(5)]
        );
    }

    #[test]
    fn round_robin_full_set_leaves_counter_fixed() {
        let mut st = RoundRobinState::default();
        let all = select_round_robin(&mut st, 4, 4);
        assert_eq!(all.len(), 4);
        assert_eq!(st.counter, 0);
        let again = select_round_robin(&mut st, 4, 4);
        assert_eq!(all, again);
    }

    #[test]
    fn round_robin_balances_over_cycle() {
        let mut st = RoundRobinState::default();
        let mut hits = vec![0u32; 10];
        for _ in 0..10 {
            for s in select_round_robin(&mut st, 3, 10) {
                hits[s.0 as usize] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 3), "{hits:?}");
    }

    #[test]
    fn k_closest_orders_by_rtt_then_id() {
        let rtts = vec![
            (ServerId(0), SimDuration::from_millis(10)),
            (ServerId(1), SimDuration::from_millis(5)),
            (ServerId(2), SimDuration::from_millis(20)),
        ];
        assert_eq!(select_k_closest(&rtts, 2), vec![ServerId(1), ServerId(0)]);

        let equal = vec![
            (ServerId(1), SimDuration::from_millis(5)),
            (ServerId(0), SimDuration::from_millis(5)),
        ];
        assert_eq!(select_k_closest(&equal, 2), vec![ServerId(0), ServerId(1)]);
        assert_eq!(select_k_closest(&rtts, 3).len(), 3);
    }

    fn single_region(rates: Vec<f64>, variances: Vec<f64>, target: f64) -> RegionSpec {
        RegionSpec {
            expected_arrivals: 1.0,
            target_rate: target,
            mean_rates: rates,
            rate_variances: variances,
        }
    }

    #[test]
    fn ample_slack_gives_zero_objective() {
        let prob = SelectionProblem {
            regions: vec![single_region(vec![10.0], vec![1.0], 10.0)],
            links: vec![LinkSpec {
                percentile_mark: 1e9,
                current_load: 0.0,
                capacity: 1e12,
            }],
            max_window: 5.0,
            variance_budget: 6.0,
        };
        let sol = select_optimized(&prob, ObjectiveMode::SumExcess).unwrap();
        assert!(sol.objective.abs() < 1e-9);
        let attained: f64 = sol.alpha[0][0] * 10.0;
        assert!(attained >= 10.0 - 1e-6, "rate guarantee violated: {attained}");
        assert_eq!(sol.assigned_servers(0), vec![ServerId(0)]);
    }

    #[test]
    fn load_lands_on_the_link_with_headroom() {
        let prob = SelectionProblem {
            regions: vec![single_region(vec![10.0, 10.0], vec![0.5, 0.5], 10.0)],
            links: vec![
                LinkSpec {
                    // At its percentile mark already: any load is excess.
                    percentile_mark: 50.0,
                    current_load: 50.0,
                    capacity: 1e9,
                },
                LinkSpec {
                    percentile_mark: 50.0,
                    current_load: 20.0,
                    capacity: 1e9,
                },
            ],
            max_window: 5.0,
            variance_budget: 6.0,
        };
        let sol = select_optimized(&prob, ObjectiveMode::SumExcess).unwrap();
        assert!(sol.objective.abs() < 1e-9);
        assert!(
            sol.alpha[0][0] < 1e-6,
            "allocation leaked onto the saturated link: {:?}",
            sol.alpha
        );
        assert!(sol.alpha[0][1] * 10.0 >= 10.0 - 1e-6);
    }

    #[test]
    fn variance_budget_is_respected() {
        // High per-link variance forces the solver to spread allocations; the
        // returned point must satisfy the quadratic budget.
        let prob = SelectionProblem {
            regions: vec![single_region(
                vec![10.0, 10.0, 10.0],
                vec![16.0, 16.0, 16.0],
                10.0,
            )],
            links: vec![
                LinkSpec { percentile_mark: 100.0, current_load: 0.0, capacity: 1e9 };
                3
            ],
            max_window: 5.0,
            variance_budget: 4.0,
        };
        let sol = select_optimized(&prob, ObjectiveMode::SumExcess).unwrap();
        let resid = prob.variance_residual(0, &sol.alpha[0]);
        assert!(resid <= 1e-6, "variance residual {resid}");
    }

    #[test]
    fn impossible_rate_is_infeasible() {
        let prob = SelectionProblem {
            regions: vec![single_region(vec![1.0], vec![0.0], 100.0)],
            links: vec![LinkSpec {
                percentile_mark: 1e9,
                current_load: 0.0,
                capacity: 1e12,
            }],
            max_window: 5.0, // max attainable rate 5 < 100
            variance_budget: 1e6,
        };
        assert_eq!(
            select_optimized(&prob, ObjectiveMode::SumExcess),
            Err(SelectError::Infeasible)
        );
    }

    #[test]
    fn quadratic_form_is_positive_semidefinite() {
        // Q = r r' + diag(var), so x' Q x = (r . x)^2 + sum var_j x_j^2 >= 0
        // for any x; verify numerically on random instances.
        let mut rng = RngStream::new(21, 0).rng();
        for _ in 0..200 {
            let j_n = 1 + rng.range_usize(4);
            let region = RegionSpec {
                expected_arrivals: 1.0,
                target_rate: rng.range_f64(1.0, 20.0),
                mean_rates: (0..j_n).map(|_| rng.range_f64(0.1, 20.0)).collect(),
                rate_variances: (0..j_n).map(|_| rng.range_f64(0.0, 25.0)).collect(),
            };
            let prob = SelectionProblem {
                regions: vec![region],
                links: vec![
                    LinkSpec { percentile_mark: 1.0, current_load: 0.0, capacity: 1.0 };
                    j_n
                ],
                max_window: 1.0,
                variance_budget: 1.0,
            };
            let q = prob.quad_matrix(0);
            let x: Vec<f64> = (0..j_n).map(|_| rng.range_f64(-10.0, 10.0)).collect();
            let mut form = 0.0;
            for a in 0..j_n {
                for b in 0..j_n {
                    form += x[a] * q[a][b] * x[b];
                }
            }
            assert!(form >= -1e-9, "quadratic form went negative: {form}");
        }
    }
}
