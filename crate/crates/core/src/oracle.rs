//! Independent verification oracles and the self-test suites built on them.
//!
//! The oracles deliberately avoid the production solvers: allocations are
//! checked against multi-scale grid search over the raw objective, and the
//! closed-form cost model is checked against the Monte-Carlo occupancy
//! sampler. `selftest` runs the whole battery and reports one line per
//! check; the acceptance tests run the same machinery at full size.

use crate::costsel::{
    mg_infinity_occupancy_quantile, mg_infinity_oracle, peak_subadditivity_check,
    select_optimized, CostModelParams, LinkSpec, ObjectiveMode, RegionSpec, SelectionProblem,
    TrafficLedger,
};
use crate::domain::{DetRng, Rate, RngStream, ServerId, SimTime};
use crate::estimator::{EstimatorConfig, PathEstimate};
use crate::exec;
use crate::scheduler::solve_lp;

/// Multi-scale grid minimization of a convex function over a box. Infeasible
/// points evaluate to infinity. The full coarse grid seeds `multistart`
/// incumbents, each refined by repeatedly halving the step inside a window
/// around the incumbent until every step drops below `target_resolution`.
pub fn refine_minimize(
    bounds: &[(f64, f64)],
    eval: &dyn Fn(&[f64]) -> f64,
    divisions: usize,
    multistart: usize,
    target_resolution: f64,
) -> Option<(Vec<f64>, f64)> {
    let dims = bounds.len();
    assert!(dims > 0 && dims <= 6, "grid search over {dims} dims");
    assert!(divisions >= 2);

    let grid_scan = |lo: &[f64], hi: &[f64]| -> Vec<(Vec<f64>, f64)> {
        let mut found = Vec::new();
        let mut idx = vec![0usize; dims];
        loop {
            let x: Vec<f64> = (0..dims)
                .map(|d| lo[d] + (hi[d] - lo[d]) * idx[d] as f64 / divisions as f64)
                .collect();
            let v = eval(&x);
            if v.is_finite() {
                found.push((x, v));
            }
            // Odometer increment.
            let mut d = 0;
            loop {
                if d == dims {
                    return found;
                }
                idx[d] += 1;
                if idx[d] <= divisions {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    };

    let lo0: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let hi0: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let mut coarse = grid_scan(&lo0, &hi0);
    if coarse.is_empty() {
        return None;
    }
    coarse.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    coarse.truncate(multistart.max(1));

    let mut best: Option<(Vec<f64>, f64)> = None;
    for (seed_x, seed_v) in coarse {
        let mut cur = (seed_x, seed_v);
        let mut step = bounds
            .iter()
            .map(|b| b.1 - b.0)
            .fold(0.0f64, f64::max)
            / divisions as f64;
        while step > target_resolution {
            // Walk at this scale until the window around the incumbent stops
            // improving; only then refine. Shrinking too eagerly can strand
            // the search short of the optimum.
            for _ in 0..10_000 {
                let lo: Vec<f64> = (0..dims)
                    .map(|d| (cur.0[d] - 2.0 * step).max(bounds[d].0))
                    .collect();
                let hi: Vec<f64> = (0..dims)
                    .map(|d| (cur.0[d] + 2.0 * step).min(bounds[d].1))
                    .collect();
                let mut improved = false;
                for cand in grid_scan(&lo, &hi) {
                    if cand.1 < cur.1 {
                        cur = cand;
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
            step /= 2.0;
        }
        if best.as_ref().map_or(true, |b| cur.1 < b.1) {
            best = Some(cur);
        }
    }
    best
}

/// A random allocation-program instance in the acceptance range: 2-4 servers,
/// smoothed rates in [1, 20], windows in [1, 10], targets in [5, 40].
pub struct LpInstance {
    pub paths: Vec<PathEstimate>,
    pub target: Rate,
}

pub fn random_lp_instance(rng: &mut DetRng) -> LpInstance {
    let n = 2 + rng.range_usize(3);
    let est_cfg = EstimatorConfig::default();
    let paths: Vec<PathEstimate> = (0..n)
        .map(|i| {
            let mean = rng.range_f64(1.0, 20.0);
            let up = mean * (1.0 + rng.range_f64(0.0, 0.3));
            let low = mean * (1.0 - rng.range_f64(0.0, 0.3));
            let mut p = PathEstimate::new(
                ServerId(i as u32),
                Rate::per_sec(mean),
                SimTime::ZERO,
                &est_cfg,
            );
            p.upper_rate = Rate::per_sec(up);
            p.lower_rate = Rate::per_sec(low);
            p.window = rng.range_f64(1.0, 10.0);
            p
        })
        .collect();
    LpInstance {
        paths,
        target: Rate::per_sec(rng.range_f64(5.0, 40.0)),
    }
}

/// Deviation objective of the allocation program evaluated directly at a
/// point: infinite when the rate guarantee fails.
pub fn lp_deviation(paths: &[PathEstimate], target: f64, alpha: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut upper = 0.0;
    let mut lower = 0.0;
    for (p, &a) in paths.iter().zip(alpha) {
        mean += a * p.mean_rate.value();
        upper += a * p.upper_rate.value();
        lower += a * p.lower_rate.value();
    }
    if mean < target {
        return f64::INFINITY;
    }
    (upper - target).max(target - lower).max(0.0)
}

/// Penalty weight dominating any constraint dual in the generated ranges, so
/// the penalized grid minimum coincides with the constrained one.
const PENALTY: f64 = 1e4;

/// Dense Gaussian elimination with partial pivoting; `None` when the system
/// is singular. Deliberately self-contained: the enumeration oracle must not
/// share numerical machinery with the production solver.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Exact brute-force oracle for the allocation program: enumerates every
/// candidate vertex of the constraint polytope (all full-rank active-set
/// combinations), keeps the feasible ones, and returns the smallest
/// deviation. Exhaustive rather than iterative, so it cross-checks the
/// simplex through an entirely different route. `None` when no vertex is
/// feasible (the program is infeasible).
pub fn lp_enumeration_oracle(inst: &LpInstance) -> Option<f64> {
    let n = inst.paths.len();
    let dims = n + 1; // alpha_0..alpha_{n-1}, t
    let target = inst.target.value();

    // Constraint rows as (coeffs, rhs, is_ge): ge means coeffs . x >= rhs.
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    let mut mean_row = vec![0.0; dims];
    let mut upper_row = vec![0.0; dims];
    let mut lower_row = vec![0.0; dims];
    for (i, p) in inst.paths.iter().enumerate() {
        mean_row[i] = p.mean_rate.value();
        upper_row[i] = p.upper_rate.value();
        lower_row[i] = p.lower_rate.value();
    }
    upper_row[n] = -1.0;
    lower_row[n] = 1.0;
    rows.push((mean_row, target, true));
    rows.push((upper_row, target, false));
    rows.push((lower_row, target, true));
    for i in 0..n {
        let mut lo = vec![0.0; dims];
        lo[i] = 1.0;
        rows.push((lo.clone(), 0.0, true)); // alpha_i >= 0
        rows.push((lo, inst.paths[i].window, false)); // alpha_i <= w_i
    }
    let mut t_row = vec![0.0; dims];
    t_row[n] = 1.0;
    rows.push((t_row, 0.0, true)); // t >= 0

    let feasible = |x: &[f64]| {
        rows.iter().all(|(coeffs, rhs, is_ge)| {
            let v: f64 = coeffs.iter().zip(x).map(|(c, xi)| c * xi).sum();
            if *is_ge {
                v >= rhs - 1e-7
            } else {
                v <= rhs + 1e-7
            }
        })
    };

    let mut best: Option<f64> = None;
    let mut chosen = vec![0usize; dims];
    // Enumerate all size-(dims) subsets of the constraint rows.
    fn visit(
        rows: &[(Vec<f64>, f64, bool)],
        chosen: &mut Vec<usize>,
        depth: usize,
        start: usize,
        dims: usize,
        feasible: &dyn Fn(&[f64]) -> bool,
        best: &mut Option<f64>,
    ) {
        if depth == dims {
            let a: Vec<Vec<f64>> = chosen.iter().map(|&i| rows[i].0.clone()).collect();
            let b: Vec<f64> = chosen.iter().map(|&i| rows[i].1).collect();
            if let Some(x) = solve_dense(a, b) {
                if x.iter().all(|v| v.is_finite()) && feasible(&x) {
                    let t = x[dims - 1];
                    if best.map_or(true, |b| t < b) {
                        *best = Some(t);
                    }
                }
            }
            return;
        }
        for i in start..rows.len() {
            chosen[depth] = i;
            visit(rows, chosen, depth + 1, i + 1, dims, feasible, best);
        }
    }
    visit(&rows, &mut chosen, 0, 0, dims, &feasible, &mut best);
    best.map(|t| t.max(0.0))
}

/// Grid-search oracle for the allocation program: minimizes the deviation
/// over the window box at (at least) the requested resolution. The rate
/// guarantee enters as an exact penalty so the search can track optima on
/// the feasibility boundary; only feasible samples are reported. `None`
/// means no feasible point was found.
pub fn lp_grid_oracle(inst: &LpInstance, resolution: f64) -> Option<f64> {
    let bounds: Vec<(f64, f64)> = inst.paths.iter().map(|p| (0.0, p.window)).collect();
    let target = inst.target.value();
    let best_feasible = std::cell::Cell::new(f64::INFINITY);
    let eval = |alpha: &[f64]| {
        let mut mean = 0.0;
        let mut upper = 0.0;
        let mut lower = 0.0;
        for (p, &a) in inst.paths.iter().zip(alpha) {
            mean += a * p.mean_rate.value();
            upper += a * p.upper_rate.value();
            lower += a * p.lower_rate.value();
        }
        let t = (upper - target).max(target - lower).max(0.0);
        let violation = target - mean;
        if violation <= 0.0 {
            if t < best_feasible.get() {
                best_feasible.set(t);
            }
            t
        } else {
            t + PENALTY * violation
        }
    };
    refine_minimize(&bounds, &eval, 8, 3, resolution)?;
    let best = best_feasible.get();
    best.is_finite().then_some(best)
}

/// A random 2-region x 2-link selection instance with a comfortably feasible
/// variance budget, capacities that never bind, and percentile marks that
/// leave some links with headroom and some without.
pub fn random_selection_instance(rng: &mut DetRng) -> SelectionProblem {
    let links = 2;
    let regions = (0..2)
        .map(|_| {
            let target = rng.range_f64(4.0, 12.0);
            RegionSpec {
                expected_arrivals: rng.range_f64(0.5, 4.0),
                target_rate: target,
                mean_rates: (0..links).map(|_| rng.range_f64(2.0, 10.0)).collect(),
                rate_variances: (0..links).map(|_| rng.range_f64(0.0, 4.0)).collect(),
            }
        })
        .collect::<Vec<_>>();
    let link_specs = (0..links)
        .map(|_| {
            let load = rng.range_f64(0.0, 30.0);
            LinkSpec {
                percentile_mark: load + rng.range_f64(-5.0, 25.0),
                current_load: load,
                capacity: 1e9,
            }
        })
        .collect();
    SelectionProblem {
        regions,
        links: link_specs,
        max_window: 5.0,
        variance_budget: rng.range_f64(6.0, 14.0),
    }
}

/// Grid-search oracle for the selection program. Constraints enter as exact
/// penalties; only feasible samples are reported.
pub fn selection_grid_oracle(
    prob: &SelectionProblem,
    mode: ObjectiveMode,
    resolution: f64,
) -> Option<f64> {
    let regions = prob.regions.len();
    let links = prob.links.len();
    let dims = regions * links;
    let bounds = vec![(0.0, prob.max_window); dims];
    let best_feasible = std::cell::Cell::new(f64::INFINITY);
    let eval = |x: &[f64]| {
        let alpha: Vec<Vec<f64>> = (0..regions)
            .map(|i| x[i * links..(i + 1) * links].to_vec())
            .collect();
        let mut violation = 0.0f64;
        for (i, r) in prob.regions.iter().enumerate() {
            let rate: f64 = alpha[i]
                .iter()
                .zip(&r.mean_rates)
                .map(|(a, m)| a * m)
                .sum();
            violation += (r.target_rate - rate).max(0.0);
            violation += prob.variance_residual(i, &alpha[i]).max(0.0);
        }
        for (j, l) in prob.links.iter().enumerate() {
            violation += (prob.induced_load(&alpha, j) + l.current_load - l.capacity).max(0.0);
        }
        let objective = prob.objective_at(&alpha, mode);
        if violation <= 0.0 {
            if objective < best_feasible.get() {
                best_feasible.set(objective);
            }
            objective
        } else {
            objective + PENALTY * violation
        }
    };
    refine_minimize(&bounds, &eval, 8, 3, resolution)?;
    let best = best_feasible.get();
    best.is_finite().then_some(best)
}

/// Outcome of one self-test check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the oracle-equivalence battery. `full` matches the acceptance sizes;
/// the quick variant keeps the command snappy.
pub fn selftest(full: bool) -> Vec<CheckResult> {
    let mut results = Vec::new();

    // Allocation solver against both oracles: the exhaustive vertex
    // enumeration must agree two-sided; the grid search, which can stall on
    // kink edges of the max-affine objective, certifies one side (the solver
    // is never worse than anything the lattice finds).
    {
        let n = if full { 500 } else { 60 };
        let outcomes = exec::map_indexed(n, |i| {
            let mut rng = RngStream::new(0x5e1f, i as u64).rng();
            let inst = random_lp_instance(&mut rng);
            let lp = solve_lp(&inst.paths, inst.target);
            let enumerated = lp_enumeration_oracle(&inst);
            let grid = lp_grid_oracle(&inst, 1e-4);
            match (lp, enumerated, grid) {
                (Ok(alloc), Some(te), Some(tg)) => {
                    let t = alloc.achieved_deviation;
                    ((t - te).abs(), (t - tg).max(0.0))
                }
                (Err(_), None, None) => (0.0, 0.0),
                _ => (f64::INFINITY, f64::INFINITY), // feasibility disagreement
            }
        });
        let worst_enum = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
        let worst_grid = outcomes.iter().map(|o| o.1).fold(0.0, f64::max);
        results.push(CheckResult {
            name: "lp-oracle-equivalence",
            passed: worst_enum <= 1e-3 && worst_grid <= 1e-3,
            detail: format!(
                "{n} instances, worst enumeration gap {worst_enum:.2e}, worst one-sided grid excess {worst_grid:.2e}"
            ),
        });
    }

    // Closed-form cost against the Monte-Carlo occupancy quantile.
    {
        let rhos: &[f64] = if full { &[50.0, 100.0, 200.0] } else { &[50.0, 100.0] };
        let mut worst = 0.0f64;
        for (i, &rho) in rhos.iter().enumerate() {
            let p = CostModelParams {
                arrival_rate: rho / 60.0,
                video_size: 600.0,
                download_rate: Rate::per_sec(10.0),
                servers: 1,
                percentile: 0.95,
            };
            let horizon = if full { 1.5e6 } else { 6e5 };
            let q = mg_infinity_occupancy_quantile(&p, horizon, RngStream::new(0xace, i as u64));
            let expected = rho + 1.64 * rho.sqrt();
            worst = worst.max((q - expected).abs() / expected);
        }
        results.push(CheckResult {
            name: "occupancy-normal-approx",
            passed: worst <= 0.05,
            detail: format!("worst relative gap {worst:.3}"),
        });
    }

    // Cost monotonicity in the download rate.
    {
        let seeds = if full { 10 } else { 3 };
        let monotone = exec::map_indexed(seeds, |s| {
            let sweep = [5.0, 7.5, 10.0, 15.0, 20.0];
            let costs: Vec<f64> = sweep
                .iter()
                .map(|&t| {
                    let p = CostModelParams {
                        arrival_rate: 0.5,
                        video_size: 600.0,
                        download_rate: Rate::per_sec(t),
                        servers: 2,
                        percentile: 0.95,
                    };
                    mg_infinity_oracle(&p, 4.8e6, RngStream::new(0xbeef, s as u64))
                })
                .collect();
            costs.windows(2).all(|w| w[1] > w[0])
        });
        let ok = monotone.iter().filter(|m| **m).count();
        results.push(CheckResult {
            name: "cost-monotone-in-rate",
            passed: ok * 10 >= seeds * 9,
            detail: format!("{ok}/{seeds} seeds fully monotone"),
        });
    }

    // Selection program against the grid oracle.
    {
        let n = if full { 50 } else { 10 };
        let gaps = exec::map_indexed(n, |i| {
            let mut rng = RngStream::new(0x0c7, i as u64).rng();
            let prob = random_selection_instance(&mut rng);
            let solver = select_optimized(&prob, ObjectiveMode::SumExcess);
            let grid = selection_grid_oracle(&prob, ObjectiveMode::SumExcess, 1e-3);
            match (solver, grid) {
                (Ok(sol), Some(g)) => (sol.objective - g).abs() / g.abs().max(1.0),
                (Err(_), None) => 0.0,
                _ => f64::INFINITY,
            }
        });
        let worst = gaps.iter().cloned().fold(0.0, f64::max);
        results.push(CheckResult {
            name: "selection-grid-equivalence",
            passed: worst <= 1e-2,
            detail: format!("{n} instances, worst relative gap {worst:.2e}"),
        });
    }

    // Peak subadditivity of split traffic.
    {
        let mut rng = RngStream::new(0x9ea, 0).rng();
        let pairs = if full { 10_000 } else { 2_000 };
        let mut ok = true;
        for _ in 0..pairs {
            let len = 1 + rng.range_usize(24);
            let draw = |rng: &mut DetRng| {
                TrafficLedger::from_buckets(
                    (0..len).map(|_| rng.next_u64() % 1_000_000).collect(),
                )
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            ok &= peak_subadditivity_check(&a, &b);
        }
        results.push(CheckResult {
            name: "peak-subadditivity",
            passed: ok,
            detail: format!("{pairs} random ledger pairs"),
        });
    }

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_finds_quadratic_minimum() {
        let eval = |x: &[f64]| (x[0] - 0.37).powi(2) + (x[1] + 0.5).powi(2) + 1.0;
        let (x, v) = refine_minimize(&[(-2.0, 2.0), (-2.0, 2.0)], &eval, 8, 2, 1e-6).unwrap();
        assert!((x[0] - 0.37).abs() < 1e-4, "{x:?}");
        assert!((x[1] + 0.5).abs() < 1e-4);
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn refine_respects_infeasible_regions() {
        // Feasible only where x >= 1; minimum of x^2 there is at x = 1.
        let eval = |x: &[f64]| if x[0] < 1.0 { f64::INFINITY } else { x[0] * x[0] };
        let (_, v) = refine_minimize(&[(0.0, 3.0)], &eval, 8, 3, 1e-6).unwrap();
        assert!((v - 1.0).abs() < 1e-4, "v = {v}");
    }

    #[test]
    fn refine_reports_fully_infeasible() {
        let eval = |_: &[f64]| f64::INFINITY;
        assert!(refine_minimize(&[(0.0, 1.0)], &eval, 4, 1, 1e-3).is_none());
    }

    #[test]
    fn quick_selftest_passes() {
        for check in selftest(false) {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
