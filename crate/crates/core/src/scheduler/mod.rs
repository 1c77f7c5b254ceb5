//! Per-epoch chunk-request allocation.
//!
//! The main scheduler solves, once per epoch, the linear program
//!
//! ```text
//!   minimize   t
//!   subject to sum_i a_i * Rhat_i  >= T
//!              sum_i a_i * Rup_i   <= T + t
//!              sum_i a_i * Rlow_i  >= T - t
//!              0 <= a_i <= w_i
//! ```
//!
//! which keeps the attained download rate pinned to the target `T` while
//! minimizing the worst-case deviation implied by the per-path rate bounds.
//! The `a_i` are fractional; an excess-rate carry `y_i` converts them into
//! integer request counts without long-run drift. When the program is
//! infeasible the target backs off by 10% per retry and later recovers by
//! 30% per epoch, capped at the configured target.
//!
//! Also provided: the min-RTT scheduler, a throughput-greedy scheduler that
//! always fills every window, and single-path pacing, used as baselines.

use crate::domain::{Rate, ServerId, SimDuration};
use crate::estimator::PathEstimate;
use crate::simplex::{self, Constraint, LpOutcome};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no feasible allocation for the requested target rate")]
pub struct Infeasible;

/// Scheduler tunables.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerConfig {
    /// Aggregate target rate `T`, at least the playback rate.
    pub target_rate: Rate,
    pub epoch_length: SimDuration,
    /// Multiplicative target decrease per infeasible retry.
    pub backoff_factor: f64,
    /// Multiplicative target increase per epoch while recovering.
    pub recovery_factor: f64,
}

impl SchedulerConfig {
    pub fn new(target_rate: Rate, epoch_length: SimDuration) -> Self {
        SchedulerConfig {
            target_rate,
            epoch_length,
            backoff_factor: 0.9,
            recovery_factor: 1.3,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.backoff_factor > 0.0 && self.backoff_factor < 1.0) {
            return Err(format!("backoff_factor {} not in (0,1)", self.backoff_factor));
        }
        if self.recovery_factor <= 1.0 {
            return Err(format!("recovery_factor {} must exceed 1", self.recovery_factor));
        }
        if self.target_rate.value() <= 0.0 {
            return Err("target rate must be positive".into());
        }
        Ok(())
    }
}

/// Result of one allocation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Fractional chunk concurrency per server, aligned with the input paths.
    pub per_server: Vec<(ServerId, f64)>,
    /// Optimal deviation bound `t`.
    pub achieved_deviation: f64,
    /// The target actually used (post-backoff).
    pub effective_target: Rate,
}

/// Carry-over scheduler state for one client.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    /// Excess-rate credit `y_i` in chunks, always non-negative.
    pub excess: BTreeMap<ServerId, f64>,
    /// Cumulative chunks requested per server, feeds tie-breaking.
    pub usage_history: BTreeMap<ServerId, u64>,
    pub deficit_mode: bool,
    pub current_target: Rate,
}

impl SchedulerState {
    pub fn new(target: Rate) -> Self {
        SchedulerState {
            excess: BTreeMap::new(),
            usage_history: BTreeMap::new(),
            deficit_mode: false,
            current_target: target,
        }
    }
}

/// Integer request counts for one epoch, aligned with the input paths.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub requests: Vec<(ServerId, u32)>,
    /// The allocation behind the counts; `None` when the target collapsed
    /// below one chunk per epoch and nothing was requested.
    pub allocation: Option<Allocation>,
}

const TIE_TOL: f64 = 1e-7;

fn ceil_chunks(x: f64) -> u32 {
    // Tolerates float noise just above an integer so 2 + 1e-12 stays 2.
    (x - 1e-9).ceil().max(0.0) as u32
}

fn solve_restricted(paths: &[PathEstimate], target: f64, allowed: u32) -> LpOutcome {
    let n = paths.len();
    // Variables: a_0..a_{n-1}, t.
    let mut objective = vec![0.0; n + 1];
    objective[n] = 1.0;

    let mut constraints = Vec::with_capacity(n + 3);
    let mut mean_row = vec![0.0; n + 1];
    let mut upper_row = vec![0.0; n + 1];
    let mut lower_row = vec![0.0; n + 1];
    for (i, p) in paths.iter().enumerate() {
        mean_row[i] = p.mean_rate.value();
        upper_row[i] = p.upper_rate.value();
        lower_row[i] = p.lower_rate.value();
    }
    upper_row[n] = -1.0;
    lower_row[n] = 1.0;
    constraints.push(Constraint::ge(mean_row, target));
    constraints.push(Constraint::le(upper_row, target));
    constraints.push(Constraint::ge(lower_row, target));
    for (i, p) in paths.iter().enumerate() {
        let mut row = vec![0.0; n + 1];
        row[i] = 1.0;
        let w = if allowed & (1 << i) != 0 { p.window } else { 0.0 };
        constraints.push(Constraint::le(row, w.max(0.0)));
    }
    simplex::solve(&objective, &constraints)
}

#[cfg(debug_assertions)]
fn check_allocation(paths: &[PathEstimate], target: f64, alloc: &Allocation) {
    let tol = 1e-9 * target.max(1.0);
    let t = alloc.achieved_deviation;
    let mut mean = 0.0;
    let mut upper = 0.0;
    let mut lower = 0.0;
    for (p, &(_, a)) in paths.iter().zip(&alloc.per_server) {
        assert!(a >= -tol, "negative allocation {a}");
        assert!(a <= p.window + tol, "allocation {a} beyond window {}", p.window);
        mean += a * p.mean_rate.value();
        upper += a * p.upper_rate.value();
        lower += a * p.lower_rate.value();
    }
    assert!(mean >= target - tol, "mean-rate constraint violated: {mean} < {target}");
    assert!(upper <= target + t + tol, "upper-bound constraint violated");
    assert!(lower >= target - t - tol, "lower-bound constraint violated");
}

/// Solves the allocation program at the given target. Equivalent to
/// [`solve_lp_with_history`] with an empty usage history.
pub fn solve_lp(paths: &[PathEstimate], target: Rate) -> Result<Allocation, Infeasible> {
    solve_lp_with_history(paths, target, &BTreeMap::new())
}

/// Solves the allocation program, breaking ties among optimal solutions by
/// (1) fewest servers used, then (2) largest cumulative usage, then lowest
/// server ids. Tie-breaking re-solves the program restricted to candidate
/// support sets, smallest first.
pub fn solve_lp_with_history(
    paths: &[PathEstimate],
    target: Rate,
    usage: &BTreeMap<ServerId, u64>,
) -> Result<Allocation, Infeasible> {
    assert!(!paths.is_empty(), "allocation needs at least one path");
    let n = paths.len();
    let target = target.value();

    let capacity: f64 = paths.iter().map(|p| p.window * p.mean_rate.value()).sum();
    if capacity < target {
        return Err(Infeasible);
    }

    let full_mask = if n >= 32 { u32::MAX } else { (1u32 << n) - 1 };
    let (x_full, t_star) = match solve_restricted(paths, target, full_mask) {
        LpOutcome::Optimal { x, objective } => (x, objective),
        LpOutcome::Infeasible => return Err(Infeasible),
        LpOutcome::Unbounded => unreachable!("deviation is bounded below by zero"),
    };

    let finish = |x: Vec<f64>, t: f64| {
        let alloc = Allocation {
            per_server: paths
                .iter()
                .zip(&x)
                .map(|(p, &a)| (p.server, a.max(0.0)))
                .collect(),
            achieved_deviation: t.max(0.0),
            effective_target: Rate::per_sec(target),
        };
        #[cfg(debug_assertions)]
        check_allocation(paths, target, &alloc);
        alloc
    };

    if n > 10 {
        return Ok(finish(x_full, t_star));
    }

    let tol = TIE_TOL * t_star.abs().max(1.0);
    for size in 1..=n as u32 {
        let mut best: Option<(u64, Vec<f64>, f64)> = None;
        for mask in 1..=full_mask {
            if mask.count_ones() != size {
                continue;
            }
            if let LpOutcome::Optimal { x, objective } = solve_restricted(paths, target, mask) {
                if objective <= t_star + tol {
                    let used: u64 = (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| usage.get(&paths[i].server).copied().unwrap_or(0))
                        .sum();
                    // Strictly-greater keeps the first (lowest-id) mask on ties.
                    if best.as_ref().map_or(true, |(u, _, _)| used > *u) {
                        best = Some((used, x, objective));
                    }
                }
            }
        }
        if let Some((_, x, t)) = best {
            return Ok(finish(x, t));
        }
    }
    Ok(finish(x_full, t_star))
}

/// Runs one scheduling epoch: backoff on infeasibility, recovery after a
/// deficit, and integerization of the fractional allocation through the
/// excess-rate carry. Request counts never exceed a server's window.
pub fn schedule_epoch(
    state: &mut SchedulerState,
    cfg: &SchedulerConfig,
    paths: &[PathEstimate],
) -> EpochPlan {
    let epoch_s = cfg.epoch_length.as_secs_f64();
    // The backoff ladder stops at one chunk per epoch. Configurations whose
    // target is already below that (sub-chunk epochs) instead stop at half
    // the configured target, so normal pacing is never mistaken for
    // collapse; the carry accounting handles fractional chunks per epoch.
    let floor_rate = (1.0 / epoch_s).min(0.5 * cfg.target_rate.value());
    let mut target = state.current_target.value().min(cfg.target_rate.value());

    let allocation = loop {
        if target < floor_rate {
            // Collapsed: request nothing and retry from the floor next epoch.
            state.current_target = Rate::per_sec(floor_rate);
            state.deficit_mode = true;
            return EpochPlan {
                requests: paths.iter().map(|p| (p.server, 0)).collect(),
                allocation: None,
            };
        }
        match solve_lp_with_history(paths, Rate::per_sec(target), &state.usage_history) {
            Ok(alloc) => break alloc,
            Err(Infeasible) => {
                target *= cfg.backoff_factor;
                state.deficit_mode = true;
            }
        }
    };

    let effective = allocation.effective_target.value();
    if effective + 1e-12 < cfg.target_rate.value() {
        state.deficit_mode = true;
        state.current_target = Rate::per_sec(
            (effective * cfg.recovery_factor).min(cfg.target_rate.value()),
        );
    } else {
        state.deficit_mode = false;
        state.current_target = cfg.target_rate;
    }

    let mut requests = Vec::with_capacity(paths.len());
    for (p, &(server, alpha)) in paths.iter().zip(&allocation.per_server) {
        let achieved = alpha * p.mean_rate.value() * epoch_s;
        let y = state.excess.entry(server).or_insert(0.0);
        let net = (achieved - *y).max(0.0);
        let want = ceil_chunks(net);
        let cap = ceil_chunks(p.window);
        let send = want.min(cap);
        *y = (*y + send as f64 - achieved).max(0.0);
        if send > 0 {
            *state.usage_history.entry(server).or_insert(0) += send as u64;
        }
        requests.push((server, send));
    }

    EpochPlan {
        requests,
        allocation: Some(allocation),
    }
}

/// Assigns `demand` chunks to servers in order of lowest expected completion
/// time (highest smoothed rate), filling each window before moving on. Ties
/// break toward the lowest server id. Returns the per-server counts and the
/// number of chunks that did not fit in any window.
pub fn min_rtt_schedule(paths: &[PathEstimate], demand: u32) -> (Vec<(ServerId, u32)>, u32) {
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| {
        paths[b]
            .mean_rate
            .value()
            .partial_cmp(&paths[a].mean_rate.value())
            .unwrap()
            .then(paths[a].server.cmp(&paths[b].server))
    });
    let mut counts = vec![0u32; paths.len()];
    let mut left = demand;
    for &i in &order {
        if left == 0 {
            break;
        }
        let room = ceil_chunks(paths[i].window);
        let take = room.min(left);
        counts[i] = take;
        left -= take;
    }
    (
        paths.iter().zip(counts).map(|(p, c)| (p.server, c)).collect(),
        left,
    )
}

/// Throughput-greedy baseline: fills every server's window every epoch.
pub fn aggressive_schedule(paths: &[PathEstimate]) -> Vec<(ServerId, u32)> {
    paths
        .iter()
        .map(|p| (p.server, ceil_chunks(p.window)))
        .collect()
}

/// Signed request pacing for the baseline schedulers: tracks how far the
/// requests issued so far run ahead of (positive) or behind (negative) the
/// target rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pacer {
    pub carry: f64,
}

impl Pacer {
    /// Chunks needed this epoch to stay on target. Catch-up after a deficit
    /// is capped at 1.3x the target rate - the same recovery allowance the
    /// variance-minimizing scheduler gets - so a reopened window drains its
    /// backlog gradually instead of bursting into the shaping queue.
    pub fn demand(&self, target: Rate, epoch: SimDuration) -> u32 {
        let per_epoch = target.value() * epoch.as_secs_f64();
        let desired = per_epoch - self.carry;
        ceil_chunks(desired.min(1.3 * per_epoch))
    }

    /// Accounts for the chunks actually requested.
    pub fn settle(&mut self, sent: u32, target: Rate, epoch: SimDuration) {
        self.carry += sent as f64 - target.value() * epoch.as_secs_f64();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SimTime;
    use crate::estimator::EstimatorConfig;

    fn path(id: u32, mean: f64, upper: f64, lower: f64, window: f64) -> PathEstimate {
        let mut p = PathEstimate::new(
            ServerId(id),
            Rate::per_sec(mean),
            SimTime::ZERO,
            &EstimatorConfig::default(),
        );
        p.upper_rate = Rate::per_sec(upper);
        p.lower_rate = Rate::per_sec(lower);
        p.window = window;
        p
    }

    fn zero_var_path(id: u32, mean: f64, window: f64) -> PathEstimate {
        path(id, mean, mean, mean, window)
    }

    #[test]
    fn single_zero_variance_path_is_exact() {
        let paths = [zero_var_path(0, 10.0, 5.0)];
        let alloc = solve_lp(&paths, Rate::per_sec(10.0)).unwrap();
        assert!((alloc.per_server[0].1 - 1.0).abs() < 1e-9);
        assert!(alloc.achieved_deviation.abs() < 1e-9);
    }

    #[test]
    fn capacity_shortfall_is_infeasible() {
        let paths = [zero_var_path(0, 3.0, 1.0), zero_var_path(1, 3.0, 1.0)];
        assert_eq!(solve_lp(&paths, Rate::per_sec(10.0)), Err(Infeasible));
    }

    #[test]
    fn matches_brute_force_grid_on_two_servers() {
        let paths = [path(0, 8.0, 9.0, 7.0, 2.0), path(1, 4.0, 5.0, 3.0, 2.0)];
        let target = 10.0;
        let alloc = solve_lp(&paths, Rate::per_sec(target)).unwrap();

        // Independent brute force over the allocation box at 1e-3 steps.
        let mut best_t = f64::INFINITY;
        let steps = 2000;
        for i in 0..=steps {
            let a0 = 2.0 * i as f64 / steps as f64;
            for j in 0..=steps {
                let a1 = 2.0 * j as f64 / steps as f64;
                if a0 * 8.0 + a1 * 4.0 < target {
                    continue;
                }
                let up = a0 * 9.0 + a1 * 5.0 - target;
                let low = target - (a0 * 7.0 + a1 * 3.0);
                let t = up.max(low).max(0.0);
                if t < best_t {
                    best_t = t;
                }
            }
        }
        assert!(
            (alloc.achieved_deviation - best_t).abs() < 2e-3,
            "lp t = {}, grid t = {best_t}",
            alloc.achieved_deviation
        );
    }

    #[test]
    fn identical_paths_tie_break_to_one_server() {
        let paths = [
            zero_var_path(0, 10.0, 4.0),
            zero_var_path(1, 10.0, 4.0),
            zero_var_path(2, 10.0, 4.0),
        ];
        let alloc = solve_lp(&paths, Rate::per_sec(10.0)).unwrap();
        let used = alloc.per_server.iter().filter(|(_, a)| *a > 1e-6).count();
        assert_eq!(used, 1, "fewest-servers tie-break failed: {alloc:?}");
    }

    #[test]
    fn tie_break_prefers_most_used_server() {
        let paths = [zero_var_path(0, 10.0, 4.0), zero_var_path(1, 10.0, 4.0)];
        let mut usage = BTreeMap::new();
        usage.insert(ServerId(1), 100u64);
        let alloc = solve_lp_with_history(&paths, Rate::per_sec(10.0), &usage).unwrap();
        assert!(alloc.per_server[1].1 > 1e-6, "expected server 1: {alloc:?}");
        assert!(alloc.per_server[0].1 <= 1e-6);
    }

    #[test]
    fn carry_arithmetic_follows_ceiling_rule() {
        let cfg = SchedulerConfig::new(Rate::per_sec(2.4), SimDuration::from_secs(1));
        let mut state = SchedulerState::new(cfg.target_rate);
        // One path delivering exactly the target: alpha * rate * epoch = 2.4.
        let paths = [zero_var_path(0, 2.4, 10.0)];

        let plan = schedule_epoch(&mut state, &cfg, &paths);
        assert_eq!(plan.requests[0].1, 3);
        assert!((state.excess[&ServerId(0)] - 0.6).abs() < 1e-9);

        let plan = schedule_epoch(&mut state, &cfg, &paths);
        assert_eq!(plan.requests[0].1, 2);
        assert!((state.excess[&ServerId(0)] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn long_run_requests_track_target() {
        let cfg = SchedulerConfig::new(Rate::per_sec(3.7), SimDuration::from_secs(1));
        let mut state = SchedulerState::new(cfg.target_rate);
        let paths = [zero_var_path(0, 2.0, 10.0), zero_var_path(1, 2.0, 10.0)];
        let mut total: u64 = 0;
        let epochs = 1000;
        for _ in 0..epochs {
            let plan = schedule_epoch(&mut state, &cfg, &paths);
            total += plan.requests.iter().map(|(_, c)| *c as u64).sum::<u64>();
        }
        let expected = 3.7 * epochs as f64;
        assert!(
            (total as f64 - expected).abs() <= 1.0,
            "requested {total}, target {expected}"
        );
    }

    #[test]
    fn backoff_then_recovery_trace() {
        let target = 10.0;
        let cfg = SchedulerConfig::new(Rate::per_sec(target), SimDuration::from_secs(1));
        let mut state = SchedulerState::new(cfg.target_rate);
        // Capacity 6 < 10: the first epoch must walk T * 0.9^k down to the
        // first feasible value.
        let paths = [zero_var_path(0, 6.0, 1.0)];
        let plan = schedule_epoch(&mut state, &cfg, &paths);
        let mut expected = target;
        while expected > 6.0 {
            expected *= 0.9;
        }
        let eff = plan.allocation.as_ref().unwrap().effective_target.value();
        assert!((eff - expected).abs() < 1e-9, "effective {eff} vs {expected}");
        assert!(state.deficit_mode);
        assert!((state.current_target.value() - (expected * 1.3).min(target)).abs() < 1e-9);

        // Restore capacity: recovery multiplies by 1.3 per epoch, capped at T.
        let good = [zero_var_path(0, 20.0, 10.0)];
        let mut prev = state.current_target.value();
        loop {
            let plan = schedule_epoch(&mut state, &cfg, &good);
            let eff = plan.allocation.unwrap().effective_target.value();
            assert!((eff - prev).abs() < 1e-9);
            if (eff - target).abs() < 1e-9 {
                assert!(!state.deficit_mode);
                break;
            }
            prev = (eff * 1.3).min(target);
        }
    }

    #[test]
    fn collapse_below_one_chunk_requests_nothing() {
        let cfg = SchedulerConfig::new(Rate::per_sec(10.0), SimDuration::from_secs(1));
        let mut state = SchedulerState::new(cfg.target_rate);
        let paths = [zero_var_path(0, 0.01, 1.0)]; // capacity far below 1 chunk/s
        let plan = schedule_epoch(&mut state, &cfg, &paths);
        assert!(plan.allocation.is_none());
        assert_eq!(plan.requests[0].1, 0);
        assert!(state.deficit_mode);
    }

    #[test]
    fn requests_never_exceed_windows() {
        let cfg = SchedulerConfig::new(Rate::per_sec(30.0), SimDuration::from_secs(1));
        let mut state = SchedulerState::new(cfg.target_rate);
        let paths = [zero_var_path(0, 20.0, 2.0), zero_var_path(1, 20.0, 2.0)];
        for _ in 0..50 {
            let plan = schedule_epoch(&mut state, &cfg, &paths);
            for ((_, c), p) in plan.requests.iter().zip(&paths) {
                assert!(*c <= p.window.ceil() as u32);
            }
        }
    }

    #[test]
    fn min_rtt_prefers_fastest_path() {
        let paths = [zero_var_path(0, 10.0, 4.0), zero_var_path(1, 5.0, 4.0)];
        let (counts, left) = min_rtt_schedule(&paths, 3);
        assert_eq!(counts, vec![(ServerId(0), 3), (ServerId(1), 0)]);
        assert_eq!(left, 0);
    }

    #[test]
    fn min_rtt_spills_when_window_binds() {
        let paths = [zero_var_path(0, 10.0, 2.0), zero_var_path(1, 5.0, 4.0)];
        let (counts, left) = min_rtt_schedule(&paths, 3);
        assert_eq!(counts, vec![(ServerId(0), 2), (ServerId(1), 1)]);
        assert_eq!(left, 0);
    }

    #[test]
    fn min_rtt_ties_break_by_server_id() {
        let paths = [zero_var_path(1, 5.0, 4.0), zero_var_path(0, 5.0, 4.0)];
        let (counts, _) = min_rtt_schedule(&paths, 2);
        let s0 = counts.iter().find(|(s, _)| *s == ServerId(0)).unwrap().1;
        assert_eq!(s0, 2);
    }

    #[test]
    fn min_rtt_reports_unassignable_remainder() {
        let paths = [zero_var_path(0, 10.0, 1.0)];
        let (_, left) = min_rtt_schedule(&paths, 5);
        assert_eq!(left, 4);
    }

    #[test]
    fn aggressive_fills_every_window() {
        let paths = [zero_var_path(0, 10.0, 3.0), zero_var_path(1, 5.0, 5.0)];
        let counts = aggressive_schedule(&paths);
        assert_eq!(counts, vec![(ServerId(0), 3), (ServerId(1), 5)]);
        let total: u32 = counts.iter().map(|(_, c)| c).sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn pacer_demand_and_settle_round_trip() {
        let mut p = Pacer::default();
        let target = Rate::per_sec(2.4);
        let epoch = SimDuration::from_secs(1);
        assert_eq!(p.demand(target, epoch), 3);
        p.settle(3, target, epoch);
        assert_eq!(p.demand(target, epoch), 2);
    }
}
