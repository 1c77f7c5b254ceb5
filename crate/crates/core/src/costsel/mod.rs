//! Peering-cost analytics: the closed-form q-percentile cost model, its
//! M/G/inf Monte-Carlo counterpart, the 5-minute billing ledger, and the
//! peak-subadditivity property that explains why splitting traffic across
//! links raises percentile bills.
//!
//! Cost model: clients arrive Poisson(lambda) and download a video of `S`
//! chunks at aggregate rate `T` spread over `k` servers. Each server+link
//! behaves as an M/G/inf system with occupancy ~ Poisson(rho), rho = lambda
//! * S / T. For large rho the q-quantile occupancy is approximately
//! `rho + z_q * sqrt(rho)`, so the per-link q-percentile traffic volume is
//! `(z_q * sqrt(rho) + rho) * T / k` - increasing in `T`.

pub mod selection;

pub use selection::{
    select_k_closest, select_optimized, select_round_robin, LinkSpec, ObjectiveMode,
    RegionSpec, RoundRobinState, SelectError, SelectionAssignment, SelectionProblem,
};

use crate::domain::{Rate, RngStream, SimDuration, SimTime};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid cost-model parameter: {0}")]
    InvalidParams(String),
    #[error("percentile of an empty ledger")]
    EmptyLedger,
    #[error("percentile {0} outside (0, 1)")]
    BadPercentile(f64),
}

/// Parameters of the analytic cost model.
#[derive(Debug, Clone, Copy)]
pub struct CostModelParams {
    /// Client arrival rate, per second.
    pub arrival_rate: f64,
    /// Video size in chunks.
    pub video_size: f64,
    /// Aggregate download rate, chunks per second.
    pub download_rate: Rate,
    /// Number of servers the download is spread over.
    pub servers: u32,
    /// Billing percentile in (0, 1).
    pub percentile: f64,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: String| Err(CostError::InvalidParams(m));
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival_rate {}", self.arrival_rate));
        }
        if !(self.video_size > 0.0 && self.video_size.is_finite()) {
            return bad(format!("video_size {}", self.video_size));
        }
        if self.download_rate.value() <= 0.0 {
            return bad("download_rate must be positive".into());
        }
        if self.servers == 0 {
            return bad("servers must be positive".into());
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return bad(format!("percentile {}", self.percentile));
        }
        Ok(())
    }

    /// Offered load: mean number of concurrent sessions.
    pub fn rho(&self) -> f64 {
        self.arrival_rate * self.video_size / self.download_rate.value()
    }

    /// The normal approximation behind the closed form is unreliable below
    /// this occupancy; callers should surface a warning.
    pub fn normal_approx_reliable(&self) -> bool {
        self.rho() >= 25.0
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation, |error|
/// below 1.15e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile of p = {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Closed-form per-link q-percentile peering cost,
/// `(z_q * sqrt(rho) + rho) * T / k`. Multiply by `k` for the whole system.
pub fn analytic_cost(p: &CostModelParams) -> Result<f64, CostError> {
    p.validate()?;
    let rho = p.rho();
    let z = normal_quantile(p.percentile);
    Ok((z * rho.sqrt() + rho) * p.download_rate.value() / p.servers as f64)
}

/// Monte-Carlo counterpart of [`analytic_cost`]: simulates Poisson arrivals
/// with deterministic service `S / T`, samples the occupancy every five
/// minutes after a one-service warm-up, and prices the empirical q-quantile.
/// Serves as the independent oracle for the closed form.
pub fn mg_infinity_oracle(p: &CostModelParams, horizon_s: f64, rng: RngStream) -> f64 {
    mg_infinity_occupancy_quantile(p, horizon_s, rng) * p.download_rate.value()
        / p.servers as f64
}

/// Empirical q-quantile of the M/G/inf occupancy process.
pub fn mg_infinity_occupancy_quantile(
    p: &CostModelParams,
    horizon_s: f64,
    rng: RngStream,
) -> f64 {
    p.validate().expect("oracle called with invalid parameters");
    assert!(horizon_s > 0.0);
    let service_s = p.video_size / p.download_rate.value();
    let mean_gap = 1.0 / p.arrival_rate;
    let mut rng = rng.rng();

    let mut active: VecDeque<f64> = VecDeque::new(); // departure times, sorted
    let mut next_arrival = rng.exp(mean_gap);
    let mut samples: Vec<u32> = Vec::new();

    let bucket = TrafficLedger::BUCKET_SECONDS as f64;
    let mut t = bucket;
    while t <= horizon_s {
        while next_arrival <= t {
            active.push_back(next_arrival + service_s);
            next_arrival += rng.exp(mean_gap);
        }
        while active.front().is_some_and(|&d| d <= t) {
            active.pop_front();
        }
        if t >= service_s {
            samples.push(active.len() as u32);
        }
        t += bucket;
    }
    assert!(!samples.is_empty(), "horizon too short to sample occupancy");
    let mut sorted: Vec<u32> = samples;
    sorted.sort_unstable();
    nearest_rank(&sorted, p.percentile) as f64
}

fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> T {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Per-link traffic volumes in contiguous 5-minute buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficLedger {
    buckets: Vec<u64>,
}

impl TrafficLedger {
    pub const BUCKET_SECONDS: u64 = 300;

    /// A ledger covering the whole horizon (at least one bucket).
    pub fn for_horizon(horizon: SimDuration) -> Self {
        let bucket_us = Self::BUCKET_SECONDS * 1_000_000;
        let n = horizon.as_micros().div_ceil(bucket_us).max(1);
        TrafficLedger {
            buckets: vec![0; n as usize],
        }
    }

    pub fn from_buckets(buckets: Vec<u64>) -> Self {
        TrafficLedger { buckets }
    }

    /// Adds bytes to the bucket containing `at`. Bucket boundaries sit at
    /// multiples of 300 s from simulation start.
    pub fn record(&mut self, bytes: u64, at: SimTime) {
        let bucket_us = Self::BUCKET_SECONDS * 1_000_000;
        let idx = (at.as_micros() / bucket_us) as usize;
        debug_assert!(idx < self.buckets.len(), "metering beyond the horizon");
        let idx = idx.min(self.buckets.len() - 1);
        self.buckets[idx] += bytes;
    }

    pub fn buckets(&self) -> &[u64] {
        &self.buckets
    }

    pub fn total_bytes(&self) -> u64 {
        self.buckets.iter().sum()
    }

    pub fn peak(&self) -> u64 {
        self.buckets.iter().copied().max().unwrap_or(0)
    }

    /// Pointwise sum, used to compare split traffic against its aggregate.
    pub fn merged_with(&self, other: &TrafficLedger) -> TrafficLedger {
        assert_eq!(self.buckets.len(), other.buckets.len());
        TrafficLedger {
            buckets: self
                .buckets
                .iter()
                .zip(&other.buckets)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Nearest-rank percentile of the bucket volumes: sort ascending and take the
/// element at 1-based index `ceil(q * N)`. Billing conventions vary; this one
/// is fixed here so results are comparable across runs.
pub fn percentile_cost(ledger: &TrafficLedger, q: f64) -> Result<f64, CostError> {
    if ledger.buckets.is_empty() {
        return Err(CostError::EmptyLedger);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(CostError::BadPercentile(q));
    }
    let mut sorted = ledger.buckets.clone();
    sorted.sort_unstable();
    Ok(nearest_rank(&sorted, q) as f64)
}

/// `max(x1 + x2) <= max(x1) + max(x2)`: splitting a traffic vector can only
/// lower (or keep) the peak relative to the sum of the split peaks. Always
/// true; exercised as a property over simulated ledgers. The analogous
/// 95th-percentile relation typically holds too but is reported as an
/// empirical statistic, not asserted.
pub fn peak_subadditivity_check(x1: &TrafficLedger, x2: &TrafficLedger) -> bool {
    assert_eq!(x1.buckets.len(), x2.buckets.len(), "ledger shape mismatch");
    x1.merged_with(x2).peak() <= x1.peak() + x2.peak()
}
