//! Per-server bandwidth estimation.
//!
//! Each path keeps an exponentially averaged completion rate and an
//! exponentially weighted second moment, from which one-sided Cantelli bounds
//! on the 5th/95th rate percentiles are derived. The congestion window follows
//! the CUBIC growth curve, with window reductions triggered not by packet loss
//! (there is none at the application layer) but by the smoothed rate dropping
//! more than 20% below its high-water mark since the last loss event.

use crate::domain::{Rate, ServerId, SimTime};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("rate sample must be finite and positive, got {0}")]
    InvalidSample(f64),
    #[error("sample for {sample} applied to estimate for {estimate}")]
    ServerMismatch { sample: ServerId, estimate: ServerId },
}

/// Tunables for the estimator. The CUBIC constants are the standard published
/// defaults; the smoothing factor and loss threshold govern the rate filter.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    /// Weight of the newest sample in the exponential average.
    pub smoothing: f64,
    /// CUBIC aggressiveness constant C.
    pub c_cubic: f64,
    /// CUBIC backoff: the window sheds `beta * w_max` on a loss event.
    pub beta: f64,
    /// Tail mass for the Cantelli rate bounds (0.05 gives 5%/95%).
    pub tail: f64,
    /// Relative drop in the smoothed rate treated as a loss event.
    pub loss_drop_fraction: f64,
    /// Windows never fall below one chunk so a degraded path keeps probing.
    pub min_window: f64,
    /// Cap on window growth between loss events.
    pub max_window: f64,
    /// `w_max` seeding the cubic curve before any loss has been seen.
    pub initial_w_max: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            smoothing: 0.2,
            c_cubic: 0.4,
            beta: 0.7,
            tail: 0.05,
            loss_drop_fraction: 0.2,
            min_window: 1.0,
            // Chunks are seconds of video each, so even a healthy path keeps
            // only a handful in flight; the cap corresponds to a few seconds
            // of content per connection.
            max_window: 8.0,
            // Modest pre-loss seed: paths open near one outstanding chunk
            // and ramp along the cubic, like a fresh TCP connection.
            initial_w_max: 4.0,
        }
    }
}

/// One completed request observation: the inverse of the application-level
/// round trip, in chunks per second.
#[derive(Debug, Clone, Copy)]
pub struct RateSample {
    pub server: ServerId,
    pub completion_rate: Rate,
    pub at: SimTime,
}

/// Smoothed bandwidth state for one server path.
#[derive(Debug, Clone, Copy)]
pub struct PathEstimate {
    pub server: ServerId,
    pub mean_rate: Rate,
    /// Exponentially weighted variance of the completion rate, (chunks/s)^2.
    pub rate_variance: f64,
    pub upper_rate: Rate,
    pub lower_rate: Rate,
    /// Current congestion window in chunks (may be fractional).
    pub window: f64,
    pub last_congestion_time: SimTime,
    /// Window size at the moment of the last loss event.
    pub w_max_at_loss: f64,
    /// High-water mark of the smoothed rate since the last loss event; the
    /// loss rule fires when the smoothed rate falls 20% below it. (A
    /// comparison against only the previous smoothed value can never fire:
    /// with smoothing s the mean contracts by at most the factor 1-s per
    /// sample, which is above the threshold for any s below the drop
    /// fraction.)
    pub reference_rate: Rate,
}

impl PathEstimate {
    /// Fresh estimate seeded with a prior rate guess. The prior variance is a
    /// quarter of the prior mean squared, wide enough that the first real
    /// samples dominate quickly.
    pub fn new(server: ServerId, prior_rate: Rate, at: SimTime, cfg: &EstimatorConfig) -> Self {
        let variance = (prior_rate.value() * 0.25).powi(2);
        let (lower, upper) = chebyshev_bounds(prior_rate, variance, cfg.tail);
        let mut est = PathEstimate {
            server,
            mean_rate: prior_rate,
            rate_variance: variance,
            upper_rate: upper,
            lower_rate: lower,
            window: 0.0,
            last_congestion_time: at,
            w_max_at_loss: cfg.initial_w_max,
            reference_rate: prior_rate,
        };
        est.window = est.window_at(at, cfg);
        est
    }

    /// Window value at `now` under the current congestion regime, clamped to
    /// the configured floor and cap.
    pub fn window_at(&self, now: SimTime, cfg: &EstimatorConfig) -> f64 {
        cubic_window(self, now, cfg.c_cubic, cfg.beta).min(cfg.max_window)
    }
}

/// Folds one rate sample into the estimate. Returns the updated estimate and
/// whether the sample registered a loss-equivalent event.
pub fn observe(
    est: &PathEstimate,
    sample: &RateSample,
    cfg: &EstimatorConfig,
) -> Result<(PathEstimate, bool), EstimatorError> {
    let x = sample.completion_rate.value();
    if !x.is_finite() || x <= 0.0 {
        return Err(EstimatorError::InvalidSample(x));
    }
    if sample.server != est.server {
        return Err(EstimatorError::ServerMismatch {
            sample: sample.server,
            estimate: est.server,
        });
    }

    let s = cfg.smoothing;
    let old_mean = est.mean_rate.value();
    let new_mean = s * x + (1.0 - s) * old_mean;

    // Second-moment recursion with the same smoothing factor; the variance is
    // recovered as m2 - mean^2 and clamped against rounding.
    let old_m2 = est.rate_variance + old_mean * old_mean;
    let new_m2 = s * x * x + (1.0 - s) * old_m2;
    let new_var = (new_m2 - new_mean * new_mean).max(0.0);

    let reference = est.reference_rate.value().max(old_mean);
    let loss = new_mean < (1.0 - cfg.loss_drop_fraction) * reference;

    let mut next = *est;
    next.mean_rate = Rate::per_sec(new_mean);
    next.rate_variance = new_var;
    let (lower, upper) = chebyshev_bounds(next.mean_rate, new_var, cfg.tail);
    next.lower_rate = lower;
    next.upper_rate = upper;

    if loss {
        // Enter the post-loss regime: the cubic curve restarts from the
        // window held at the loss instant, and the rate high-water mark
        // resets so one congestion episode registers one loss.
        let w_now = est.window_at(sample.at, cfg);
        next.w_max_at_loss = w_now;
        next.last_congestion_time = sample.at;
        next.reference_rate = Rate::per_sec(new_mean);
    } else {
        next.reference_rate = Rate::per_sec(reference.max(new_mean));
    }
    next.window = next.window_at(sample.at, cfg);

    Ok((next, loss))
}

/// CUBIC window law: `W(t) = c * (t - K)^3 + w_max`, where `t` is seconds
/// since the last congestion event and `K = (w_max * beta / c)^(1/3)`. The
/// curve starts at `(1 - beta) * w_max`, plateaus at `w_max` when `t = K`,
/// and probes beyond it afterwards. Floored at one chunk.
pub fn cubic_window(est: &PathEstimate, now: SimTime, c_cubic: f64, beta: f64) -> f64 {
    let t = now
        .checked_duration_since(est.last_congestion_time)
        .expect("window queried before the last congestion event")
        .as_secs_f64();
    let k = (est.w_max_at_loss * beta / c_cubic).cbrt();
    let w = c_cubic * (t - k).powi(3) + est.w_max_at_loss;
    w.max(1.0)
}

/// One-sided (Cantelli) bounds on the rate distribution: at most `tail` of
/// the mass lies above `upper` or below `lower`, whatever the distribution.
pub fn chebyshev_bounds(mean: Rate, variance: f64, tail: f64) -> (Rate, Rate) {
    debug_assert!(variance >= 0.0);
    debug_assert!(tail > 0.0 && tail < 0.5);
    let sigma = variance.sqrt();
    let mult = ((1.0 - tail) / tail).sqrt();
    let upper = mean.value() + sigma * mult;
    let lower = (mean.value() - sigma * mult).max(0.0);
    (Rate::per_sec(lower), Rate::per_sec(upper))
}
