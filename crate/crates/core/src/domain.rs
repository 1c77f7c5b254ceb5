//! Shared vocabulary types: simulation time, rates, chunk/server identities,
//! and the deterministic splittable random-number streams used everywhere.
//!
//! All types here are small immutable values, safe to copy across threads.
//! Time is integer microseconds so event ordering never suffers float drift.

use std::fmt;
use std::ops::{Add, AddAssign};

/// Microseconds since simulation start. Monotone along any event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        assert!(secs.is_finite() && secs >= 0.0, "invalid time: {secs}");
        let us = (secs * 1e6).round();
        assert!(us <= u64::MAX as f64, "time overflows microsecond clock");
        SimTime(us as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Checked addition; `None` on overflow. The plain `+` operator panics
    /// instead of wrapping.
    pub fn checked_add(self, d: SimDuration) -> Option<SimTime> {
        self.0.checked_add(d.0).map(SimTime)
    }

    /// Time elapsed since `earlier`. Panics if `earlier` is in the future.
    pub fn duration_since(self, earlier: SimTime) -> SimDuration {
        assert!(
            self.0 >= earlier.0,
            "duration_since: {earlier:?} is later than {self:?}"
        );
        SimDuration(self.0 - earlier.0)
    }

    pub fn checked_duration_since(self, earlier: SimTime) -> Option<SimDuration> {
        self.0.checked_sub(earlier.0).map(SimDuration)
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;

    fn add(self, d: SimDuration) -> SimTime {
        self.checked_add(d).expect("SimTime overflow")
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, d: SimDuration) {
        *self = *self + d;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// A span of simulation time, integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimDuration(u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimDuration(ms.checked_mul(1_000).expect("duration overflow"))
    }

    pub fn from_secs(s: u64) -> Self {
        SimDuration(s.checked_mul(1_000_000).expect("duration overflow"))
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        assert!(secs.is_finite() && secs >= 0.0, "invalid duration: {secs}");
        let us = (secs * 1e6).round();
        assert!(us <= u64::MAX as f64, "duration overflows microsecond clock");
        SimDuration(us as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn checked_add(self, other: SimDuration) -> Option<SimDuration> {
        self.0.checked_add(other.0).map(SimDuration)
    }

    pub fn checked_mul(self, k: u64) -> Option<SimDuration> {
        self.0.checked_mul(k).map(SimDuration)
    }

    pub fn max(self, other: SimDuration) -> SimDuration {
        SimDuration(self.0.max(other.0))
    }
}

impl Add for SimDuration {
    type Output = SimDuration;

    fn add(self, other: SimDuration) -> SimDuration {
        self.checked_add(other).expect("SimDuration overflow")
    }
}

/// A non-negative, finite rate in chunks per second.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Rate(f64);

impl Rate {
    pub const ZERO: Rate = Rate(0.0);

    /// Panics on negative or non-finite values; use [`Rate::try_new`] for
    /// untrusted input.
    pub fn per_sec(v: f64) -> Self {
        Rate::try_new(v).expect("rate must be finite and non-negative")
    }

    pub fn try_new(v: f64) -> Option<Self> {
        if v.is_finite() && v >= 0.0 {
            Some(Rate(v))
        } else {
            None
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} chunks/s", self.0)
    }
}

/// Index into the server set of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServerId(pub u32);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Opaque identity of one video playback session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VideoId(pub u64);

/// One fixed-size chunk within a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkId {
    pub video: VideoId,
    pub index: u32,
}

/// Static description of one video: fixed-size chunks consumed at a fixed
/// playback rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoSpec {
    pub total_chunks: u32,
    pub chunk_size_bytes: u32,
    pub playback_rate: Rate,
    pub duration_s: f64,
}

impl VideoSpec {
    /// Builds a spec whose duration is derived from the chunk count, so the
    /// duration/chunk-count consistency invariant holds by construction.
    pub fn from_chunks(total_chunks: u32, chunk_size_bytes: u32, playback_rate: Rate) -> Self {
        assert!(total_chunks > 0, "video needs at least one chunk");
        assert!(chunk_size_bytes > 0, "chunk size must be positive");
        assert!(playback_rate.value() > 0.0, "playback rate must be positive");
        VideoSpec {
            total_chunks,
            chunk_size_bytes,
            playback_rate,
            duration_s: total_chunks as f64 / playback_rate.value(),
        }
    }

    /// Playback time of a single chunk.
    pub fn chunk_interval(&self) -> SimDuration {
        SimDuration::from_secs_f64(1.0 / self.playback_rate.value())
    }

    pub fn is_consistent(&self) -> bool {
        let interval = 1.0 / self.playback_rate.value();
        (self.total_chunks as f64 * interval - self.duration_s).abs() <= interval
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identity of one deterministic random stream. Two streams with the same
/// `(seed, stream_id)` produce identical draw sequences; distinct ids produce
/// statistically independent sequences regardless of draw interleaving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Instantiates the generator for this stream.
    pub fn rng(self) -> DetRng {
        DetRng {
            state: mix64(self.seed ^ self.stream_id.wrapping_mul(GOLDEN_GAMMA)),
        }
    }
}

/// Derives a substream that is deterministic in `(parent, label)` and
/// independent of the parent and of other labels.
pub fn rng_split(parent: RngStream, label: u64) -> RngStream {
    let h = mix64(
        mix64(parent.seed ^ parent.stream_id.wrapping_mul(GOLDEN_GAMMA))
            ^ label.wrapping_mul(GOLDEN_GAMMA),
    );
    RngStream {
        seed: h,
        stream_id: label,
    }
}

/// SplitMix64 generator. Not cryptographic; chosen for exact cross-platform
/// reproducibility and cheap stream derivation.
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn range_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Exponentially distributed with the given mean.
    pub fn exp(&mut self, mean: f64) -> f64 {
        debug_assert!(mean > 0.0);
        // 1 - u is in (0, 1], so the log is finite.
        -mean * (1.0 - self.next_f64()).ln()
    }

    /// Standard normal via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index drawn with probability proportional to `weights[i]`.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0 && total.is_finite());
        let mut x = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_labels_give_distinct_streams() {
        let parent = RngStream::new(42, 0);
        let mut a = rng_split(parent, 0).rng();
        let mut b = rng_split(parent, 1).rng();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn same_stream_replays_identically() {
        let s = rng_split(RngStream::new(42, 0), 7);
        let mut a = s.rng();
        let mut b = s.rng();
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn sibling_streams_are_uncorrelated() {
        let parent = RngStream::new(9, 3);
        let mut x = rng_split(parent, 0).rng();
        let mut y = rng_split(parent, 1).rng();
        let n = 10_000;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let a = x.next_f64();
            let b = y.next_f64();
            sx += a;
            sy += b;
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let var_x = sxx / nf - (sx / nf) * (sx / nf);
        let var_y = syy / nf - (sy / nf) * (sy / nf);
        let corr = cov / (var_x * var_y).sqrt();
        assert!(corr.abs() < 0.05, "correlation too high: {corr}");
    }

    #[test]
    fn exp_draws_have_requested_mean() {
        let mut rng = RngStream::new(1, 1).rng();
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.exp(30.0)).sum::<f64>() / n as f64;
        assert!((mean - 30.0).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn video_spec_duration_consistent() {
        let v = VideoSpec::from_chunks(2000, 250_000, Rate::per_sec(1.0));
        assert!(v.is_consistent());
        assert_eq!(v.chunk_interval(), SimDuration::from_secs(1));
    }

    #[test]
    fn weighted_index_matches_weights() {
        let mut rng = RngStream::new(5, 0).rng();
        let weights = [1.0 / 5.0, 1.0 / 60.0];
        let n = 10_000;
        let hits = (0..n).filter(|_| rng.weighted_index(&weights) == 0).count();
        let p = hits as f64 / n as f64;
        assert!((p - 12.0 / 13.0).abs() < 0.02, "p {p}");
    }

    proptest! {
        #[test]
        fn simtime_checked_add_matches_wide_arithmetic(a in any::<u64>(), b in any::<u64>()) {
            let t = SimTime::from_micros(a);
            let d = SimDuration::from_micros(b);
            let wide = a as u128 + b as u128;
            match t.checked_add(d) {
                Some(sum) => prop_assert_eq!(sum.as_micros() as u128, wide),
                None => prop_assert!(wide > u64::MAX as u128),
            }
        }

        #[test]
        fn simduration_add_is_associative(a in 0u64..1u64 << 40, b in 0u64..1u64 << 40, c in 0u64..1u64 << 40) {
            let (a, b, c) = (
                SimDuration::from_micros(a),
                SimDuration::from_micros(b),
                SimDuration::from_micros(c),
            );
            prop_assert_eq!((a + b) + c, a + (b + c));
        }

        #[test]
        fn rate_rejects_invalid(v in any::<f64>()) {
            match Rate::try_new(v) {
                Some(r) => prop_assert!(r.value() >= 0.0 && r.value().is_finite()),
                None => prop_assert!(!v.is_finite() || v < 0.0),
            }
        }
    }
}
