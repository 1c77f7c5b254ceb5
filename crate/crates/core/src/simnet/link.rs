//! Shaped-link and peering-link models.
//!
//! A shaped link emulates a dummynet-style shaping node: a FIFO set of
//! in-flight chunk transfers served fluidly at the link's current bandwidth,
//! shared processor-sharing style among all concurrent transfers. The buffer
//! holds a fixed number of packets; admitting a transfer that would overflow
//! it drops the response (the client recovers via timeout). Bandwidth varies
//! around a fixed mean, either smoothly (bounded mean-reverting steps every
//! second) or abruptly (uniform resampling at exponential intervals), always
//! clamped to `[mean/2, 3*mean/2]`.

use crate::costsel::TrafficLedger;
use crate::domain::{DetRng, Rate, ServerId, SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariationMode {
    Smooth,
    Abrupt,
    /// Constant bandwidth; useful for calibration runs.
    Fixed,
}

/// One response in flight through a shaping node.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub remaining_chunks: f64,
    pub client: u32,
    pub server: u32,
    pub chunk: u32,
    pub attempt: u32,
    pub prop_delay: SimDuration,
}

const COMPLETION_EPS: f64 = 1e-9;
const SMOOTH_INTERVAL: SimDuration = SimDuration::from_micros(1_000_000);
const ABRUPT_MEAN_INTERVAL_S: f64 = 30.0;

/// Bounded mean-reverting step: at most +-10% of the mean, biased back toward
/// it, result clamped to `[mean/2, 3*mean/2]`.
fn smooth_step(mean: f64, current: f64, draw: f64) -> f64 {
    let bias = 0.4 * (mean - current) / mean;
    let v = (draw + bias).clamp(-1.0, 1.0);
    (current + 0.1 * mean * v).clamp(mean / 2.0, 1.5 * mean)
}

fn abrupt_resample(mean: f64, uniform01: f64) -> f64 {
    mean / 2.0 + uniform01 * mean
}

#[derive(Debug, Clone)]
pub struct ShapedLink {
    mean_bw: Rate,
    current_bw: Rate,
    queue_capacity_packets: u32,
    packets_per_chunk: u32,
    variation: VariationMode,
    active: Vec<Transfer>,
    last_update: SimTime,
    /// Bumped whenever service rates are redistributed; stale completion
    /// events carry an older generation and are ignored.
    pub generation: u64,
    rng: DetRng,
}

impl ShapedLink {
    pub fn new(
        mean_bw: Rate,
        variation: VariationMode,
        queue_capacity_packets: u32,
        packets_per_chunk: u32,
        rng: DetRng,
    ) -> Self {
        assert!(mean_bw.value() > 0.0);
        assert!(queue_capacity_packets > 0 && packets_per_chunk > 0);
        ShapedLink {
            mean_bw,
            current_bw: mean_bw,
            queue_capacity_packets,
            packets_per_chunk,
            variation,
            active: Vec::new(),
            last_update: SimTime::ZERO,
            generation: 0,
            rng,
        }
    }

    pub fn current_bw(&self) -> Rate {
        self.current_bw
    }

    pub fn mean_bw(&self) -> Rate {
        self.mean_bw
    }

    pub fn active_transfers(&self) -> usize {
        self.active.len()
    }

    /// Drains in-flight work up to `now` at the per-transfer fluid rate.
    fn elapse(&mut self, now: SimTime) {
        debug_assert!(now >= self.last_update);
        if self.active.is_empty() {
            self.last_update = now;
            return;
        }
        let dt = now.duration_since(self.last_update).as_secs_f64();
        if dt > 0.0 {
            let per_transfer = self.current_bw.value() / self.active.len() as f64;
            for t in &mut self.active {
                t.remaining_chunks -= per_transfer * dt;
            }
        }
        self.last_update = now;
    }

    /// Occupied buffer space in packets, counting partially served chunks by
    /// their remaining share.
    fn used_packets(&self) -> u32 {
        self.active
            .iter()
            .map(|t| (t.remaining_chunks * self.packets_per_chunk as f64).ceil() as u32)
            .sum()
    }

    /// Admits a transfer, or drops it when the buffer is full. Admission
    /// redistributes the service rate.
    pub fn admit(&mut self, now: SimTime, transfer: Transfer) -> bool {
        self.elapse(now);
        if self.used_packets() + self.packets_per_chunk > self.queue_capacity_packets {
            return false;
        }
        self.active.push(transfer);
        self.generation += 1;
        true
    }

    /// Time at which the transfer closest to completion finishes, given the
    /// current sharing. Rounded up to the microsecond clock.
    pub fn next_completion(&self) -> Option<SimTime> {
        let min_remaining = self
            .active
            .iter()
            .map(|t| t.remaining_chunks.max(0.0))
            .fold(f64::INFINITY, f64::min);
        if !min_remaining.is_finite() {
            return None;
        }
        let per_transfer = self.current_bw.value() / self.active.len() as f64;
        let secs = min_remaining / per_transfer;
        let us = (secs * 1e6).ceil() as u64;
        Some(self.last_update + SimDuration::from_micros(us))
    }

    /// Removes every transfer that has finished by `now`, in admission order.
    pub fn take_completed(&mut self, now: SimTime) -> Vec<Transfer> {
        self.elapse(now);
        let mut done = Vec::new();
        let mut i = 0;
        while i < self.active.len() {
            if self.active[i].remaining_chunks <= COMPLETION_EPS {
                done.push(self.active.remove(i));
            } else {
                i += 1;
            }
        }
        if !done.is_empty() {
            self.generation += 1;
        }
        done
    }

    /// Delay from link creation to its first bandwidth variation. Fixed
    /// links never vary; the returned delay outlives any realistic horizon.
    pub fn initial_variation_delay(&mut self) -> SimDuration {
        match self.variation {
            VariationMode::Smooth => SMOOTH_INTERVAL,
            VariationMode::Abrupt => {
                SimDuration::from_secs_f64(self.rng.exp(ABRUPT_MEAN_INTERVAL_S).max(1e-3))
            }
            VariationMode::Fixed => SimDuration::from_secs(u32::MAX as u64),
        }
    }

    /// Applies one bandwidth variation at `now` and returns the delay until
    /// the next one.
    pub fn vary_bandwidth(&mut self, now: SimTime) -> SimDuration {
        self.elapse(now);
        let mean = self.mean_bw.value();
        let (next_bw, interval) = match self.variation {
            VariationMode::Smooth => {
                let draw = self.rng.range_f64(-1.0, 1.0);
                (smooth_step(mean, self.current_bw.value(), draw), SMOOTH_INTERVAL)
            }
            VariationMode::Abrupt => {
                let bw = abrupt_resample(mean, self.rng.next_f64());
                let gap = self.rng.exp(ABRUPT_MEAN_INTERVAL_S).max(1e-3);
                (bw, SimDuration::from_secs_f64(gap))
            }
            VariationMode::Fixed => (mean, SimDuration::from_secs(u32::MAX as u64)),
        };
        self.current_bw = Rate::per_sec(next_bw);
        self.generation += 1;
        interval
    }
}

/// The metered link between one server and the ISP. Capacity is provisioned
/// high enough that it never congests; only the byte meter matters.
#[derive(Debug, Clone)]
pub struct PeeringLink {
    pub server: ServerId,
    pub capacity: Rate,
    pub ledger: TrafficLedger,
}

impl PeeringLink {
    pub fn new(server: ServerId, capacity: Rate, horizon: SimDuration) -> Self {
        PeeringLink {
            server,
            capacity,
            ledger: TrafficLedger::for_horizon(horizon),
        }
    }

    /// Adds response bytes to the 5-minute bucket containing `at`.
    pub fn meter_traffic(&mut self, bytes: u64, at: SimTime) {
        self.ledger.record(bytes, at);
    }
}
