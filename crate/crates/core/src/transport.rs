//! Request manager: tracks every chunk's lifecycle across per-server
//! subflows, reassembles arrivals in order for the playback buffer, and
//! implements timeouts, the retry/skip limit, and opportunistic retransmit.

use crate::domain::{ChunkId, Rate, ServerId, SimDuration, SimTime};
use crate::estimator::{PathEstimate, RateSample};
use std::collections::BTreeSet;

/// Lifecycle of a single chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    Unrequested,
    Outstanding,
    Received,
    Skipped,
}

/// Per-chunk bookkeeping.
#[derive(Debug, Clone)]
pub struct ChunkRecord {
    pub chunk: ChunkId,
    pub state: ChunkState,
    pub assigned_server: Option<ServerId>,
    pub request_time: Option<SimTime>,
    pub receive_time: Option<SimTime>,
    pub retries: u32,
    /// Attempt counter distinguishing retries and duplicates; timeout events
    /// for superseded attempts are ignored.
    pub attempt: u32,
    /// Opportunistic retransmit fires at most once per chunk.
    pub duplicated: bool,
}

impl ChunkRecord {
    pub fn new(chunk: ChunkId) -> Self {
        ChunkRecord {
            chunk,
            state: ChunkState::Unrequested,
            assigned_server: None,
            request_time: None,
            receive_time: None,
            retries: 0,
            attempt: 0,
            duplicated: false,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, ChunkState::Received | ChunkState::Skipped)
    }
}

/// State of the connection to one server: which chunks are in flight and the
/// retransmission timeout derived from smoothed completion times
/// (`srtt + 4 * dev`, floored at 200 ms).
#[derive(Debug, Clone)]
pub struct SubflowState {
    pub server: ServerId,
    pub outstanding: BTreeSet<u32>,
    srtt_s: Option<f64>,
    rttvar_s: f64,
}

/// TCP-style smoothing gains for the timeout estimator.
const SRTT_GAIN: f64 = 1.0 / 8.0;
const RTTVAR_GAIN: f64 = 1.0 / 4.0;
const MIN_RTO: SimDuration = SimDuration::from_micros(200_000);
/// Application-level requests give up much sooner than kernel TCP would;
/// an uncapped timeout lets one congested sample freeze a path for minutes.
const MAX_RTO: SimDuration = SimDuration::from_micros(8_000_000);
const INITIAL_RTO: SimDuration = SimDuration::from_micros(3_000_000);
const MAX_BACKOFF_SHIFT: u32 = 2;

impl SubflowState {
    pub fn new(server: ServerId) -> Self {
        SubflowState {
            server,
            outstanding: BTreeSet::new(),
            srtt_s: None,
            rttvar_s: 0.0,
        }
    }

    pub fn record_completion(&mut self, elapsed: SimDuration) {
        let x = elapsed.as_secs_f64();
        match self.srtt_s {
            None => {
                self.srtt_s = Some(x);
                self.rttvar_s = x / 2.0;
            }
            Some(srtt) => {
                self.rttvar_s =
                    (1.0 - RTTVAR_GAIN) * self.rttvar_s + RTTVAR_GAIN * (x - srtt).abs();
                self.srtt_s = Some((1.0 - SRTT_GAIN) * srtt + SRTT_GAIN * x);
            }
        }
    }

    pub fn rto(&self) -> SimDuration {
        match self.srtt_s {
            None => INITIAL_RTO,
            // The 2x headroom keeps the timer from converging onto the mean
            // completion time when the deviation term decays; without it,
            // ordinary concurrency drift sets off spurious retransmit
            // storms.
            Some(srtt) => SimDuration::from_secs_f64(
                (2.0 * srtt).max(srtt + 4.0 * self.rttvar_s),
            )
            .max(MIN_RTO)
            .min(MAX_RTO),
        }
    }

    /// Timeout for a request that has already been retried `retries` times:
    /// the base timeout backed off exponentially, as TCP does, so repeated
    /// losses do not cascade into retry storms.
    pub fn rto_backoff(&self, retries: u32) -> SimDuration {
        self.rto()
            .checked_mul(1 << retries.min(MAX_BACKOFF_SHIFT) as u64)
            .unwrap_or(SimDuration::from_secs(3600))
    }
}

/// Assigns the lowest-index pending chunks to servers: contiguous runs go to
/// the same server, with servers taken in descending smoothed-rate order so
/// the earliest-needed chunks ride the fastest paths. Each server receives
/// its requested count, or fewer if the pending list runs out.
pub fn dispatch(
    requests: &[(ServerId, u32)],
    pending: &[ChunkId],
    paths: &[PathEstimate],
) -> Vec<(ChunkId, ServerId)> {
    let rate_of = |s: ServerId| {
        paths
            .iter()
            .find(|p| p.server == s)
            .map(|p| p.mean_rate.value())
            .unwrap_or(0.0)
    };
    let mut order: Vec<&(ServerId, u32)> = requests.iter().filter(|(_, c)| *c > 0).collect();
    order.sort_by(|a, b| {
        rate_of(b.0)
            .partial_cmp(&rate_of(a.0))
            .unwrap()
            .then(a.0.cmp(&b.0))
    });

    let mut out = Vec::new();
    let mut it = pending.iter();
    for (server, count) in order {
        for _ in 0..*count {
            match it.next() {
                Some(&chunk) => out.push((chunk, *server)),
                None => return out,
            }
        }
    }
    out
}

/// What to do when an outstanding request times out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutAction {
    Retry(ServerId),
    Skip,
}

/// Retry on the fastest other server while retries remain, otherwise give the
/// chunk up. A single-server client retries on the same path.
pub fn on_timeout(
    record: &ChunkRecord,
    paths: &[PathEstimate],
    retry_limit: u32,
) -> TimeoutAction {
    debug_assert_eq!(record.state, ChunkState::Outstanding);
    if record.retries >= retry_limit {
        return TimeoutAction::Skip;
    }
    let timed_out = record.assigned_server;
    let best_other = paths
        .iter()
        .filter(|p| Some(p.server) != timed_out)
        .max_by(|a, b| {
            a.mean_rate
                .value()
                .partial_cmp(&b.mean_rate.value())
                .unwrap()
                .then(b.server.cmp(&a.server))
        });
    match best_other {
        Some(p) => TimeoutAction::Retry(p.server),
        None => TimeoutAction::Retry(timed_out.expect("outstanding chunk has a server")),
    }
}

/// Checks whether the head-of-line chunk should be duplicated onto a faster
/// path: the assigned server is not expected to deliver before `deadline`,
/// while some other server with window room is. Returns the duplicate target.
pub fn opportunistic_retransmit(
    head: &ChunkRecord,
    paths: &[PathEstimate],
    now: SimTime,
    deadline: SimTime,
) -> Option<ServerId> {
    if head.state != ChunkState::Outstanding || head.duplicated {
        return None;
    }
    let assigned = head.assigned_server?;
    let expected = |p: &PathEstimate| {
        let r = p.mean_rate.value();
        if r <= 0.0 {
            f64::INFINITY
        } else {
            now.as_secs_f64() + 1.0 / r
        }
    };
    let current = paths.iter().find(|p| p.server == assigned)?;
    if expected(current) <= deadline.as_secs_f64() {
        return None;
    }
    paths
        .iter()
        .filter(|p| p.server != assigned && p.window >= 1.0)
        .filter(|p| expected(p) <= deadline.as_secs_f64())
        .max_by(|a, b| {
            a.mean_rate
                .value()
                .partial_cmp(&b.mean_rate.value())
                .unwrap()
                .then(b.server.cmp(&a.server))
        })
        .map(|p| p.server)
}

/// Effect of a response arrival.
#[derive(Debug, Clone)]
pub enum ReceiveOutcome {
    /// First copy for an outstanding chunk: the record moves to `Received`.
    /// The rate sample is present when the arrival matches the currently
    /// assigned request (duplicates won the race otherwise).
    Delivered { sample: Option<RateSample> },
    /// Late or duplicate arrival; nothing changes.
    Ignored,
}

/// Applies a response arriving from `server` at `at`. Completion rate is the
/// inverse of the request round trip, in chunks per second.
pub fn on_receive(record: &mut ChunkRecord, server: ServerId, at: SimTime) -> ReceiveOutcome {
    match record.state {
        ChunkState::Outstanding => {
            let matches_assignment = record.assigned_server == Some(server);
            record.state = ChunkState::Received;
            record.receive_time = Some(at);
            let sample = if matches_assignment {
                let rt = record.request_time.expect("outstanding chunk was requested");
                let elapsed = at.duration_since(rt).as_secs_f64();
                Rate::try_new(1.0 / elapsed).map(|completion_rate| RateSample {
                    server,
                    completion_rate,
                    at,
                })
            } else {
                None
            };
            ReceiveOutcome::Delivered { sample }
        }
        ChunkState::Received | ChunkState::Skipped => ReceiveOutcome::Ignored,
        ChunkState::Unrequested => ReceiveOutcome::Ignored,
    }
}
