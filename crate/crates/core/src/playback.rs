//! Client playback model: pre-buffering, steady playback, stall detection,
//! skip accounting, and the per-session quality report.
//!
//! The player is a small state machine driven by two kinds of notifications
//! from the simulation: chunk deadlines (a chunk interval elapsed) and buffer
//! updates (a chunk became available or was given up). A chunk is playable
//! once it is received or skipped; skipped chunks still consume one playback
//! interval, the codec just masks the missing frames.

use crate::domain::{SimDuration, SimTime};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlaybackError {
    #[error("report requested before playback finished")]
    NotFinished,
}

/// How a chunk index looks to the player.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkStatus {
    Missing,
    Received,
    Skipped,
}

/// View of chunk availability, implemented by the transport's record table.
pub trait ChunkAvailability {
    fn status(&self, index: u32) -> ChunkStatus;
}

impl ChunkAvailability for Vec<ChunkStatus> {
    fn status(&self, index: u32) -> ChunkStatus {
        self.get(index as usize).copied().unwrap_or(ChunkStatus::Missing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PreBuffering,
    Playing,
    Stalled,
    Finished,
}

/// Playback state for one session.
#[derive(Debug, Clone)]
pub struct PlaybackState {
    pub phase: Phase,
    /// Next chunk index the player needs.
    pub play_head: u32,
    pub total_chunks: u32,
    pub chunk_interval: SimDuration,
    pub prebuffer_chunks: u32,
    /// Deadline at which `play_head` must be playable; meaningful in
    /// `Playing` only.
    pub next_deadline: Option<SimTime>,
    pub session_start: SimTime,
    stall_started: Option<SimTime>,
    pub stall_log: Vec<(SimTime, SimTime)>,
    pub skips: u32,
    pub finished_at: Option<SimTime>,
}

/// Engine directive produced by a playback transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    /// Nothing to schedule.
    Idle,
    /// Playback continues; a deadline event is due at this time.
    DeadlineAt(SimTime),
    /// The session completed.
    Finished,
}

impl PlaybackState {
    pub fn new(
        total_chunks: u32,
        chunk_interval: SimDuration,
        prebuffer_chunks: u32,
        session_start: SimTime,
    ) -> Self {
        PlaybackState {
            phase: Phase::PreBuffering,
            play_head: 0,
            total_chunks,
            chunk_interval,
            prebuffer_chunks,
            next_deadline: None,
            session_start,
            stall_started: None,
            stall_log: Vec::new(),
            skips: 0,
            finished_at: None,
        }
    }

    /// Contiguous playable chunks beyond the play head.
    pub fn buffer_level(&self, avail: &impl ChunkAvailability) -> u32 {
        let mut level = 0;
        while self.play_head + level < self.total_chunks
            && avail.status(self.play_head + level) != ChunkStatus::Missing
        {
            level += 1;
        }
        level
    }

    fn consume_one(&mut self, now: SimTime, avail: &impl ChunkAvailability) -> TickOutcome {
        debug_assert!(avail.status(self.play_head) != ChunkStatus::Missing);
        if avail.status(self.play_head) == ChunkStatus::Skipped {
            self.skips += 1;
        }
        self.play_head += 1;
        if self.play_head >= self.total_chunks {
            self.phase = Phase::Finished;
            self.finished_at = Some(now);
            self.next_deadline = None;
            return TickOutcome::Finished;
        }
        self.phase = Phase::Playing;
        let next = now + self.chunk_interval;
        self.next_deadline = Some(next);
        TickOutcome::DeadlineAt(next)
    }

    /// Drives the state machine at time `now`. Call on every chunk-deadline
    /// boundary and whenever the buffer contents change.
    pub fn tick(&mut self, now: SimTime, avail: &impl ChunkAvailability) -> TickOutcome {
        match self.phase {
            Phase::Finished => TickOutcome::Idle,
            Phase::PreBuffering => {
                let threshold = self.prebuffer_chunks.min(self.total_chunks);
                if self.buffer_level(avail) >= threshold {
                    // Startup: consume the first chunk immediately.
                    self.consume_one(now, avail)
                } else {
                    TickOutcome::Idle
                }
            }
            Phase::Playing => {
                let Some(deadline) = self.next_deadline else {
                    return TickOutcome::Idle;
                };
                if now < deadline {
                    return TickOutcome::Idle;
                }
                if avail.status(self.play_head) == ChunkStatus::Missing {
                    self.phase = Phase::Stalled;
                    self.stall_started = Some(now);
                    self.next_deadline = None;
                    TickOutcome::Idle
                } else {
                    self.consume_one(now, avail)
                }
            }
            Phase::Stalled => {
                if avail.status(self.play_head) == ChunkStatus::Missing {
                    return TickOutcome::Idle;
                }
                let started = self.stall_started.take().expect("stall start recorded");
                self.stall_log.push((started, now));
                self.consume_one(now, avail)
            }
        }
    }

    /// Force-closes the session at the experiment horizon: an open stall ends
    /// at `now` and the session counts as finished for reporting purposes.
    pub fn finish_at_horizon(&mut self, now: SimTime) {
        if self.phase == Phase::Finished {
            return;
        }
        if let Some(started) = self.stall_started.take() {
            self.stall_log.push((started, now));
        }
        self.phase = Phase::Finished;
        self.finished_at = Some(now);
        self.next_deadline = None;
    }

    pub fn report(&self) -> Result<QoeReport, PlaybackError> {
        if self.phase != Phase::Finished {
            return Err(PlaybackError::NotFinished);
        }
        let end = self.finished_at.expect("finished sessions have an end time");
        let session = end.duration_since(self.session_start).as_secs_f64();
        let stall_total: f64 = self
            .stall_log
            .iter()
            .map(|(s, e)| e.duration_since(*s).as_secs_f64())
            .sum();
        let stall_count = self.stall_log.len() as u32;
        Ok(QoeReport {
            // + 0.0 normalizes a negative zero out of the division.
            stall_fraction: if session > 0.0 { stall_total / session + 0.0 } else { 0.0 },
            mean_stall_duration_s: if stall_count > 0 {
                stall_total / stall_count as f64
            } else {
                0.0 // convention: no stalls means zero mean
            },
            stall_count,
            skipped_chunks: self.skips,
            session_duration_s: session,
        })
    }
}

/// Per-session quality metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoeReport {
    pub stall_fraction: f64,
    pub mean_stall_duration_s: f64,
    pub stall_count: u32,
    pub skipped_chunks: u32,
    pub session_duration_s: f64,
}
