//! A deterministic discrete-event laboratory for multipath multi-server
//! (MuMS) video delivery.
//!
//! Clients download fixed-size video chunks simultaneously from several
//! replica servers. The crate implements the full client stack - a
//! variance-minimizing chunk scheduler solved as a small linear program,
//! CUBIC-style per-path bandwidth estimation, a request manager with
//! timeouts, retries, and opportunistic retransmit, and a playback model
//! with stall/skip accounting - together with the provider-side economics:
//! 5-minute 95th-percentile billing ledgers, a closed-form cost model with
//! its M/G/inf Monte-Carlo oracle, and server-selection policies including
//! a cost-aware convex assignment program.
//!
//! Everything runs inside a seeded event-driven simulation: identical
//! configurations and seeds produce byte-identical results. Independent
//! repetitions execute data-parallel under the `parallel` feature (on by
//! default) with a sequential fallback when it is disabled.

pub mod costsel;
pub mod domain;
pub mod estimator;
pub mod exec;
pub mod harness;
pub mod oracle;
pub mod playback;
pub mod scheduler;
pub mod simnet;
pub mod simplex;
pub mod transport;

pub use domain::{rng_split, ChunkId, Rate, RngStream, ServerId, SimDuration, SimTime, VideoSpec};
pub use harness::{run_experiment, run_single, ExperimentConfig, ExperimentReport};
