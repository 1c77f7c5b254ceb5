//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, plus validation. Every knob has a default, so an empty config
//! is a valid cost-scenario experiment.

use crate::domain::Rate;
use crate::simnet::link::VariationMode;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Fixed client population on dedicated per-path shaped links; the
    /// quality metrics are the point.
    Performance,
    /// Rotating client population, shared per-machine shaped links, ten
    /// metered peering links; the billing percentiles are the point.
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    SunStar,
    MinRtt,
    SingleServer,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    RoundRobin,
    KClosest,
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthLevel {
    /// Per-client mean bandwidth at half the target rate: guaranteed
    /// undersupply, useful for exercising stall handling.
    Low,
    /// Per-client mean bandwidth equal to the target rate.
    Medium,
    /// Per-client mean bandwidth at 1.5x the target rate.
    High,
}

impl BandwidthLevel {
    pub fn scale(self) -> f64 {
        match self {
            BandwidthLevel::Low => 0.5,
            BandwidthLevel::Medium => 1.0,
            BandwidthLevel::High => 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub scheduler: SchedulerKind,
    pub selection: SelectionKind,
    pub bandwidth_level: BandwidthLevel,
    pub bandwidth_variation: VariationMode,
    pub n_servers: u32,
    pub servers_per_client: u32,
    pub clients_concurrent: u32,
    pub clients_per_machine: u32,
    /// Candidate video lengths for the cost scenario's rotating population.
    pub video_durations_min: Vec<f64>,
    /// Selection weights; `None` means proportional to `1/duration`, biasing
    /// the mix toward short videos.
    pub video_duration_weights: Option<Vec<f64>>,
    /// Fixed video length for the performance scenario.
    pub video_chunks: u32,
    pub horizon_s: f64,
    pub repetitions: u32,
    pub seed: u64,
    pub epoch_s: f64,
    /// Playback (encoding) rate in chunks per second.
    pub playback_rate: f64,
    /// Aggregate target rate; defaults to the playback rate, its floor.
    pub target_rate: Option<f64>,
    pub chunk_size_bytes: u32,
    pub prebuffer_chunks: u32,
    pub retry_limit: u32,
    pub queue_packets: u32,
    pub packets_per_chunk: u32,
    pub prop_delay_min_ms: f64,
    pub prop_delay_max_ms: f64,
    /// Collect a line-oriented event log in the trace.
    pub trace_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Cost,
            scheduler: SchedulerKind::SunStar,
            selection: SelectionKind::RoundRobin,
            bandwidth_level: BandwidthLevel::Medium,
            bandwidth_variation: VariationMode::Smooth,
            n_servers: 10,
            servers_per_client: 2,
            clients_concurrent: 100,
            clients_per_machine: 10,
            video_durations_min: vec![5.0, 10.0, 20.0, 30.0, 60.0],
            video_duration_weights: None,
            video_chunks: 2000,
            horizon_s: 14_400.0,
            repetitions: 10,
            seed: 0,
            // Scheduling round length, an empirical compromise between
            // responsiveness and estimate stability.
            epoch_s: 0.5,
            // Two chunks per second of video: keeps the per-path concurrency
            // around two, where the window constraint actually binds and the
            // allocator has room to hedge across paths.
            playback_rate: 2.0,
            target_rate: None,
            chunk_size_bytes: 250_000,
            prebuffer_chunks: 8,
            retry_limit: 3,
            queue_packets: 50,
            packets_per_chunk: 10,
            prop_delay_min_ms: 5.0,
            prop_delay_max_ms: 50.0,
            trace_events: false,
        }
    }
}

impl ExperimentConfig {
    pub fn target(&self) -> Rate {
        Rate::per_sec(self.target_rate.unwrap_or(self.playback_rate))
    }

    pub fn machines(&self) -> u32 {
        match self.scenario {
            Scenario::Performance => self.clients_concurrent,
            Scenario::Cost => self.clients_concurrent / self.clients_per_machine,
        }
    }

    pub fn clients_on_machine(&self) -> u32 {
        match self.scenario {
            Scenario::Performance => 1,
            Scenario::Cost => self.clients_per_machine,
        }
    }

    /// Duration weights, defaulting to the short-video bias `1/d`.
    pub fn duration_weights(&self) -> Vec<f64> {
        match &self.video_duration_weights {
            Some(w) => w.clone(),
            None => self.video_durations_min.iter().map(|d| 1.0 / d).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, message: String| {
            Err(ConfigError::Invalid { field, message })
        };
        if self.n_servers == 0 {
            return bad("n_servers", "must be positive".into());
        }
        if self.servers_per_client == 0 || self.servers_per_client > self.n_servers {
            return bad(
                "servers_per_client",
                format!(
                    "{} must be in 1..={}",
                    self.servers_per_client, self.n_servers
                ),
            );
        }
        // A zero-client population is allowed: it is the vacuous experiment
        // (empty trace, zero traffic).
        if self.scenario == Scenario::Cost {
            if self.clients_per_machine == 0
                || self.clients_concurrent % self.clients_per_machine != 0
            {
                return bad(
                    "clients_per_machine",
                    format!(
                        "{} clients do not divide into machines of {}",
                        self.clients_concurrent, self.clients_per_machine
                    ),
                );
            }
        }
        if self.video_durations_min.is_empty()
            || self.video_durations_min.iter().any(|d| *d <= 0.0)
        {
            return bad("video_durations_min", "need positive durations".into());
        }
        if let Some(w) = &self.video_duration_weights {
            if w.len() != self.video_durations_min.len() {
                return bad(
                    "video_duration_weights",
                    "length differs from video_durations_min".into(),
                );
            }
            if w.iter().any(|x| *x <= 0.0) {
                return bad("video_duration_weights", "weights must be positive".into());
            }
        }
        if self.video_chunks == 0 {
            return bad("video_chunks", "must be positive".into());
        }
        if !(self.horizon_s > 0.0) {
            return bad("horizon_s", "must be positive".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions", "must be at least 1".into());
        }
        if !(self.epoch_s > 0.0) {
            return bad("epoch_s", "must be positive".into());
        }
        if !(self.playback_rate > 0.0) {
            return bad("playback_rate", "must be positive".into());
        }
        if let Some(t) = self.target_rate {
            if t < self.playback_rate {
                return bad(
                    "target_rate",
                    format!("{t} is below the playback rate {}", self.playback_rate),
                );
            }
        }
        if self.chunk_size_bytes == 0 {
            return bad("chunk_size_bytes", "must be positive".into());
        }
        if self.queue_packets == 0 || self.packets_per_chunk == 0 {
            return bad("queue_packets", "queue geometry must be positive".into());
        }
        if !(self.prop_delay_min_ms > 0.0 && self.prop_delay_max_ms >= self.prop_delay_min_ms)
        {
            return bad("prop_delay_min_ms", "invalid propagation range".into());
        }
        Ok(())
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

/// Parses the `key = value` config format. Unknown keys and malformed values
/// report the offending line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let fail = |message: String| ConfigError::Parse {
            line: line_no,
            message,
        };
        let parse_f64 =
            |v: &str| v.parse::<f64>().map_err(|e| fail(format!("{key}: {e}")));
        let parse_u32 =
            |v: &str| v.parse::<u32>().map_err(|e| fail(format!("{key}: {e}")));
        match key {
            "scenario" => {
                cfg.scenario = match value {
                    "performance" => Scenario::Performance,
                    "cost" => Scenario::Cost,
                    other => return Err(fail(format!("unknown scenario `{other}`"))),
                }
            }
            "scheduler" => {
                cfg.scheduler = parse_scheduler(value)
                    .ok_or_else(|| fail(format!("unknown scheduler `{value}`")))?
            }
            "selection" => {
                cfg.selection = match value {
                    "round-robin" => SelectionKind::RoundRobin,
                    "k-closest" => SelectionKind::KClosest,
                    "optimized" => SelectionKind::Optimized,
                    other => return Err(fail(format!("unknown selection `{other}`"))),
                }
            }
            "bandwidth_level" => {
                cfg.bandwidth_level = match value {
                    "low" => BandwidthLevel::Low,
                    "medium" => BandwidthLevel::Medium,
                    "high" => BandwidthLevel::High,
                    other => return Err(fail(format!("unknown bandwidth level `{other}`"))),
                }
            }
            "bandwidth_variation" => {
                cfg.bandwidth_variation = match value {
                    "smooth" => VariationMode::Smooth,
                    "abrupt" => VariationMode::Abrupt,
                    "fixed" => VariationMode::Fixed,
                    other => return Err(fail(format!("unknown variation `{other}`"))),
                }
            }
            "n_servers" => cfg.n_servers = parse_u32(value)?,
            "servers_per_client" => cfg.servers_per_client = parse_u32(value)?,
            "clients" => cfg.clients_concurrent = parse_u32(value)?,
            "clients_per_machine" => cfg.clients_per_machine = parse_u32(value)?,
            "video_durations_min" => {
                cfg.video_durations_min =
                    parse_list(value).map_err(|e| fail(format!("{key}: {e}")))?
            }
            "video_duration_weights" => {
                cfg.video_duration_weights =
                    Some(parse_list(value).map_err(|e| fail(format!("{key}: {e}")))?)
            }
            "video_chunks" => cfg.video_chunks = parse_u32(value)?,
            "horizon_s" => cfg.horizon_s = parse_f64(value)?,
            "repetitions" => cfg.repetitions = parse_u32(value)?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|e| fail(format!("{key}: {e}")))?
            }
            "epoch_s" => cfg.epoch_s = parse_f64(value)?,
            "playback_rate" => cfg.playback_rate = parse_f64(value)?,
            "target_rate" => cfg.target_rate = Some(parse_f64(value)?),
            "chunk_size_bytes" => cfg.chunk_size_bytes = parse_u32(value)?,
            "prebuffer_chunks" => cfg.prebuffer_chunks = parse_u32(value)?,
            "retry_limit" => cfg.retry_limit = parse_u32(value)?,
            "queue_packets" => cfg.queue_packets = parse_u32(value)?,
            "packets_per_chunk" => cfg.packets_per_chunk = parse_u32(value)?,
            "prop_delay_min_ms" => cfg.prop_delay_min_ms = parse_f64(value)?,
            "prop_delay_max_ms" => cfg.prop_delay_max_ms = parse_f64(value)?,
            other => {
                return Err(fail(format!("unknown key `{other}`")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_scheduler(value: &str) -> Option<SchedulerKind> {
    match value {
        "sunstar" => Some(SchedulerKind::SunStar),
        "min-rtt" => Some(SchedulerKind::MinRtt),
        "single-server" => Some(SchedulerKind::SingleServer),
        "aggressive" => Some(SchedulerKind::Aggressive),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.scenario, Scenario::Cost);
        assert_eq!(cfg.n_servers, 10);
        assert_eq!(cfg.repetitions, 10);
        assert_eq!(cfg.horizon_s, 14_400.0);
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "\
# cost sweep
scenario = cost
scheduler = min-rtt
servers_per_client = 3   # three paths
seed = 99
video_durations_min = 5, 10, 60
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.scheduler, SchedulerKind::MinRtt);
        assert_eq!(cfg.servers_per_client, 3);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.video_durations_min, vec![5.0, 10.0, 60.0]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config("bogus = 1").unwrap_err();
        assert_eq!(
            err,
            ConfigError::Parse {
                line: 1,
                message: "unknown key `bogus`".into()
            }
        );
    }

    #[test]
    fn bad_value_reports_line() {
        let err = parse_config("\nсед세\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn validation_rejects_k_above_n() {
        let err = parse_config("n_servers = 2\nservers_per_client = 3").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid {
                field: "servers_per_client",
                ..
            }
        ));
    }

    #[test]
    fn validation_rejects_target_below_playback() {
        let err = parse_config("playback_rate = 2\ntarget_rate = 1").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "target_rate", .. }));
    }

    #[test]
    fn duration_weights_bias_short() {
        let cfg = parse_config("video_durations_min = 5, 60").unwrap();
        let w = cfg.duration_weights();
        assert!((w[0] / (w[0] + w[1]) - 12.0 / 13.0).abs() < 1e-12);
    }
}
