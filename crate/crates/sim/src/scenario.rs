//! Scenario files (TOML, conventionally `*.scenario`).
//!
//! ```toml
//! seed = 1
//! rounds = 100
//! target_batch = 512
//! microbatch = 16
//! topology = "star"            # or "partitioned"
//! latency = 0.05               # seconds
//! drop_prob = 0.0
//! retries = 3                  # resends after a drop
//! retry_timeout = 0.5          # seconds between attempts
//! failure_timeout = 1.0        # crash detection delay
//! allowlist = ["tok-a", "tok-b"]   # omit to accept every peer's token
//!
//! [task]         # name = quadratic | logreg | mlp, seed, samples, dim
//! [optimizer]    # algorithm, state_bits, peak_lr, warmup_fraction, end_lr, weight_decay
//! [codec]        # kind = lossless | compressed, q8_threshold, block_size
//! [aggregation]  # kind = weighted_mean | clipped_mean | trimmed_mean, clip_norm, trim_k
//! [coordinator]  # uplink, downlink (bits per second)
//!
//! [[peers]]      # id, token, speed (samples/s), uplink, downlink,
//!                # bandwidth_score, gradient_scale, rogue, start = true
//! [[churn]]      # peer, event = crash | leave | join,
//!                # and either time = seconds or round = n (when = start | aggregating)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use cotrain_core::codec::{CodecPolicy, ExchangeCodec, DEFAULT_BLOCK_SIZE, DEFAULT_Q8_THRESHOLD};
use cotrain_core::optim::ScheduleConfig;
use cotrain_core::optim::{Algorithm, OptimConfig, StateBits};
use cotrain_core::swarm::{AggregationPolicy, PeerId, Topology};
use cotrain_core::tasks::TaskSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub rounds: u64,
    pub target_batch: u64,
    pub microbatch: u64,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "default_latency")]
    pub latency: f64,
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_retry_timeout")]
    pub retry_timeout: f64,
    #[serde(default = "default_failure_timeout")]
    pub failure_timeout: f64,
    #[serde(default)]
    pub allowlist: Option<Vec<String>>,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default)]
    pub coordinator: LinkSection,
    pub peers: Vec<PeerSpec>,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
}

fn default_latency() -> f64 {
    0.05
}
fn default_retries() -> u32 {
    3
}
fn default_retry_timeout() -> f64 {
    0.5
}
fn default_failure_timeout() -> f64 {
    1.0
}
fn default_bandwidth() -> f64 {
    100e6
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub algorithm: Algorithm,
    pub state_bits: u8,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub end_lr: f64,
    pub weight_decay: f32,
    /// Schedule length; 0 means the number of rounds.
    pub total_steps: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Lamb,
            state_bits: 32,
            peak_lr: 2.5e-3,
            warmup_fraction: 0.1,
            end_lr: 0.0,
            weight_decay: 0.0,
            total_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Lossless,
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub kind: CodecKind,
    pub q8_threshold: usize,
    pub block_size: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            kind: CodecKind::Lossless,
            q8_threshold: DEFAULT_Q8_THRESHOLD,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    #[serde(default = "default_bandwidth")]
    pub uplink: f64,
    #[serde(default = "default_bandwidth")]
    pub downlink: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            uplink: default_bandwidth(),
            downlink: default_bandwidth(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub id: u32,
    #[serde(default)]
    pub token: String,
    /// Samples per second.
    #[serde(default = "one")]
    pub speed: f64,
    #[serde(default = "default_bandwidth")]
    pub uplink: f64,
    #[serde(default = "default_bandwidth")]
    pub downlink: f64,
    /// Weight for partitioned aggregation; defaults to uplink in Mbit/s.
    #[serde(default)]
    pub bandwidth_score: Option<f64>,
    /// Multiplier applied to this peer's contributions (adversary model).
    #[serde(default = "one")]
    pub gradient_scale: f64,
    /// Sends contributions whether or not it was admitted.
    #[serde(default)]
    pub rogue: bool,
    /// Joins at time 0; otherwise only through a churn event.
    #[serde(default = "yes")]
    pub start: bool,
}

impl PeerSpec {
    pub fn score(&self) -> f64 {
        self.bandwidth_score.unwrap_or(self.uplink / 1e6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnKind {
    Crash,
    Leave,
    Join,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPoint {
    /// When the coordinator opens the round.
    #[default]
    Start,
    /// When the coordinator triggers aggregation for the round.
    Aggregating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub peer: u32,
    pub event: ChurnKind,
    #[serde(default)]
    pub time: Option<f64>,
    #[serde(default)]
    pub round: Option<u64>,
    #[serde(default)]
    pub when: RoundPoint,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.rounds == 0 || self.target_batch == 0 || self.microbatch == 0 {
            return bad("rounds, target_batch and microbatch must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return bad(format!("drop_prob {} must be in [0, 1)", self.drop_prob));
        }
        for (name, v) in [
            ("latency", self.latency),
            ("retry_timeout", self.retry_timeout),
            ("failure_timeout", self.failure_timeout),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(self.coordinator.uplink > 0.0 && self.coordinator.downlink > 0.0) {
            return bad("coordinator bandwidths must be positive".into());
        }
        if self.peers.is_empty() {
            return bad("no peers".into());
        }
        let mut ids = BTreeSet::new();
        for p in &self.peers {
            if !ids.insert(p.id) {
                return bad(format!("duplicate peer id {}", p.id));
            }
            if !(p.speed > 0.0 && p.speed.is_finite()) {
                return bad(format!("peer {} speed must be positive", p.id));
            }
            if !(p.uplink > 0.0 && p.downlink > 0.0) {
                return bad(format!("peer {} bandwidths must be positive", p.id));
            }
            if !(p.score() > 0.0 && p.score().is_finite()) {
                return bad(format!("peer {} bandwidth_score must be positive", p.id));
            }
            if !p.gradient_scale.is_finite() {
                return bad(format!("peer {} gradient_scale must be finite", p.id));
            }
        }
        let mut last_time = 0.0;
        for c in &self.churn {
            if !ids.contains(&c.peer) {
                return bad(format!("churn for unknown peer {}", c.peer));
            }
            match (c.time, c.round) {
                (Some(t), None) => {
                    if !(t >= last_time && t.is_finite()) {
                        return bad("timed churn events must be non-decreasing".into());
                    }
                    last_time = t;
                }
                (None, Some(r)) if r >= 1 && r <= self.rounds => {}
                (None, Some(r)) => return bad(format!("churn round {r} outside 1..={}", self.rounds)),
                _ => return bad("churn event needs exactly one of time or round".into()),
            }
        }
        self.optim_config()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.schedule()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.codec.kind == CodecKind::Compressed {
            self.exchange_codec_policy()
                .validate()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        self.task.build().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let p = self.aggregation;
        if p.clip_norm <= 0.0 || !p.clip_norm.is_finite() {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optimizer;
        let base = match o.algorithm {
            Algorithm::Adam => OptimConfig::adam(),
            Algorithm::Lamb => OptimConfig::lamb(),
        };
        OptimConfig {
            weight_decay: o.weight_decay,
            state_bits: StateBits::from_bits(o.state_bits).unwrap_or(StateBits::Full),
            ..base
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let o = &self.optimizer;
        ScheduleConfig {
            total_steps: if o.total_steps == 0 { self.rounds } else { o.total_steps },
            warmup_fraction: o.warmup_fraction,
            peak_lr: o.peak_lr,
            end_lr: o.end_lr,
        }
    }

    fn exchange_codec_policy(&self) -> CodecPolicy {
        CodecPolicy {
            q8_threshold: self.codec.q8_threshold,
            block_size: self.codec.block_size,
        }
    }

    pub fn exchange_codec(&self) -> ExchangeCodec {
        match self.codec.kind {
            CodecKind::Lossless => ExchangeCodec::Lossless,
            CodecKind::Compressed => ExchangeCodec::Compressed(self.exchange_codec_policy()),
        }
    }

    pub fn peer(&self, id: PeerId) -> Option<&PeerSpec> {
        self.peers.iter().find(|p| p.id == id.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
rounds = 5
target_batch = 32
microbatch = 8

[[peers]]
id = 0

[[peers]]
id = 1
speed = 2.0
"#;

    #[test]
    fn minimal_defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.peers.len(), 2);
        assert_eq!(s.topology, Topology::Star);
        assert_eq!(s.schedule().total_steps, 5);
        assert_eq!(s.exchange_codec(), ExchangeCodec::Lossless);
        assert_eq!(Scenario::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_values() {
        let cases = [("drop_prob = 1.0\n", "drop_prob"), ("rounds = 0\n", "rounds")];
        for (line, what) in cases {
            let text = MINIMAL.replacen(&format!("{} = ", what), "old_", 1);
            let text = format!("{line}{text}").replace(&format!("old_{}", if what == "rounds" { "5" } else { "" }), "");
            assert!(Scenario::parse(&text).is_err(), "{what}");
        }
        let dup = format!("{MINIMAL}\n[[peers]]\nid = 1\n");
        assert!(Scenario::parse(&dup).is_err());
        let churn = format!("{MINIMAL}\n[[churn]]\npeer = 9\nevent = \"crash\"\ntime = 1.0\n");
        assert!(Scenario::parse(&churn).is_err());
        let both = format!("{MINIMAL}\n[[churn]]\npeer = 1\nevent = \"crash\"\ntime = 1.0\nround = 2\n");
        assert!(Scenario::parse(&both).is_err());
        let unknown = format!("bogus = 1\n{MINIMAL}");
        assert!(Scenario::parse(&unknown).is_err());
    }
}
