//! Experiment scenarios, node inventory and link wiring.
//!
//! A scenario is a JSON [`ExperimentConfig`]. Four named presets ship with the
//! crate: `testbed-4`, `testbed-8`, `testbed-12` (the distributed testbed
//! layout) and `edge-2` (the two-server local edge layout). Base RTTs in the
//! presets are calibrated guesses, not measurements: 20 ms per testbed server,
//! 15 ms / 60 ms for the edge pair.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 4] = ["testbed-4", "testbed-8", "testbed-12", "edge-2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Testbed,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayMutatorConfig {
    pub min_delay_ms: i64,
    pub max_delay_ms: i64,
    pub sleep_lambda_s: f64,
    pub enabled: bool,
    /// 0-based index of the server whose gateway link is mutated.
    #[serde(default)]
    pub target_server: usize,
}

impl Default for DelayMutatorConfig {
    fn default() -> Self {
        DelayMutatorConfig {
            min_delay_ms: 200,
            max_delay_ms: 800,
            sleep_lambda_s: 5.0,
            enabled: false,
            target_server: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecorderConfig {
    pub num_pings: u32,
    pub ping_interval_s: f64,
    pub cpu_iterations: u32,
    pub cpu_interval_s: f64,
    pub ping_output_path: PathBuf,
    pub cpu_output_path: PathBuf,
}

impl Default for RecorderConfig {
    fn default() -> Self {
        RecorderConfig {
            num_pings: 1000,
            ping_interval_s: 1.0,
            cpu_iterations: 1500,
            cpu_interval_s: 2.0,
            ping_output_path: PathBuf::from("ping_results1000.csv"),
            cpu_output_path: PathBuf::from("cpu_results.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentConfig {
    pub video_id: String,
    pub segment_count: u32,
    pub segment_bytes: u64,
    pub segment_duration_s: f64,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig {
            video_id: "v1".to_string(),
            segment_count: 10,
            segment_bytes: 256 * 1024,
            segment_duration_s: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    /// Client-side download pacing; `None` means unlimited.
    pub rate_bytes_per_s: Option<f64>,
    /// Sessions that must complete before the run may end.
    pub repetitions: u32,
    /// Keep streaming (looping the video) until the recorders finish.
    pub loop_until_done: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            rate_bytes_per_s: Some(262_144.0),
            repetitions: 1,
            loop_until_done: true,
        }
    }
}

fn default_overhead() -> f64 {
    1.5
}

fn default_probe_timeout() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub server_count: usize,
    pub base_rtt_ms: Vec<f64>,
    pub rtt_noise_lambda_ms: f64,
    pub cpu_noise_lambda_pct: f64,
    pub delay_mutator: DelayMutatorConfig,
    pub recorder: RecorderConfig,
    pub seed: u64,
    pub clock_mode: ClockMode,
    /// Gateway coordination latency added per configured server to every
    /// gateway-side probe.
    #[serde(default = "default_overhead")]
    pub overhead_ms_per_server: f64,
    /// 0-based indices of servers that never answer.
    #[serde(default)]
    pub down_servers: Vec<usize>,
    #[serde(default)]
    pub content: ContentConfig,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default)]
    pub server_throttle_bytes_per_s: Option<f64>,
    /// Idle fraction of modeled CPU time that is busy regardless of requests.
    #[serde(default)]
    pub cpu_base_load: f64,
    #[serde(default = "default_probe_timeout")]
    pub probe_timeout_s: f64,
    #[serde(default)]
    pub probe_cache_ttl_s: Option<f64>,
}

impl ExperimentConfig {
    pub fn testbed(server_count: usize) -> Self {
        ExperimentConfig {
            profile: Profile::Testbed,
            server_count,
            base_rtt_ms: vec![20.0; server_count],
            rtt_noise_lambda_ms: 200.0,
            cpu_noise_lambda_pct: 30.0,
            delay_mutator: DelayMutatorConfig::default(),
            recorder: RecorderConfig::default(),
            seed: 7,
            clock_mode: ClockMode::Virtual,
            overhead_ms_per_server: default_overhead(),
            down_servers: Vec::new(),
            content: ContentConfig::default(),
            client: ClientConfig::default(),
            server_throttle_bytes_per_s: None,
            cpu_base_load: 0.0,
            probe_timeout_s: default_probe_timeout(),
            probe_cache_ttl_s: None,
        }
    }

    pub fn edge() -> Self {
        ExperimentConfig {
            profile: Profile::Edge,
            base_rtt_ms: vec![15.0, 60.0],
            delay_mutator: DelayMutatorConfig {
                enabled: true,
                target_server: 1,
                ..DelayMutatorConfig::default()
            },
            ..ExperimentConfig::testbed(2)
        }
    }

    /// Shrinks the recorders to desk-scale run lengths.
    pub fn quick(mut self) -> Self {
        self.recorder.num_pings = 100;
        self.recorder.cpu_iterations = 100;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn coordination_overhead_ms(&self) -> f64 {
        self.overhead_ms_per_server * self.server_count as f64
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "testbed-4" => Some(ExperimentConfig::testbed(4)),
        "testbed-8" => Some(ExperimentConfig::testbed(8)),
        "testbed-12" => Some(ExperimentConfig::testbed(12)),
        "edge-2" => Some(ExperimentConfig::edge()),
        _ => None,
    }
}

/// A loaded scenario plus the exact bytes it came from.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub config: ExperimentConfig,
    pub source: String,
}

/// Resolves a preset name or reads a scenario file.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(config) = preset(spec) {
        return Ok(Scenario {
            name: spec.to_string(),
            source: config.to_json(),
            config,
        });
    }
    let path = Path::new(spec);
    let source = std::fs::read_to_string(path)?;
    let config = ExperimentConfig::from_json(&source)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok(Scenario {
        name,
        config,
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    ServerCountZero,
    BaseRttCount,
    BaseRttNegative,
    NoiseLambdaNegative,
    DelayBoundNegative,
    DelayBoundsOrder,
    SleepLambdaNonPositive,
    MutatorTargetOutOfRange,
    CountZero,
    IntervalNonPositive,
    DownServerOutOfRange,
    OverheadNegative,
    RateNonPositive,
    ContentInvalid,
    ProbeTimeoutNonPositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

fn bad_f64(x: f64) -> bool {
    !x.is_finite() || x < 0.0
}

fn non_positive(x: f64) -> bool {
    !x.is_finite() || x <= 0.0
}

/// Lists every invariant the config breaks. Empty means valid.
pub fn validate_config(config: &ExperimentConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, message: String| out.push(Violation { code, message });

    if config.server_count == 0 {
        push(ViolationCode::ServerCountZero, "server_count must be >= 1".into());
    }
    if config.base_rtt_ms.len() != config.server_count {
        push(
            ViolationCode::BaseRttCount,
            format!(
                "base_rtt_ms has {} entries, server_count is {}",
                config.base_rtt_ms.len(),
                config.server_count
            ),
        );
    }
    for (i, rtt) in config.base_rtt_ms.iter().enumerate() {
        if bad_f64(*rtt) {
            push(
                ViolationCode::BaseRttNegative,
                format!("base_rtt_ms[{i}] = {rtt} must be finite and >= 0"),
            );
        }
    }
    for (field, value) in [
        ("rtt_noise_lambda_ms", config.rtt_noise_lambda_ms),
        ("cpu_noise_lambda_pct", config.cpu_noise_lambda_pct),
    ] {
        if bad_f64(value) {
            push(
                ViolationCode::NoiseLambdaNegative,
                format!("{field} = {value} must be finite and >= 0"),
            );
        }
    }

    let m = &config.delay_mutator;
    if m.min_delay_ms < 0 {
        push(
            ViolationCode::DelayBoundNegative,
            format!("min_delay_ms = {} must be >= 0", m.min_delay_ms),
        );
    }
    if m.min_delay_ms > m.max_delay_ms {
        push(
            ViolationCode::DelayBoundsOrder,
            format!(
                "min_delay_ms ({}) must not exceed max_delay_ms ({})",
                m.min_delay_ms, m.max_delay_ms
            ),
        );
    }
    if non_positive(m.sleep_lambda_s) {
        push(
            ViolationCode::SleepLambdaNonPositive,
            format!("sleep_lambda_s = {} must be > 0", m.sleep_lambda_s),
        );
    }
    if m.enabled && m.target_server >= config.server_count {
        push(
            ViolationCode::MutatorTargetOutOfRange,
            format!("mutator target_server {} out of range", m.target_server),
        );
    }

    let r = &config.recorder;
    for (field, value) in [("num_pings", r.num_pings), ("cpu_iterations", r.cpu_iterations)] {
        if value == 0 {
            push(ViolationCode::CountZero, format!("{field} must be >= 1"));
        }
    }
    for (field, value) in [
        ("ping_interval_s", r.ping_interval_s),
        ("cpu_interval_s", r.cpu_interval_s),
    ] {
        if non_positive(value) {
            push(
                ViolationCode::IntervalNonPositive,
                format!("{field} = {value} must be > 0"),
            );
        }
    }

    for &down in &config.down_servers {
        if down >= config.server_count {
            push(
                ViolationCode::DownServerOutOfRange,
                format!("down server index {down} out of range"),
            );
        }
    }
    if bad_f64(config.overhead_ms_per_server) {
        push(
            ViolationCode::OverheadNegative,
            "overhead_ms_per_server must be finite and >= 0".into(),
        );
    }
    for (field, rate) in [
        ("client.rate_bytes_per_s", config.client.rate_bytes_per_s),
        ("server_throttle_bytes_per_s", config.server_throttle_bytes_per_s),
    ] {
        if let Some(rate) = rate {
            if non_positive(rate) {
                push(
                    ViolationCode::RateNonPositive,
                    format!("{field} = {rate} must be > 0"),
                );
            }
        }
    }
    let c = &config.content;
    if c.video_id.is_empty()
        || c.video_id.contains(['/', '?', '#'])
        || c.segment_bytes == 0
        || non_positive(c.segment_duration_s)
    {
        push(
            ViolationCode::ContentInvalid,
            "content needs a non-empty path-safe video_id, segment_bytes > 0 and segment_duration_s > 0"
                .into(),
        );
    }
    if non_positive(config.probe_timeout_s) {
        push(
            ViolationCode::ProbeTimeoutNonPositive,
            "probe_timeout_s must be > 0".into(),
        );
    }
    if !(0.0..=1.0).contains(&config.cpu_base_load) {
        push(
            ViolationCode::ContentInvalid,
            "cpu_base_load must lie in [0, 1]".into(),
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Gateway,
    Client,
    Server { index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub name: String,
}

/// Node inventory and wiring. Node ids: gateway 0, client 1, servers 2..;
/// server `i` owns links `2i` (gateway side) and `2i + 1` (client side).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub gateway: NodeId,
    pub client: NodeId,
    pub servers: Vec<NodeId>,
    pub nodes: Vec<Node>,
    pub links: BTreeMap<(NodeId, NodeId), LinkId>,
}

pub fn server_name(index: usize) -> String {
    format!("s{}", index + 1)
}

pub fn build_topology(config: &ExperimentConfig) -> Result<Topology> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        let msg = violations
            .iter()
            .map(|v| v.message.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::InvalidConfig(msg));
    }
    let gateway = NodeId(0);
    let client = NodeId(1);
    let mut nodes = vec![
        Node {
            id: gateway,
            role: Role::Gateway,
            name: "gateway".into(),
        },
        Node {
            id: client,
            role: Role::Client,
            name: "client".into(),
        },
    ];
    let mut servers = Vec::with_capacity(config.server_count);
    let mut links = BTreeMap::new();
    for index in 0..config.server_count {
        let id = NodeId(2 + index as u32);
        nodes.push(Node {
            id,
            role: Role::Server { index },
            name: server_name(index),
        });
        servers.push(id);
        links.insert((gateway, id), LinkId(2 * index as u32));
        links.insert((client, id), LinkId(2 * index as u32 + 1));
    }
    Ok(Topology {
        gateway,
        client,
        servers,
        nodes,
        links,
    })
}

impl Topology {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn name(&self, id: NodeId) -> &str {
        self.node(id).map(|n| n.name.as_str()).unwrap_or("?")
    }

    pub fn server_index(&self, id: NodeId) -> Option<usize> {
        self.servers.iter().position(|s| *s == id)
    }

    pub fn server_names(&self) -> Vec<String> {
        self.servers.iter().map(|s| self.name(*s).to_string()).collect()
    }

    /// Link between two nodes, in either order.
    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.links
            .get(&(a, b))
            .or_else(|| self.links.get(&(b, a)))
            .copied()
    }

    pub fn gateway_link(&self, server_index: usize) -> Option<LinkId> {
        let server = *self.servers.get(server_index)?;
        self.link_between(self.gateway, server)
    }

    pub fn client_link(&self, server_index: usize) -> Option<LinkId> {
        let server = *self.servers.get(server_index)?;
        self.link_between(self.client, server)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn counts_follow_wiring_rule(n in 1usize..64) {
            let config = ExperimentConfig::testbed(n);
            let topo = build_topology(&config).unwrap();
            prop_assert_eq!(topo.node_count(), n + 2);
            prop_assert_eq!(topo.link_count(), 2 * n);
            prop_assert_eq!(build_topology(&config).unwrap(), topo);
        }
    }
}
