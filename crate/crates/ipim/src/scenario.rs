//! Scenario files: the declarative description of a network, a workload,
//! and the analyses plus embedded expectations to run against the result.
//!
//! Scenarios are JSON with every duration and rate carried as a
//! unit-suffixed string (`"150us"`, `"10Mbps"`). See `docs/scenario-format.md`
//! for the full schema.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::BuildError;
use crate::path::AdversaryPolicy;
use crate::units::{Granularity, Rate, SimDuration};
use crate::wire::FieldClass;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Mandatory: runs never default to wall-clock entropy.
    pub seed: u64,
    pub horizon: SimDuration,
    pub network: NetworkSpec,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hosts: Vec<HostSpec>,
    #[serde(default)]
    pub routers: Vec<RouterSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub name: String,
    /// Fixed local-clock offset; drawn from the seed when absent.
    #[serde(default)]
    pub clock_offset: Option<SimDuration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub name: String,
    pub router_id: u32,
    pub as_number: u32,
    /// Long-lived evolution offset; drawn from the seed when absent.
    #[serde(default)]
    pub evolution_offset: Option<i16>,
    #[serde(default)]
    pub stamp_probability: f64,
    #[serde(default)]
    pub features: FeatureSpec,
    /// `"live"` (outbound backlog) or a fixed duration such as `"2ms"`.
    #[serde(default)]
    pub queue_delay: QueueDelaySpec,
    #[serde(default)]
    pub available_capacity: Option<Rate>,
    #[serde(default)]
    pub congestion_level: u8,
    #[serde(default)]
    pub load_shed_threshold: Option<SimDuration>,
    #[serde(default)]
    pub clock_offset: Option<SimDuration>,
    #[serde(default)]
    pub adversary: AdversaryPolicy,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    #[serde(default = "default_true")]
    pub stamping: bool,
    #[serde(default = "default_true")]
    pub evolution: bool,
    #[serde(default = "default_true")]
    pub accum: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            stamping: true,
            evolution: true,
            accum: true,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueueDelaySpec {
    #[default]
    Live,
    Fixed(SimDuration),
}

impl Serialize for QueueDelaySpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            QueueDelaySpec::Live => serializer.serialize_str("live"),
            QueueDelaySpec::Fixed(d) => d.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for QueueDelaySpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "live" {
            return Ok(QueueDelaySpec::Live);
        }
        s.parse()
            .map(QueueDelaySpec::Fixed)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub propagation: SimDuration,
    /// Reverse-direction propagation when asymmetric.
    #[serde(default)]
    pub propagation_ba: Option<SimDuration>,
    /// Transmission rate; absent means infinitely fast (no service time,
    /// no queueing).
    #[serde(default)]
    pub rate: Option<Rate>,
    /// Waiting-room limit in bytes; absent means unbounded.
    #[serde(default)]
    pub queue_capacity: Option<u64>,
    #[serde(default)]
    pub impairments: ImpairmentSpec,
    /// Deterministic per-packet interventions, applied in both directions.
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ImpairmentSpec {
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub duplicate: f64,
    #[serde(default)]
    pub reorder: Option<ReorderSpec>,
}

/// Held packets let successors pass: classic reordering.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderSpec {
    pub probability: f64,
    pub extra_delay: SimDuration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub flow: String,
    #[serde(default)]
    pub kind: ScriptPacketKind,
    pub seq: u32,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScriptPacketKind {
    #[default]
    Data,
    Ack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptAction {
    Drop,
    Delay(SimDuration),
    Duplicate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub src: String,
    pub dst: String,
    /// Ordered router names between the endpoints; may be empty when the
    /// hosts share a link.
    pub path: Vec<String>,
    #[serde(default)]
    pub changes: Vec<RouteChangeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteChangeSpec {
    pub at: SimDuration,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub flows: Vec<FlowSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PresenceFlag {
    HostId,
    Timing,
    Nonce,
    Integrity,
    Evolution,
    Accum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub name: String,
    pub src: String,
    pub dst: String,
    /// Simulated time of the first packet.
    pub start: SimDuration,
    pub count: u32,
    #[serde(default)]
    pub interval: Option<SimDuration>,
    /// Data packet size, bytes.
    pub size: u32,
    #[serde(default = "default_ack_size")]
    pub ack_size: u32,
    #[serde(default)]
    pub presence: Vec<PresenceFlag>,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_ttl")]
    pub initial_ttl: u8,
    #[serde(default)]
    pub hop_request: Option<HopRequestSpec>,
    #[serde(default)]
    pub integrity: Option<IntegritySpec>,
    #[serde(default)]
    pub ack: AckSpec,
    /// Loss-vs-reorder disambiguation window (excluding observations before
    /// an unexplained packet is called a loss candidate).
    #[serde(default)]
    pub nonce_window: Option<usize>,
    /// Explicit transmit nonces for the data direction.
    #[serde(default)]
    pub nonces: Option<Vec<u32>>,
    /// Explicit transmit nonces for the return direction.
    #[serde(default)]
    pub ack_nonces: Option<Vec<u32>>,
    #[serde(default)]
    pub rotation_period: Option<SimDuration>,
}

fn default_ack_size() -> u32 {
    64
}

fn default_ttl() -> u8 {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopRequestSpec {
    pub kind: HopKindSpec,
    pub strategy: StampStrategySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopKindSpec {
    Topology,
    Performance,
    /// Topology on even data packets, performance on odd.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StampStrategySpec {
    Probabilistic,
    Triggered { target_ttl: u8 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegritySpec {
    pub mode: IntegrityModeSpec,
    /// Required in the salted modes; must be absent in plain mode.
    #[serde(default)]
    pub salt: Option<String>,
    pub cover: CoverSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityModeSpec {
    Plain,
    SenderSalt,
    SharedSalt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverSpec {
    Fixed(Vec<FieldClass>),
    RoundRobin(Vec<FieldClass>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckSpec {
    /// One return packet per data packet, held for the given time.
    Hold(SimDuration),
    /// Delayed acknowledgment: flush every `every` packets or after
    /// `max_hold`, whichever first.
    Coalesce { max_hold: SimDuration, every: u32 },
    /// No return traffic.
    None,
}

impl Default for AckSpec {
    fn default() -> Self {
        AckSpec::Hold(SimDuration::ZERO)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub discrepancy: Option<DiscrepancySpec>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancySpec {
    #[serde(default = "default_ql_fraction")]
    pub ql_mismatch_fraction: f64,
    #[serde(default = "default_conditional_shift")]
    pub conditional_shift: SimDuration,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
}

impl Default for DiscrepancySpec {
    fn default() -> Self {
        DiscrepancySpec {
            ql_mismatch_fraction: default_ql_fraction(),
            conditional_shift: default_conditional_shift(),
            min_samples: default_min_samples(),
        }
    }
}

fn default_ql_fraction() -> f64 {
    0.25
}

fn default_conditional_shift() -> SimDuration {
    SimDuration::from_millis(5)
}

fn default_min_samples() -> usize {
    30
}

/// Assertions a scenario embeds about its own outcome. The runner exits
/// nonzero when any fails.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// The flow's first round-trip decomposition, microseconds.
    Timing {
        flow: String,
        feedback_us: u64,
        network_us: u64,
        host_us: u64,
    },
    /// The flow's final arrival report.
    Arrival {
        flow: String,
        #[serde(default)]
        arrived: Option<Vec<u32>>,
        #[serde(default)]
        lost_candidates: Option<Vec<u32>>,
        #[serde(default)]
        reordered: Option<Vec<(u32, u32)>>,
        #[serde(default)]
        acks_in_order: Option<bool>,
    },
    PathChanges {
        flow: String,
        count: usize,
    },
    Participation {
        flow: String,
        complete: bool,
    },
    /// Whether any integrity mismatch was observed for the flow.
    IntegrityDetected {
        flow: String,
        detected: bool,
    },
    /// Mutation localization outcome for the flow.
    Localize {
        flow: String,
        mutated: Vec<FieldClass>,
    },
    Topology {
        routers: usize,
        #[serde(default)]
        min_aliases: Option<usize>,
    },
    /// A queue-sum-versus-latency flag must (or must not) be raised.
    QlsumFlag {
        present: bool,
    },
    ConditionalBlame {
        suspect_as: u32,
        victim_as: u32,
        present: bool,
    },
    NoDiscrepancyFlags {},
}

/// Parse and semantically validate a scenario from JSON text. Parse errors
/// name the offending field path.
pub fn parse_scenario(text: &str) -> Result<Scenario, BuildError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(de)
        .map_err(|e| BuildError::schema(e.path().to_string(), e.inner().to_string()))?;
    validate(&scenario)?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, BuildError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BuildError::schema(path.display().to_string(), e.to_string()))?;
    parse_scenario(&text)
}

fn probability(value: f64, path: &str) -> Result<(), BuildError> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(BuildError::schema(
            path,
            format!("probability {value} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Cross-field validation beyond what the type system enforces: name
/// uniqueness, reference existence, probability ranges, per-flow coherence.
pub fn validate(s: &Scenario) -> Result<(), BuildError> {
    if s.horizon == SimDuration::ZERO {
        return Err(BuildError::schema("horizon", "horizon must be positive"));
    }

    let mut names = BTreeSet::new();
    for (i, host) in s.network.hosts.iter().enumerate() {
        if !names.insert(host.name.clone()) {
            return Err(BuildError::schema(
                format!("network.hosts[{i}].name"),
                format!("duplicate node name {:?}", host.name),
            ));
        }
    }
    let mut router_ids = BTreeSet::new();
    for (i, router) in s.network.routers.iter().enumerate() {
        if !names.insert(router.name.clone()) {
            return Err(BuildError::schema(
                format!("network.routers[{i}].name"),
                format!("duplicate node name {:?}", router.name),
            ));
        }
        if !router_ids.insert(router.router_id) {
            return Err(BuildError::schema(
                format!("network.routers[{i}].router_id"),
                format!("duplicate router id {}", router.router_id),
            ));
        }
        probability(
            router.stamp_probability,
            &format!("network.routers[{i}].stamp_probability"),
        )?;
        if let AdversaryPolicy::UnderreportOwnQl { scale } = &router.adversary {
            if !scale.is_finite() || *scale < 0.0 {
                return Err(BuildError::schema(
                    format!("network.routers[{i}].adversary.scale"),
                    "scale must be a nonnegative finite number",
                ));
            }
        }
    }

    let host_names: BTreeSet<&str> = s.network.hosts.iter().map(|h| h.name.as_str()).collect();
    let router_names: BTreeSet<&str> =
        s.network.routers.iter().map(|r| r.name.as_str()).collect();

    for (i, link) in s.network.links.iter().enumerate() {
        for (end, field) in [(&link.a, "a"), (&link.b, "b")] {
            if !names.contains(end.as_str()) {
                return Err(BuildError::dangling(
                    format!("network.links[{i}].{field}"),
                    end.clone(),
                ));
            }
        }
        if link.a == link.b {
            return Err(BuildError::schema(
                format!("network.links[{i}]"),
                "link endpoints must differ",
            ));
        }
        if link.propagation == SimDuration::ZERO {
            return Err(BuildError::schema(
                format!("network.links[{i}].propagation"),
                "propagation delay must be positive",
            ));
        }
        probability(
            link.impairments.loss,
            &format!("network.links[{i}].impairments.loss"),
        )?;
        probability(
            link.impairments.duplicate,
            &format!("network.links[{i}].impairments.duplicate"),
        )?;
        if let Some(reorder) = &link.impairments.reorder {
            probability(
                reorder.probability,
                &format!("network.links[{i}].impairments.reorder.probability"),
            )?;
        }
        for (j, entry) in link.script.iter().enumerate() {
            if !s.workload.flows.iter().any(|f| f.name == entry.flow) {
                return Err(BuildError::dangling(
                    format!("network.links[{i}].script[{j}].flow"),
                    entry.flow.clone(),
                ));
            }
        }
    }

    let mut route_keys = BTreeSet::new();
    for (i, route) in s.network.routes.iter().enumerate() {
        for (end, field) in [(&route.src, "src"), (&route.dst, "dst")] {
            if !names.contains(end.as_str()) {
                return Err(BuildError::dangling(
                    format!("network.routes[{i}].{field}"),
                    end.clone(),
                ));
            }
        }
        if !route_keys.insert((route.src.clone(), route.dst.clone())) {
            return Err(BuildError::schema(
                format!("network.routes[{i}]"),
                format!("duplicate route {} -> {}", route.src, route.dst),
            ));
        }
        for (j, hop) in route.path.iter().enumerate() {
            if !router_names.contains(hop.as_str()) {
                return Err(BuildError::dangling(
                    format!("network.routes[{i}].path[{j}]"),
                    hop.clone(),
                ));
            }
        }
        for (c, change) in route.changes.iter().enumerate() {
            for (j, hop) in change.path.iter().enumerate() {
                if !router_names.contains(hop.as_str()) {
                    return Err(BuildError::dangling(
                        format!("network.routes[{i}].changes[{c}].path[{j}]"),
                        hop.clone(),
                    ));
                }
            }
        }
    }

    let mut flow_names = BTreeSet::new();
    for (i, flow) in s.workload.flows.iter().enumerate() {
        if !flow_names.insert(flow.name.clone()) {
            return Err(BuildError::schema(
                format!("workload.flows[{i}].name"),
                format!("duplicate flow name {:?}", flow.name),
            ));
        }
        for (end, field) in [(&flow.src, "src"), (&flow.dst, "dst")] {
            if !host_names.contains(end.as_str()) {
                return Err(BuildError::dangling(
                    format!("workload.flows[{i}].{field}"),
                    end.clone(),
                ));
            }
        }
        if flow.count == 0 {
            return Err(BuildError::schema(
                format!("workload.flows[{i}].count"),
                "flow must send at least one packet",
            ));
        }
        for (size, field) in [(flow.size, "size"), (flow.ack_size, "ack_size")] {
            if !(1..=65_535).contains(&size) {
                return Err(BuildError::schema(
                    format!("workload.flows[{i}].{field}"),
                    format!("packet size {size} outside 1..=65535 bytes"),
                ));
            }
        }
        if flow.count > 1 && flow.interval.is_none() {
            return Err(BuildError::schema(
                format!("workload.flows[{i}].interval"),
                "multi-packet flows need an interval",
            ));
        }
        if let Some(integrity) = &flow.integrity {
            let salted = matches!(
                integrity.mode,
                IntegrityModeSpec::SenderSalt | IntegrityModeSpec::SharedSalt
            );
            match (&integrity.salt, salted) {
                (None, true) | (Some(_), false) => {
                    return Err(BuildError::schema(
                        format!("workload.flows[{i}].integrity.salt"),
                        "salted modes require a salt; plain mode forbids one",
                    ));
                }
                _ => {}
            }
            if !flow.presence.contains(&PresenceFlag::Integrity) {
                return Err(BuildError::schema(
                    format!("workload.flows[{i}].integrity"),
                    "integrity config requires INTEGRITY in the presence set",
                ));
            }
        } else if flow.presence.contains(&PresenceFlag::Integrity) {
            return Err(BuildError::schema(
                format!("workload.flows[{i}].presence"),
                "INTEGRITY presence requires an integrity config",
            ));
        }
        if let AckSpec::Coalesce { every, .. } = flow.ack {
            if every == 0 {
                return Err(BuildError::schema(
                    format!("workload.flows[{i}].ack.every"),
                    "coalesce count must be positive",
                ));
            }
        }
    }
    Ok(())
}
