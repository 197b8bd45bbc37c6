//! Deterministic discrete-event simulation: hosts running per-flow endpoint
//! state machines, routers running the path-element logic, links with FIFO
//! transmit queues, scripted and probabilistic impairments, and routes with
//! scheduled changes.
//!
//! Everything runs off one event queue ordered by (time, insertion sequence),
//! and every random decision comes from a per-entity stream derived from the
//! scenario seed, so a run is a pure function of (scenario, seed, horizon):
//! the same inputs produce a byte-identical trace.

pub mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::{IpAddr, Ipv4Addr};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::endpoint::{
    CoverSchedule, EndpointConfig, EndpointCounters, EndpointState, HopKindPlan, HopRequestPlan,
    IntegrityConfig, MeasurementEvent,
};
use crate::error::BuildError;
use crate::packet::{PacketId, PacketKind, SimPacket};
use crate::path::{HopContext, QueueMetric, RouterConfig, RouterState};
use crate::scenario::{
    AckSpec, CoverSpec, FlowSpec, HopKindSpec, ImpairmentSpec, IntegrityModeSpec, PresenceFlag,
    Scenario, ScriptAction, ScriptPacketKind, StampStrategySpec,
};
use crate::units::{Rate, SimDuration, SimTime};
use crate::wire::{IntegrityMode, StampStrategy};

pub use trace::{DropReason, Trace, TraceEvent};

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // few nodes exist; indirection buys nothing
pub enum NodeKind {
    Host,
    Router(RouterState),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub clock_offset: SimDuration,
    /// Canonical address used as packet source/destination for hosts.
    pub address: IpAddr,
}

impl Node {
    pub fn local(&self, t: SimTime) -> SimTime {
        t + self.clock_offset
    }
}

#[derive(Debug, Clone)]
struct ResolvedScript {
    flow: usize,
    kind: PacketKind,
    seq: u32,
    action: ScriptAction,
}

#[derive(Debug, Clone)]
pub struct DirectedLink {
    pub name: String,
    pub from: usize,
    pub to: usize,
    /// Interface addresses on each side of this direction.
    pub from_addr: IpAddr,
    pub to_addr: IpAddr,
    pub propagation: SimDuration,
    pub rate: Option<Rate>,
    pub queue_capacity: Option<u64>,
    impairments: ImpairmentSpec,
    script: Vec<ResolvedScript>,
    rng: ChaCha12Rng,
    /// Transmitter busy horizon; a packet entering now starts service at
    /// max(now, busy_until).
    busy_until: SimTime,
    /// (service start, bytes) of packets that entered but have not started
    /// transmission; prunes lazily as time advances.
    backlog: Vec<(SimTime, u64)>,
}

impl DirectedLink {
    /// Delay a packet entering now would wait before its bits move.
    fn backlog_delay(&self, now: SimTime) -> SimDuration {
        self.busy_until.saturating_sub(now)
    }

    fn queued_bytes(&mut self, now: SimTime) -> u64 {
        self.backlog.retain(|&(tx_start, _)| tx_start > now);
        self.backlog.iter().map(|&(_, bytes)| bytes).sum()
    }
}

/// (effective from, router indices) pairs, sorted by time.
type RouteEpochs = Vec<(SimTime, Vec<usize>)>;

#[derive(Debug, Clone)]
struct RouteTable {
    /// Sorted by time; index 0 is the initial path at time zero.
    entries: RouteEpochs,
}

impl RouteTable {
    fn resolve(&self, at: SimTime) -> &[usize] {
        let mut current: &[usize] = &self.entries[0].1;
        for (t, path) in &self.entries {
            if *t <= at {
                current = path;
            } else {
                break;
            }
        }
        current
    }
}

/// A fully materialized network: nodes, directed links with queues, and
/// time-dependent routes.
#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<Node>,
    node_index: BTreeMap<String, usize>,
    pub links: Vec<DirectedLink>,
    adjacency: BTreeMap<(usize, usize), usize>,
    routes: BTreeMap<(usize, usize), RouteTable>,
    pub seed: u64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable per-entity RNG stream derivation, independent of platform hashers.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn payload_tag(flow: usize, kind: PacketKind, seq: u32) -> u64 {
    let kind_code = match kind {
        PacketKind::Data => 0u8,
        PacketKind::Ack => 1,
    };
    let mut bytes = Vec::with_capacity(13);
    bytes.extend_from_slice(&(flow as u64).to_be_bytes());
    bytes.push(kind_code);
    bytes.extend_from_slice(&seq.to_be_bytes());
    fnv1a64(&bytes)
}

impl Network {
    /// Materialize the scenario's network section; every reference must
    /// resolve and every route hop pair must have a link.
    pub fn build(scenario: &Scenario) -> Result<Network, BuildError> {
        crate::scenario::validate(scenario)?;
        let spec = &scenario.network;
        let seed = scenario.seed;

        if spec.hosts.len() > 200 {
            return Err(BuildError::schema("network.hosts", "at most 200 hosts"));
        }
        if spec.links.len() > 250 {
            return Err(BuildError::schema("network.links", "at most 250 links"));
        }

        let mut nodes = Vec::new();
        let mut node_index = BTreeMap::new();
        for (i, host) in spec.hosts.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "node-clock", i as u64));
            let clock_offset = host
                .clock_offset
                .unwrap_or_else(|| SimDuration(rng.random_range(0..1_000_000)));
            node_index.insert(host.name.clone(), nodes.len());
            nodes.push(Node {
                name: host.name.clone(),
                kind: NodeKind::Host,
                clock_offset,
                address: IpAddr::V4(Ipv4Addr::new(10, 0, i as u8, 1)),
            });
        }
        for (i, router) in spec.routers.iter().enumerate() {
            let node_seed = derive_seed(seed, "router", i as u64);
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, "router-clock", i as u64));
            let clock_offset = router
                .clock_offset
                .unwrap_or_else(|| SimDuration(rng.random_range(0..1_000_000)));
            let cfg = RouterConfig {
                router_id: router.router_id,
                as_number: router.as_number,
                evolution_offset: router.evolution_offset,
                stamp_probability: router.stamp_probability,
                features: crate::path::RouterFeatures {
                    stamping: router.features.stamping,
                    evolution: router.features.evolution,
                    accum: router.features.accum,
                },
                queue_metric: match router.queue_delay {
                    crate::scenario::QueueDelaySpec::Live => QueueMetric::Live,
                    crate::scenario::QueueDelaySpec::Fixed(d) => QueueMetric::Fixed(d),
                },
                available_capacity: router.available_capacity,
                congestion_level: router.congestion_level,
                load_shed_threshold: router.load_shed_threshold,
                adversary: router.adversary.clone(),
                clock_offset,
            };
            node_index.insert(router.name.clone(), nodes.len());
            nodes.push(Node {
                name: router.name.clone(),
                kind: NodeKind::Router(RouterState::new(cfg, node_seed)),
                clock_offset,
                address: IpAddr::V4(Ipv4Addr::new(10, 100, i as u8, 1)),
            });
        }

        let flow_index: BTreeMap<&str, usize> = scenario
            .workload
            .flows
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i))
            .collect();

        let mut links = Vec::new();
        let mut adjacency = BTreeMap::new();
        for (k, link) in spec.links.iter().enumerate() {
            let a = node_index[&link.a];
            let b = node_index[&link.b];
            // Interface addresses: hosts use their canonical address, router
            // interfaces get one address per attached link.
            let addr_side = |node: usize, side: u8| -> IpAddr {
                match nodes[node].kind {
                    NodeKind::Host => nodes[node].address,
                    NodeKind::Router(_) => IpAddr::V4(Ipv4Addr::new(10, 200, k as u8, side)),
                }
            };
            let a_addr = addr_side(a, 1);
            let b_addr = addr_side(b, 2);
            let script: Vec<ResolvedScript> = link
                .script
                .iter()
                .map(|s| ResolvedScript {
                    flow: flow_index[s.flow.as_str()],
                    kind: match s.kind {
                        ScriptPacketKind::Data => PacketKind::Data,
                        ScriptPacketKind::Ack => PacketKind::Ack,
                    },
                    seq: s.seq,
                    action: s.action,
                })
                .collect();
            for (from, to, from_addr, to_addr, prop, dir) in [
                (
                    a,
                    b,
                    a_addr,
                    b_addr,
                    link.propagation,
                    0u64,
                ),
                (
                    b,
                    a,
                    b_addr,
                    a_addr,
                    link.propagation_ba.unwrap_or(link.propagation),
                    1,
                ),
            ] {
                let name = format!("{}->{}", nodes[from].name, nodes[to].name);
                adjacency.entry((from, to)).or_insert(links.len());
                links.push(DirectedLink {
                    name,
                    from,
                    to,
                    from_addr,
                    to_addr,
                    propagation: prop,
                    rate: link.rate,
                    queue_capacity: link.queue_capacity,
                    impairments: link.impairments,
                    script: script.clone(),
                    rng: ChaCha12Rng::seed_from_u64(derive_seed(
                        seed,
                        "link",
                        (k as u64) << 1 | dir,
                    )),
                    busy_until: SimTime::ZERO,
                    backlog: Vec::new(),
                });
            }
        }

        let mut routes = BTreeMap::new();
        for (i, route) in spec.routes.iter().enumerate() {
            let src = node_index[&route.src];
            let dst = node_index[&route.dst];
            let mut entries = Vec::new();
            let initial: Vec<usize> = route.path.iter().map(|r| node_index[r]).collect();
            entries.push((SimTime::ZERO, initial));
            for change in &route.changes {
                let path: Vec<usize> = change.path.iter().map(|r| node_index[r]).collect();
                entries.push((SimTime(change.at.micros()), path));
            }
            entries.sort_by_key(|(t, _)| *t);
            let table = RouteTable { entries };
            // Every hop pair in every epoch must be physically connected.
            for (e, (_, path)) in table.entries.iter().enumerate() {
                let full = full_path(src, dst, path);
                for pair in full.windows(2) {
                    if !adjacency.contains_key(&(pair[0], pair[1])) {
                        return Err(BuildError::schema(
                            format!("network.routes[{i}].changes[{e}]"),
                            format!(
                                "no link between {} and {}",
                                nodes[pair[0]].name, nodes[pair[1]].name
                            ),
                        ));
                    }
                }
            }
            routes.insert((src, dst), table);
        }

        Ok(Network {
            nodes,
            node_index,
            links,
            adjacency,
            routes,
            seed,
        })
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    /// Register a route change taking effect at `at`: packets launched at or
    /// after that instant follow the new path, packets already in flight
    /// finish on their old one.
    pub fn schedule_route_change(
        &mut self,
        at: SimTime,
        src: &str,
        dst: &str,
        path: &[&str],
    ) -> Result<(), BuildError> {
        let src_id = self
            .node_id(src)
            .ok_or_else(|| BuildError::dangling("route_change.src", src))?;
        let dst_id = self
            .node_id(dst)
            .ok_or_else(|| BuildError::dangling("route_change.dst", dst))?;
        let mut hops = Vec::new();
        for hop in path {
            hops.push(
                self.node_id(hop)
                    .ok_or_else(|| BuildError::dangling("route_change.path", *hop))?,
            );
        }
        let full = full_path(src_id, dst_id, &hops);
        for pair in full.windows(2) {
            if !self.adjacency.contains_key(&(pair[0], pair[1])) {
                return Err(BuildError::schema(
                    "route_change.path",
                    format!(
                        "no link between {} and {}",
                        self.nodes[pair[0]].name, self.nodes[pair[1]].name
                    ),
                ));
            }
        }
        let table = self
            .routes
            .entry((src_id, dst_id))
            .or_insert_with(|| RouteTable {
                entries: vec![(SimTime::ZERO, Vec::new())],
            });
        table.entries.push((at, hops));
        table.entries.sort_by_key(|(t, _)| *t);
        Ok(())
    }

    /// Node sequence a packet launched now from src to dst will traverse.
    fn resolve_path(&self, src: usize, dst: usize, at: SimTime) -> Option<Vec<usize>> {
        if let Some(table) = self.routes.get(&(src, dst)) {
            let full = full_path(src, dst, table.resolve(at));
            for pair in full.windows(2) {
                self.adjacency.get(&(pair[0], pair[1]))?;
            }
            return Some(full);
        }
        // No route entry: a shared link suffices.
        self.adjacency
            .get(&(src, dst))
            .map(|_| vec![src, dst])
    }
}

fn full_path(src: usize, dst: usize, routers: &[usize]) -> Vec<usize> {
    let mut path = Vec::with_capacity(routers.len() + 2);
    path.push(src);
    path.extend_from_slice(routers);
    path.push(dst);
    path
}

pub fn build_network(scenario: &Scenario) -> Result<Network, BuildError> {
    Network::build(scenario)
}

#[derive(Debug)]
enum Ev {
    DataSend { flow: usize, seq: u32 },
    AckFire { flow: usize, generation: u64 },
    Arrive { node: usize, pkt: Box<SimPacket> },
    RouteNote { route: usize, change: usize },
}

struct HeapEntry {
    time: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Per-packet ground truth, written only by the simulator.
#[derive(Debug, Clone)]
struct InFlight {
    path: Vec<usize>,
    links: Vec<usize>,
    /// Position in `path` of the node the packet is heading to (or just
    /// arrived at while being processed).
    hop: usize,
    send_time: SimTime,
    prop_service_us: u64,
    queue_us: u64,
    extra_us: u64,
}

/// Ground truth for one delivered packet, for validating measurements.
#[derive(Debug, Clone)]
pub struct DeliveryTruth {
    pub pkt_id: PacketId,
    pub flow: usize,
    pub kind: PacketKind,
    pub seq: u32,
    pub send_us: u64,
    pub recv_us: u64,
    /// Propagation plus transmission time along the actual path.
    pub prop_service_us: u64,
    /// FIFO queueing time along the actual path.
    pub queue_us: u64,
    /// Impairment hold time (reordering delays).
    pub extra_us: u64,
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub name: String,
    pub sender_events: Vec<(SimTime, MeasurementEvent)>,
    pub receiver_events: Vec<(SimTime, MeasurementEvent)>,
    pub sender_counters: EndpointCounters,
    pub receiver_counters: EndpointCounters,
    /// Sender-side |TTL - TTL'| drawn at flow start (participation truth).
    pub sender_ttl_delta: u8,
    pub receiver_ttl_delta: u8,
    /// Sender/receiver evolution seeds (signature truth).
    pub sender_evolution_init: u16,
    pub receiver_evolution_init: u16,
    /// Receiver-side integrity verdict history.
    pub receiver_integrity_history: Vec<(crate::wire::CoverSet, bool)>,
    pub sender_integrity_history: Vec<(crate::wire::CoverSet, bool)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub flows: Vec<FlowResult>,
    pub deliveries: Vec<DeliveryTruth>,
}

struct FlowRuntime {
    spec: FlowSpec,
    src: usize,
    dst: usize,
    src_port: u16,
    dst_port: u16,
    sender: EndpointState,
    receiver: EndpointState,
    ack_seq: u32,
    pending_acks: u32,
    ack_generation: u64,
    sender_events: Vec<(SimTime, MeasurementEvent)>,
    receiver_events: Vec<(SimTime, MeasurementEvent)>,
}

fn endpoint_config(flow: &FlowSpec, is_sender: bool) -> EndpointConfig {
    let has = |flag: PresenceFlag| flow.presence.contains(&flag);
    let integrity = flow.integrity.as_ref().map(|spec| {
        let mode = match spec.mode {
            IntegrityModeSpec::Plain => IntegrityMode::Plain,
            IntegrityModeSpec::SenderSalt => IntegrityMode::SenderSalt,
            IntegrityModeSpec::SharedSalt => IntegrityMode::SharedSalt,
        };
        let schedule = match &spec.cover {
            CoverSpec::Fixed(classes) => {
                CoverSchedule::Fixed(classes.iter().copied().collect())
            }
            CoverSpec::RoundRobin(classes) => {
                CoverSchedule::RoundRobin(classes.iter().copied().collect())
            }
        };
        IntegrityConfig {
            mode,
            salt: spec.salt.clone().unwrap_or_default().into_bytes(),
            schedule,
        }
    });
    let hop_request = if is_sender {
        flow.hop_request.as_ref().map(|spec| HopRequestPlan {
            kind: match spec.kind {
                HopKindSpec::Topology => HopKindPlan::Topology,
                HopKindSpec::Performance => HopKindPlan::Performance,
                HopKindSpec::Alternating => HopKindPlan::Alternating,
            },
            strategy: match spec.strategy {
                StampStrategySpec::Probabilistic => StampStrategy::Probabilistic,
                StampStrategySpec::Triggered { target_ttl } => {
                    StampStrategy::Triggered { target_ttl }
                }
            },
        })
    } else {
        None
    };
    EndpointConfig {
        granularity: flow.granularity,
        rotation_period: flow
            .rotation_period
            .unwrap_or(crate::endpoint::DEFAULT_ROTATION_PERIOD),
        nonce_window: flow.nonce_window.unwrap_or(crate::endpoint::DEFAULT_NONCE_WINDOW),
        send_host_id: has(PresenceFlag::HostId),
        send_timing: has(PresenceFlag::Timing),
        send_nonce: has(PresenceFlag::Nonce),
        send_evolution: has(PresenceFlag::Evolution),
        send_accum: has(PresenceFlag::Accum),
        integrity,
        hop_request,
        initial_ttl: flow.initial_ttl,
        nonce_schedule: if is_sender {
            flow.nonces.clone()
        } else {
            flow.ack_nonces.clone()
        },
    }
}

struct Simulation {
    net: Network,
    horizon: SimTime,
    flows: Vec<FlowRuntime>,
    heap: BinaryHeap<HeapEntry>,
    heap_seq: u64,
    next_packet_id: u64,
    in_flight: BTreeMap<PacketId, InFlight>,
    trace: Trace,
    deliveries: Vec<DeliveryTruth>,
    /// Monotone event-time assertion state (causality check).
    last_popped: SimTime,
}

impl Simulation {
    fn schedule(&mut self, time: SimTime, ev: Ev) {
        let seq = self.heap_seq;
        self.heap_seq += 1;
        self.heap.push(HeapEntry { time, seq, ev });
    }

    fn alloc_packet_id(&mut self) -> PacketId {
        self.next_packet_id += 1;
        PacketId(self.next_packet_id)
    }

    fn flow_name(&self, flow: usize) -> String {
        self.flows[flow].spec.name.clone()
    }

    fn run(mut self) -> RunOutput {
        // Route-change markers for the trace.
        let route_meta: Vec<((usize, usize), RouteEpochs)> = self
            .net
            .routes
            .iter()
            .map(|(k, v)| (*k, v.entries.clone()))
            .collect();
        for (ri, (_, entries)) in route_meta.iter().enumerate() {
            for (ci, (t, _)) in entries.iter().enumerate().skip(1) {
                self.schedule(*t, Ev::RouteNote { route: ri, change: ci });
            }
        }

        for flow in 0..self.flows.len() {
            let spec = &self.flows[flow].spec;
            let start = SimTime(spec.start.micros());
            let interval = spec.interval.unwrap_or(SimDuration::ZERO);
            for k in 0..spec.count {
                self.schedule(start + SimDuration(interval.micros() * k as u64), Ev::DataSend {
                    flow,
                    seq: k,
                });
            }
        }

        while let Some(entry) = self.heap.pop() {
            if entry.time > self.horizon {
                break;
            }
            debug_assert!(entry.time >= self.last_popped, "event queue went backwards");
            self.last_popped = entry.time;
            match entry.ev {
                Ev::DataSend { flow, seq } => self.handle_data_send(flow, seq, entry.time),
                Ev::AckFire { flow, generation } => {
                    if self.flows[flow].ack_generation == generation
                        && self.flows[flow].pending_acks > 0
                    {
                        self.flush_ack(flow, entry.time);
                    }
                }
                Ev::Arrive { node, pkt } => self.handle_arrive(node, *pkt, entry.time),
                Ev::RouteNote { route, change } => {
                    let ((src, dst), entries) = &route_meta[route];
                    let path = entries[change]
                        .1
                        .iter()
                        .map(|&n| self.net.nodes[n].name.clone())
                        .collect();
                    self.trace.push(TraceEvent::RouteChange {
                        t_us: entry.time.micros(),
                        src: self.net.nodes[*src].name.clone(),
                        dst: self.net.nodes[*dst].name.clone(),
                        path,
                    });
                }
            }
        }

        RunOutput {
            trace: self.trace,
            deliveries: self.deliveries,
            flows: self
                .flows
                .into_iter()
                .map(|f| FlowResult {
                    name: f.spec.name,
                    sender_events: f.sender_events,
                    receiver_events: f.receiver_events,
                    sender_counters: f.sender.counters.clone(),
                    receiver_counters: f.receiver.counters.clone(),
                    sender_ttl_delta: f.sender.ttl_delta_init(),
                    receiver_ttl_delta: f.receiver.ttl_delta_init(),
                    sender_evolution_init: f.sender.evolution_init(),
                    receiver_evolution_init: f.receiver.evolution_init(),
                    receiver_integrity_history: f.receiver.integrity_history().to_vec(),
                    sender_integrity_history: f.sender.integrity_history().to_vec(),
                })
                .collect(),
        }
    }

    fn handle_data_send(&mut self, flow: usize, seq: u32, now: SimTime) {
        let id = self.alloc_packet_id();
        let f = &mut self.flows[flow];
        let src_node = f.src;
        let dst_node = f.dst;
        let mut pkt = SimPacket {
            id,
            flow: flow as u32,
            kind: PacketKind::Data,
            seq,
            src: self.net.nodes[src_node].address,
            dst: self.net.nodes[dst_node].address,
            src_port: f.src_port,
            dst_port: f.dst_port,
            ttl: f.spec.initial_ttl,
            size: f.spec.size,
            transport_seq: 0,
            payload_tag: payload_tag(flow, PacketKind::Data, seq),
            shim: Default::default(),
        };
        let local = self.net.nodes[src_node].local(now);
        f.sender.on_send(&mut pkt, local);
        self.trace.push(TraceEvent::Send {
            t_us: now.micros(),
            local_us: local.micros(),
            node: self.net.nodes[src_node].name.clone(),
            flow: self.flow_name(flow),
            pkt: pkt.clone(),
        });
        self.launch(pkt, src_node, dst_node, now);
    }

    fn flush_ack(&mut self, flow: usize, now: SimTime) {
        let id = self.alloc_packet_id();
        let f = &mut self.flows[flow];
        f.pending_acks = 0;
        f.ack_generation += 1;
        let seq = f.ack_seq;
        f.ack_seq += 1;
        let src_node = f.dst; // acknowledgments originate at the flow's destination
        let dst_node = f.src;
        let mut pkt = SimPacket {
            id,
            flow: flow as u32,
            kind: PacketKind::Ack,
            seq,
            src: self.net.nodes[src_node].address,
            dst: self.net.nodes[dst_node].address,
            src_port: f.dst_port,
            dst_port: f.src_port,
            ttl: f.spec.initial_ttl,
            size: f.spec.ack_size,
            transport_seq: 0,
            payload_tag: payload_tag(flow, PacketKind::Ack, seq),
            shim: Default::default(),
        };
        let local = self.net.nodes[src_node].local(now);
        f.receiver.on_send(&mut pkt, local);
        self.trace.push(TraceEvent::Send {
            t_us: now.micros(),
            local_us: local.micros(),
            node: self.net.nodes[src_node].name.clone(),
            flow: self.flow_name(flow),
            pkt: pkt.clone(),
        });
        self.launch(pkt, src_node, dst_node, now);
    }

    fn launch(&mut self, pkt: SimPacket, src: usize, dst: usize, now: SimTime) {
        let path = self
            .net
            .resolve_path(src, dst, now)
            .expect("routes validated before the run started");
        let links: Vec<usize> = path
            .windows(2)
            .map(|w| self.net.adjacency[&(w[0], w[1])])
            .collect();
        let first_link = links[0];
        self.in_flight.insert(
            pkt.id,
            InFlight {
                path,
                links,
                hop: 1,
                send_time: now,
                prop_service_us: 0,
                queue_us: 0,
                extra_us: 0,
            },
        );
        self.enqueue_link(first_link, pkt, now, true);
    }

    fn enqueue_link(&mut self, link_idx: usize, pkt: SimPacket, now: SimTime, impair: bool) {
        let flow_name = self.flow_name(pkt.flow as usize);
        let mut extra = SimDuration::ZERO;
        let mut duplicate = false;

        if impair {
            let link = &mut self.net.links[link_idx];
            // Scripted interventions are checked first and never consume
            // random draws.
            let scripted = link
                .script
                .iter()
                .find(|s| {
                    s.flow == pkt.flow as usize && s.kind == pkt.kind && s.seq == pkt.seq
                })
                .map(|s| s.action);
            match scripted {
                Some(ScriptAction::Drop) => {
                    self.trace.push(TraceEvent::Drop {
                        t_us: now.micros(),
                        site: self.net.links[link_idx].name.clone(),
                        flow: flow_name,
                        pkt_id: pkt.id,
                        reason: DropReason::Scripted,
                    });
                    self.in_flight.remove(&pkt.id);
                    return;
                }
                Some(ScriptAction::Delay(d)) => {
                    extra += d;
                    self.trace.push(TraceEvent::Reorder {
                        t_us: now.micros(),
                        link: self.net.links[link_idx].name.clone(),
                        flow: flow_name.clone(),
                        pkt_id: pkt.id,
                        extra_us: d.micros(),
                    });
                }
                Some(ScriptAction::Duplicate) => duplicate = true,
                None => {}
            }

            let link = &mut self.net.links[link_idx];
            if link.impairments.loss > 0.0 && link.rng.random::<f64>() < link.impairments.loss {
                self.trace.push(TraceEvent::Drop {
                    t_us: now.micros(),
                    site: self.net.links[link_idx].name.clone(),
                    flow: flow_name,
                    pkt_id: pkt.id,
                    reason: DropReason::Loss,
                });
                self.in_flight.remove(&pkt.id);
                return;
            }
            let link = &mut self.net.links[link_idx];
            if link.impairments.duplicate > 0.0
                && link.rng.random::<f64>() < link.impairments.duplicate
            {
                duplicate = true;
            }
            let link = &mut self.net.links[link_idx];
            if let Some(reorder) = link.impairments.reorder {
                if reorder.probability > 0.0 && link.rng.random::<f64>() < reorder.probability {
                    extra += reorder.extra_delay;
                    self.trace.push(TraceEvent::Reorder {
                        t_us: now.micros(),
                        link: self.net.links[link_idx].name.clone(),
                        flow: flow_name.clone(),
                        pkt_id: pkt.id,
                        extra_us: reorder.extra_delay.micros(),
                    });
                }
            }
        }

        if duplicate {
            let dup_id = self.alloc_packet_id();
            let mut copy = pkt.clone();
            copy.id = dup_id;
            let truth = self.in_flight[&pkt.id].clone();
            self.in_flight.insert(dup_id, truth);
            self.trace.push(TraceEvent::Dup {
                t_us: now.micros(),
                link: self.net.links[link_idx].name.clone(),
                flow: flow_name.clone(),
                orig_id: pkt.id,
                dup_id,
            });
            self.enqueue_link(link_idx, copy, now, false);
        }

        // FIFO queue: service starts when the transmitter frees up.
        let link = &mut self.net.links[link_idx];
        let service = link
            .rate
            .map(|r| r.service_time(pkt.size))
            .unwrap_or(SimDuration::ZERO);
        if let Some(capacity) = link.queue_capacity {
            let queued = link.queued_bytes(now);
            if link.backlog_delay(now) > SimDuration::ZERO
                && queued + pkt.size as u64 > capacity
            {
                self.trace.push(TraceEvent::Drop {
                    t_us: now.micros(),
                    site: self.net.links[link_idx].name.clone(),
                    flow: flow_name,
                    pkt_id: pkt.id,
                    reason: DropReason::QueueFull,
                });
                self.in_flight.remove(&pkt.id);
                return;
            }
        }
        let tx_start = if link.busy_until > now {
            link.busy_until
        } else {
            now
        };
        let queue_delay = tx_start - now;
        link.busy_until = tx_start + service;
        // Waiting-room accounting only matters on bounded queues; unbounded
        // links would otherwise accumulate entries forever.
        if link.queue_capacity.is_some() && queue_delay > SimDuration::ZERO {
            link.backlog.push((tx_start, pkt.size as u64));
        }
        let arrival = tx_start + service + link.propagation + extra;
        let to_node = link.to;
        let prop_service = service + link.propagation;

        let truth = self.in_flight.get_mut(&pkt.id).expect("packet is in flight");
        truth.prop_service_us += prop_service.micros();
        truth.queue_us += queue_delay.micros();
        truth.extra_us += extra.micros();

        self.schedule(arrival, Ev::Arrive {
            node: to_node,
            pkt: Box::new(pkt),
        });
    }

    fn handle_arrive(&mut self, node: usize, mut pkt: SimPacket, now: SimTime) {
        let flow_idx = pkt.flow as usize;
        let flow_name = self.flow_name(flow_idx);
        let truth = self.in_flight.get_mut(&pkt.id).expect("arriving packet tracked");
        let hop = truth.hop;
        debug_assert_eq!(truth.path[hop], node);

        match &self.net.nodes[node].kind {
            NodeKind::Router(_) => {
                let arrived_link = truth.links[hop - 1];
                let next_link = truth.links[hop];
                truth.hop += 1;
                let ctx = HopContext {
                    now,
                    ip_arrive: self.net.links[arrived_link].to_addr,
                    ip_depart: self.net.links[next_link].from_addr,
                    live_queue_delay: self.net.links[next_link].backlog_delay(now),
                    outbound_rate: self.net.links[next_link].rate,
                };
                let outcome = match &mut self.net.nodes[node].kind {
                    NodeKind::Router(router) => router.forward(&mut pkt, &ctx),
                    NodeKind::Host => unreachable!(),
                };
                if let Some(stamp) = outcome.stamped {
                    self.trace.push(TraceEvent::Stamp {
                        t_us: now.micros(),
                        node: self.net.nodes[node].name.clone(),
                        flow: flow_name.clone(),
                        pkt_id: pkt.id,
                        stamp,
                    });
                }
                match outcome.action {
                    crate::path::ForwardAction::Drop => {
                        self.trace.push(TraceEvent::Drop {
                            t_us: now.micros(),
                            site: self.net.nodes[node].name.clone(),
                            flow: flow_name,
                            pkt_id: pkt.id,
                            reason: DropReason::TtlExpired,
                        });
                        self.in_flight.remove(&pkt.id);
                    }
                    crate::path::ForwardAction::Forward => {
                        self.enqueue_link(next_link, pkt, now, true);
                    }
                }
            }
            NodeKind::Host => {
                let truth = self.in_flight.remove(&pkt.id).expect("arriving packet tracked");
                let local = self.net.nodes[node].local(now);
                self.trace.push(TraceEvent::Recv {
                    t_us: now.micros(),
                    local_us: local.micros(),
                    node: self.net.nodes[node].name.clone(),
                    flow: flow_name,
                    pkt: pkt.clone(),
                });
                self.deliveries.push(DeliveryTruth {
                    pkt_id: pkt.id,
                    flow: flow_idx,
                    kind: pkt.kind,
                    seq: pkt.seq,
                    send_us: truth.send_time.micros(),
                    recv_us: now.micros(),
                    prop_service_us: truth.prop_service_us,
                    queue_us: truth.queue_us,
                    extra_us: truth.extra_us,
                });
                let f = &mut self.flows[flow_idx];
                match pkt.kind {
                    PacketKind::Data => {
                        let events = f.receiver.on_receive(&pkt, local);
                        f.receiver_events
                            .extend(events.into_iter().map(|e| (now, e)));
                        match f.spec.ack {
                            AckSpec::None => {}
                            AckSpec::Hold(hold) => {
                                f.pending_acks += 1;
                                let generation = f.ack_generation;
                                self.schedule(now + hold, Ev::AckFire { flow: flow_idx, generation });
                            }
                            AckSpec::Coalesce { max_hold, every } => {
                                f.pending_acks += 1;
                                if f.pending_acks >= every {
                                    self.flush_ack(flow_idx, now);
                                } else if f.pending_acks == 1 {
                                    let generation = f.ack_generation;
                                    self.schedule(
                                        now + max_hold,
                                        Ev::AckFire { flow: flow_idx, generation },
                                    );
                                }
                            }
                        }
                    }
                    PacketKind::Ack => {
                        let events = f.sender.on_receive(&pkt, local);
                        f.sender_events.extend(events.into_iter().map(|e| (now, e)));
                    }
                }
            }
        }
    }
}

/// Run a scenario to completion. Identical inputs produce a byte-identical
/// trace.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, BuildError> {
    let net = Network::build(scenario)?;
    run(net, scenario)
}

/// Run a scenario's workload over an already-built (and possibly further
/// configured) network. The network must come from the same scenario's
/// topology or reference the same node names.
pub fn run(net: Network, scenario: &Scenario) -> Result<RunOutput, BuildError> {
    let horizon = SimTime(scenario.horizon.micros());

    let mut flows = Vec::new();
    for (i, spec) in scenario.workload.flows.iter().enumerate() {
        let src = net
            .node_id(&spec.src)
            .ok_or_else(|| BuildError::dangling(format!("workload.flows[{i}].src"), &spec.src))?;
        let dst = net
            .node_id(&spec.dst)
            .ok_or_else(|| BuildError::dangling(format!("workload.flows[{i}].dst"), &spec.dst))?;
        if net.resolve_path(src, dst, SimTime::ZERO).is_none() {
            return Err(BuildError::dangling(
                format!("workload.flows[{i}]"),
                format!("route {} -> {}", spec.src, spec.dst),
            ));
        }
        if spec.ack != AckSpec::None && net.resolve_path(dst, src, SimTime::ZERO).is_none() {
            return Err(BuildError::dangling(
                format!("workload.flows[{i}]"),
                format!("return route {} -> {}", spec.dst, spec.src),
            ));
        }
        let sender_cfg = endpoint_config(spec, true);
        let receiver_cfg = endpoint_config(spec, false);
        let sender_local = net.nodes[src].local(SimTime::ZERO);
        let receiver_local = net.nodes[dst].local(SimTime::ZERO);
        flows.push(FlowRuntime {
            spec: spec.clone(),
            src,
            dst,
            src_port: 40_000 + i as u16,
            dst_port: 50_000 + i as u16,
            sender: EndpointState::new(
                sender_cfg,
                derive_seed(scenario.seed, "flow-sender", i as u64),
                sender_local,
            ),
            receiver: EndpointState::new(
                receiver_cfg,
                derive_seed(scenario.seed, "flow-receiver", i as u64),
                receiver_local,
            ),
            ack_seq: 0,
            pending_acks: 0,
            ack_generation: 0,
            sender_events: Vec::new(),
            receiver_events: Vec::new(),
        });
    }

    let sim = Simulation {
        net,
        horizon,
        flows,
        heap: BinaryHeap::new(),
        heap_seq: 0,
        next_packet_id: 0,
        in_flight: BTreeMap::new(),
        trace: Trace::default(),
        deliveries: Vec::new(),
        last_popped: SimTime::ZERO,
    };
    Ok(sim.run())
}
