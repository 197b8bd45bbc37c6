//! Consumer-side intelligence over traces: latency series, topology maps
//! with alias resolution, path-change detection, participation checks, and
//! honesty cross-checks.
//!
//! Everything here works from the trace alone, using only what a passive
//! observer at the relevant node would see: packet contents plus that node's
//! local clock. The endpoint state machines compute the same quantities
//! live; the two paths are compared in tests and must agree.

pub mod report;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::endpoint::{reconstruct_arrivals, ArrivalReport, Observation, OutstandingNonce};
use crate::error::{AnalysisError, ArrivalError};
use crate::packet::PacketKind;
use crate::sim::{Trace, TraceEvent};
use crate::units::Granularity;

pub use report::{build_report, check_expectations, report_to_csv, Report};

/// One recovered round-trip decomposition, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub t_us: u64,
    pub feedback_us: u64,
    pub host_us: u64,
    pub network_us: u64,
    /// Transport sequence of the data packet whose timestamp was echoed.
    pub echoed_seq: u32,
}

/// Rebuild the sender-side round-trip series for a flow from send/receive
/// events at the sender node. Mirrors the endpoint arithmetic exactly:
/// matching is by echoed timestamp against a bounded sent log, zero-valued
/// timestamps are never logged, and samples whose holding time exceeds the
/// feedback window (timestamp wrap) are discarded.
pub fn latency_series(trace: &Trace, flow: &str) -> Result<Vec<LatencySample>, AnalysisError> {
    let mut log: VecDeque<(u16, u32)> = VecDeque::new();
    let mut samples = Vec::new();
    let mut saw_timing = false;

    for event in &trace.events {
        match event {
            TraceEvent::Send { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Data =>
            {
                if let Some(timing) = &pkt.shim.timing {
                    saw_timing = true;
                    if timing.t_now != 0 {
                        log.push_back((timing.t_now, pkt.transport_seq));
                        if log.len() > 1024 {
                            log.pop_front();
                        }
                    }
                }
            }
            TraceEvent::Recv {
                flow: f,
                pkt,
                t_us,
                local_us,
                ..
            } if f == flow && pkt.kind == PacketKind::Ack => {
                let Some(timing) = &pkt.shim.timing else {
                    continue;
                };
                saw_timing = true;
                if timing.t_echo == 0 {
                    continue;
                }
                let Some(&(_, echoed_seq)) =
                    log.iter().rev().find(|(t_now, _)| *t_now == timing.t_echo)
                else {
                    continue;
                };
                let granularity = timing.granularity;
                let arrival = granularity.reduce(crate::units::SimTime(*local_us));
                let feedback = Granularity::wrapping_delta(arrival, timing.t_echo);
                if timing.t_delta > feedback {
                    continue;
                }
                let unit = granularity.unit_micros();
                samples.push(LatencySample {
                    t_us: *t_us,
                    feedback_us: feedback as u64 * unit,
                    host_us: timing.t_delta as u64 * unit,
                    network_us: (feedback - timing.t_delta) as u64 * unit,
                    echoed_seq,
                });
            }
            _ => {}
        }
    }
    if !saw_timing {
        return Err(AnalysisError::Empty(flow.to_string()));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RouterEntry {
    pub as_number: u32,
    pub addresses: BTreeSet<IpAddr>,
    pub stamped_ttls: BTreeSet<u8>,
    pub observations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsPathHop {
    pub stamped_ttl: u8,
    pub as_number: u32,
    /// Fraction of stamps at this position agreeing with the majority.
    pub confidence: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowAsPath {
    pub flow: String,
    /// Hops ordered source-to-destination (descending stamped TTL).
    pub hops: Vec<AsPathHop>,
}

/// Alias conflict: one interface address claimed by two router ids. Never
/// silently merged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AliasConflict {
    pub address: IpAddr,
    pub router_ids: (u32, u32),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TopologyMap {
    pub routers: BTreeMap<u32, RouterEntry>,
    pub conflicts: Vec<AliasConflict>,
    pub as_paths: Vec<FlowAsPath>,
}

impl TopologyMap {
    pub fn alias_count(&self) -> usize {
        self.routers.values().map(|r| r.addresses.len()).sum()
    }
}

/// Aggregate every topology stamp observed at a receiving endpoint into a
/// router map: alias sets are the addresses sharing a router id, and
/// per-flow hop sequences are ordered by descending stamped TTL.
pub fn build_topology_map(trace: &Trace) -> TopologyMap {
    let mut map = TopologyMap::default();
    let mut address_owner: BTreeMap<IpAddr, u32> = BTreeMap::new();
    // flow -> stamped_ttl -> as_number -> votes
    let mut votes: BTreeMap<String, BTreeMap<u8, BTreeMap<u32, usize>>> = BTreeMap::new();

    for event in &trace.events {
        let TraceEvent::Recv { flow, pkt, .. } = event else {
            continue;
        };
        if pkt.kind != PacketKind::Data {
            continue;
        }
        let Some(stamp) = &pkt.shim.hop_stamp else {
            continue;
        };
        if stamp.is_empty() {
            continue;
        }
        let crate::wire::HopStampBody::Topology(topo) = &stamp.body else {
            continue;
        };
        let entry = map.routers.entry(topo.router_id).or_default();
        entry.as_number = topo.as_number;
        entry.observations += 1;
        entry.stamped_ttls.insert(stamp.stamped_ttl);
        for addr in [topo.ip_arrive, topo.ip_depart] {
            entry.addresses.insert(addr);
            match address_owner.get(&addr) {
                Some(&owner) if owner != topo.router_id => {
                    map.conflicts.push(AliasConflict {
                        address: addr,
                        router_ids: (owner, topo.router_id),
                    });
                }
                _ => {
                    address_owner.insert(addr, topo.router_id);
                }
            }
        }
        *votes
            .entry(flow.clone())
            .or_default()
            .entry(stamp.stamped_ttl)
            .or_default()
            .entry(topo.as_number)
            .or_default() += 1;
    }

    for (flow, by_ttl) in votes {
        let mut hops = Vec::new();
        for (&ttl, by_as) in by_ttl.iter().rev() {
            let total: usize = by_as.values().sum();
            let (&winner, &count) = by_as.iter().max_by_key(|(_, &c)| c).unwrap();
            hops.push(AsPathHop {
                stamped_ttl: ttl,
                as_number: winner,
                confidence: count as f64 / total as f64,
                samples: total,
            });
        }
        map.as_paths.push(FlowAsPath { flow, hops });
    }
    map
}

/// Evolution signature series for a flow: the sender's random start comes
/// from its own outgoing packets, the echo from returning ones.
pub fn evolution_series(trace: &Trace, flow: &str) -> Vec<(u64, u16)> {
    let mut e_init = None;
    let mut series = Vec::new();
    for event in &trace.events {
        match event {
            TraceEvent::Send { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Data =>
            {
                if let Some(ev) = &pkt.shim.evolution {
                    e_init.get_or_insert(ev.e_cur);
                }
            }
            TraceEvent::Recv {
                flow: f, pkt, t_us, ..
            } if f == flow && pkt.kind == PacketKind::Ack => {
                if let (Some(ev), Some(init)) = (&pkt.shim.evolution, e_init) {
                    if ev.e_echo != 0 {
                        series.push((*t_us, ev.e_echo.wrapping_sub(init)));
                    }
                }
            }
            _ => {}
        }
    }
    series
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub t_us: u64,
    pub from: u16,
    pub to: u16,
}

/// Exact-match change points on the modular path signature. The signature is
/// deterministic per path, so any difference from the previous stable value
/// is a change; a constant series has none.
pub fn detect_path_change(series: &[(u64, u16)]) -> Vec<ChangePoint> {
    let mut changes = Vec::new();
    for pair in series.windows(2) {
        if pair[0].1 != pair[1].1 {
            changes.push(ChangePoint {
                t_us: pair[1].0,
                from: pair[0].1,
                to: pair[1].1,
            });
        }
    }
    changes
}

/// All participating hops contributed exactly when the echoed shadow-TTL
/// difference equals the one the sender initialized. Exact, not statistical.
pub fn verify_participation(initial_delta: u8, echoed_delta: u8) -> bool {
    initial_delta == echoed_delta
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ParticipationSummary {
    pub samples: usize,
    pub complete: usize,
    pub incomplete: usize,
    pub initial_delta: u8,
}

impl ParticipationSummary {
    pub fn all_complete(&self) -> bool {
        self.samples > 0 && self.incomplete == 0
    }
}

/// Participation verdicts for a flow, from the sender's initialized delta
/// (visible on its outgoing packets) and the destination's echoes.
pub fn participation_summary(trace: &Trace, flow: &str) -> ParticipationSummary {
    let mut summary = ParticipationSummary::default();
    let mut initial = None;
    for event in &trace.events {
        match event {
            TraceEvent::Send { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Data =>
            {
                if let Some(accum) = &pkt.shim.accum {
                    initial.get_or_insert(pkt.ttl.abs_diff(accum.ttl_prime));
                }
            }
            TraceEvent::Recv { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Ack =>
            {
                if let (Some(accum), Some(init)) = (&pkt.shim.accum, initial) {
                    if accum.echoed_delta != 0 {
                        summary.samples += 1;
                        summary.initial_delta = init;
                        if verify_participation(init, accum.echoed_delta) {
                            summary.complete += 1;
                        } else {
                            summary.incomplete += 1;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    summary
}

/// Arrival reconstruction replayed from the trace: outgoing nonces at the
/// sender against the sums its returning packets carry.
pub fn arrival_analysis(
    trace: &Trace,
    flow: &str,
    window: usize,
) -> Result<Option<ArrivalReport>, ArrivalError> {
    let mut outstanding = Vec::new();
    let mut observations = Vec::new();
    for event in &trace.events {
        match event {
            TraceEvent::Send { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Data =>
            {
                if let Some(nonce) = &pkt.shim.nonce {
                    outstanding.push(OutstandingNonce {
                        value: nonce.n_xmit,
                        eligible_from: observations.len(),
                    });
                }
            }
            TraceEvent::Recv { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Ack =>
            {
                if let Some(nonce) = &pkt.shim.nonce {
                    observations.push(Observation {
                        observer_nonce: nonce.n_xmit,
                        n_sum: nonce.n_sum,
                    });
                }
            }
            _ => {}
        }
    }
    if outstanding.is_empty() && observations.is_empty() {
        return Ok(None);
    }
    reconstruct_arrivals(&outstanding, &observations, 0, window).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    QlsumVsRtt,
    ConditionalBlame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Flow(String),
    As(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyFlag {
    pub subject: Subject,
    pub evidence: EvidenceKind,
    /// Mismatch ratio for queue-sum-versus-latency; median shift in
    /// microseconds for conditional blame.
    pub magnitude: f64,
    pub samples: usize,
    pub victim_as: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub flagged: Vec<DiscrepancyFlag>,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscrepancyParams {
    /// Median relative mismatch between reported queueing and
    /// latency-derived queueing above which a path is flagged.
    pub ql_mismatch_fraction: f64,
    /// Median shift (microseconds) of a victim's reported queueing between
    /// paths through and not through a suspect.
    pub conditional_shift_us: u64,
    pub min_samples: usize,
    /// Known propagation+service floor; the minimum observed network delay
    /// is the estimator when absent.
    pub floor_us: Option<u64>,
}

impl Default for DiscrepancyParams {
    fn default() -> Self {
        DiscrepancyParams {
            ql_mismatch_fraction: 0.25,
            conditional_shift_us: 5_000,
            min_samples: 30,
            floor_us: None,
        }
    }
}

fn median(sorted: &[u64]) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    sorted[sorted.len() / 2]
}

fn median_f64(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Cross-check router-reported queueing against end-to-end measurements and
/// look for conditionally inflated victims.
///
/// Queue-sum-versus-latency: for each data packet whose timestamp echo
/// produced a decomposition, compare reported queueing (forward accumulated
/// sum on the data packet plus reverse sum on the echoing packet) with the
/// latency-derived queueing (network delay minus the propagation+service
/// floor).
///
/// Conditional blame: attribute performance stamps to ASes via the
/// stamped-TTL-to-AS map learned from topology stamps on the same flow, then
/// compare each victim's reported queueing between flows that do and do not
/// transit each suspect.
pub fn discrepancy_check(
    trace: &Trace,
    params: &DiscrepancyParams,
) -> Result<DiscrepancyReport, AnalysisError> {
    let mut report = DiscrepancyReport::default();

    // Collect flows present in the trace, in first-seen order.
    let mut flows: Vec<String> = Vec::new();
    for event in &trace.events {
        if let TraceEvent::Send { flow, .. } = event {
            if !flows.contains(flow) {
                flows.push(flow.clone());
            }
        }
    }

    let mut total_paired = 0usize;

    // Queue sum versus round-trip latency, per flow.
    for flow in &flows {
        let series = match latency_series(trace, flow) {
            Ok(s) => s,
            Err(_) => continue,
        };
        if series.is_empty() {
            continue;
        }
        // Forward reported sum per data transport_seq (receiver side).
        let mut forward: BTreeMap<u32, u64> = BTreeMap::new();
        let mut reverse_by_time: Vec<(u64, u64)> = Vec::new();
        for event in &trace.events {
            if let TraceEvent::Recv {
                flow: f, pkt, t_us, ..
            } = event
            {
                if f != flow {
                    continue;
                }
                if let Some(accum) = &pkt.shim.accum {
                    match pkt.kind {
                        PacketKind::Data => {
                            forward.insert(pkt.transport_seq, accum.ql_sum_us as u64);
                        }
                        PacketKind::Ack => {
                            reverse_by_time.push((*t_us, accum.ql_sum_us as u64));
                        }
                    }
                }
            }
        }
        if forward.is_empty() {
            continue;
        }
        let floor = params
            .floor_us
            .unwrap_or_else(|| series.iter().map(|s| s.network_us).min().unwrap_or(0));
        let mut ratios = Vec::new();
        for sample in &series {
            let Some(&fwd) = forward.get(&sample.echoed_seq) else {
                continue;
            };
            let rev = reverse_by_time
                .iter()
                .find(|(t, _)| *t == sample.t_us)
                .map(|(_, q)| *q)
                .unwrap_or(0);
            let reported = fwd + rev;
            let derived = sample.network_us.saturating_sub(floor);
            let mismatch = reported.abs_diff(derived) as f64 / derived.max(reported).max(1) as f64;
            ratios.push(mismatch);
            total_paired += 1;
        }
        if ratios.len() >= params.min_samples {
            let med = median_f64(&mut ratios);
            if med > params.ql_mismatch_fraction {
                report.flagged.push(DiscrepancyFlag {
                    subject: Subject::Flow(flow.clone()),
                    evidence: EvidenceKind::QlsumVsRtt,
                    magnitude: med,
                    samples: ratios.len(),
                    victim_as: None,
                });
            }
        }
    }

    // Conditional blame across flows.
    // flow -> ttl -> as (majority from topology stamps)
    let topology = build_topology_map(trace);
    let mut flow_ttl_as: BTreeMap<&str, BTreeMap<u8, u32>> = BTreeMap::new();
    for path in &topology.as_paths {
        let map = flow_ttl_as.entry(path.flow.as_str()).or_default();
        for hop in &path.hops {
            map.insert(hop.stamped_ttl, hop.as_number);
        }
    }
    // (as, flow) -> reported queue samples from performance stamps
    let mut perf_samples: BTreeMap<(u32, &str), Vec<u64>> = BTreeMap::new();
    for event in &trace.events {
        let TraceEvent::Recv { flow, pkt, .. } = event else {
            continue;
        };
        if pkt.kind != PacketKind::Data {
            continue;
        }
        let Some(stamp) = &pkt.shim.hop_stamp else {
            continue;
        };
        if stamp.is_empty() {
            continue;
        }
        let crate::wire::HopStampBody::Performance(perf) = &stamp.body else {
            continue;
        };
        let Some(as_number) = flow_ttl_as
            .get(flow.as_str())
            .and_then(|m| m.get(&stamp.stamped_ttl))
        else {
            continue;
        };
        let key_flow = flows.iter().find(|f| *f == flow).map(|f| f.as_str());
        if let Some(kf) = key_flow {
            perf_samples
                .entry((*as_number, kf))
                .or_default()
                .push(perf.ql_us as u64);
            total_paired += 1;
        }
    }

    let transit: BTreeMap<&str, BTreeSet<u32>> = flow_ttl_as
        .iter()
        .map(|(flow, m)| (*flow, m.values().copied().collect()))
        .collect();
    let all_as: BTreeSet<u32> = transit.values().flatten().copied().collect();
    for &suspect in &all_as {
        for &victim in &all_as {
            if suspect == victim {
                continue;
            }
            let mut with: Vec<u64> = Vec::new();
            let mut without: Vec<u64> = Vec::new();
            for ((as_number, flow), samples) in &perf_samples {
                if *as_number != victim {
                    continue;
                }
                let through = transit
                    .get(flow)
                    .map(|set| set.contains(&suspect))
                    .unwrap_or(false);
                if through {
                    with.extend_from_slice(samples);
                } else {
                    without.extend_from_slice(samples);
                }
            }
            if with.len() < params.min_samples || without.len() < params.min_samples {
                continue;
            }
            with.sort_unstable();
            without.sort_unstable();
            let shift = median(&with).saturating_sub(median(&without));
            if shift > params.conditional_shift_us {
                report.flagged.push(DiscrepancyFlag {
                    subject: Subject::As(suspect),
                    evidence: EvidenceKind::ConditionalBlame,
                    magnitude: shift as f64,
                    samples: with.len() + without.len(),
                    victim_as: Some(victim),
                });
            }
        }
    }

    if total_paired < params.min_samples {
        return Err(AnalysisError::InsufficientData {
            needed: params.min_samples,
            got: total_paired,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn change_points_on_constant_series_are_empty() {
        let series: Vec<(u64, u16)> = (0..50).map(|i| (i * 100, 7_777)).collect();
        assert!(detect_path_change(&series).is_empty());
    }

    #[test]
    fn change_point_located_at_first_differing_sample() {
        let mut series: Vec<(u64, u16)> = (0..10).map(|i| (i * 100, 5)).collect();
        series.extend((10..20).map(|i| (i * 100, 9)));
        let changes = detect_path_change(&series);
        assert_eq!(changes.len(), 1);
        assert_eq!(changes[0].t_us, 1_000);
        assert_eq!((changes[0].from, changes[0].to), (5, 9));
    }

    #[test]
    fn participation_is_exact() {
        assert!(verify_participation(100, 100));
        assert!(!verify_participation(100, 99));
        assert!(!verify_participation(100, 101));
    }

    #[test]
    fn empty_trace_yields_empty_topology() {
        let map = build_topology_map(&Trace::default());
        assert!(map.routers.is_empty());
        assert!(map.as_paths.is_empty());
        assert_eq!(map.alias_count(), 0);
    }

    #[test]
    fn latency_series_on_unknown_flow_is_empty_error() {
        assert_eq!(
            latency_series(&Trace::default(), "nope"),
            Err(AnalysisError::Empty("nope".into()))
        );
    }
}
