//! Aggregated run reports: everything the analyses recover from one trace,
//! serializable as structured JSON or flattened to comma-separated rows.
//! Both emitters read the same aggregate, so their numeric content is
//! identical by construction (and checked in tests anyway).

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::endpoint::{compute_integrity, localize_mutation};
use crate::error::ArrivalError;
use crate::packet::{PacketKind, PacketView};
use crate::scenario::{Expectation, Scenario};
use crate::sim::{Trace, TraceEvent};
use crate::wire::{CoverSet, FieldClass, IntegrityMode};

use super::{
    arrival_analysis, build_topology_map, detect_path_change, discrepancy_check, evolution_series,
    latency_series, participation_summary, ChangePoint, DiscrepancyFlag, DiscrepancyParams,
    EvidenceKind, LatencySample, ParticipationSummary, Subject, TopologyMap,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSection {
    pub samples: usize,
    pub first: Option<LatencySample>,
    pub min_network_us: u64,
    pub median_network_us: u64,
    pub max_network_us: u64,
    pub rows: Vec<LatencySample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalSection {
    pub arrived: Vec<u32>,
    pub lost_candidates: Vec<u32>,
    pub ambiguous: Vec<u32>,
    pub reordered: Vec<(u32, u32)>,
    pub acks_in_order: bool,
    /// Present when reconstruction failed (tampering or state loss).
    pub inconsistent: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionSection {
    pub samples: usize,
    pub distinct_signatures: usize,
    pub stable: bool,
    pub change_points: Vec<ChangePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipationSection {
    pub samples: usize,
    pub complete: usize,
    pub incomplete: usize,
    pub all_complete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegritySection {
    pub data_verdicts: usize,
    pub data_mismatches: usize,
    pub ack_verdicts: usize,
    pub ack_mismatches: usize,
    pub echo_verdicts: usize,
    pub echo_mismatches: usize,
    /// Forward-direction mutation evidence: a data-packet or echo mismatch.
    pub detected: bool,
    pub mutated: Vec<FieldClass>,
    pub intact: Vec<FieldClass>,
    pub undetermined: Vec<FieldClass>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow: String,
    pub timing: Option<TimingSection>,
    pub arrival: Option<ArrivalSection>,
    pub evolution: Option<EvolutionSection>,
    pub participation: Option<ParticipationSection>,
    pub integrity: Option<IntegritySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancySection {
    pub flags: Vec<DiscrepancyFlag>,
    pub insufficient_data: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Option<String>,
    pub flows: Vec<FlowReport>,
    pub topology: TopologyMap,
    pub alias_count: usize,
    pub discrepancy: Option<DiscrepancySection>,
}

fn flow_names(trace: &Trace) -> Vec<String> {
    let mut names = Vec::new();
    for event in &trace.events {
        if let TraceEvent::Send { flow, .. } = event {
            if !names.contains(flow) {
                names.push(flow.clone());
            }
        }
    }
    names
}

/// Passive integrity verdicts for one flow, replicating the endpoint logic
/// from trace contents alone (plus the shared salt, which is configuration,
/// not wire data).
fn integrity_section(trace: &Trace, flow: &str, shared_salt: &[u8]) -> Option<IntegritySection> {
    let mut data_history: Vec<(CoverSet, bool)> = Vec::new();
    let mut ack_history: Vec<(CoverSet, bool)> = Vec::new();
    let mut echo_history: Vec<(CoverSet, bool)> = Vec::new();
    let mut sent_digests: VecDeque<(CoverSet, u64)> = VecDeque::new();
    let mut saw_tuple = false;

    for event in &trace.events {
        match event {
            TraceEvent::Send { flow: f, pkt, .. }
                if f == flow && pkt.kind == PacketKind::Data =>
            {
                let Some(integrity) = &pkt.shim.integrity else {
                    continue;
                };
                saw_tuple = true;
                if integrity.i_mode == IntegrityMode::SenderSalt {
                    let view = PacketView::of_packet(pkt);
                    let plain =
                        compute_integrity(&view, integrity.i_cover, IntegrityMode::Plain, &[])
                            .expect("plain digest takes no salt");
                    sent_digests.push_back((integrity.i_cover, plain));
                    if sent_digests.len() > 64 {
                        sent_digests.pop_front();
                    }
                }
            }
            TraceEvent::Recv { flow: f, pkt, .. } if f == flow => {
                let Some(integrity) = &pkt.shim.integrity else {
                    continue;
                };
                saw_tuple = true;
                let view = PacketView::of_packet(pkt);
                let verdict = match integrity.i_mode {
                    IntegrityMode::Plain => Some(
                        compute_integrity(&view, integrity.i_cover, IntegrityMode::Plain, &[])
                            .expect("plain digest takes no salt")
                            == integrity.i_hash,
                    ),
                    IntegrityMode::SharedSalt if !shared_salt.is_empty() => Some(
                        compute_integrity(
                            &view,
                            integrity.i_cover,
                            IntegrityMode::SharedSalt,
                            shared_salt,
                        )
                        .expect("salt nonempty")
                            == integrity.i_hash,
                    ),
                    _ => None,
                };
                if let Some(matched) = verdict {
                    match pkt.kind {
                        PacketKind::Data => data_history.push((integrity.i_cover, matched)),
                        PacketKind::Ack => ack_history.push((integrity.i_cover, matched)),
                    }
                }
                if pkt.kind == PacketKind::Ack
                    && integrity.i_mode == IntegrityMode::SenderSalt
                    && integrity.i_echo != 0
                    && !sent_digests.is_empty()
                {
                    let echoed = integrity.i_echo;
                    let matched_entry =
                        sent_digests.iter().rev().find(|(_, d)| *d == echoed).copied();
                    let (cover, matched) = match matched_entry {
                        Some((cover, _)) => (cover, true),
                        None => (sent_digests.back().unwrap().0, false),
                    };
                    echo_history.push((cover, matched));
                }
            }
            _ => {}
        }
    }

    if !saw_tuple {
        return None;
    }
    let mismatches = |h: &[(CoverSet, bool)]| h.iter().filter(|(_, ok)| !ok).count();
    let mut forward_history = data_history.clone();
    forward_history.extend(echo_history.iter().copied());
    let findings = localize_mutation(&forward_history);
    Some(IntegritySection {
        data_verdicts: data_history.len(),
        data_mismatches: mismatches(&data_history),
        ack_verdicts: ack_history.len(),
        ack_mismatches: mismatches(&ack_history),
        echo_verdicts: echo_history.len(),
        echo_mismatches: mismatches(&echo_history),
        detected: mismatches(&data_history) > 0 || mismatches(&echo_history) > 0,
        mutated: findings.mutated.into_iter().collect(),
        intact: findings.intact.into_iter().collect(),
        undetermined: findings.undetermined.into_iter().collect(),
    })
}

fn median_u64(values: &mut [u64]) -> u64 {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    values[values.len() / 2]
}

/// Build the full per-flow and network-wide report from a trace. The
/// scenario, when available, supplies shared salts, nonce windows, and
/// discrepancy thresholds; without it, defaults apply.
pub fn build_report(trace: &Trace, scenario: Option<&Scenario>) -> Report {
    let mut flows = Vec::new();
    for flow in flow_names(trace) {
        let spec = scenario.and_then(|s| s.workload.flows.iter().find(|f| f.name == flow));

        let timing = match latency_series(trace, &flow) {
            Ok(rows) => {
                let mut nets: Vec<u64> = rows.iter().map(|r| r.network_us).collect();
                Some(TimingSection {
                    samples: rows.len(),
                    first: rows.first().copied(),
                    min_network_us: nets.iter().copied().min().unwrap_or(0),
                    median_network_us: median_u64(&mut nets),
                    max_network_us: rows.iter().map(|r| r.network_us).max().unwrap_or(0),
                    rows,
                })
            }
            Err(_) => None,
        };

        let window = spec
            .and_then(|s| s.nonce_window)
            .unwrap_or(crate::endpoint::DEFAULT_NONCE_WINDOW);
        let arrival = match arrival_analysis(trace, &flow, window) {
            Ok(Some(report)) => Some(ArrivalSection {
                arrived: report.arrived,
                lost_candidates: report.lost_candidates,
                ambiguous: report.ambiguous,
                reordered: report.reordered,
                acks_in_order: report.acks_in_order,
                inconsistent: None,
            }),
            Ok(None) => None,
            Err(err @ ArrivalError::Inconsistent { .. }) => Some(ArrivalSection {
                arrived: Vec::new(),
                lost_candidates: Vec::new(),
                ambiguous: Vec::new(),
                reordered: Vec::new(),
                acks_in_order: true,
                inconsistent: Some(err.to_string()),
            }),
            Err(_) => None,
        };

        let evo = evolution_series(trace, &flow);
        let evolution = if evo.is_empty() {
            None
        } else {
            let distinct: BTreeSet<u16> = evo.iter().map(|(_, s)| *s).collect();
            Some(EvolutionSection {
                samples: evo.len(),
                distinct_signatures: distinct.len(),
                stable: distinct.len() == 1,
                change_points: detect_path_change(&evo),
            })
        };

        let part: ParticipationSummary = participation_summary(trace, &flow);
        let participation = if part.samples == 0 {
            None
        } else {
            Some(ParticipationSection {
                samples: part.samples,
                complete: part.complete,
                incomplete: part.incomplete,
                all_complete: part.all_complete(),
            })
        };

        let shared_salt: Vec<u8> = spec
            .and_then(|s| s.integrity.as_ref())
            .and_then(|i| i.salt.clone())
            .map(|s| s.into_bytes())
            .unwrap_or_default();
        let integrity = integrity_section(trace, &flow, &shared_salt);

        flows.push(FlowReport {
            flow,
            timing,
            arrival,
            evolution,
            participation,
            integrity,
        });
    }

    let topology = build_topology_map(trace);
    let alias_count = topology.alias_count();

    let params = scenario
        .and_then(|s| s.analysis.discrepancy.as_ref())
        .map(|d| DiscrepancyParams {
            ql_mismatch_fraction: d.ql_mismatch_fraction,
            conditional_shift_us: d.conditional_shift.micros(),
            min_samples: d.min_samples,
            floor_us: None,
        });
    let discrepancy = params.map(|p| match discrepancy_check(trace, &p) {
        Ok(r) => DiscrepancySection {
            flags: r.flagged,
            insufficient_data: false,
        },
        Err(_) => DiscrepancySection {
            flags: Vec::new(),
            insufficient_data: true,
        },
    });

    Report {
        scenario: scenario.map(|s| s.name.clone()),
        flows,
        topology,
        alias_count,
        discrepancy,
    }
}

fn flatten(prefix: &str, value: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&path, v, rows);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), v, rows);
            }
        }
        serde_json::Value::Null => {}
        serde_json::Value::Bool(b) => rows.push((prefix.to_string(), b.to_string())),
        serde_json::Value::Number(n) => rows.push((prefix.to_string(), n.to_string())),
        serde_json::Value::String(s) => rows.push((prefix.to_string(), s.clone())),
    }
}

/// Comma-separated rows carrying every scalar in the report, one `path,value`
/// pair per line. Numeric content is identical to the JSON form.
pub fn report_to_csv(report: &Report) -> String {
    let value = serde_json::to_value(report).expect("report serializes");
    let mut rows = Vec::new();
    flatten("", &value, &mut rows);
    let mut out = String::from("path,value\n");
    for (path, v) in rows {
        let quoted = if v.contains(',') || v.contains('"') {
            format!("\"{}\"", v.replace('"', "\"\""))
        } else {
            v
        };
        out.push_str(&path);
        out.push(',');
        out.push_str(&quoted);
        out.push('\n');
    }
    out
}

fn flow_report<'a>(report: &'a Report, flow: &str) -> Option<&'a FlowReport> {
    report.flows.iter().find(|f| f.flow == flow)
}

/// Evaluate a scenario's embedded expectations against the report. Returns
/// one human-readable line per failed expectation.
pub fn check_expectations(scenario: &Scenario, report: &Report) -> Vec<String> {
    let mut failures = Vec::new();
    for (i, expect) in scenario.analysis.expect.iter().enumerate() {
        let fail = |msg: String, failures: &mut Vec<String>| {
            failures.push(format!("expectation[{i}]: {msg}"));
        };
        match expect {
            Expectation::Timing {
                flow,
                feedback_us,
                network_us,
                host_us,
            } => match flow_report(report, flow).and_then(|f| f.timing.as_ref()) {
                Some(section) => match &section.first {
                    Some(first) => {
                        if (first.feedback_us, first.network_us, first.host_us)
                            != (*feedback_us, *network_us, *host_us)
                        {
                            fail(
                                format!(
                                    "flow {flow}: timing ({}, {}, {}) != expected ({feedback_us}, {network_us}, {host_us})",
                                    first.feedback_us, first.network_us, first.host_us
                                ),
                                &mut failures,
                            );
                        }
                    }
                    None => fail(format!("flow {flow}: no timing samples"), &mut failures),
                },
                None => fail(format!("flow {flow}: no timing section"), &mut failures),
            },
            Expectation::Arrival {
                flow,
                arrived,
                lost_candidates,
                reordered,
                acks_in_order,
            } => match flow_report(report, flow).and_then(|f| f.arrival.as_ref()) {
                Some(section) => {
                    if let Some(want) = arrived {
                        if &section.arrived != want {
                            fail(
                                format!(
                                    "flow {flow}: arrived {:?} != {:?}",
                                    section.arrived, want
                                ),
                                &mut failures,
                            );
                        }
                    }
                    if let Some(want) = lost_candidates {
                        if &section.lost_candidates != want {
                            fail(
                                format!(
                                    "flow {flow}: lost candidates {:?} != {:?}",
                                    section.lost_candidates, want
                                ),
                                &mut failures,
                            );
                        }
                    }
                    if let Some(want) = reordered {
                        if &section.reordered != want {
                            fail(
                                format!(
                                    "flow {flow}: reordered {:?} != {:?}",
                                    section.reordered, want
                                ),
                                &mut failures,
                            );
                        }
                    }
                    if let Some(want) = acks_in_order {
                        if section.acks_in_order != *want {
                            fail(
                                format!(
                                    "flow {flow}: acks_in_order {} != {want}",
                                    section.acks_in_order
                                ),
                                &mut failures,
                            );
                        }
                    }
                }
                None => fail(format!("flow {flow}: no arrival section"), &mut failures),
            },
            Expectation::PathChanges { flow, count } => {
                match flow_report(report, flow).and_then(|f| f.evolution.as_ref()) {
                    Some(section) => {
                        if section.change_points.len() != *count {
                            fail(
                                format!(
                                    "flow {flow}: {} change points != {count}",
                                    section.change_points.len()
                                ),
                                &mut failures,
                            );
                        }
                    }
                    None => fail(format!("flow {flow}: no evolution section"), &mut failures),
                }
            }
            Expectation::Participation { flow, complete } => {
                match flow_report(report, flow).and_then(|f| f.participation.as_ref()) {
                    Some(section) => {
                        if section.all_complete != *complete {
                            fail(
                                format!(
                                    "flow {flow}: all_complete {} != {complete}",
                                    section.all_complete
                                ),
                                &mut failures,
                            );
                        }
                    }
                    None => fail(
                        format!("flow {flow}: no participation section"),
                        &mut failures,
                    ),
                }
            }
            Expectation::IntegrityDetected { flow, detected } => {
                match flow_report(report, flow).and_then(|f| f.integrity.as_ref()) {
                    Some(section) => {
                        if section.detected != *detected {
                            fail(
                                format!(
                                    "flow {flow}: integrity detected {} != {detected}",
                                    section.detected
                                ),
                                &mut failures,
                            );
                        }
                    }
                    None => fail(format!("flow {flow}: no integrity section"), &mut failures),
                }
            }
            Expectation::Localize { flow, mutated } => {
                match flow_report(report, flow).and_then(|f| f.integrity.as_ref()) {
                    Some(section) => {
                        if &section.mutated != mutated {
                            fail(
                                format!(
                                    "flow {flow}: localized {:?} != {:?}",
                                    section.mutated, mutated
                                ),
                                &mut failures,
                            );
                        }
                    }
                    None => fail(format!("flow {flow}: no integrity section"), &mut failures),
                }
            }
            Expectation::Topology {
                routers,
                min_aliases,
            } => {
                if report.topology.routers.len() != *routers {
                    fail(
                        format!(
                            "topology has {} routers, expected {routers}",
                            report.topology.routers.len()
                        ),
                        &mut failures,
                    );
                }
                if let Some(min) = min_aliases {
                    if report.alias_count < *min {
                        fail(
                            format!("{} aliases < minimum {min}", report.alias_count),
                            &mut failures,
                        );
                    }
                }
            }
            Expectation::QlsumFlag { present } => {
                let found = report
                    .discrepancy
                    .as_ref()
                    .map(|d| {
                        d.flags
                            .iter()
                            .any(|f| f.evidence == EvidenceKind::QlsumVsRtt)
                    })
                    .unwrap_or(false);
                if found != *present {
                    fail(
                        format!("queue-sum flag present={found}, expected {present}"),
                        &mut failures,
                    );
                }
            }
            Expectation::ConditionalBlame {
                suspect_as,
                victim_as,
                present,
            } => {
                let found = report
                    .discrepancy
                    .as_ref()
                    .map(|d| {
                        d.flags.iter().any(|f| {
                            f.evidence == EvidenceKind::ConditionalBlame
                                && f.subject == Subject::As(*suspect_as)
                                && f.victim_as == Some(*victim_as)
                        })
                    })
                    .unwrap_or(false);
                if found != *present {
                    fail(
                        format!(
                            "conditional blame ({suspect_as} -> {victim_as}) present={found}, expected {present}"
                        ),
                        &mut failures,
                    );
                }
            }
            Expectation::NoDiscrepancyFlags {} => {
                let count = report
                    .discrepancy
                    .as_ref()
                    .map(|d| d.flags.len())
                    .unwrap_or(0);
                if count != 0 {
                    fail(
                        format!(
                            "{count} discrepancy flags raised: {:?}",
                            report.discrepancy.as_ref().map(|d| &d.flags)
                        ),
                        &mut failures,
                    );
                }
            }
        }
    }
    failures
}
