//! Simulator-level behavior: determinism, closed-form delivery times,
//! impairments, route changes, conservation, and endpoint/analysis parity
//! over full runs.

mod common;

use common::{chain_scenario, plain_router};
use ipim::analysis;
use ipim::endpoint::MeasurementEvent;
use ipim::packet::PacketKind;
use ipim::scenario::parse_scenario;
use ipim::sim::{run_scenario, TraceEvent};

fn plain_routers(n: usize) -> Vec<serde_json::Value> {
    (0..n)
        .map(|i| plain_router(&format!("r{}", i + 1), i as u32 + 1, 65_000 + i as u32))
        .collect()
}

#[test]
fn identical_inputs_give_byte_identical_traces() {
    let scenario = chain_scenario(
        77,
        "50ms",
        plain_routers(3),
        serde_json::json!({
            "count": 40,
            "interval": "300us",
            "presence": ["TIMING", "NONCE", "EVOLUTION", "ACCUM"],
            "granularity": "micros100",
            "hop_request": {"kind": "alternating", "strategy": "probabilistic"}
        }),
    );
    let a = run_scenario(&scenario).unwrap().trace.to_jsonl();
    let b = run_scenario(&scenario).unwrap().trace.to_jsonl();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
fn different_seeds_diverge() {
    let mk = |seed| {
        chain_scenario(
            seed,
            "50ms",
            vec![serde_json::json!({
                "name": "r1", "router_id": 1, "as_number": 65001,
                "stamp_probability": 0.5
            })],
            serde_json::json!({
                "count": 40,
                "interval": "300us",
                "presence": ["NONCE"],
                "hop_request": {"kind": "topology", "strategy": "probabilistic"}
            }),
        )
    };
    let a = run_scenario(&mk(1)).unwrap().trace.to_jsonl();
    let b = run_scenario(&mk(2)).unwrap().trace.to_jsonl();
    assert_ne!(a, b);
}

#[test]
fn unloaded_path_delivery_matches_closed_form() {
    // Two fixed-rate hops: delivery = send + sum(service + propagation),
    // zero queueing when packets are spaced beyond the service time.
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "closed-form",
            "seed": 3,
            "horizon": "100ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [plain_router("r1", 1, 65001)],
                "links": [
                    {"a": "a", "b": "r1", "propagation": "120us", "rate": "12Mbps"},
                    {"a": "r1", "b": "b", "propagation": "250us", "rate": "8Mbps"}
                ],
                "routes": [
                    {"src": "a", "dst": "b", "path": ["r1"]},
                    {"src": "b", "dst": "a", "path": ["r1"]}
                ]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 10, "interval": "5ms", "size": 1500,
                "ack": "none"
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    // 1500 B: 1 ms at 12 Mbps, 1.5 ms at 8 Mbps.
    let per_hop = 120 + 1_000 + 250 + 1_500;
    let mut recv_count = 0;
    for event in &out.trace.events {
        if let TraceEvent::Recv { pkt, t_us, .. } = event {
            let send = pkt.seq as u64 * 5_000;
            assert_eq!(*t_us, send + per_hop, "packet {}", pkt.seq);
            recv_count += 1;
        }
    }
    assert_eq!(recv_count, 10);
    for d in &out.deliveries {
        assert_eq!(d.queue_us, 0);
        assert_eq!(d.prop_service_us, per_hop);
    }
}

#[test]
fn total_loss_drops_every_packet() {
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "all-loss",
            "seed": 4,
            "horizon": "50ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "links": [{
                    "a": "a", "b": "b", "propagation": "50us",
                    "impairments": {"loss": 1.0}
                }]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 25, "interval": "100us", "size": 500,
                "ack": "none"
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    let drops = out
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::Drop { .. }))
        .count();
    let recvs = out
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::Recv { .. }))
        .count();
    assert_eq!(drops, 25);
    assert_eq!(recvs, 0);
    assert!(out.trace.conservation_violations().is_empty());
}

#[test]
fn conservation_and_causality_under_impairments() {
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "impaired",
            "seed": 5,
            "horizon": "400ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [plain_router("r1", 1, 65001)],
                "links": [
                    {"a": "a", "b": "r1", "propagation": "80us",
                     "impairments": {"loss": 0.15, "duplicate": 0.1,
                                      "reorder": {"probability": 0.2, "extra_delay": "700us"}}},
                    {"a": "r1", "b": "b", "propagation": "80us", "rate": "20Mbps"}
                ],
                "routes": [
                    {"src": "a", "dst": "b", "path": ["r1"]},
                    {"src": "b", "dst": "a", "path": ["r1"]}
                ]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 120, "interval": "250us", "size": 900,
                "presence": ["NONCE"],
                "ack": {"hold": "0us"}
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    assert!(out.trace.is_time_ordered());
    assert!(
        out.trace.conservation_violations().is_empty(),
        "every send must end in exactly one recv or drop"
    );
    // Ground-truth consistency: delivery time decomposes exactly into the
    // per-hop propagation, service, queueing, and impairment holds.
    for d in &out.deliveries {
        assert_eq!(
            d.recv_us - d.send_us,
            d.prop_service_us + d.queue_us + d.extra_us,
            "packet truth must decompose"
        );
    }
    let dups = out
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::Dup { .. }))
        .count();
    let reorders = out
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::Reorder { .. }))
        .count();
    assert!(dups > 0, "duplication impairment never fired");
    assert!(reorders > 0, "reorder impairment never fired");
}

#[test]
fn reroute_to_identical_path_leaves_signature_unchanged() {
    let mut scenario = chain_scenario(
        6,
        "30ms",
        vec![
            serde_json::json!({"name": "r1", "router_id": 1, "as_number": 65001, "evolution_offset": 333}),
            serde_json::json!({"name": "r2", "router_id": 2, "as_number": 65002, "evolution_offset": 444}),
        ],
        serde_json::json!({
            "count": 60,
            "interval": "200us",
            "presence": ["EVOLUTION"]
        }),
    );
    scenario.network.routes[0].changes = vec![ipim::scenario::RouteChangeSpec {
        at: "6ms".parse().unwrap(),
        path: vec!["r1".into(), "r2".into()],
    }];
    let out = run_scenario(&scenario).unwrap();
    let series = analysis::evolution_series(&out.trace, "f1");
    assert!(!series.is_empty());
    assert!(analysis::detect_path_change(&series).is_empty());
}

#[test]
fn mid_path_swap_shifts_signature_by_offset_difference() {
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "swap",
            "seed": 7,
            "horizon": "40ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [
                    {"name": "r1", "router_id": 1, "as_number": 65001, "evolution_offset": 100},
                    {"name": "r_old", "router_id": 2, "as_number": 65002, "evolution_offset": 7000},
                    {"name": "r_new", "router_id": 3, "as_number": 65003, "evolution_offset": 9500}
                ],
                "links": [
                    {"a": "a", "b": "r1", "propagation": "20us"},
                    {"a": "r1", "b": "r_old", "propagation": "30us"},
                    {"a": "r1", "b": "r_new", "propagation": "30us"},
                    {"a": "r_old", "b": "b", "propagation": "20us"},
                    {"a": "r_new", "b": "b", "propagation": "20us"}
                ],
                "routes": [
                    {"src": "a", "dst": "b", "path": ["r1", "r_old"],
                     "changes": [{"at": "10ms", "path": ["r1", "r_new"]}]},
                    {"src": "b", "dst": "a", "path": ["r_old", "r1"]}
                ]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 80, "interval": "250us", "size": 800,
                "presence": ["EVOLUTION"],
                "ack": {"hold": "0us"}
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    let series = analysis::evolution_series(&out.trace, "f1");
    let changes = analysis::detect_path_change(&series);
    assert_eq!(changes.len(), 1);
    // New minus old signature is the offset difference, mod 2^16.
    assert_eq!(changes[0].to.wrapping_sub(changes[0].from), 9500 - 7000);
}

#[test]
fn in_flight_packets_finish_on_the_old_path() {
    // Reroute lands between a packet's launch and its delivery: the stamp
    // it carries must come from the old router.
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "in-flight",
            "seed": 8,
            "horizon": "40ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [
                    {"name": "r_old", "router_id": 2, "as_number": 65002, "stamp_probability": 1.0},
                    {"name": "r_new", "router_id": 3, "as_number": 65003, "stamp_probability": 1.0}
                ],
                "links": [
                    {"a": "a", "b": "r_old", "propagation": "2ms"},
                    {"a": "a", "b": "r_new", "propagation": "2ms"},
                    {"a": "r_old", "b": "b", "propagation": "2ms"},
                    {"a": "r_new", "b": "b", "propagation": "2ms"}
                ],
                "routes": [
                    {"src": "a", "dst": "b", "path": ["r_old"],
                     "changes": [{"at": "1ms", "path": ["r_new"]}]},
                    {"src": "b", "dst": "a", "path": ["r_new"]}
                ]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 2, "interval": "2ms", "size": 800,
                "presence": ["TIMING"],
                "granularity": "micros100",
                "hop_request": {"kind": "topology", "strategy": "probabilistic"},
                "ack": "none"
            }]}
        })
        .to_string(),
    )
    .unwrap();
    // Packet 0 launches at t=0 (old path), is in flight at the 1 ms reroute,
    // and must still be stamped by r_old. Packet 1 launches at 2 ms on the
    // new path.
    let out = run_scenario(&scenario).unwrap();
    let stamped: Vec<(u32, String)> = out
        .trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Stamp { node, pkt_id, .. } => Some((pkt_id.0 as u32, node.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(stamped.len(), 2);
    assert_eq!(stamped[0].1, "r_old");
    assert_eq!(stamped[1].1, "r_new");
}

#[test]
fn lossless_channel_confirms_every_nonce_in_order() {
    let scenario = chain_scenario(
        9,
        "300ms",
        plain_routers(2),
        serde_json::json!({
            "count": 300,
            "interval": "400us",
            "presence": ["NONCE"]
        }),
    );
    let out = run_scenario(&scenario).unwrap();
    let report = analysis::arrival_analysis(&out.trace, "f1", 3)
        .unwrap()
        .unwrap();
    assert_eq!(report.arrived.len(), 300, "all packets confirmed");
    assert!(report.lost_candidates.is_empty());
    assert!(report.ambiguous.is_empty());
    assert!(report.reordered.is_empty());
    assert!(report.acks_in_order);
    // Streaming endpoint agrees with the trace replay.
    let last_endpoint_report = out.flows[0]
        .sender_events
        .iter()
        .rev()
        .find_map(|(_, e)| match e {
            MeasurementEvent::Arrival(r) => Some(r.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(last_endpoint_report, report);
}

#[test]
fn passive_latency_series_equals_endpoint_measurements() {
    let scenario = chain_scenario(
        10,
        "200ms",
        plain_routers(3),
        serde_json::json!({
            "count": 100,
            "interval": "500us",
            "presence": ["TIMING"],
            "granularity": "micros100",
            "ack": {"hold": "200us"}
        }),
    );
    let out = run_scenario(&scenario).unwrap();
    let passive = analysis::latency_series(&out.trace, "f1").unwrap();
    let live: Vec<(u64, u64, u64)> = out.flows[0]
        .sender_events
        .iter()
        .filter_map(|(_, e)| match e {
            MeasurementEvent::Rtt { decomposition, .. } => Some((
                decomposition.feedback_us(),
                decomposition.host_us(),
                decomposition.network_us(),
            )),
            _ => None,
        })
        .collect();
    assert_eq!(passive.len(), live.len());
    assert!(!passive.is_empty());
    for (p, l) in passive.iter().zip(&live) {
        assert_eq!((p.feedback_us, p.host_us, p.network_us), *l);
    }
}

#[test]
fn passive_arrival_report_equals_endpoint_under_impairments() {
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "parity-impaired",
            "seed": 11,
            "horizon": "300ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "links": [{
                    "a": "a", "b": "b", "propagation": "100us",
                    "impairments": {"loss": 0.1, "reorder": {"probability": 0.15, "extra_delay": "450us"}}
                }]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 60, "interval": "300us", "size": 700,
                "presence": ["NONCE"],
                "nonce_window": 3,
                "ack": {"hold": "0us"}
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    let passive = analysis::arrival_analysis(&out.trace, "f1", 3)
        .unwrap()
        .unwrap();
    let live = out.flows[0]
        .sender_events
        .iter()
        .rev()
        .find_map(|(_, e)| match e {
            MeasurementEvent::Arrival(r) => Some(r.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(passive, live);
    let drops = out
        .trace
        .events
        .iter()
        .filter(
            |e| matches!(e, TraceEvent::Drop { flow, .. } if flow == "f1")
        )
        .count();
    assert!(drops > 0, "impairments should have dropped something");
}

#[test]
fn queueing_ground_truth_matches_backlog_arithmetic() {
    // Push packets into a 10 Mbps link faster than it drains: packet k
    // waits exactly k * (service - interval).
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "queueing",
            "seed": 12,
            "horizon": "200ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [plain_router("r1", 1, 65001)],
                "links": [
                    {"a": "a", "b": "r1", "propagation": "50us"},
                    {"a": "r1", "b": "b", "propagation": "50us", "rate": "12Mbps"}
                ],
                "routes": [
                    {"src": "a", "dst": "b", "path": ["r1"]},
                    {"src": "b", "dst": "a", "path": ["r1"]}
                ]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 20, "interval": "600us", "size": 1500,
                "ack": "none"
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run_scenario(&scenario).unwrap();
    // Service 1000 us, arrivals every 600 us: queue grows 400 us per packet.
    for d in &out.deliveries {
        assert_eq!(d.queue_us, 400 * d.seq as u64, "packet {}", d.seq);
    }
}

#[test]
fn missing_return_route_is_reported() {
    let scenario = parse_scenario(
        &serde_json::json!({
            "name": "no-return",
            "seed": 13,
            "horizon": "10ms",
            "network": {
                "hosts": [{"name": "a"}, {"name": "b"}],
                "routers": [plain_router("r1", 1, 65001)],
                "links": [
                    {"a": "a", "b": "r1", "propagation": "50us"},
                    {"a": "r1", "b": "b", "propagation": "50us"}
                ],
                "routes": [{"src": "a", "dst": "b", "path": ["r1"]}]
            },
            "workload": {"flows": [{
                "name": "f1", "src": "a", "dst": "b",
                "start": "0us", "count": 1, "size": 500,
                "ack": {"hold": "0us"}
            }]}
        })
        .to_string(),
    )
    .unwrap();
    let err = run_scenario(&scenario).unwrap_err();
    assert!(matches!(
        err,
        ipim::error::BuildError::DanglingReference { .. }
    ));
}

#[test]
fn delayed_ack_coalescing_measures_holding_time() {
    // Coalesce every 2 packets with a 5 ms cap: the receiver's holding time
    // reported in t_delta is the gap since the most recent arrival.
    let scenario = chain_scenario(
        14,
        "100ms",
        vec![],
        serde_json::json!({
            "count": 10,
            "interval": "1ms",
            "presence": ["TIMING"],
            "granularity": "micros100",
            "ack": {"coalesce": {"max_hold": "5ms", "every": 2}}
        }),
    );
    let out = run_scenario(&scenario).unwrap();
    let acks = out
        .trace
        .events
        .iter()
        .filter(|e| {
            matches!(e, TraceEvent::Send { pkt, .. } if pkt.kind == PacketKind::Ack)
        })
        .count();
    assert_eq!(acks, 5, "two data packets per acknowledgment");
    // Flush happens on the second packet's arrival: zero holding time after
    // the most recent arrival.
    let series = analysis::latency_series(&out.trace, "f1").unwrap();
    assert!(!series.is_empty());
    for s in &series {
        assert_eq!(s.host_us, 0);
    }
}

#[test]
fn delayed_ack_hold_timer_flushes_the_odd_packet_out() {
    // Eleven packets with flush-every-2: five count-triggered returns plus
    // one final return fired by the 5 ms hold timer.
    let scenario = chain_scenario(
        15,
        "100ms",
        vec![],
        serde_json::json!({
            "count": 11,
            "interval": "1ms",
            "presence": ["TIMING"],
            "granularity": "micros100",
            "ack": {"coalesce": {"max_hold": "5ms", "every": 2}}
        }),
    );
    let out = run_scenario(&scenario).unwrap();
    let ack_times: Vec<u64> = out
        .trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Send { pkt, t_us, .. } if pkt.kind == PacketKind::Ack => Some(*t_us),
            _ => None,
        })
        .collect();
    assert_eq!(ack_times.len(), 6);
    // The last data packet lands at 10 ms + 20 us; its return fires a full
    // hold later.
    assert_eq!(*ack_times.last().unwrap(), 10_020 + 5_000);
    // And the timer-fired return reports the full holding time.
    let series = analysis::latency_series(&out.trace, "f1").unwrap();
    assert_eq!(series.last().unwrap().host_us, 5_000);
}
