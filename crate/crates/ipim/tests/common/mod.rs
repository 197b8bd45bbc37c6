//! Shared test support: the exhaustive arrival-reconstruction oracle, a
//! randomized delivery-scenario generator, and scenario JSON builders.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ipim::endpoint::{ArrivalReport, Observation, OutstandingNonce};
use ipim::error::ArrivalError;
use ipim::scenario::{parse_scenario, Scenario};

/// Exhaustive brute-force reconstruction. Independent of the production
/// searcher: plain subset enumeration per observation, no splitting, no
/// memoization. The production path must agree with this on every window
/// small enough to enumerate.
pub fn oracle_reconstruct(
    outstanding: &[OutstandingNonce],
    observations: &[Observation],
    base_sum: u32,
    window: usize,
) -> Result<ArrivalReport, ArrivalError> {
    // Recover generation order and drop duplicate returns.
    let in_order = observations
        .windows(2)
        .all(|w| w[0].observer_nonce <= w[1].observer_nonce);
    let mut ordered = observations.to_vec();
    ordered.sort_by_key(|o| o.observer_nonce);
    let mut deduped: Vec<Observation> = Vec::new();
    for obs in ordered {
        if let Some(last) = deduped.last() {
            if last.observer_nonce == obs.observer_nonce {
                if last.n_sum != obs.n_sum {
                    return Err(ArrivalError::ConflictingObservation {
                        nonce: obs.observer_nonce,
                    });
                }
                continue;
            }
        }
        deduped.push(obs);
    }

    let mut deltas = Vec::new();
    let mut prev = base_sum;
    for obs in &deduped {
        deltas.push(obs.n_sum.wrapping_sub(prev));
        prev = obs.n_sum;
    }

    let n = outstanding.len();
    // Assignment: per packet, Some(observation index) or None.
    let mut level: Vec<Vec<Option<usize>>> = vec![vec![None; n]];
    for (obs_idx, &delta) in deltas.iter().enumerate() {
        let mut next = Vec::new();
        for assignment in &level {
            let candidates: Vec<usize> = (0..n)
                .filter(|&p| assignment[p].is_none() && outstanding[p].eligible_from <= obs_idx)
                .collect();
            assert!(candidates.len() <= 24, "oracle window too large");
            for mask in 0u64..(1u64 << candidates.len()) {
                let mut sum = 0u32;
                for (bit, &p) in candidates.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        sum = sum.wrapping_add(outstanding[p].value);
                    }
                }
                if sum == delta {
                    let mut branched = assignment.clone();
                    for (bit, &p) in candidates.iter().enumerate() {
                        if mask & (1 << bit) != 0 {
                            branched[p] = Some(obs_idx);
                        }
                    }
                    next.push(branched);
                }
            }
        }
        if next.is_empty() {
            return Err(ArrivalError::Inconsistent {
                observation: obs_idx,
                delta,
            });
        }
        level = next;
    }

    // Aggregate identically to the documented report semantics.
    let m = deltas.len();
    let mut arrived_idx = Vec::new();
    let mut lost = Vec::new();
    let mut ambiguous = Vec::new();
    for p in 0..n {
        let always_assigned = level.iter().all(|a| a[p].is_some());
        let never_assigned = level.iter().all(|a| a[p].is_none());
        if always_assigned {
            arrived_idx.push(p);
        } else if never_assigned {
            if m > 0 && m.saturating_sub(outstanding[p].eligible_from) >= window {
                lost.push(outstanding[p].value);
            } else {
                ambiguous.push(outstanding[p].value);
            }
        } else {
            ambiguous.push(outstanding[p].value);
        }
    }
    arrived_idx.sort_by_key(|&p| {
        let min_obs = level.iter().map(|a| a[p].unwrap()).min().unwrap();
        (min_obs, p)
    });
    let arrived: Vec<u32> = arrived_idx.iter().map(|&p| outstanding[p].value).collect();

    let mut reordered = Vec::new();
    for i in 0..arrived_idx.len() {
        for j in 0..arrived_idx.len() {
            if i == j {
                continue;
            }
            let (a, b) = (arrived_idx[i], arrived_idx[j]);
            if a < b {
                let inverted = level.iter().all(|asg| asg[a].unwrap() > asg[b].unwrap());
                if inverted {
                    reordered.push((outstanding[a].value, outstanding[b].value));
                }
            }
        }
    }
    reordered.sort();
    reordered.dedup();
    lost.sort_unstable();
    ambiguous.sort_unstable();

    Ok(ArrivalReport {
        arrived,
        lost_candidates: lost,
        ambiguous,
        reordered,
        acks_in_order: in_order,
    })
}

/// One randomized delivery world: sends, losses, reorderings, duplications,
/// and return observations, all interleaved.
#[derive(Debug, Clone)]
pub struct NonceWorld {
    pub outstanding: Vec<OutstandingNonce>,
    pub observations: Vec<Observation>,
    pub window: usize,
}

pub fn random_nonce_world(seed: u64) -> NonceWorld {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=12usize);
    let small_increments = rng.random_range(0..10) < 3;

    let mut values = Vec::with_capacity(n);
    let mut v: u32 = rng.random_range(1..65_536);
    for _ in 0..n {
        values.push(v);
        let inc = if small_increments {
            rng.random_range(1..32)
        } else {
            rng.random_range(1..65_536)
        };
        v = v.wrapping_add(inc);
    }

    let lost: Vec<bool> = (0..n).map(|_| rng.random_range(0..10) < 2).collect();

    let mut outstanding: Vec<OutstandingNonce> = Vec::with_capacity(n);
    let mut next_send = 0usize;
    let mut in_flight: Vec<usize> = Vec::new();
    let mut sum = 0u32;
    let mut observations = Vec::new();
    let mut ack_nonce: u32 = rng.random_range(1..10_000);
    let mut arrivals_since_obs = 0usize;

    while next_send < n || !in_flight.is_empty() {
        let can_send = next_send < n;
        let can_deliver = !in_flight.is_empty();
        let action = rng.random_range(0..10);
        if can_send && (action < 4 || !can_deliver) {
            outstanding.push(OutstandingNonce {
                value: values[next_send],
                eligible_from: observations.len(),
            });
            if !lost[next_send] {
                in_flight.push(next_send);
            }
            next_send += 1;
        } else if can_deliver && action < 9 {
            let pick = rng.random_range(0..in_flight.len());
            let pkt = in_flight[pick];
            sum = sum.wrapping_add(values[pkt]);
            arrivals_since_obs += 1;
            // A duplicated delivery stays in flight and may land again.
            if rng.random_range(0..20) != 0 {
                in_flight.remove(pick);
            }
            if rng.random_range(0..2) == 0 {
                observations.push(Observation {
                    observer_nonce: ack_nonce,
                    n_sum: sum,
                });
                ack_nonce = ack_nonce.wrapping_add(rng.random_range(1..5_000));
                arrivals_since_obs = 0;
            }
        } else if arrivals_since_obs > 0 || (!can_send && can_deliver) {
            observations.push(Observation {
                observer_nonce: ack_nonce,
                n_sum: sum,
            });
            ack_nonce = ack_nonce.wrapping_add(rng.random_range(1..5_000));
            arrivals_since_obs = 0;
        }
    }
    observations.push(Observation {
        observer_nonce: ack_nonce,
        n_sum: sum,
    });

    NonceWorld {
        outstanding,
        observations,
        window: rng.random_range(1..=4),
    }
}

/// Hosts a,b joined by a chain of routers, with per-router configuration
/// injected by the caller. Flow f1 goes a -> b with per-packet returns.
pub fn chain_scenario(
    seed: u64,
    horizon: &str,
    routers: Vec<serde_json::Value>,
    flow_extra: serde_json::Value,
) -> Scenario {
    let names: Vec<String> = routers
        .iter()
        .map(|r| r["name"].as_str().unwrap().to_string())
        .collect();
    let mut links = vec![serde_json::json!({
        "a": "a",
        "b": if names.is_empty() { "b" } else { names[0].as_str() },
        "propagation": "20us"
    })];
    for pair in names.windows(2) {
        links.push(serde_json::json!({
            "a": pair[0], "b": pair[1], "propagation": "30us"
        }));
    }
    if let Some(last) = names.last() {
        links.push(serde_json::json!({
            "a": last, "b": "b", "propagation": "20us"
        }));
    }
    let reverse: Vec<&String> = names.iter().rev().collect();
    let mut flow = serde_json::json!({
        "name": "f1",
        "src": "a",
        "dst": "b",
        "start": "0us",
        "count": 1,
        "size": 1200,
        "ack": {"hold": "0us"}
    });
    merge(&mut flow, flow_extra);
    let scenario = serde_json::json!({
        "name": "test-chain",
        "seed": seed,
        "horizon": horizon,
        "network": {
            "hosts": [{"name": "a"}, {"name": "b"}],
            "routers": routers,
            "links": links,
            "routes": [
                {"src": "a", "dst": "b", "path": names},
                {"src": "b", "dst": "a", "path": reverse}
            ]
        },
        "workload": {"flows": [flow]}
    });
    parse_scenario(&scenario.to_string()).expect("test scenario must validate")
}

pub fn merge(target: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(obj), serde_json::Value::Object(additions)) = (target.as_object_mut(), extra) {
        for (k, v) in additions {
            obj.insert(k, v);
        }
    }
}

pub fn plain_router(name: &str, id: u32, as_number: u32) -> serde_json::Value {
    serde_json::json!({
        "name": name,
        "router_id": id,
        "as_number": as_number
    })
}
