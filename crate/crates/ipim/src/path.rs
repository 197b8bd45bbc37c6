//! Router and middlebox packet handling: TTL, stamping, evolution and
//! accumulated-tuple updates, load shedding, and adversarial mutation.

use std::net::IpAddr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::endpoint::compute_integrity;
use crate::packet::{PacketView, SimPacket};
use crate::units::{Rate, SimDuration, SimTime};
use crate::wire::{
    coarse_rate_class, AccumTuple, HopStamp, HopStampBody, IntegrityMode, PerformanceStamp,
    StampStrategy, TopologyStamp,
};

/// Per-feature participation. A router with everything off forwards
/// byte-identical shims (TTL aside).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterFeatures {
    pub stamping: bool,
    pub evolution: bool,
    pub accum: bool,
}

impl Default for RouterFeatures {
    fn default() -> Self {
        RouterFeatures {
            stamping: true,
            evolution: true,
            accum: true,
        }
    }
}

/// Where the router's reported queue delay comes from: the live outbound
/// backlog, or a scenario-fixed value for controlled experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueueMetric {
    #[default]
    Live,
    Fixed(SimDuration),
}

/// Packet mutation policies for dishonest or interfering path elements.
/// `HashRecompute` is a rewrite that also forges the integrity hash, which
/// only produces a consistent packet in plain mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryPolicy {
    #[default]
    None,
    /// Report queue delay scaled down (hide bufferbloat).
    UnderreportOwnQl { scale: f64 },
    /// Inflate the accumulated queue sum and any performance stamp written
    /// by hops at the configured TTL positions (the adversary's knowledge of
    /// where the victim sits).
    InflateVictimQl {
        amount: SimDuration,
        victim_ttls: Vec<u8>,
    },
    NatRewrite(RewriteMap),
    /// Perturb the transmit nonce in flight.
    NonceTamper { delta: u32 },
    /// Rewrite, then recompute the integrity hash over the mutated packet.
    HashRecompute(RewriteMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RewriteMap {
    pub src: Option<IpAddr>,
    pub dst: Option<IpAddr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub router_id: u32,
    pub as_number: u32,
    /// Long-lived random evolution offset; drawn from the router's seed when
    /// absent.
    pub evolution_offset: Option<i16>,
    pub stamp_probability: f64,
    pub features: RouterFeatures,
    pub queue_metric: QueueMetric,
    /// Reported available capacity; the outbound link rate when absent.
    pub available_capacity: Option<Rate>,
    pub congestion_level: u8,
    /// Above this live queue delay the router skips all measurement work
    /// for the packet (best effort under load).
    pub load_shed_threshold: Option<SimDuration>,
    pub adversary: AdversaryPolicy,
    pub clock_offset: SimDuration,
}

/// What the surrounding hop looks like for one packet: which interfaces it
/// crosses and what the outbound link is doing right now. Supplied by the
/// simulator; ground-truth tables stay out of reach.
#[derive(Debug, Clone, Copy)]
pub struct HopContext {
    pub now: SimTime,
    pub ip_arrive: IpAddr,
    pub ip_depart: IpAddr,
    /// Backlog delay this packet faces on the outbound link.
    pub live_queue_delay: SimDuration,
    pub outbound_rate: Option<Rate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardAction {
    Forward,
    /// TTL expired; packet discarded (no ICMP modeled).
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOutcome {
    pub action: ForwardAction,
    /// Stamp written by this router, if any.
    pub stamped: Option<HopStamp>,
    /// True when load shedding skipped all measurement processing.
    pub shed: bool,
}

#[derive(Debug, Clone)]
pub struct RouterState {
    pub cfg: RouterConfig,
    pub evolution_offset: i16,
    rng: ChaCha12Rng,
}

impl RouterState {
    pub fn new(cfg: RouterConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let evolution_offset = cfg.evolution_offset.unwrap_or_else(|| rng.random::<i16>());
        RouterState {
            cfg,
            evolution_offset,
            rng,
        }
    }

    fn reported_queue_delay(&self, ctx: &HopContext) -> SimDuration {
        let actual = match self.cfg.queue_metric {
            QueueMetric::Live => ctx.live_queue_delay,
            QueueMetric::Fixed(d) => d,
        };
        match &self.cfg.adversary {
            AdversaryPolicy::UnderreportOwnQl { scale } => {
                SimDuration((actual.micros() as f64 * scale) as u64)
            }
            _ => actual,
        }
    }

    fn capacity_class(&self, ctx: &HopContext) -> u8 {
        let rate = self
            .cfg
            .available_capacity
            .or(ctx.outbound_rate)
            .map(|r| r.bits_per_sec())
            .unwrap_or(u64::MAX);
        coarse_rate_class(rate)
    }

    /// Process one transiting packet: decrement TTL (dropping at zero), then
    /// stamp / evolve / accumulate as configured, adversary mutation last.
    pub fn forward(&mut self, pkt: &mut SimPacket, ctx: &HopContext) -> ForwardOutcome {
        if pkt.ttl <= 1 {
            pkt.ttl = 0;
            return ForwardOutcome {
                action: ForwardAction::Drop,
                stamped: None,
                shed: false,
            };
        }
        pkt.ttl -= 1;

        // Shedding looks at the real load, not the reported number.
        let actual_queue = match self.cfg.queue_metric {
            QueueMetric::Live => ctx.live_queue_delay,
            QueueMetric::Fixed(d) => d,
        };
        if let Some(threshold) = self.cfg.load_shed_threshold {
            if actual_queue > threshold {
                return ForwardOutcome {
                    action: ForwardAction::Forward,
                    stamped: None,
                    shed: true,
                };
            }
        }

        let mut stamped = None;
        if self.cfg.features.stamping {
            if let (Some(request), Some(slot)) = (pkt.shim.hop_request, pkt.shim.hop_stamp) {
                if slot.is_empty() {
                    let fire = match request.strategy {
                        StampStrategy::Probabilistic => {
                            self.rng.random::<f64>() < self.cfg.stamp_probability
                        }
                        StampStrategy::Triggered { target_ttl } => pkt.ttl == target_ttl,
                    };
                    if fire {
                        let body = match request.kind {
                            crate::wire::HopKind::Topology => HopStampBody::Topology(TopologyStamp {
                                router_id: self.cfg.router_id,
                                as_number: self.cfg.as_number,
                                ip_arrive: ctx.ip_arrive,
                                ip_depart: ctx.ip_depart,
                            }),
                            crate::wire::HopKind::Performance => {
                                HopStampBody::Performance(PerformanceStamp {
                                    t_now: (ctx.now + self.cfg.clock_offset).micros() as u32,
                                    ql_us: self
                                        .reported_queue_delay(ctx)
                                        .micros()
                                        .min(u16::MAX as u64)
                                        as u16,
                                    ac_class: self.capacity_class(ctx),
                                    cl: self.cfg.congestion_level,
                                })
                            }
                        };
                        let stamp = HopStamp {
                            stamped_ttl: pkt.ttl,
                            body,
                        };
                        pkt.shim.hop_stamp = Some(stamp);
                        stamped = Some(stamp);
                    }
                }
            }
        }

        if self.cfg.features.evolution {
            if let Some(evolution) = pkt.shim.evolution.as_mut() {
                evolution.e_cur = apply_evolution(evolution.e_cur, self.evolution_offset);
            }
        }

        if self.cfg.features.accum {
            let class = self.capacity_class(ctx);
            let reported = self.reported_queue_delay(ctx);
            if let Some(accum) = pkt.shim.accum.as_mut() {
                apply_accum(accum, class, reported);
            }
        }

        apply_adversary(&self.cfg.adversary, pkt);

        ForwardOutcome {
            action: ForwardAction::Forward,
            stamped,
            shed: false,
        }
    }
}

/// One router's evolution contribution: add the offset modulo 2^16.
pub fn apply_evolution(e_cur: u16, offset: i16) -> u16 {
    e_cur.wrapping_add(offset as u16)
}

/// One router's accumulated-tuple contribution: fold in its capacity class
/// and queue delay, and take a tick off the shadow TTL.
pub fn apply_accum(accum: &mut AccumTuple, capacity_class: u8, queue_delay: SimDuration) {
    accum.ac_min = accum.ac_min.min(capacity_class);
    accum.ql_sum_us = accum
        .ql_sum_us
        .saturating_add(queue_delay.micros().min(u16::MAX as u64) as u16);
    accum.ttl_prime = accum.ttl_prime.saturating_sub(1);
}

/// Packet-mutating adversary behaviors. Reporting-level dishonesty
/// (`UnderreportOwnQl`) acts where the metric is read instead.
pub fn apply_adversary(policy: &AdversaryPolicy, pkt: &mut SimPacket) {
    match policy {
        AdversaryPolicy::None | AdversaryPolicy::UnderreportOwnQl { .. } => {}
        AdversaryPolicy::InflateVictimQl {
            amount,
            victim_ttls,
        } => {
            let add = amount.micros().min(u16::MAX as u64) as u16;
            if let Some(accum) = pkt.shim.accum.as_mut() {
                accum.ql_sum_us = accum.ql_sum_us.saturating_add(add);
            }
            if let Some(stamp) = pkt.shim.hop_stamp.as_mut() {
                if !stamp.is_empty() && victim_ttls.contains(&stamp.stamped_ttl) {
                    if let HopStampBody::Performance(perf) = &mut stamp.body {
                        perf.ql_us = perf.ql_us.saturating_add(add);
                    }
                }
            }
        }
        AdversaryPolicy::NatRewrite(map) => rewrite(map, pkt),
        AdversaryPolicy::NonceTamper { delta } => {
            if let Some(nonce) = pkt.shim.nonce.as_mut() {
                nonce.n_xmit = nonce.n_xmit.wrapping_add(*delta);
            }
        }
        AdversaryPolicy::HashRecompute(map) => {
            rewrite(map, pkt);
            if let Some(mut integrity) = pkt.shim.integrity {
                // The middlebox knows no salt; it hashes the mutated view
                // with an empty one. That reproduces the real formula only
                // in plain mode.
                let view = PacketView::of_packet(pkt);
                integrity.i_hash =
                    compute_integrity(&view, integrity.i_cover, IntegrityMode::Plain, &[])
                        .expect("plain digest takes no salt");
                pkt.shim.integrity = Some(integrity);
            }
        }
    }
}

fn rewrite(map: &RewriteMap, pkt: &mut SimPacket) {
    if let Some(src) = map.src {
        pkt.src = src;
    }
    if let Some(dst) = map.dst {
        pkt.dst = dst;
    }
    if let Some(port) = map.src_port {
        pkt.src_port = port;
    }
    if let Some(port) = map.dst_port {
        pkt.dst_port = port;
    }
}
