//! Per-flow endpoint state machines.
//!
//! One `EndpointState` owns one side of one flow. On send it populates the
//! outgoing shim (host id, timing, nonce, integrity, hop request slot,
//! evolution, accumulated tuple); on receive it consumes the peer's shim and
//! emits measurement events: round-trip decompositions, arrival reports,
//! integrity verdicts, evolution signatures, participation checks.
//!
//! All timestamps handed in are node-local clock readings; the endpoint only
//! ever subtracts same-clock values.

pub mod arrival;
pub mod integrity;

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::packet::{PacketKind, PacketView, SimPacket};
use crate::units::{Granularity, SimDuration, SimTime};
use crate::wire::{
    AccumTuple, CoverSet, EvolutionTuple, HopKind, HopRequest, HopStamp, IntegrityMode,
    IntegrityTuple, NonceTuple, ShimHeader, StampStrategy, TimingTuple,
};

pub use arrival::{reconstruct_arrivals, ArrivalReport, Observation, OutstandingNonce};
pub use integrity::{compute_integrity, localize_mutation, MutationFindings};

pub const DEFAULT_ROTATION_PERIOD: SimDuration = SimDuration::from_secs(30 * 60);
pub const DEFAULT_NONCE_WINDOW: usize = 3;

/// How integrity coverage varies over a flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoverSchedule {
    Fixed(CoverSet),
    /// Singletons of the listed classes, then the full listed set, repeating.
    /// Converges mutation localization within |classes|+1 packets.
    RoundRobin(CoverSet),
}

impl CoverSchedule {
    fn cover_at(&self, index: usize) -> CoverSet {
        match self {
            CoverSchedule::Fixed(cover) => *cover,
            CoverSchedule::RoundRobin(classes) => {
                let members: Vec<_> = classes.classes().collect();
                if members.is_empty() {
                    return CoverSet::empty();
                }
                let cycle = members.len() + 1;
                let pos = index % cycle;
                if pos == members.len() {
                    *classes
                } else {
                    CoverSet::empty().with(members[pos])
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityConfig {
    pub mode: IntegrityMode,
    pub salt: Vec<u8>,
    pub schedule: CoverSchedule,
}

/// Which hop information outgoing data packets request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopRequestPlan {
    pub kind: HopKindPlan,
    pub strategy: StampStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopKindPlan {
    Topology,
    Performance,
    /// Topology on even sequence numbers, performance on odd: lets one flow
    /// learn hop positions and their load together.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub granularity: Granularity,
    pub rotation_period: SimDuration,
    pub nonce_window: usize,
    pub send_host_id: bool,
    pub send_timing: bool,
    pub send_nonce: bool,
    pub send_evolution: bool,
    pub send_accum: bool,
    pub integrity: Option<IntegrityConfig>,
    pub hop_request: Option<HopRequestPlan>,
    pub initial_ttl: u8,
    /// Explicit transmit nonces (scenario-scripted); random increasing
    /// values once exhausted or when absent.
    pub nonce_schedule: Option<Vec<u32>>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            granularity: Granularity::Micros1,
            rotation_period: DEFAULT_ROTATION_PERIOD,
            nonce_window: DEFAULT_NONCE_WINDOW,
            send_host_id: false,
            send_timing: true,
            send_nonce: false,
            send_evolution: false,
            send_accum: false,
            integrity: None,
            hop_request: None,
            initial_ttl: 64,
            nonce_schedule: None,
        }
    }
}

/// A round-trip split into what the network took and what the peer host
/// held. All values are ticks of the flow's granularity;
/// `feedback = host + network` by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttDecomposition {
    pub feedback: u16,
    pub host: u16,
    pub network: u16,
    pub granularity: Granularity,
}

impl RttDecomposition {
    pub fn feedback_us(&self) -> u64 {
        self.feedback as u64 * self.granularity.unit_micros()
    }

    pub fn host_us(&self) -> u64 {
        self.host as u64 * self.granularity.unit_micros()
    }

    pub fn network_us(&self) -> u64 {
        self.network as u64 * self.granularity.unit_micros()
    }
}

/// Everything an endpoint can learn from one arriving packet.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementEvent {
    Rtt {
        decomposition: RttDecomposition,
        /// Transport sequence of the matched earlier send.
        echoed_seq: u32,
    },
    /// The echoed timestamp matched nothing in the sent log.
    StaleEcho { t_echo: u16 },
    Arrival(ArrivalReport),
    /// No subset of outstanding nonces explains the peer's sum.
    ArrivalInconsistent { observation: usize, delta: u32 },
    /// Receiver-side integrity verdict (plain and shared-salt modes).
    IntegrityVerdict { cover: CoverSet, matched: bool },
    /// Sender-side verdict from the echoed digest (sender-salt mode).
    IntegrityEchoVerdict { cover: CoverSet, matched: bool },
    /// Path signature derived from an echoed evolution value.
    Evolution { signature: u16 },
    /// Accumulated tuple as it arrived at this endpoint.
    AccumArrived {
        ac_min: u8,
        ql_sum_us: u16,
        ttl_delta: u8,
    },
    /// Echoed shadow-TTL delta versus what this sender initialized.
    Participation {
        echoed: u8,
        expected: u8,
        complete: bool,
    },
    /// A filled hop stamp arrived.
    StampObserved(HopStamp),
}

#[derive(Debug, Clone, Default)]
pub struct EndpointCounters {
    pub stale_echoes: u64,
    /// Feedback samples dropped because the echoed delta exceeded the
    /// feedback time (timestamp wrap at the configured granularity).
    pub wrapped_samples: u64,
    /// Sends whose holding time no longer fit the 10-bit field.
    pub capped_deltas: u64,
    /// Arrival reconstructions abandoned for reasons other than an
    /// inconsistent sum (window overflow, conflicting returns).
    pub reconstruct_failures: u64,
}

#[derive(Debug, Clone, Copy)]
struct SentTimestamp {
    t_now: u16,
    transport_seq: u32,
}

#[derive(Debug, Clone, Copy)]
struct SentDigest {
    cover: CoverSet,
    plain_digest: u64,
}

/// One side of one flow. Never shared: the simulator owns it and drives it
/// from the single-threaded event loop.
#[derive(Debug, Clone)]
pub struct EndpointState {
    cfg: EndpointConfig,
    rng: ChaCha12Rng,

    host_id: u16,
    last_rotation: SimTime,
    network_epoch: u64,

    e_init: u16,
    ttl_prime_init: u8,
    ttl_delta_init: u8,

    last_nonce: u32,
    schedule_pos: usize,
    nonce_accumulator: u32,
    outstanding: Vec<OutstandingNonce>,
    observations: Vec<Observation>,

    sent_log: VecDeque<SentTimestamp>,
    sent_digests: VecDeque<SentDigest>,
    cover_index: usize,
    echo_hash: u64,

    last_rx_local: Option<SimTime>,
    last_peer_tnow: Option<u16>,
    last_seen_e_cur: Option<u16>,
    last_ttl_delta: Option<u8>,
    pending_stamp_echo: Option<HopStamp>,

    transport_seq: u32,
    /// Receiver-side cover/verdict history feeding mutation localization.
    integrity_history: Vec<(CoverSet, bool)>,
    pub counters: EndpointCounters,
}

impl EndpointState {
    pub fn new(cfg: EndpointConfig, seed: u64, created_local: SimTime) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let host_id = rng.random::<u16>();
        let e_init = rng.random::<u16>();
        let last_nonce = rng.random_range(1..65_536u32);
        let initial_ttl = cfg.initial_ttl;
        // Keep the shadow TTL at least 16 away from the real one: short
        // paths then cannot collide in the absolute difference, and an
        // echoed delta of 0 stays free as the "none yet" sentinel.
        let ttl_prime_init = loop {
            let candidate = rng.random_range(16..=240u16) as u8;
            if candidate.abs_diff(initial_ttl) >= 16 {
                break candidate;
            }
        };
        let ttl_delta_init = ttl_prime_init.abs_diff(initial_ttl);
        EndpointState {
            cfg,
            rng,
            host_id,
            last_rotation: created_local,
            network_epoch: 0,
            e_init,
            ttl_prime_init,
            ttl_delta_init,
            last_nonce,
            schedule_pos: 0,
            nonce_accumulator: 0,
            outstanding: Vec::new(),
            observations: Vec::new(),
            sent_log: VecDeque::new(),
            sent_digests: VecDeque::new(),
            cover_index: 0,
            echo_hash: 0,
            last_rx_local: None,
            last_peer_tnow: None,
            last_seen_e_cur: None,
            last_ttl_delta: None,
            pending_stamp_echo: None,
            transport_seq: 0,
            integrity_history: Vec::new(),
            counters: EndpointCounters::default(),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn evolution_init(&self) -> u16 {
        self.e_init
    }

    pub fn ttl_delta_init(&self) -> u8 {
        self.ttl_delta_init
    }

    pub fn nonce_accumulator(&self) -> u32 {
        self.nonce_accumulator
    }

    pub fn integrity_history(&self) -> &[(CoverSet, bool)] {
        &self.integrity_history
    }

    pub fn outstanding_nonces(&self) -> &[OutstandingNonce] {
        &self.outstanding
    }

    /// Current host identifier, rotating on schedule. A fresh uniform value
    /// is drawn when the rotation period elapsed or the attachment changed;
    /// otherwise the identifier is stable.
    pub fn rotate_host_id(&mut self, now_local: SimTime, epoch_changed: bool) -> u16 {
        let elapsed = now_local.saturating_sub(self.last_rotation);
        if epoch_changed || elapsed >= self.cfg.rotation_period {
            if epoch_changed {
                self.network_epoch += 1;
            }
            self.host_id = self.rng.random::<u16>();
            self.last_rotation = now_local;
        }
        self.host_id
    }

    fn next_nonce(&mut self) -> u32 {
        if let Some(schedule) = &self.cfg.nonce_schedule {
            if let Some(&value) = schedule.get(self.schedule_pos) {
                self.schedule_pos += 1;
                self.last_nonce = value;
                return value;
            }
        }
        let increment = self.rng.random_range(1..65_536u32);
        self.last_nonce = self.last_nonce.wrapping_add(increment);
        self.last_nonce
    }

    /// Populate the outgoing packet's shim. The packet must already carry
    /// its addressing, ports, size, and payload tag; this fills TTL, the
    /// transport sequence, and every configured tuple, computing the
    /// integrity digest last so it covers the final field values.
    pub fn on_send(&mut self, pkt: &mut SimPacket, now_local: SimTime) {
        pkt.ttl = self.cfg.initial_ttl;
        pkt.transport_seq = self.transport_seq;
        let seq = self.transport_seq;
        self.transport_seq += 1;

        let mut shim = ShimHeader::default();
        if self.cfg.send_host_id {
            shim.host_id = Some(self.rotate_host_id(now_local, false));
        }
        if self.cfg.send_timing {
            let t_now = self.cfg.granularity.reduce(now_local);
            let t_echo = self.last_peer_tnow.unwrap_or(0);
            let t_delta = match self.last_rx_local {
                Some(last_rx) => {
                    let ticks = self
                        .cfg
                        .granularity
                        .reduce_duration(now_local.saturating_sub(last_rx));
                    if ticks > 1023 {
                        self.counters.capped_deltas += 1;
                        1023
                    } else {
                        ticks as u16
                    }
                }
                None => 0,
            };
            shim.timing = Some(TimingTuple {
                t_now,
                t_echo,
                t_delta,
                granularity: self.cfg.granularity,
            });
            // A reduced value of 0 would be indistinguishable from the
            // "nothing echoed yet" sentinel, so it is sent but not logged.
            if t_now != 0 {
                self.sent_log.push_back(SentTimestamp {
                    t_now,
                    transport_seq: seq,
                });
                if self.sent_log.len() > 1024 {
                    self.sent_log.pop_front();
                }
            }
        }
        if self.cfg.send_nonce {
            let n_xmit = self.next_nonce();
            shim.nonce = Some(NonceTuple {
                n_xmit,
                n_sum: self.nonce_accumulator,
            });
            self.outstanding.push(OutstandingNonce {
                value: n_xmit,
                eligible_from: self.observations.len(),
            });
        }
        if self.cfg.send_evolution {
            shim.evolution = Some(EvolutionTuple {
                e_cur: self.e_init,
                e_echo: self.last_seen_e_cur.unwrap_or(0),
            });
        }
        if self.cfg.send_accum {
            shim.accum = Some(AccumTuple {
                ac_min: 15,
                ql_sum_us: 0,
                ttl_prime: self.ttl_prime_init,
                echoed_delta: self.last_ttl_delta.unwrap_or(0),
            });
        }
        match pkt.kind {
            PacketKind::Data => {
                if let Some(plan) = &self.cfg.hop_request {
                    let kind = match plan.kind {
                        HopKindPlan::Topology => HopKind::Topology,
                        HopKindPlan::Performance => HopKind::Performance,
                        HopKindPlan::Alternating => {
                            if seq % 2 == 0 {
                                HopKind::Topology
                            } else {
                                HopKind::Performance
                            }
                        }
                    };
                    shim.hop_request = Some(HopRequest {
                        kind,
                        strategy: plan.strategy,
                    });
                    shim.hop_stamp = Some(HopStamp::empty(kind));
                }
            }
            PacketKind::Ack => {
                if let Some(stamp) = self.pending_stamp_echo.take() {
                    shim.hop_stamp = Some(stamp);
                }
            }
        }
        if let Some(integrity) = self.cfg.integrity.clone() {
            let cover = integrity.schedule.cover_at(self.cover_index);
            self.cover_index += 1;
            shim.integrity = Some(IntegrityTuple {
                i_cover: cover,
                i_mode: integrity.mode,
                i_hash: 0,
                i_echo: self.echo_hash,
            });
            pkt.shim = shim;
            let view = PacketView::of_packet(pkt);
            let digest = compute_integrity(&view, cover, integrity.mode, &integrity.salt)
                .expect("integrity config validated at build time");
            if integrity.mode == IntegrityMode::SenderSalt {
                let plain = compute_integrity(&view, cover, IntegrityMode::Plain, &[])
                    .expect("plain digest takes no salt");
                self.sent_digests.push_back(SentDigest {
                    cover,
                    plain_digest: plain,
                });
                if self.sent_digests.len() > 64 {
                    self.sent_digests.pop_front();
                }
            }
            pkt.shim.integrity.as_mut().unwrap().i_hash = digest;
        } else {
            pkt.shim = shim;
        }
    }

    /// Consume an arriving packet's shim and report what it proves.
    pub fn on_receive(&mut self, pkt: &SimPacket, now_local: SimTime) -> Vec<MeasurementEvent> {
        let mut events = Vec::new();
        let shim = &pkt.shim;

        if let Some(timing) = &shim.timing {
            if timing.t_echo != 0 {
                match self
                    .sent_log
                    .iter()
                    .rev()
                    .find(|s| s.t_now == timing.t_echo)
                {
                    Some(sent) => {
                        let arrival = self.cfg.granularity.reduce(now_local);
                        let feedback = Granularity::wrapping_delta(arrival, timing.t_echo);
                        if timing.t_delta > feedback {
                            self.counters.wrapped_samples += 1;
                        } else {
                            events.push(MeasurementEvent::Rtt {
                                decomposition: RttDecomposition {
                                    feedback,
                                    host: timing.t_delta,
                                    network: feedback - timing.t_delta,
                                    granularity: self.cfg.granularity,
                                },
                                echoed_seq: sent.transport_seq,
                            });
                        }
                    }
                    None => {
                        self.counters.stale_echoes += 1;
                        events.push(MeasurementEvent::StaleEcho {
                            t_echo: timing.t_echo,
                        });
                    }
                }
            }
            self.last_peer_tnow = Some(timing.t_now);
        }

        if let Some(nonce) = &shim.nonce {
            self.nonce_accumulator = self.nonce_accumulator.wrapping_add(nonce.n_xmit);
            self.observations.push(Observation {
                observer_nonce: nonce.n_xmit,
                n_sum: nonce.n_sum,
            });
            match reconstruct_arrivals(
                &self.outstanding,
                &self.observations,
                0,
                self.cfg.nonce_window,
            ) {
                Ok(report) => events.push(MeasurementEvent::Arrival(report)),
                Err(crate::error::ArrivalError::Inconsistent { observation, delta }) => {
                    events.push(MeasurementEvent::ArrivalInconsistent { observation, delta })
                }
                Err(_) => self.counters.reconstruct_failures += 1,
            }
        }

        if let Some(integrity) = &shim.integrity {
            let view = PacketView::of_packet(pkt);
            match integrity.i_mode {
                IntegrityMode::Plain => {
                    let expected =
                        compute_integrity(&view, integrity.i_cover, IntegrityMode::Plain, &[])
                            .expect("plain digest takes no salt");
                    let matched = expected == integrity.i_hash;
                    self.integrity_history.push((integrity.i_cover, matched));
                    events.push(MeasurementEvent::IntegrityVerdict {
                        cover: integrity.i_cover,
                        matched,
                    });
                    self.echo_hash = integrity.i_hash;
                }
                IntegrityMode::SharedSalt => {
                    let salt = self
                        .cfg
                        .integrity
                        .as_ref()
                        .map(|c| c.salt.clone())
                        .unwrap_or_default();
                    if !salt.is_empty() {
                        let expected = compute_integrity(
                            &view,
                            integrity.i_cover,
                            IntegrityMode::SharedSalt,
                            &salt,
                        )
                        .expect("salt checked nonempty");
                        let matched = expected == integrity.i_hash;
                        self.integrity_history.push((integrity.i_cover, matched));
                        events.push(MeasurementEvent::IntegrityVerdict {
                            cover: integrity.i_cover,
                            matched,
                        });
                    }
                    self.echo_hash = integrity.i_hash;
                }
                IntegrityMode::SenderSalt => {
                    // The salt is the sender's alone, so nothing can be
                    // verified here. Echo a digest of what actually arrived;
                    // the sender compares it against its own record.
                    self.echo_hash =
                        compute_integrity(&view, integrity.i_cover, IntegrityMode::Plain, &[])
                            .expect("plain digest takes no salt");
                }
            }

            if integrity.i_echo != 0 && integrity.i_mode == IntegrityMode::SenderSalt {
                let echoed = integrity.i_echo;
                let matched_entry = self
                    .sent_digests
                    .iter()
                    .rev()
                    .find(|d| d.plain_digest == echoed);
                let (cover, matched) = match matched_entry {
                    Some(entry) => (entry.cover, true),
                    // Unknown which packet the mismatching echo refers to;
                    // attribute it to the most recent coverage.
                    None => (
                        self.sent_digests
                            .back()
                            .map(|d| d.cover)
                            .unwrap_or_else(CoverSet::empty),
                        false,
                    ),
                };
                if !self.sent_digests.is_empty() {
                    self.integrity_history.push((cover, matched));
                    events.push(MeasurementEvent::IntegrityEchoVerdict { cover, matched });
                }
            }
        }

        if let Some(evolution) = &shim.evolution {
            self.last_seen_e_cur = Some(evolution.e_cur);
            if evolution.e_echo != 0 {
                events.push(MeasurementEvent::Evolution {
                    signature: evolution.e_echo.wrapping_sub(self.e_init),
                });
            }
        }

        if let Some(accum) = &shim.accum {
            let ttl_delta = pkt.ttl.abs_diff(accum.ttl_prime);
            self.last_ttl_delta = Some(ttl_delta);
            events.push(MeasurementEvent::AccumArrived {
                ac_min: accum.ac_min,
                ql_sum_us: accum.ql_sum_us,
                ttl_delta,
            });
            if accum.echoed_delta != 0 {
                events.push(MeasurementEvent::Participation {
                    echoed: accum.echoed_delta,
                    expected: self.ttl_delta_init,
                    complete: accum.echoed_delta == self.ttl_delta_init,
                });
            }
        }

        if let Some(stamp) = &shim.hop_stamp {
            if !stamp.is_empty() {
                self.pending_stamp_echo = Some(*stamp);
                events.push(MeasurementEvent::StampObserved(*stamp));
            }
        }

        self.last_rx_local = Some(now_local);
        events
    }
}
