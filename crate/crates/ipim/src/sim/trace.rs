//! The ground-truth event record a run produces: one line-delimited JSON
//! object per event, in simulated-time order. The trace is the analysis
//! module's sole input, so send/receive events embed the whole packet as it
//! looked at that point. `local_us` is the observing node's own clock, which
//! is all a passive observer placed there would have.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::packet::{PacketId, SimPacket};
use crate::wire::HopStamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TtlExpired,
    Loss,
    QueueFull,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceEvent {
    Send {
        t_us: u64,
        local_us: u64,
        node: String,
        flow: String,
        pkt: SimPacket,
    },
    Recv {
        t_us: u64,
        local_us: u64,
        node: String,
        flow: String,
        pkt: SimPacket,
    },
    Stamp {
        t_us: u64,
        node: String,
        flow: String,
        pkt_id: PacketId,
        stamp: HopStamp,
    },
    Drop {
        t_us: u64,
        site: String,
        flow: String,
        pkt_id: PacketId,
        reason: DropReason,
    },
    Reorder {
        t_us: u64,
        link: String,
        flow: String,
        pkt_id: PacketId,
        extra_us: u64,
    },
    Dup {
        t_us: u64,
        link: String,
        flow: String,
        orig_id: PacketId,
        dup_id: PacketId,
    },
    RouteChange {
        t_us: u64,
        src: String,
        dst: String,
        path: Vec<String>,
    },
}

impl TraceEvent {
    pub fn time_us(&self) -> u64 {
        match self {
            TraceEvent::Send { t_us, .. }
            | TraceEvent::Recv { t_us, .. }
            | TraceEvent::Stamp { t_us, .. }
            | TraceEvent::Drop { t_us, .. }
            | TraceEvent::Reorder { t_us, .. }
            | TraceEvent::Dup { t_us, .. }
            | TraceEvent::RouteChange { t_us, .. } => *t_us,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, event: TraceEvent) {
        debug_assert!(
            self.events
                .last()
                .is_none_or(|prev| prev.time_us() <= event.time_us()),
            "trace timestamps must be non-decreasing"
        );
        self.events.push(event);
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), TraceError> {
        for event in &self.events {
            serde_json::to_writer(&mut out, event).map_err(|e| TraceError::Parse {
                line: 0,
                source: e,
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits utf-8")
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: idx + 1,
                source: e,
            })?;
            events.push(event);
        }
        Ok(Trace { events })
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        Self::read_jsonl(text.as_bytes())
    }

    /// Every packet that was born (sent or forked by duplication) must end
    /// exactly once, as a receive or a drop. Returns offending packet ids.
    pub fn conservation_violations(&self) -> Vec<PacketId> {
        use std::collections::BTreeMap;
        let mut births: BTreeMap<PacketId, usize> = BTreeMap::new();
        let mut deaths: BTreeMap<PacketId, usize> = BTreeMap::new();
        for event in &self.events {
            match event {
                TraceEvent::Send { pkt, .. } => *births.entry(pkt.id).or_default() += 1,
                TraceEvent::Dup { dup_id, .. } => *births.entry(*dup_id).or_default() += 1,
                TraceEvent::Recv { pkt, .. } => *deaths.entry(pkt.id).or_default() += 1,
                TraceEvent::Drop { pkt_id, .. } => *deaths.entry(*pkt_id).or_default() += 1,
                _ => {}
            }
        }
        let mut bad = Vec::new();
        for (id, &n) in &births {
            if n != 1 || deaths.get(id) != Some(&1) {
                bad.push(*id);
            }
        }
        for id in deaths.keys() {
            if !births.contains_key(id) {
                bad.push(*id);
            }
        }
        bad.sort();
        bad.dedup();
        bad
    }

    pub fn is_time_ordered(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| w[0].time_us() <= w[1].time_us())
    }
}
