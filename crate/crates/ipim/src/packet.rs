//! The in-flight packet model shared by endpoints, path elements, and the
//! simulator.
//!
//! A `SimPacket` is header state only. Ground-truth bookkeeping (send time,
//! per-hop queue records, drop point) lives in the simulator's own tables,
//! keyed by packet id, so endpoint and router code cannot read it even by
//! accident.

use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::wire::{self, FieldClass, ShimHeader};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct PacketId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Data,
    Ack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPacket {
    pub id: PacketId,
    /// Flow index within the scenario workload.
    pub flow: u32,
    pub kind: PacketKind,
    /// Per-flow, per-direction packet counter.
    pub seq: u32,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub ttl: u8,
    /// Total size in bytes, used for link service time.
    pub size: u32,
    /// Stand-in transport sequence number.
    pub transport_seq: u32,
    /// Identity of the payload contents; mutating the payload means changing
    /// the tag.
    pub payload_tag: u64,
    pub shim: ShimHeader,
}

/// Byte view of a packet's integrity-coverable field classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketView {
    addresses: Vec<u8>,
    ports: Vec<u8>,
    transport: Vec<u8>,
    payload: Vec<u8>,
    ipim: Vec<u8>,
}

impl PacketView {
    /// Build the view over which integrity digests are computed. The shim
    /// class covers only the sender-owned fields: host id, timing, nonce,
    /// hop request, and the integrity cover/mode bytes. Fields routers
    /// legitimately change in flight (TTL, hop stamp, evolution, accumulated
    /// tuple) and the digest bytes themselves are excluded, so an honest
    /// path never breaks the check.
    pub fn of_packet(pkt: &SimPacket) -> PacketView {
        let mut addresses = Vec::with_capacity(32);
        push_addr(&mut addresses, pkt.src);
        push_addr(&mut addresses, pkt.dst);

        let mut ports = Vec::with_capacity(4);
        ports.extend_from_slice(&pkt.src_port.to_be_bytes());
        ports.extend_from_slice(&pkt.dst_port.to_be_bytes());

        let mut transport = Vec::with_capacity(8);
        transport.extend_from_slice(&pkt.transport_seq.to_be_bytes());
        transport.extend_from_slice(&pkt.size.to_be_bytes());

        let mut payload = Vec::with_capacity(12);
        payload.extend_from_slice(&pkt.payload_tag.to_be_bytes());
        payload.extend_from_slice(&pkt.size.to_be_bytes());

        let immutable = ShimHeader {
            host_id: pkt.shim.host_id,
            timing: pkt.shim.timing,
            nonce: pkt.shim.nonce,
            integrity: pkt.shim.integrity.map(|i| wire::IntegrityTuple {
                i_hash: 0,
                i_echo: 0,
                ..i
            }),
            hop_request: pkt.shim.hop_request,
            hop_stamp: None,
            evolution: None,
            accum: None,
        };
        let ipim = wire::encode_shim(&immutable).expect("shim fields came from the wire range");

        PacketView {
            addresses,
            ports,
            transport,
            payload,
            ipim,
        }
    }

    pub fn bytes(&self, class: FieldClass) -> &[u8] {
        match class {
            FieldClass::Addresses => &self.addresses,
            FieldClass::Ports => &self.ports,
            FieldClass::TransportHdr => &self.transport,
            FieldClass::Payload => &self.payload,
            FieldClass::IpimFields => &self.ipim,
        }
    }

    /// Test helper: a view from raw per-class bytes.
    pub fn from_parts(
        addresses: Vec<u8>,
        ports: Vec<u8>,
        transport: Vec<u8>,
        payload: Vec<u8>,
        ipim: Vec<u8>,
    ) -> PacketView {
        PacketView {
            addresses,
            ports,
            transport,
            payload,
            ipim,
        }
    }
}

fn push_addr(buf: &mut Vec<u8>, addr: IpAddr) {
    match addr {
        IpAddr::V4(v4) => buf.extend_from_slice(&v4.to_ipv6_mapped().octets()),
        IpAddr::V6(v6) => buf.extend_from_slice(&v6.octets()),
    }
}
