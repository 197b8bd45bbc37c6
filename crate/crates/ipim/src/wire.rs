//! Bit-exact serialization of the measurement shim header.
//!
//! Layout (version 1), all multi-byte fields big-endian:
//!
//! ```text
//! [version:1][presence:1]
//!   bit 0 HOSTID     2 bytes   host id
//!   bit 1 TIMING     4 bytes   compact timing word
//!   bit 2 NONCE      8 bytes   n_xmit, n_sum
//!   bit 3 INTEGRITY 18 bytes   i_cover, i_mode, i_hash, i_echo
//!   bit 4 HOPREQ     2 bytes   kind|strategy nibble pair, target ttl
//!   bit 5 HOPSTAMP   2+N bytes stamped ttl, kind, payload (topology N=40,
//!                              performance N=8)
//!   bit 6 EVOLUTION  4 bytes   e_cur, e_echo
//!   bit 7 ACCUM      5 bytes   ac_min, ql_sum, ttl', echoed delta
//! ```
//!
//! Tuples appear in presence-bit order. Presence is derived from which
//! optional fields are set, so a header cannot claim a tuple it does not
//! carry. Trailing bytes after the declared tuples are transport payload and
//! are reported back as a remainder length.
//!
//! The compact timing word packs three 10-bit timestamps and a 2-bit unit
//! selector: bits `[31:22]` t_now, `[21:12]` t_echo, `[11:2]` t_delta,
//! `[1:0]` granularity. Four bytes on a 1500-byte packet is under 0.3%
//! overhead.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, EncodeError};
use crate::units::Granularity;

pub const SHIM_VERSION: u8 = 1;

pub const PRESENCE_HOSTID: u8 = 1 << 0;
pub const PRESENCE_TIMING: u8 = 1 << 1;
pub const PRESENCE_NONCE: u8 = 1 << 2;
pub const PRESENCE_INTEGRITY: u8 = 1 << 3;
pub const PRESENCE_HOPREQ: u8 = 1 << 4;
pub const PRESENCE_HOPSTAMP: u8 = 1 << 5;
pub const PRESENCE_EVOLUTION: u8 = 1 << 6;
pub const PRESENCE_ACCUM: u8 = 1 << 7;

/// Sender clock, echoed peer clock, and local holding time, in ticks of the
/// selected granularity. Each value must stay below 1024 to pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingTuple {
    pub t_now: u16,
    pub t_echo: u16,
    pub t_delta: u16,
    pub granularity: Granularity,
}

/// Sender-chosen increasing nonce and the receiver's running modular sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonceTuple {
    pub n_xmit: u32,
    pub n_sum: u32,
}

/// The packet field classes an integrity digest may cover. The integrity
/// tuple's own hash/echo bytes are never part of any class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FieldClass {
    Addresses,
    Ports,
    TransportHdr,
    Payload,
    IpimFields,
}

impl FieldClass {
    pub const ALL: [FieldClass; 5] = [
        FieldClass::Addresses,
        FieldClass::Ports,
        FieldClass::TransportHdr,
        FieldClass::Payload,
        FieldClass::IpimFields,
    ];

    pub const fn bit(self) -> u8 {
        match self {
            FieldClass::Addresses => 1 << 0,
            FieldClass::Ports => 1 << 1,
            FieldClass::TransportHdr => 1 << 2,
            FieldClass::Payload => 1 << 3,
            FieldClass::IpimFields => 1 << 4,
        }
    }
}

/// Bitmap over `FieldClass`. Serializes as a list of class names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CoverSet(u8);

impl CoverSet {
    pub const VALID_MASK: u8 = 0b0001_1111;

    pub const fn empty() -> Self {
        CoverSet(0)
    }

    pub fn full() -> Self {
        let mut c = CoverSet(0);
        for class in FieldClass::ALL {
            c = c.with(class);
        }
        c
    }

    pub fn from_bits(bits: u8) -> Result<Self, EncodeError> {
        if bits & !Self::VALID_MASK != 0 {
            return Err(EncodeError::BadCover(bits));
        }
        Ok(CoverSet(bits))
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    #[must_use]
    pub const fn with(self, class: FieldClass) -> Self {
        CoverSet(self.0 | class.bit())
    }

    pub const fn contains(self, class: FieldClass) -> bool {
        self.0 & class.bit() != 0
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Classes in bitmap-bit order.
    pub fn classes(self) -> impl Iterator<Item = FieldClass> {
        FieldClass::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl FromIterator<FieldClass> for CoverSet {
    fn from_iter<T: IntoIterator<Item = FieldClass>>(iter: T) -> Self {
        let mut c = CoverSet::empty();
        for class in iter {
            c = c.with(class);
        }
        c
    }
}

impl Serialize for CoverSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.classes())
    }
}

impl<'de> Deserialize<'de> for CoverSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let classes = Vec::<FieldClass>::deserialize(deserializer)?;
        Ok(classes.into_iter().collect())
    }
}

/// How the integrity digest is keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityMode {
    /// Unkeyed: anyone on path can verify, and also forge.
    Plain,
    /// Keyed with a salt only the sender holds; verified via the echo.
    SenderSalt,
    /// Keyed with a salt both endpoints hold.
    SharedSalt,
}

impl IntegrityMode {
    pub const fn code(self) -> u8 {
        match self {
            IntegrityMode::Plain => 0,
            IntegrityMode::SenderSalt => 1,
            IntegrityMode::SharedSalt => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            0 => Ok(IntegrityMode::Plain),
            1 => Ok(IntegrityMode::SenderSalt),
            2 => Ok(IntegrityMode::SharedSalt),
            other => Err(DecodeError::BadValue {
                field: "i_mode",
                value: other,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityTuple {
    pub i_cover: CoverSet,
    pub i_mode: IntegrityMode,
    pub i_hash: u64,
    pub i_echo: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopKind {
    Topology,
    Performance,
}

impl HopKind {
    pub const fn code(self) -> u8 {
        match self {
            HopKind::Topology => 0,
            HopKind::Performance => 1,
        }
    }

    pub fn from_code(code: u8, field: &'static str) -> Result<Self, DecodeError> {
        match code {
            0 => Ok(HopKind::Topology),
            1 => Ok(HopKind::Performance),
            other => Err(DecodeError::BadValue { field, value: other }),
        }
    }
}

/// When a router should stamp: a sampled fraction of packets, or exactly the
/// hop where the TTL hits a sender-chosen target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StampStrategy {
    Probabilistic,
    Triggered { target_ttl: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopRequest {
    pub kind: HopKind,
    pub strategy: StampStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyStamp {
    pub router_id: u32,
    pub as_number: u32,
    pub ip_arrive: IpAddr,
    pub ip_depart: IpAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceStamp {
    /// Router-local clock, microseconds.
    pub t_now: u32,
    /// Queue length expressed as time, microseconds, saturating.
    pub ql_us: u16,
    /// Coarse capacity class, 4 bits: class N is 80 kbit/s * 2^N, 15 = max.
    pub ac_class: u8,
    /// Congestion level, finer-grained than a binary mark.
    pub cl: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopStampBody {
    Topology(TopologyStamp),
    Performance(PerformanceStamp),
}

impl HopStampBody {
    pub const fn kind(&self) -> HopKind {
        match self {
            HopStampBody::Topology(_) => HopKind::Topology,
            HopStampBody::Performance(_) => HopKind::Performance,
        }
    }
}

/// The single per-packet stamp slot. The sender pre-allocates it (zeroed,
/// `stamped_ttl == 0`) so no router ever grows the packet; the first stamping
/// router fills it and later routers leave it alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopStamp {
    /// TTL observed at the stamping router (post decrement), or 0 while the
    /// slot is empty. Forwarded packets always have TTL >= 1.
    pub stamped_ttl: u8,
    pub body: HopStampBody,
}

impl HopStamp {
    pub fn empty(kind: HopKind) -> Self {
        let body = match kind {
            HopKind::Topology => HopStampBody::Topology(TopologyStamp {
                router_id: 0,
                as_number: 0,
                ip_arrive: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
                ip_depart: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            }),
            HopKind::Performance => HopStampBody::Performance(PerformanceStamp {
                t_now: 0,
                ql_us: 0,
                ac_class: 0,
                cl: 0,
            }),
        };
        HopStamp {
            stamped_ttl: 0,
            body,
        }
    }

    pub const fn is_empty(&self) -> bool {
        self.stamped_ttl == 0
    }
}

/// Path-change signal: sender picks a random start, every participating
/// router adds its long-lived offset mod 2^16, receiver echoes what arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionTuple {
    pub e_cur: u16,
    pub e_echo: u16,
}

/// Path-accumulated performance plus the shadow-TTL participation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumTuple {
    /// Minimum capacity class seen so far (4 bits).
    pub ac_min: u8,
    /// Total queueing delay of participating routers, microseconds,
    /// saturating at the 16-bit maximum.
    pub ql_sum_us: u16,
    /// Shadow TTL, decremented by each participating router.
    pub ttl_prime: u8,
    /// |TTL - TTL'| echoed by the destination; 0 until one is known.
    pub echoed_delta: u8,
}

/// Everything a single packet may carry. Presence on the wire is exactly the
/// set of `Some` fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ShimHeader {
    pub host_id: Option<u16>,
    pub timing: Option<TimingTuple>,
    pub nonce: Option<NonceTuple>,
    pub integrity: Option<IntegrityTuple>,
    pub hop_request: Option<HopRequest>,
    pub hop_stamp: Option<HopStamp>,
    pub evolution: Option<EvolutionTuple>,
    pub accum: Option<AccumTuple>,
}

impl ShimHeader {
    pub fn presence(&self) -> u8 {
        let mut bits = 0;
        if self.host_id.is_some() {
            bits |= PRESENCE_HOSTID;
        }
        if self.timing.is_some() {
            bits |= PRESENCE_TIMING;
        }
        if self.nonce.is_some() {
            bits |= PRESENCE_NONCE;
        }
        if self.integrity.is_some() {
            bits |= PRESENCE_INTEGRITY;
        }
        if self.hop_request.is_some() {
            bits |= PRESENCE_HOPREQ;
        }
        if self.hop_stamp.is_some() {
            bits |= PRESENCE_HOPSTAMP;
        }
        if self.evolution.is_some() {
            bits |= PRESENCE_EVOLUTION;
        }
        if self.accum.is_some() {
            bits |= PRESENCE_ACCUM;
        }
        bits
    }

    /// Exact encoded size. Determined by the presence bitmap, except that the
    /// stamp slot width depends on its kind byte (fixed by the sender when
    /// pre-allocating the slot).
    pub fn encoded_len(&self) -> usize {
        let mut len = 2;
        if self.host_id.is_some() {
            len += 2;
        }
        if self.timing.is_some() {
            len += 4;
        }
        if self.nonce.is_some() {
            len += 8;
        }
        if self.integrity.is_some() {
            len += 18;
        }
        if self.hop_request.is_some() {
            len += 2;
        }
        if let Some(stamp) = &self.hop_stamp {
            len += 2 + match stamp.body {
                HopStampBody::Topology(_) => 40,
                HopStampBody::Performance(_) => 8,
            };
        }
        if self.evolution.is_some() {
            len += 4;
        }
        if self.accum.is_some() {
            len += 5;
        }
        len
    }
}

/// Pack the three 10-bit timestamps and the unit selector into one word.
pub fn pack_compact_timing(t: &TimingTuple) -> Result<u32, EncodeError> {
    for (field, value) in [
        ("t_now", t.t_now),
        ("t_echo", t.t_echo),
        ("t_delta", t.t_delta),
    ] {
        if value >= 1024 {
            return Err(EncodeError::TimingOverflow {
                field,
                value: value as u64,
            });
        }
    }
    Ok(((t.t_now as u32) << 22)
        | ((t.t_echo as u32) << 12)
        | ((t.t_delta as u32) << 2)
        | t.granularity.code() as u32)
}

/// Exact inverse of `pack_compact_timing`; every 32-bit word decodes.
pub fn unpack_compact_timing(word: u32) -> TimingTuple {
    TimingTuple {
        t_now: ((word >> 22) & 0x3ff) as u16,
        t_echo: ((word >> 12) & 0x3ff) as u16,
        t_delta: ((word >> 2) & 0x3ff) as u16,
        granularity: Granularity::from_code((word & 0b11) as u8),
    }
}

fn encode_addr(buf: &mut Vec<u8>, addr: IpAddr) {
    let octets = match addr {
        IpAddr::V4(v4) => v4.to_ipv6_mapped().octets(),
        IpAddr::V6(v6) => v6.octets(),
    };
    buf.extend_from_slice(&octets);
}

/// Serialize a header. Fails only on out-of-range field values; presence is
/// derived, so presence/optionality mismatches are unrepresentable.
pub fn encode_shim(h: &ShimHeader) -> Result<Vec<u8>, EncodeError> {
    let mut buf = Vec::with_capacity(h.encoded_len());
    buf.push(SHIM_VERSION);
    buf.push(h.presence());

    if let Some(host_id) = h.host_id {
        buf.extend_from_slice(&host_id.to_be_bytes());
    }
    if let Some(timing) = &h.timing {
        buf.extend_from_slice(&pack_compact_timing(timing)?.to_be_bytes());
    }
    if let Some(nonce) = &h.nonce {
        buf.extend_from_slice(&nonce.n_xmit.to_be_bytes());
        buf.extend_from_slice(&nonce.n_sum.to_be_bytes());
    }
    if let Some(integrity) = &h.integrity {
        if integrity.i_cover.bits() & !CoverSet::VALID_MASK != 0 {
            return Err(EncodeError::BadCover(integrity.i_cover.bits()));
        }
        buf.push(integrity.i_cover.bits());
        buf.push(integrity.i_mode.code());
        buf.extend_from_slice(&integrity.i_hash.to_be_bytes());
        buf.extend_from_slice(&integrity.i_echo.to_be_bytes());
    }
    if let Some(req) = &h.hop_request {
        let (strategy_code, target) = match req.strategy {
            StampStrategy::Probabilistic => (0u8, 0u8),
            StampStrategy::Triggered { target_ttl } => (1u8, target_ttl),
        };
        buf.push((req.kind.code() << 4) | strategy_code);
        buf.push(target);
    }
    if let Some(stamp) = &h.hop_stamp {
        buf.push(stamp.stamped_ttl);
        buf.push(stamp.body.kind().code());
        match &stamp.body {
            HopStampBody::Topology(t) => {
                buf.extend_from_slice(&t.router_id.to_be_bytes());
                buf.extend_from_slice(&t.as_number.to_be_bytes());
                encode_addr(&mut buf, t.ip_arrive);
                encode_addr(&mut buf, t.ip_depart);
            }
            HopStampBody::Performance(p) => {
                if p.ac_class > 0xf {
                    return Err(EncodeError::BadRateClass(p.ac_class));
                }
                buf.extend_from_slice(&p.t_now.to_be_bytes());
                buf.extend_from_slice(&p.ql_us.to_be_bytes());
                buf.push(p.ac_class);
                buf.push(p.cl);
            }
        }
    }
    if let Some(evolution) = &h.evolution {
        buf.extend_from_slice(&evolution.e_cur.to_be_bytes());
        buf.extend_from_slice(&evolution.e_echo.to_be_bytes());
    }
    if let Some(accum) = &h.accum {
        if accum.ac_min > 0xf {
            return Err(EncodeError::BadRateClass(accum.ac_min));
        }
        buf.push(accum.ac_min);
        buf.extend_from_slice(&accum.ql_sum_us.to_be_bytes());
        buf.push(accum.ttl_prime);
        buf.push(accum.echoed_delta);
    }
    debug_assert_eq!(buf.len(), h.encoded_len());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecodeError::Truncated {
                context,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DecodeError> {
        let b = self.take(2, context)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DecodeError> {
        let b = self.take(4, context)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, DecodeError> {
        let b = self.take(8, context)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    fn addr(&mut self, context: &'static str) -> Result<IpAddr, DecodeError> {
        let b: [u8; 16] = self.take(16, context)?.try_into().unwrap();
        let v6 = Ipv6Addr::from(b);
        Ok(match v6.to_ipv4_mapped() {
            Some(v4) => IpAddr::V4(v4),
            None => IpAddr::V6(v6),
        })
    }
}

/// Deserialize a header, returning it plus the number of trailing bytes that
/// were not part of the shim (the transport payload).
pub fn decode_shim(bytes: &[u8]) -> Result<(ShimHeader, usize), DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let version = r.u8("version")?;
    if version != SHIM_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let presence = r.u8("presence")?;

    let mut h = ShimHeader::default();
    if presence & PRESENCE_HOSTID != 0 {
        h.host_id = Some(r.u16("host id")?);
    }
    if presence & PRESENCE_TIMING != 0 {
        h.timing = Some(unpack_compact_timing(r.u32("timing word")?));
    }
    if presence & PRESENCE_NONCE != 0 {
        h.nonce = Some(NonceTuple {
            n_xmit: r.u32("nonce n_xmit")?,
            n_sum: r.u32("nonce n_sum")?,
        });
    }
    if presence & PRESENCE_INTEGRITY != 0 {
        let cover_bits = r.u8("integrity cover")?;
        // Reserved cover bits are not a transport error; mask them off.
        let i_cover = CoverSet(cover_bits & CoverSet::VALID_MASK);
        let i_mode = IntegrityMode::from_code(r.u8("integrity mode")?)?;
        h.integrity = Some(IntegrityTuple {
            i_cover,
            i_mode,
            i_hash: r.u64("integrity hash")?,
            i_echo: r.u64("integrity echo")?,
        });
    }
    if presence & PRESENCE_HOPREQ != 0 {
        let packed = r.u8("hop request")?;
        let kind = HopKind::from_code(packed >> 4, "hop request kind")?;
        let target = r.u8("hop request target")?;
        let strategy = match packed & 0x0f {
            0 => StampStrategy::Probabilistic,
            1 => StampStrategy::Triggered { target_ttl: target },
            other => {
                return Err(DecodeError::BadValue {
                    field: "hop request strategy",
                    value: other,
                })
            }
        };
        h.hop_request = Some(HopRequest { kind, strategy });
    }
    if presence & PRESENCE_HOPSTAMP != 0 {
        let stamped_ttl = r.u8("hop stamp ttl")?;
        let kind = HopKind::from_code(r.u8("hop stamp kind")?, "hop stamp kind")?;
        let body = match kind {
            HopKind::Topology => HopStampBody::Topology(TopologyStamp {
                router_id: r.u32("stamp router id")?,
                as_number: r.u32("stamp as number")?,
                ip_arrive: r.addr("stamp arrival address")?,
                ip_depart: r.addr("stamp departure address")?,
            }),
            HopKind::Performance => HopStampBody::Performance(PerformanceStamp {
                t_now: r.u32("stamp t_now")?,
                ql_us: r.u16("stamp queue length")?,
                ac_class: r.u8("stamp capacity class")? & 0xf,
                cl: r.u8("stamp congestion level")?,
            }),
        };
        h.hop_stamp = Some(HopStamp { stamped_ttl, body });
    }
    if presence & PRESENCE_EVOLUTION != 0 {
        h.evolution = Some(EvolutionTuple {
            e_cur: r.u16("evolution e_cur")?,
            e_echo: r.u16("evolution e_echo")?,
        });
    }
    if presence & PRESENCE_ACCUM != 0 {
        h.accum = Some(AccumTuple {
            ac_min: r.u8("accum capacity class")? & 0xf,
            ql_sum_us: r.u16("accum queue sum")?,
            ttl_prime: r.u8("accum ttl'")?,
            echoed_delta: r.u8("accum echoed delta")?,
        });
    }
    Ok((h, bytes.len() - r.pos))
}

/// Coarse capacity class for a rate: largest N <= 15 with 80 kbit/s * 2^N
/// at or below the rate. Rates under 80 kbit/s map to class 0.
pub fn coarse_rate_class(bits_per_sec: u64) -> u8 {
    const BASE: u64 = 80_000;
    let mut class = 0u8;
    while class < 15 && BASE << (class + 1) <= bits_per_sec {
        class += 1;
    }
    class
}

/// Rate floor represented by a coarse class.
pub fn class_rate_floor(class: u8) -> u64 {
    80_000u64 << class.min(15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_header_is_two_bytes() {
        let h = ShimHeader::default();
        let bytes = encode_shim(&h).unwrap();
        assert_eq!(bytes, vec![SHIM_VERSION, 0x00]);
    }

    #[test]
    fn timing_only_header_is_six_bytes() {
        let h = ShimHeader {
            timing: Some(TimingTuple {
                t_now: 143,
                t_echo: 45,
                t_delta: 15,
                granularity: Granularity::Micros1,
            }),
            ..Default::default()
        };
        let bytes = encode_shim(&h).unwrap();
        assert_eq!(bytes.len(), 6);
        assert_eq!(h.encoded_len(), 6);
        let (decoded, rest) = decode_shim(&bytes).unwrap();
        assert_eq!(decoded, h);
        assert_eq!(rest, 0);
    }

    #[test]
    fn decode_bare_version_and_presence() {
        let (h, rest) = decode_shim(&[SHIM_VERSION, 0x00]).unwrap();
        assert_eq!(h, ShimHeader::default());
        assert_eq!(rest, 0);
    }

    #[test]
    fn decode_reports_payload_remainder() {
        let (h, rest) = decode_shim(&[SHIM_VERSION, 0x00, 0xde, 0xad, 0xbe]).unwrap();
        assert_eq!(h, ShimHeader::default());
        assert_eq!(rest, 3);
    }

    #[test]
    fn one_byte_input_is_truncated() {
        assert!(matches!(
            decode_shim(&[SHIM_VERSION]),
            Err(DecodeError::Truncated { .. })
        ));
        assert!(matches!(
            decode_shim(&[]),
            Err(DecodeError::Truncated { .. })
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        assert_eq!(
            decode_shim(&[9, 0x00]),
            Err(DecodeError::BadVersion(9))
        );
    }

    #[test]
    fn pack_zero_tuple() {
        let t = TimingTuple {
            t_now: 0,
            t_echo: 0,
            t_delta: 0,
            granularity: Granularity::Micros1,
        };
        assert_eq!(pack_compact_timing(&t).unwrap(), 0);
        assert_eq!(unpack_compact_timing(0), t);
    }

    #[test]
    fn pack_known_word() {
        let t = TimingTuple {
            t_now: 143,
            t_echo: 45,
            t_delta: 15,
            granularity: Granularity::Micros1,
        };
        let word = pack_compact_timing(&t).unwrap();
        // 143 << 22 | 45 << 12 | 15 << 2
        assert_eq!(word, 0x23c2_d03c);
        assert_eq!(unpack_compact_timing(word), t);
    }

    #[test]
    fn pack_overflow_at_1024() {
        let t = TimingTuple {
            t_now: 1024,
            t_echo: 0,
            t_delta: 0,
            granularity: Granularity::Micros1,
        };
        assert_eq!(
            pack_compact_timing(&t),
            Err(EncodeError::TimingOverflow {
                field: "t_now",
                value: 1024
            })
        );
    }

    #[test]
    fn granularity_code_three_is_largest_unit() {
        let t = unpack_compact_timing(0x0000_0003);
        assert_eq!(t.granularity.unit_micros(), 1_000_000);
    }

    #[test]
    fn compact_timing_overhead_under_0_3_percent() {
        let h = ShimHeader {
            timing: Some(TimingTuple {
                t_now: 1,
                t_echo: 2,
                t_delta: 3,
                granularity: Granularity::Micros1,
            }),
            ..Default::default()
        };
        let tuple_bytes = encode_shim(&h).unwrap().len() - 2;
        assert_eq!(tuple_bytes, 4);
        assert!((tuple_bytes as f64) / 1500.0 < 0.003);
    }

    #[test]
    fn empty_stamp_slot_round_trips() {
        let h = ShimHeader {
            hop_request: Some(HopRequest {
                kind: HopKind::Topology,
                strategy: StampStrategy::Triggered { target_ttl: 61 },
            }),
            hop_stamp: Some(HopStamp::empty(HopKind::Topology)),
            ..Default::default()
        };
        let bytes = encode_shim(&h).unwrap();
        assert_eq!(bytes.len(), 2 + 2 + 42);
        let (decoded, _) = decode_shim(&bytes).unwrap();
        assert_eq!(decoded, h);
        assert!(decoded.hop_stamp.unwrap().is_empty());
    }

    #[test]
    fn coarse_class_table() {
        assert_eq!(coarse_rate_class(10_000), 0);
        assert_eq!(coarse_rate_class(80_000), 0);
        assert_eq!(coarse_rate_class(160_000), 1);
        assert_eq!(coarse_rate_class(10_000_000), 6);
        assert_eq!(coarse_rate_class(u64::MAX), 15);
        assert_eq!(class_rate_floor(6), 5_120_000);
    }
}
