//! Classic pcap parsing into normalized [`PacketRecord`] streams.
//!
//! Only Ethernet (with up to two VLAN tags) and raw-IP link types are
//! understood. Every record in the file is either yielded as a
//! `PacketRecord` or counted as skipped; non-first IP fragments are dropped
//! without reassembly.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
/// DLT_RAW as written by some BSD-derived tools.
const LINKTYPE_RAW_BSD: u32 = 12;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;
const MAX_VLAN_TAGS: usize = 2;

const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed pcap global header: {0}")]
    MalformedHeader(String),
    #[error("truncated record after {parsed} successfully parsed records")]
    TruncatedRecord { parsed: usize },
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
}

impl Protocol {
    pub fn ip_number(self) -> u8 {
        match self {
            Protocol::Tcp => IPPROTO_TCP,
            Protocol::Udp => IPPROTO_UDP,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

/// One captured TCP or UDP packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts_micros: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    /// Transport payload, headers stripped.
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    /// Total IP datagram length as declared by the IP header.
    pub ip_len: u32,
    pub capture_index: u64,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimestampResolution {
    Micros,
    Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureHeader {
    pub byte_order: ByteOrder,
    pub resolution: TimestampResolution,
    pub snaplen: u32,
    pub link_type: u32,
}

/// Why a record was not turned into a [`PacketRecord`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Not IP, or IP carrying something other than TCP/UDP.
    pub non_transport: usize,
    /// Non-first IP fragments.
    pub fragments: usize,
    /// Headers cut short by the capture length or inconsistent.
    pub malformed: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.non_transport + self.fragments + self.malformed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub header: CaptureHeader,
    pub records: Vec<PacketRecord>,
    pub skipped: SkipCounts,
    /// Number of pcap records in the file.
    pub total_records: usize,
}

impl Capture {
    pub fn skipped_count(&self) -> usize {
        self.skipped.total()
    }
}

fn parse_global_header(bytes: &[u8]) -> Result<CaptureHeader, IngestError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::MalformedHeader(format!(
            "need {GLOBAL_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let raw = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let (byte_order, resolution) = if u32::from_le_bytes(raw) == MAGIC_MICROS {
        (ByteOrder::Little, TimestampResolution::Micros)
    } else if u32::from_be_bytes(raw) == MAGIC_MICROS {
        (ByteOrder::Big, TimestampResolution::Micros)
    } else if u32::from_le_bytes(raw) == MAGIC_NANOS {
        (ByteOrder::Little, TimestampResolution::Nanos)
    } else if u32::from_be_bytes(raw) == MAGIC_NANOS {
        (ByteOrder::Big, TimestampResolution::Nanos)
    } else {
        return Err(IngestError::MalformedHeader(format!(
            "bad magic {:02x}{:02x}{:02x}{:02x}",
            raw[0], raw[1], raw[2], raw[3]
        )));
    };
    let snaplen = read_u32(&bytes[16..20], byte_order);
    // The top four bits may carry FCS length information.
    let link_type = read_u32(&bytes[20..24], byte_order) & 0x0fff_ffff;
    match link_type {
        LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_RAW_BSD => {}
        other => return Err(IngestError::UnsupportedLinkType(other)),
    }
    Ok(CaptureHeader {
        byte_order,
        resolution,
        snaplen,
        link_type,
    })
}

fn read_u32(b: &[u8], order: ByteOrder) -> u32 {
    let raw = [b[0], b[1], b[2], b[3]];
    match order {
        ByteOrder::Little => u32::from_le_bytes(raw),
        ByteOrder::Big => u32::from_be_bytes(raw),
    }
}

/// Parse an in-memory classic pcap file.
pub fn parse_capture(bytes: &[u8]) -> Result<Capture, IngestError> {
    let header = parse_global_header(bytes)?;
    let mut records = Vec::new();
    let mut skipped = SkipCounts::default();
    let mut total = 0usize;
    let mut offset = GLOBAL_HEADER_LEN;

    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            return Err(IngestError::TruncatedRecord { parsed: total });
        }
        let rh = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = u64::from(read_u32(&rh[0..4], header.byte_order));
        let ts_frac = u64::from(read_u32(&rh[4..8], header.byte_order));
        let incl_len = read_u32(&rh[8..12], header.byte_order) as usize;
        offset += RECORD_HEADER_LEN;
        if bytes.len() - offset < incl_len {
            return Err(IngestError::TruncatedRecord { parsed: total });
        }
        let frame = &bytes[offset..offset + incl_len];
        offset += incl_len;

        let ts_micros = match header.resolution {
            TimestampResolution::Micros => ts_sec * 1_000_000 + ts_frac,
            TimestampResolution::Nanos => ts_sec * 1_000_000 + ts_frac / 1000,
        };
        let capture_index = total as u64;
        total += 1;

        match decode_frame(frame, header.link_type) {
            Decoded::Packet(p) => records.push(PacketRecord {
                ts_micros,
                src_ip: p.src_ip,
                dst_ip: p.dst_ip,
                src_port: p.src_port,
                dst_port: p.dst_port,
                protocol: p.protocol,
                payload: p.payload.to_vec(),
                ip_len: p.ip_len,
                capture_index,
            }),
            Decoded::NonTransport => skipped.non_transport += 1,
            Decoded::Fragment => skipped.fragments += 1,
            Decoded::Malformed => skipped.malformed += 1,
        }
    }

    Ok(Capture {
        header,
        records,
        skipped,
        total_records: total,
    })
}

pub fn parse_capture_file(path: impl AsRef<std::path::Path>) -> Result<Capture, IngestError> {
    let bytes = std::fs::read(path)?;
    parse_capture(&bytes)
}

struct TransportPacket<'a> {
    src_ip: IpAddr,
    dst_ip: IpAddr,
    src_port: u16,
    dst_port: u16,
    protocol: Protocol,
    payload: &'a [u8],
    ip_len: u32,
}

enum Decoded<'a> {
    Packet(TransportPacket<'a>),
    NonTransport,
    Fragment,
    Malformed,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn decode_frame(frame: &[u8], link_type: u32) -> Decoded<'_> {
    match link_type {
        LINKTYPE_ETHERNET => decode_ethernet(frame),
        _ => match frame.first().map(|b| b >> 4) {
            Some(4) => decode_ipv4(frame),
            Some(6) => decode_ipv6(frame),
            Some(_) => Decoded::NonTransport,
            None => Decoded::Malformed,
        },
    }
}

fn decode_ethernet(frame: &[u8]) -> Decoded<'_> {
    if frame.len() < 14 {
        return Decoded::Malformed;
    }
    let mut ethertype = be16(frame, 12);
    let mut offset = 14;
    let mut tags = 0;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if tags == MAX_VLAN_TAGS {
            return Decoded::NonTransport;
        }
        if frame.len() < offset + 4 {
            return Decoded::Malformed;
        }
        ethertype = be16(frame, offset + 2);
        offset += 4;
        tags += 1;
    }
    match ethertype {
        ETHERTYPE_IPV4 => decode_ipv4(&frame[offset..]),
        ETHERTYPE_IPV6 => decode_ipv6(&frame[offset..]),
        _ => Decoded::NonTransport,
    }
}

fn decode_ipv4(ip: &[u8]) -> Decoded<'_> {
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return Decoded::Malformed;
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total_len = usize::from(be16(ip, 2));
    if ihl < 20 || total_len < ihl || ip.len() < ihl {
        return Decoded::Malformed;
    }
    let frag_offset = be16(ip, 6) & 0x1fff;
    if frag_offset != 0 {
        return Decoded::Fragment;
    }
    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    // Ethernet trailers are not part of the datagram; snaplen may cut it short.
    let end = total_len.min(ip.len());
    decode_transport(ip[9], src, dst, &ip[ihl..end], total_len as u32)
}

fn decode_ipv6(ip: &[u8]) -> Decoded<'_> {
    if ip.len() < 40 || ip[0] >> 4 != 6 {
        return Decoded::Malformed;
    }
    let payload_len = usize::from(be16(ip, 4));
    let mut next = ip[6];
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&ip[8..24]);
    dst.copy_from_slice(&ip[24..40]);
    let end = (40 + payload_len).min(ip.len());
    let mut offset = 40;
    loop {
        match next {
            // hop-by-hop, routing, destination options
            0 | 43 | 60 => {
                if end < offset + 8 {
                    return Decoded::Malformed;
                }
                let len = (usize::from(ip[offset + 1]) + 1) * 8;
                next = ip[offset];
                offset += len;
            }
            44 => {
                if end < offset + 8 {
                    return Decoded::Malformed;
                }
                if be16(ip, offset + 2) >> 3 != 0 {
                    return Decoded::Fragment;
                }
                next = ip[offset];
                offset += 8;
            }
            _ => break,
        }
        if offset > end {
            return Decoded::Malformed;
        }
    }
    decode_transport(
        next,
        IpAddr::V6(Ipv6Addr::from(src)),
        IpAddr::V6(Ipv6Addr::from(dst)),
        &ip[offset..end],
        (40 + payload_len) as u32,
    )
}

fn decode_transport(
    proto: u8,
    src_ip: IpAddr,
    dst_ip: IpAddr,
    seg: &[u8],
    ip_len: u32,
) -> Decoded<'_> {
    let (protocol, header_len) = match proto {
        IPPROTO_TCP => {
            if seg.len() < 20 {
                return Decoded::Malformed;
            }
            let data_offset = usize::from(seg[12] >> 4) * 4;
            if data_offset < 20 || seg.len() < data_offset {
                return Decoded::Malformed;
            }
            (Protocol::Tcp, data_offset)
        }
        IPPROTO_UDP => {
            if seg.len() < 8 {
                return Decoded::Malformed;
            }
            (Protocol::Udp, 8)
        }
        _ => return Decoded::NonTransport,
    };
    Decoded::Packet(TransportPacket {
        src_ip,
        dst_ip,
        src_port: be16(seg, 0),
        dst_port: be16(seg, 2),
        protocol,
        payload: &seg[header_len..],
        ip_len,
    })
}

/// Criteria for [`filter_packets`]; unpopulated criteria match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Empty means all protocols.
    #[serde(default)]
    pub include_protocols: BTreeSet<Protocol>,
    #[serde(default)]
    pub min_payload_len: usize,
    /// A record passes when either endpoint is listed.
    #[serde(default)]
    pub ip_allowlist: Option<BTreeSet<IpAddr>>,
}

impl FilterSpec {
    pub fn matches(&self, r: &PacketRecord) -> bool {
        (self.include_protocols.is_empty() || self.include_protocols.contains(&r.protocol))
            && r.payload.len() >= self.min_payload_len
            && self
                .ip_allowlist
                .as_ref()
                .map_or(true, |allow| allow.contains(&r.src_ip) || allow.contains(&r.dst_ip))
    }
}

pub fn filter_packets(records: &[PacketRecord], spec: &FilterSpec) -> Vec<PacketRecord> {
    records.iter().filter(|r| spec.matches(r)).cloned().collect()
}

/// Write records as JSONL, one [`PacketRecord`] per line.
pub fn write_packets_jsonl<W: Write>(mut out: W, records: &[PacketRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Minimal classic-pcap writer producing Ethernet or raw-IP frames.
///
/// Used to synthesize captures; IPv4/IPv6 and TCP/UDP headers are
/// generated from the record fields with zeroed checksums.
#[derive(Debug)]
pub struct PcapWriter<W: Write> {
    out: W,
    link_type: u32,
    resolution: TimestampResolution,
    byte_order: ByteOrder,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(out: W) -> io::Result<Self> {
        Self::with_format(out, LINKTYPE_ETHERNET, TimestampResolution::Micros, ByteOrder::Little)
    }

    pub fn with_format(
        mut out: W,
        link_type: u32,
        resolution: TimestampResolution,
        byte_order: ByteOrder,
    ) -> io::Result<Self> {
        let magic = match resolution {
            TimestampResolution::Micros => MAGIC_MICROS,
            TimestampResolution::Nanos => MAGIC_NANOS,
        };
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let put32 = |h: &mut Vec<u8>, v: u32| match byte_order {
            ByteOrder::Little => h.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => h.extend_from_slice(&v.to_be_bytes()),
        };
        let put16 = |h: &mut Vec<u8>, v: u16| match byte_order {
            ByteOrder::Little => h.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => h.extend_from_slice(&v.to_be_bytes()),
        };
        put32(&mut header, magic);
        put16(&mut header, 2);
        put16(&mut header, 4);
        put32(&mut header, 0);
        put32(&mut header, 0);
        put32(&mut header, 65_535);
        put32(&mut header, link_type);
        out.write_all(&header)?;
        Ok(PcapWriter {
            out,
            link_type,
            resolution,
            byte_order,
        })
    }

    fn put32(&mut self, v: u32) -> io::Result<()> {
        match self.byte_order {
            ByteOrder::Little => self.out.write_all(&v.to_le_bytes()),
            ByteOrder::Big => self.out.write_all(&v.to_be_bytes()),
        }
    }

    /// Write an arbitrary frame with the given timestamp.
    pub fn write_frame(&mut self, ts_micros: u64, frame: &[u8]) -> io::Result<()> {
        let sec = (ts_micros / 1_000_000) as u32;
        let frac = match self.resolution {
            TimestampResolution::Micros => (ts_micros % 1_000_000) as u32,
            TimestampResolution::Nanos => (ts_micros % 1_000_000) as u32 * 1000,
        };
        self.put32(sec)?;
        self.put32(frac)?;
        self.put32(frame.len() as u32)?;
        self.put32(frame.len() as u32)?;
        self.out.write_all(frame)
    }

    pub fn write_record(&mut self, r: &PacketRecord) -> io::Result<()> {
        let ip = build_ip_packet(r);
        let frame = if self.link_type == LINKTYPE_ETHERNET {
            let ethertype = match r.src_ip {
                IpAddr::V4(_) => ETHERTYPE_IPV4,
                IpAddr::V6(_) => ETHERTYPE_IPV6,
            };
            let mut f = Vec::with_capacity(14 + ip.len());
            f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
            f.extend_from_slice(&ethertype.to_be_bytes());
            f.extend_from_slice(&ip);
            f
        } else {
            ip
        };
        self.write_frame(r.ts_micros, &frame)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Build an IP datagram (IPv4 or IPv6 by address family) for a record.
pub fn build_ip_packet(r: &PacketRecord) -> Vec<u8> {
    let mut seg = Vec::new();
    seg.extend_from_slice(&r.src_port.to_be_bytes());
    seg.extend_from_slice(&r.dst_port.to_be_bytes());
    match r.protocol {
        Protocol::Tcp => {
            seg.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0]); // seq, ack
            seg.push(5 << 4);
            seg.push(0x18); // PSH|ACK
            seg.extend_from_slice(&[0xff, 0xff, 0, 0, 0, 0]);
        }
        Protocol::Udp => {
            seg.extend_from_slice(&((8 + r.payload.len()) as u16).to_be_bytes());
            seg.extend_from_slice(&[0, 0]);
        }
    }
    seg.extend_from_slice(&r.payload);

    match (r.src_ip, r.dst_ip) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let total = (20 + seg.len()) as u16;
            let mut ip = vec![0x45, 0];
            ip.extend_from_slice(&total.to_be_bytes());
            ip.extend_from_slice(&[0, 0, 0x40, 0, 64, r.protocol.ip_number(), 0, 0]);
            ip.extend_from_slice(&s.octets());
            ip.extend_from_slice(&d.octets());
            ip.extend_from_slice(&seg);
            ip
        }
        (s, d) => {
            let s = to_v6(s);
            let d = to_v6(d);
            let mut ip = vec![0x60, 0, 0, 0];
            ip.extend_from_slice(&(seg.len() as u16).to_be_bytes());
            ip.push(r.protocol.ip_number());
            ip.push(64);
            ip.extend_from_slice(&s.octets());
            ip.extend_from_slice(&d.octets());
            ip.extend_from_slice(&seg);
            ip
        }
    }
}

fn to_v6(a: IpAddr) -> Ipv6Addr {
    match a {
        IpAddr::V4(v4) => v4.to_ipv6_mapped(),
        IpAddr::V6(v6) => v6,
    }
}

/// IP datagram length [`build_ip_packet`] produces for these fields.
pub fn synthetic_ip_len(src_ip: IpAddr, protocol: Protocol, payload_len: usize) -> u32 {
    let ip_header = if src_ip.is_ipv4() { 20 } else { 40 };
    let transport = match protocol {
        Protocol::Tcp => 20,
        Protocol::Udp => 8,
    };
    (ip_header + transport + payload_len) as u32
}
