//! Bidirectional five-tuple flows and their two feature sequences:
//! byte-pair datagram tokens and signed packet lengths.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::ingest::{PacketRecord, Protocol};

pub const DEFAULT_IDLE_TIMEOUT_MICROS: u64 = 64_000_000;
pub const DEFAULT_RD_MAX_BYTES: usize = 128;
pub const DEFAULT_PL_MAX_PACKETS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: IpAddr, port: u16) -> Self {
        Endpoint { ip, port }
    }
}

/// Order-independent identity of a bidirectional flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub protocol: Protocol,
}

impl CanonicalKey {
    pub fn of(r: &PacketRecord) -> Self {
        let a = Endpoint::new(r.src_ip, r.src_port);
        let b = Endpoint::new(r.dst_ip, r.dst_port);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        CanonicalKey {
            lo,
            hi,
            protocol: r.protocol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowKey {
    pub canonical: CanonicalKey,
    /// Sender of the first packet; packets it sends count as positive.
    pub anchor: Endpoint,
}

impl FlowKey {
    pub fn from_first_packet(r: &PacketRecord) -> Self {
        FlowKey {
            canonical: CanonicalKey::of(r),
            anchor: Endpoint::new(r.src_ip, r.src_port),
        }
    }

    /// The peer of the anchor.
    pub fn responder(&self) -> Endpoint {
        if self.anchor == self.canonical.lo {
            self.canonical.hi
        } else {
            self.canonical.lo
        }
    }

    /// Same flow with the other endpoint as anchor.
    pub fn reversed(&self) -> Self {
        FlowKey {
            canonical: self.canonical,
            anchor: self.responder(),
        }
    }

    pub fn is_outbound(&self, r: &PacketRecord) -> bool {
        r.src_ip == self.anchor.ip && r.src_port == self.anchor.port
    }

    pub fn five_tuple(&self) -> FiveTuple {
        let dst = self.responder();
        FiveTuple {
            src_ip: self.anchor.ip,
            dst_ip: dst.ip,
            src_port: self.anchor.port,
            dst_port: dst.port,
            protocol: self.canonical.protocol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub idle_timeout_micros: u64,
    pub rd_max_bytes: usize,
    pub pl_max_packets: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            idle_timeout_micros: DEFAULT_IDLE_TIMEOUT_MICROS,
            rd_max_bytes: DEFAULT_RD_MAX_BYTES,
            pl_max_packets: DEFAULT_PL_MAX_PACKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    pub label: Option<String>,
    pub start_ts_micros: u64,
    /// Ordered by `(ts_micros, capture_index)`.
    pub packets: Vec<PacketRecord>,
    pub datagram_tokens: Vec<u16>,
    pub directed_lengths: Vec<i64>,
}

impl Flow {
    fn open(first: PacketRecord) -> Self {
        Flow {
            key: FlowKey::from_first_packet(&first),
            label: None,
            start_ts_micros: first.ts_micros,
            packets: vec![first],
            datagram_tokens: Vec::new(),
            directed_lengths: Vec::new(),
        }
    }

    fn last_ts(&self) -> u64 {
        self.packets.last().map_or(self.start_ts_micros, |p| p.ts_micros)
    }

    fn finish(&mut self, cfg: &FlowConfig) {
        self.datagram_tokens = extract_datagram_tokens(self, cfg.rd_max_bytes);
        self.directed_lengths = extract_directed_lengths(self, cfg.pl_max_packets);
    }

    pub fn to_record(&self, flow_id: u64) -> FlowRecord {
        FlowRecord {
            flow_id,
            label: self.label.clone(),
            source: None,
            start_ts_micros: self.start_ts_micros,
            five_tuple: self.key.five_tuple(),
            datagram_tokens: self.datagram_tokens.clone(),
            directed_lengths: self.directed_lengths.clone(),
            n_packets: self.packets.len(),
        }
    }
}

/// Group packets into bidirectional flows using default feature sizes.
pub fn assemble_flows(records: &[PacketRecord], idle_timeout_micros: u64) -> Vec<Flow> {
    assemble_flows_with(
        records,
        &FlowConfig {
            idle_timeout_micros,
            ..FlowConfig::default()
        },
    )
}

/// Group packets into bidirectional flows; a gap longer than the idle
/// timeout under the same key starts a new flow. Flows come back ordered by
/// start time, ties broken by the capture index of their first packet.
pub fn assemble_flows_with(records: &[PacketRecord], cfg: &FlowConfig) -> Vec<Flow> {
    let mut ordered: Vec<&PacketRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.ts_micros, r.capture_index));

    let mut active: HashMap<CanonicalKey, Flow> = HashMap::new();
    let mut done: Vec<Flow> = Vec::new();
    for r in ordered {
        let key = CanonicalKey::of(r);
        match active.get_mut(&key) {
            Some(flow) if r.ts_micros - flow.last_ts() <= cfg.idle_timeout_micros => {
                flow.packets.push(r.clone());
            }
            Some(_) => {
                let old = active.insert(key, Flow::open(r.clone())).expect("present");
                done.push(old);
            }
            None => {
                active.insert(key, Flow::open(r.clone()));
            }
        }
    }
    done.extend(active.into_values());
    for f in &mut done {
        f.finish(cfg);
    }
    done.sort_by_key(|f| (f.start_ts_micros, f.packets[0].capture_index));
    done
}

/// Big-endian byte pairs; a trailing odd byte becomes the high byte.
pub fn bytes_to_tokens(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks(2)
        .map(|c| (u16::from(c[0]) << 8) | u16::from(c.get(1).copied().unwrap_or(0)))
        .collect()
}

pub fn tokens_to_bytes(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_be_bytes()).collect()
}

/// Concatenated transport payloads, truncated to `max_bytes`, as byte-pair
/// tokens. Short flows yield fewer tokens; nothing is padded.
pub fn extract_datagram_tokens(flow: &Flow, max_bytes: usize) -> Vec<u16> {
    assert!(max_bytes > 0 && max_bytes % 2 == 0, "max_bytes must be even and positive");
    let mut prefix = Vec::with_capacity(max_bytes);
    for p in &flow.packets {
        let room = max_bytes - prefix.len();
        if room == 0 {
            break;
        }
        prefix.extend_from_slice(&p.payload[..p.payload.len().min(room)]);
    }
    bytes_to_tokens(&prefix)
}

/// IP datagram length per packet, positive when sent by the flow's anchor.
pub fn extract_directed_lengths(flow: &Flow, max_packets: usize) -> Vec<i64> {
    assert!(max_packets > 0, "max_packets must be positive");
    flow.packets
        .iter()
        .take(max_packets)
        .map(|p| {
            let len = i64::from(p.ip_len);
            if flow.key.is_outbound(p) {
                len
            } else {
                -len
            }
        })
        .collect()
}

/// Serialized flow: one line of the flow JSONL dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: u64,
    pub label: Option<String>,
    /// Capture file the flow came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub start_ts_micros: u64,
    pub five_tuple: FiveTuple,
    pub datagram_tokens: Vec<u16>,
    pub directed_lengths: Vec<i64>,
    pub n_packets: usize,
}

pub fn write_flows_jsonl<W: Write>(mut out: W, flows: &[FlowRecord]) -> io::Result<()> {
    for f in flows {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read flow records, skipping blank lines and lines without a `flow_id`
/// (such as an artifact header).
pub fn read_flows_jsonl<R: BufRead>(input: R) -> io::Result<Vec<FlowRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        if value.get("flow_id").is_none() {
            continue;
        }
        let rec = serde_json::from_value(value)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
