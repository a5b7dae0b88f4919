//! Parse a capture and dump its TCP/UDP packets as JSONL.
//!
//!     cargo run --example parse_pcap -- capture.pcap
//!
//! Without an argument a small capture is synthesized in memory.

use std::io;
use std::net::IpAddr;

use trafficgraph::ingest::{
    filter_packets, parse_capture, synthetic_ip_len, write_packets_jsonl, FilterSpec, PacketRecord, PcapWriter, Protocol,
};

fn demo_capture() -> io::Result<Vec<u8>> {
    let client: IpAddr = "192.168.1.10".parse().unwrap();
    let server: IpAddr = "10.0.0.5".parse().unwrap();
    let mut w = PcapWriter::new(Vec::new())?;
    for (i, (proto, payload)) in [
        (Protocol::Tcp, b"GET / HTTP/1.1\r\n".to_vec()),
        (Protocol::Tcp, Vec::new()),
        (Protocol::Udp, b"\x12\x34query".to_vec()),
    ]
    .into_iter()
    .enumerate()
    {
        w.write_record(&PacketRecord {
            ts_micros: 1_700_000_000_000_000 + i as u64 * 1_500,
            src_ip: client,
            dst_ip: server,
            src_port: 51_000 + i as u16,
            dst_port: if proto == Protocol::Tcp { 443 } else { 53 },
            protocol: proto,
            ip_len: synthetic_ip_len(client, proto, payload.len()),
            payload,
            capture_index: i as u64,
        })?;
    }
    Ok(w.into_inner())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = match std::env::args().nth(1) {
        Some(path) => std::fs::read(path)?,
        None => demo_capture()?,
    };
    let cap = parse_capture(&bytes)?;
    eprintln!(
        "{} records, {} packets kept, skipped {:?}",
        cap.total_records,
        cap.records.len(),
        cap.skipped
    );

    // TCP with a non-empty payload only
    let spec = FilterSpec {
        include_protocols: [Protocol::Tcp].into_iter().collect(),
        min_payload_len: 1,
        ip_allowlist: None,
    };
    let kept = filter_packets(&cap.records, &spec);
    eprintln!("{} packet(s) after filtering", kept.len());
    write_packets_jsonl(io::stdout().lock(), &kept)?;
    Ok(())
}
