//! Group packets into bidirectional flows and show both feature views:
//! byte-pair datagram tokens (RD) and signed packet lengths (PL).
//!
//!     cargo run --example assemble_flows -- capture.pcap

use trafficgraph::flow::{assemble_flows, tokens_to_bytes, DEFAULT_IDLE_TIMEOUT_MICROS};
use trafficgraph::ingest::parse_capture_file;
use trafficgraph::synth::{generate_sessions, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let packets = match std::env::args().nth(1) {
        Some(path) => parse_capture_file(path)?.records,
        None => {
            let cfg = SynthConfig {
                sessions_per_class: 1,
                classes: vec!["web".into()],
                ..SynthConfig::default()
            };
            generate_sessions(&cfg).remove(0).packets
        }
    };

    let flows = assemble_flows(&packets, DEFAULT_IDLE_TIMEOUT_MICROS);
    println!("{} packets -> {} flows", packets.len(), flows.len());
    for (i, f) in flows.iter().enumerate().take(5) {
        let t = f.key.five_tuple();
        println!(
            "flow {i}: {}:{} <-> {}:{} {} ({} packets, start {} us)",
            t.src_ip, t.src_port, t.dst_ip, t.dst_port, t.protocol, f.packets.len(), f.start_ts_micros
        );
        println!("  RD {:04x?}", &f.datagram_tokens[..f.datagram_tokens.len().min(8)]);
        println!("  PL {:?}", &f.directed_lengths[..f.directed_lengths.len().min(8)]);
        // tokens are a lossless view of the payload prefix
        assert!(tokens_to_bytes(&f.datagram_tokens).len() >= f.datagram_tokens.len() * 2 - 1);
    }
    Ok(())
}
