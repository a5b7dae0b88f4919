//! Seeded synthetic traffic corpus.
//!
//! Each class is a mixture of components. Component `k` of every class
//! shares one "profile" (payload tokens and packet sizes), and each class adds
//! its own signature tokens, sizes and burst rhythm on top. With every
//! component present on both sides the profiles average out and the class
//! signature separates the classes; withholding components from training
//! makes the shared profiles a misleading cue, which is exactly the kind of
//! shift the split builders are meant to induce.
//!
//! Sessions are materialized as packets, so the corpus exercises the full
//! capture → flow → graph path, and can be written out as pcap files.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow::{assemble_flows_with, FlowConfig};
use crate::ingest::{synthetic_ip_len, PacketRecord, PcapWriter, Protocol};
use crate::oodgen::{graph_features, LabeledPool, PoolItem};
use crate::seeding::derive_seed_str;
use crate::trg::{build_trg, TrafficRelationGraph, DEFAULT_GAMMA_MICROS};

const BASE_TS_MICROS: u64 = 1_600_000_000_000_000;
const TOKENS_PER_SET: usize = 8;
const NOISE_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub components_per_class: usize,
    pub sessions_per_class: usize,
    /// Probability that a token or packet size comes from the class
    /// signature rather than the component profile.
    pub signature_weight: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: vec!["chat".into(), "stream".into(), "web".into()],
            components_per_class: 5,
            sessions_per_class: 100,
            signature_weight: 0.5,
            seed: 0,
        }
    }
}

/// Burst rhythm of a class.
#[derive(Debug, Clone, Copy)]
struct Rhythm {
    bursts: (usize, usize),
    flows_per_burst: (usize, usize),
    packets: (usize, usize),
    protocol: Protocol,
}

fn rhythm(class_index: usize) -> Rhythm {
    match class_index % 3 {
        0 => Rhythm {
            bursts: (5, 8),
            flows_per_burst: (1, 2),
            packets: (4, 8),
            protocol: Protocol::Tcp,
        },
        1 => Rhythm {
            bursts: (2, 3),
            flows_per_burst: (3, 5),
            packets: (10, 16),
            protocol: Protocol::Udp,
        },
        _ => Rhythm {
            bursts: (3, 5),
            flows_per_burst: (2, 3),
            packets: (6, 12),
            protocol: Protocol::Tcp,
        },
    }
}

fn token_set(tag: &str, index: usize) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(index as u64, tag));
    (0..TOKENS_PER_SET).map(|_| rng.gen()).collect()
}

/// Payload sizes of profile `k` sit in their own size band.
fn profile_sizes(k: usize) -> Vec<usize> {
    let base = [30, 240, 560, 900, 1300][k % 5] + 7 * (k / 5);
    (0..4).map(|i| base + 13 * i).collect()
}

fn class_sizes(c: usize) -> Vec<usize> {
    (0..4).map(|i| 150 + 11 * c + 47 * i).collect()
}

/// One generated capture session.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub sample_id: String,
    pub class: String,
    pub component: String,
    pub packets: Vec<PacketRecord>,
}

pub fn component_name(k: usize) -> String {
    format!("c{k}")
}

/// Generate all sessions, class by class, components round-robin.
pub fn generate_sessions(cfg: &SynthConfig) -> Vec<SynthSession> {
    let mut out = Vec::with_capacity(cfg.classes.len() * cfg.sessions_per_class);
    for (ci, class) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.sessions_per_class {
            let k = i % cfg.components_per_class.max(1);
            let sample_id = format!("{class}/{}/{i:04}", component_name(k));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(cfg.seed, &sample_id));
            let packets = session_packets(cfg, ci, k, i, &mut rng);
            out.push(SynthSession {
                sample_id,
                class: class.clone(),
                component: component_name(k),
                packets,
            });
        }
    }
    out
}

fn session_packets(cfg: &SynthConfig, ci: usize, k: usize, session: usize, rng: &mut ChaCha8Rng) -> Vec<PacketRecord> {
    let r = rhythm(ci);
    let class_tokens = token_set("class", ci);
    let profile_tokens = token_set("profile", k);
    let sizes_c = class_sizes(ci);
    let sizes_p = profile_sizes(k);
    let client = IpAddr::V4(Ipv4Addr::new(192, 168, (session / 250) as u8, (session % 250) as u8 + 1));

    let pick_sig = |rng: &mut ChaCha8Rng| rng.gen_bool(cfg.signature_weight);
    let mut packets = Vec::new();
    let mut t = BASE_TS_MICROS + rng.gen_range(0..1_000_000);
    let mut flow_no = 0u16;
    for _ in 0..rng.gen_range(r.bursts.0..=r.bursts.1) {
        for _ in 0..rng.gen_range(r.flows_per_burst.0..=r.flows_per_burst.1) {
            let server = IpAddr::V4(Ipv4Addr::new(10, ci as u8, k as u8, rng.gen_range(1..=254)));
            let cport = 40_000 + flow_no;
            let sport = if r.protocol == Protocol::Udp { 3478 } else { 443 };
            flow_no += 1;
            let mut pt = t;
            for p in 0..rng.gen_range(r.packets.0..=r.packets.1) {
                let outbound = p % 3 != 1;
                let len = if pick_sig(rng) {
                    *sizes_c.choose(rng).expect("non-empty")
                } else {
                    *sizes_p.choose(rng).expect("non-empty")
                };
                let mut payload = Vec::with_capacity(len + 1);
                while payload.len() < len {
                    let tok: u16 = if rng.gen_bool(NOISE_RATE) {
                        rng.gen()
                    } else if pick_sig(rng) {
                        *class_tokens.choose(rng).expect("non-empty")
                    } else {
                        *profile_tokens.choose(rng).expect("non-empty")
                    };
                    payload.extend_from_slice(&tok.to_be_bytes());
                }
                payload.truncate(len);
                let (src_ip, dst_ip, src_port, dst_port) = if outbound {
                    (client, server, cport, sport)
                } else {
                    (server, client, sport, cport)
                };
                packets.push(PacketRecord {
                    ts_micros: pt,
                    src_ip,
                    dst_ip,
                    src_port,
                    dst_port,
                    protocol: r.protocol,
                    ip_len: synthetic_ip_len(src_ip, r.protocol, payload.len()),
                    payload,
                    capture_index: 0,
                });
                pt += rng.gen_range(200..5_000);
            }
            t += rng.gen_range(50_000..400_000);
        }
        t += rng.gen_range(2_000_000..6_000_000);
    }
    packets.sort_by_key(|p| p.ts_micros);
    for (i, p) in packets.iter_mut().enumerate() {
        p.capture_index = i as u64;
    }
    packets
}

/// A labelled graph with its pool coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGraph {
    pub sample_id: String,
    pub class: String,
    pub component: String,
    pub graph: TrafficRelationGraph,
}

/// Session packets → flows → graph, labelled with the session's class.
pub fn session_graph(s: &SynthSession, flow_cfg: &FlowConfig, gamma_micros: u64) -> TrafficRelationGraph {
    let records: Vec<_> = assemble_flows_with(&s.packets, flow_cfg)
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rec = f.to_record(i as u64);
            rec.label = Some(s.class.clone());
            rec
        })
        .collect();
    let mut g = build_trg(&records, gamma_micros);
    g.graph_id = s.sample_id.clone();
    g
}

pub fn generate_corpus(cfg: &SynthConfig) -> Vec<SynthGraph> {
    let flow_cfg = FlowConfig::default();
    generate_sessions(cfg)
        .iter()
        .map(|s| SynthGraph {
            sample_id: s.sample_id.clone(),
            class: s.class.clone(),
            component: s.component.clone(),
            graph: session_graph(s, &flow_cfg, DEFAULT_GAMMA_MICROS),
        })
        .collect()
}

/// Pool over a corpus using the default graph features.
pub fn corpus_pool(corpus: &[SynthGraph]) -> LabeledPool {
    LabeledPool {
        items: corpus
            .iter()
            .map(|g| PoolItem {
                sample_id: g.sample_id.clone(),
                class: g.class.clone(),
                component: g.component.clone(),
                features: graph_features(&g.graph),
            })
            .collect(),
    }
}

/// One line of a capture-tree mapping file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingEntry {
    /// Path relative to the mapping file's directory.
    pub path: String,
    pub class: String,
    pub component: String,
}

pub const MAPPING_FILE: &str = "mapping.jsonl";

/// Write each session as `<dir>/<sample_id>.pcap` plus a mapping file.
pub fn write_capture_tree(dir: &Path, sessions: &[SynthSession]) -> io::Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(sessions.len());
    let mut mapping = BufWriter::new(fs::File::create(dir.join(MAPPING_FILE))?);
    for s in sessions {
        let rel = format!("{}.pcap", s.sample_id);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = PcapWriter::new(BufWriter::new(fs::File::create(&path)?))?;
        for p in &s.packets {
            w.write_record(p)?;
        }
        w.into_inner().flush()?;
        serde_json::to_writer(
            &mut mapping,
            &MappingEntry {
                path: rel,
                class: s.class.clone(),
                component: s.component.clone(),
            },
        )?;
        mapping.write_all(b"\n")?;
        paths.push(path);
    }
    mapping.flush()?;
    Ok(paths)
}
