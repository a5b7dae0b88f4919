//! Instruction-tuning samples built from traffic relation graphs.
//!
//! Two kinds are produced. Graph-matching samples are self-supervised: a
//! subgraph is sampled around a centre node, its node features are listed in
//! shuffled order, and the answer maps every graph token position to the
//! position of its feature entry. Task samples ask for the traffic class of a
//! graph and answer with its label.
//!
//! Prompt templates are the constants [`MATCHING_PROMPT`] and
//! [`TASK_PROMPT`]; `{n}` is replaced by the node count.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, mix64};
use crate::trg::{Edge, TrafficRelationGraph, TrgNode};

pub const GRAPH_BEGIN: &str = "<graph_begin>";
pub const GRAPH_END: &str = "<graph_end>";
pub const GRAPH_TOKEN: &str = "<graph_token>";

pub const DEFAULT_HOPS: usize = 2;
pub const DEFAULT_FANOUT: usize = 5;
/// Tokens and lengths shown per node in a feature entry.
pub const FEATURE_PREFIX: usize = 16;

pub const MATCHING_PROMPT: &str = "The graph tokens <graph> stand for the {n} flows of a traffic relation \
graph, in order. The feature list gives the datagram tokens (RD) and directed packet sizes (PL) of the \
same {n} flows in shuffled order. Match every graph token to its feature entry. Answer with one line per \
graph token in the form `graph_position -> feature_position`.";

pub const TASK_PROMPT: &str = "The graph tokens <graph> stand for the {n} flows of a traffic relation \
graph and the feature list gives their datagram tokens (RD) and directed packet sizes (PL). Which traffic \
class does this traffic belong to? Answer with the class label only.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstrError {
    #[error("node {0} is not in the graph")]
    UnknownNode(u64),
    #[error("label must not be empty")]
    EmptyLabel,
    #[error("fanout must be at least 1")]
    ZeroFanout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrConfig {
    pub h: usize,
    pub fanout: usize,
}

impl Default for InstrConfig {
    fn default() -> Self {
        InstrConfig {
            h: DEFAULT_HOPS,
            fanout: DEFAULT_FANOUT,
        }
    }
}

/// Nodes reached from a centre within `h` sampled hops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    /// Centre first, then breadth-first discovery order.
    pub node_ids: Vec<u64>,
    /// Every parent edge whose endpoints are both included.
    pub edges: Vec<Edge>,
    /// Hop distance from the centre, parallel to `node_ids`.
    pub hops: Vec<usize>,
    pub h: usize,
    pub fanout: usize,
}

impl Subgraph {
    pub fn center(&self) -> u64 {
        self.node_ids[0]
    }
}

/// BFS from `center`. Every expanded node keeps at most `fanout` of its
/// neighbours, chosen uniformly by seeded random keys; kept neighbours not
/// seen before join the next frontier. Expansion stops at depth `h`.
///
/// The kept set of a node depends only on `(seed, node)`, so raising `h` or
/// `fanout` never drops a node.
pub fn sample_subgraph(
    g: &TrafficRelationGraph,
    center: u64,
    h: usize,
    fanout: usize,
    seed: u64,
) -> Result<Subgraph, InstrError> {
    if fanout == 0 {
        return Err(InstrError::ZeroFanout);
    }
    let index = g.index_of();
    let &start = index.get(&center).ok_or(InstrError::UnknownNode(center))?;
    let neighbors = g.neighbors();

    let mut order = vec![start];
    let mut hops = vec![0usize];
    let mut seen: HashSet<usize> = [start].into();
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((u, depth)) = queue.pop_front() {
        if depth == h {
            continue;
        }
        let uid = g.nodes[u].flow_id;
        let mut candidates = neighbors[u].clone();
        candidates.sort_by_key(|&v| (mix64(seed ^ mix64(uid ^ mix64(g.nodes[v].flow_id))), v));
        for &v in candidates.iter().take(fanout) {
            if seen.insert(v) {
                order.push(v);
                hops.push(depth + 1);
                queue.push_back((v, depth + 1));
            }
        }
    }

    let node_ids: Vec<u64> = order.iter().map(|&i| g.nodes[i].flow_id).collect();
    let included: HashSet<u64> = node_ids.iter().copied().collect();
    let edges = g
        .edges
        .iter()
        .filter(|e| included.contains(&e.src) && included.contains(&e.dst))
        .copied()
        .collect();
    Ok(Subgraph {
        node_ids,
        edges,
        hops,
        h,
        fanout,
    })
}

/// `<graph_begin> <graph_token>_1 ... <graph_token>_n <graph_end>`
pub fn render_graph_tokens(n: usize) -> String {
    let mut parts = Vec::with_capacity(n + 2);
    parts.push(GRAPH_BEGIN.to_string());
    parts.extend((1..=n).map(|i| format!("{GRAPH_TOKEN}_{i}")));
    parts.push(GRAPH_END.to_string());
    parts.join(" ")
}

/// `RD: ee08,bf56,...; PL: +128,-74,...` using the first 16 of each.
pub fn feature_text(node: &TrgNode) -> String {
    let rd: Vec<String> = node
        .datagram_tokens
        .iter()
        .take(FEATURE_PREFIX)
        .map(|t| format!("{t:04x}"))
        .collect();
    let pl: Vec<String> = node
        .directed_lengths
        .iter()
        .take(FEATURE_PREFIX)
        .map(|l| format!("{l:+}"))
        .collect();
    format!("RD: {}; PL: {}", rd.join(","), pl.join(","))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    GraphMatching,
    TrafficTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub graph_id: String,
    pub center_node: Option<u64>,
    pub h: Option<usize>,
    pub fanout: Option<usize>,
    pub seed: u64,
    /// 1-based: feature position `j` holds graph node `permutation[j - 1]`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub kind: SampleKind,
    pub graph_tokens: String,
    pub feature_block: Vec<String>,
    pub prompt: String,
    pub answer: String,
    pub meta: SampleMeta,
}

fn shuffled_positions(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

fn nodes_for<'a>(g: &'a TrafficRelationGraph, ids: &[u64]) -> Result<Vec<&'a TrgNode>, InstrError> {
    let index = g.index_of();
    ids.iter()
        .map(|id| index.get(id).map(|&i| &g.nodes[i]).ok_or(InstrError::UnknownNode(*id)))
        .collect()
}

/// Inverse of a 1-based permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p - 1] = j + 1;
    }
    inv
}

/// `i -> j` lines for a 1-based mapping.
pub fn render_mapping(mapping: &[usize]) -> String {
    mapping
        .iter()
        .enumerate()
        .map(|(i, j)| format!("{} -> {}", i + 1, j))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parse `i -> j` lines back into a 1-based mapping.
pub fn parse_mapping(answer: &str) -> Option<Vec<usize>> {
    let mut pairs: Vec<(usize, usize)> = answer
        .lines()
        .map(|line| {
            let (a, b) = line.split_once("->")?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect::<Option<_>>()?;
    pairs.sort_unstable();
    pairs
        .iter()
        .enumerate()
        .all(|(k, &(i, _))| i == k + 1)
        .then(|| pairs.into_iter().map(|(_, j)| j).collect())
}

/// Self-supervised matching sample over a sampled subgraph of `g`.
pub fn gen_graph_matching_sample(
    g: &TrafficRelationGraph,
    sub: &Subgraph,
    seed: u64,
) -> Result<InstructionSample, InstrError> {
    let nodes = nodes_for(g, &sub.node_ids)?;
    let n = nodes.len();
    let perm = shuffled_positions(n, seed);
    let feature_block = perm.iter().map(|&p| feature_text(nodes[p - 1])).collect();
    Ok(InstructionSample {
        kind: SampleKind::GraphMatching,
        graph_tokens: render_graph_tokens(n),
        feature_block,
        prompt: MATCHING_PROMPT.replace("{n}", &n.to_string()),
        answer: render_mapping(&invert_permutation(&perm)),
        meta: SampleMeta {
            graph_id: g.graph_id.clone(),
            center_node: Some(sub.center()),
            h: Some(sub.h),
            fanout: Some(sub.fanout),
            seed,
            permutation: perm,
        },
    })
}

/// Classification sample over the whole graph, or over `sub` when given.
/// Feature entries are listed in seeded shuffled order.
pub fn gen_task_sample(
    g: &TrafficRelationGraph,
    sub: Option<&Subgraph>,
    label: &str,
    seed: u64,
) -> Result<InstructionSample, InstrError> {
    if label.is_empty() {
        return Err(InstrError::EmptyLabel);
    }
    let ids: Vec<u64> = match sub {
        Some(s) => s.node_ids.clone(),
        None => g.nodes.iter().map(|n| n.flow_id).collect(),
    };
    let nodes = nodes_for(g, &ids)?;
    let n = nodes.len();
    let perm = shuffled_positions(n, seed);
    Ok(InstructionSample {
        kind: SampleKind::TrafficTask,
        graph_tokens: render_graph_tokens(n),
        feature_block: perm.iter().map(|&p| feature_text(nodes[p - 1])).collect(),
        prompt: TASK_PROMPT.replace("{n}", &n.to_string()),
        answer: label.to_string(),
        meta: SampleMeta {
            graph_id: g.graph_id.clone(),
            center_node: sub.map(Subgraph::center),
            h: sub.map(|s| s.h),
            fanout: sub.map(|s| s.fanout),
            seed,
            permutation: perm,
        },
    })
}

/// One matching sample per (graph, centre node), every node serving as
/// centre once.
pub fn generate_matching_samples(
    graphs: &[TrafficRelationGraph],
    cfg: &InstrConfig,
    seed: u64,
) -> Result<Vec<InstructionSample>, InstrError> {
    let mut out = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        for node in &g.nodes {
            let s = derive_seed(seed, &[gi as u64, node.flow_id]);
            let sub = sample_subgraph(g, node.flow_id, cfg.h, cfg.fanout, s)?;
            out.push(gen_graph_matching_sample(g, &sub, mix64(s))?);
        }
    }
    Ok(out)
}

/// One task sample per labelled graph; unlabelled graphs are skipped.
pub fn generate_task_samples(
    graphs: &[TrafficRelationGraph],
    seed: u64,
) -> Result<Vec<InstructionSample>, InstrError> {
    graphs
        .iter()
        .enumerate()
        .filter_map(|(gi, g)| g.label.as_deref().map(|l| (gi, g, l)))
        .filter(|(_, g, _)| !g.nodes.is_empty())
        .map(|(gi, g, label)| gen_task_sample(g, None, label, derive_seed(seed, &[gi as u64])))
        .collect()
}

pub fn write_samples_jsonl<W: Write>(mut out: W, samples: &[InstructionSample]) -> io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Count of `<graph_token>` units in a rendered token string.
pub fn count_graph_tokens(rendered: &str) -> usize {
    rendered
        .split(' ')
        .filter(|t| t.starts_with(GRAPH_TOKEN))
        .count()
}

/// Hop distance of each node of `sub`, keyed by flow id.
pub fn hop_map(sub: &Subgraph) -> HashMap<u64, usize> {
    sub.node_ids.iter().copied().zip(sub.hops.iter().copied()).collect()
}
