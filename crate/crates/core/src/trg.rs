//! Flow-level BURST segmentation and Traffic Relation Graph construction.
//!
//! Flows are sorted by start time and cut into bursts: a flow joins the
//! current burst when its start is within `gamma` of the start of the most
//! recently added member, otherwise it opens a new burst. Members of a burst
//! are chained by burst edges. Between consecutive bursts, the last flow of
//! the earlier burst is joined by adjacency edges to the first and the last
//! flow of the later one.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::flow::FlowRecord;

pub const DEFAULT_GAMMA_MICROS: u64 = 1_000_000;

/// Anything with a flow id and a start time can be segmented.
pub trait Timed {
    fn flow_id(&self) -> u64;
    fn start_ts_micros(&self) -> u64;
}

impl Timed for FlowRecord {
    fn flow_id(&self) -> u64 {
        self.flow_id
    }
    fn start_ts_micros(&self) -> u64 {
        self.start_ts_micros
    }
}

impl Timed for TrgNode {
    fn flow_id(&self) -> u64 {
        self.flow_id
    }
    fn start_ts_micros(&self) -> u64 {
        self.start_ts_micros
    }
}

/// `(flow_id, start_ts_micros)`
impl Timed for (u64, u64) {
    fn flow_id(&self) -> u64 {
        self.0
    }
    fn start_ts_micros(&self) -> u64 {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Burst {
    pub flow_ids: Vec<u64>,
    pub start_ts_micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Burst,
    Adjacency,
}

/// Undirected, kind-tagged edge; `src` is the earlier flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub kind: EdgeKind,
}

impl Edge {
    fn unordered(&self) -> (u64, u64, EdgeKind) {
        (self.src.min(self.dst), self.src.max(self.dst), self.kind)
    }
}

/// A graph node: one flow with the features the encoders consume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrgNode {
    pub flow_id: u64,
    pub label: Option<String>,
    #[serde(default)]
    pub start_ts_micros: u64,
    #[serde(default)]
    pub datagram_tokens: Vec<u16>,
    #[serde(default)]
    pub directed_lengths: Vec<i64>,
}

impl From<&FlowRecord> for TrgNode {
    fn from(f: &FlowRecord) -> Self {
        TrgNode {
            flow_id: f.flow_id,
            label: f.label.clone(),
            start_ts_micros: f.start_ts_micros,
            datagram_tokens: f.datagram_tokens.clone(),
            directed_lengths: f.directed_lengths.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRelationGraph {
    #[serde(default)]
    pub graph_id: String,
    /// Class of the traffic the graph was built from, if known.
    #[serde(default)]
    pub label: Option<String>,
    pub gamma_micros: u64,
    /// In start-time order.
    pub nodes: Vec<TrgNode>,
    pub bursts: Vec<Vec<u64>>,
    pub edges: Vec<Edge>,
}

/// Split flows into bursts with the chained start-time rule.
pub fn segment_bursts<T: Timed>(flows: &[T], gamma_micros: u64) -> Vec<Burst> {
    assert!(gamma_micros > 0, "gamma must be positive");
    let mut order: Vec<&T> = flows.iter().collect();
    order.sort_by_key(|f| f.start_ts_micros());

    let mut bursts: Vec<Burst> = Vec::new();
    let mut last_start = 0u64;
    for f in order {
        let start = f.start_ts_micros();
        match bursts.last_mut() {
            Some(b) if start - last_start <= gamma_micros => b.flow_ids.push(f.flow_id()),
            _ => bursts.push(Burst {
                flow_ids: vec![f.flow_id()],
                start_ts_micros: start,
            }),
        }
        last_start = start;
    }
    bursts
}

/// Burst-chain and adjacency edges for an ordered burst sequence.
pub fn burst_edges(bursts: &[Burst]) -> Vec<Edge> {
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |e: Edge, edges: &mut Vec<Edge>| {
        if e.src != e.dst && seen.insert(e.unordered()) {
            edges.push(e);
        }
    };
    for (i, b) in bursts.iter().enumerate() {
        for pair in b.flow_ids.windows(2) {
            push(
                Edge {
                    src: pair[0],
                    dst: pair[1],
                    kind: EdgeKind::Burst,
                },
                &mut edges,
            );
        }
        if i > 0 {
            let prev_last = *bursts[i - 1].flow_ids.last().expect("bursts are non-empty");
            for &target in [b.flow_ids[0], *b.flow_ids.last().expect("non-empty")].iter() {
                push(
                    Edge {
                        src: prev_last,
                        dst: target,
                        kind: EdgeKind::Adjacency,
                    },
                    &mut edges,
                );
            }
        }
    }
    edges
}

/// Build the graph for one trace of flows.
pub fn build_trg(flows: &[FlowRecord], gamma_micros: u64) -> TrafficRelationGraph {
    let mut nodes: Vec<TrgNode> = flows.iter().map(TrgNode::from).collect();
    nodes.sort_by_key(|n| n.start_ts_micros);
    trg_from_nodes(nodes, gamma_micros)
}

/// Build a graph over pre-made nodes (sorted by start time here).
pub fn trg_from_nodes(mut nodes: Vec<TrgNode>, gamma_micros: u64) -> TrafficRelationGraph {
    nodes.sort_by_key(|n| n.start_ts_micros);
    let bursts = segment_bursts(&nodes, gamma_micros);
    let edges = burst_edges(&bursts);
    let label = common_label(&nodes);
    TrafficRelationGraph {
        graph_id: String::new(),
        label,
        gamma_micros,
        nodes,
        bursts: bursts.into_iter().map(|b| b.flow_ids).collect(),
        edges,
    }
}

fn common_label(nodes: &[TrgNode]) -> Option<String> {
    let first = nodes.first()?.label.clone()?;
    nodes
        .iter()
        .all(|n| n.label.as_deref() == Some(first.as_str()))
        .then_some(first)
}

/// One graph per start-time window of `window_micros`, measured from the
/// earliest flow. Windows without flows produce no graph.
pub fn build_trgs_windowed(
    flows: &[FlowRecord],
    gamma_micros: u64,
    window_micros: u64,
) -> Vec<TrafficRelationGraph> {
    assert!(window_micros > 0, "window must be positive");
    let Some(origin) = flows.iter().map(|f| f.start_ts_micros).min() else {
        return Vec::new();
    };
    let mut groups: BTreeMap<u64, Vec<FlowRecord>> = BTreeMap::new();
    for f in flows {
        groups
            .entry((f.start_ts_micros - origin) / window_micros)
            .or_default()
            .push(f.clone());
    }
    groups
        .into_values()
        .map(|g| build_trg(&g, gamma_micros))
        .collect()
}

impl TrafficRelationGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self) -> HashMap<u64, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.flow_id, i))
            .collect()
    }

    /// Sorted neighbor indices per node, both edge kinds merged.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let index = self.index_of();
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (a, b) = (index[&e.src], index[&e.dst]);
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Flow ids of the bursts as structured values.
    pub fn burst_list(&self) -> Vec<Burst> {
        let index = self.index_of();
        self.bursts
            .iter()
            .map(|ids| Burst {
                flow_ids: ids.clone(),
                start_ts_micros: self.nodes[index[&ids[0]]].start_ts_micros,
            })
            .collect()
    }

    pub fn edge_set(&self) -> HashSet<(u64, u64, EdgeKind)> {
        self.edges.iter().map(Edge::unordered).collect()
    }
}

/// Symmetric 0/1 adjacency over nodes in start-time order; zero diagonal.
pub fn trg_adjacency_matrix(g: &TrafficRelationGraph) -> Array2<u8> {
    let n = g.nodes.len();
    let mut m = Array2::<u8>::zeros((n, n));
    for (i, list) in g.neighbors().iter().enumerate() {
        for &j in list {
            m[[i, j]] = 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000;

    fn flows(starts: &[u64]) -> Vec<(u64, u64)> {
        starts.iter().enumerate().map(|(i, &s)| (i as u64 + 1, s)).collect()
    }

    fn nodes(starts: &[u64]) -> Vec<TrgNode> {
        flows(starts)
            .into_iter()
            .map(|(id, s)| TrgNode {
                flow_id: id,
                label: None,
                start_ts_micros: s,
                datagram_tokens: vec![],
                directed_lengths: vec![],
            })
            .collect()
    }

    fn ids(bursts: &[Burst]) -> Vec<Vec<u64>> {
        bursts.iter().map(|b| b.flow_ids.clone()).collect()
    }

    fn e(src: u64, dst: u64, kind: EdgeKind) -> Edge {
        Edge { src, dst, kind }
    }

    #[test]
    fn singleton_burst() {
        assert_eq!(ids(&segment_bursts(&flows(&[5]), S)), vec![vec![1]]);
        assert!(segment_bursts::<(u64, u64)>(&[], S).is_empty());
    }

    #[test]
    fn split_at_gap() {
        let b = segment_bursts(&flows(&[0, S / 2, 3 * S]), S);
        assert_eq!(ids(&b), vec![vec![1, 2], vec![3]]);
        assert_eq!(b[1].start_ts_micros, 3 * S);
    }

    #[test]
    fn chained_threshold() {
        let b = segment_bursts(&flows(&[0, 9 * S / 10, 18 * S / 10]), S);
        assert_eq!(ids(&b), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let b = segment_bursts(&[(1, 3 * S), (2, 0), (3, S / 2)], S);
        assert_eq!(ids(&b), vec![vec![2, 3], vec![1]]);
    }

    #[test]
    fn single_node_graph() {
        let g = trg_from_nodes(nodes(&[0]), S);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
        assert_eq!(trg_adjacency_matrix(&g), Array2::<u8>::zeros((1, 1)));
    }

    #[test]
    fn three_flow_graph_dedups_singleton_target() {
        let g = trg_from_nodes(nodes(&[0, S / 2, 3 * S]), S);
        assert_eq!(
            g.edges,
            vec![e(1, 2, EdgeKind::Burst), e(2, 3, EdgeKind::Adjacency)]
        );
        let m = trg_adjacency_matrix(&g);
        let expected = ndarray::arr2(&[[0, 1, 0], [1, 0, 1], [0, 1, 0]]);
        assert_eq!(m, expected);
    }

    #[test]
    fn five_flow_graph() {
        let g = trg_from_nodes(nodes(&[0, S / 2, 3 * S, 32 * S / 10, 10 * S]), S);
        assert_eq!(g.bursts, vec![vec![1, 2], vec![3, 4], vec![5]]);
        let expected: HashSet<_> = [
            (1, 2, EdgeKind::Burst),
            (3, 4, EdgeKind::Burst),
            (2, 3, EdgeKind::Adjacency),
            (2, 4, EdgeKind::Adjacency),
            (4, 5, EdgeKind::Adjacency),
        ]
        .into();
        assert_eq!(g.edge_set(), expected);
        assert_eq!(g.edges.len(), 5);
    }

    #[test]
    fn far_apart_singletons_have_no_edges_within_their_graphs() {
        for start in [0, 100 * S] {
            let g = trg_from_nodes(nodes(&[start]), S);
            assert!(trg_adjacency_matrix(&g).iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn windowing_splits_graphs() {
        let recs: Vec<FlowRecord> = [0, S, 70 * S, 71 * S]
            .iter()
            .enumerate()
            .map(|(i, &s)| FlowRecord {
                flow_id: i as u64,
                label: None,
                source: None,
                start_ts_micros: s,
                five_tuple: crate::flow::FiveTuple {
                    src_ip: "10.0.0.1".parse().unwrap(),
                    dst_ip: "10.0.0.2".parse().unwrap(),
                    src_port: 1,
                    dst_port: 2,
                    protocol: crate::ingest::Protocol::Udp,
                },
                datagram_tokens: vec![],
                directed_lengths: vec![],
                n_packets: 1,
            })
            .collect();
        let gs = build_trgs_windowed(&recs, S, 60 * S);
        assert_eq!(gs.len(), 2);
        assert_eq!(gs[1].nodes.len(), 2);
    }

    #[test]
    fn json_dump_shape() {
        let g = trg_from_nodes(nodes(&[0, S / 2]), S);
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["gamma_micros"], 1_000_000);
        assert_eq!(v["bursts"], serde_json::json!([[1, 2]]));
        assert_eq!(v["edges"][0], serde_json::json!({"src": 1, "dst": 2, "kind": "burst"}));
        assert_eq!(v["nodes"][0]["flow_id"], 1);
    }
}
