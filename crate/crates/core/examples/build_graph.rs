//! Burst segmentation and traffic relation graph construction.
//!
//! Five flows starting at 0, 0.5, 3, 3.2 and 10 s with a 1 s threshold fall
//! into three bursts; bursts are chained internally and linked to their
//! neighbours by adjacency edges.

use trafficgraph::trg::{trg_adjacency_matrix, trg_from_nodes, TrgNode};

fn main() {
    let starts = [0, 500_000, 3_000_000, 3_200_000, 10_000_000];
    let nodes = starts
        .iter()
        .enumerate()
        .map(|(i, &s)| TrgNode {
            flow_id: i as u64 + 1,
            label: None,
            start_ts_micros: s,
            datagram_tokens: vec![],
            directed_lengths: vec![],
        })
        .collect();

    let g = trg_from_nodes(nodes, 1_000_000);
    println!("bursts: {:?}", g.bursts);
    for e in &g.edges {
        println!("  f{} -- f{} ({:?})", e.src, e.dst, e.kind);
    }
    println!("adjacency:");
    for row in trg_adjacency_matrix(&g).rows() {
        println!("  {row}");
    }
    println!("{}", serde_json::to_string_pretty(&g).unwrap());
}
