//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trafficgraph::align::{
    batch_loss, AlignBatch, AlignmentConfig, EmbeddingMatrix, FeatureDim, ProjectorParams,
};
use trafficgraph::flow::{FiveTuple, FlowRecord};
use trafficgraph::ingest::Protocol;
use trafficgraph::trg::{EdgeKind, TrafficRelationGraph};

pub type EdgeSet = BTreeSet<(u64, u64, EdgeKind)>;

fn undirected(a: u64, b: u64, kind: EdgeKind) -> (u64, u64, EdgeKind) {
    (a.min(b), a.max(b), kind)
}

/// Straight transcription of the graph construction pseudocode, with the
/// first flow opening the first burst, a closing flow opening the next one,
/// and the final burst flushed after the loop.
pub fn oracle_trg(flows: &[(u64, u64)], gamma: u64) -> (Vec<Vec<u64>>, EdgeSet) {
    // line 2: sort by start (stable, as in the library)
    let mut s: Vec<(u64, u64)> = flows.to_vec();
    s.sort_by_key(|&(_, start)| start);

    let mut e: EdgeSet = BTreeSet::new();
    let mut burst: Vec<(u64, u64)> = Vec::new();
    let mut burst_last: Vec<(u64, u64)> = Vec::new();
    let mut all_bursts: Vec<Vec<u64>> = Vec::new();

    let close = |burst: &Vec<(u64, u64)>, burst_last: &Vec<(u64, u64)>, e: &mut EdgeSet| {
        // lines 9-11, reading range(size) as consecutive pairs
        for i in 0..burst.len().saturating_sub(1) {
            let (a, b) = (burst[i].0, burst[i + 1].0);
            if a != b {
                e.insert(undirected(a, b, EdgeKind::Burst));
            }
        }
        // lines 12-15
        if !burst_last.is_empty() {
            let last = burst_last[burst_last.len() - 1].0;
            e.insert(undirected(last, burst[0].0, EdgeKind::Adjacency));
            e.insert(undirected(last, burst[burst.len() - 1].0, EdgeKind::Adjacency));
        }
    };

    for &f in &s {
        if burst.is_empty() {
            burst.push(f);
            continue;
        }
        let last_start = burst[burst.len() - 1].1;
        if f.1.abs_diff(last_start) <= gamma {
            burst.push(f);
        } else {
            close(&burst, &burst_last, &mut e);
            all_bursts.push(burst.iter().map(|x| x.0).collect());
            burst_last = std::mem::take(&mut burst);
            burst.push(f);
        }
    }
    if !burst.is_empty() {
        close(&burst, &burst_last, &mut e);
        all_bursts.push(burst.iter().map(|x| x.0).collect());
    }
    (all_bursts, e)
}

pub fn edge_set(g: &TrafficRelationGraph) -> EdgeSet {
    g.edges.iter().map(|x| undirected(x.src, x.dst, x.kind)).collect()
}

pub fn flow_record(id: u64, start: u64) -> FlowRecord {
    FlowRecord {
        flow_id: id,
        label: None,
        source: None,
        start_ts_micros: start,
        five_tuple: FiveTuple {
            src_ip: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
            dst_ip: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)),
            src_port: 1000 + (id % 60_000) as u16,
            dst_port: 443,
            protocol: Protocol::Tcp,
        },
        datagram_tokens: vec![],
        directed_lengths: vec![],
        n_packets: 1,
    }
}

/// Up to `max_flows` flows with uniform start times over `[0, span]`, ids
/// shuffled relative to time order.
pub fn random_flows(rng: &mut ChaCha8Rng, max_flows: usize, span: u64) -> Vec<(u64, u64)> {
    let n = rng.gen_range(1..=max_flows);
    (0..n).map(|i| (i as u64, rng.gen_range(0..=span))).collect()
}

// --------------------------------------------------------------- gradients

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub struct GradCase {
    pub cfg: AlignmentConfig,
    pub params: ProjectorParams,
    pub batch: AlignBatch,
}

/// Random batch with `n` in 2..=8 rows and widths up to 16.
pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let dg = rng.gen_range(1..=16);
    let df = rng.gen_range(1..=16);
    let proj = rng.gen_range(1..=16);
    let two = rng.gen_bool(0.5);
    let dims = if two { vec![FeatureDim::Rd, FeatureDim::Pl] } else { vec![FeatureDim::Rd] };
    let lambda = dims.iter().map(|_| rng.gen_range(0.1..2.0)).collect();
    let cfg = AlignmentConfig {
        tau: rng.gen_range(-1.0..1.5),
        dims: dims.clone(),
        lambda,
        proj_dim: proj,
    };
    let params = ProjectorParams::init(&cfg, dg, df, rng.gen());
    let batch = AlignBatch {
        h: EmbeddingMatrix(random_matrix(&mut rng, n, dg)),
        n: dims.iter().map(|_| EmbeddingMatrix(random_matrix(&mut rng, n, df))).collect(),
    };
    GradCase { cfg, params, batch }
}

/// Central finite differences of the batch loss over the flat parameters.
pub fn finite_difference(case: &GradCase, step: f64) -> Vec<f64> {
    let base = case.params.flat();
    let mut p = case.params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for k in 0..base.len() {
        x[k] = base[k] + step;
        p.set_flat(&x);
        let up = batch_loss(&p, &case.batch, &case.cfg).unwrap();
        x[k] = base[k] - step;
        p.set_flat(&x);
        let down = batch_loss(&p, &case.batch, &case.cfg).unwrap();
        x[k] = base[k];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

// ----------------------------------------------------------------- metrics

pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class tallies by direct counting, then unweighted means.
pub fn brute_metrics(preds: &[String], truths: &[String]) -> BruteMetrics {
    let classes: BTreeSet<&String> = preds.iter().chain(truths).collect();
    let mut per: BTreeMap<&String, (f64, f64, f64)> = BTreeMap::new();
    for c in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (p, t) in preds.iter().zip(truths) {
            match (p == *c, t == *c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        per.insert(c, (prec, rec, f1));
    }
    let k = per.len() as f64;
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64;
    BruteMetrics {
        accuracy: correct / preds.len() as f64,
        precision: per.values().map(|v| v.0).sum::<f64>() / k,
        recall: per.values().map(|v| v.1).sum::<f64>() / k,
        f1: per.values().map(|v| v.2).sum::<f64>() / k,
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let k = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=200);
    let label = |rng: &mut ChaCha8Rng| format!("c{}", rng.gen_range(0..k));
    let truths: Vec<String> = (0..n).map(|_| label(rng)).collect();
    let preds: Vec<String> = truths
        .iter()
        .map(|t| if rng.gen_bool(0.6) { t.clone() } else { label(rng) })
        .collect();
    (preds, truths)
}

// ----------------------------------------------------------------- subsets

/// Enumerate component subsets: non-empty proper subsets may train,
/// any non-empty subset may test.
pub fn brute_subsets(n: u32) -> (u128, u128) {
    let full = (1u32 << n) - 1;
    let mut train = 0;
    let mut test = 0;
    for mask in 0..=full {
        if mask != 0 {
            test += 1;
            if mask != full {
                train += 1;
            }
        }
    }
    (train, test)
}
