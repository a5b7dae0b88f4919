//! Distribution-shifted train/test splits and the Non-I.I.D. Index.
//!
//! Every class in a [`LabeledPool`] is made of components (the applications
//! or behaviours behind the class). Shift is induced either proportionally,
//! by fixing the ratio between one dominant component and the mean of the
//! minor ones on each side, or compositionally, by letting only a subset of
//! the components supply training data while the test side draws from all
//! of them.
//!
//! The Non-I.I.D. Index of a class is the L2 norm of the per-dimension gap
//! between train and test feature means, each dimension scaled by its
//! population standard deviation over the union of both sides.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed_str;
use crate::trg::TrafficRelationGraph;

pub const SIGMA_FLOOR: f64 = 1e-12;
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;
pub const LENGTH_BINS: usize = 16;
const LENGTH_BIN_WIDTH: u64 = 100;

#[derive(Debug, Error, PartialEq)]
pub enum OodError {
    #[error("class {class:?} component {component:?} has {available} samples, {needed} needed")]
    InsufficientSamples {
        class: String,
        component: String,
        needed: usize,
        available: usize,
    },
    #[error("class {0:?} has a single component; no bias can be applied")]
    SingleComponentClass(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{0} side has no rows")]
    EmptySide(&'static str),
    #[error("invalid split parameters: {0}")]
    InvalidParams(String),
    #[error("split refers to unknown sample id {0:?}")]
    UnknownId(String),
    #[error("duplicate sample id {0:?} in pool")]
    DuplicateId(String),
}

// ------------------------------------------------------------------- pool

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub sample_id: String,
    pub class: String,
    pub component: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPool {
    pub items: Vec<PoolItem>,
}

impl LabeledPool {
    pub fn new(items: Vec<PoolItem>) -> Result<Self, OodError> {
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.sample_id.as_str()) {
                return Err(OodError::DuplicateId(it.sample_id.clone()));
            }
        }
        Ok(LabeledPool { items })
    }

    /// class -> component -> item indices in pool order.
    pub fn structure(&self) -> BTreeMap<&str, BTreeMap<&str, Vec<usize>>> {
        let mut out: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            out.entry(it.class.as_str())
                .or_default()
                .entry(it.component.as_str())
                .or_default()
                .push(i);
        }
        out
    }

    pub fn classes(&self) -> Vec<String> {
        self.structure().keys().map(|c| c.to_string()).collect()
    }

    pub fn by_id(&self) -> HashMap<&str, &PoolItem> {
        self.items.iter().map(|it| (it.sample_id.as_str(), it)).collect()
    }
}

pub fn read_pool_jsonl<R: BufRead>(input: R) -> io::Result<LabeledPool> {
    let mut items = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: String| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1));
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if value.get("sample_id").is_none() {
            continue;
        }
        items.push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
    }
    LabeledPool::new(items).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

pub fn write_pool_jsonl<W: Write>(mut out: W, pool: &LabeledPool) -> io::Result<()> {
    for it in &pool.items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ------------------------------------------------------ feature extractors

/// Default per-flow representation: a 16-bin histogram of absolute packet
/// lengths (100-byte bins, last bin open-ended, normalized to fractions),
/// the outbound share of bytes, and `log2(1 + packet count)`.
pub fn flow_features(directed_lengths: &[i64]) -> Vec<f64> {
    let mut v = vec![0.0; LENGTH_BINS + 2];
    let n = directed_lengths.len();
    if n == 0 {
        return v;
    }
    let mut out_bytes = 0.0;
    let mut all_bytes = 0.0;
    for &l in directed_lengths {
        let mag = l.unsigned_abs();
        let bin = ((mag / LENGTH_BIN_WIDTH) as usize).min(LENGTH_BINS - 1);
        v[bin] += 1.0 / n as f64;
        all_bytes += mag as f64;
        if l > 0 {
            out_bytes += mag as f64;
        }
    }
    v[LENGTH_BINS] = if all_bytes > 0.0 { out_bytes / all_bytes } else { 0.0 };
    v[LENGTH_BINS + 1] = (1.0 + n as f64).log2();
    v
}

/// Mean of [`flow_features`] over a graph's nodes.
pub fn graph_features(g: &TrafficRelationGraph) -> Vec<f64> {
    let mut acc = vec![0.0; LENGTH_BINS + 2];
    for node in &g.nodes {
        for (a, x) in acc.iter_mut().zip(flow_features(&node.directed_lengths)) {
            *a += x;
        }
    }
    let n = g.nodes.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

// ---------------------------------------------------------------------- NI

/// Non-I.I.D. Index between two sets of representations.
pub fn ni_index(train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64, OodError> {
    let first = train.first().ok_or(OodError::EmptySide("train"))?;
    if test.is_empty() {
        return Err(OodError::EmptySide("test"));
    }
    let d = first.len();
    if let Some(bad) = train.iter().chain(test).find(|r| r.len() != d) {
        return Err(OodError::DimMismatch(d, bad.len()));
    }
    let mean = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
    let total = (train.len() + test.len()) as f64;
    let mut sq = 0.0;
    for j in 0..d {
        let m_train = mean(train, j);
        let m_test = mean(test, j);
        let m_all = train.iter().chain(test).map(|r| r[j]).sum::<f64>() / total;
        let var = train.iter().chain(test).map(|r| (r[j] - m_all).powi(2)).sum::<f64>() / total;
        let sigma = var.sqrt().max(SIGMA_FLOOR);
        let z = (m_train - m_test) / sigma;
        sq += z * z;
    }
    Ok(sq.sqrt())
}

// --------------------------------------------------------------- splits

/// Dominant-to-mean-minor sample ratio, written `a:b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DominantRatio {
    pub dominant: u64,
    pub minor: u64,
}

impl DominantRatio {
    pub fn new(dominant: u64, minor: u64) -> Result<Self, OodError> {
        if dominant == 0 || minor == 0 {
            return Err(OodError::InvalidParams("ratio terms must be positive".into()));
        }
        Ok(DominantRatio { dominant, minor })
    }

    pub fn value(&self) -> f64 {
        self.dominant as f64 / self.minor as f64
    }
}

impl fmt::Display for DominantRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dominant, self.minor)
    }
}

impl FromStr for DominantRatio {
    type Err = OodError;

    /// Accepts `a:b`, `a/b` or a bare integer `a` (meaning `a:1`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || OodError::InvalidParams(format!("cannot parse ratio {s:?}"));
        let (a, b) = match s.split_once([':', '/']) {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (s.trim(), "1"),
        };
        DominantRatio::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)
    }
}

impl Serialize for DominantRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DominantRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    None,
    Proportional,
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_train: Option<DominantRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_test: Option<DominantRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_components: Option<Vec<String>>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ni: Option<f64>,
}

/// Split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub bias_kind: BiasKind,
    pub params: SplitParams,
    pub seed: u64,
    pub classes: Vec<ClassSplit>,
}

impl DatasetSplit {
    pub fn train_ids(&self) -> Vec<&str> {
        self.classes.iter().flat_map(|c| c.train_ids.iter().map(String::as_str)).collect()
    }

    pub fn test_ids(&self) -> Vec<&str> {
        self.classes.iter().flat_map(|c| c.test_ids.iter().map(String::as_str)).collect()
    }

    pub fn ni_per_class(&self) -> BTreeMap<String, f64> {
        self.classes
            .iter()
            .filter_map(|c| c.ni.map(|v| (c.name.clone(), v)))
            .collect()
    }

    pub fn mean_ni(&self) -> Option<f64> {
        let v = self.ni_per_class();
        (!v.is_empty()).then(|| v.values().sum::<f64>() / v.len() as f64)
    }

    /// Check disjointness and that every id is in the pool.
    pub fn validate(&self, pool: &LabeledPool) -> Result<(), OodError> {
        let by_id = pool.by_id();
        let mut seen = HashSet::new();
        for id in self.train_ids().into_iter().chain(self.test_ids()) {
            if !by_id.contains_key(id) {
                return Err(OodError::UnknownId(id.to_string()));
            }
            if !seen.insert(id) {
                return Err(OodError::InvalidParams(format!("id {id:?} used twice")));
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` by integer `weights`; ties in
/// the remainder go to the lower index.
pub fn largest_remainder(total: usize, weights: &[u64]) -> Vec<usize> {
    let sum: u128 = weights.iter().map(|&w| u128::from(w)).sum();
    assert!(sum > 0, "weights must not all be zero");
    let scaled: Vec<u128> = weights.iter().map(|&w| total as u128 * u128::from(w)).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|&s| (s / sum) as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (scaled[b] % sum).cmp(&(scaled[a] % sum)).then(a.cmp(&b)));
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-component sample counts for one side of a proportional split.
/// Components are in name order; `dominant` indexes into them.
pub fn proportional_counts(total: usize, n_components: usize, dominant: usize, ratio: DominantRatio) -> Vec<usize> {
    let weights: Vec<u64> = (0..n_components)
        .map(|i| if i == dominant { ratio.dominant } else { ratio.minor })
        .collect();
    largest_remainder(total, &weights)
}

/// Number of admissible train and test component subsets for `n` components:
/// non-empty proper subsets for train, non-empty subsets for test.
pub fn count_subsets(n: u32) -> (u128, u128) {
    assert!((1..128).contains(&n), "component count must be in 1..128");
    let all = 1u128 << n;
    if n == 1 {
        (0, 1)
    } else {
        (all - 2, all - 1)
    }
}

fn check_fraction(name: &str, f: f64) -> Result<(), OodError> {
    if f.is_finite() && f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(OodError::InvalidParams(format!("{name} must be in (0, 1), got {f}")))
    }
}

fn class_rng(seed: u64, class: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_str(seed, class))
}

fn shuffled_ids(pool: &LabeledPool, idx: &[usize], seed: u64, class: &str, component: &str) -> Vec<String> {
    let mut ids: Vec<String> = idx.iter().map(|&i| pool.items[i].sample_id.clone()).collect();
    let s = derive_seed_str(derive_seed_str(seed, class), component);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    ids
}

fn test_share(n: usize, test_fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((test_fraction * n as f64).round() as usize).clamp(1, n)
}

fn attach_ni(pool: &LabeledPool, classes: &mut [ClassSplit]) -> Result<(), OodError> {
    let by_id = pool.by_id();
    for c in classes {
        let rows = |ids: &[String]| -> Vec<Vec<f64>> { ids.iter().map(|id| by_id[id.as_str()].features.clone()).collect() };
        let (train, test) = (rows(&c.train_ids), rows(&c.test_ids));
        c.ni = if train.is_empty() || test.is_empty() {
            None
        } else {
            Some(ni_index(&train, &test)?)
        };
    }
    Ok(())
}

/// Unbiased split: every component gives the same share of its samples to
/// the test side; the rest trains. The test side matches that of
/// [`build_compositional_split`] under the same seed and fraction.
pub fn build_iid_split(pool: &LabeledPool, test_fraction: f64, seed: u64) -> Result<DatasetSplit, OodError> {
    check_fraction("test_fraction", test_fraction)?;
    let mut classes = Vec::new();
    for (class, comps) in pool.structure() {
        let mut split = ClassSplit {
            name: class.to_string(),
            dominant: None,
            train_components: None,
            train_ids: Vec::new(),
            test_ids: Vec::new(),
            ni: None,
        };
        for (comp, idx) in comps {
            let ids = shuffled_ids(pool, &idx, seed, class, comp);
            let k = test_share(ids.len(), test_fraction);
            split.test_ids.extend_from_slice(&ids[..k]);
            split.train_ids.extend_from_slice(&ids[k..]);
        }
        classes.push(split);
    }
    attach_ni(pool, &mut classes)?;
    Ok(DatasetSplit {
        bias_kind: BiasKind::None,
        params: SplitParams {
            test_fraction: Some(test_fraction),
            ..SplitParams::default()
        },
        seed,
        classes,
    })
}

/// Proportional-bias split. Per class one dominant component is drawn
/// uniformly; each side receives `per_class_n` samples whose
/// dominant-to-mean-minor ratio is its requested ratio, rounded by largest
/// remainder. Sampling is without replacement and the sides are disjoint.
pub fn build_proportional_split(
    pool: &LabeledPool,
    ratio_train: DominantRatio,
    ratio_test: DominantRatio,
    per_class_n: usize,
    seed: u64,
) -> Result<DatasetSplit, OodError> {
    if per_class_n == 0 {
        return Err(OodError::InvalidParams("per_class_n must be positive".into()));
    }
    let mut classes = Vec::new();
    for (class, comps) in pool.structure() {
        if comps.len() < 2 {
            return Err(OodError::SingleComponentClass(class.to_string()));
        }
        let names: Vec<&str> = comps.keys().copied().collect();
        let dominant = class_rng(seed, class).gen_range(0..names.len());
        let train_counts = proportional_counts(per_class_n, names.len(), dominant, ratio_train);
        let test_counts = proportional_counts(per_class_n, names.len(), dominant, ratio_test);

        let mut split = ClassSplit {
            name: class.to_string(),
            dominant: Some(names[dominant].to_string()),
            train_components: None,
            train_ids: Vec::new(),
            test_ids: Vec::new(),
            ni: None,
        };
        for (i, &comp) in names.iter().enumerate() {
            let ids = shuffled_ids(pool, &comps[comp], seed, class, comp);
            let needed = train_counts[i] + test_counts[i];
            if ids.len() < needed {
                return Err(OodError::InsufficientSamples {
                    class: class.to_string(),
                    component: comp.to_string(),
                    needed,
                    available: ids.len(),
                });
            }
            split.train_ids.extend_from_slice(&ids[..train_counts[i]]);
            split.test_ids.extend_from_slice(&ids[train_counts[i]..needed]);
        }
        classes.push(split);
    }
    attach_ni(pool, &mut classes)?;
    Ok(DatasetSplit {
        bias_kind: BiasKind::Proportional,
        params: SplitParams {
            ratio_train: Some(ratio_train),
            ratio_test: Some(ratio_test),
            per_class_n: Some(per_class_n),
            ..SplitParams::default()
        },
        seed,
        classes,
    })
}

/// Size of the training component subset for `n` components:
/// `round(train_fraction * n)` clamped to `[1, n - 1]`.
pub fn train_subset_size(n: usize, train_fraction: f64) -> usize {
    ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Compositional-bias split. Per class a seeded subset of the components
/// supplies all training data. The test side takes the same per-component
/// share as [`build_iid_split`] from every component, so components outside
/// the subset appear only in test.
pub fn build_compositional_split(
    pool: &LabeledPool,
    train_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, OodError> {
    check_fraction("train_fraction", train_fraction)?;
    check_fraction("test_fraction", test_fraction)?;
    let mut classes = Vec::new();
    for (class, comps) in pool.structure() {
        if comps.len() < 2 {
            return Err(OodError::SingleComponentClass(class.to_string()));
        }
        let mut names: Vec<&str> = comps.keys().copied().collect();
        let size = train_subset_size(names.len(), train_fraction);
        names.shuffle(&mut class_rng(seed, class));
        let mut chosen: Vec<String> = names[..size].iter().map(|s| s.to_string()).collect();
        chosen.sort();

        let mut split = ClassSplit {
            name: class.to_string(),
            dominant: None,
            train_components: None,
            train_ids: Vec::new(),
            test_ids: Vec::new(),
            ni: None,
        };
        for (comp, idx) in &comps {
            let ids = shuffled_ids(pool, idx, seed, class, comp);
            let k = test_share(ids.len(), test_fraction);
            split.test_ids.extend_from_slice(&ids[..k]);
            if chosen.iter().any(|c| c == comp) {
                split.train_ids.extend_from_slice(&ids[k..]);
            }
        }
        split.train_components = Some(chosen);
        classes.push(split);
    }
    attach_ni(pool, &mut classes)?;
    Ok(DatasetSplit {
        bias_kind: BiasKind::Compositional,
        params: SplitParams {
            train_fraction: Some(train_fraction),
            test_fraction: Some(test_fraction),
            ..SplitParams::default()
        },
        seed,
        classes,
    })
}

/// Per-class NI of a split under a pluggable feature extractor.
pub fn ni_report<F>(pool: &LabeledPool, split: &DatasetSplit, extractor: F) -> Result<BTreeMap<String, f64>, OodError>
where
    F: Fn(&PoolItem) -> Vec<f64>,
{
    let by_id = pool.by_id();
    let rows = |ids: &[String]| -> Result<Vec<Vec<f64>>, OodError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|it| extractor(it))
                    .ok_or_else(|| OodError::UnknownId(id.clone()))
            })
            .collect()
    };
    let mut out = BTreeMap::new();
    for c in &split.classes {
        out.insert(c.name.clone(), ni_index(&rows(&c.train_ids)?, &rows(&c.test_ids)?)?);
    }
    Ok(out)
}

/// Named dataset regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Proportional, train ratio 1:3.
    Netd1,
    /// Proportional, train ratio 3:1.
    Netd2,
    /// Compositional, 80% of components in train.
    Netd3,
    /// Compositional, 20% of components in train.
    Netd4,
}

impl Regime {
    pub fn ratio_train(self) -> Option<DominantRatio> {
        match self {
            Regime::Netd1 => Some(DominantRatio { dominant: 1, minor: 3 }),
            Regime::Netd2 => Some(DominantRatio { dominant: 3, minor: 1 }),
            _ => None,
        }
    }

    pub fn train_fraction(self) -> Option<f64> {
        match self {
            Regime::Netd3 => Some(0.8),
            Regime::Netd4 => Some(0.2),
            _ => None,
        }
    }
}

impl FromStr for Regime {
    type Err = OodError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "netd1" => Ok(Regime::Netd1),
            "netd2" => Ok(Regime::Netd2),
            "netd3" => Ok(Regime::Netd3),
            "netd4" => Ok(Regime::Netd4),
            _ => Err(OodError::InvalidParams(format!("unknown regime {s:?}"))),
        }
    }
}
