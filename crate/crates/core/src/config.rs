//! Pipeline configuration.
//!
//! A single JSON document whose keys mirror the command-line flags
//! (`gamma_micros` ↔ `--gamma-micros`). Values resolve as
//! flags > config file > defaults. A config file may also be any artifact
//! written by the pipeline: its embedded `artifact.config` block is used,
//! which is how a run is reproduced.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::align::{AlignmentConfig, EncoderConfig, FeatureDim, TrainOptions};
use crate::flow::{FlowConfig, DEFAULT_IDLE_TIMEOUT_MICROS, DEFAULT_PL_MAX_PACKETS, DEFAULT_RD_MAX_BYTES};
use crate::instr::{InstrConfig, DEFAULT_FANOUT, DEFAULT_HOPS};
use crate::oodgen::{BiasKind, DominantRatio, Regime, DEFAULT_TEST_FRACTION};
use crate::synth::SynthConfig;
use crate::trg::DEFAULT_GAMMA_MICROS;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("config file {path}: {msg}")]
    File { path: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSection {
    pub tau: f64,
    pub dims: Vec<FeatureDim>,
    pub lambda: Vec<f64>,
    pub proj_dim: usize,
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerSection,
}

impl Default for AlignSection {
    fn default() -> Self {
        let a = AlignmentConfig::default();
        let t = TrainOptions::default();
        AlignSection {
            tau: a.tau,
            dims: a.dims,
            lambda: a.lambda,
            proj_dim: a.proj_dim,
            encoder: EncoderConfig::default(),
            optimizer: OptimizerSection {
                lr: t.lr,
                epochs: t.epochs,
                batch: t.batch,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrSection {
    pub h: usize,
    pub fanout: usize,
    /// Also emit one class-question sample per labelled graph.
    pub task_samples: bool,
}

impl Default for InstrSection {
    fn default() -> Self {
        InstrSection {
            h: DEFAULT_HOPS,
            fanout: DEFAULT_FANOUT,
            task_samples: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    pub bias: BiasKind,
    /// Named preset; when set it fixes `bias` and the train-side parameter.
    pub regime: Option<String>,
    pub ratio_train: DominantRatio,
    pub ratio_test: DominantRatio,
    /// `null` picks the largest size every class can supply.
    pub per_class_n: Option<usize>,
    pub train_fraction: f64,
    pub test_fraction: f64,
}

impl Default for OodSection {
    fn default() -> Self {
        OodSection {
            bias: BiasKind::Proportional,
            regime: None,
            ratio_train: DominantRatio { dominant: 1, minor: 3 },
            ratio_test: DominantRatio { dominant: 1, minor: 1 },
            per_class_n: None,
            train_fraction: 0.8,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

impl OodSection {
    /// Apply the regime preset, if any.
    pub fn effective(&self) -> Result<OodSection, ConfigError> {
        let mut out = self.clone();
        if let Some(name) = &self.regime {
            let regime: Regime = name.parse().map_err(|e: crate::oodgen::OodError| invalid("ood.regime", e.to_string()))?;
            if let Some(r) = regime.ratio_train() {
                out.bias = BiasKind::Proportional;
                out.ratio_train = r;
            }
            if let Some(f) = regime.train_fraction() {
                out.bias = BiasKind::Compositional;
                out.train_fraction = f;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub classes: Vec<String>,
    pub components_per_class: usize,
    pub sessions_per_class: usize,
    pub signature_weight: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            classes: s.classes,
            components_per_class: s.components_per_class,
            sessions_per_class: s.sessions_per_class,
            signature_weight: s.signature_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub gamma_micros: u64,
    pub idle_timeout_micros: u64,
    pub rd_max_bytes: usize,
    pub pl_max_packets: usize,
    /// Split each capture into graphs over start-time windows of this size.
    pub window_micros: Option<u64>,
    pub align: AlignSection,
    pub instr: InstrSection,
    pub ood: OodSection,
    pub synth: SynthSection,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gamma_micros: DEFAULT_GAMMA_MICROS,
            idle_timeout_micros: DEFAULT_IDLE_TIMEOUT_MICROS,
            rd_max_bytes: DEFAULT_RD_MAX_BYTES,
            pl_max_packets: DEFAULT_PL_MAX_PACKETS,
            window_micros: None,
            align: AlignSection::default(),
            instr: InstrSection::default(),
            ood: OodSection::default(),
            synth: SynthSection::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            idle_timeout_micros: self.idle_timeout_micros,
            rd_max_bytes: self.rd_max_bytes,
            pl_max_packets: self.pl_max_packets,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            tau: self.align.tau,
            dims: self.align.dims.clone(),
            lambda: self.align.lambda.clone(),
            proj_dim: self.align.proj_dim,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.align.optimizer.lr,
            epochs: self.align.optimizer.epochs,
            batch: self.align.optimizer.batch,
            seed: self.seed,
        }
    }

    pub fn instr_config(&self) -> InstrConfig {
        InstrConfig {
            h: self.instr.h,
            fanout: self.instr.fanout,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.synth.classes.clone(),
            components_per_class: self.synth.components_per_class,
            sessions_per_class: self.synth.sessions_per_class,
            signature_weight: self.synth.signature_weight,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gamma_micros == 0 {
            return Err(invalid("gamma_micros", "must be positive"));
        }
        if self.idle_timeout_micros == 0 {
            return Err(invalid("idle_timeout_micros", "must be positive"));
        }
        if self.rd_max_bytes == 0 || self.rd_max_bytes % 2 != 0 {
            return Err(invalid("rd_max_bytes", "must be even and positive"));
        }
        if self.pl_max_packets == 0 {
            return Err(invalid("pl_max_packets", "must be positive"));
        }
        if self.window_micros == Some(0) {
            return Err(invalid("window_micros", "must be positive"));
        }
        if let Err(crate::align::AlignError::InvalidConfig(m)) = self.alignment().validate() {
            let (key, msg) = m.split_once(": ").unwrap_or(("", m.as_str()));
            return Err(invalid(&format!("align.{key}"), msg));
        }
        let e = &self.align.encoder;
        if e.graph_dim == 0 || e.flow_dim == 0 {
            return Err(invalid("align.encoder", "dimensions must be positive"));
        }
        let o = &self.align.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(invalid("align.optimizer.lr", "must be positive and finite"));
        }
        if o.epochs == 0 {
            return Err(invalid("align.optimizer.epochs", "must be at least 1"));
        }
        if o.batch == 0 {
            return Err(invalid("align.optimizer.batch", "must be at least 1"));
        }
        if self.instr.fanout == 0 {
            return Err(invalid("instr.fanout", "must be at least 1"));
        }
        let ood = self.ood.effective()?;
        for (key, f) in [("ood.train_fraction", ood.train_fraction), ("ood.test_fraction", ood.test_fraction)] {
            if !(f.is_finite() && f > 0.0 && f < 1.0) {
                return Err(invalid(key, "must lie strictly between 0 and 1"));
            }
        }
        if ood.per_class_n == Some(0) {
            return Err(invalid("ood.per_class_n", "must be positive"));
        }
        let s = &self.synth;
        if s.classes.is_empty() {
            return Err(invalid("synth.classes", "at least one class required"));
        }
        if s.components_per_class == 0 || s.sessions_per_class == 0 {
            return Err(invalid("synth", "component and session counts must be positive"));
        }
        if !(0.0..=1.0).contains(&s.signature_weight) {
            return Err(invalid("synth.signature_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Defaults, overlaid by `file` (a JSON object), overlaid by `flags`
    /// (dotted key → value), then validated.
    pub fn resolve(file: Option<&Value>, flags: &[(&str, Value)]) -> Result<Self, ConfigError> {
        let defaults = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
        let mut merged = defaults.clone();
        if let Some(file) = file {
            if !file.is_object() {
                return Err(invalid("<root>", "config must be a JSON object"));
            }
            check_keys(file, &defaults, "")?;
            merge(&mut merged, file);
        }
        for (key, value) in flags {
            set_path(&mut merged, key, value.clone());
        }
        check_types(&merged, &defaults, "")?;
        let cfg: PipelineConfig = serde_json::from_value(merged).map_err(|e| invalid("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Read a config file, or the config embedded in a pipeline artifact
/// (a JSON document or the header line of a JSONL file).
pub fn load_config_value(path: &Path) -> Result<Value, ConfigError> {
    let file_err = |msg: String| ConfigError::File {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let doc: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(whole) => {
            let first = text.lines().next().unwrap_or("");
            serde_json::from_str(first).map_err(|_| file_err(whole.to_string()))?
        }
    };
    match doc.get("artifact").and_then(|a| a.get("config")) {
        Some(cfg) => Ok(cfg.clone()),
        None => Ok(doc),
    }
}

fn check_keys(file: &Value, defaults: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(f), Value::Object(d)) = (file, defaults) else {
        return Ok(());
    };
    for (k, v) in f {
        let key = join(prefix, k);
        match d.get(k) {
            None => return Err(invalid(&key, "unknown key")),
            Some(dv) if dv.is_object() => {
                if !v.is_object() {
                    return Err(invalid(&key, "expected an object"));
                }
                check_keys(v, dv, &key)?;
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn check_types(merged: &Value, defaults: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(m), Value::Object(d)) = (merged, defaults) else {
        return Ok(());
    };
    for (k, dv) in d {
        let key = join(prefix, k);
        let Some(mv) = m.get(k) else { continue };
        let same = match (dv, mv) {
            (Value::Null, _) | (_, Value::Null) => true,
            (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Array(_), Value::Array(_)) => true,
            (Value::Object(_), Value::Object(_)) => {
                check_types(mv, dv, &key)?;
                true
            }
            _ => false,
        };
        if !same {
            return Err(invalid(&key, format!("expected {}, got {mv}", kind(dv))));
        }
        // float defaults serialize as floats, so an integer default marks an integer key
        if dv.is_u64() && !mv.is_u64() {
            return Err(invalid(&key, format!("expected a non-negative integer, got {mv}")));
        }
    }
    Ok(())
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn set_path(root: &mut Value, dotted: &str, value: Value) {
    let mut cur = root;
    let mut parts = dotted.split('.').peekable();
    while let Some(part) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return;
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}
