//! Command-line pipeline: capture → flows → graphs → alignment →
//! instruction data → shifted splits → evaluation.
//!
//! Every artifact carries an `artifact` block with the tool version, the
//! command, its inputs, the resolved config and the seed. JSONL outputs put
//! it on the first line; JSON documents hold it as a top-level key. Passing
//! an artifact back through `--config` reproduces it byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error, 3 input error, 4 internal
//! error.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::align::{fit_task_head, surrogate_classify, train_projector, AlignError, Checkpoint, Encoders};
use crate::config::{load_config_value, ConfigError, PipelineConfig};
use crate::evalkit::{evaluate_run, read_labels_jsonl, render_text, EvalError, LabeledId};
use crate::flow::{assemble_flows_with, read_flows_jsonl, write_flows_jsonl, FlowConfig, FlowRecord};
use crate::ingest::{parse_capture_file, IngestError, SkipCounts};
use crate::instr::{generate_matching_samples, generate_task_samples, write_samples_jsonl, InstrError};
use crate::oodgen::{
    build_compositional_split, build_iid_split, build_proportional_split, graph_features, ni_report, proportional_counts,
    read_pool_jsonl, BiasKind, DatasetSplit, LabeledPool, OodError, PoolItem,
};
use crate::synth::{generate_sessions, write_capture_tree, MappingEntry, MAPPING_FILE};
use crate::trg::{build_trg, build_trgs_windowed, TrafficRelationGraph};

pub const TOOL: &str = "trafficgraph";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<OodError> for CliError {
    fn from(e: OodError) -> Self {
        match e {
            OodError::InvalidParams(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<InstrError> for CliError {
    fn from(e: InstrError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

// ------------------------------------------------------------------ CLI

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Traffic relation graphs, alignment, instruction data and shifted splits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file, or any artifact written by this tool.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; stdout when omitted (a directory for `synth`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse captures and assemble bidirectional flows (JSONL).
    Flows(FlowsArgs),
    /// Build traffic relation graphs from a flow dump (JSON).
    Graph(GraphArgs),
    /// Train the alignment projector; writes a checkpoint (JSON).
    TrainAlign(TrainArgs),
    /// Predict graph classes with a trained checkpoint (JSONL).
    Classify(ClassifyArgs),
    /// Generate instruction-tuning samples (JSONL).
    InstrGen(InstrArgs),
    /// Build a distribution-shifted train/test split manifest (JSON).
    OodBuild(OodArgs),
    /// Per-class Non-I.I.D. Index of a split (JSON).
    Ni(NiArgs),
    /// Macro metrics of predictions against truths (JSON + text table).
    Eval(EvalArgs),
    /// Write a synthetic labelled capture tree with a mapping file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FlowsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Capture files.
    pub inputs: Vec<PathBuf>,
    /// Directory holding captures listed in a mapping file.
    #[arg(long)]
    pub pcap_dir: Option<PathBuf>,
    /// Mapping file (defaults to `<pcap-dir>/mapping.jsonl`).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub idle_timeout_micros: Option<u64>,
    #[arg(long)]
    pub rd_max_bytes: Option<usize>,
    #[arg(long)]
    pub pl_max_packets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub common: Common,
    /// Flow JSONL.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub gamma_micros: Option<u64>,
    #[arg(long)]
    pub window_micros: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct SplitFilter {
    /// Split manifest restricting which graphs are used.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub side: Option<Side>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Graph JSON.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub filter: SplitFilter,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub filter: SplitFilter,
    /// Also write the graphs' own labels as a truth file.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InstrArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub fanout: Option<usize>,
    #[arg(long)]
    pub task_samples: Option<bool>,
}

#[derive(Debug, Args)]
pub struct PoolSource {
    /// Pool JSONL of {sample_id, class, component, features}.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Graph JSON; graph ids are looked up in the mapping file.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    /// Capture directory with a mapping file.
    #[arg(long)]
    pub pcap_dir: Option<PathBuf>,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: PoolSource,
    #[arg(long, value_parser = ["none", "proportional", "compositional"])]
    pub bias: Option<String>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub ratio_train: Option<String>,
    #[arg(long)]
    pub ratio_test: Option<String>,
    #[arg(long)]
    pub per_class_n: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct NiArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: PoolSource,
    #[arg(long)]
    pub split: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predictions JSONL of {sample_id, label}.
    #[arg(long)]
    pub pred: PathBuf,
    /// Truth JSONL of {sample_id, label}.
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write the fixed-width text table here.
    #[arg(long)]
    pub text_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub sessions_per_class: Option<usize>,
    #[arg(long)]
    pub components_per_class: Option<usize>,
}

// ------------------------------------------------------------- artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub inputs: Vec<String>,
    pub config: PipelineConfig,
    pub seed: u64,
}

impl Artifact {
    fn new(command: &str, inputs: Vec<String>, cfg: &PipelineConfig) -> Self {
        Artifact {
            tool: TOOL.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            inputs,
            config: cfg.clone(),
            seed: cfg.seed,
        }
    }

    fn header_line(&self) -> Result<Vec<u8>, CliError> {
        let mut v = serde_json::to_vec(&json!({ "artifact": self })).map_err(internal)?;
        v.push(b'\n');
        Ok(v)
    }

    /// A JSON document: the artifact block followed by the payload's keys.
    fn document<T: Serialize>(&self, payload_key: Option<&str>, payload: &T) -> Result<Vec<u8>, CliError> {
        let body = serde_json::to_value(payload).map_err(internal)?;
        let mut doc = serde_json::Map::new();
        doc.insert("artifact".into(), serde_json::to_value(self).map_err(internal)?);
        match (payload_key, body) {
            (Some(k), body) => {
                doc.insert(k.to_string(), body);
            }
            (None, Value::Object(fields)) => doc.extend(fields),
            (None, _) => return Err(CliError::Internal("payload must be an object".into())),
        }
        let mut v = serde_json::to_vec(&Value::Object(doc)).map_err(internal)?;
        v.push(b'\n');
        Ok(v)
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn resolve(common: &Common, flags: Vec<(&str, Option<Value>)>) -> Result<PipelineConfig, CliError> {
    let file = common.config.as_deref().map(load_config_value).transpose()?;
    let mut set: Vec<(&str, Value)> = flags.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
    if let Some(seed) = common.seed {
        set.push(("seed", json!(seed)));
    }
    Ok(PipelineConfig::resolve(file.as_ref(), &set)?)
}

fn opt<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| serde_json::to_value(x).expect("flag value serializes"))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| input_err(parent, e))?;
            }
            fs::write(p, bytes).map_err(|e| input_err(p, e))
        }
        None => io::stdout().write_all(bytes).map_err(internal),
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path).map(BufReader::new).map_err(|e| input_err(path, e))
}

// ------------------------------------------------------------ readers

/// Graphs from a graph document (`graphs` key), a bare array, or a single
/// graph object.
pub fn read_graphs(path: &Path) -> Result<Vec<TrafficRelationGraph>, CliError> {
    let doc: Value = serde_json::from_reader(open(path)?).map_err(|e| input_err(path, e))?;
    let graphs = match doc {
        Value::Object(mut m) if m.contains_key("graphs") => m.remove("graphs").expect("checked"),
        Value::Array(a) => Value::Array(a),
        other => Value::Array(vec![other]),
    };
    serde_json::from_value(graphs).map_err(|e| input_err(path, e))
}

pub fn read_split(path: &Path) -> Result<DatasetSplit, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| input_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let mut doc: Value = serde_json::from_reader(open(path)?).map_err(|e| input_err(path, e))?;
    let body = match doc.get_mut("checkpoint") {
        Some(c) => c.take(),
        None => doc,
    };
    serde_json::from_value(body).map_err(|e| input_err(path, e))
}

pub fn read_mapping(path: &Path) -> Result<Vec<MappingEntry>, CliError> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| input_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| input_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn filter_by_split(
    graphs: Vec<TrafficRelationGraph>,
    filter: &SplitFilter,
) -> Result<Vec<TrafficRelationGraph>, CliError> {
    let Some(split_path) = &filter.split else {
        return Ok(graphs);
    };
    let split = read_split(split_path)?;
    let ids = match filter.side.unwrap_or(Side::Train) {
        Side::Train => split.train_ids(),
        Side::Test => split.test_ids(),
    };
    let mut by_id: HashMap<String, TrafficRelationGraph> = graphs.into_iter().map(|g| (g.graph_id.clone(), g)).collect();
    ids.into_iter()
        .map(|id| {
            by_id
                .remove(id)
                .ok_or_else(|| CliError::Input(format!("split id {id:?} matches no graph")))
        })
        .collect()
}

/// Captures listed in a mapping file, as (absolute path, entry).
fn mapped_captures(pcap_dir: &Path, mapping: Option<&Path>) -> Result<Vec<(PathBuf, MappingEntry)>, CliError> {
    let mapping_path = mapping.map(Path::to_path_buf).unwrap_or_else(|| pcap_dir.join(MAPPING_FILE));
    Ok(read_mapping(&mapping_path)?
        .into_iter()
        .map(|e| (pcap_dir.join(&e.path), e))
        .collect())
}

fn capture_flows(path: &Path, cfg: &FlowConfig) -> Result<(Vec<crate::flow::Flow>, usize, SkipCounts), CliError> {
    let cap = parse_capture_file(path).map_err(|e| input_err(path, e))?;
    let flows = assemble_flows_with(&cap.records, cfg);
    Ok((flows, cap.records.len(), cap.skipped))
}

fn load_pool(src: &PoolSource, cfg: &PipelineConfig) -> Result<(LabeledPool, Vec<String>), CliError> {
    if let Some(p) = &src.pool {
        let pool = read_pool_jsonl(open(p)?).map_err(|e| input_err(p, e))?;
        return Ok((pool, vec![path_str(p)]));
    }
    if let Some(gpath) = &src.graphs {
        let mpath = src
            .mapping
            .as_ref()
            .ok_or_else(|| CliError::Config("mapping: required with --graphs".into()))?;
        let mapping: HashMap<String, MappingEntry> =
            read_mapping(mpath)?.into_iter().map(|e| (e.path.clone(), e)).collect();
        let mut items = Vec::new();
        for g in read_graphs(gpath)? {
            let e = mapping
                .get(&g.graph_id)
                .ok_or_else(|| CliError::Input(format!("graph {:?} not in mapping", g.graph_id)))?;
            items.push(PoolItem {
                sample_id: g.graph_id.clone(),
                class: e.class.clone(),
                component: e.component.clone(),
                features: graph_features(&g),
            });
        }
        let pool = LabeledPool::new(items)?;
        return Ok((pool, vec![path_str(gpath), path_str(mpath)]));
    }
    if let Some(dir) = &src.pcap_dir {
        let flow_cfg = cfg.flow_config();
        let mut items = Vec::new();
        for (path, e) in mapped_captures(dir, src.mapping.as_deref())? {
            let (flows, _, _) = capture_flows(&path, &flow_cfg)?;
            let records: Vec<FlowRecord> = flows.iter().enumerate().map(|(i, f)| f.to_record(i as u64)).collect();
            let g = build_trg(&records, cfg.gamma_micros);
            items.push(PoolItem {
                sample_id: e.path.clone(),
                class: e.class,
                component: e.component,
                features: graph_features(&g),
            });
        }
        let mut inputs = vec![path_str(dir)];
        inputs.extend(src.mapping.as_deref().map(path_str));
        return Ok((LabeledPool::new(items)?, inputs));
    }
    Err(CliError::Config("one of --pool, --graphs or --pcap-dir is required".into()))
}

// ------------------------------------------------------------- commands

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub files: usize,
    pub packets: usize,
    pub flows: usize,
    pub skipped: SkipCounts,
}

pub fn cmd_flows(a: &FlowsArgs) -> Result<FlowSummary, CliError> {
    let cfg = resolve(
        &a.common,
        vec![
            ("idle_timeout_micros", opt(a.idle_timeout_micros)),
            ("rd_max_bytes", opt(a.rd_max_bytes)),
            ("pl_max_packets", opt(a.pl_max_packets)),
        ],
    )?;
    let mut sources: Vec<(PathBuf, String, Option<String>)> =
        a.inputs.iter().map(|p| (p.clone(), path_str(p), None)).collect();
    if let Some(dir) = &a.pcap_dir {
        for (path, e) in mapped_captures(dir, a.mapping.as_deref())? {
            sources.push((path, e.path, Some(e.class)));
        }
    }
    if sources.is_empty() {
        return Err(CliError::Config("no capture inputs given".into()));
    }

    let flow_cfg = cfg.flow_config();
    let mut summary = FlowSummary::default();
    let mut records = Vec::new();
    for (path, source, label) in &sources {
        let (flows, packets, skipped) = capture_flows(path, &flow_cfg)?;
        summary.files += 1;
        summary.packets += packets;
        summary.skipped.non_transport += skipped.non_transport;
        summary.skipped.fragments += skipped.fragments;
        summary.skipped.malformed += skipped.malformed;
        for f in flows {
            let mut r = f.to_record(records.len() as u64);
            r.source = Some(source.clone());
            r.label = label.clone();
            records.push(r);
        }
    }
    summary.flows = records.len();

    let mut inputs: Vec<String> = a.inputs.iter().map(|p| path_str(p)).collect();
    inputs.extend(a.pcap_dir.as_deref().map(path_str));
    inputs.extend(a.mapping.as_deref().map(path_str));
    let mut buf = Artifact::new("flows", inputs, &cfg).header_line()?;
    write_flows_jsonl(&mut buf, &records).map_err(internal)?;
    emit(a.common.out.as_deref(), &buf)?;
    Ok(summary)
}

pub fn cmd_graph(a: &GraphArgs) -> Result<Vec<TrafficRelationGraph>, CliError> {
    let cfg = resolve(
        &a.common,
        vec![("gamma_micros", opt(a.gamma_micros)), ("window_micros", opt(a.window_micros))],
    )?;
    let flows = read_flows_jsonl(open(&a.input)?).map_err(|e| input_err(&a.input, e))?;
    let mut groups: BTreeMap<Option<String>, Vec<FlowRecord>> = BTreeMap::new();
    for f in flows {
        groups.entry(f.source.clone()).or_default().push(f);
    }
    let mut graphs = Vec::new();
    for (source, flows) in groups {
        let id = source.unwrap_or_else(|| "graph".to_string());
        match cfg.window_micros {
            None => {
                let mut g = build_trg(&flows, cfg.gamma_micros);
                g.graph_id = id;
                graphs.push(g);
            }
            Some(w) => {
                for (i, mut g) in build_trgs_windowed(&flows, cfg.gamma_micros, w).into_iter().enumerate() {
                    g.graph_id = format!("{id}#{i}");
                    graphs.push(g);
                }
            }
        }
    }
    let doc = Artifact::new("graph", vec![path_str(&a.input)], &cfg).document(Some("graphs"), &graphs)?;
    emit(a.common.out.as_deref(), &doc)?;
    Ok(graphs)
}

fn split_inputs(inputs: &mut Vec<String>, f: &SplitFilter) {
    if let Some(s) = &f.split {
        inputs.push(path_str(s));
        inputs.push(format!("side={:?}", f.side.unwrap_or(Side::Train)).to_lowercase());
    }
}

pub fn cmd_train_align(a: &TrainArgs) -> Result<Checkpoint, CliError> {
    let cfg = resolve(
        &a.common,
        vec![
            ("align.tau", opt(a.tau)),
            ("align.proj_dim", opt(a.proj_dim)),
            ("align.optimizer.lr", opt(a.lr)),
            ("align.optimizer.epochs", opt(a.epochs)),
            ("align.optimizer.batch", opt(a.batch)),
        ],
    )?;
    let graphs = filter_by_split(read_graphs(&a.input)?, &a.filter)?;
    let enc = Encoders::new(&cfg.align.encoder);
    let align_cfg = cfg.alignment();
    let opts = cfg.train_options();
    let outcome = train_projector(&graphs, &align_cfg, &enc, &opts)?;
    let mut params = outcome.params;
    if graphs.iter().any(|g| g.label.is_some()) {
        fit_task_head(&mut params, &graphs, &enc)?;
    }
    if !params.is_finite() {
        return Err(CliError::Internal("training produced non-finite parameters".into()));
    }
    let ckpt = Checkpoint {
        config: align_cfg,
        encoder: cfg.align.encoder,
        params,
        seed: cfg.seed,
        epochs: opts.epochs,
        loss_trace: outcome.loss_trace,
    };
    let mut inputs = vec![path_str(&a.input)];
    split_inputs(&mut inputs, &a.filter);
    let doc = Artifact::new("train-align", inputs, &cfg).document(Some("checkpoint"), &ckpt)?;
    emit(a.common.out.as_deref(), &doc)?;
    Ok(ckpt)
}

pub fn cmd_classify(a: &ClassifyArgs) -> Result<Vec<LabeledId>, CliError> {
    let cfg = resolve(&a.common, vec![])?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let graphs = filter_by_split(read_graphs(&a.input)?, &a.filter)?;
    let enc = Encoders::new(&ckpt.encoder);
    let preds: Vec<LabeledId> = graphs
        .iter()
        .map(|g| {
            surrogate_classify(&ckpt.params, g, &enc).map(|p| LabeledId {
                sample_id: g.graph_id.clone(),
                label: p.label,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut inputs = vec![path_str(&a.input), path_str(&a.checkpoint)];
    split_inputs(&mut inputs, &a.filter);
    let art = Artifact::new("classify", inputs, &cfg);
    let mut buf = art.header_line()?;
    write_labels(&mut buf, &preds)?;
    emit(a.common.out.as_deref(), &buf)?;
    if let Some(tp) = &a.truth_out {
        let truths: Vec<LabeledId> = graphs
            .iter()
            .filter_map(|g| {
                g.label.as_ref().map(|l| LabeledId {
                    sample_id: g.graph_id.clone(),
                    label: l.clone(),
                })
            })
            .collect();
        let mut buf = art.header_line()?;
        write_labels(&mut buf, &truths)?;
        emit(Some(tp), &buf)?;
    }
    Ok(preds)
}

fn write_labels(buf: &mut Vec<u8>, rows: &[LabeledId]) -> Result<(), CliError> {
    for r in rows {
        serde_json::to_writer(&mut *buf, r).map_err(internal)?;
        buf.push(b'\n');
    }
    Ok(())
}

pub fn cmd_instr_gen(a: &InstrArgs) -> Result<usize, CliError> {
    let cfg = resolve(
        &a.common,
        vec![
            ("instr.h", opt(a.h)),
            ("instr.fanout", opt(a.fanout)),
            ("instr.task_samples", opt(a.task_samples)),
        ],
    )?;
    let graphs = read_graphs(&a.input)?;
    let mut samples = generate_matching_samples(&graphs, &cfg.instr_config(), cfg.seed)?;
    if cfg.instr.task_samples {
        samples.extend(generate_task_samples(&graphs, cfg.seed)?);
    }
    let mut buf = Artifact::new("instr-gen", vec![path_str(&a.input)], &cfg).header_line()?;
    write_samples_jsonl(&mut buf, &samples).map_err(internal)?;
    emit(a.common.out.as_deref(), &buf)?;
    Ok(samples.len())
}

/// Largest per-class sample count every class can supply for a
/// proportional split.
pub fn max_feasible_per_class(pool: &LabeledPool, ratio_train: crate::oodgen::DominantRatio, ratio_test: crate::oodgen::DominantRatio) -> usize {
    let structure = pool.structure();
    let mut best = 0;
    let upper = structure
        .values()
        .map(|c| c.values().map(Vec::len).sum::<usize>())
        .min()
        .unwrap_or(0);
    'n: for n in 1..=upper {
        for comps in structure.values() {
            let sizes: Vec<usize> = comps.values().map(Vec::len).collect();
            // the dominant component is seeded, so every choice must fit
            for d in 0..sizes.len() {
                let tr = proportional_counts(n, sizes.len(), d, ratio_train);
                let te = proportional_counts(n, sizes.len(), d, ratio_test);
                if sizes.iter().enumerate().any(|(i, &s)| tr[i] + te[i] > s) {
                    continue 'n;
                }
            }
        }
        best = n;
    }
    best
}

pub fn cmd_ood_build(a: &OodArgs) -> Result<DatasetSplit, CliError> {
    let cfg = resolve(
        &a.common,
        vec![
            ("ood.bias", opt(a.bias.clone())),
            ("ood.regime", opt(a.regime.clone())),
            ("ood.ratio_train", opt(a.ratio_train.clone())),
            ("ood.ratio_test", opt(a.ratio_test.clone())),
            ("ood.per_class_n", opt(a.per_class_n)),
            ("ood.train_fraction", opt(a.train_fraction)),
            ("ood.test_fraction", opt(a.test_fraction)),
        ],
    )?;
    let (pool, inputs) = load_pool(&a.source, &cfg)?;
    let ood = cfg.ood.effective()?;
    let split = match ood.bias {
        BiasKind::None => build_iid_split(&pool, ood.test_fraction, cfg.seed)?,
        BiasKind::Compositional => build_compositional_split(&pool, ood.train_fraction, ood.test_fraction, cfg.seed)?,
        BiasKind::Proportional => {
            let n = match ood.per_class_n {
                Some(n) => n,
                None => match max_feasible_per_class(&pool, ood.ratio_train, ood.ratio_test) {
                    0 => return Err(CliError::Input("pool too small for a proportional split".into())),
                    n => n,
                },
            };
            build_proportional_split(&pool, ood.ratio_train, ood.ratio_test, n, cfg.seed)?
        }
    };
    let doc = Artifact::new("ood-build", inputs, &cfg).document(None, &split)?;
    emit(a.common.out.as_deref(), &doc)?;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiOutput {
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn cmd_ni(a: &NiArgs) -> Result<NiOutput, CliError> {
    let cfg = resolve(&a.common, vec![])?;
    let (pool, mut inputs) = load_pool(&a.source, &cfg)?;
    let split = read_split(&a.split)?;
    inputs.push(path_str(&a.split));
    let per_class = ni_report(&pool, &split, |it| it.features.clone())?;
    let mean = per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
    let out = NiOutput { per_class, mean };
    let doc = Artifact::new("ni", inputs, &cfg).document(None, &out)?;
    emit(a.common.out.as_deref(), &doc)?;
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<crate::evalkit::MetricReport, CliError> {
    let cfg = resolve(&a.common, vec![])?;
    let preds = read_labels_jsonl(open(&a.pred)?).map_err(|e| input_err(&a.pred, e))?;
    let truths = read_labels_jsonl(open(&a.truth)?).map_err(|e| input_err(&a.truth, e))?;
    let report = evaluate_run(&preds, &truths)?;
    let doc = Artifact::new("eval", vec![path_str(&a.pred), path_str(&a.truth)], &cfg).document(Some("report"), &report)?;
    emit(a.common.out.as_deref(), &doc)?;
    let table = render_text(&report);
    if let Some(t) = &a.text_out {
        emit(Some(t), table.as_bytes())?;
    }
    eprint!("{table}");
    Ok(report)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<usize, CliError> {
    let cfg = resolve(
        &a.common,
        vec![
            ("synth.sessions_per_class", opt(a.sessions_per_class)),
            ("synth.components_per_class", opt(a.components_per_class)),
        ],
    )?;
    let dir = a
        .common
        .out
        .as_ref()
        .ok_or_else(|| CliError::Config("out: synth needs an output directory".into()))?;
    fs::create_dir_all(dir).map_err(|e| input_err(dir, e))?;
    let sessions = generate_sessions(&cfg.synth_config());
    write_capture_tree(dir, &sessions).map_err(|e| input_err(dir, e))?;
    let doc = Artifact::new("synth", vec![], &cfg).document(None, &json!({ "sessions": sessions.len() }))?;
    emit(Some(&dir.join("artifact.json")), &doc)?;
    Ok(sessions.len())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Flows(a) => {
            let s = cmd_flows(a)?;
            eprintln!("{}", serde_json::to_string(&s).map_err(internal)?);
        }
        Command::Graph(a) => {
            let g = cmd_graph(a)?;
            eprintln!("{} graph(s)", g.len());
        }
        Command::TrainAlign(a) => {
            let c = cmd_train_align(a)?;
            eprintln!("loss per epoch: {:?}", c.loss_trace);
        }
        Command::Classify(a) => {
            let p = cmd_classify(a)?;
            eprintln!("{} prediction(s)", p.len());
        }
        Command::InstrGen(a) => {
            let n = cmd_instr_gen(a)?;
            eprintln!("{n} sample(s)");
        }
        Command::OodBuild(a) => {
            let s = cmd_ood_build(a)?;
            eprintln!("mean NI {:?}", s.mean_ni());
        }
        Command::Ni(a) => {
            let r = cmd_ni(a)?;
            eprintln!("mean NI {}", r.mean);
        }
        Command::Eval(a) => {
            cmd_eval(a)?;
        }
        Command::Synth(a) => {
            let n = cmd_synth(a)?;
            eprintln!("{n} session(s)");
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
