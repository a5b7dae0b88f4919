//! Traffic relation graphs from packet captures, contrastive alignment of
//! graph-structure and flow-feature embeddings, instruction-tuning data,
//! distribution-shifted dataset splits and classification metrics.

pub mod align;
pub mod config;
pub mod evalkit;
pub mod flow;
pub mod ingest;
pub mod instr;
pub mod oodgen;
pub mod pipeline;
pub mod seeding;
pub mod synth;
pub mod trg;
