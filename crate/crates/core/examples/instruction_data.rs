//! Instruction-tuning samples: graph matching over sampled subgraphs and
//! class questions over whole graphs.

use std::io;

use trafficgraph::instr::{
    generate_matching_samples, generate_task_samples, invert_permutation, parse_mapping, write_samples_jsonl,
    InstrConfig,
};
use trafficgraph::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&SynthConfig {
        sessions_per_class: 2,
        ..SynthConfig::default()
    });
    let graphs: Vec<_> = corpus.into_iter().map(|g| g.graph).collect();

    let cfg = InstrConfig { h: 2, fanout: 3 };
    let matching = generate_matching_samples(&graphs, &cfg, 11)?;
    let tasks = generate_task_samples(&graphs, 11)?;
    eprintln!("{} matching, {} task samples", matching.len(), tasks.len());

    let s = &matching[0];
    eprintln!("{}\n{}\n{}", s.graph_tokens, s.prompt, s.answer);
    // the answer is the inverse of the stored shuffle
    let mapping = parse_mapping(&s.answer).expect("well-formed answer");
    assert_eq!(mapping, invert_permutation(&s.meta.permutation));

    write_samples_jsonl(io::stdout().lock(), &matching[..3])?;
    write_samples_jsonl(io::stdout().lock(), &tasks[..1])?;
    Ok(())
}
