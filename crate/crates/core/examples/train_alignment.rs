//! Train the projection layer on the contrastive alignment loss over a
//! synthetic corpus, then fit the class head and save a checkpoint.
//!
//!     cargo run --release --example train_alignment -- [checkpoint.json]

use trafficgraph::align::{fit_task_head, train_projector, AlignmentConfig, Checkpoint, EncoderConfig, Encoders, TrainOptions};
use trafficgraph::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&SynthConfig {
        sessions_per_class: 40,
        ..SynthConfig::default()
    });
    let graphs: Vec<_> = corpus.into_iter().map(|g| g.graph).collect();

    let cfg = AlignmentConfig::default();
    let enc_cfg = EncoderConfig::default();
    let enc = Encoders::new(&enc_cfg);
    let opt = TrainOptions { seed: 7, ..TrainOptions::default() };

    let out = train_projector(&graphs, &cfg, &enc, &opt)?;
    for (epoch, loss) in out.loss_trace.iter().enumerate() {
        println!("epoch {}: mean loss {loss:.6}", epoch + 1);
    }
    let mut params = out.params;
    fit_task_head(&mut params, &graphs, &enc)?;

    let ckpt = Checkpoint {
        config: cfg,
        encoder: enc_cfg,
        params,
        seed: opt.seed,
        epochs: opt.epochs,
        loss_trace: out.loss_trace,
    };
    let path = std::env::args().nth(1).unwrap_or_else(|| "checkpoint.json".into());
    std::fs::write(&path, serde_json::to_vec(&ckpt)?)?;
    println!("wrote {path}");
    Ok(())
}
