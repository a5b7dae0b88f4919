//! Accuracy and macro precision/recall/F1 from prediction and truth files.
//!
//!     cargo run --example evaluate -- preds.jsonl truths.jsonl
//!
//! Without arguments, scores a two-class hand example.

use std::fs::File;
use std::io::BufReader;

use trafficgraph::evalkit::{confusion, evaluate_run, macro_metrics, read_labels_jsonl, render_text};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let report = if let [pred, truth] = args.as_slice() {
        let preds = read_labels_jsonl(BufReader::new(File::open(pred)?))?;
        let truths = read_labels_jsonl(BufReader::new(File::open(truth)?))?;
        evaluate_run(&preds, &truths)?
    } else {
        // rows are truths: [[8, 2], [3, 7]]
        let truths: Vec<&str> = [["a"; 10], ["b"; 10]].concat();
        let preds: Vec<&str> = [vec!["a"; 8], vec!["b"; 2], vec!["a"; 3], vec!["b"; 7]].concat();
        let m = confusion(&preds, &truths)?;
        println!("confusion {:?}", m.counts);
        macro_metrics(&m)
    };
    print!("{}", render_text(&report));
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
