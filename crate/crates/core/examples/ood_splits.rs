//! Distribution-shifted splits over a synthetic pool: the four named
//! regimes, an unbiased reference, and the Non-I.I.D. Index of each.

use trafficgraph::oodgen::{
    build_compositional_split, build_iid_split, build_proportional_split, count_subsets, proportional_counts, Regime,
};
use trafficgraph::synth::{corpus_pool, generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = corpus_pool(&generate_corpus(&SynthConfig::default()));
    let even = "1:1".parse()?;
    let seed = 3;

    println!("ratio 3 over 3 components, 30 samples: {:?}", proportional_counts(30, 3, 0, "3".parse()?));
    println!("5 components: {:?} admissible train/test subsets", count_subsets(5));

    let iid = build_iid_split(&pool, 0.3, seed)?;
    println!("iid      mean NI {:.3}", iid.mean_ni().unwrap());
    for name in ["netd1", "netd2", "netd3", "netd4"] {
        let regime: Regime = name.parse()?;
        let split = match (regime.ratio_train(), regime.train_fraction()) {
            (Some(r), _) => build_proportional_split(&pool, r, even, 30, seed)?,
            (_, Some(f)) => build_compositional_split(&pool, f, 0.3, seed)?,
            _ => unreachable!(),
        };
        println!("{name}    mean NI {:.3}", split.mean_ni().unwrap());
        for c in &split.classes {
            println!(
                "  {:<7} train {:>3} test {:>3} dominant {:?} train components {:?}",
                c.name,
                c.train_ids.len(),
                c.test_ids.len(),
                c.dominant,
                c.train_components
            );
        }
    }
    Ok(())
}
