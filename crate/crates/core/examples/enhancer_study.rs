//! Trains the extractor with and without its enhancer on the toy corpus and
//! prints speaker confusion next to the pooled baseline.
//!
//! `cargo run --release --example enhancer_study -- 0 1 2` runs three seeds.

use hee::experiment::{enhancer_study, ExperimentConfig, ExperimentReport};

fn main() -> hee::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let mut report = ExperimentReport::default();
    for seed in seeds {
        let cfg = ExperimentConfig::desk().with_seed(seed);
        report.merge(enhancer_study(&cfg, |stage, r| {
            if (r.step + 1) % 100 == 0 {
                eprintln!("seed {seed} {stage} step {} loss {:.3} acc {:.3}", r.step + 1, r.loss, r.accuracy);
            }
        })?);
    }
    print!("{}", report.table());
    Ok(())
}
