//! Synthetic workload with drift: recall against ground truth over time.

use streamvq::simulator::{CorpusConfig, Drift};
use streamvq::study::{run_study, StudyConfig};

fn main() {
    let mut cfg = StudyConfig {
        corpus: CorpusConfig {
            items: 2_000,
            users: 80,
            groups: 8,
            drift: Some(Drift {
                at: 60_000,
                fraction: 0.5,
                displacement: 2.0,
            }),
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.stream.impressions = 120_000;
    cfg.pipeline.codebook.k = 32;
    cfg.probe = 8;
    cfg.eval_users = 20;
    cfg.eval_every = 10_000;

    let out = run_study(&cfg, 1).unwrap();
    println!("impressions  served/model  served/truth  model/truth");
    for pt in &out.curve {
        println!(
            "{:>11}  {:>12.3}  {:>12.3}  {:>11.3}",
            pt.impressions, pt.model, pt.truth, pt.ceiling
        );
    }
    println!("{} reassignments in {:.1?}", out.reassignments, out.elapsed);
}
