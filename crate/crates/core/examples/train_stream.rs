//! Two-tower training over a synthetic stream, printing losses as it goes.

use streamvq::pipeline::{Pipeline, PipelineConfig};
use streamvq::simulator::{generate_corpus, generate_events, CorpusConfig, StreamConfig};

fn main() {
    let corpus = generate_corpus(
        &CorpusConfig {
            items: 2_000,
            users: 100,
            groups: 10,
            dim: 8,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let stream = StreamConfig {
        impressions: 40_000,
        ..Default::default()
    };
    let mut cfg = PipelineConfig::default();
    cfg.codebook.k = 32;
    cfg.codebook.dim = 8;
    cfg.snapshot_cadence = 10_000;

    let mut p = Pipeline::new(cfg).unwrap();
    let mut batches = 0;
    for ev in generate_events(&corpus, &stream, 1) {
        let Some(m) = p.feed(ev).unwrap() else {
            continue;
        };
        batches += 1;
        if batches % 40 == 0 {
            println!(
                "{:>6} impressions  aux {:>8.2}  ind {:>8.2}  positives {:>3}",
                p.impressions(),
                m.losses.aux,
                m.losses.ind,
                m.positives
            );
        }
        if p.at_snapshot_boundary() {
            let s = p.snapshot();
            println!("snapshot {} with {} items", s.version, s.len());
        }
    }
    let st = p.engine().stats();
    println!(
        "{} impressions, {} candidate events, {} reassignments",
        st.impressions, st.candidates, st.reassignments
    );
}
