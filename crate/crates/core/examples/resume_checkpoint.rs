//! Interrupt a training run, save a checkpoint and resume it exactly.

use streamvq::event::Event;
use streamvq::pipeline::{Pipeline, PipelineConfig};
use streamvq::simulator::{generate_corpus, generate_events, CorpusConfig, StreamConfig};

fn main() {
    let corpus = generate_corpus(
        &CorpusConfig {
            items: 1_000,
            users: 40,
            groups: 6,
            dim: 8,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let stream = StreamConfig {
        impressions: 8_000,
        ..Default::default()
    };
    let events: Vec<Event> = generate_events(&corpus, &stream, 3).collect();
    let mut cfg = PipelineConfig::default();
    cfg.codebook.k = 16;
    cfg.codebook.dim = 8;

    let mut full = Pipeline::new(cfg.clone()).unwrap();
    for e in &events {
        full.feed(e.clone()).unwrap();
    }

    let path = std::env::temp_dir().join("streamvq-resume-example.bin");
    let mut first = Pipeline::new(cfg).unwrap();
    for e in &events[..events.len() / 3] {
        first.feed(e.clone()).unwrap();
    }
    first.save_checkpoint(&path).unwrap();
    println!("checkpoint after {} events", first.events_seen());

    let mut resumed = Pipeline::load_checkpoint(&path).unwrap();
    for e in &events[resumed.events_seen() as usize..] {
        resumed.feed(e.clone()).unwrap();
    }
    let same = resumed.encode_checkpoint() == full.encode_checkpoint();
    println!("resumed state identical to the uninterrupted run: {same}");
}
