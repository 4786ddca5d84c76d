//! Query serving: probe the best clusters and merge their posting lists,
//! compared with an exact scan of the same snapshot.

use streamvq::oracle::quantized_topk;
use streamvq::pipeline::{Pipeline, PipelineConfig};
use streamvq::serving::{serve_query, Query};
use streamvq::simulator::{generate_corpus, generate_events, recall, CorpusConfig, StreamConfig};

fn main() {
    let corpus = generate_corpus(
        &CorpusConfig {
            items: 3_000,
            users: 50,
            groups: 12,
            dim: 8,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.codebook.k = 48;
    cfg.codebook.dim = 8;
    let mut p = Pipeline::new(cfg).unwrap();
    let stream = StreamConfig {
        impressions: 30_000,
        ..Default::default()
    };
    for ev in generate_events(&corpus, &stream, 2) {
        p.feed(ev).unwrap();
    }
    p.flush().unwrap();
    let snap = p.snapshot();

    let u = p
        .trainer()
        .model()
        .user_vector_by_id(0, 7)
        .expect("user 7 was trained");
    let exact: Vec<u64> = quantized_topk(&u, &snap, 20).iter().map(|x| x.0).collect();
    for (probe, chunk) in [(48, 1), (48, 8), (8, 1), (8, 8), (2, 4)] {
        let mut q = Query::new(u.clone());
        q.probe = probe;
        q.chunk = chunk;
        q.target_size = 20;
        let r = serve_query(&q, &snap).unwrap();
        println!(
            "probe {probe:>2} l {chunk}: recall {:.2}, {} heap pops, top {:?}",
            recall(&r.items(), &exact),
            r.heap_pops,
            r.items().iter().take(5).collect::<Vec<_>>()
        );
    }
}
