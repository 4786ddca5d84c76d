//! Real-time indexing: impressions assign items to clusters, then an
//! immutable posting-list snapshot is cut and written to disk.

use std::collections::BTreeMap;

use streamvq::codebook::{Codebook, CodebookParams};
use streamvq::engine::{AssignmentEngine, EngineConfig};
use streamvq::event::Event;
use streamvq::snapshot::PostingListSnapshot;

fn main() {
    let params = CodebookParams {
        k: 3,
        dim: 2,
        ..Default::default()
    };
    let mut engine = AssignmentEngine::new(Codebook::new(params).unwrap(), EngineConfig::default());
    let items: [(u64, [f64; 2], f64); 6] = [
        (10, [1.0, 0.1], 0.3),
        (11, [0.9, 0.0], 0.8),
        (20, [0.0, 1.0], 0.1),
        (21, [0.1, 0.9], -0.2),
        (30, [-1.0, 0.0], 0.5),
        (10, [1.1, 0.2], 0.4),
    ];
    for (ts, (id, v, b)) in items.iter().enumerate() {
        let ev = Event::impression(0, *id, ts as u64, BTreeMap::new());
        let route = engine.route(*id, v, &[]).unwrap();
        engine.process_impression(&ev, v, *b, route.quantization).unwrap();
        println!("item {id} -> cluster {:?}", engine.cluster_of(*id));
    }

    let snap = engine.dump_snapshot();
    snap.check_integrity().unwrap();
    for k in 0..snap.k() {
        println!(
            "cluster {k}: {:?} biases {:?}",
            snap.cluster_items(k),
            snap.cluster_biases(k)
        );
    }
    let dir = std::env::temp_dir().join("streamvq-index-example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("snapshot.bin");
    snap.save(&path).unwrap();
    let back = PostingListSnapshot::load(&path).unwrap();
    assert_eq!(back, snap);
    println!("wrote version {} to {}", back.version, path.display());
}
