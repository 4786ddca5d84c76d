//! Streaming codebook: quantize items and move clusters with EMA updates.

use streamvq::codebook::{Codebook, CodebookParams};

fn main() {
    let params = CodebookParams {
        k: 4,
        dim: 2,
        alpha: 0.9,
        beta: 0.5,
        s: 5.0,
        eta: Vec::new(),
    };
    let mut cb = Codebook::new(params).unwrap();

    // seed two clusters, then let a stream of items pull them around
    cb.ema_update(0, &[1.0, 0.0], 1.0, None).unwrap();
    cb.ema_update(1, &[0.0, 1.0], 1.0, None).unwrap();
    let stream = [[0.9, 0.1], [0.8, 0.3], [0.1, 0.9], [0.7, 0.0], [0.2, 1.1]];
    for (i, v) in stream.iter().enumerate() {
        let q = cb.quantize(v).unwrap();
        // rarely seen items get a larger interval and a larger step
        let delta = 1.0 + 10.0 * i as f64;
        cb.ema_update(q.cluster_id, v, delta, None).unwrap();
        println!(
            "item {v:?} -> cluster {} (raw {:.3}, discounted {:.3})",
            q.cluster_id, q.raw_distance, q.discounted_distance
        );
    }
    for k in 0..cb.k() {
        if cb.is_initialized(k) {
            println!(
                "cluster {k}: c = {:.4}, e = {:?}, disturbance = {:.3}",
                cb.counter(k),
                cb.cluster_embedding(k).unwrap(),
                cb.disturbance_factor(k).unwrap()
            );
        }
    }
}
