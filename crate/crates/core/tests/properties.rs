use proptest::prelude::*;

use streamvq::codebook::{Codebook, CodebookParams};
use streamvq::oracle::{cluster_order, global_sort, scan_quantize, EmaReplay};
use streamvq::pipeline::{Pipeline, PipelineConfig};
use streamvq::serving::{merge_sort_retrieve, rank_order, score_clusters};
use streamvq::simulator::{generate_corpus, generate_events, CorpusConfig, StreamConfig};
use streamvq::snapshot::PostingListSnapshot;

fn params(k: usize, dim: usize, beta: f64) -> CodebookParams {
    CodebookParams {
        k,
        dim,
        alpha: 0.9,
        beta,
        s: 5.0,
        eta: Vec::new(),
    }
}

/// Small-integer grids make exact ties common.
fn grid(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-2i32..=2).prop_map(f64::from), len)
}

fn codebook_state() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..10, 1usize..5).prop_flat_map(|(k, dim)| {
        let counters = prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..4.0, Just(1.0)], k);
        (Just(k), Just(dim), counters, grid(k * dim))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A snapshot over a random codebook with every cluster initialized and
/// random posting lists, sorted the way the engine sorts them.
fn snapshot_strategy() -> impl Strategy<Value = PostingListSnapshot> {
    (1usize..8, 1usize..4).prop_flat_map(|(k, dim)| {
        let w = grid(k * dim);
        let counters = prop::collection::vec(0.5f64..3.0, k);
        let lists = prop::collection::vec(
            prop::collection::vec((-3i32..=3).prop_map(|b| f64::from(b) * 0.5), 0..7),
            k,
        );
        (Just(k), Just(dim), counters, w, lists).prop_map(|(k, dim, counters, w, lists)| {
            let cb = Codebook::from_state(params(k, dim, 0.5), counters, w).unwrap();
            let (mut items, mut segs, mut biases) = (Vec::new(), Vec::new(), Vec::new());
            let mut id = 0u64;
            for list in lists {
                let mut l: Vec<(u64, f64)> = list
                    .into_iter()
                    .map(|b| {
                        id += 1;
                        (id * 7 % 101, b)
                    })
                    .collect();
                l.sort_by(|a, b| rank_order((a.1, a.0), (b.1, b.0)));
                for (i, b) in l {
                    items.push(i);
                    biases.push(b);
                }
                segs.push(items.len() as u64);
            }
            let n = items.len();
            PostingListSnapshot {
                version: 1,
                codebook: cb,
                items,
                segs,
                biases,
                embeddings: vec![0.0; n * dim],
            }
        })
    })
}

/// Every `(id, score)` in the given clusters, scored exactly.
fn all_scored(u: &[f64], snap: &PostingListSnapshot, clusters: &[usize]) -> Vec<(u64, f64)> {
    let mut out = Vec::new();
    for &k in clusters {
        let e = snap.codebook.cluster_embedding(k).unwrap();
        let base = dot(u, e);
        for pos in snap.segment(k) {
            out.push((snap.items[pos], base + snap.biases[pos]));
        }
    }
    out
}

proptest! {
    #[test]
    fn quantize_equals_exhaustive_scan(
        (k, dim, counters, w) in codebook_state(),
        v in grid(4),
        disturbance in any::<bool>(),
    ) {
        let v = &v[..dim];
        let cb = Codebook::from_state(params(k, dim, 0.5), counters.clone(), w.clone())
            .unwrap()
            .with_disturbance(disturbance);
        let fast = cb.quantize(v).ok().map(|q| q.cluster_id);
        prop_assert_eq!(fast, scan_quantize(&counters, &w, 5.0, disturbance, v));
    }

    #[test]
    fn starving_a_cluster_never_hurts_it(
        (k, dim, counters, w) in codebook_state(),
        target in 0usize..10,
        shrink in 0.0f64..1.0,
        v in grid(4),
    ) {
        let t = target % k;
        prop_assume!(counters[t] > 1e-6);
        let v = &v[..dim];
        let before = Codebook::from_state(params(k, dim, 0.5), counters.clone(), w.clone()).unwrap();
        // keep e[t] fixed, lower c[t]
        let mut c2 = counters.clone();
        c2[t] *= shrink.max(1e-3);
        let mut w2 = w.clone();
        let ratio = c2[t] / counters[t];
        w2[t * dim..(t + 1) * dim].iter_mut().for_each(|x| *x *= ratio);
        let after = Codebook::from_state(params(k, dim, 0.5), c2, w2).unwrap();
        let dist = |cb: &Codebook| {
            let e = cb.cluster_embedding(t).unwrap();
            let d: f64 = e.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            d * cb.disturbance_factor(t).unwrap()
        };
        prop_assert!(dist(&after) <= dist(&before) + 1e-12);
    }

    #[test]
    fn ema_matches_scalar_replay(
        ops in prop::collection::vec((0usize..6, grid(3), 1.0f64..500.0, 0.0f64..2.0, 0.0f64..1.0), 1..200),
        beta in 0.0f64..1.5,
    ) {
        let mut p = params(6, 3, beta);
        p.eta = vec![1.0, 0.5];
        let mut cb = Codebook::new(p.clone()).unwrap();
        let mut replay = EmaReplay::new(&p);
        for (k, v, delta, h0, h1) in &ops {
            let r = [*h0, *h1];
            cb.ema_update(*k, v, *delta, Some(&r)).unwrap();
            replay.update(*k, v, *delta, Some(&r));
        }
        prop_assert!(replay.max_rel_error(&cb) <= 1e-9);
    }

    #[test]
    fn constant_weights_keep_embeddings_in_the_convex_hull(
        items in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40),
        delta in 1.0f64..100.0,
    ) {
        let mut cb = Codebook::new(params(1, 3, 0.5)).unwrap();
        for v in &items {
            cb.ema_update(0, v, delta, None).unwrap();
        }
        let e = cb.cluster_embedding(0).unwrap();
        for d in 0..3 {
            let lo = items.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            let hi = items.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e[d] >= lo - 1e-9 && e[d] <= hi + 1e-9, "dim {d}: {} outside [{lo}, {hi}]", e[d]);
        }
    }

    #[test]
    fn constant_input_fixed_point_ignores_beta(
        v in prop::collection::vec(-5.0f64..5.0, 3),
        deltas in prop::collection::vec(1.0f64..1000.0, 1..50),
        b1 in 0.0f64..2.0,
        b2 in 0.0f64..2.0,
    ) {
        let run = |beta: f64| {
            let mut cb = Codebook::new(params(1, 3, beta)).unwrap();
            for &d in &deltas {
                cb.ema_update(0, &v, d, None).unwrap();
            }
            cb.cluster_embedding(0).unwrap().to_vec()
        };
        let (e1, e2) = (run(b1), run(b2));
        for d in 0..3 {
            prop_assert!((e1[d] - v[d]).abs() <= 1e-9 * (1.0 + v[d].abs()));
            prop_assert!((e1[d] - e2[d]).abs() <= 1e-9 * (1.0 + v[d].abs()));
        }
    }

    #[test]
    fn merge_at_l1_is_a_global_sort(
        snap in snapshot_strategy(),
        u in grid(3),
        probe in 1usize..9,
        s in 1usize..30,
    ) {
        let u = &u[..snap.dim()];
        let mut clusters = score_clusters(u, &snap).unwrap();
        clusters.truncate(probe);
        let got = merge_sort_retrieve(&clusters, &snap, s, 1);
        let probed: Vec<usize> = cluster_order(u, &snap).into_iter().take(probe).collect();
        let want = global_sort(all_scored(u, &snap, &probed), s);
        let got: Vec<(u64, f64)> = got.hits.iter().map(|h| (h.item, h.score)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn chunk_heads_dominate_everything_after_them(
        snap in snapshot_strategy(),
        u in grid(3),
        probe in 1usize..9,
        s in 1usize..30,
        l in 1usize..9,
    ) {
        let u = &u[..snap.dim()];
        let mut clusters = score_clusters(u, &snap).unwrap();
        clusters.truncate(probe);
        let r = merge_sort_retrieve(&clusters, &snap, s, l);
        prop_assert!(r.hits.len() <= s);
        prop_assert!(r.heap_pops <= s.div_ceil(l) + clusters.len());

        let probed: Vec<usize> = clusters.iter().map(|c| c.cluster).collect();
        let emitted: Vec<u64> = r.items();
        let unserved: Vec<(u64, f64)> = all_scored(u, &snap, &probed)
            .into_iter()
            .filter(|(id, _)| !emitted.contains(id))
            .collect();
        for (i, &start) in r.chunk_starts.iter().enumerate() {
            let head = &r.hits[start];
            for later in &r.chunk_starts[i + 1..] {
                prop_assert!(rank_order((head.score, head.item), (r.hits[*later].score, r.hits[*later].item)).is_le());
            }
            for (id, score) in &unserved {
                prop_assert!(rank_order((head.score, head.item), (*score, *id)).is_le());
            }
        }
    }

    #[test]
    fn clusters_beating_the_cutoff_contribute_at_l1(
        snap in snapshot_strategy(),
        u in grid(3),
        s in 1usize..30,
    ) {
        let u = &u[..snap.dim()];
        let clusters = score_clusters(u, &snap).unwrap();
        let r = merge_sort_retrieve(&clusters, &snap, s, 1);
        prop_assume!(r.hits.len() == s);
        let cutoff = r.hits.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
        for c in &clusters {
            let seg = snap.segment(c.cluster);
            let head = c.score + snap.biases[seg.start];
            if head > cutoff {
                let ids = &snap.items[seg];
                prop_assert!(r.hits.iter().any(|h| ids.contains(&h.item)));
            }
        }
    }

    #[test]
    fn snapshots_round_trip_bit_exactly(snap in snapshot_strategy()) {
        snap.check_integrity().unwrap();
        let bytes = snap.encode();
        let back = PostingListSnapshot::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, snap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn candidates_change_only_assignments(seed in 0u64..1000, ratio in 0.05f64..2.0, batch in 4usize..40) {
        let corpus = generate_corpus(
            &CorpusConfig { items: 150, users: 20, groups: 4, dim: 3, ..Default::default() },
            seed,
        )
        .unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.codebook.k = 8;
        cfg.codebook.dim = 3;
        cfg.trainer.batch_size = batch;
        let sc = StreamConfig { impressions: 400, candidate_ratio: ratio, ..Default::default() };
        let mut with = Pipeline::new(cfg.clone()).unwrap();
        let mut without = Pipeline::new(cfg).unwrap();
        for ev in generate_events(&corpus, &sc, seed) {
            if ev.is_impression() {
                without.feed(ev.clone()).unwrap();
            }
            with.feed(ev).unwrap();
        }
        let (a, b) = (with.engine(), without.engine());
        prop_assert_eq!(a.codebook().counters(), b.codebook().counters());
        prop_assert_eq!(a.codebook().preliminary_flat(), b.codebook().preliminary_flat());
        prop_assert_eq!(a.records().len(), b.records().len());
        for (x, y) in a.records().iter().zip(b.records()) {
            prop_assert_eq!((x.item_id, &x.v_emb, x.v_bias, x.last_seen), (y.item_id, &y.v_emb, y.v_bias, y.last_seen));
        }
        prop_assert_eq!(with.trainer().model(), without.trainer().model());
    }
}

/// With `l > 1` a cluster whose head beats the last served score can still be
/// left out: the chunks of a better list fill the result first.
#[test]
fn chunking_can_skip_a_cluster_above_the_cutoff() {
    let cb = Codebook::from_state(params(3, 1, 0.5), vec![1.0; 3], vec![0.0; 3]).unwrap();
    let lists: [&[f64]; 3] = [&[10.0, 9.0, 8.0, 1.0], &[5.0], &[7.0; 8]];
    let (mut items, mut segs, mut biases) = (Vec::new(), Vec::new(), Vec::new());
    for (k, l) in lists.iter().enumerate() {
        for (i, b) in l.iter().enumerate() {
            items.push((k * 100 + i) as u64);
            biases.push(*b);
        }
        segs.push(items.len() as u64);
    }
    let n = items.len();
    let snap = PostingListSnapshot {
        version: 1,
        codebook: cb,
        items,
        segs,
        biases,
        embeddings: vec![0.0; n],
    };
    let clusters = score_clusters(&[1.0], &snap).unwrap();
    let r = merge_sort_retrieve(&clusters, &snap, 12, 4);
    assert_eq!(r.hits.len(), 12);
    let min = r.hits.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
    assert_eq!(min, 1.0);
    assert!(
        !r.items().contains(&100),
        "cluster 1's head (5.0) is above the cutoff yet unserved"
    );
}
