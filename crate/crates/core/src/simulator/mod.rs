//! Synthetic workloads and ground truth.
//!
//! Items live around latent group means and are drawn with Zipf popularity;
//! users mix two groups. A drift schedule can move some group means at a
//! given impression timestamp while users keep their original tastes.

mod corpus;
mod metrics;
mod stream;

pub use corpus::{generate_corpus, CorpusConfig, Drift, SimError, SyntheticCorpus};
pub use metrics::{
    brute_force_topk, max_share, median, normalized_entropy, recall, recovery_lag, size_histogram, Report,
};
pub use stream::{generate_events, EventStream, StreamConfig};

/// Generator for choosing evaluation users, independent of the workload.
pub fn eval_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    corpus::sub_rng(seed, 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(zipf: f64, noise: f64) -> CorpusConfig {
        CorpusConfig {
            items: 1000,
            users: 50,
            groups: 5,
            dim: 4,
            zipf,
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_items_sit_on_means() {
        let c = generate_corpus(&small(1.0, 0.0), 3).unwrap();
        for i in 0..1000u64 {
            assert_eq!(c.item_vector(i, 0), c.group_mean(c.item_group[i as usize], 0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(1.0, 0.1);
        let a = generate_corpus(&cfg, 9).unwrap();
        let b = generate_corpus(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let sc = StreamConfig {
            impressions: 500,
            ..Default::default()
        };
        let ea: Vec<_> = generate_events(&a, &sc, 9).collect();
        let eb: Vec<_> = generate_events(&b, &sc, 9).collect();
        assert_eq!(ea, eb);
        assert_ne!(a, generate_corpus(&cfg, 10).unwrap());
    }

    #[test]
    fn candidate_ratio_controls_interleaving() {
        let c = generate_corpus(&small(1.0, 0.1), 1).unwrap();
        let mut sc = StreamConfig {
            impressions: 400,
            candidate_ratio: 0.0,
            ..Default::default()
        };
        let none: Vec<_> = generate_events(&c, &sc, 1).collect();
        assert_eq!(none.len(), 400);
        assert!(none.iter().all(|e| e.is_impression()));
        sc.candidate_ratio = 0.25;
        let some: Vec<_> = generate_events(&c, &sc, 1).collect();
        assert_eq!(some.len(), 500);
        let imps: Vec<_> = some.iter().filter(|e| e.is_impression()).cloned().collect();
        assert_eq!(imps, none);
        let mut last = 0;
        for e in &some {
            assert!(e.ts >= last);
            last = e.ts;
            if !e.is_impression() {
                assert!(e.rewards.is_empty());
            }
        }
    }

    #[test]
    fn uniform_popularity_without_exponent() {
        let c = generate_corpus(&small(0.0, 0.1), 4).unwrap();
        let mut rng = corpus::sub_rng(4, 99);
        let mut counts = vec![0u32; 1000];
        for _ in 0..200_000 {
            counts[c.sample_item(&mut rng) as usize] += 1;
        }
        // 200 expected per item, sd about 14
        assert!(counts.iter().all(|&n| (120..=280).contains(&n)));
    }

    #[test]
    fn entropy_and_share_examples() {
        assert_eq!(normalized_entropy(&[0u32, 7, 0, 0]), 0.0);
        assert_eq!(max_share(&[0u32, 7, 0, 0]), 1.0);
        assert!((normalized_entropy(&[3u32; 16]) - 1.0).abs() < 1e-12);
        assert_eq!(size_histogram(&[0, 1, 5, 9, 100], &[0, 1, 10]), vec![1, 3, 1]);
        assert_eq!(recall(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(
            recovery_lag(&[(0, 0.8), (10, 0.2), (20, 0.7), (30, 0.9)], 10, 0.95),
            Some(20)
        );
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn brute_force_ranks_by_score_then_id() {
        let vs = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let items = vs.iter().enumerate().map(|(i, v)| (i as u64, &v[..], 0.0));
        let top = brute_force_topk(&[1.0, 0.0], items, 3);
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 2, 1]);
    }
}
