//! Slow, obviously-correct reference implementations used to check the fast
//! paths.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, CodebookParams};
use crate::engine::{AssignmentEngine, EngineConfig, ItemRecord};
use crate::event::Event;
use crate::serving::rank_order;
use crate::snapshot::PostingListSnapshot;
use crate::trainer::loss::{in_batch_softmax, logq_offsets, SoftmaxBatch};
use crate::trainer::{Batch, LossWeights, ParamRef, Trainer, TrainerConfig};

/// Exhaustive scan of `||w_k / c_k - v||^2 * r_k` over every cluster with a
/// counter of at least `1e-12`.
pub fn scan_quantize(counters: &[f64], w: &[f64], s: f64, disturbance: bool, v: &[f64]) -> Option<usize> {
    let k = counters.len();
    let dim = v.len();
    let total: f64 = counters.iter().sum();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..k {
        let c = counters[j];
        if c < 1e-12 {
            continue;
        }
        let r = if !disturbance || total <= 0.0 {
            1.0
        } else {
            (c / (total / k as f64) * s).min(1.0)
        };
        let mut dist = 0.0;
        for i in 0..dim {
            let e = w[j * dim + i] / c;
            dist += (e - v[i]) * (e - v[i]);
        }
        let score = dist * r;
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j)
}

/// Scalar replay of the EMA updates, one cluster coordinate at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaReplay {
    pub alpha: f64,
    pub beta: f64,
    pub eta: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl EmaReplay {
    pub fn new(params: &CodebookParams) -> Self {
        Self {
            alpha: params.alpha,
            beta: params.beta,
            eta: params.eta.clone(),
            w: vec![vec![0.0; params.dim]; params.k],
            c: vec![0.0; params.k],
        }
    }

    pub fn update(&mut self, k: usize, v: &[f64], delta: f64, rewards: Option<&[f64]>) {
        let mut g = delta.powf(self.beta);
        if let Some(h) = rewards {
            for (p, eta) in self.eta.iter().enumerate() {
                g *= (1.0 + h[p]).powf(*eta);
            }
        }
        for (i, x) in v.iter().enumerate() {
            self.w[k][i] = self.alpha * self.w[k][i] + (1.0 - self.alpha) * g * x;
        }
        self.c[k] = self.alpha * self.c[k] + (1.0 - self.alpha) * g;
    }

    /// Largest relative deviation from `cb` over every `w` and `c` entry.
    pub fn max_rel_error(&self, cb: &Codebook) -> f64 {
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        for k in 0..self.c.len() {
            worst = worst.max(rel(self.c[k], cb.counter(k)));
            for (a, b) in self.w[k].iter().zip(cb.preliminary(k)) {
                if *a != *b {
                    worst = worst.max(rel(*a, *b));
                }
            }
        }
        worst
    }
}

/// Full sort by `(score desc, id asc)`, truncated to `n`.
pub fn global_sort(mut scored: Vec<(u64, f64)>, n: usize) -> Vec<(u64, f64)> {
    scored.sort_by(|a, b| rank_order((a.1, a.0), (b.1, b.0)));
    scored.truncate(n);
    scored
}

/// Every snapshot item scored with its quantized embedding,
/// `u . e_k + bias`, sorted and truncated to `n`.
pub fn quantized_topk(u: &[f64], snap: &PostingListSnapshot, n: usize) -> Vec<(u64, f64)> {
    let mut scored = Vec::with_capacity(snap.len());
    for k in 0..snap.k() {
        let Ok(e) = snap.codebook.cluster_embedding(k) else {
            continue;
        };
        let dot: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
        for (id, b) in snap.cluster_items(k).iter().zip(snap.cluster_biases(k)) {
            scored.push((*id, dot + b));
        }
    }
    global_sort(scored, n)
}

/// Clusters by `u . e_k` descending, index ascending, skipping clusters
/// that are uninitialized or hold no items.
pub fn cluster_order(u: &[f64], snap: &PostingListSnapshot) -> Vec<usize> {
    let mut scored: Vec<(u64, f64)> = (0..snap.k())
        .filter(|&k| !snap.segment(k).is_empty())
        .filter_map(|k| {
            let e = snap.codebook.cluster_embedding(k).ok()?;
            Some((k as u64, u.iter().zip(e).map(|(a, b)| a * b).sum()))
        })
        .collect();
    scored.sort_by(|a, b| rank_order((a.1, a.0), (b.1, b.0)));
    scored.into_iter().map(|(k, _)| k as usize).collect()
}

/// Posting lists rebuilt by hash grouping: `(items, segs, biases)`.
pub fn group_and_sort(records: &[ItemRecord], k: usize) -> (Vec<u64>, Vec<u64>, Vec<f64>) {
    let mut groups: HashMap<usize, Vec<(u64, f64)>> = HashMap::new();
    for r in records {
        if let Some(c) = r.cluster_id {
            groups.entry(c).or_default().push((r.item_id, r.v_bias));
        }
    }
    let (mut items, mut segs, mut biases) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        let mut g = groups.remove(&c).unwrap_or_default();
        g.sort_by(|a, b| rank_order((a.1, a.0), (b.1, b.0)));
        for (id, b) in g {
            items.push(id);
            biases.push(b);
        }
        segs.push(items.len() as u64);
    }
    (items, segs, biases)
}

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    Aux,
    /// The index loss through its straight-through surrogate: the quantized
    /// vector is `e + (v - v0)` with `e` and `v0` frozen.
    Ind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// The codebook was bitwise unchanged by computing and applying the
    /// gradients.
    pub codebook_untouched: bool,
}

/// Relative error with a `1e-4` floor on the scale. Some gradients are
/// exactly zero (an item-side bias shifts every logit of a row equally), and
/// finite differences on them return rounding noise near `1e-9`.
fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central finite differences (step `1e-5`) against the trainer's analytic
/// gradients on a small warmed-up model.
pub fn gradient_check(seed: u64, loss: CheckedLoss, logq: bool, affine: bool, params: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let tasks = vec!["finish".to_string(), "stay".to_string()];
    let cb = Codebook::new(CodebookParams {
        k: 3,
        dim,
        eta: vec![1.0, 0.5],
        ..Default::default()
    })
    .expect("valid params");
    let mut engine = AssignmentEngine::new(
        cb,
        EngineConfig {
            tasks: tasks.clone(),
            ..Default::default()
        },
    );
    let mut trainer = Trainer::new(
        dim,
        TrainerConfig {
            tasks,
            affine,
            logq,
            init_scale: 0.5,
            seed,
            ..Default::default()
        },
    );
    let mut ts = 0;
    let mut make_batch = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Event> {
        (0..n)
            .map(|_| {
                ts += rng.random_range(1..4);
                let mut r = std::collections::BTreeMap::new();
                r.insert("finish".to_string(), rng.random_range(0..2) as f64);
                r.insert("stay".to_string(), rng.random_range(0.0..3.0));
                Event::impression(rng.random_range(0..20), rng.random_range(0..40), ts, r)
            })
            .collect()
    };
    for _ in 0..4 {
        let evs = make_batch(&mut rng, 24);
        let b = Batch::assemble(evs, &engine);
        trainer.train_step(&b, &mut engine).expect("warm-up step");
    }
    trainer.set_loss_weights(match loss {
        CheckedLoss::Aux => LossWeights {
            aux: 1.0,
            ind: 0.0,
            sim: 0.0,
        },
        CheckedLoss::Ind => LossWeights {
            aux: 0.0,
            ind: 1.0,
            sim: 0.0,
        },
    });
    let batch = Batch::assemble(make_batch(&mut rng, 24), &engine);
    let prep = trainer.prepare(&batch, &engine).expect("prepare");
    assert!(
        prep.pending_seeds.is_empty(),
        "warm-up must initialize every routed slot"
    );
    let codebook = engine.codebook().clone();
    let (_, grads) = trainer.objective(&prep, &codebook).expect("objective");

    let anchors: Vec<Vec<f64>> = prep
        .rows
        .iter()
        .map(|r| trainer.model().item_vector(r.item_row))
        .collect();
    let value = |t: &Trainer| -> f64 {
        let m = t.model();
        let b = prep.rows.len();
        let mut items = Vec::with_capacity(b * dim);
        let mut bias = Vec::with_capacity(b);
        for (o, r) in prep.rows.iter().enumerate() {
            let v = m.item_vector(r.item_row);
            match loss {
                CheckedLoss::Aux => items.extend(v),
                CheckedLoss::Ind => {
                    let e = codebook
                        .cluster_embedding(r.route.quantization.cluster_id)
                        .expect("initialized");
                    items.extend(e.iter().zip(&v).zip(&anchors[o]).map(|((e, v), v0)| e + (v - v0)));
                }
            }
            bias.push(m.item_bias(r.item_row));
        }
        let deltas: Vec<f64> = prep.rows.iter().map(|r| r.delta).collect();
        let offsets = logq.then(|| logq_offsets(&deltas));
        let mut total = 0.0;
        for task in 0..m.tasks().len() {
            let users: Vec<f64> = prep
                .rows
                .iter()
                .flat_map(|r| m.user_vector(task, r.user_rows[task]))
                .collect();
            let weights: Vec<f64> = prep.rows.iter().map(|r| r.weights[task]).collect();
            total += in_batch_softmax(SoftmaxBatch {
                dim,
                users: &users,
                items: &items,
                bias: &bias,
                weights: Some(&weights),
                offsets: offsets.as_deref(),
            })
            .loss;
        }
        total
    };

    let mut candidates: Vec<ParamRef> = Vec::new();
    for r in &prep.rows {
        for col in 0..dim {
            candidates.push(ParamRef::Item { row: r.item_row, col });
            for task in 0..2 {
                candidates.push(ParamRef::User {
                    task,
                    row: r.user_rows[task],
                    col,
                });
            }
        }
        candidates.push(ParamRef::ItemBias { row: r.item_row });
    }
    if affine {
        for index in 0..dim * dim {
            candidates.push(ParamRef::ItemAffineWeight { index });
            candidates.push(ParamRef::UserAffineWeight { task: 0, index });
            candidates.push(ParamRef::UserAffineWeight { task: 1, index });
        }
        for index in 0..dim {
            candidates.push(ParamRef::ItemAffineBias { index });
            candidates.push(ParamRef::UserAffineBias { task: 1, index });
        }
    }
    candidates.sort_by_key(|p| format!("{p:?}"));
    candidates.dedup();
    let picks = sample(&mut rng, candidates.len(), params.min(candidates.len()));

    let h = 1e-5;
    let mut probe = trainer.clone();
    let mut worst: f64 = 0.0;
    for i in picks.iter() {
        let p = candidates[i];
        let x0 = probe.model().param(p);
        *probe.model_mut().param_mut(p) = x0 + h;
        let up = value(&probe);
        *probe.model_mut().param_mut(p) = x0 - h;
        let down = value(&probe);
        *probe.model_mut().param_mut(p) = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(grads.get(p), numeric));
    }

    trainer.apply(&grads);
    GradCheck {
        checked: picks.len(),
        max_rel_error: worst,
        codebook_untouched: engine.codebook() == &codebook,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_matches_quantize_on_small_codebooks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let params = CodebookParams {
                k: 8,
                dim: 4,
                ..Default::default()
            };
            let c: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
            let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cb = Codebook::from_state(params, c.clone(), w.clone()).unwrap();
            for _ in 0..100 {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                assert_eq!(
                    Some(cb.quantize(&v).unwrap().cluster_id),
                    scan_quantize(&c, &w, 5.0, true, &v)
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (loss, logq, affine) in [
            (CheckedLoss::Aux, false, false),
            (CheckedLoss::Ind, true, false),
            (CheckedLoss::Aux, true, true),
            (CheckedLoss::Ind, false, true),
        ] {
            let g = gradient_check(11, loss, logq, affine, 60);
            assert!(g.checked >= 60);
            assert!(
                g.max_rel_error < 1e-4,
                "{loss:?} {logq} {affine}: {}",
                g.max_rel_error
            );
            assert!(g.codebook_untouched);
        }
    }
}
