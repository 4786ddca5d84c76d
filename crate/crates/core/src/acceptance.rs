//! The ten acceptance checks, runnable from tests and from `eval`.
//!
//! Checks 1 to 5, 8 and 9 compare fast paths against the oracles. Checks 6,
//! 7 and 10 train full synthetic workloads and compare configurations by
//! their median over seeds.

use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, CodebookParams};
use crate::engine::{AssignmentEngine, EngineConfig, EngineStats, ItemRecord};
use crate::oracle::{
    cluster_order, global_sort, gradient_check, group_and_sort, quantized_topk, scan_quantize, CheckedLoss,
    EmaReplay,
};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::serving::{merge_sort_retrieve, score_clusters, serve_query, Query};
use crate::simulator::{
    generate_corpus, generate_events, max_share, median, normalized_entropy, recovery_lag, CorpusConfig,
    Drift, StreamConfig,
};
use crate::snapshot::PostingListSnapshot;
use crate::study::{run_study, StudyConfig, StudyOutcome};
use crate::trainer::LossWeights;

pub const NAMES: [&str; 10] = [
    "quantization exactness",
    "EMA replay",
    "gradient correctness",
    "merge-sort exactness at l=1",
    "end-to-end oracle equivalence",
    "balance ordering",
    "immediacy and reparability ordering",
    "snapshot integrity",
    "candidate-stream purity",
    "recall sanity",
];

const BUDGETS: [Option<u64>; 10] = [
    Some(10),
    Some(30),
    Some(60),
    Some(30),
    None,
    Some(15 * 60),
    Some(20 * 60),
    None,
    None,
    None,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        NAMES[self.id - 1]
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let budget = self
            .budget
            .map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        write!(
            f,
            "criterion {:>2} {:<38} {}  [{:.1}s{}]  {}",
            self.id,
            self.name(),
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            budget,
            self.detail
        )
    }
}

/// Workloads for the training-based checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub seeds: Vec<u64>,
    /// Default workload, run with `beta = 0.5` and the disturbance on.
    pub balance: StudyConfig,
    /// Drift workload, run with the candidate stream at its configured
    /// ratio.
    pub drift: StudyConfig,
    /// Impressions after the drift at which the two losses are compared.
    pub drift_horizon: u64,
    /// Share of the pre-drift recall that counts as recovered.
    pub recovery_level: f64,
}

impl Default for Plan {
    fn default() -> Self {
        let balance = StudyConfig::default();

        let mut drift = StudyConfig::default();
        drift.corpus = CorpusConfig {
            items: 5_000,
            users: 200,
            groups: 20,
            drift: Some(Drift {
                at: 1_500_000,
                fraction: 0.5,
                displacement: 2.0,
            }),
            ..Default::default()
        };
        drift.stream.impressions = 2_500_000;
        drift.pipeline.codebook.k = 64;
        drift.probe = 16;
        drift.eval_every = 10_000;

        Self {
            seeds: vec![1, 2, 3, 4, 5],
            balance,
            drift,
            drift_horizon: 500_000,
            recovery_level: 0.95,
        }
    }
}

impl Plan {
    /// A scaled-down plan that exercises the same code in seconds.
    pub fn smoke() -> Self {
        let mut p = Self {
            seeds: vec![1, 2, 3],
            ..Self::default()
        };
        p.balance.corpus.items = 3_000;
        p.balance.corpus.users = 100;
        p.balance.corpus.groups = 10;
        p.balance.stream.impressions = 60_000;
        p.balance.pipeline.codebook.k = 32;
        p.balance.probe = 8;
        p.balance.eval_users = 20;
        let d = p.drift.corpus.drift.as_mut().expect("drift workload");
        d.at = 60_000;
        p.drift.corpus.items = 1_000;
        p.drift.corpus.users = 60;
        p.drift.corpus.groups = 8;
        p.drift.stream.impressions = 120_000;
        p.drift.pipeline.codebook.k = 16;
        p.drift.probe = 4;
        p.drift.eval_every = 10_000;
        p.drift.eval_users = 20;
        p.drift_horizon = 40_000;
        p
    }
}

/// Runs checks and remembers training runs shared between them.
#[derive(Debug, Default)]
pub struct Acceptance {
    pub plan: Plan,
    cache: HashMap<(String, u64), StudyOutcome>,
}

impl Acceptance {
    pub fn new(plan: Plan) -> Self {
        Self {
            plan,
            cache: HashMap::new(),
        }
    }

    pub fn run(&mut self, id: usize) -> Outcome {
        assert!((1..=10).contains(&id), "criteria are numbered 1 to 10");
        let start = Instant::now();
        let (passed, detail) = match id {
            1 => quantization_exactness(),
            2 => ema_replay(),
            3 => gradient_correctness(),
            4 => merge_sort_exactness(),
            5 => end_to_end_equivalence(),
            6 => self.balance_ordering(),
            7 => self.drift_ordering(),
            8 => snapshot_integrity(),
            9 => candidate_purity(),
            _ => self.recall_sanity(),
        };
        let elapsed = start.elapsed();
        let budget = BUDGETS[id - 1].map(Duration::from_secs);
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let detail = if in_time {
            detail
        } else {
            format!("{detail}; over the time budget")
        };
        Outcome {
            id,
            passed: passed && in_time,
            detail,
            elapsed,
            budget,
        }
    }

    pub fn run_all(&mut self) -> Vec<Outcome> {
        (1..=10).map(|i| self.run(i)).collect()
    }

    fn study(&mut self, cfg: &StudyConfig, seed: u64) -> StudyOutcome {
        let key = (serde_json::to_string(cfg).expect("config serializes"), seed);
        if let Some(o) = self.cache.get(&key) {
            return o.clone();
        }
        let o = run_study(cfg, seed).expect("workload config is valid");
        self.cache.insert(key, o.clone());
        o
    }

    fn studies(&mut self, cfg: &StudyConfig) -> Vec<StudyOutcome> {
        let seeds = self.plan.seeds.clone();
        seeds.iter().map(|&s| self.study(cfg, s)).collect()
    }

    fn balance_ordering(&mut self) -> (bool, String) {
        let on = self.plan.balance.clone();
        let mut off = on.clone();
        off.pipeline.codebook.beta = 0.0;
        off.pipeline.disturbance = false;
        let stats = |runs: &[StudyOutcome]| {
            let counts: Vec<Vec<f64>> = runs
                .iter()
                .map(|o| o.cluster_impressions.iter().map(|&c| c as f64).collect())
                .collect();
            (
                median(&counts.iter().map(|c| normalized_entropy(c)).collect::<Vec<_>>()),
                median(&counts.iter().map(|c| max_share(c)).collect::<Vec<_>>()),
            )
        };
        let (h_on, s_on) = stats(&self.studies(&on));
        let (h_off, s_off) = stats(&self.studies(&off));
        (
            h_on > h_off && s_on < s_off,
            format!(
                "impression entropy {h_on:.4} vs {h_off:.4}, max share {s_on:.4} vs {s_off:.4} (balanced vs plain)"
            ),
        )
    }

    fn drift_ordering(&mut self) -> (bool, String) {
        let on = self.plan.drift.clone();
        let drift_at = on.corpus.drift.expect("drift workload").at;
        let mut off = on.clone();
        off.stream.candidate_ratio = 0.0;
        let mut sim = on.clone();
        sim.pipeline.trainer.loss_weights = LossWeights {
            aux: 0.0,
            ind: 1.0,
            sim: 1.0,
        };
        let level = self.plan.recovery_level;
        let lag = |o: &StudyOutcome| {
            let curve: Vec<(u64, f64)> = o.curve.iter().map(|p| (p.impressions, p.truth)).collect();
            recovery_lag(&curve, drift_at, level).map_or(f64::INFINITY, |l| l as f64)
        };
        let horizon = drift_at + self.plan.drift_horizon;
        let at_horizon = |o: &StudyOutcome| {
            o.curve
                .iter()
                .find(|p| p.impressions >= horizon)
                .map_or(0.0, |p| p.truth)
        };
        let runs_on = self.studies(&on);
        let runs_off = self.studies(&off);
        let runs_sim = self.studies(&sim);
        let lag_on = median(&runs_on.iter().map(lag).collect::<Vec<_>>());
        let lag_off = median(&runs_off.iter().map(lag).collect::<Vec<_>>());
        let r_aux = median(&runs_on.iter().map(at_horizon).collect::<Vec<_>>());
        let r_sim = median(&runs_sim.iter().map(at_horizon).collect::<Vec<_>>());
        let a = lag_on < lag_off;
        let b = r_aux >= r_sim;
        (
            a && b,
            format!(
                "(a) {} recovery lag {lag_on} vs {lag_off} (candidates on vs off); (b) {} recall {r_aux:.4} vs {r_sim:.4} (aux+ind vs sim+ind)",
                if a { "pass" } else { "fail" },
                if b { "pass" } else { "fail" },
            ),
        )
    }

    fn recall_sanity(&mut self) -> (bool, String) {
        let ema = self.plan.balance.clone();
        let mut frozen = ema.clone();
        frozen.pipeline.engine.ema = false;
        let final_recall = |runs: &[StudyOutcome]| {
            median(
                &runs
                    .iter()
                    .map(|o| o.curve.last().map_or(0.0, |p| p.model))
                    .collect::<Vec<_>>(),
            )
        };
        let r_ema = final_recall(&self.studies(&ema));
        let r_frozen = final_recall(&self.studies(&frozen));
        (
            r_ema > r_frozen,
            format!(
                "recall@{} {r_ema:.4} vs {r_frozen:.4} (EMA vs frozen)",
                ema.target_size
            ),
        )
    }
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

fn quantization_exactness() -> (bool, String) {
    let mut cases = 0;
    let mut agree = 0;
    let mut books = 0;
    for (i, (k, dim)) in [(8, 4), (8, 16), (256, 4), (256, 16)]
        .iter()
        .cycle()
        .take(12)
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let params = CodebookParams {
            k: *k,
            dim: *dim,
            ..Default::default()
        };
        let counters: Vec<f64> = (0..*k)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => rng.random_range(0.0..0.05),
                _ => rng.random_range(0.1..5.0),
            })
            .collect();
        let w: Vec<f64> = counters
            .iter()
            .flat_map(|c| random_vec(&mut rng, *dim, 1.0).into_iter().map(move |x| x * c))
            .collect();
        let cb = Codebook::from_state(params, counters.clone(), w.clone()).expect("valid state");
        books += 1;
        for _ in 0..1000 {
            let v = random_vec(&mut rng, *dim, 1.5);
            cases += 1;
            let fast = cb.quantize(&v).ok().map(|q| q.cluster_id);
            if fast == scan_quantize(&counters, &w, cb.params().s, true, &v) {
                agree += 1;
            }
        }
    }
    (
        agree == cases,
        format!("{agree}/{cases} items over {books} codebooks agree with the exhaustive scan"),
    )
}

fn ema_replay() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = CodebookParams {
        k: 16,
        dim: 8,
        eta: vec![1.0, 0.5],
        ..Default::default()
    };
    let mut cb = Codebook::new(params.clone()).expect("valid params");
    let mut replay = EmaReplay::new(&params);
    let mut multi = 0;
    for _ in 0..100_000 {
        let k = rng.random_range(0..params.k);
        let v = random_vec(&mut rng, params.dim, 1.0);
        let delta = rng.random_range(1..2000) as f64;
        let rewards = rng.random_bool(0.5).then(|| {
            vec![
                rng.random_range(0..2) as f64,
                rng.random_range(0.0..6.0f64).ln_1p(),
            ]
        });
        multi += rewards.is_some() as usize;
        cb.ema_update(k, &v, delta, rewards.as_deref())
            .expect("valid update");
        replay.update(k, &v, delta, rewards.as_deref());
    }
    let err = replay.max_rel_error(&cb);
    (
        err <= 1e-9,
        format!("100000 updates ({multi} multi-task), max relative error {err:.3e}"),
    )
}

fn gradient_correctness() -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut checked = [0usize; 2];
    let mut untouched = true;
    for (li, loss) in [CheckedLoss::Aux, CheckedLoss::Ind].into_iter().enumerate() {
        for (seed, logq, affine) in [
            (1, false, false),
            (2, true, false),
            (3, false, true),
            (4, true, true),
        ] {
            let g = gradient_check(seed, loss, logq, affine, 120);
            worst = worst.max(g.max_rel_error);
            checked[li] += g.checked;
            untouched &= g.codebook_untouched;
        }
    }
    (
        worst < 1e-4 && checked.iter().all(|c| *c >= 100) && untouched,
        format!(
            "{} aux and {} index-loss parameters, max relative error {worst:.2e}, codebook untouched: {untouched}",
            checked[0], checked[1]
        ),
    )
}

/// Random snapshot with coarse biases so that ties occur.
fn random_snapshot(rng: &mut ChaCha8Rng) -> PostingListSnapshot {
    let k = rng.random_range(1..24);
    let dim = rng.random_range(2..6);
    let params = CodebookParams {
        k,
        dim,
        ..Default::default()
    };
    let counters: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { 1.0 })
        .collect();
    let w: Vec<f64> = (0..k * dim)
        .map(|_| rng.random_range(-4..=4) as f64 / 4.0)
        .collect();
    let cb = Codebook::from_state(params, counters, w).expect("valid state");
    let n = rng.random_range(0..300);
    let records: Vec<ItemRecord> = (0..n)
        .map(|i| ItemRecord {
            item_id: 1000 + i * 7 % 997,
            v_emb: random_vec(rng, dim, 1.0),
            v_bias: rng.random_range(-8..=8) as f64 / 8.0,
            cluster_id: Some(rng.random_range(0..k)),
            last_seen: Some(0),
        })
        .collect();
    let engine = AssignmentEngine::from_parts(
        EngineConfig::default(),
        cb,
        records,
        vec![0; k],
        EngineStats::default(),
        0,
    );
    engine.peek_snapshot()
}

fn merge_sort_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let instances = 200;
    let mut exact = 0;
    for _ in 0..instances {
        let snap = random_snapshot(&mut rng);
        let u: Vec<f64> = (0..snap.dim())
            .map(|_| rng.random_range(-4..=4) as f64 / 2.0)
            .collect();
        let probe = rng.random_range(1..=snap.k());
        let target = rng.random_range(1..400);
        let Ok(mut clusters) = score_clusters(&u, &snap) else {
            exact += 1;
            continue;
        };
        clusters.truncate(probe);
        let got: Vec<(u64, f64)> = merge_sort_retrieve(&clusters, &snap, target, 1)
            .hits
            .iter()
            .map(|h| (h.item, h.score))
            .collect();
        let mut order = cluster_order(&u, &snap);
        order.truncate(probe);
        let mut pool = Vec::new();
        for k in order {
            let e = snap.codebook.cluster_embedding(k).expect("initialized");
            let dot: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
            for (id, b) in snap.cluster_items(k).iter().zip(snap.cluster_biases(k)) {
                pool.push((*id, dot + b));
            }
        }
        exact += (got == global_sort(pool, target)) as usize;
    }
    (
        exact == instances,
        format!("{exact}/{instances} instances equal the global sort"),
    )
}

/// Trains a small pipeline and returns it.
fn small_pipeline(candidate_ratio: f64, impressions: u64, seed: u64) -> (Pipeline, Vec<PostingListSnapshot>) {
    let corpus = generate_corpus(
        &CorpusConfig {
            items: 4_000,
            users: 200,
            groups: 12,
            dim: 8,
            ..Default::default()
        },
        seed,
    )
    .expect("valid corpus");
    let mut cfg = PipelineConfig::default();
    cfg.codebook.k = 48;
    cfg.codebook.dim = 8;
    cfg.snapshot_cadence = 20_000;
    let mut p = Pipeline::new(cfg).expect("valid config");
    let sc = StreamConfig {
        impressions,
        candidate_ratio,
        ..Default::default()
    };
    let mut snaps = vec![p.snapshot()];
    for ev in generate_events(&corpus, &sc, seed) {
        if p.feed(ev).expect("valid stream").is_some() && p.at_snapshot_boundary() {
            snaps.push(p.snapshot());
        }
    }
    p.flush().expect("flush");
    snaps.push(p.snapshot());
    (p, snaps)
}

fn end_to_end_equivalence() -> (bool, String) {
    let (p, _) = small_pipeline(0.25, 60_000, 3);
    let snap = p.engine().peek_snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    let queries = 20;
    for i in 0..queries {
        let u = if i % 2 == 0 {
            p.trainer()
                .model()
                .user_vector_by_id(0, rng.random_range(0..200))
                .unwrap_or_else(|| random_vec(&mut rng, snap.dim(), 1.0))
        } else {
            random_vec(&mut rng, snap.dim(), 1.0)
        };
        let mut q = Query::new(u.clone());
        q.probe = snap.k();
        q.chunk = 1;
        q.target_size = 100;
        let got: Vec<(u64, f64)> = serve_query(&q, &snap)
            .expect("snapshot has clusters")
            .hits
            .iter()
            .map(|h| (h.item, h.score))
            .collect();
        exact += (got == quantized_topk(&u, &snap, 100)) as usize;
    }
    (
        exact == queries,
        format!(
            "{exact}/{queries} queries equal the quantized brute force over {} items",
            snap.len()
        ),
    )
}

fn snapshot_integrity() -> (bool, String) {
    let (p, snaps) = small_pipeline(0.25, 150_000, 8);
    let mut failures = Vec::new();
    for s in &snaps {
        if let Err(e) = s.check_integrity() {
            failures.push(format!("v{}: {e}", s.version));
        }
        let bytes = s.encode();
        match PostingListSnapshot::decode(&bytes) {
            Ok(back) if back == *s && back.encode() == bytes => {}
            _ => failures.push(format!("v{}: round trip differs", s.version)),
        }
    }
    let last = snaps.last().expect("at least one snapshot");
    let (items, segs, biases) = group_and_sort(p.engine().records(), last.k());
    if (items, segs, biases) != (last.items.clone(), last.segs.clone(), last.biases.clone()) {
        failures.push("final snapshot differs from the group-and-sort oracle".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = 256;
    let cb = Codebook::from_state(
        CodebookParams::default(),
        (0..k).map(|_| rng.random_range(0.5..2.0)).collect(),
        random_vec(&mut rng, k * 16, 1.0),
    )
    .expect("valid state");
    let records: Vec<ItemRecord> = (0..100_000u64)
        .map(|i| ItemRecord {
            item_id: i.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            v_emb: random_vec(&mut rng, 16, 1.0),
            v_bias: rng.random_range(-1.0..1.0),
            cluster_id: Some(rng.random_range(0..k)),
            last_seen: None,
        })
        .collect();
    let big = AssignmentEngine::from_parts(
        EngineConfig::default(),
        cb,
        records,
        vec![0; k],
        EngineStats::default(),
        9,
    )
    .peek_snapshot();
    let bytes = big.encode();
    let resaved = PostingListSnapshot::decode(&bytes).map(|s| s.encode());
    if resaved.as_ref() != Ok(&bytes) || big.check_integrity().is_err() {
        failures.push("100k-item snapshot does not re-save byte-identically".into());
    }
    (
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} dumped snapshots and a 100k-item snapshot pass", snaps.len())
        } else {
            failures.join("; ")
        },
    )
}

/// `(w, c)` of every cluster and `(v_emb, v_bias)` of every item, by id.
fn learned_state(p: &Pipeline) -> Vec<u64> {
    let cb = p.engine().codebook();
    let mut out: Vec<u64> = cb.preliminary_flat().iter().map(|x| x.to_bits()).collect();
    out.extend(cb.counters().iter().map(|x| x.to_bits()));
    let mut recs: Vec<&ItemRecord> = p.engine().records().iter().collect();
    recs.sort_by_key(|r| r.item_id);
    for r in recs {
        out.push(r.item_id);
        out.extend(r.v_emb.iter().map(|x| x.to_bits()));
        out.push(r.v_bias.to_bits());
    }
    out
}

fn candidate_purity() -> (bool, String) {
    let corpus = generate_corpus(
        &CorpusConfig {
            items: 600,
            users: 60,
            groups: 6,
            dim: 6,
            ..Default::default()
        },
        21,
    )
    .expect("valid corpus");
    let trajectory = |ratio: f64| -> (Vec<Vec<u64>>, u64) {
        let mut cfg = PipelineConfig::default();
        cfg.codebook.k = 24;
        cfg.codebook.dim = 6;
        cfg.trainer.batch_size = 64;
        let mut p = Pipeline::new(cfg).expect("valid config");
        let sc = StreamConfig {
            impressions: 20_000,
            candidate_ratio: ratio,
            ..Default::default()
        };
        let mut states = Vec::new();
        for ev in generate_events(&corpus, &sc, 21) {
            if p.feed(ev).expect("valid stream").is_some() {
                states.push(learned_state(&p));
            }
        }
        (states, p.engine().stats().reassignments)
    };
    let (plain, _) = trajectory(0.0);
    let (mixed, moved) = trajectory(1.0);
    let same = plain == mixed;
    (
        same && moved > 0,
        format!(
            "{} batch states compared, identical: {same}; candidate pass moved {moved} assignments",
            plain.len()
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_checks_pass() {
        let mut a = Acceptance::default();
        for id in [1, 2, 4, 5, 8, 9] {
            let o = a.run(id);
            assert!(o.passed, "{o}");
        }
    }

    #[test]
    fn smoke_plan_runs_every_training_check() {
        let mut a = Acceptance::new(Plan::smoke());
        for id in [6, 7, 10] {
            let o = a.run(id);
            assert!(o.detail.contains(" vs "), "{o}");
        }
    }
}
