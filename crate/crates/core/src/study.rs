//! End-to-end runs over synthetic workloads, measuring index balance and
//! retrieval recall while the stream is consumed.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};
use crate::serving::{serve_query, Query};
use crate::simulator::{
    brute_force_topk, generate_corpus, generate_events, recall, CorpusConfig, SimError, StreamConfig,
    SyntheticCorpus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub corpus: CorpusConfig,
    pub stream: StreamConfig,
    pub pipeline: PipelineConfig,
    /// Users sampled for recall measurements; 0 disables them.
    pub eval_users: usize,
    /// Impressions between recall measurements; 0 measures only at the end.
    pub eval_every: u64,
    pub probe: usize,
    pub target_size: usize,
    pub chunk: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            stream: StreamConfig::default(),
            pipeline: PipelineConfig::default(),
            eval_users: 50,
            eval_every: 0,
            probe: 64,
            target_size: 100,
            chunk: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallPoint {
    pub impressions: u64,
    /// Served items against the model's own exact top list.
    pub model: f64,
    /// Served items against the ground-truth top list.
    pub truth: f64,
    /// The model's exact top list against the ground truth.
    pub ceiling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub seed: u64,
    pub cluster_impressions: Vec<u64>,
    pub cluster_sizes: Vec<usize>,
    pub curve: Vec<RecallPoint>,
    pub reassignments: u64,
    pub elapsed: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Recall of the served lists for `users`, averaged.
pub fn measure_recall(
    pipeline: &Pipeline,
    corpus: &SyntheticCorpus,
    users: &[u64],
    cfg: &StudyConfig,
    ts: u64,
) -> Option<RecallPoint> {
    let snap = pipeline.engine().peek_snapshot();
    if snap.is_empty() {
        return None;
    }
    let model = pipeline.trainer().model();
    let recs = pipeline.engine().records();
    let truth_items: Vec<(u64, Vec<f64>)> = recs
        .iter()
        .map(|r| (r.item_id, corpus.item_vector(r.item_id, ts)))
        .collect();
    let (mut m_sum, mut t_sum, mut c_sum, mut n) = (0.0, 0.0, 0.0, 0);
    for &user in users {
        let Some(u) = model.user_vector_by_id(0, user) else {
            continue;
        };
        let mut q = Query::new(u.clone());
        q.probe = cfg.probe;
        q.target_size = cfg.target_size;
        q.chunk = cfg.chunk;
        let served = serve_query(&q, &snap).ok()?.items();
        let exact = brute_force_topk(
            &u,
            recs.iter().map(|r| (r.item_id, &r.v_emb[..], r.v_bias)),
            cfg.target_size,
        );
        let truth = brute_force_topk(
            corpus.user_vector(user),
            truth_items.iter().map(|(id, v)| (*id, &v[..], 0.0)),
            cfg.target_size,
        );
        let exact: Vec<u64> = exact.iter().map(|x| x.0).collect();
        let truth: Vec<u64> = truth.iter().map(|x| x.0).collect();
        m_sum += recall(&served, &exact);
        t_sum += recall(&served, &truth);
        c_sum += recall(&exact, &truth);
        n += 1;
    }
    (n > 0).then(|| RecallPoint {
        impressions: pipeline.impressions(),
        model: m_sum / n as f64,
        truth: t_sum / n as f64,
        ceiling: c_sum / n as f64,
    })
}

pub fn run_study(cfg: &StudyConfig, seed: u64) -> Result<StudyOutcome, StudyError> {
    let start = Instant::now();
    let corpus = generate_corpus(&cfg.corpus, seed)?;
    let mut pc = cfg.pipeline.clone();
    pc.trainer.seed = seed;
    pc.snapshot_cadence = cfg.eval_every;
    let mut pipeline = Pipeline::new(pc)?;
    let mut rng = crate::simulator::eval_rng(seed);
    let n_eval = cfg.eval_users.min(corpus.users());
    let users: Vec<u64> = sample(&mut rng, corpus.users(), n_eval)
        .into_iter()
        .map(|u| u as u64)
        .collect();

    let mut curve = Vec::new();
    let mut last_ts = 0;
    for ev in generate_events(&corpus, &cfg.stream, seed) {
        last_ts = ev.ts;
        if pipeline.feed(ev)?.is_some() && cfg.eval_every > 0 && pipeline.at_snapshot_boundary() {
            curve.extend(measure_recall(&pipeline, &corpus, &users, cfg, last_ts));
        }
    }
    pipeline.flush()?;
    if n_eval > 0
        && curve
            .last()
            .is_none_or(|p| p.impressions != pipeline.impressions())
    {
        curve.extend(measure_recall(&pipeline, &corpus, &users, cfg, last_ts));
    }
    let snap = pipeline.engine().peek_snapshot();
    Ok(StudyOutcome {
        seed,
        cluster_impressions: pipeline.engine().cluster_impressions().to_vec(),
        cluster_sizes: snap.cluster_sizes(),
        curve,
        reassignments: pipeline.engine().stats().reassignments,
        elapsed: start.elapsed(),
    })
}
