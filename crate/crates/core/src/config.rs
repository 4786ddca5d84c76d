//! Run configuration: one JSON document covering every stage.
//!
//! ```json
//! {
//!   "seed": 1,
//!   "out": "runs/demo",
//!   "snapshot_cadence": 50000,
//!   "corpus": { "items": 100000, "users": 1000, "groups": 50, "dim": 16 },
//!   "stream": { "impressions": 1000000, "candidate_ratio": 0.25 },
//!   "train": { "dim": 16, "K": 256, "alpha": 0.99, "beta": 0.5, "s": 5.0,
//!              "eta": [], "lr": 0.05, "batch_size": 256,
//!              "loss_weights": { "aux": 1.0, "ind": 1.0, "sim": 0.0 },
//!              "logq": false, "seed": null },
//!   "serve": { "probe": 64, "target_size": 100, "chunk": 8 },
//!   "eval": { "users": 50 }
//! }
//! ```
//!
//! Every section and key is optional; unknown keys are rejected. Production
//! scale would be `"K": 16384` (32768 with multiple tasks) and a corpus in
//! the hundreds of millions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::CodebookParams;
use crate::engine::{EmaClock, EngineConfig};
use crate::pipeline::PipelineConfig;
use crate::simulator::{CorpusConfig, StreamConfig};
use crate::trainer::{LossWeights, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub s: f64,
    /// Reward exponents, one per task; empty for a single-task codebook.
    pub eta: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub logq: bool,
    /// Model seed; derived from the run seed when absent.
    pub seed: Option<u64>,
    pub disturbance: bool,
    pub tasks: Vec<String>,
    /// EMA updates of the codebook; off freezes clusters once seeded.
    pub ema: bool,
    pub ema_clock: EmaClock,
    pub first_occurrence_cap: f64,
    pub init_scale: f64,
    pub affine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let cb = CodebookParams::default();
        let tr = TrainerConfig::default();
        let en = EngineConfig::default();
        Self {
            dim: cb.dim,
            k: cb.k,
            alpha: cb.alpha,
            beta: cb.beta,
            s: cb.s,
            eta: cb.eta,
            lr: tr.lr,
            batch_size: tr.batch_size,
            loss_weights: tr.loss_weights,
            logq: tr.logq,
            seed: None,
            disturbance: true,
            tasks: tr.tasks,
            ema: en.ema,
            ema_clock: en.clock,
            first_occurrence_cap: en.first_occurrence_cap,
            init_scale: tr.init_scale,
            affine: tr.affine,
        }
    }
}

impl TrainConfig {
    pub fn pipeline(&self, run_seed: u64, snapshot_cadence: u64) -> PipelineConfig {
        PipelineConfig {
            codebook: CodebookParams {
                k: self.k,
                dim: self.dim,
                alpha: self.alpha,
                beta: self.beta,
                s: self.s,
                eta: self.eta.clone(),
            },
            disturbance: self.disturbance,
            engine: EngineConfig {
                first_occurrence_cap: self.first_occurrence_cap,
                ema: self.ema,
                clock: self.ema_clock,
                tasks: self.tasks.clone(),
            },
            trainer: TrainerConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                loss_weights: self.loss_weights,
                logq: self.logq,
                tasks: self.tasks.clone(),
                init_scale: self.init_scale,
                affine: self.affine,
                seed: self.seed.unwrap_or(run_seed),
            },
            snapshot_cadence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub probe: usize,
    pub target_size: usize,
    pub chunk: usize,
    /// Re-rank with unquantized embeddings and keep this many.
    pub rescore: Option<usize>,
    /// `host:port` to listen on; standard input when absent.
    pub listen: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            probe: 64,
            target_size: 100,
            chunk: 8,
            rescore: None,
            listen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Users whose served lists are compared with brute force.
    pub users: usize,
    /// Lower edges of the cluster-size histogram buckets.
    pub size_buckets: Vec<usize>,
    /// Acceptance criteria to run, numbered 1 to 10.
    pub criteria: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            users: 50,
            size_buckets: vec![0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000],
            criteria: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Event file for `train`; `<out>/events.jsonl` when absent.
    pub events: Option<PathBuf>,
    /// Impressions between snapshots.
    pub snapshot_cadence: u64,
    pub corpus: CorpusConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            events: None,
            snapshot_cadence: 50_000,
            corpus: CorpusConfig::default(),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            serve: ServeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        self.train.pipeline(self.seed, self.snapshot_cadence)
    }

    pub fn events_path(&self) -> PathBuf {
        self.events
            .clone()
            .unwrap_or_else(|| self.out.join("events.jsonl"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.corpus
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline()
            .codebook
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.dim != self.corpus.dim {
            return bad(format!(
                "train.dim {} differs from corpus.dim {}",
                t.dim, self.corpus.dim
            ));
        }
        if t.tasks.is_empty() {
            return bad("at least one task is needed".into());
        }
        if !t.eta.is_empty() && t.eta.len() != t.tasks.len() {
            return bad(format!("{} eta values for {} tasks", t.eta.len(), t.tasks.len()));
        }
        if t.batch_size == 0 || !(t.lr > 0.0) {
            return bad("batch_size and lr must be positive".into());
        }
        if !(t.first_occurrence_cap >= 1.0) {
            return bad("first_occurrence_cap must be at least 1".into());
        }
        if !(self.stream.candidate_ratio >= 0.0) {
            return bad("candidate_ratio must be non-negative".into());
        }
        let s = &self.serve;
        if s.probe == 0 || s.chunk == 0 || s.target_size == 0 {
            return bad("probe, chunk and target_size must be positive".into());
        }
        if let Some(c) = self.eval.criteria.iter().find(|c| !(1..=10).contains(*c)) {
            return bad(format!("no acceptance criterion {c}"));
        }
        Ok(())
    }
}
