//! Event driver: batches impressions for the trainer, applies candidate
//! events straight to the engine, and marks snapshot boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError, CodebookParams};
use crate::engine::{AssignmentEngine, EngineConfig};
use crate::event::{Event, EventError};
use crate::snapshot::PostingListSnapshot;
use crate::trainer::{Batch, StepMetrics, TrainError, Trainer, TrainerConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("event at ts {ts} arrived after ts {last}")]
    OutOfOrder { ts: u64, last: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub codebook: CodebookParams,
    pub disturbance: bool,
    pub engine: EngineConfig,
    pub trainer: TrainerConfig,
    /// Impressions between snapshots; 0 disables them.
    pub snapshot_cadence: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            codebook: CodebookParams::default(),
            disturbance: true,
            engine: EngineConfig::default(),
            trainer: TrainerConfig::default(),
            snapshot_cadence: 50_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub(crate) config: PipelineConfig,
    pub(crate) trainer: Trainer,
    pub(crate) engine: AssignmentEngine,
    pub(crate) buffer: Vec<Event>,
    pub(crate) events_seen: u64,
    pub(crate) impressions: u64,
    pub(crate) last_ts: u64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let codebook = Codebook::new(config.codebook.clone())?.with_disturbance(config.disturbance);
        let mut engine_cfg = config.engine.clone();
        engine_cfg.tasks = config.trainer.tasks.clone();
        let engine = AssignmentEngine::new(codebook, engine_cfg);
        let trainer = Trainer::new(config.codebook.dim, config.trainer.clone());
        Ok(Self {
            config,
            trainer,
            engine,
            buffer: Vec::new(),
            events_seen: 0,
            impressions: 0,
            last_ts: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn engine(&self) -> &AssignmentEngine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut AssignmentEngine {
        &mut self.engine
    }

    /// Events consumed so far, candidates included.
    pub fn events_seen(&self) -> u64 {
        self.events_seen
    }

    /// Impressions trained on so far.
    pub fn impressions(&self) -> u64 {
        self.impressions
    }

    fn boundary_due(&self) -> bool {
        let c = self.config.snapshot_cadence;
        c > 0 && (self.impressions + self.buffer.len() as u64).is_multiple_of(c)
    }

    /// Consumes one event. Returns the step metrics when it completed a
    /// batch.
    pub fn feed(&mut self, event: Event) -> Result<Option<StepMetrics>, PipelineError> {
        event.validate()?;
        if event.ts < self.last_ts {
            return Err(PipelineError::OutOfOrder {
                ts: event.ts,
                last: self.last_ts,
            });
        }
        self.last_ts = event.ts;
        self.events_seen += 1;
        if !event.is_impression() {
            self.engine.process_candidate(&event);
            return Ok(None);
        }
        self.buffer.push(event);
        if self.buffer.len() >= self.config.trainer.batch_size.max(1) || self.boundary_due() {
            return self.flush();
        }
        Ok(None)
    }

    /// Trains on whatever impressions are buffered.
    pub fn flush(&mut self) -> Result<Option<StepMetrics>, PipelineError> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let batch = Batch::assemble(std::mem::take(&mut self.buffer), &self.engine);
        let m = self.trainer.train_step(&batch, &mut self.engine)?;
        self.impressions += batch.len() as u64;
        Ok(Some(m))
    }

    /// True right after a batch that completed a snapshot interval.
    pub fn at_snapshot_boundary(&self) -> bool {
        let c = self.config.snapshot_cadence;
        self.buffer.is_empty() && c > 0 && self.impressions > 0 && self.impressions.is_multiple_of(c)
    }

    pub fn snapshot(&mut self) -> PostingListSnapshot {
        self.engine.dump_snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_corpus, generate_events, CorpusConfig, StreamConfig};

    fn config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.codebook.k = 8;
        c.codebook.dim = 4;
        c.trainer.batch_size = 16;
        c.snapshot_cadence = 50;
        c
    }

    #[test]
    fn batches_split_at_snapshot_boundaries() {
        let corpus = generate_corpus(
            &CorpusConfig {
                items: 200,
                users: 20,
                groups: 4,
                dim: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let sc = StreamConfig {
            impressions: 120,
            ..Default::default()
        };
        let mut p = Pipeline::new(config()).unwrap();
        let mut boundaries = Vec::new();
        let mut sizes = Vec::new();
        for ev in generate_events(&corpus, &sc, 1) {
            if let Some(m) = p.feed(ev).unwrap() {
                sizes.push(m.rows);
                if p.at_snapshot_boundary() {
                    boundaries.push(p.impressions());
                }
            }
        }
        p.flush().unwrap();
        assert_eq!(boundaries, vec![50, 100]);
        assert_eq!(sizes[..4], [16, 16, 16, 2]);
        assert_eq!(p.impressions(), 120);
        assert_eq!(p.events_seen(), 150);
    }

    #[test]
    fn rejects_out_of_order_events() {
        let mut p = Pipeline::new(config()).unwrap();
        p.feed(Event::candidate(1, 5)).unwrap();
        assert!(matches!(
            p.feed(Event::candidate(1, 4)),
            Err(PipelineError::OutOfOrder { .. })
        ));
    }
}
