//! Two-tower trainer with in-batch softmax losses and straight-through
//! quantization.
//!
//! A step runs in four phases:
//!
//! 1. [`Trainer::prepare`] looks up embeddings and routes every row to a
//!    cluster against the current codebook;
//! 2. [`Trainer::objective`] evaluates the losses and their gradients;
//! 3. [`Trainer::apply`] takes an SGD step on the tower parameters;
//! 4. [`Trainer::commit`] writes each row into the assignment engine, which
//!    performs the EMA update of the chosen cluster.
//!
//! The codebook is never touched by phase 3: gradients that reach a cluster
//! embedding are handed to the item embedding unchanged.

pub mod loss;
pub mod tower;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError};
use crate::engine::{AssignmentEngine, EngineError, Route};
use crate::event::Event;
use loss::{in_batch_softmax, logq_offsets, similarity_loss, SoftmaxBatch};
pub use tower::{Affine, EmbeddingTable, ParamRef, TowerModel};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch row {0} is not an impression")]
    NotImpression(usize),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub aux: f64,
    pub ind: f64,
    /// Item-cluster similarity loss, kept for the drift ablation only.
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aux: 1.0,
            ind: 1.0,
            sim: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub logq: bool,
    pub tasks: Vec<String>,
    pub init_scale: f64,
    pub affine: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 256,
            loss_weights: LossWeights::default(),
            logq: false,
            tasks: vec!["finish".to_string()],
            init_scale: 0.05,
            affine: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub event: Event,
    /// Occurrence interval of this impression.
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
}

impl Batch {
    /// Builds a batch, deriving each row's interval from the engine's
    /// last-seen clock and from earlier rows of the same batch.
    pub fn assemble(events: Vec<Event>, engine: &AssignmentEngine) -> Self {
        let mut overlay: HashMap<u64, u64> = HashMap::new();
        let rows = events
            .into_iter()
            .map(|event| {
                let delta = match overlay.get(&event.item) {
                    Some(&prev) => (event.ts.saturating_sub(prev) as f64).max(1.0),
                    None => engine.interval_at(event.item, event.ts),
                };
                overlay.insert(event.item, event.ts);
                BatchRow { event, delta }
            })
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRow {
    pub item_row: usize,
    pub user_rows: Vec<usize>,
    pub route: Route,
    pub delta: f64,
    /// Loss weight per task (the task reward).
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub rows: Vec<PreparedRow>,
    /// Slots seeded by this batch with the embedding they will adopt.
    pub pending_seeds: Vec<(usize, Vec<f64>)>,
}

impl PreparedBatch {
    fn pending(&self, k: usize) -> Option<&[f64]> {
        self.pending_seeds
            .iter()
            .find(|(slot, _)| *slot == k)
            .map(|(_, v)| v.as_slice())
    }
}

/// Nearest slot among those being seeded by the current batch.
fn nearest_pending(pending: &[(usize, Vec<f64>)], v: &[f64]) -> Option<Route> {
    let mut best: Option<Route> = None;
    for (slot, e) in pending {
        let raw: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|b| raw < b.quantization.raw_distance) {
            best = Some(Route {
                quantization: crate::codebook::QuantizationResult {
                    cluster_id: *slot,
                    discounted_distance: raw,
                    raw_distance: raw,
                },
                seeds: false,
            });
        }
    }
    best
}

/// Sparse row gradients that remember first-touch order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    dim: usize,
    index: HashMap<usize, usize>,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            index: HashMap::new(),
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    fn slot(&mut self, row: usize) -> &mut [f64] {
        let d = self.dim;
        let i = *self.index.entry(row).or_insert_with(|| {
            self.rows.push(row);
            self.values.extend(std::iter::repeat_n(0.0, d));
            self.rows.len() - 1
        });
        &mut self.values[i * d..(i + 1) * d]
    }

    fn add(&mut self, row: usize, g: &[f64], scale: f64) {
        for (a, b) in self.slot(row).iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.index
            .get(&row)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Gradients of the training objective with respect to tower parameters.
/// There is deliberately no codebook component.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: Vec<SparseRows>,
    pub items: SparseRows,
    pub item_bias: SparseRows,
    pub user_affine: Option<Vec<Affine>>,
    pub item_affine: Option<Affine>,
}

impl Gradients {
    fn new(model: &TowerModel) -> Self {
        let d = model.dim;
        Self {
            users: (0..model.tasks.len()).map(|_| SparseRows::new(d)).collect(),
            items: SparseRows::new(d),
            item_bias: SparseRows::new(1),
            user_affine: model
                .user_affine
                .as_ref()
                .map(|a| vec![Affine::zeros(d); a.len()]),
            item_affine: model.item_affine.as_ref().map(|_| Affine::zeros(d)),
        }
    }

    pub fn get(&self, p: ParamRef) -> f64 {
        match p {
            ParamRef::User { task, row, col } => self.users[task].get(row).map_or(0.0, |g| g[col]),
            ParamRef::Item { row, col } => self.items.get(row).map_or(0.0, |g| g[col]),
            ParamRef::ItemBias { row } => self.item_bias.get(row).map_or(0.0, |g| g[0]),
            ParamRef::UserAffineWeight { task, index } => {
                self.user_affine.as_ref().map_or(0.0, |a| a[task].weight[index])
            }
            ParamRef::UserAffineBias { task, index } => {
                self.user_affine.as_ref().map_or(0.0, |a| a[task].bias[index])
            }
            ParamRef::ItemAffineWeight { index } => {
                self.item_affine.as_ref().map_or(0.0, |a| a.weight[index])
            }
            ParamRef::ItemAffineBias { index } => self.item_affine.as_ref().map_or(0.0, |a| a.bias[index]),
        }
    }

    pub fn user_norm(&self) -> f64 {
        let mut sq: f64 = self.users.iter().map(|u| u.norm().powi(2)).sum();
        if let Some(a) = &self.user_affine {
            for t in a {
                sq += t.weight.iter().chain(&t.bias).map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    pub fn item_norm(&self) -> f64 {
        let mut sq = self.items.norm().powi(2) + self.item_bias.norm().powi(2);
        if let Some(a) = &self.item_affine {
            sq += a.weight.iter().chain(&a.bias).map(|x| x * x).sum::<f64>();
        }
        sq.sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub aux: f64,
    pub ind: f64,
    pub sim: f64,
    /// Weighted sum that the gradients differentiate.
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub losses: LossValues,
    pub user_grad_norm: f64,
    pub item_grad_norm: f64,
    pub rows: usize,
    /// Rows with a positive reward on the first task.
    pub positives: usize,
    pub seeded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub(crate) config: TrainerConfig,
    pub(crate) model: TowerModel,
}

impl Trainer {
    pub fn new(dim: usize, config: TrainerConfig) -> Self {
        let model = TowerModel::new(
            dim,
            config.tasks.clone(),
            config.seed,
            config.init_scale,
            config.affine,
        );
        Self { config, model }
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &TowerModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TowerModel {
        &mut self.model
    }

    pub fn set_loss_weights(&mut self, w: LossWeights) {
        self.config.loss_weights = w;
    }

    pub fn set_logq(&mut self, on: bool) {
        self.config.logq = on;
    }

    /// Embedding lookups and cluster routing for every row.
    pub fn prepare(&mut self, batch: &Batch, engine: &AssignmentEngine) -> Result<PreparedBatch, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut reserved: Vec<usize> = Vec::new();
        let mut pending_seeds: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut seeded: HashMap<u64, Route> = HashMap::new();
        let mut rows = Vec::with_capacity(batch.len());
        for (i, row) in batch.rows.iter().enumerate() {
            let ev = &row.event;
            if !ev.is_impression() {
                return Err(TrainError::NotImpression(i));
            }
            let item_row = self.model.item_row(ev.item);
            let user_rows = (0..self.model.tasks.len())
                .map(|t| self.model.user_row(t, ev.user))
                .collect();
            let route = match seeded.get(&ev.item) {
                Some(r) => *r,
                None => {
                    let v = self.model.item_vector(item_row);
                    let r = match engine.route(ev.item, &v, &reserved) {
                        Err(CodebookError::EmptyCodebook) if !pending_seeds.is_empty() => {
                            nearest_pending(&pending_seeds, &v).expect("pending seeds exist")
                        }
                        other => other?,
                    };
                    if r.seeds {
                        reserved.push(r.quantization.cluster_id);
                        pending_seeds.push((r.quantization.cluster_id, v));
                        seeded.insert(ev.item, r);
                    }
                    r
                }
            };
            let weights = self.model.tasks.iter().map(|t| ev.reward(t)).collect();
            rows.push(PreparedRow {
                item_row,
                user_rows,
                route,
                delta: row.delta,
                weights,
            });
        }
        Ok(PreparedBatch { rows, pending_seeds })
    }

    /// Loss values and gradients for a prepared batch. Cluster embeddings
    /// are treated as constants; rows that seed an empty slot use their own
    /// embedding as the quantized value.
    pub fn objective(
        &self,
        prep: &PreparedBatch,
        codebook: &Codebook,
    ) -> Result<(LossValues, Gradients), TrainError> {
        let m = &self.model;
        let d = m.dim;
        let b = prep.rows.len();
        let lw = self.config.loss_weights;

        let mut raw_items = Vec::with_capacity(b * d);
        let mut items = Vec::with_capacity(b * d);
        let mut quantized = Vec::with_capacity(b * d);
        let mut bias = Vec::with_capacity(b);
        for r in &prep.rows {
            raw_items.extend_from_slice(m.items.row(r.item_row));
            let v = m.item_vector(r.item_row);
            let k = r.route.quantization.cluster_id;
            if r.route.seeds {
                quantized.extend_from_slice(&v);
            } else if let (false, Some(e)) = (codebook.is_initialized(k), prep.pending(k)) {
                quantized.extend_from_slice(e);
            } else {
                quantized.extend_from_slice(codebook.cluster_embedding(k)?);
            }
            items.extend(v);
            bias.push(m.item_bias[r.item_row]);
        }
        let offsets = self
            .config
            .logq
            .then(|| logq_offsets(&prep.rows.iter().map(|r| r.delta).collect::<Vec<_>>()));

        let mut values = LossValues::default();
        let mut d_items = vec![0.0; b * d];
        let mut d_bias = vec![0.0; b];
        let mut grads = Gradients::new(m);

        for task in 0..m.tasks.len() {
            let weights: Vec<f64> = prep.rows.iter().map(|r| r.weights[task]).collect();
            if weights.iter().all(|w| *w == 0.0) {
                continue;
            }
            let mut raw_users = Vec::with_capacity(b * d);
            let mut users = Vec::with_capacity(b * d);
            for r in &prep.rows {
                raw_users.extend_from_slice(m.users[task].row(r.user_rows[task]));
                users.extend(m.user_vector(task, r.user_rows[task]));
            }
            let mut d_users = vec![0.0; b * d];
            for (scale, side, is_aux) in [(lw.aux, &items, true), (lw.ind, &quantized, false)] {
                if scale == 0.0 {
                    continue;
                }
                let out = in_batch_softmax(SoftmaxBatch {
                    dim: d,
                    users: &users,
                    items: side,
                    bias: &bias,
                    weights: Some(&weights),
                    offsets: offsets.as_deref(),
                });
                if is_aux {
                    values.aux += out.loss;
                } else {
                    values.ind += out.loss;
                }
                values.total += scale * out.loss;
                axpy(&mut d_users, scale, &out.d_users);
                // straight-through: the quantized side's gradient lands on v
                axpy(&mut d_items, scale, &out.d_items);
                axpy(&mut d_bias, scale, &out.d_bias);
            }
            for (o, r) in prep.rows.iter().enumerate() {
                let g = &d_users[o * d..(o + 1) * d];
                let g_in = match (&m.user_affine, &mut grads.user_affine) {
                    (Some(a), Some(ga)) => a[task].backward(&raw_users[o * d..(o + 1) * d], g, &mut ga[task]),
                    _ => g.to_vec(),
                };
                grads.users[task].add(r.user_rows[task], &g_in, 1.0);
            }
        }

        if lw.sim != 0.0 {
            let (l, g) = similarity_loss(d, &items, &quantized);
            values.sim = l;
            values.total += lw.sim * l;
            axpy(&mut d_items, lw.sim, &g);
        }

        for (o, r) in prep.rows.iter().enumerate() {
            let g = &d_items[o * d..(o + 1) * d];
            let g_in = match (&m.item_affine, &mut grads.item_affine) {
                (Some(a), Some(ga)) => a.backward(&raw_items[o * d..(o + 1) * d], g, ga),
                _ => g.to_vec(),
            };
            grads.items.add(r.item_row, &g_in, 1.0);
            grads.item_bias.add(r.item_row, &[d_bias[o]], 1.0);
        }
        Ok((values, grads))
    }

    /// Plain SGD on the tower parameters.
    pub fn apply(&mut self, grads: &Gradients) {
        let lr = self.config.lr;
        let m = &mut self.model;
        for (task, g) in grads.users.iter().enumerate() {
            for &row in g.rows() {
                let gr = g.get(row).expect("row present");
                for (p, x) in m.users[task].row_mut(row).iter_mut().zip(gr) {
                    *p -= lr * x;
                }
            }
        }
        for &row in grads.items.rows() {
            let gr = grads.items.get(row).expect("row present");
            for (p, x) in m.items.row_mut(row).iter_mut().zip(gr) {
                *p -= lr * x;
            }
            m.item_bias[row] -= lr * grads.item_bias.get(row).expect("bias row")[0];
        }
        if let (Some(a), Some(ga)) = (&mut m.user_affine, &grads.user_affine) {
            for (t, gt) in a.iter_mut().zip(ga) {
                sgd(&mut t.weight, &gt.weight, lr);
                sgd(&mut t.bias, &gt.bias, lr);
            }
        }
        if let (Some(a), Some(ga)) = (&mut m.item_affine, &grads.item_affine) {
            sgd(&mut a.weight, &ga.weight, lr);
            sgd(&mut a.bias, &ga.bias, lr);
        }
    }

    /// Writes every row's assignment and current item state into the engine.
    pub fn commit(
        &self,
        batch: &Batch,
        prep: &PreparedBatch,
        engine: &mut AssignmentEngine,
    ) -> Result<(), TrainError> {
        engine.begin_batch();
        for (row, p) in batch.rows.iter().zip(&prep.rows) {
            debug_assert_eq!(engine.interval_at(row.event.item, row.event.ts), row.delta);
            let v = self.model.item_vector(p.item_row);
            let bias = self.model.item_bias[p.item_row];
            engine.process_impression(&row.event, &v, bias, p.route.quantization)?;
        }
        Ok(())
    }

    pub fn train_step(
        &mut self,
        batch: &Batch,
        engine: &mut AssignmentEngine,
    ) -> Result<StepMetrics, TrainError> {
        let prep = self.prepare(batch, engine)?;
        let (losses, grads) = self.objective(&prep, engine.codebook())?;
        self.apply(&grads);
        self.commit(batch, &prep, engine)?;
        Ok(StepMetrics {
            losses,
            user_grad_norm: grads.user_norm(),
            item_grad_norm: grads.item_norm(),
            rows: batch.len(),
            positives: prep
                .rows
                .iter()
                .filter(|r| r.weights.first().is_some_and(|w| *w > 0.0))
                .count(),
            seeded: prep.rows.iter().filter(|r| r.route.seeds).count(),
        })
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sgd(p: &mut [f64], g: &[f64], lr: f64) {
    for (pi, gi) in p.iter_mut().zip(g) {
        *pi -= lr * gi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookParams;
    use crate::engine::EngineConfig;
    use std::collections::BTreeMap;

    fn setup(k: usize, dim: usize) -> (Trainer, AssignmentEngine) {
        let params = CodebookParams {
            k,
            dim,
            ..Default::default()
        };
        let engine = AssignmentEngine::new(Codebook::new(params).unwrap(), EngineConfig::default());
        let trainer = Trainer::new(dim, TrainerConfig::default());
        (trainer, engine)
    }

    fn event(user: u64, item: u64, ts: u64, finish: f64) -> Event {
        let mut r = BTreeMap::new();
        r.insert("finish".to_string(), finish);
        Event::impression(user, item, ts, r)
    }

    #[test]
    fn step_touches_only_batch_ids() {
        let (mut t, mut e) = setup(4, 3);
        let warm: Vec<Event> = (0..6).map(|i| event(i, 100 + i, i, 1.0)).collect();
        t.train_step(&Batch::assemble(warm, &e), &mut e).unwrap();
        let before = t.model().clone();
        let b = Batch::assemble(vec![event(1, 101, 10, 1.0), event(2, 103, 11, 1.0)], &e);
        t.train_step(&b, &mut e).unwrap();
        let after = t.model();
        for id in [100u64, 102, 104, 105] {
            let r = after.item_table().lookup(id).unwrap();
            assert_eq!(before.item_table().row(r), after.item_table().row(r));
            assert_eq!(before.item_bias(r), after.item_bias(r));
        }
        for id in [0u64, 3, 4, 5] {
            let r = after.user_table(0).lookup(id).unwrap();
            assert_eq!(before.user_table(0).row(r), after.user_table(0).row(r));
        }
        let r = after.item_table().lookup(101).unwrap();
        assert_ne!(before.item_table().row(r), after.item_table().row(r));
    }

    #[test]
    fn sgd_never_touches_codebook() {
        let (mut t, mut e) = setup(2, 3);
        let warm: Vec<Event> = (0..4).map(|i| event(i, i, i, 1.0)).collect();
        t.train_step(&Batch::assemble(warm, &e), &mut e).unwrap();
        let b = Batch::assemble((0..4).map(|i| event(i, i, 10 + i, 1.0)).collect(), &e);
        let prep = t.prepare(&b, &e).unwrap();
        let cb = e.codebook().clone();
        let (_, g) = t.objective(&prep, e.codebook()).unwrap();
        t.apply(&g);
        assert_eq!(e.codebook(), &cb);
    }

    #[test]
    fn seeding_rows_in_one_batch_get_distinct_slots() {
        let (mut t, mut e) = setup(3, 2);
        let b = Batch::assemble(
            vec![event(0, 7, 0, 1.0), event(1, 7, 1, 1.0), event(2, 8, 2, 0.0)],
            &e,
        );
        assert_eq!(b.rows[0].delta, 1000.0);
        assert_eq!(b.rows[1].delta, 1.0);
        let prep = t.prepare(&b, &e).unwrap();
        let slots: Vec<usize> = prep
            .rows
            .iter()
            .map(|r| r.route.quantization.cluster_id)
            .collect();
        assert_eq!(slots, vec![0, 0, 1]);
        t.train_step(&b, &mut e).unwrap();
        assert_eq!(e.codebook().initialized_count(), 2);
        assert_eq!(e.cluster_of(7), Some(0));
        assert_eq!(e.cluster_of(8), Some(1));
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let (mut t, mut e) = setup(4, 4);
            for s in 0..5u64 {
                let evs = (0..8)
                    .map(|i| event(i % 3, (s * 7 + i) % 11, s * 8 + i, (i % 2) as f64))
                    .collect();
                let b = Batch::assemble(evs, &e);
                t.train_step(&b, &mut e).unwrap();
            }
            (t, e.dump_snapshot())
        };
        let (t1, s1) = run();
        let (t2, s2) = run();
        assert_eq!(t1, t2);
        assert_eq!(s1.encode(), s2.encode());
    }

    #[test]
    fn rejects_bad_batches() {
        let (mut t, e) = setup(2, 2);
        assert_eq!(t.prepare(&Batch::default(), &e), Err(TrainError::EmptyBatch));
        let b = Batch {
            rows: vec![BatchRow {
                event: Event::candidate(1, 0),
                delta: 1.0,
            }],
        };
        assert_eq!(t.prepare(&b, &e), Err(TrainError::NotImpression(0)));
    }
}
