//! Real-time item-to-cluster store.
//!
//! The engine owns the codebook and the item records. Impressions write the
//! assignment and trigger the EMA update in the same call; candidate events
//! re-quantize a stored embedding and touch nothing but the assignment.
//! There is no rebuild step: every snapshot is cut straight from the live
//! assignments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError, QuantizationResult};
use crate::event::{Event, StreamKind};
use crate::snapshot::PostingListSnapshot;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("expected a {expected:?} event, got {got:?}")]
    WrongStream { expected: StreamKind, got: StreamKind },
}

/// When the EMA decay is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaClock {
    /// Every impression decays only the cluster it lands in.
    #[default]
    Event,
    /// Every cluster decays once per batch; impressions only add.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Interval used for an item's first impression.
    pub first_occurrence_cap: f64,
    /// When off, clusters are seeded once and then frozen.
    pub ema: bool,
    pub clock: EmaClock,
    /// Task names aligned with the codebook's `eta`.
    pub tasks: Vec<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            first_occurrence_cap: 1000.0,
            ema: true,
            clock: EmaClock::Event,
            tasks: vec!["finish".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: u64,
    pub v_emb: Vec<f64>,
    pub v_bias: f64,
    pub cluster_id: Option<usize>,
    pub last_seen: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub impressions: u64,
    pub candidates: u64,
    pub candidates_skipped: u64,
    pub reassignments: u64,
}

/// How an impressed item was routed to a cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub quantization: QuantizationResult,
    /// The item lands in a slot that has never been initialized; it will
    /// adopt the item's embedding.
    pub seeds: bool,
}

#[derive(Debug, Clone)]
pub struct AssignmentEngine {
    config: EngineConfig,
    codebook: Codebook,
    records: Vec<ItemRecord>,
    index: HashMap<u64, usize>,
    cluster_impressions: Vec<u64>,
    stats: EngineStats,
    next_version: u64,
}

impl AssignmentEngine {
    pub fn new(codebook: Codebook, config: EngineConfig) -> Self {
        let k = codebook.k();
        Self {
            config,
            codebook,
            records: Vec::new(),
            index: HashMap::new(),
            cluster_impressions: vec![0; k],
            stats: EngineStats::default(),
            next_version: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn records(&self) -> &[ItemRecord] {
        &self.records
    }

    pub fn record(&self, item: u64) -> Option<&ItemRecord> {
        self.index.get(&item).map(|&i| &self.records[i])
    }

    pub fn cluster_of(&self, item: u64) -> Option<usize> {
        self.record(item).and_then(|r| r.cluster_id)
    }

    /// Impressions routed to each cluster so far.
    pub fn cluster_impressions(&self) -> &[u64] {
        &self.cluster_impressions
    }

    pub fn assigned_count(&self) -> usize {
        self.records.iter().filter(|r| r.cluster_id.is_some()).count()
    }

    pub fn next_version(&self) -> u64 {
        self.next_version
    }

    /// Occurrence interval an impression at `ts` would see, floored at 1.
    pub fn interval_at(&self, item: u64, ts: u64) -> f64 {
        interval(
            self.record(item).and_then(|r| r.last_seen),
            ts,
            self.config.first_occurrence_cap,
        )
    }

    /// Routes an impressed item: unassigned items fill the lowest empty slot
    /// not listed in `reserved`; everything else goes to the nearest cluster.
    pub fn route(&self, item: u64, v: &[f64], reserved: &[usize]) -> Result<Route, CodebookError> {
        if self.cluster_of(item).is_none() {
            let free =
                (0..self.codebook.k()).find(|k| !self.codebook.is_initialized(*k) && !reserved.contains(k));
            if let Some(k) = free {
                let raw: f64 = v.iter().map(|x| x * x).sum();
                return Ok(Route {
                    quantization: QuantizationResult {
                        cluster_id: k,
                        discounted_distance: 0.0,
                        raw_distance: raw,
                    },
                    seeds: true,
                });
            }
        }
        self.codebook.quantize(v).map(|q| Route {
            quantization: q,
            seeds: false,
        })
    }

    fn task_rewards(&self, event: &Event) -> Option<Vec<f64>> {
        if self.codebook.params().eta.is_empty() {
            return None;
        }
        Some(self.config.tasks.iter().map(|t| event.reward(t)).collect())
    }

    /// Records an impression: stores the item state, advances its last-seen
    /// clock and moves the chosen cluster towards `v_emb`.
    pub fn process_impression(
        &mut self,
        event: &Event,
        v_emb: &[f64],
        v_bias: f64,
        quantization: QuantizationResult,
    ) -> Result<(), EngineError> {
        if event.stream != StreamKind::Impression {
            return Err(EngineError::WrongStream {
                expected: StreamKind::Impression,
                got: event.stream,
            });
        }
        let k = quantization.cluster_id;
        let delta = self.interval_at(event.item, event.ts);
        let rewards = self.task_rewards(event);
        if self.config.ema || !self.codebook.is_initialized(k) {
            match self.config.clock {
                EmaClock::Event => self.codebook.ema_update(k, v_emb, delta, rewards.as_deref())?,
                EmaClock::Batch => self.codebook.accumulate(k, v_emb, delta, rewards.as_deref())?,
            }
        } else if v_emb.len() != self.codebook.dim() {
            return Err(CodebookError::DimensionMismatch {
                expected: self.codebook.dim(),
                got: v_emb.len(),
            }
            .into());
        }
        let idx = match self.index.get(&event.item) {
            Some(&i) => i,
            None => {
                self.records.push(ItemRecord {
                    item_id: event.item,
                    v_emb: Vec::new(),
                    v_bias: 0.0,
                    cluster_id: None,
                    last_seen: None,
                });
                self.index.insert(event.item, self.records.len() - 1);
                self.records.len() - 1
            }
        };
        let rec = &mut self.records[idx];
        rec.v_emb.clear();
        rec.v_emb.extend_from_slice(v_emb);
        rec.v_bias = v_bias;
        rec.cluster_id = Some(k);
        rec.last_seen = Some(event.ts);
        self.cluster_impressions[k] += 1;
        self.stats.impressions += 1;
        Ok(())
    }

    /// Marks the start of a training batch; under the batch clock this
    /// decays every cluster once.
    pub fn begin_batch(&mut self) {
        if self.config.ema && self.config.clock == EmaClock::Batch {
            self.codebook.decay_all();
        }
    }

    /// Forward-only refresh of an item's assignment. Unknown items, and all
    /// items while the codebook is empty, are skipped.
    pub fn process_candidate(&mut self, event: &Event) {
        self.stats.candidates += 1;
        let Some(&idx) = self.index.get(&event.item) else {
            self.stats.candidates_skipped += 1;
            return;
        };
        let Ok(q) = self.codebook.quantize(&self.records[idx].v_emb) else {
            self.stats.candidates_skipped += 1;
            return;
        };
        let rec = &mut self.records[idx];
        if rec.cluster_id != Some(q.cluster_id) {
            self.stats.reassignments += 1;
        }
        rec.cluster_id = Some(q.cluster_id);
    }

    /// Re-quantizes every stored item against the current codebook.
    pub fn candidate_sweep(&mut self) {
        let ids: Vec<u64> = self.records.iter().map(|r| r.item_id).collect();
        for id in ids {
            self.process_candidate(&Event::candidate(id, 0));
        }
    }

    /// Cuts an immutable snapshot of the current assignments.
    pub fn dump_snapshot(&mut self) -> PostingListSnapshot {
        let version = self.next_version;
        self.next_version += 1;
        build_snapshot(version, &self.codebook, &self.records)
    }

    /// Snapshot of the current state that does not consume a version.
    pub fn peek_snapshot(&self) -> PostingListSnapshot {
        build_snapshot(self.next_version, &self.codebook, &self.records)
    }

    pub(crate) fn from_parts(
        config: EngineConfig,
        codebook: Codebook,
        records: Vec<ItemRecord>,
        cluster_impressions: Vec<u64>,
        stats: EngineStats,
        next_version: u64,
    ) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.item_id, i)).collect();
        Self {
            config,
            codebook,
            records,
            index,
            cluster_impressions,
            stats,
            next_version,
        }
    }
}

fn interval(last_seen: Option<u64>, ts: u64, cap: f64) -> f64 {
    match last_seen {
        None => cap,
        Some(prev) => (ts.saturating_sub(prev) as f64).max(1.0),
    }
}

fn build_snapshot(version: u64, codebook: &Codebook, records: &[ItemRecord]) -> PostingListSnapshot {
    let k = codebook.k();
    let dim = codebook.dim();
    let mut groups: Vec<Vec<&ItemRecord>> = vec![Vec::new(); k];
    for r in records {
        if let Some(c) = r.cluster_id {
            groups[c].push(r);
        }
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let mut items = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n * dim);
    let mut segs = Vec::with_capacity(k);
    for g in &mut groups {
        g.sort_by(|a, b| b.v_bias.total_cmp(&a.v_bias).then(a.item_id.cmp(&b.item_id)));
        for r in g.iter() {
            items.push(r.item_id);
            biases.push(r.v_bias);
            embeddings.extend_from_slice(&r.v_emb);
        }
        segs.push(items.len() as u64);
    }
    PostingListSnapshot {
        version,
        codebook: codebook.clone(),
        items,
        segs,
        biases,
        embeddings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookParams;
    use std::collections::BTreeMap;

    fn engine(k: usize) -> AssignmentEngine {
        let params = CodebookParams {
            k,
            dim: 2,
            alpha: 0.9,
            beta: 0.5,
            s: 5.0,
            eta: vec![],
        };
        AssignmentEngine::new(Codebook::new(params).unwrap(), EngineConfig::default())
    }

    fn imp(item: u64, ts: u64) -> Event {
        Event::impression(1, item, ts, BTreeMap::new())
    }

    fn feed(e: &mut AssignmentEngine, item: u64, ts: u64, v: &[f64], bias: f64) -> Route {
        let route = e.route(item, v, &[]).unwrap();
        e.process_impression(&imp(item, ts), v, bias, route.quantization)
            .unwrap();
        route
    }

    #[test]
    fn new_item_uses_first_occurrence_cap() {
        let mut e = engine(8);
        assert_eq!(e.interval_at(5, 0), 1000.0);
        let q = QuantizationResult {
            cluster_id: 7,
            discounted_distance: 0.0,
            raw_distance: 0.0,
        };
        e.process_impression(&imp(5, 0), &[1.0, 0.0], 0.2, q).unwrap();
        let rec = e.record(5).unwrap();
        assert_eq!(rec.cluster_id, Some(7));
        assert_eq!(rec.last_seen, Some(0));
        // (1 - 0.9) * 1000^0.5
        assert!((e.codebook().counter(7) - 0.1 * 1000f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn interval_between_impressions() {
        let mut e = engine(4);
        feed(&mut e, 3, 10, &[1.0, 1.0], 0.0);
        assert_eq!(e.interval_at(3, 15), 5.0);
        let c_before = e.codebook().counter(0);
        feed(&mut e, 3, 15, &[1.0, 1.0], 0.0);
        let expected = 0.9 * c_before + 0.1 * 5f64.sqrt();
        assert!((e.codebook().counter(0) - expected).abs() < 1e-12);
        assert_eq!(e.interval_at(3, 15), 1.0);
    }

    #[test]
    fn seeding_fills_slots_in_order_and_adopts_embedding() {
        let mut e = engine(3);
        let r = feed(&mut e, 1, 0, &[0.5, -0.5], 0.0);
        assert!(r.seeds);
        assert_eq!(e.codebook().cluster_embedding(0).unwrap(), &[0.5, -0.5]);
        // an assigned item is quantized, not given a fresh slot
        let r = feed(&mut e, 1, 1, &[0.5, -0.5], 0.0);
        assert!(!r.seeds);
        assert_eq!(r.quantization.cluster_id, 0);
        let r = e.route(2, &[3.0, 3.0], &[1]).unwrap();
        assert_eq!(r.quantization.cluster_id, 2);
    }

    #[test]
    fn rejects_candidate_on_impression_path() {
        let mut e = engine(2);
        let q = QuantizationResult {
            cluster_id: 0,
            discounted_distance: 0.0,
            raw_distance: 0.0,
        };
        assert!(matches!(
            e.process_impression(&Event::candidate(1, 0), &[0.0, 0.0], 0.0, q),
            Err(EngineError::WrongStream { .. })
        ));
        assert!(matches!(
            e.process_impression(&imp(1, 0), &[0.0], 0.0, q),
            Err(EngineError::Codebook(CodebookError::DimensionMismatch { .. }))
        ));
    }

    fn put(e: &mut AssignmentEngine, item: u64, ts: u64, v: &[f64], k: usize) {
        let q = QuantizationResult {
            cluster_id: k,
            discounted_distance: 0.0,
            raw_distance: 0.0,
        };
        e.process_impression(&imp(item, ts), v, 0.0, q).unwrap();
    }

    #[test]
    fn candidate_pass_reassigns_without_touching_state() {
        let mut e = engine(2);
        put(&mut e, 1, 0, &[0.0, 0.0], 0);
        put(&mut e, 2, 1, &[10.0, 10.0], 1);
        put(&mut e, 3, 2, &[1.0, 1.0], 0);
        // cluster 1 drifts onto item 3, cluster 0 drifts away
        for ts in 3..200 {
            put(&mut e, 2, ts, &[1.0, 1.1], 1);
            put(&mut e, 1, ts, &[-5.0, -5.0], 0);
        }
        assert_eq!(e.cluster_of(3), Some(0));
        let cb = e.codebook().clone();
        let recs = e.records().to_vec();
        e.process_candidate(&Event::candidate(3, 400));
        assert_eq!(e.cluster_of(3), Some(1));
        assert_eq!(e.stats().reassignments, 1);
        assert_eq!(e.codebook(), &cb);
        for (a, b) in recs.iter().zip(e.records()) {
            assert_eq!(a.v_emb, b.v_emb);
            assert_eq!(a.v_bias.to_bits(), b.v_bias.to_bits());
            assert_eq!(a.last_seen, b.last_seen);
        }
        e.process_candidate(&Event::candidate(99, 400));
        assert_eq!(e.stats().candidates_skipped, 1);
    }

    #[test]
    fn snapshot_layout() {
        let mut e = engine(3);
        let q = |k| QuantizationResult {
            cluster_id: k,
            discounted_distance: 0.0,
            raw_distance: 0.0,
        };
        let rows = [
            (1u64, 0usize, 0.1),
            (2, 0, 0.7),
            (3, 1, 0.0),
            (4, 2, -1.0),
            (5, 2, 2.0),
        ];
        for (ts, (item, k, b)) in rows.iter().enumerate() {
            e.process_impression(&imp(*item, ts as u64), &[0.0, 1.0], *b, q(*k))
                .unwrap();
        }
        let s = e.dump_snapshot();
        assert_eq!(s.items, vec![2, 1, 3, 5, 4]);
        assert_eq!(s.segs, vec![2, 3, 5]);
        assert_eq!(s.biases, vec![0.7, 0.1, 0.0, 2.0, -1.0]);
        s.check_integrity().unwrap();
        let s2 = e.dump_snapshot();
        assert!(s2.version > s.version);
    }

    #[test]
    fn empty_snapshot() {
        let mut e = engine(4);
        let s = e.dump_snapshot();
        assert!(s.items.is_empty());
        assert_eq!(s.segs, vec![0; 4]);
        s.check_integrity().unwrap();
    }
}
