//! Learnable cluster set for streaming vector quantization.
//!
//! Every cluster slot keeps a preliminary embedding `w` and an appearance
//! counter `c`; the cluster embedding is `e = w / c`. Slots start empty
//! (`c = 0`) and are seeded by the first item routed to them.
//!
//! Updates follow a popularity-weighted EMA:
//!
//! ```text
//! w_k <- alpha * w_k + (1 - alpha) * g * delta^beta * v
//! c_k <- alpha * c_k + (1 - alpha) * g * delta^beta
//! g    = prod_p (1 + h_p)^eta_p        (1 for single-task updates)
//! ```
//!
//! Nearest-cluster search discounts the squared distance by
//! `r_k = min(c_k / mean(c) * s, 1)`, which pulls items towards starved
//! clusters.

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Counters below this value mark an uninitialized cluster.
pub const EMPTY_COUNTER: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodebookError {
    #[error("invalid codebook parameters: {0}")]
    InvalidParams(String),
    #[error("cluster {0} is out of range (K = {1})")]
    ClusterOutOfRange(usize, usize),
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("codebook has no initialized cluster")]
    EmptyCodebook,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("occurrence interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("reward must be non-negative, got {0}")]
    NegativeReward(f64),
    #[error("expected {expected} task rewards, got {got}")]
    RewardArity { expected: usize, got: usize },
}

/// Hyper-parameters of a codebook. `k` and `dim` are fixed for its lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookParams {
    pub k: usize,
    pub dim: usize,
    /// EMA decay, in (0, 1).
    pub alpha: f64,
    /// Popularity exponent applied to the occurrence interval.
    pub beta: f64,
    /// Disturbance threshold.
    pub s: f64,
    /// Per-task reward exponents. Empty for single-task codebooks.
    pub eta: Vec<f64>,
}

impl Default for CodebookParams {
    fn default() -> Self {
        Self {
            k: 256,
            dim: 16,
            alpha: 0.99,
            beta: 0.5,
            s: 5.0,
            eta: Vec::new(),
        }
    }
}

impl CodebookParams {
    pub fn validate(&self) -> Result<(), CodebookError> {
        let bad = |m: &str| Err(CodebookError::InvalidParams(m.to_string()));
        if self.k == 0 {
            return bad("K must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a non-negative finite number");
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return bad("s must be positive");
        }
        if self.eta.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad("eta entries must be non-negative");
        }
        Ok(())
    }
}

/// Outcome of a nearest-cluster search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationResult {
    pub cluster_id: usize,
    /// `||e - v||^2 * r`
    pub discounted_distance: f64,
    /// `||e - v||^2`
    pub raw_distance: f64,
}

/// Multiplicative EMA weight `prod_p (1 + h_p)^eta_p * delta^beta`.
pub fn update_weight(
    params: &CodebookParams,
    delta: f64,
    rewards: Option<&[f64]>,
) -> Result<f64, CodebookError> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(CodebookError::NonPositiveInterval(delta));
    }
    let mut g = delta.powf(params.beta);
    if let Some(h) = rewards {
        if h.len() != params.eta.len() {
            return Err(CodebookError::RewardArity {
                expected: params.eta.len(),
                got: h.len(),
            });
        }
        for (&hp, &eta) in h.iter().zip(&params.eta) {
            if !(hp >= 0.0) {
                return Err(CodebookError::NegativeReward(hp));
            }
            g *= (1.0 + hp).powf(eta);
        }
    }
    Ok(g)
}

fn squared_distance_bounded(e: &[f64], v: &[f64], r: f64, bound: f64) -> Option<f64> {
    // Partial sums only grow, so once partial * r exceeds the incumbent the
    // full distance cannot win.
    let mut acc = 0.0;
    for (chunk_e, chunk_v) in e.chunks(4).zip(v.chunks(4)) {
        for (a, b) in chunk_e.iter().zip(chunk_v) {
            let d = a - b;
            acc += d * d;
        }
        if acc * r > bound {
            return None;
        }
    }
    Some(acc)
}

/// Counter-based discount. Returns 1 when no counter carries information.
pub(crate) fn disturbance_from(counters: &[f64], k: usize, s: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 1.0;
    }
    let mean = total / counters.len() as f64;
    (counters[k] / mean * s).min(1.0)
}

/// Scan for the cluster minimizing `||e_k - v||^2 * r_k`, lowest index on ties.
fn nearest<'a, F>(
    counters: &[f64],
    s: f64,
    disturbance: bool,
    v: &[f64],
    mut embedding: F,
) -> Option<QuantizationResult>
where
    F: FnMut(usize) -> &'a [f64],
{
    let total: f64 = counters.iter().sum();
    let mut best: Option<QuantizationResult> = None;
    for (k, &c) in counters.iter().enumerate() {
        if c < EMPTY_COUNTER {
            continue;
        }
        let r = if disturbance {
            disturbance_from(counters, k, s, total)
        } else {
            1.0
        };
        let bound = best.map_or(f64::INFINITY, |b| b.discounted_distance);
        if let Some(raw) = squared_distance_bounded(embedding(k), v, r, bound) {
            let discounted = raw * r;
            if discounted < bound || best.is_none() {
                best = Some(QuantizationResult {
                    cluster_id: k,
                    discounted_distance: discounted,
                    raw_distance: raw,
                });
            }
        }
    }
    best
}

/// Single-writer codebook. Readers borrow it immutably, so a reader always
/// sees a complete `(w, c)` pair per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    params: CodebookParams,
    disturbance: bool,
    w: Vec<f64>,
    c: Vec<f64>,
    /// Cached `w / c`, refreshed on every update of the slot.
    e: Vec<f64>,
}

impl Codebook {
    pub fn new(params: CodebookParams) -> Result<Self, CodebookError> {
        params.validate()?;
        let n = params.k * params.dim;
        Ok(Self {
            w: vec![0.0; n],
            c: vec![0.0; params.k],
            e: vec![0.0; n],
            params,
            disturbance: true,
        })
    }

    /// Rebuilds a codebook from raw `(c, w)` state.
    pub fn from_state(
        params: CodebookParams,
        counters: Vec<f64>,
        preliminary: Vec<f64>,
    ) -> Result<Self, CodebookError> {
        params.validate()?;
        if counters.len() != params.k {
            return Err(CodebookError::DimensionMismatch {
                expected: params.k,
                got: counters.len(),
            });
        }
        if preliminary.len() != params.k * params.dim {
            return Err(CodebookError::DimensionMismatch {
                expected: params.k * params.dim,
                got: preliminary.len(),
            });
        }
        if let Some(&c) = counters.iter().find(|c| !(**c >= 0.0)) {
            return Err(CodebookError::InvalidParams(format!("negative counter {c}")));
        }
        let mut cb = Self {
            e: vec![0.0; preliminary.len()],
            w: preliminary,
            c: counters,
            params,
            disturbance: true,
        };
        for k in 0..cb.params.k {
            cb.refresh_embedding(k);
        }
        Ok(cb)
    }

    pub fn with_disturbance(mut self, on: bool) -> Self {
        self.disturbance = on;
        self
    }

    pub fn set_disturbance(&mut self, on: bool) {
        self.disturbance = on;
    }

    pub fn disturbance_enabled(&self) -> bool {
        self.disturbance
    }

    pub fn params(&self) -> &CodebookParams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn counters(&self) -> &[f64] {
        &self.c
    }

    pub fn counter(&self, k: usize) -> f64 {
        self.c[k]
    }

    /// Preliminary embedding `w_k`.
    pub fn preliminary(&self, k: usize) -> &[f64] {
        let d = self.params.dim;
        &self.w[k * d..(k + 1) * d]
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.c[k] >= EMPTY_COUNTER
    }

    pub fn initialized_count(&self) -> usize {
        self.c.iter().filter(|c| **c >= EMPTY_COUNTER).count()
    }

    /// Lowest-index slot that has never received an item.
    pub fn first_uninitialized(&self) -> Option<usize> {
        self.c.iter().position(|c| *c < EMPTY_COUNTER)
    }

    fn check_cluster(&self, k: usize) -> Result<(), CodebookError> {
        if k >= self.params.k {
            return Err(CodebookError::ClusterOutOfRange(k, self.params.k));
        }
        Ok(())
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), CodebookError> {
        if v.len() != self.params.dim {
            return Err(CodebookError::DimensionMismatch {
                expected: self.params.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `e_k = w_k / c_k`.
    pub fn cluster_embedding(&self, k: usize) -> Result<&[f64], CodebookError> {
        self.check_cluster(k)?;
        if !self.is_initialized(k) {
            return Err(CodebookError::EmptyCluster(k));
        }
        let d = self.params.dim;
        Ok(&self.e[k * d..(k + 1) * d])
    }

    /// Unchecked view of the cached embedding; zeros for empty slots.
    pub(crate) fn embedding_unchecked(&self, k: usize) -> &[f64] {
        let d = self.params.dim;
        &self.e[k * d..(k + 1) * d]
    }

    pub fn disturbance_factor(&self, k: usize) -> Result<f64, CodebookError> {
        self.check_cluster(k)?;
        let total: f64 = self.c.iter().sum();
        Ok(disturbance_from(&self.c, k, self.params.s, total))
    }

    pub fn quantize(&self, v: &[f64]) -> Result<QuantizationResult, CodebookError> {
        self.check_dim(v)?;
        nearest(&self.c, self.params.s, self.disturbance, v, |k| {
            self.embedding_unchecked(k)
        })
        .ok_or(CodebookError::EmptyCodebook)
    }

    /// Applies one EMA step to cluster `k` for item embedding `v`.
    ///
    /// `rewards` holds one reward per task, aligned with `eta`; `None` means a
    /// single-task update.
    pub fn ema_update(
        &mut self,
        k: usize,
        v: &[f64],
        delta: f64,
        rewards: Option<&[f64]>,
    ) -> Result<(), CodebookError> {
        self.check_cluster(k)?;
        self.check_dim(v)?;
        let g = update_weight(&self.params, delta, rewards)?;
        let a = self.params.alpha;
        let step = (1.0 - a) * g;
        let d = self.params.dim;
        for (w, x) in self.w[k * d..(k + 1) * d].iter_mut().zip(v) {
            *w = a * *w + step * x;
        }
        self.c[k] = a * self.c[k] + step;
        self.refresh_embedding(k);
        Ok(())
    }

    /// One tick of a clock shared by all clusters: every `(w, c)` pair is
    /// multiplied by `alpha`.
    pub fn decay_all(&mut self) {
        let a = self.params.alpha;
        self.w.iter_mut().for_each(|w| *w *= a);
        self.c.iter_mut().for_each(|c| *c *= a);
        for k in 0..self.params.k {
            self.refresh_embedding(k);
        }
    }

    /// Adds one item's EMA increment to cluster `k` without decaying it.
    /// Paired with [`Codebook::decay_all`] this gives the batch-clock EMA.
    pub fn accumulate(
        &mut self,
        k: usize,
        v: &[f64],
        delta: f64,
        rewards: Option<&[f64]>,
    ) -> Result<(), CodebookError> {
        self.check_cluster(k)?;
        self.check_dim(v)?;
        let step = (1.0 - self.params.alpha) * update_weight(&self.params, delta, rewards)?;
        let d = self.params.dim;
        for (w, x) in self.w[k * d..(k + 1) * d].iter_mut().zip(v) {
            *w += step * x;
        }
        self.c[k] += step;
        self.refresh_embedding(k);
        Ok(())
    }

    fn refresh_embedding(&mut self, k: usize) {
        let d = self.params.dim;
        let c = self.c[k];
        let (w, e) = (&self.w[k * d..(k + 1) * d], &mut self.e[k * d..(k + 1) * d]);
        if c >= EMPTY_COUNTER {
            for (ei, wi) in e.iter_mut().zip(w) {
                *ei = wi / c;
            }
        } else {
            e.fill(0.0);
        }
    }

    /// Raw preliminary embeddings, row-major `K x dim`.
    pub fn preliminary_flat(&self) -> &[f64] {
        &self.w
    }
}

#[derive(Debug, Clone)]
struct Slot {
    c: f64,
    w: Vec<f64>,
    e: Vec<f64>,
}

/// Codebook whose clusters can be read by many threads while one writer
/// updates them. Each cluster's `(w, c)` pair sits behind its own lock;
/// there is no cross-cluster consistency.
#[derive(Debug)]
pub struct SharedCodebook {
    params: CodebookParams,
    disturbance: bool,
    slots: Vec<RwLock<Slot>>,
}

impl SharedCodebook {
    pub fn from_codebook(cb: &Codebook) -> Self {
        let slots = (0..cb.k())
            .map(|k| {
                RwLock::new(Slot {
                    c: cb.c[k],
                    w: cb.preliminary(k).to_vec(),
                    e: cb.embedding_unchecked(k).to_vec(),
                })
            })
            .collect();
        Self {
            params: cb.params.clone(),
            disturbance: cb.disturbance,
            slots,
        }
    }

    pub fn to_codebook(&self) -> Codebook {
        let mut c = Vec::with_capacity(self.params.k);
        let mut w = Vec::with_capacity(self.params.k * self.params.dim);
        for slot in &self.slots {
            let s = slot.read();
            c.push(s.c);
            w.extend_from_slice(&s.w);
        }
        Codebook::from_state(self.params.clone(), c, w)
            .expect("shared codebook state is always valid")
            .with_disturbance(self.disturbance)
    }

    /// Returns a consistent `(c, e)` pair for cluster `k`.
    pub fn cluster_state(&self, k: usize) -> Result<(f64, Vec<f64>), CodebookError> {
        let slot = self
            .slots
            .get(k)
            .ok_or(CodebookError::ClusterOutOfRange(k, self.params.k))?
            .read();
        if slot.c < EMPTY_COUNTER {
            return Err(CodebookError::EmptyCluster(k));
        }
        Ok((slot.c, slot.e.clone()))
    }

    pub fn cluster_embedding(&self, k: usize) -> Result<Vec<f64>, CodebookError> {
        self.cluster_state(k).map(|(_, e)| e)
    }

    pub fn quantize(&self, v: &[f64]) -> Result<QuantizationResult, CodebookError> {
        if v.len() != self.params.dim {
            return Err(CodebookError::DimensionMismatch {
                expected: self.params.dim,
                got: v.len(),
            });
        }
        let (counters, embeds): (Vec<f64>, Vec<Vec<f64>>) = self
            .slots
            .iter()
            .map(|s| {
                let s = s.read();
                (s.c, s.e.clone())
            })
            .unzip();
        nearest(&counters, self.params.s, self.disturbance, v, |k| &embeds[k])
            .ok_or(CodebookError::EmptyCodebook)
    }

    pub fn ema_update(
        &self,
        k: usize,
        v: &[f64],
        delta: f64,
        rewards: Option<&[f64]>,
    ) -> Result<(), CodebookError> {
        if k >= self.params.k {
            return Err(CodebookError::ClusterOutOfRange(k, self.params.k));
        }
        if v.len() != self.params.dim {
            return Err(CodebookError::DimensionMismatch {
                expected: self.params.dim,
                got: v.len(),
            });
        }
        let g = update_weight(&self.params, delta, rewards)?;
        let a = self.params.alpha;
        let step = (1.0 - a) * g;
        // compute outside the lock, then swap the whole pair in
        let mut next = self.slots[k].read().clone();
        for (w, x) in next.w.iter_mut().zip(v) {
            *w = a * *w + step * x;
        }
        next.c = a * next.c + step;
        for (e, w) in next.e.iter_mut().zip(&next.w) {
            *e = if next.c >= EMPTY_COUNTER { w / next.c } else { 0.0 };
        }
        *self.slots[k].write() = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    fn params(k: usize, dim: usize) -> CodebookParams {
        CodebookParams {
            k,
            dim,
            alpha: 0.9,
            beta: 0.0,
            s: 5.0,
            eta: vec![],
        }
    }

    #[test]
    fn embedding_is_ratio() {
        let cb = Codebook::from_state(params(1, 2), vec![2.0], vec![2.0, 4.0]).unwrap();
        assert_eq!(cb.cluster_embedding(0).unwrap(), &[1.0, 2.0]);
        let cb = Codebook::from_state(params(1, 2), vec![1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(cb.cluster_embedding(0).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let cb = Codebook::new(params(3, 2)).unwrap();
        assert_eq!(cb.cluster_embedding(1), Err(CodebookError::EmptyCluster(1)));
        assert_eq!(cb.quantize(&[0.0, 0.0]), Err(CodebookError::EmptyCodebook));
        assert!(matches!(
            cb.cluster_embedding(3),
            Err(CodebookError::ClusterOutOfRange(3, 3))
        ));
    }

    #[test]
    fn rejects_bad_params() {
        for p in [
            CodebookParams {
                alpha: 1.0,
                ..params(2, 2)
            },
            CodebookParams {
                alpha: 0.0,
                ..params(2, 2)
            },
            CodebookParams {
                s: 0.0,
                ..params(2, 2)
            },
            CodebookParams { k: 0, ..params(2, 2) },
            CodebookParams {
                beta: -0.1,
                ..params(2, 2)
            },
        ] {
            assert!(Codebook::new(p).is_err());
        }
    }

    #[test]
    fn disturbance_examples() {
        let cb = Codebook::from_state(params(4, 1), vec![2.0; 4], vec![1.0; 4]).unwrap();
        assert_eq!(cb.disturbance_factor(2).unwrap(), 1.0);

        let cb = Codebook::from_state(params(3, 1), vec![0.0, 3.0, 3.0], vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(cb.disturbance_factor(0).unwrap(), 0.0);

        // mean is 1.0, cluster 0 holds a tenth of it
        let c = vec![0.1, 1.45, 1.45];
        let cb = Codebook::from_state(params(3, 1), c, vec![0.0; 3]).unwrap();
        assert!((cb.disturbance_factor(0).unwrap() - 0.5).abs() < 1e-12);

        let cb = Codebook::new(params(3, 1)).unwrap();
        assert_eq!(cb.disturbance_factor(0).unwrap(), 1.0);
    }

    #[test]
    fn single_cluster_quantize() {
        let cb = Codebook::from_state(params(2, 2), vec![1.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let q = cb.quantize(&[0.0, 3.0]).unwrap();
        assert_eq!(q.cluster_id, 0);
        assert_eq!(q.raw_distance, 1.0 + 4.0);
        assert_eq!(q.discounted_distance, q.raw_distance);
    }

    #[test]
    fn exact_match_wins() {
        let k = 6;
        let w: Vec<f64> = (0..k).flat_map(|i| [i as f64, -(i as f64)]).collect();
        let cb = Codebook::from_state(params(k, 2), vec![1.0; k], w).unwrap();
        let q = cb.quantize(&[3.0, -3.0]).unwrap();
        assert_eq!(q.cluster_id, 3);
        assert_eq!(q.discounted_distance, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::from_state(params(3, 1), vec![1.0; 3], vec![-1.0, 1.0, 1.0]).unwrap();
        assert_eq!(cb.quantize(&[0.0]).unwrap().cluster_id, 0);
        assert_eq!(cb.quantize(&[1.0]).unwrap().cluster_id, 1);
    }

    #[test]
    fn starved_cluster_attracts() {
        // cluster 1 is farther but its counter is tiny
        let mut p = params(2, 1);
        p.s = 5.0;
        let cb = Codebook::from_state(p.clone(), vec![1.0, 0.01], vec![0.0, 0.02]).unwrap();
        assert_eq!(cb.quantize(&[0.9]).unwrap().cluster_id, 1);
        let cb = cb.with_disturbance(false);
        assert_eq!(cb.quantize(&[0.9]).unwrap().cluster_id, 0);
    }

    #[test]
    fn one_step_single_task() {
        let mut cb = Codebook::new(params(1, 2)).unwrap();
        cb.ema_update(0, &[1.0, 1.0], 1.0, None).unwrap();
        let w = cb.preliminary(0);
        assert!((w[0] - 0.1).abs() < 1e-15 && (w[1] - 0.1).abs() < 1e-15);
        assert!((cb.counter(0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn one_step_multi_task() {
        let mut p = params(1, 2);
        p.eta = vec![1.0];
        let mut cb = Codebook::new(p).unwrap();
        cb.ema_update(0, &[1.0, 0.0], 1.0, Some(&[1.0])).unwrap();
        assert!((cb.preliminary(0)[0] - 0.2).abs() < 1e-15);
        assert_eq!(cb.preliminary(0)[1], 0.0);
        assert!((cb.counter(0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn update_errors() {
        let mut p = params(2, 2);
        p.eta = vec![0.5];
        let mut cb = Codebook::new(p).unwrap();
        assert_eq!(
            cb.ema_update(0, &[1.0, 1.0], 0.0, None),
            Err(CodebookError::NonPositiveInterval(0.0))
        );
        assert_eq!(
            cb.ema_update(0, &[1.0, 1.0], 1.0, Some(&[-0.5])),
            Err(CodebookError::NegativeReward(-0.5))
        );
        assert!(matches!(
            cb.ema_update(0, &[1.0], 1.0, None),
            Err(CodebookError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cb.ema_update(0, &[1.0, 1.0], 1.0, Some(&[])),
            Err(CodebookError::RewardArity { .. })
        ));
        assert_eq!(cb.counters(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_input_converges_for_any_beta() {
        for beta in [0.0, 0.5, 2.0] {
            let mut p = params(1, 3);
            p.beta = beta;
            let mut cb = Codebook::new(p).unwrap();
            let v = [0.3, -1.2, 2.5];
            for _ in 0..500 {
                cb.ema_update(0, &v, 7.0, None).unwrap();
            }
            for (e, x) in cb.cluster_embedding(0).unwrap().iter().zip(v) {
                assert!((e - x).abs() < 1e-12, "beta {beta}: {e} vs {x}");
            }
        }
    }

    #[test]
    fn shared_readers_never_see_torn_pairs() {
        // Every update uses the same vector, so e = w / c must stay equal to
        // it whatever the interval; a torn read would break the ratio.
        let mut p = params(2, 4);
        p.beta = 1.0;
        let mut cb = Codebook::new(p).unwrap();
        let v = [0.5, -0.25, 1.0, 2.0];
        cb.ema_update(0, &v, 1.0, None).unwrap();
        cb.ema_update(1, &v, 1.0, None).unwrap();
        let shared = Arc::new(SharedCodebook::from_codebook(&cb));
        let stop = Arc::new(AtomicBool::new(false));
        let readers: Vec<_> = (0..3)
            .map(|_| {
                let (shared, stop) = (shared.clone(), stop.clone());
                std::thread::spawn(move || {
                    let mut reads = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        for k in 0..2 {
                            let e = shared.cluster_embedding(k).unwrap();
                            for (a, b) in e.iter().zip(v) {
                                assert!((a - b).abs() < 1e-9);
                            }
                        }
                        reads += 1;
                    }
                    reads
                })
            })
            .collect();
        for i in 0..20_000 {
            shared.ema_update(i % 2, &v, 1.0 + (i % 97) as f64, None).unwrap();
        }
        stop.store(true, Ordering::Relaxed);
        for r in readers {
            r.join().unwrap();
        }
        let back = shared.to_codebook();
        assert!(back.counter(0) > 0.0);
    }

    #[test]
    fn shared_quantize_matches_plain() {
        let w = vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0];
        let cb = Codebook::from_state(params(3, 2), vec![1.0, 0.5, 2.0], w).unwrap();
        let shared = SharedCodebook::from_codebook(&cb);
        for v in [[0.1, 0.2], [2.0, 2.0], [-0.4, 1.0]] {
            assert_eq!(shared.quantize(&v).unwrap(), cb.quantize(&v).unwrap());
        }
        assert_eq!(shared.to_codebook(), cb);
    }
}
