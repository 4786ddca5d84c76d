use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::corpus::{sub_rng, SyntheticCorpus};
use crate::event::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub impressions: u64,
    /// Candidate events interleaved per impression.
    pub candidate_ratio: f64,
    /// Finish probability is `sigmoid(temperature * affinity + offset)`.
    pub temperature: f64,
    pub offset: f64,
    /// Also emit a `stay` reward, `ln(1 + seconds)`.
    pub stay_task: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            impressions: 1_000_000,
            candidate_ratio: 0.25,
            temperature: 8.0,
            offset: -4.0,
            stay_task: false,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lazily generated event stream. Impressions and candidates draw from
/// separate generators, so the impression sequence does not depend on the
/// candidate ratio.
#[derive(Debug, Clone)]
pub struct EventStream<'a> {
    corpus: &'a SyntheticCorpus,
    config: StreamConfig,
    impressions: ChaCha8Rng,
    candidates: ChaCha8Rng,
    emitted: u64,
    credit: f64,
    last_ts: u64,
}

pub fn generate_events<'a>(corpus: &'a SyntheticCorpus, config: &StreamConfig, seed: u64) -> EventStream<'a> {
    EventStream {
        corpus,
        config: config.clone(),
        impressions: sub_rng(seed, 2),
        candidates: sub_rng(seed, 3),
        emitted: 0,
        credit: 0.0,
        last_ts: 0,
    }
}

impl EventStream<'_> {
    /// Ground-truth affinity between a user and an item at time `ts`.
    pub fn affinity(corpus: &SyntheticCorpus, user: u64, item: u64, ts: u64) -> f64 {
        let u = corpus.user_vector(user);
        corpus
            .item_vector(item, ts)
            .iter()
            .zip(u)
            .map(|(a, b)| a * b)
            .sum()
    }

    fn impression(&mut self) -> Event {
        let ts = self.emitted;
        let c = self.corpus;
        let user = self.impressions.random_range(0..c.users() as u64);
        let item = c.sample_item(&mut self.impressions);
        let p = sigmoid(self.config.temperature * Self::affinity(c, user, item, ts) + self.config.offset);
        let mut rewards = BTreeMap::new();
        let finish = self.impressions.random_bool(p.clamp(0.0, 1.0));
        rewards.insert("finish".to_string(), if finish { 1.0 } else { 0.0 });
        if self.config.stay_task {
            let secs = Exp::new(1.0 / (1.0 + 60.0 * p))
                .expect("positive rate")
                .sample(&mut self.impressions);
            rewards.insert("stay".to_string(), secs.ln_1p());
        }
        self.emitted += 1;
        self.last_ts = ts;
        self.credit += self.config.candidate_ratio;
        Event::impression(user, item, ts, rewards)
    }
}

impl Iterator for EventStream<'_> {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        if self.emitted > 0 && self.credit >= 1.0 {
            self.credit -= 1.0;
            let item = self.candidates.random_range(0..self.corpus.items() as u64);
            return Some(Event::candidate(item, self.last_ts));
        }
        (self.emitted < self.config.impressions).then(|| self.impression())
    }
}
