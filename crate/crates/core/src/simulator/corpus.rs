use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::tower::mix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

/// Scheduled jump of some group means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    /// Impression timestamp from which the moved means apply.
    pub at: u64,
    /// Fraction of groups that move.
    pub fraction: f64,
    /// Length of the jump before re-normalization.
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub items: usize,
    pub users: usize,
    pub groups: usize,
    pub dim: usize,
    pub zipf: f64,
    /// Within-group standard deviation of item vectors.
    pub noise: f64,
    /// Weight of a user's primary group; the rest goes to one other group.
    pub primary_weight: f64,
    pub drift: Option<Drift>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            items: 100_000,
            users: 1_000,
            groups: 50,
            dim: 16,
            zipf: 1.0,
            noise: 0.1,
            primary_weight: 0.8,
            drift: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.groups == 0 {
            return bad("groups must be positive");
        }
        if self.items < self.groups {
            return bad("need at least one item per group");
        }
        if self.users == 0 || self.dim == 0 {
            return bad("users and dim must be positive");
        }
        if !(self.zipf >= 0.0) {
            return bad("zipf exponent must be non-negative");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.primary_weight) {
            return bad("primary_weight must lie in [0, 1]");
        }
        if let Some(d) = &self.drift {
            if !(0.0..=1.0).contains(&d.fraction) || !(d.displacement >= 0.0) {
                return bad("drift fraction must lie in [0, 1] and displacement be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    /// `groups x dim` unit vectors before any drift.
    pub means: Vec<f64>,
    /// Means after the drift; equal to `means` for groups that stay.
    pub drifted_means: Vec<f64>,
    pub moved_groups: Vec<usize>,
    pub item_group: Vec<usize>,
    /// `items x dim` offsets from the item's group mean.
    pub item_noise: Vec<f64>,
    /// Item ids ordered from most to least popular.
    pub popularity: Vec<u64>,
    pub user_groups: Vec<(usize, usize)>,
    /// `users x dim`, fixed for the whole stream.
    pub user_vectors: Vec<f64>,
    zipf: Zipf<f64>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Independent stream for a named purpose.
pub(crate) fn sub_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(purpose)))
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<SyntheticCorpus, SimError> {
    config.validate()?;
    let (g, d) = (config.groups, config.dim);
    let mut rng = sub_rng(seed, 1);

    let mut means = Vec::with_capacity(g * d);
    while means.len() < g * d {
        let m = unit(&mut rng, d);
        let distinct = means
            .chunks(d)
            .all(|o: &[f64]| o.iter().zip(&m).any(|(a, b)| a != b));
        if distinct {
            means.extend(m);
        }
    }

    let mut drifted_means = means.clone();
    let mut moved_groups = Vec::new();
    if let Some(drift) = &config.drift {
        let mut order: Vec<usize> = (0..g).collect();
        order.shuffle(&mut rng);
        moved_groups = order[..(drift.fraction * g as f64).round() as usize].to_vec();
        moved_groups.sort_unstable();
        for &grp in &moved_groups {
            let step = unit(&mut rng, d);
            let m = &mut drifted_means[grp * d..(grp + 1) * d];
            for (x, s) in m.iter_mut().zip(&step) {
                *x += drift.displacement * s;
            }
            normalize(m);
        }
    }

    let mut item_group = Vec::with_capacity(config.items);
    let mut item_noise = Vec::with_capacity(config.items * d);
    for i in 0..config.items {
        // every group gets at least one item
        item_group.push(if i < g { i } else { rng.random_range(0..g) });
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            item_noise.push(config.noise * z);
        }
    }
    let mut popularity: Vec<u64> = (0..config.items as u64).collect();
    popularity.shuffle(&mut rng);

    let mut user_groups = Vec::with_capacity(config.users);
    let mut user_vectors = Vec::with_capacity(config.users * d);
    for _ in 0..config.users {
        let a = rng.random_range(0..g);
        let b = if g > 1 {
            (a + rng.random_range(1..g)) % g
        } else {
            a
        };
        let mut u: Vec<f64> = (0..d)
            .map(|j| {
                config.primary_weight * means[a * d + j] + (1.0 - config.primary_weight) * means[b * d + j]
            })
            .collect();
        normalize(&mut u);
        user_groups.push((a, b));
        user_vectors.extend(u);
    }

    let zipf =
        Zipf::new(config.items as f64, config.zipf).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(SyntheticCorpus {
        config: config.clone(),
        means,
        drifted_means,
        moved_groups,
        item_group,
        item_noise,
        popularity,
        user_groups,
        user_vectors,
        zipf,
    })
}

impl SyntheticCorpus {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn items(&self) -> usize {
        self.config.items
    }

    pub fn users(&self) -> usize {
        self.config.users
    }

    pub fn drifted(&self, ts: u64) -> bool {
        self.config.drift.is_some_and(|d| ts >= d.at)
    }

    pub fn group_mean(&self, group: usize, ts: u64) -> &[f64] {
        let d = self.dim();
        let m = if self.drifted(ts) {
            &self.drifted_means
        } else {
            &self.means
        };
        &m[group * d..(group + 1) * d]
    }

    /// Ground-truth vector of `item` at impression time `ts`.
    pub fn item_vector(&self, item: u64, ts: u64) -> Vec<f64> {
        let d = self.dim();
        let i = item as usize;
        self.group_mean(self.item_group[i], ts)
            .iter()
            .zip(&self.item_noise[i * d..(i + 1) * d])
            .map(|(m, n)| m + n)
            .collect()
    }

    pub fn user_vector(&self, user: u64) -> &[f64] {
        let d = self.dim();
        &self.user_vectors[user as usize * d..(user as usize + 1) * d]
    }

    /// Item drawn by popularity.
    pub fn sample_item<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let rank = self.zipf.sample(rng) as usize - 1;
        self.popularity[rank.min(self.items() - 1)]
    }

    /// Probability that the item with popularity rank `rank` (0-based) is
    /// drawn.
    pub fn popularity_mass(&self, rank: usize) -> f64 {
        let s = self.config.zipf;
        let h: f64 = (1..=self.items()).map(|k| (k as f64).powf(-s)).sum();
        ((rank + 1) as f64).powf(-s) / h
    }
}
