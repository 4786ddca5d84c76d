use std::io::Write;

use crate::serving::rank_order;

/// Exact top-`n` of `u . v + b` over `(id, v, b)` candidates, ranked by
/// `(score desc, id asc)`.
pub fn brute_force_topk<'a, I>(u: &[f64], items: I, n: usize) -> Vec<(u64, f64)>
where
    I: IntoIterator<Item = (u64, &'a [f64], f64)>,
{
    let mut all: Vec<(u64, f64)> = items
        .into_iter()
        .map(|(id, v, b)| (id, u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() + b))
        .collect();
    let by_rank = |a: &(u64, f64), b: &(u64, f64)| rank_order((a.1, a.0), (b.1, b.0));
    if n < all.len() {
        all.select_nth_unstable_by(n, by_rank);
        all.truncate(n);
    }
    all.sort_by(by_rank);
    all
}

/// Counts of clusters whose size falls in `[edges[i], edges[i + 1])`; the
/// last bucket is open-ended.
pub fn size_histogram(sizes: &[usize], edges: &[usize]) -> Vec<usize> {
    let mut out = vec![0; edges.len()];
    for &s in sizes {
        if let Some(b) = edges.iter().rposition(|&e| s >= e) {
            out[b] += 1;
        }
    }
    out
}

/// Shannon entropy of `counts` divided by `ln(counts.len())`.
pub fn normalized_entropy<T: Copy + Into<f64>>(counts: &[T]) -> f64 {
    let total: f64 = counts.iter().map(|&c| c.into()).sum();
    if counts.len() < 2 || total <= 0.0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .map(|&c| c.into() / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (counts.len() as f64).ln()
}

pub fn max_share<T: Copy + Into<f64>>(counts: &[T]) -> f64 {
    let total: f64 = counts.iter().map(|&c| c.into()).sum();
    if total <= 0.0 {
        return 0.0;
    }
    counts.iter().map(|&c| c.into()).fold(0.0, f64::max) / total
}

/// Share of `truth` found in `served`.
pub fn recall(served: &[u64], truth: &[u64]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let served: std::collections::HashSet<u64> = served.iter().copied().collect();
    truth.iter().filter(|t| served.contains(t)).count() as f64 / truth.len() as f64
}

/// Events after `drift_at` until recall first returns to `level * pre`,
/// where `pre` is the last measurement before the drift. `curve` holds
/// `(events, recall)` pairs in order. `None` if it never recovers.
pub fn recovery_lag(curve: &[(u64, f64)], drift_at: u64, level: f64) -> Option<u64> {
    let pre = curve.iter().rev().find(|(t, _)| *t < drift_at)?.1;
    curve
        .iter()
        .filter(|(t, _)| *t > drift_at)
        .find(|(_, r)| *r >= level * pre)
        .map(|(t, _)| t - drift_at)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// One row per metric per seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, u64, String, f64)>,
}

impl Report {
    pub fn push(&mut self, run: &str, seed: u64, metric: &str, value: f64) {
        self.rows.push((run.to_string(), seed, metric.to_string(), value));
    }

    pub fn get(&self, run: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.0 == run && r.2 == metric)
            .map(|r| r.3)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "run,seed,metric,value")?;
        for (run, seed, metric, value) in &self.rows {
            writeln!(out, "{run},{seed},{metric},{value}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut keys: Vec<(&str, &str)> = self.rows.iter().map(|r| (r.0.as_str(), r.2.as_str())).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.iter()
            .map(|(run, metric)| {
                let v = self.get(run, metric);
                format!(
                    "{run:<24} {metric:<28} median {:>12.6} over {}",
                    median(&v),
                    v.len()
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}
