//! Stream events and their JSON-lines encoding.
//!
//! One event per line:
//!
//! ```text
//! {"user":7,"item":42,"rewards":{"finish":1.0},"ts":1031,"stream":"impression"}
//! ```
//!
//! `ts` is the impression clock: the number of impressions emitted so far.
//! Candidate events carry the clock value of the latest impression and never
//! carry rewards.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Impression,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub user: u64,
    pub item: u64,
    #[serde(default)]
    pub rewards: BTreeMap<String, f64>,
    pub ts: u64,
    pub stream: StreamKind,
}

impl Event {
    pub fn impression(user: u64, item: u64, ts: u64, rewards: BTreeMap<String, f64>) -> Self {
        Self {
            user,
            item,
            rewards,
            ts,
            stream: StreamKind::Impression,
        }
    }

    pub fn candidate(item: u64, ts: u64) -> Self {
        Self {
            user: 0,
            item,
            rewards: BTreeMap::new(),
            ts,
            stream: StreamKind::Candidate,
        }
    }

    pub fn is_impression(&self) -> bool {
        self.stream == StreamKind::Impression
    }

    /// Reward for `task`, zero when absent.
    pub fn reward(&self, task: &str) -> f64 {
        self.rewards.get(task).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        if self.stream == StreamKind::Candidate && !self.rewards.is_empty() {
            return Err(EventError::CandidateWithRewards { item: self.item });
        }
        if let Some((task, h)) = self.rewards.iter().find(|(_, h)| !(**h >= 0.0)) {
            return Err(EventError::BadReward {
                task: task.clone(),
                value: *h,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("candidate event for item {item} carries rewards")]
    CandidateWithRewards { item: u64 },
    #[error("reward for task {task:?} must be a non-negative number, got {value}")]
    BadReward { task: String, value: f64 },
    #[error("line {line}: timestamp {ts} goes backwards (previous {prev})")]
    NonMonotone { line: usize, ts: u64, prev: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Streaming reader over a JSON-lines event source. Blank lines are skipped.
pub struct EventReader<R> {
    inner: R,
    line: usize,
    last_ts: Option<u64>,
    buf: String,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            last_ts: None,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<Event, EventError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let line = self.line;
            let parsed = serde_json::from_str::<Event>(text)
                .map_err(|source| EventError::Parse { line, source })
                .and_then(|ev| ev.validate().map(|_| ev));
            let ev = match parsed {
                Ok(ev) => ev,
                Err(e) => return Some(Err(e)),
            };
            if let Some(prev) = self.last_ts {
                if ev.ts < prev {
                    return Some(Err(EventError::NonMonotone {
                        line,
                        ts: ev.ts,
                        prev,
                    }));
                }
            }
            self.last_ts = Some(ev.ts);
            return Some(Ok(ev));
        }
    }
}

pub fn write_event<W: Write>(out: &mut W, ev: &Event) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, ev)?;
    out.write_all(b"\n")
}

pub fn write_events<'a, W, I>(out: &mut W, events: I) -> std::io::Result<usize>
where
    W: Write,
    I: IntoIterator<Item = &'a Event>,
{
    let mut n = 0;
    for ev in events {
        write_event(out, ev)?;
        n += 1;
    }
    Ok(n)
}
