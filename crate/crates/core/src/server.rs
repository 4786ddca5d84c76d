//! Line-oriented JSON query server over a run directory.
//!
//! Each request is one JSON object per line:
//!
//! ```json
//! {"user": 17, "task": "finish", "probe": 32, "S": 50, "l": 4}
//! {"u": [0.1, 0.2, 0.3, 0.4]}
//! {"cmd": "reload"}
//! ```
//!
//! Replies are one line each: `{"items": [[id, score], ...], "snapshot": v}`
//! or `{"error": {"code": ..., "message": ...}}`. Queries in flight keep the
//! snapshot they started with when a reload swaps in a newer one.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use parking_lot::RwLock;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::ServeConfig;
use crate::run::{list_snapshots, users_path, UserVectors};
use crate::serving::{serve_query, Query, ServeError};
use crate::snapshot::PostingListSnapshot;

#[derive(Debug)]
pub struct Loaded {
    pub snapshot: PostingListSnapshot,
    pub users: UserVectors,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    cmd: Option<String>,
    user: Option<u64>,
    u: Option<Vec<f64>>,
    task: Option<String>,
    probe: Option<usize>,
    #[serde(rename = "S")]
    target_size: Option<usize>,
    l: Option<usize>,
    rescore: Option<usize>,
}

fn error(code: &str, message: impl std::fmt::Display) -> String {
    json!({"error": {"code": code, "message": message.to_string()}}).to_string()
}

fn serve_error(e: &ServeError) -> String {
    let code = match e {
        ServeError::NoSnapshot => "no_snapshot",
        ServeError::UnknownUser(_) => "unknown_user",
        ServeError::UnknownTask(_) => "unknown_task",
        ServeError::NoClusters => "no_clusters",
        ServeError::DimensionMismatch { .. } => "dimension_mismatch",
        ServeError::InvalidQuery(_) => "invalid_query",
    };
    error(code, e)
}

pub struct Server {
    dir: PathBuf,
    defaults: ServeConfig,
    current: RwLock<Option<Arc<Loaded>>>,
}

impl Server {
    /// Opens `dir` and loads its newest snapshot if there is one.
    pub fn open(dir: &Path, defaults: ServeConfig) -> Self {
        let s = Self {
            dir: dir.to_path_buf(),
            defaults,
            current: RwLock::new(None),
        };
        let _ = s.reload();
        s
    }

    pub fn version(&self) -> Option<u64> {
        self.current.read().as_ref().map(|l| l.snapshot.version)
    }

    /// Installs the newest valid snapshot on disk. Keeps the current one
    /// when nothing newer loads.
    pub fn reload(&self) -> Result<u64, String> {
        let snaps = list_snapshots(&self.dir).map_err(|e| e.to_string())?;
        let mut last_err = format!("no snapshots under {}", self.dir.display());
        for (v, path) in snaps.into_iter().rev() {
            if self.version().is_some_and(|cur| cur >= v) {
                break;
            }
            let loaded = PostingListSnapshot::load(&path)
                .map_err(|e| e.to_string())
                .and_then(|s| s.check_integrity().map(|_| s).map_err(|e| e.to_string()))
                .and_then(|snapshot| {
                    UserVectors::load(&users_path(&self.dir, v))
                        .map(|users| Loaded { snapshot, users })
                        .map_err(|e| e.to_string())
                });
            match loaded {
                Ok(l) => {
                    *self.current.write() = Some(Arc::new(l));
                    return Ok(v);
                }
                Err(e) => last_err = format!("snapshot {v}: {e}"),
            }
        }
        self.version().ok_or(last_err)
    }

    pub fn handle(&self, line: &str) -> String {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return error("bad_request", e),
        };
        if let Some(cmd) = req.cmd {
            return match cmd.as_str() {
                "reload" => match self.reload() {
                    Ok(v) => json!({"snapshot": v}).to_string(),
                    Err(e) => error("no_snapshot", e),
                },
                _ => error("bad_request", format!("unknown command {cmd:?}")),
            };
        }
        let Some(state) = self.current.read().clone() else {
            return serve_error(&ServeError::NoSnapshot);
        };
        let u = match (req.u, req.user) {
            (Some(u), None) => u,
            (None, Some(user)) => {
                let users = &state.users;
                let task = match &req.task {
                    Some(t) => users.task(t),
                    None => users.tasks.first(),
                };
                let Some(task) = task else {
                    return serve_error(&ServeError::UnknownTask(req.task.unwrap_or_default()));
                };
                match users.get(task, user) {
                    Some(u) => u.to_vec(),
                    None => return serve_error(&ServeError::UnknownUser(user)),
                }
            }
            _ => return error("bad_request", "give exactly one of \"user\" and \"u\""),
        };
        let d = &self.defaults;
        let q = Query {
            u,
            probe: req.probe.unwrap_or(d.probe),
            target_size: req.target_size.unwrap_or(d.target_size),
            chunk: req.l.unwrap_or(d.chunk),
            rescore: req.rescore.or(d.rescore),
        };
        match serve_query(&q, &state.snapshot) {
            Ok(r) => {
                let items: Vec<Value> = r.hits.iter().map(|h| json!([h.item, h.score])).collect();
                json!({"items": items, "snapshot": r.snapshot}).to_string()
            }
            Err(e) => serve_error(&e),
        }
    }

    /// Answers each input line with one output line until end of input.
    pub fn serve_lines<R: BufRead, W: Write>(&self, input: R, mut output: W) -> io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle(&line))?;
            output.flush()?;
        }
        Ok(())
    }

    /// Accepts connections forever, one thread each.
    pub fn serve_tcp(self: Arc<Self>, addr: impl ToSocketAddrs) -> io::Result<()> {
        let listener = TcpListener::bind(addr)?;
        for stream in listener.incoming() {
            let stream = stream?;
            let server = Arc::clone(&self);
            thread::spawn(move || {
                let reader = BufReader::new(stream.try_clone()?);
                server.serve_lines(reader, stream)
            });
        }
        Ok(())
    }
}
