//! Run directories: the files written by `gen`, `train` and `eval`.
//!
//! ```text
//! <out>/config.json                 effective configuration
//! <out>/items.csv, users.csv        synthetic corpus (gen)
//! <out>/events.jsonl                event stream (gen)
//! <out>/snapshots/snapshot-NNNNNN.bin
//! <out>/snapshots/users-NNNNNN.bin  user tower outputs at that version
//! <out>/checkpoint.bin              state at the last snapshot or interrupt
//! <out>/metrics.csv                 one row per training step
//! <out>/report.csv                  eval output
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::codec::{Decoder, Encoder};
use crate::config::RunConfig;
use crate::event::{write_event, EventReader};
use crate::oracle::quantized_topk;
use crate::pipeline::Pipeline;
use crate::serving::{serve_query, Query};
use crate::simulator::{
    brute_force_topk, eval_rng, generate_corpus, generate_events, max_share, normalized_entropy, recall,
    size_histogram, Report,
};
use crate::snapshot::{write_atomic, PostingListSnapshot, SnapshotError};
use crate::trainer::{StepMetrics, TowerModel};

pub const USERS_MAGIC: &[u8; 8] = b"SVQUSER\0";

pub fn snapshot_dir(out: &Path) -> PathBuf {
    out.join("snapshots")
}

pub fn snapshot_path(out: &Path, version: u64) -> PathBuf {
    snapshot_dir(out).join(format!("snapshot-{version:06}.bin"))
}

pub fn users_path(out: &Path, version: u64) -> PathBuf {
    snapshot_dir(out).join(format!("users-{version:06}.bin"))
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}

/// Snapshot files under `out`, oldest first.
pub fn list_snapshots(out: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let dir = snapshot_dir(out);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let v = name
            .strip_prefix("snapshot-")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|v| v.parse::<u64>().ok());
        if let Some(v) = v {
            found.push((v, path));
        }
    }
    found.sort();
    Ok(found)
}

/// User tower outputs for every trained user, one table per task.
#[derive(Debug, Clone, PartialEq)]
pub struct UserVectors {
    pub version: u64,
    pub dim: usize,
    pub tasks: Vec<TaskUsers>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskUsers {
    pub name: String,
    /// Sorted ascending.
    pub ids: Vec<u64>,
    pub values: Vec<f64>,
}

impl UserVectors {
    pub fn from_model(model: &TowerModel, version: u64) -> Self {
        let tasks = model
            .tasks()
            .iter()
            .enumerate()
            .map(|(t, name)| {
                let mut ids = model.user_table(t).ids().to_vec();
                ids.sort_unstable();
                let values = ids
                    .iter()
                    .flat_map(|&id| model.user_vector_by_id(t, id).expect("listed id"))
                    .collect();
                TaskUsers {
                    name: name.clone(),
                    ids,
                    values,
                }
            })
            .collect();
        Self {
            version,
            dim: model.dim(),
            tasks,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskUsers> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn get<'a>(&self, task: &'a TaskUsers, user: u64) -> Option<&'a [f64]> {
        let i = task.ids.binary_search(&user).ok()?;
        Some(&task.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(USERS_MAGIC);
        enc.u64(self.version);
        enc.u64(self.dim as u64);
        enc.u64(self.tasks.len() as u64);
        for t in &self.tasks {
            enc.str(&t.name);
            enc.u64(t.ids.len() as u64);
            enc.u64s(&t.ids);
            enc.f64s(&t.values);
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut dec = Decoder::new(bytes);
        if dec.take(USERS_MAGIC.len()).ok() != Some(&USERS_MAGIC[..]) {
            return Err(SnapshotError::CorruptHeader("bad magic".into()));
        }
        let version = dec.u64()?;
        let dim = dec.u64()?;
        let n = dec.u64()?;
        let mut tasks = Vec::new();
        for _ in 0..n {
            let name = dec.str()?;
            let len = dec.u64()?;
            let ids = dec.u64s(len)?;
            let values = dec.f64s(len.saturating_mul(dim))?;
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SnapshotError::Inconsistent("user ids not sorted".into()));
            }
            tasks.push(TaskUsers { name, ids, values });
        }
        if dec.remaining() > 0 {
            return Err(SnapshotError::TrailingBytes(dec.remaining()));
        }
        Ok(Self {
            version,
            dim: dim as usize,
            tasks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        write_atomic(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::decode(&fs::read(path)?)
    }
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_atomic(&cfg.out.join("config.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub items: usize,
    pub users: usize,
    pub events: usize,
}

/// Writes the corpus and its event stream under `cfg.out`.
pub fn gen(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    write_config(cfg)?;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    let dim = corpus.dim();

    let mut rank = vec![0usize; corpus.items()];
    for (r, &id) in corpus.popularity.iter().enumerate() {
        rank[id as usize] = r;
    }
    let mut w = BufWriter::new(File::create(cfg.out.join("items.csv"))?);
    let header: Vec<String> = (0..dim).map(|d| format!("v{d}")).collect();
    writeln!(w, "id,group,popularity_rank,{}", header.join(","))?;
    for id in 0..corpus.items() {
        let v = corpus.item_vector(id as u64, 0);
        writeln!(w, "{id},{},{},{}", corpus.item_group[id], rank[id], join(&v))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(cfg.out.join("users.csv"))?);
    let header: Vec<String> = (0..dim).map(|d| format!("u{d}")).collect();
    writeln!(w, "id,group_a,group_b,{}", header.join(","))?;
    for id in 0..corpus.users() {
        let (a, b) = corpus.user_groups[id];
        writeln!(w, "{id},{a},{b},{}", join(corpus.user_vector(id as u64)))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(cfg.events_path())?);
    let mut events = 0;
    for ev in generate_events(&corpus, &cfg.stream, cfg.seed) {
        write_event(&mut w, &ev)?;
        events += 1;
    }
    w.flush()?;
    Ok(GenSummary {
        items: corpus.items(),
        users: corpus.users(),
        events,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop after consuming this many events in this invocation and leave
    /// a checkpoint behind.
    pub max_events: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub events: u64,
    pub impressions: u64,
    pub snapshots: Vec<u64>,
    pub interrupted: bool,
}

const METRICS_HEADER: &str =
    "impressions,events,loss_aux,loss_ind,loss_sim,loss_total,user_grad_norm,item_grad_norm,rows,positives,seeded";

struct Artifacts<'a> {
    out: &'a Path,
    written: Vec<u64>,
}

impl Artifacts<'_> {
    fn publish(&mut self, p: &mut Pipeline) -> Result<()> {
        let snap = p.snapshot();
        snap.save(&snapshot_path(self.out, snap.version))?;
        UserVectors::from_model(p.trainer().model(), snap.version)
            .save(&users_path(self.out, snap.version))?;
        p.save_checkpoint(&checkpoint_path(self.out))?;
        self.written.push(snap.version);
        Ok(())
    }
}

fn metrics_row(w: &mut impl Write, p: &Pipeline, m: &StepMetrics) -> io::Result<()> {
    let l = &m.losses;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{}",
        p.impressions(),
        p.events_seen(),
        l.aux,
        l.ind,
        l.sim,
        l.total,
        m.user_grad_norm,
        m.item_grad_norm,
        m.rows,
        m.positives,
        m.seeded
    )
}

/// Trains over the event file, publishing a snapshot at start, at every
/// cadence boundary and at the end.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    fs::create_dir_all(snapshot_dir(out))?;
    let ckpt = checkpoint_path(out);
    let mut art = Artifacts {
        out,
        written: Vec::new(),
    };

    let (mut p, metrics) = if opts.resume {
        let p =
            Pipeline::load_checkpoint(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        if p.config() != &cfg.pipeline() {
            bail!("checkpoint was written with a different training configuration");
        }
        let m = OpenOptions::new().append(true).open(out.join("metrics.csv"))?;
        (p, m)
    } else {
        write_config(cfg)?;
        let mut p = Pipeline::new(cfg.pipeline())?;
        let mut m = File::create(out.join("metrics.csv"))?;
        writeln!(m, "{METRICS_HEADER}")?;
        art.publish(&mut p)?;
        (p, m)
    };
    let mut metrics = BufWriter::new(metrics);

    let path = cfg.events_path();
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let skip = p.events_seen() as usize;
    let mut interrupted = false;
    for (consumed, ev) in EventReader::new(BufReader::new(file)).skip(skip).enumerate() {
        if opts.max_events.is_some_and(|m| consumed as u64 >= m) {
            interrupted = true;
            break;
        }
        let ev = ev.with_context(|| format!("reading {}", path.display()))?;
        if let Some(m) = p.feed(ev)? {
            metrics_row(&mut metrics, &p, &m)?;
            if p.at_snapshot_boundary() {
                metrics.flush()?;
                art.publish(&mut p)?;
            }
        }
    }

    if interrupted {
        p.save_checkpoint(&ckpt)?;
    } else {
        if let Some(m) = p.flush()? {
            metrics_row(&mut metrics, &p, &m)?;
        }
        let c = cfg.snapshot_cadence;
        let covered = if c == 0 {
            p.impressions() == 0
        } else {
            p.impressions().is_multiple_of(c)
        };
        if !covered {
            art.publish(&mut p)?;
        } else {
            p.save_checkpoint(&ckpt)?;
        }
    }
    metrics.flush()?;
    Ok(TrainSummary {
        events: p.events_seen(),
        impressions: p.impressions(),
        snapshots: art.written,
        interrupted,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutcome {
    pub report: Report,
    pub failures: Vec<String>,
}

impl EvalOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every snapshot in a run directory and measures the latest one.
pub fn eval_artifacts(cfg: &RunConfig) -> Result<EvalOutcome> {
    let out = cfg.out.as_path();
    let snaps = list_snapshots(out)?;
    if snaps.is_empty() {
        bail!("no snapshots under {}", snapshot_dir(out).display());
    }
    let mut res = EvalOutcome::default();
    let mut latest = None;
    for (v, path) in &snaps {
        let run = format!("snapshot-{v:06}");
        let bytes = fs::read(path)?;
        let ok = match PostingListSnapshot::decode(&bytes) {
            Err(e) => Err(format!("{run}: {e}")),
            Ok(s) => match s.check_integrity() {
                Err(e) => Err(format!("{run}: {e}")),
                Ok(()) if s.encode() != bytes => Err(format!("{run}: re-encoding changes the bytes")),
                Ok(()) if s.version != *v => Err(format!("{run}: file holds version {}", s.version)),
                Ok(()) => {
                    latest = Some(s);
                    Ok(())
                }
            },
        };
        res.report
            .push(&run, cfg.seed, "integrity", ok.is_ok() as u8 as f64);
        if let Err(e) = ok {
            res.failures.push(e);
        }
    }
    let Some(snap) = latest else {
        return Ok(res);
    };
    let run = format!("snapshot-{:06}", snap.version);
    let push = |r: &mut EvalOutcome, metric: &str, value: f64| r.report.push(&run, cfg.seed, metric, value);

    let sizes = snap.cluster_sizes();
    let edges = &cfg.eval.size_buckets;
    for (i, n) in size_histogram(&sizes, edges).iter().enumerate() {
        push(&mut res, &format!("size_bucket_{}", edges[i]), *n as f64);
    }
    push(&mut res, "items", snap.len() as f64);
    push(
        &mut res,
        "nonempty_clusters",
        sizes.iter().filter(|&&s| s > 0).count() as f64,
    );
    let sizes_f: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    push(&mut res, "size_entropy", normalized_entropy(&sizes_f));
    push(&mut res, "size_max_share", max_share(&sizes_f));
    if let Ok(p) = Pipeline::load_checkpoint(&checkpoint_path(out)) {
        let imps: Vec<f64> = p
            .engine()
            .cluster_impressions()
            .iter()
            .map(|&c| c as f64)
            .collect();
        push(&mut res, "impression_entropy", normalized_entropy(&imps));
        push(&mut res, "impression_max_share", max_share(&imps));
    }

    let users_file = users_path(out, snap.version);
    let users =
        UserVectors::load(&users_file).with_context(|| format!("loading {}", users_file.display()))?;
    let Some(task) = users.tasks.first() else {
        return Ok(res);
    };
    let mut ids = task.ids.clone();
    let mut rng = eval_rng(cfg.seed);
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
    ids.truncate(cfg.eval.users);
    ids.sort_unstable();

    let s = &cfg.serve;
    let (mut served_sum, mut exact_sum, mut n) = (0.0, 0.0, 0);
    for &id in &ids {
        let u = users.get(task, id).expect("listed user").to_vec();
        let mut q = Query::new(u.clone());
        q.probe = s.probe;
        q.target_size = s.target_size;
        q.chunk = s.chunk;
        q.rescore = s.rescore;
        let served = serve_query(&q, &snap)?.items();
        let truth: Vec<u64> = brute_force_topk(
            &u,
            (0..snap.len()).map(|i| (snap.items[i], snap.embedding(i), snap.biases[i])),
            s.target_size,
        )
        .iter()
        .map(|x| x.0)
        .collect();
        served_sum += recall(&served, &truth);

        q.probe = snap.k();
        q.chunk = 1;
        q.rescore = None;
        let full = serve_query(&q, &snap)?.items();
        let oracle: Vec<u64> = quantized_topk(&u, &snap, s.target_size)
            .iter()
            .map(|x| x.0)
            .collect();
        exact_sum += recall(&full, &oracle);
        if full != oracle {
            res.failures.push(format!(
                "user {id}: full-probe serving differs from the quantized brute force"
            ));
        }
        n += 1;
    }
    if n > 0 {
        push(&mut res, "eval_users", n as f64);
        push(&mut res, "recall_served_vs_exact", served_sum / n as f64);
        push(&mut res, "recall_full_probe_vs_quantized", exact_sum / n as f64);
    }
    Ok(res)
}

/// Number of lines in an event file.
pub fn count_events(path: &Path) -> Result<u64> {
    let f = BufReader::new(File::open(path)?);
    Ok(f.lines().count() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        let mut c = RunConfig {
            seed: 3,
            out: out.to_path_buf(),
            snapshot_cadence: 300,
            ..Default::default()
        };
        c.corpus.items = 400;
        c.corpus.users = 30;
        c.corpus.groups = 5;
        c.corpus.dim = 4;
        c.train.dim = 4;
        c.train.k = 16;
        c.train.batch_size = 64;
        c.stream.impressions = 1000;
        c.serve.probe = 4;
        c.serve.target_size = 20;
        c.serve.chunk = 2;
        c.eval.users = 10;
        c
    }

    #[test]
    fn user_vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        gen(&cfg).unwrap();
        let s = train(&cfg, &TrainOptions::default()).unwrap();
        let v = *s.snapshots.last().unwrap();
        let u = UserVectors::load(&users_path(dir.path(), v)).unwrap();
        assert_eq!(u.version, v);
        assert_eq!(UserVectors::decode(&u.encode()).unwrap(), u);
        assert!(!u.tasks[0].ids.is_empty());
    }

    #[test]
    fn train_writes_one_snapshot_per_interval_plus_start() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let g = gen(&cfg).unwrap();
        assert_eq!(count_events(&cfg.events_path()).unwrap(), g.events as u64);
        let s = train(&cfg, &TrainOptions::default()).unwrap();
        // 1000 impressions at cadence 300: start, 300, 600, 900, end
        assert_eq!(s.snapshots.len(), 5);
        assert_eq!(list_snapshots(dir.path()).unwrap().len(), 5);
        let e = eval_artifacts(&cfg).unwrap();
        assert!(e.passed(), "{:?}", e.failures);
        assert_eq!(
            e.report.get(
                &format!("snapshot-{:06}", s.snapshots[4]),
                "recall_full_probe_vs_quantized"
            ),
            vec![1.0]
        );
    }
}
