//! Full pipeline state for resuming a run.
//!
//! Layout, little-endian:
//!
//! ```text
//! header    magic "SVQCKPT\0" | format u32 | config (JSON string)
//! stream    events seen u64 | impressions u64 | last ts u64 | buffered events (JSON strings)
//! engine    next version u64 | stats u64 x 4 | disturbance u32 | codebook section
//!           cluster impressions u64 x K | records
//! model     user tables x tasks | item table | item biases | affine heads
//! ```
//!
//! Strings are a u64 byte length followed by UTF-8 bytes. Absent cluster ids
//! and last-seen clocks are stored as `u64::MAX`.

use std::fs;
use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::engine::{AssignmentEngine, EngineStats, ItemRecord};
use crate::event::Event;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::snapshot::{decode_codebook, encode_codebook, write_atomic, SnapshotError};
use crate::trainer::{Affine, EmbeddingTable, TowerModel, Trainer};

pub const MAGIC: &[u8; 8] = b"SVQCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const NONE: u64 = u64::MAX;

fn inconsistent(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Inconsistent(msg.into())
}

impl Pipeline {
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(MAGIC);
        enc.u32(FORMAT_VERSION);
        enc.str(&serde_json::to_string(&self.config).expect("config serializes"));

        enc.u64(self.events_seen);
        enc.u64(self.impressions);
        enc.u64(self.last_ts);
        enc.u64(self.buffer.len() as u64);
        for ev in &self.buffer {
            enc.str(&serde_json::to_string(ev).expect("event serializes"));
        }

        let engine = &self.engine;
        let st = engine.stats();
        enc.u64(engine.next_version());
        enc.u64s(&[
            st.impressions,
            st.candidates,
            st.candidates_skipped,
            st.reassignments,
        ]);
        enc.u32(engine.codebook().disturbance_enabled() as u32);
        encode_codebook(&mut enc, engine.codebook());
        enc.u64s(engine.cluster_impressions());
        enc.u64(engine.records().len() as u64);
        for r in engine.records() {
            enc.u64(r.item_id);
            enc.f64(r.v_bias);
            enc.u64(r.cluster_id.map_or(NONE, |c| c as u64));
            enc.u64(r.last_seen.unwrap_or(NONE));
            enc.f64s(&r.v_emb);
        }

        let m = &self.trainer.model;
        for t in &m.users {
            encode_table(&mut enc, t);
        }
        encode_table(&mut enc, &m.items);
        enc.f64s(&m.item_bias);
        match (&m.user_affine, &m.item_affine) {
            (Some(us), Some(it)) => {
                enc.u32(1);
                for a in us.iter().chain(std::iter::once(it)) {
                    enc.f64s(&a.weight);
                    enc.f64s(&a.bias);
                }
            }
            _ => enc.u32(0),
        }
        enc.finish()
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut dec = Decoder::new(bytes);
        let magic = dec
            .take(MAGIC.len())
            .map_err(|_| SnapshotError::CorruptHeader("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(SnapshotError::CorruptHeader("bad magic".into()));
        }
        let format = dec.u32()?;
        if format != FORMAT_VERSION {
            return Err(SnapshotError::VersionMismatch {
                found: format,
                expected: FORMAT_VERSION,
            });
        }
        let config: PipelineConfig =
            serde_json::from_str(&dec.str()?).map_err(|e| SnapshotError::CorruptHeader(e.to_string()))?;
        let mut p = Pipeline::new(config).map_err(|e| inconsistent(e.to_string()))?;
        let dim = p.config.codebook.dim;

        p.events_seen = dec.u64()?;
        p.impressions = dec.u64()?;
        p.last_ts = dec.u64()?;
        let n_buf = dec.u64()?;
        for _ in 0..n_buf {
            let ev: Event = serde_json::from_str(&dec.str()?).map_err(|e| inconsistent(e.to_string()))?;
            p.buffer.push(ev);
        }

        let next_version = dec.u64()?;
        let st = dec.u64s(4)?;
        let stats = EngineStats {
            impressions: st[0],
            candidates: st[1],
            candidates_skipped: st[2],
            reassignments: st[3],
        };
        let disturbance = dec.u32()? != 0;
        let codebook = decode_codebook(&mut dec)?.with_disturbance(disturbance);
        if codebook.params() != &p.config.codebook {
            return Err(inconsistent("codebook parameters differ from the config"));
        }
        let k = codebook.k();
        let cluster_impressions = dec.u64s(k as u64)?;
        let n = dec.u64()?;
        let n = dec.ensure(n, 32 + 8 * dim)?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let item_id = dec.u64()?;
            let v_bias = dec.f64()?;
            let cluster = dec.u64()?;
            let last = dec.u64()?;
            let v_emb = dec.f64s(dim as u64)?;
            if cluster != NONE && cluster >= k as u64 {
                return Err(inconsistent(format!(
                    "item {item_id} in cluster {cluster} of {k}"
                )));
            }
            records.push(ItemRecord {
                item_id,
                v_emb,
                v_bias,
                cluster_id: (cluster != NONE).then_some(cluster as usize),
                last_seen: (last != NONE).then_some(last),
            });
        }
        let engine_cfg = p.engine.config().clone();
        p.engine = AssignmentEngine::from_parts(
            engine_cfg,
            codebook,
            records,
            cluster_impressions,
            stats,
            next_version,
        );

        let tasks = p.config.trainer.tasks.clone();
        let mut users = Vec::with_capacity(tasks.len());
        for _ in 0..tasks.len() {
            users.push(decode_table(&mut dec, dim)?);
        }
        let items = decode_table(&mut dec, dim)?;
        let item_bias = dec.f64s(items.len() as u64)?;
        let (user_affine, item_affine) = match dec.u32()? {
            0 => (None, None),
            _ => {
                let mut heads = Vec::with_capacity(tasks.len() + 1);
                for _ in 0..=tasks.len() {
                    heads.push(Affine {
                        dim,
                        weight: dec.f64s((dim * dim) as u64)?,
                        bias: dec.f64s(dim as u64)?,
                    });
                }
                let item = heads.pop();
                (Some(heads), item)
            }
        };
        if user_affine.is_some() != p.config.trainer.affine {
            return Err(inconsistent("affine heads disagree with the config"));
        }
        if dec.remaining() > 0 {
            return Err(SnapshotError::TrailingBytes(dec.remaining()));
        }
        let model = TowerModel {
            dim,
            tasks,
            users,
            items,
            item_bias,
            user_affine,
            item_affine,
        };
        p.trainer = Trainer {
            config: p.config.trainer.clone(),
            model,
        };
        Ok(p)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), SnapshotError> {
        write_atomic(path, &self.encode_checkpoint())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, SnapshotError> {
        Self::decode_checkpoint(&fs::read(path)?)
    }
}

fn encode_table(enc: &mut Encoder, t: &EmbeddingTable) {
    let (seed, salt, scale) = t.seed_parts();
    enc.u64(seed);
    enc.u64(salt);
    enc.f64(scale);
    enc.u64(t.len() as u64);
    enc.u64s(t.ids());
    enc.f64s(t.values());
}

fn decode_table(dec: &mut Decoder<'_>, dim: usize) -> Result<EmbeddingTable, SnapshotError> {
    let seed = dec.u64()?;
    let salt = dec.u64()?;
    let scale = dec.f64()?;
    let n = dec.u64()?;
    let ids = dec.u64s(n)?;
    let values = dec.f64s(n * dim as u64)?;
    Ok(EmbeddingTable::from_parts(dim, (seed, salt, scale), ids, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_corpus, generate_events, CorpusConfig, StreamConfig};

    fn run(events: &[Event], cfg: &PipelineConfig) -> Pipeline {
        let mut p = Pipeline::new(cfg.clone()).unwrap();
        for e in events {
            p.feed(e.clone()).unwrap();
        }
        p
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let corpus = generate_corpus(
            &CorpusConfig {
                items: 300,
                users: 30,
                groups: 6,
                dim: 4,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let sc = StreamConfig {
            impressions: 2000,
            stay_task: true,
            ..Default::default()
        };
        let events: Vec<Event> = generate_events(&corpus, &sc, 5).collect();
        let mut cfg = PipelineConfig::default();
        cfg.codebook.k = 16;
        cfg.codebook.dim = 4;
        cfg.codebook.eta = vec![1.0, 0.5];
        cfg.trainer.tasks = vec!["finish".into(), "stay".into()];
        cfg.trainer.batch_size = 32;
        cfg.trainer.affine = true;
        cfg.snapshot_cadence = 500;

        let full = run(&events, &cfg);
        // cut mid-batch so the buffer is part of the state
        let cut = 1111;
        let half = run(&events[..cut], &cfg);
        let mut resumed = Pipeline::decode_checkpoint(&half.encode_checkpoint()).unwrap();
        let (a, b) = (resumed.encode_checkpoint(), half.encode_checkpoint());
        let first = a.iter().zip(&b).position(|(x, y)| x != y);
        assert_eq!((first, a.len()), (None, b.len()));
        for e in &events[cut..] {
            resumed.feed(e.clone()).unwrap();
        }
        assert_eq!(resumed.encode_checkpoint(), full.encode_checkpoint());
        assert_eq!(resumed.engine().peek_snapshot(), full.engine().peek_snapshot());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let bytes = p.encode_checkpoint();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Pipeline::decode_checkpoint(&bad),
            Err(SnapshotError::CorruptHeader(_))
        ));
        assert!(matches!(
            Pipeline::decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(SnapshotError::Truncated { .. })
        ));
    }
}
