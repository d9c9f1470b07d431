//! Checkpoint container: one self-describing binary file per artifact.
//!
//! Layout: `PLKT` magic, format version, a JSON header (kind, model config,
//! vocabulary, free-form metadata, blob directory), then raw little-endian
//! f64 blobs in directory order, and a trailing SHA-256 of everything before
//! it.  Corruption anywhere — magic, version, length, digest — surfaces as a
//! format error instead of silently wrong weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterStack, PlacementPolicy};
use crate::error::{Error, Result};
use crate::model::{BaseModel, TransformerConfig};
use crate::selector::EmbeddingMemory;
use crate::tensor::{Adam, Tensor};
use crate::train::Regime;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"PLKT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: TransformerConfig,
    vocab: Vec<String>,
    meta: BTreeMap<String, String>,
    /// (name, rows, cols) in blob stream order.
    blobs: Vec<(String, usize, usize)>,
}

/// In-memory form of a checkpoint file.
pub struct Container {
    pub kind: String,
    pub config: TransformerConfig,
    pub vocab: Vocab,
    pub meta: BTreeMap<String, String>,
    pub blobs: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            meta: self.meta.clone(),
            blobs: self.blobs.iter().map(|(n, t)| (n.clone(), t.rows, t.cols)).collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("serializing header: {}", e)))?;

        let mut buf = Vec::with_capacity(
            16 + header_json.len() + self.blobs.values().map(|t| t.len() * 8).sum::<usize>() + 32,
        );
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for t in self.blobs.values() {
            for &x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        std::fs::write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(format!("checkpoint {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let fail = |msg: &str| Error::Format(format!("{}: {}", path.display(), msg));

        if bytes.len() < 16 + 32 {
            return Err(fail("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch (corrupt file)"));
        }
        if &body[..4] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("format version {} unsupported", version)));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if body.len() < 16 + header_len {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + header_len])
            .map_err(|e| fail(&format!("bad header: {}", e)))?;

        let mut offset = 16 + header_len;
        let mut blobs = BTreeMap::new();
        for (name, rows, cols) in &header.blobs {
            let n = rows * cols * 8;
            if body.len() < offset + n {
                return Err(fail(&format!("blob '{}' truncated", name)));
            }
            let data: Vec<f64> = body[offset..offset + n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.insert(name.clone(), Tensor::from_vec(*rows, *cols, data)?);
            offset += n;
        }
        if offset != body.len() {
            return Err(fail("trailing bytes after blobs"));
        }

        let mut vocab = Vocab::from_tokens(header.vocab)?;
        vocab.rebuild_index();
        Ok(Container {
            kind: header.kind,
            config: header.config,
            vocab,
            meta: header.meta,
            blobs,
        })
    }
}

// ── base-model checkpoints ──────────────────────────────────────────────────

/// Everything a capped pretraining run must persist so a later process can
/// continue it exactly: optimizer slots, the loop-end weights (the stored
/// model weights are the best epoch's, which is generally a different
/// snapshot), and the best/stall bookkeeping.
pub struct TrainState {
    pub adam_t: u64,
    pub epochs_done: usize,
    pub slots: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub last_params: BTreeMap<String, Tensor>,
    pub best_em: f64,
    pub best_loss: f64,
    pub stall_best_loss: f64,
    pub stalled: usize,
}

impl TrainState {
    /// None when nothing trained yet — there is no state worth saving.
    pub fn capture(adam: &Adam, out: &crate::train::PretrainOutcome) -> Option<Self> {
        let (best_em, best_loss, _) = out.cursor.best.as_ref()?;
        Some(TrainState {
            adam_t: adam.t(),
            epochs_done: out.cursor.epochs_done,
            slots: adam.export_state(),
            last_params: out.last_params.clone(),
            best_em: *best_em,
            best_loss: *best_loss,
            stall_best_loss: out.cursor.stall_best_loss,
            stalled: out.cursor.stalled,
        })
    }

    pub fn restore_into(&self, adam: &mut Adam) -> Result<()> {
        adam.set_t(self.adam_t);
        for (name, m, v) in &self.slots {
            adam.restore_slot(name, m.clone(), v.clone())?;
        }
        Ok(())
    }

    /// Rebuild the training-loop cursor; `best_params` are the checkpoint's
    /// stored model weights.
    pub fn to_cursor(&self, best_params: BTreeMap<String, Tensor>) -> crate::train::PretrainCursor {
        crate::train::PretrainCursor {
            epochs_done: self.epochs_done,
            best: Some((self.best_em, self.best_loss, best_params)),
            stall_best_loss: self.stall_best_loss,
            stalled: self.stalled,
        }
    }
}

pub fn save_base(
    path: &Path,
    model: &BaseModel,
    vocab: &Vocab,
    mut meta: BTreeMap<String, String>,
    state: Option<&TrainState>,
) -> Result<()> {
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    model.for_each_param(|name, t| {
        blobs.insert(format!("model.{}", name), t.clone());
    });
    if let Some(s) = state {
        meta.insert("adam.t".into(), s.adam_t.to_string());
        meta.insert("epochs_done".into(), s.epochs_done.to_string());
        // bit-exact float persistence; a decimal detour would break resume
        meta.insert("best.em".into(), s.best_em.to_bits().to_string());
        meta.insert("best.loss".into(), s.best_loss.to_bits().to_string());
        meta.insert("stall.best_loss".into(), s.stall_best_loss.to_bits().to_string());
        meta.insert("stall.count".into(), s.stalled.to_string());
        for (name, m, v) in &s.slots {
            blobs.insert(format!("adam.m.{}", name), Tensor::from_vec(1, m.len(), m.clone())?);
            blobs.insert(format!("adam.v.{}", name), Tensor::from_vec(1, v.len(), v.clone())?);
        }
        for (name, t) in &s.last_params {
            blobs.insert(format!("last.{}", name), t.clone());
        }
    }
    meta.insert("weights_checksum".into(), model.checksum());
    Container {
        kind: "base".into(),
        config: model.cfg.clone(),
        vocab: vocab.clone(),
        meta,
        blobs,
    }
    .save(path)
}

pub struct LoadedBase {
    pub model: BaseModel,
    pub vocab: Vocab,
    pub meta: BTreeMap<String, String>,
    pub state: Option<TrainState>,
}

pub fn load_base(path: &Path) -> Result<LoadedBase> {
    let c = Container::load(path)?;
    if c.kind != "base" {
        return Err(Error::Format(format!(
            "{}: expected a base checkpoint, found '{}'",
            path.display(),
            c.kind
        )));
    }
    let mut params = BTreeMap::new();
    let mut last_params = BTreeMap::new();
    let mut slots: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for (name, t) in c.blobs {
        if let Some(p) = name.strip_prefix("model.") {
            params.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("last.") {
            last_params.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            slots.entry(p.to_string()).or_default().0 = Some(t.data);
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            slots.entry(p.to_string()).or_default().1 = Some(t.data);
        } else {
            return Err(Error::Format(format!("unexpected blob '{}'", name)));
        }
    }
    let model = BaseModel::from_parts(c.config, params)?;
    if let Some(want) = c.meta.get("weights_checksum") {
        let got = model.checksum();
        if &got != want {
            return Err(Error::Format(format!(
                "{}: weight checksum drifted ({} vs {})",
                path.display(),
                got,
                want
            )));
        }
    }
    let state = if c.meta.contains_key("adam.t") {
        let fail = |k: &str| Error::Format(format!("bad resume metadata '{}'", k));
        let meta_u64 = |k: &str| -> Result<u64> {
            c.meta.get(k).ok_or_else(|| fail(k))?.parse().map_err(|_| fail(k))
        };
        let meta_f64 = |k: &str| -> Result<f64> { Ok(f64::from_bits(meta_u64(k)?)) };
        let mut out = Vec::new();
        for (name, (m, v)) in slots {
            match (m, v) {
                (Some(m), Some(v)) => out.push((name, m, v)),
                _ => {
                    return Err(Error::Format(format!(
                        "optimizer slot '{}' is half-missing",
                        name
                    )))
                }
            }
        }
        Some(TrainState {
            adam_t: meta_u64("adam.t")?,
            epochs_done: meta_u64("epochs_done")? as usize,
            slots: out,
            last_params,
            best_em: meta_f64("best.em")?,
            best_loss: meta_f64("best.loss")?,
            stall_best_loss: meta_f64("stall.best_loss")?,
            stalled: meta_u64("stall.count")? as usize,
        })
    } else {
        None
    };
    Ok(LoadedBase { model, vocab: c.vocab, meta: c.meta, state })
}

// ── update checkpoints ──────────────────────────────────────────────────────

/// Everything an update run leaves behind.  Full-model regimes store new
/// weights; adapter regimes store the stack and the per-phase memories.
pub struct UpdateCheckpoint {
    pub regime: Regime,
    pub base_checksum: String,
    /// Gate threshold chosen for this artifact (meaningful when gated).
    pub delta: f64,
    pub full_model: Option<BaseModel>,
    pub policies: Vec<PlacementPolicy>,
    pub stack: Option<AdapterStack>,
    pub memories: Vec<EmbeddingMemory>,
}

pub fn save_update(
    path: &Path,
    u: &UpdateCheckpoint,
    cfg: &TransformerConfig,
    vocab: &Vocab,
) -> Result<()> {
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();

    meta.insert(
        "regime".into(),
        serde_json::to_string(&u.regime).map_err(|e| Error::Format(e.to_string()))?,
    );
    meta.insert("base_checksum".into(), u.base_checksum.clone());
    meta.insert("delta".into(), format!("{:e}", u.delta));
    meta.insert(
        "policies".into(),
        serde_json::to_string(&u.policies).map_err(|e| Error::Format(e.to_string()))?,
    );

    match (&u.full_model, &u.stack) {
        (Some(m), None) => {
            m.for_each_param(|name, t| {
                blobs.insert(format!("model.{}", name), t.clone());
            });
        }
        (None, Some(s)) => {
            s.for_each_param(|name, t| {
                blobs.insert(name.to_string(), t.clone());
            });
        }
        _ => {
            return Err(Error::Contract(
                "update checkpoint needs exactly one of full model or stack".into(),
            ))
        }
    }

    meta.insert("n_memories".into(), u.memories.len().to_string());
    for (k, m) in u.memories.iter().enumerate() {
        let mut raw = Tensor::zeros(m.len(), m.dim);
        for r in 0..m.len() {
            raw.data[r * m.dim..(r + 1) * m.dim].copy_from_slice(m.raw_row(r));
        }
        blobs.insert(format!("memory{}.raw", k), raw);
        let answers: Vec<&str> = (0..m.len()).map(|r| m.answer(r)).collect();
        meta.insert(
            format!("memory{}.answers", k),
            serde_json::to_string(&answers).map_err(|e| Error::Format(e.to_string()))?,
        );
        meta.insert(format!("memory{}.phase", k), m.phase.to_string());
    }

    Container { kind: "update".into(), config: cfg.clone(), vocab: vocab.clone(), meta, blobs }
        .save(path)
}

pub fn load_update(path: &Path, cfg: &TransformerConfig) -> Result<UpdateCheckpoint> {
    let c = Container::load(path)?;
    if c.kind != "update" {
        return Err(Error::Format(format!(
            "{}: expected an update checkpoint, found '{}'",
            path.display(),
            c.kind
        )));
    }
    let fail = |msg: String| Error::Format(format!("{}: {}", path.display(), msg));
    let meta_get = |key: &str| {
        c.meta
            .get(key)
            .ok_or_else(|| fail(format!("metadata '{}' missing", key)))
    };

    let regime: Regime = serde_json::from_str(meta_get("regime")?)
        .map_err(|e| fail(format!("bad regime: {}", e)))?;
    let base_checksum = meta_get("base_checksum")?.clone();
    let delta: f64 = meta_get("delta")?
        .parse()
        .map_err(|_| fail("bad delta".into()))?;
    let policies: Vec<PlacementPolicy> = serde_json::from_str(meta_get("policies")?)
        .map_err(|e| fail(format!("bad policies: {}", e)))?;

    let model_blobs: BTreeMap<String, Tensor> = c
        .blobs
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("model.").map(|s| (s.to_string(), t.clone())))
        .collect();
    let (full_model, stack) = if !model_blobs.is_empty() {
        (Some(BaseModel::from_parts(cfg.clone(), model_blobs)?), None)
    } else {
        let mut stack = AdapterStack::new();
        for p in &policies {
            stack.new_phase(cfg, p, 0)?;
        }
        let mut errors: Vec<String> = Vec::new();
        let mut seen = 0usize;
        stack.for_each_param_mut(|name, t| match c.blobs.get(name) {
            Some(b) if b.rows == t.rows && b.cols == t.cols => {
                *t = b.clone();
                seen += 1;
            }
            Some(b) => errors.push(format!(
                "blob '{}' is {}x{}, stack wants {}x{}",
                name, b.rows, b.cols, t.rows, t.cols
            )),
            None => errors.push(format!("blob '{}' missing", name)),
        });
        if let Some(e) = errors.first() {
            return Err(fail(e.clone()));
        }
        let stored = c.blobs.keys().filter(|n| n.starts_with("phase")).count();
        if stored != seen {
            return Err(fail(format!("{} stray adapter blobs", stored - seen)));
        }
        (None, Some(stack))
    };

    let n_memories: usize = meta_get("n_memories")?
        .parse()
        .map_err(|_| fail("bad n_memories".into()))?;
    let mut memories = Vec::with_capacity(n_memories);
    for k in 0..n_memories {
        let raw = c
            .blobs
            .get(&format!("memory{}.raw", k))
            .ok_or_else(|| fail(format!("memory {} rows missing", k)))?;
        let answers: Vec<String> = serde_json::from_str(meta_get(&format!("memory{}.answers", k))?)
            .map_err(|e| fail(format!("bad answers: {}", e)))?;
        let phase: usize = meta_get(&format!("memory{}.phase", k))?
            .parse()
            .map_err(|_| fail("bad memory phase".into()))?;
        let rows: Vec<Vec<f64>> =
            (0..raw.rows).map(|r| raw.row(r).to_vec()).collect();
        memories.push(EmbeddingMemory::from_rows(phase, rows, answers)?);
    }

    Ok(UpdateCheckpoint {
        regime,
        base_checksum,
        delta,
        full_model,
        policies,
        stack,
        memories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterKind, Placement};
    use crate::model::TransformerConfig;
    use crate::selector::build_memory;
    use crate::world::{generate_world, universe_vocab, SplitSpec};

    fn small_model() -> (BaseModel, Vocab) {
        let vocab = universe_vocab();
        let mut cfg = TransformerConfig::toy(vocab.len());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.n_heads = 2;
        (BaseModel::init(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn base_checkpoint_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let (model, vocab) = small_model();
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), "pretrain".into());
        save_base(&path, &model, &vocab, meta, None).unwrap();

        let loaded = load_base(&path).unwrap();
        assert_eq!(loaded.model.checksum(), model.checksum());
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.meta.get("stage").map(String::as_str), Some("pretrain"));
        assert!(loaded.state.is_none());
        assert!(!loaded.model.frozen());
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let (mut model, vocab) = small_model();

        // run a couple of real steps so the slots are non-trivial
        let mut adam = Adam::new(0.01);
        for _ in 0..3 {
            adam.begin_step();
            let names: Vec<String> = model.params.keys().cloned().collect();
            for name in names {
                let g = {
                    let p = &model.params[&name];
                    Tensor::from_vec(p.rows, p.cols, p.data.iter().map(|x| x * 0.1).collect())
                        .unwrap()
                };
                let p = model.params.get_mut(&name).unwrap();
                adam.step(&name, p, &g).unwrap();
            }
        }
        let mut last_params = model.params.clone();
        last_params.get_mut("out_proj").unwrap().data[0] += 0.25;
        let state = TrainState {
            adam_t: adam.t(),
            epochs_done: 3,
            slots: adam.export_state(),
            last_params: last_params.clone(),
            best_em: 0.75,
            best_loss: 0.031_25,
            stall_best_loss: f64::INFINITY,
            stalled: 2,
        };
        save_base(&path, &model, &vocab, BTreeMap::new(), Some(&state)).unwrap();

        let loaded = load_base(&path).unwrap();
        let got = loaded.state.unwrap();
        assert_eq!(got.adam_t, 3);
        assert_eq!(got.epochs_done, 3);
        assert_eq!(got.best_em, 0.75);
        assert_eq!(got.best_loss, 0.031_25);
        assert_eq!(got.stall_best_loss, f64::INFINITY);
        assert_eq!(got.stalled, 2);
        assert_eq!(got.last_params, last_params);
        let mut restored = Adam::new(0.01);
        got.restore_into(&mut restored).unwrap();
        assert_eq!(restored.t(), adam.t());
        assert_eq!(restored.export_state(), adam.export_state());

        let cursor = got.to_cursor(loaded.model.params.clone());
        assert_eq!(cursor.epochs_done, 3);
        assert_eq!(cursor.best.as_ref().unwrap().0, 0.75);
        assert_eq!(cursor.stalled, 2);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let (model, vocab) = small_model();
        save_base(&path, &model, &vocab, BTreeMap::new(), None).unwrap();

        // flip one byte in the middle
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_base(&path), Err(Error::Format(_))));

        // truncate
        let (model, _) = small_model();
        save_base(&path, &model, &vocab, BTreeMap::new(), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_base(&path), Err(Error::Format(_))));

        // wrong magic
        let mut bytes = b"NOPE".to_vec();
        bytes.extend_from_slice(&[0u8; 64]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_base(&path), Err(Error::Format(_))));

        // missing entirely
        assert!(matches!(
            load_base(&dir.path().join("absent.ckpt")),
            Err(Error::MissingArtifact(_))
        ));
    }

    fn stack_checksum(s: &AdapterStack) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        s.for_each_param(|name, t| {
            h.update(name.as_bytes());
            for &x in &t.data {
                h.update(x.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    #[test]
    fn adapter_update_roundtrips_with_memories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("update.ckpt");
        let (mut model, vocab) = small_model();
        model.set_frozen(true);

        let mut stack = AdapterStack::new();
        let pol1 = PlacementPolicy { rank: 2, placement: Placement::All, ..Default::default() };
        let pol2 = PlacementPolicy { kind: AdapterKind::KnowledgeLayer, ..Default::default() };
        stack.new_phase(&model.cfg, &pol1, 41).unwrap();
        stack.new_phase(&model.cfg, &pol2, 42).unwrap();
        // make values distinctive
        stack.for_each_param_mut(|_, t| {
            for (i, x) in t.data.iter_mut().enumerate() {
                *x += (i % 7) as f64 * 0.01;
            }
        });

        let spec = SplitSpec { n_source: 8, target_sizes: vec![3, 2], ..SplitSpec::toy(9) };
        let world = generate_world(&spec).unwrap();
        let memories = vec![
            build_memory(&model, &vocab, &world.kt(1), 1).unwrap(),
            build_memory(&model, &vocab, &world.kt(2), 2).unwrap(),
        ];

        let u = UpdateCheckpoint {
            regime: Regime::GatedPlugin(AdapterKind::LowRank),
            base_checksum: model.checksum(),
            delta: 0.85,
            full_model: None,
            policies: vec![pol1, pol2],
            stack: Some(stack),
            memories,
        };
        save_update(&path, &u, &model.cfg, &vocab).unwrap();

        let back = load_update(&path, &model.cfg).unwrap();
        assert_eq!(back.regime, u.regime);
        assert_eq!(back.base_checksum, model.checksum());
        assert_eq!(back.delta, 0.85);
        assert!(back.full_model.is_none());
        let loaded_stack = back.stack.unwrap();
        assert_eq!(stack_checksum(&loaded_stack), stack_checksum(u.stack.as_ref().unwrap()));
        assert_eq!(back.memories.len(), 2);
        for (a, b) in back.memories.iter().zip(&u.memories) {
            assert_eq!(a.phase, b.phase);
            assert_eq!(a.len(), b.len());
            for r in 0..a.len() {
                assert_eq!(a.raw_row(r), b.raw_row(r));
                assert_eq!(a.answer(r), b.answer(r));
            }
        }
    }

    #[test]
    fn full_model_update_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("update.ckpt");
        let (model, vocab) = small_model();
        let mut tuned = model.clone();
        for t in tuned.params.values_mut() {
            for x in t.data.iter_mut() {
                *x *= 1.5;
            }
        }
        let u = UpdateCheckpoint {
            regime: Regime::FineTune,
            base_checksum: model.checksum(),
            delta: 0.9,
            full_model: Some(tuned.clone()),
            policies: vec![],
            stack: None,
            memories: vec![],
        };
        save_update(&path, &u, &model.cfg, &vocab).unwrap();
        let back = load_update(&path, &model.cfg).unwrap();
        assert_eq!(back.full_model.unwrap().checksum(), tuned.checksum());
        assert!(back.stack.is_none());
        assert_eq!(back.regime, Regime::FineTune);
    }

    #[test]
    fn tampered_blob_shapes_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let (model, vocab) = small_model();
        save_base(&path, &model, &vocab, BTreeMap::new(), None).unwrap();
        let c = Container::load(&path).unwrap();
        // drop one weight blob and re-save
        let mut crippled = Container {
            kind: c.kind,
            config: c.config,
            vocab: c.vocab,
            meta: BTreeMap::new(),
            blobs: c.blobs,
        };
        crippled.blobs.remove("model.out_proj").unwrap();
        crippled.save(&path).unwrap();
        assert!(matches!(load_base(&path), Err(Error::Format(_))));
    }
}
