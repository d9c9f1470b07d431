//! Routing between the frozen base model and plug-in phases.
//!
//! Each update phase leaves behind an embedding memory: one frozen-encoder
//! embedding per training question, aligned with its answer string.  At
//! inference the query embedding is compared against every stored row by
//! cosine similarity; if the best score clears the gate threshold δ the query
//! is deemed "new knowledge" and the matching phase — plus all phases before
//! it — is switched on.  Below the threshold every phase stays silent and the
//! output is bit-identical to the frozen base model.
//!
//! Brute-force scan, no index: memories here are a few hundred rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::vocab::Vocab;
use crate::world::QaPair;

/// One phase's memory: raw embeddings kept for inspection, unit-normalized
/// copies used for scoring, and the answer each row would retrieve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingMemory {
    /// 1-based phase number this memory belongs to.
    pub phase: usize,
    pub dim: usize,
    raw: Vec<Vec<f64>>,
    unit: Vec<Vec<f64>>,
    answers: Vec<String>,
}

impl EmbeddingMemory {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Stored parameter count: N rows × d floats (the answer strings ride along).
    pub fn param_count(&self) -> usize {
        self.len() * self.dim
    }

    pub fn answer(&self, row: usize) -> &str {
        &self.answers[row]
    }

    pub fn raw_row(&self, row: usize) -> &[f64] {
        &self.raw[row]
    }

    pub fn from_rows(phase: usize, rows: Vec<Vec<f64>>, answers: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("embedding memory built from no rows".into()));
        }
        if rows.len() != answers.len() {
            return Err(Error::Contract(format!(
                "{} embeddings but {} answers",
                rows.len(),
                answers.len()
            )));
        }
        let dim = rows[0].len();
        let mut unit = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.len() != dim {
                return Err(Error::Contract("ragged embedding rows".into()));
            }
            unit.push(normalize(r)?);
        }
        Ok(EmbeddingMemory { phase, dim, raw: rows, unit, answers })
    }
}

/// Embed every training question of a phase with the frozen encoder.
pub fn build_memory(
    model: &BaseModel,
    vocab: &Vocab,
    pairs: &[&QaPair],
    phase: usize,
) -> Result<EmbeddingMemory> {
    if !model.frozen() {
        return Err(Error::Contract(
            "memories must be built against the frozen base encoder".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Contract(format!("phase {} has no questions to remember", phase)));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut answers = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ids = vocab.encode(&p.question);
        rows.push(model.question_embedding(&ids)?);
        answers.push(p.answer.clone());
    }
    EmbeddingMemory::from_rows(phase, rows, answers)
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Contract(
            "zero-norm embedding cannot be scored by cosine similarity".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine over mismatched dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ua = normalize(a)?;
    let ub = normalize(b)?;
    Ok(ua.iter().zip(&ub).map(|(x, y)| x * y).sum())
}

/// Outcome of routing one query against all memories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    /// Best cosine similarity over all stored rows.
    pub s_q: f64,
    /// Position (0-based, in memory order) of the winning memory.
    pub nearest_memory: usize,
    /// Winning row inside that memory.
    pub nearest_row: usize,
    /// Per-phase activation bits, cumulative: winning phase j at or above the
    /// gate switches on phases 1..=j.
    pub active: Vec<bool>,
}

impl RouteDecision {
    pub fn is_active(&self) -> bool {
        self.active.iter().any(|&b| b)
    }
}

/// Scan every memory row for the best cosine match.  Ties break toward the
/// earliest memory, then the earliest row (strict `>` in scan order).
pub fn nearest(query: &[f64], memories: &[EmbeddingMemory]) -> Result<(f64, usize, usize)> {
    if memories.iter().all(|m| m.is_empty()) {
        return Err(Error::Contract("routing with no memories".into()));
    }
    let uq = normalize(query)?;
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for (mi, m) in memories.iter().enumerate() {
        if m.dim != uq.len() {
            return Err(Error::Contract(format!(
                "memory dim {} vs query dim {}",
                m.dim,
                uq.len()
            )));
        }
        for (ri, row) in m.unit.iter().enumerate() {
            let s: f64 = row.iter().zip(&uq).map(|(x, y)| x * y).sum();
            if s > best.0 {
                best = (s, mi, ri);
            }
        }
    }
    Ok(best)
}

/// Threshold the best score: at or above δ the winning phase and all earlier
/// phases activate; below it nothing does.
pub fn gate(s_q: f64, delta: f64, nearest_memory: usize, nearest_row: usize, n_memories: usize) -> Result<RouteDecision> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("gate threshold {} outside [0, 1]", delta)));
    }
    let hit = s_q >= delta;
    let active = (0..n_memories).map(|k| hit && k <= nearest_memory).collect();
    Ok(RouteDecision { s_q, nearest_memory, nearest_row, active })
}

/// nearest + gate in one step.
pub fn route(query: &[f64], memories: &[EmbeddingMemory], delta: f64) -> Result<RouteDecision> {
    let (s_q, mi, ri) = nearest(query, memories)?;
    gate(s_q, delta, mi, ri, memories.len())
}

/// The answer stored beside the nearest embedding, available only when the
/// gate fired.  This is the system's retrieval-only baseline.
pub fn retrieval_answer<'m>(
    decision: &RouteDecision,
    memories: &'m [EmbeddingMemory],
) -> Option<&'m str> {
    if decision.is_active() {
        Some(memories[decision.nearest_memory].answer(decision.nearest_row))
    } else {
        None
    }
}

/// The gate thresholds swept when tuning δ: 0.00, 0.05, …, 1.00.
pub fn delta_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}
