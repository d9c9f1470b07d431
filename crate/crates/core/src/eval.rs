//! Evaluation: exact-match scoring, forgetting/update accounting, routing
//! diagnostics, and the gate-threshold sweep.
//!
//! Everything is computed from per-example traces so aggregate numbers can
//! always be re-derived and cross-checked.  Examples are scored in parallel;
//! results are collected in input order, so reports are deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::error::{Error, Result};
use crate::model::{argmax, BaseModel};
use crate::selector::{delta_grid, retrieval_answer, route, EmbeddingMemory, RouteDecision};
use crate::vocab::{Vocab, BOS, EOS};
use crate::world::{QaPair, Split};

/// Answer normalization before comparison: lowercase, trim, collapse runs of
/// whitespace to one space.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// 2ab/(a+b), zero when either side is zero: rewards balance between keeping
/// old knowledge and acquiring new.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// How the stack participates at inference time.
#[derive(Clone, Copy)]
pub enum InferenceMode<'a> {
    /// Frozen (or fully fine-tuned) base model alone.
    BaseOnly,
    /// Every phase active on every input — an ungated plug-in stack.
    AlwaysOn { stack: &'a AdapterStack },
    /// Phases activate only when the selector's best match clears δ.
    Gated {
        stack: &'a AdapterStack,
        memories: &'a [EmbeddingMemory],
        delta: f64,
    },
}

impl InferenceMode<'_> {
    fn tag(&self) -> &'static str {
        match self {
            InferenceMode::BaseOnly => "base",
            InferenceMode::AlwaysOn { .. } => "always_on",
            InferenceMode::Gated { .. } => "gated",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trace {
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub em: bool,
    pub split: Split,
    pub phase: usize,
    pub is_conflict: bool,
    /// Best cosine score, when a selector was consulted.
    pub s_q: Option<f64>,
    /// Phase the gate routed to (1-based), `None` when it stayed closed.
    pub routed_phase: Option<usize>,
    /// What retrieval-from-memory would have answered instead.
    pub retrieval: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SetScores {
    pub n: usize,
    pub correct: usize,
    /// Fraction in [0, 1]; `None` for an empty set.
    pub em: Option<f64>,
}

impl SetScores {
    fn tally(traces: impl Iterator<Item = bool>) -> Self {
        let (mut n, mut correct) = (0, 0);
        for em in traces {
            n += 1;
            correct += em as usize;
        }
        SetScores { n, correct, em: (n > 0).then(|| correct as f64 / n as f64) }
    }

    pub fn em_or_zero(&self) -> f64 {
        self.em.unwrap_or(0.0)
    }
}

/// Routing outcomes split by where the example truly belongs.  The four
/// cells always sum to the number of scored examples.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Confusion {
    pub source_routed_base: usize,
    pub source_routed_plugin: usize,
    pub target_routed_plugin: usize,
    pub target_routed_base: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.source_routed_base
            + self.source_routed_plugin
            + self.target_routed_plugin
            + self.target_routed_base
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RetrievalCell {
    pub n: usize,
    pub generation_em: Option<f64>,
    pub retrieval_em: Option<f64>,
}

/// Generating through the gated model versus reading the nearest memory's
/// stored answer, on the two interesting routing outcomes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct GenVsRetrieval {
    /// Source questions the gate wrongly sent to a plug-in phase.
    pub misrouted_source: RetrievalCell,
    /// Target questions the gate correctly sent to a plug-in phase.
    pub routed_target: RetrievalCell,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub delta: Option<f64>,
    pub ks: SetScores,
    pub ps: SetScores,
    /// Indexed by phase − 1.
    pub kt: Vec<SetScores>,
    pub pt: Vec<SetScores>,
    pub kt_total: SetScores,
    pub pt_total: SetScores,
    pub confusion: Option<Confusion>,
    pub gen_vs_retrieval: Option<GenVsRetrieval>,
    pub traces: Vec<Trace>,
}

/// Greedy-decode one question under `mode`, reusing a single forward graph
/// for the selector embedding and the generation.
fn trace_one(
    model: &BaseModel,
    vocab: &Vocab,
    mode: InferenceMode,
    pair: &QaPair,
    max_answer_len: usize,
) -> Result<Trace> {
    let ids = vocab.encode(&pair.question);
    let mut tape = crate::tensor::Tape::new();
    let mut fwd = model.bind(&mut tape, false)?;
    let enc = fwd.encode(&[ids])?;
    let q_emb = fwd.tape.value(enc.h).mean_rows();

    let (decision, bound): (Option<RouteDecision>, _) = match mode {
        InferenceMode::BaseOnly => (None, None),
        InferenceMode::AlwaysOn { stack } => {
            let bits = vec![true; stack.phases.len()];
            (None, Some(stack.bind(&mut *fwd.tape, bits, None)?))
        }
        InferenceMode::Gated { stack, memories, delta } => {
            let d = route(&q_emb, memories, delta)?;
            let b = stack.bind(&mut *fwd.tape, d.active.clone(), None)?;
            (Some(d), Some(b))
        }
    };

    let mut prefix = vec![BOS];
    loop {
        let dec = fwd.decode(&enc, &[prefix.clone()], bound.as_ref())?;
        let logits = fwd.tape.value(dec.logits);
        let tok = argmax(logits.row(logits.rows - 1));
        if tok == EOS {
            break;
        }
        prefix.push(tok);
        if prefix.len() - 1 >= max_answer_len || prefix.len() >= model.cfg.max_seq_len {
            break;
        }
    }
    let prediction = vocab.decode(&prefix[1..]);

    let (s_q, routed_phase, retrieval) = match (&decision, mode) {
        (Some(d), InferenceMode::Gated { memories, .. }) => (
            Some(d.s_q),
            d.is_active().then(|| memories[d.nearest_memory].phase),
            retrieval_answer(d, memories).map(str::to_string),
        ),
        _ => (None, None, None),
    };

    Ok(Trace {
        question: pair.question.clone(),
        gold: pair.answer.clone(),
        em: exact_match(&prediction, &pair.answer),
        prediction,
        split: pair.split,
        phase: pair.phase,
        is_conflict: pair.is_conflict,
        s_q,
        routed_phase,
        retrieval,
    })
}

pub fn evaluate(
    model: &BaseModel,
    vocab: &Vocab,
    mode: InferenceMode,
    pairs: &[&QaPair],
    max_answer_len: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation over an empty example set".into()));
    }
    let traces: Vec<Trace> = pairs
        .par_iter()
        .map(|p| trace_one(model, vocab, mode, p, max_answer_len))
        .collect::<Result<_>>()?;

    let by_split = |s: Split| SetScores::tally(traces.iter().filter(|t| t.split == s).map(|t| t.em));
    let n_phases = traces.iter().map(|t| t.phase).max().unwrap_or(0);
    let by_phase = |s: Split, ph: usize| {
        SetScores::tally(traces.iter().filter(|t| t.split == s && t.phase == ph).map(|t| t.em))
    };

    let gated = matches!(mode, InferenceMode::Gated { .. });
    let confusion = gated.then(|| {
        let mut c = Confusion::default();
        for t in &traces {
            match (t.split.is_source(), t.routed_phase.is_some()) {
                (true, false) => c.source_routed_base += 1,
                (true, true) => c.source_routed_plugin += 1,
                (false, true) => c.target_routed_plugin += 1,
                (false, false) => c.target_routed_base += 1,
            }
        }
        c
    });
    let gen_vs_retrieval = gated.then(|| {
        let cell = |keep: &dyn Fn(&&Trace) -> bool| {
            let picked: Vec<&Trace> = traces.iter().filter(keep).collect();
            let n = picked.len();
            let gen = picked.iter().filter(|t| t.em).count();
            let ret = picked
                .iter()
                .filter(|t| {
                    t.retrieval.as_deref().is_some_and(|r| exact_match(r, &t.gold))
                })
                .count();
            RetrievalCell {
                n,
                generation_em: (n > 0).then(|| gen as f64 / n as f64),
                retrieval_em: (n > 0).then(|| ret as f64 / n as f64),
            }
        };
        GenVsRetrieval {
            misrouted_source: cell(&|t| t.split.is_source() && t.routed_phase.is_some()),
            routed_target: cell(&|t| !t.split.is_source() && t.routed_phase.is_some()),
        }
    });

    Ok(EvalReport {
        mode: mode.tag().to_string(),
        delta: match mode {
            InferenceMode::Gated { delta, .. } => Some(delta),
            _ => None,
        },
        ks: by_split(Split::Ks),
        ps: by_split(Split::Ps),
        kt: (1..=n_phases).map(|p| by_phase(Split::Kt, p)).collect(),
        pt: (1..=n_phases).map(|p| by_phase(Split::Pt, p)).collect(),
        kt_total: by_split(Split::Kt),
        pt_total: by_split(Split::Pt),
        confusion,
        gen_vs_retrieval,
        traces,
    })
}

// ── forgetting / update accounting ──────────────────────────────────────────

/// Forgets-per-update ratio; `NotApplicable` when nothing was updated, so a
/// division by zero can never be fabricated into a number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FuRatio {
    Value(f64),
    NotApplicable,
}

impl FuRatio {
    pub fn as_value(&self) -> Option<f64> {
        match self {
            FuRatio::Value(v) => Some(*v),
            FuRatio::NotApplicable => None,
        }
    }
}

impl std::fmt::Display for FuRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FuRatio::Value(v) => write!(f, "{:.4}", v),
            FuRatio::NotApplicable => write!(f, "n/a"),
        }
    }
}

impl Serialize for FuRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FuRatio::Value(v) => s.serialize_f64(*v),
            FuRatio::NotApplicable => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for FuRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => Ok(FuRatio::Value(n.as_f64().unwrap_or(f64::NAN))),
            serde_json::Value::String(s) if s == "n/a" => Ok(FuRatio::NotApplicable),
            other => Err(serde::de::Error::custom(format!("bad F/U value {}", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FuStats {
    pub forgets: usize,
    pub updates: usize,
    pub ratio: FuRatio,
}

/// Compare a post-update report against the pre-update one on the same sets:
/// forgets = source answers lost, updates = target answers gained.
pub fn fu_ratio(before: &EvalReport, after: &EvalReport) -> Result<FuStats> {
    if before.ks.n != after.ks.n || before.kt_total.n != after.kt_total.n {
        return Err(Error::Contract(format!(
            "F/U needs reports over identical sets ({}≠{} or {}≠{})",
            before.ks.n, after.ks.n, before.kt_total.n, after.kt_total.n
        )));
    }
    let forgets = before.ks.correct.saturating_sub(after.ks.correct);
    let updates = after.kt_total.correct.saturating_sub(before.kt_total.correct);
    let ratio = if updates == 0 {
        FuRatio::NotApplicable
    } else {
        FuRatio::Value(forgets as f64 / updates as f64)
    };
    Ok(FuStats { forgets, updates, ratio })
}

// ── gate-threshold sweep ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub dev_ks_em: f64,
    pub dev_kt_em: f64,
    pub harmonic: f64,
}

/// Score each δ on the dev sets and pick the best by harmonic mean of source
/// and target EM; ties break toward the highest (most conservative) δ.
///
/// Each example's score s_q is independent of δ, so only two generations per
/// example are needed — gate open and gate closed — and the 21 thresholds
/// just re-slice those outcomes.
pub fn delta_sweep(
    model: &BaseModel,
    vocab: &Vocab,
    stack: &AdapterStack,
    memories: &[EmbeddingMemory],
    dev_source: &[&QaPair],
    dev_target: &[&QaPair],
    max_answer_len: usize,
) -> Result<(Vec<SweepRow>, f64)> {
    if dev_source.is_empty() || dev_target.is_empty() {
        return Err(Error::Contract("δ sweep needs non-empty dev sets".into()));
    }
    struct Outcome {
        source: bool,
        s_q: f64,
        em_open: bool,
        em_closed: bool,
    }
    let score = |pair: &QaPair, source: bool| -> Result<Outcome> {
        // gate closed ≙ base-only; gate open ≙ activate through the winner
        let closed = trace_one(model, vocab, InferenceMode::BaseOnly, pair, max_answer_len)?;
        let open = trace_one(
            model,
            vocab,
            InferenceMode::Gated { stack, memories, delta: 0.0 },
            pair,
            max_answer_len,
        )?;
        Ok(Outcome { source, s_q: open.s_q.unwrap_or(0.0), em_open: open.em, em_closed: closed.em })
    };
    let outcomes: Vec<Outcome> = dev_source
        .par_iter()
        .map(|p| score(p, true))
        .chain(dev_target.par_iter().map(|p| score(p, false)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(21);
    let mut best: Option<SweepRow> = None;
    for delta in delta_grid() {
        let em_of = |want_source: bool| {
            let picked: Vec<&Outcome> =
                outcomes.iter().filter(|o| o.source == want_source).collect();
            let correct = picked
                .iter()
                .filter(|o| if o.s_q >= delta { o.em_open } else { o.em_closed })
                .count();
            correct as f64 / picked.len() as f64
        };
        let row = SweepRow {
            delta,
            dev_ks_em: em_of(true),
            dev_kt_em: em_of(false),
            harmonic: harmonic_mean(em_of(true), em_of(false)),
        };
        if best.map_or(true, |b| row.harmonic >= b.harmonic) {
            best = Some(row);
        }
        rows.push(row);
    }
    Ok((rows, best.expect("grid is never empty").delta))
}
