//! Plug-in modules: the trainable g beside the frozen f.
//!
//! Two kinds are supported.  Low-rank branches wrap individual decoder
//! linears (`h = x·W0 + (x·A)·B` in row-vector form), and a bottleneck
//! "knowledge layer" adds one trainable transformer layer beside a frozen
//! decoder layer (`h = base(x) + kia(x)`).  Both start as exact identities:
//! every outgoing projection is zero-initialized, so a freshly created phase
//! changes nothing until trained.
//!
//! Phases are append-only.  Once a phase finishes training its weights are
//! frozen; later phases train with all earlier phases switched on but only
//! the newest one receiving gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Decoder sublayer positions a low-rank branch can wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    SelfQ,
    SelfV,
    CrossQ,
    CrossV,
    Ff1,
    Ff2,
}

impl Site {
    pub fn tag(self) -> &'static str {
        match self {
            Site::SelfQ => "self_q",
            Site::SelfV => "self_v",
            Site::CrossQ => "cross_q",
            Site::CrossV => "cross_v",
            Site::Ff1 => "ff1",
            Site::Ff2 => "ff2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "self_q" => Site::SelfQ,
            "self_v" => Site::SelfV,
            "cross_q" => Site::CrossQ,
            "cross_v" => Site::CrossV,
            "ff1" => Site::Ff1,
            "ff2" => Site::Ff2,
            other => return Err(Error::Format(format!("unknown adapter site '{}'", other))),
        })
    }

    /// Wrapped matrix dimensions `[in x out]` under `cfg`.
    fn dims(self, cfg: &TransformerConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            Site::SelfQ | Site::SelfV | Site::CrossQ | Site::CrossV => (d, d),
            Site::Ff1 => (d, cfg.d_ff),
            Site::Ff2 => (cfg.d_ff, d),
        }
    }
}

/// Which decoder sublayers get low-rank branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AttentionQv,
    FeedForward,
    All,
}

impl Placement {
    pub fn sites(self) -> &'static [Site] {
        match self {
            Placement::AttentionQv => &[Site::SelfQ, Site::SelfV, Site::CrossQ, Site::CrossV],
            Placement::FeedForward => &[Site::Ff1, Site::Ff2],
            Placement::All => &[
                Site::SelfQ,
                Site::SelfV,
                Site::CrossQ,
                Site::CrossV,
                Site::Ff1,
                Site::Ff2,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    LowRank,
    KnowledgeLayer,
}

/// Shape of every phase appended to a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub kind: AdapterKind,
    /// Only meaningful for low-rank phases.
    pub placement: Placement,
    pub rank: usize,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            kind: AdapterKind::LowRank,
            placement: Placement::FeedForward,
            rank: 16,
        }
    }
}

/// One low-rank branch: `delta(x) = (x·down)·up` with `down: [in x r]`,
/// `up: [r x out]`.  `up` starts at zero, so the branch starts silent.
#[derive(Clone, Debug)]
pub struct LoraBranch {
    pub down: Tensor,
    pub up: Tensor,
}

impl LoraBranch {
    fn init(rng: &mut impl Rng, in_dim: usize, out_dim: usize, rank: usize) -> Result<Self> {
        let bound = in_dim.min(out_dim) / 2;
        if rank == 0 || rank > bound {
            return Err(Error::Config(format!(
                "rank {} outside 1..={} for a {}x{} matrix",
                rank, bound, in_dim, out_dim
            )));
        }
        Ok(LoraBranch {
            down: Tensor::randn(rng, in_dim, rank, 0.02),
            up: Tensor::zeros(rank, out_dim),
        })
    }
}

/// One trainable transformer layer added beside a frozen decoder layer.
/// Internally: pre-norm causal self-attention with a zero-initialized output
/// projection, then a pre-norm feed-forward with a zero-initialized second
/// matrix.  Output is exactly zero until trained.
#[derive(Clone, Debug)]
pub struct KnowledgeLayer {
    /// Decoder layer index this branch is added to.
    pub layer: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl KnowledgeLayer {
    fn init(rng: &mut impl Rng, cfg: &TransformerConfig, layer: usize) -> Self {
        let d = cfg.d_model;
        let mut params = BTreeMap::new();
        let mut put = |name: &str, t: Tensor| {
            params.insert(name.to_string(), t);
        };
        put("ln1.g", Tensor::ones(1, d));
        put("ln1.b", Tensor::zeros(1, d));
        put("attn.wq", Tensor::randn(rng, d, d, 0.02));
        put("attn.wk", Tensor::randn(rng, d, d, 0.02));
        put("attn.wv", Tensor::randn(rng, d, d, 0.02));
        put("attn.wo", Tensor::zeros(d, d));
        put("ln2.g", Tensor::ones(1, d));
        put("ln2.b", Tensor::zeros(1, d));
        put("ff.w1", Tensor::randn(rng, d, cfg.d_ff, 0.02));
        put("ff.w2", Tensor::zeros(cfg.d_ff, d));
        KnowledgeLayer { layer, params }
    }
}

/// Everything one update phase trains.
#[derive(Clone, Debug)]
pub struct Phase {
    pub policy: PlacementPolicy,
    /// Low-rank branches keyed by (decoder layer, site).
    pub lora: BTreeMap<(usize, Site), LoraBranch>,
    pub knowledge: Option<KnowledgeLayer>,
}

impl Phase {
    /// True while the phase still computes the identity: every projection
    /// that feeds its output (`up` for low-rank branches, `attn.wo` and
    /// `ff.w2` for a knowledge layer) is all-zero.
    pub fn is_identity_init(&self) -> bool {
        let lora_zero = self.lora.values().all(|b| b.up.data.iter().all(|&x| x == 0.0));
        let kia_zero = self.knowledge.as_ref().is_none_or(|k| {
            ["attn.wo", "ff.w2"].iter().all(|name| {
                k.params
                    .get(*name)
                    .map(|t| t.data.iter().all(|&x| x == 0.0))
                    .unwrap_or(false)
            })
        });
        lora_zero && kia_zero
    }
}

/// Ordered update phases plus the bookkeeping that keeps earlier phases
/// frozen while a new one trains.
#[derive(Clone, Debug, Default)]
pub struct AdapterStack {
    pub phases: Vec<Phase>,
    training: Option<usize>,
}

impl AdapterStack {
    pub fn new() -> Self {
        AdapterStack::default()
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    /// Append a fresh zero-initialized phase and return its index.
    pub fn new_phase(
        &mut self,
        cfg: &TransformerConfig,
        policy: &PlacementPolicy,
        seed: u64,
    ) -> Result<usize> {
        if let Some(t) = self.training {
            return Err(Error::Contract(format!(
                "new_phase while phase {} is still training",
                t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase = match policy.kind {
            AdapterKind::LowRank => {
                let mut lora = BTreeMap::new();
                for layer in 0..cfg.n_dec_layers {
                    for &site in policy.placement.sites() {
                        let (i, o) = site.dims(cfg);
                        lora.insert((layer, site), LoraBranch::init(&mut rng, i, o, policy.rank)?);
                    }
                }
                Phase { policy: policy.clone(), lora, knowledge: None }
            }
            AdapterKind::KnowledgeLayer => Phase {
                policy: policy.clone(),
                lora: BTreeMap::new(),
                knowledge: Some(KnowledgeLayer::init(&mut rng, cfg, cfg.n_dec_layers - 1)),
            },
        };
        self.phases.push(phase);
        Ok(self.phases.len() - 1)
    }

    /// Mark `phase` trainable.  Only the newest phase may train; everything
    /// earlier is frozen for good.
    pub fn begin_training(&mut self, phase: usize) -> Result<()> {
        if phase + 1 != self.phases.len() {
            return Err(Error::Contract(format!(
                "phase {} cannot train: only the newest of {} phases may",
                phase,
                self.phases.len()
            )));
        }
        if self.training.is_some() {
            return Err(Error::Contract("a phase is already training".into()));
        }
        self.training = Some(phase);
        Ok(())
    }

    pub fn end_training(&mut self) {
        self.training = None;
    }

    pub fn training_phase(&self) -> Option<usize> {
        self.training
    }

    /// Trainable parameter count of one phase.  For low-rank branches this is
    /// the closed form r·(in+out) summed over wrapped matrices.
    pub fn phase_param_count(&self, phase: usize) -> usize {
        let p = &self.phases[phase];
        let lora: usize = p.lora.values().map(|b| b.down.len() + b.up.len()).sum();
        let kia: usize = p
            .knowledge
            .as_ref()
            .map(|k| k.params.values().map(Tensor::len).sum())
            .unwrap_or(0);
        lora + kia
    }

    /// Visit every parameter as (name, tensor).  Names are stable and double
    /// as checkpoint blob keys: `phase{p}.dec{layer}.{site}.{down|up}` and
    /// `phase{p}.kia{layer}.{param}`.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (pi, phase) in self.phases.iter().enumerate() {
            for ((layer, site), b) in &phase.lora {
                f(&format!("phase{}.dec{}.{}.down", pi, layer, site.tag()), &b.down);
                f(&format!("phase{}.dec{}.{}.up", pi, layer, site.tag()), &b.up);
            }
            if let Some(k) = &phase.knowledge {
                for (name, t) in &k.params {
                    f(&format!("phase{}.kia{}.{}", pi, k.layer, name), t);
                }
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (pi, phase) in self.phases.iter_mut().enumerate() {
            for ((layer, site), b) in phase.lora.iter_mut() {
                f(&format!("phase{}.dec{}.{}.down", pi, layer, site.tag()), &mut b.down);
                f(&format!("phase{}.dec{}.{}.up", pi, layer, site.tag()), &mut b.up);
            }
            if let Some(k) = &mut phase.knowledge {
                for (name, t) in k.params.iter_mut() {
                    f(&format!("phase{}.kia{}.{}", pi, k.layer, name), t);
                }
            }
        }
    }

    /// Put this stack on a tape.  Only phases with their activation bit set
    /// are bound at all — an inactive phase adds no tape nodes, which is what
    /// makes the gate-off path bit-identical to the bare base model.
    pub fn bind<'a>(
        &'a self,
        tape: &mut Tape,
        active: Vec<bool>,
        trainable_phase: Option<usize>,
    ) -> Result<ActiveAdapters<'a>> {
        if active.len() != self.phases.len() {
            return Err(Error::Contract(format!(
                "{} activation bits for {} phases",
                active.len(),
                self.phases.len()
            )));
        }
        if let Some(t) = trainable_phase {
            if t + 1 != self.phases.len() {
                return Err(Error::Contract(format!(
                    "cannot train phase {}: only the newest of {} phases may",
                    t,
                    self.phases.len()
                )));
            }
            if !active[t] {
                return Err(Error::Contract(
                    "trainable phase must be active during its own training".into(),
                ));
            }
        }
        let mut lora = BTreeMap::new();
        let mut knowledge = Vec::new();
        for (pi, phase) in self.phases.iter().enumerate() {
            if !active[pi] {
                continue;
            }
            let trainable = trainable_phase == Some(pi);
            for ((layer, site), b) in &phase.lora {
                let down = tape.leaf(b.down.clone(), trainable);
                let up = tape.leaf(b.up.clone(), trainable);
                lora.insert((pi, *layer, *site), (down, up));
            }
            if let Some(k) = &phase.knowledge {
                let vars: BTreeMap<String, Var> = k
                    .params
                    .iter()
                    .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
                    .collect();
                knowledge.push(BoundKnowledgeLayer { phase: pi, layer: k.layer, vars });
            }
        }
        Ok(ActiveAdapters { stack: self, lora, knowledge })
    }
}

pub struct BoundKnowledgeLayer {
    pub phase: usize,
    pub layer: usize,
    pub vars: BTreeMap<String, Var>,
}

/// A stack bound onto one tape with a fixed activation pattern.
pub struct ActiveAdapters<'a> {
    pub stack: &'a AdapterStack,
    lora: BTreeMap<(usize, usize, Site), (Var, Var)>,
    knowledge: Vec<BoundKnowledgeLayer>,
}

impl ActiveAdapters<'_> {
    /// Bound low-rank branches wrapping (layer, site), in phase order.
    pub fn lora_at(&self, layer: usize, site: Site) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.lora
            .iter()
            .filter(move |((_, l, s), _)| *l == layer && *s == site)
            .map(|(_, &(d, u))| (d, u))
    }

    /// Bound knowledge layers attached to `layer`, in phase order.
    pub fn knowledge_at(&self, layer: usize) -> impl Iterator<Item = &BoundKnowledgeLayer> {
        self.knowledge.iter().filter(move |k| k.layer == layer)
    }

    /// (blob name, var) pairs for the trainable phase, for the optimizer loop.
    pub fn trainable_vars(&self, phase: usize) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for ((pi, layer, site), (d, u)) in &self.lora {
            if *pi == phase {
                out.push((format!("phase{}.dec{}.{}.down", pi, layer, site.tag()), *d));
                out.push((format!("phase{}.dec{}.{}.up", pi, layer, site.tag()), *u));
            }
        }
        for k in &self.knowledge {
            if k.phase == phase {
                for (n, v) in &k.vars {
                    out.push((format!("phase{}.kia{}.{}", k.phase, k.layer, n), *v));
                }
            }
        }
        out
    }
}

// ── reference (tape-free) forward forms ─────────────────────────────────────
// Small pure helpers that state the algebra the tape path must agree with.

/// `x·w0 + (x·down)·up`
pub fn lora_forward(x: &Tensor, w0: &Tensor, branch: &LoraBranch) -> Tensor {
    let mut h = crate::tensor::matmul(x, w0);
    let mid = crate::tensor::matmul(x, &branch.down);
    let delta = crate::tensor::matmul(&mid, &branch.up);
    h.add_scaled(&delta, 1.0);
    h
}

/// Gate off returns `f_out` untouched; gate on adds the branch delta.
pub fn gated_forward(x: &Tensor, gate: bool, f_out: &Tensor, branch: &LoraBranch) -> Tensor {
    if !gate {
        return f_out.clone();
    }
    let mid = crate::tensor::matmul(x, &branch.down);
    let delta = crate::tensor::matmul(&mid, &branch.up);
    let mut h = f_out.clone();
    h.add_scaled(&delta, 1.0);
    h
}

/// Sum of `f_out` and every branch whose activation bit is set.
pub fn multi_forward(
    x: &Tensor,
    activations: &[bool],
    f_out: &Tensor,
    branches: &[&LoraBranch],
) -> Result<Tensor> {
    if activations.len() != branches.len() {
        return Err(Error::Contract(format!(
            "{} activation bits for {} branches",
            activations.len(),
            branches.len()
        )));
    }
    let mut h = f_out.clone();
    for (&on, b) in activations.iter().zip(branches) {
        if on {
            let mid = crate::tensor::matmul(x, &b.down);
            let delta = crate::tensor::matmul(&mid, &b.up);
            h.add_scaled(&delta, 1.0);
        }
    }
    Ok(h)
}
