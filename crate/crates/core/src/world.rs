//! Synthetic relational-fact worlds.
//!
//! A world is a set of (subject, relation, object) facts rendered into
//! question/answer pairs through per-relation templates.  Source facts are
//! what the base model pretrains on; target phases inject new facts, a
//! configurable fraction of which *conflict* — they reuse a source fact's
//! (subject, relation) lineage with a different object, superseding it.
//!
//! Guarantees baked into the construction:
//! - no question string appears in two splits (templates are assigned per
//!   split, so even a conflicting lineage renders differently);
//! - no fact lineage appears in two target phases;
//! - source and target answers draw from disjoint object pools, so a
//!   misrouted retrieval can never accidentally hit the right answer;
//! - everything is a pure function of the spec (sizes, fractions, seed), and
//!   the source side never depends on the target configuration — worlds that
//!   share a seed and source size share K_s exactly.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Fixed token universe caps.  Every generated world must fit inside them so
/// one vocabulary (and hence one pretrained model) serves any world size used
/// in the experiments.
pub const MAX_SUBJECTS: usize = 300;
pub const SOURCE_OBJECT_POOL: usize = 64;
pub const TARGET_OBJECT_POOL: usize = 64;
/// Target objects are offset so the two pools can never collide.
const TARGET_OBJECT_OFFSET: usize = 500;

const N_RELATIONS: usize = 8;

/// (relation keyword, wh-word, "which <noun>" filler)
const RELATIONS: [(&str, &str, &str); N_RELATIONS] = [
    ("leader", "who", "person"),
    ("capital", "what", "city"),
    ("owner", "who", "person"),
    ("color", "what", "shade"),
    ("mentor", "who", "person"),
    ("sponsor", "who", "company"),
    ("anthem", "what", "song"),
    ("founder", "who", "person"),
];

/// Question templates per relation.  Index meaning is fixed:
/// 0 → K_s, 1..2 → P_s paraphrases, 3 → K_t, 4 → P_t.
/// Splitting the template space this way keeps question strings disjoint
/// across splits even when a conflict reuses a (subject, relation) lineage.
///
/// Templates 3 and 4 keep the relation keyword and the subject in the same
/// token slots as template 0.  The base model trains with learned position
/// embeddings on template-0 questions only, so a phrasing that shifts those
/// slots lands on frozen, never-trained geometry — plug-in modules then
/// struggle to tell two facts about one subject apart for no interesting
/// reason.
///
/// Within that alignment, token overlap is graded deliberately: template 3
/// shares only the relation and subject slots with template 0 but differs
/// from template 4 in a single slot, so a target question sits much closer
/// to its own phase memory than the conflicting source phrasing does.
/// Routing rides on exactly that margin — the selector mean-pools encoder
/// states, so the fraction of differing slots is what sets the cosine gap.
/// A conflict shares its (subject, relation) content by definition; with too
/// few surrounding slots that shared content floors the similarity above
/// any usable gate threshold, which is why these templates carry a trailer.
/// The wording still differs per split, which is what the split disjointness
/// guarantee needs.
fn render(relation: usize, template: usize, subject: &str) -> String {
    let (rel, wh, filler) = RELATIONS[relation];
    match template {
        0 => format!("{wh} is the {rel} of {subject} according to official history"),
        1 => format!("the {rel} of {subject} is {wh}"),
        2 => format!("name the {rel} of {subject}"),
        3 => format!("{filler} record a {rel} per {subject} under this fresh revision"),
        4 => format!("{filler} report a {rel} per {subject} under this fresh revision"),
        _ => unreachable!("template index out of range"),
    }
}

fn subject_token(i: usize) -> String {
    format!("ent_{:03}", i)
}

fn object_token(i: usize) -> String {
    format!("obj_{:03}", i)
}

/// The whole closed token universe: every entity, object and template word
/// any in-cap world can produce.  Worlds of different sizes built on the same
/// universe share token ids, so checkpoints stay interchangeable.
pub fn universe_vocab() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for i in 0..MAX_SUBJECTS {
        words.push(subject_token(i));
    }
    for i in 0..SOURCE_OBJECT_POOL {
        words.push(object_token(i));
    }
    for i in 0..TARGET_OBJECT_POOL {
        words.push(object_token(TARGET_OBJECT_OFFSET + i));
    }
    for r in 0..N_RELATIONS {
        for t in 0..5 {
            for w in render(r, t, "ent_000").split_whitespace() {
                words.push(w.to_string());
            }
        }
    }
    words.push("say".into());
    Vocab::from_words(words)
}

/// Vocabulary-grounding pairs: one echo question per word in the universe.
/// Mixed into *pretraining* so every token the system may ever see — answer
/// objects the updates will need, entities and phrasing words no source fact
/// happens to use — has trained weights, the stand-in for a full-scale
/// model's corpus-pretrained vocabulary.  Without this, words that only
/// appear in later phases keep their tiny random-init embeddings; they then
/// barely move a mean-pooled question embedding, and the selector cannot see
/// phrasing differences that ride on them.  Echo pairs never enter a world's
/// splits and leak no facts: the mapping taught is only token → itself.
/// Source-phrased probe questions sampled from the (subject, relation) grid
/// of a world with `n_source` source facts.  Update phases use these for
/// self-distillation: the frozen base model answers each probe, and adapters
/// are trained to reproduce those answers so that an active plug-in stays
/// silent on source-shaped inputs.  Only question surface forms are produced
/// here — no stored fact is read — so the no-source-access protocol holds.
pub fn probe_questions(n_source: usize, limit: usize, seed: u64) -> Vec<String> {
    let src_subjects = n_source.div_ceil(N_RELATIONS);
    let mut combos: Vec<(usize, usize)> = (0..src_subjects)
        .flat_map(|s| (0..N_RELATIONS).map(move |r| (s, r)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos.truncate(limit);
    combos.into_iter().map(|(s, r)| render(r, 0, &subject_token(s))).collect()
}

pub fn echo_pairs() -> Vec<QaPair> {
    universe_vocab()
        .tokens()
        .iter()
        .filter(|w| !w.starts_with('<'))
        .map(|word| QaPair {
            question: format!("say {}", word),
            answer: word.clone(),
            fact_id: format!("echo_{}", word),
            split: Split::Ks,
            phase: 0,
            is_conflict: false,
            is_paraphrase: false,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "K_s")]
    Ks,
    #[serde(rename = "P_s")]
    Ps,
    #[serde(rename = "K_t")]
    Kt,
    #[serde(rename = "P_t")]
    Pt,
}

impl Split {
    pub fn is_source(self) -> bool {
        matches!(self, Split::Ks | Split::Ps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub fact_id: String,
    pub split: Split,
    /// 0 for source splits, 1..=M for target phases.
    pub phase: usize,
    pub is_conflict: bool,
    pub is_paraphrase: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub n_source: usize,
    /// |K_t| per phase, in phase order.
    pub target_sizes: Vec<usize>,
    /// Fraction of each target phase that conflicts with a source lineage.
    pub conflict_fraction: f64,
    pub paraphrases_per_source_fact: usize,
    pub paraphrases_per_target_fact: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn toy(seed: u64) -> Self {
        SplitSpec {
            n_source: 300,
            target_sizes: vec![100],
            conflict_fraction: 0.5,
            paraphrases_per_source_fact: 1,
            paraphrases_per_target_fact: 1,
            seed,
        }
    }

    fn conflicts_for(&self, size: usize) -> usize {
        (self.conflict_fraction * size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 {
            return Err(Error::Config("n_source must be positive".into()));
        }
        if self.target_sizes.is_empty() || self.target_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("every target phase size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conflict_fraction) {
            return Err(Error::Config(format!(
                "conflict_fraction {} outside [0, 1]",
                self.conflict_fraction
            )));
        }
        if self.paraphrases_per_source_fact > 2 {
            return Err(Error::Config(
                "at most 2 source paraphrase templates are available".into(),
            ));
        }
        if self.paraphrases_per_target_fact > 1 {
            return Err(Error::Config(
                "at most 1 target paraphrase template is available".into(),
            ));
        }
        let total_conflicts: usize =
            self.target_sizes.iter().map(|&s| self.conflicts_for(s)).sum();
        if total_conflicts > self.n_source {
            return Err(Error::Config(format!(
                "{} conflicting facts requested but only {} source lineages exist",
                total_conflicts, self.n_source
            )));
        }
        let src_subjects = self.n_source.div_ceil(N_RELATIONS);
        let new_facts: usize = self
            .target_sizes
            .iter()
            .map(|&s| s - self.conflicts_for(s))
            .sum();
        if src_subjects + new_facts > MAX_SUBJECTS {
            return Err(Error::Config(format!(
                "world needs {} subjects but the token universe caps at {}",
                src_subjects + new_facts,
                MAX_SUBJECTS
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Fact {
    subject: usize,
    relation: usize,
    object: usize,
    lineage: usize,
    version: u32,
}

impl Fact {
    fn id(&self) -> String {
        format!("f{:03}_v{}", self.lineage, self.version)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub spec: SplitSpec,
    pub pairs: Vec<QaPair>,
}

pub fn generate_world(spec: &SplitSpec) -> Result<World> {
    spec.validate()?;
    let mut rng_src = ChaCha8Rng::seed_from_u64(spec.seed);
    // Separate stream for the target side: the source world must be byte-equal
    // across specs that differ only in target configuration.
    let mut rng_tgt = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7461_7267_6574_5f6b);

    // source facts: unique (subject, relation) combos in shuffled order
    let src_subjects = spec.n_source.div_ceil(N_RELATIONS);
    let mut combos: Vec<(usize, usize)> = (0..src_subjects)
        .flat_map(|s| (0..N_RELATIONS).map(move |r| (s, r)))
        .collect();
    combos.shuffle(&mut rng_src);
    let source_facts: Vec<Fact> = combos[..spec.n_source]
        .iter()
        .enumerate()
        .map(|(lineage, &(subject, relation))| Fact {
            subject,
            relation,
            object: rng_src.random_range(0..SOURCE_OBJECT_POOL),
            lineage,
            version: 1,
        })
        .collect();

    // target phases: conflicting lineages are drawn without replacement from
    // one shuffled list, so no lineage repeats across phases
    let mut conflict_order: Vec<usize> = (0..spec.n_source).collect();
    conflict_order.shuffle(&mut rng_tgt);
    let mut conflict_cursor = 0;
    let mut next_subject = src_subjects;
    let mut next_lineage = spec.n_source;

    let mut phases: Vec<Vec<Fact>> = Vec::new();
    for &size in &spec.target_sizes {
        let n_conflict = spec.conflicts_for(size);
        let mut facts = Vec::with_capacity(size);
        for _ in 0..n_conflict {
            let lineage = conflict_order[conflict_cursor];
            conflict_cursor += 1;
            let src = &source_facts[lineage];
            facts.push(Fact {
                subject: src.subject,
                relation: src.relation,
                object: TARGET_OBJECT_OFFSET + rng_tgt.random_range(0..TARGET_OBJECT_POOL),
                lineage,
                version: 2,
            });
        }
        for _ in n_conflict..size {
            facts.push(Fact {
                subject: next_subject,
                relation: rng_tgt.random_range(0..N_RELATIONS),
                object: TARGET_OBJECT_OFFSET + rng_tgt.random_range(0..TARGET_OBJECT_POOL),
                lineage: next_lineage,
                version: 1,
            });
            next_subject += 1;
            next_lineage += 1;
        }
        phases.push(facts);
    }

    // render pairs: K_s, P_s, then per phase K_t, P_t
    let conflicted: BTreeSet<usize> = phases
        .iter()
        .flatten()
        .filter(|f| f.version > 1)
        .map(|f| f.lineage)
        .collect();

    let mut pairs = Vec::new();
    let render_pair =
        |f: &Fact, template: usize, split: Split, phase: usize, is_conflict: bool| QaPair {
            question: render(f.relation, template, &subject_token(f.subject)),
            answer: object_token(f.object),
            fact_id: f.id(),
            split,
            phase,
            is_conflict,
            is_paraphrase: matches!(split, Split::Ps | Split::Pt),
        };

    for f in &source_facts {
        pairs.push(render_pair(f, 0, Split::Ks, 0, conflicted.contains(&f.lineage)));
    }
    for t in 0..spec.paraphrases_per_source_fact {
        for f in &source_facts {
            pairs.push(render_pair(f, 1 + t, Split::Ps, 0, conflicted.contains(&f.lineage)));
        }
    }
    for (pi, facts) in phases.iter().enumerate() {
        let phase = pi + 1;
        for f in facts {
            pairs.push(render_pair(f, 3, Split::Kt, phase, f.version > 1));
        }
        if spec.paraphrases_per_target_fact > 0 {
            for f in facts {
                pairs.push(render_pair(f, 4, Split::Pt, phase, f.version > 1));
            }
        }
    }

    let world = World { spec: spec.clone(), pairs };
    world.self_check()?;
    Ok(world)
}

impl World {
    pub fn n_phases(&self) -> usize {
        self.spec.target_sizes.len()
    }

    pub fn ks(&self) -> Vec<&QaPair> {
        self.pairs.iter().filter(|p| p.split == Split::Ks).collect()
    }

    pub fn ps(&self) -> Vec<&QaPair> {
        self.pairs.iter().filter(|p| p.split == Split::Ps).collect()
    }

    pub fn kt(&self, phase: usize) -> Vec<&QaPair> {
        self.pairs
            .iter()
            .filter(|p| p.split == Split::Kt && p.phase == phase)
            .collect()
    }

    pub fn pt(&self, phase: usize) -> Vec<&QaPair> {
        self.pairs
            .iter()
            .filter(|p| p.split == Split::Pt && p.phase == phase)
            .collect()
    }

    /// Verify every structural invariant the generator promises.  Cheap
    /// enough to run after generation and after loading from disk.
    pub fn self_check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("world self-check: {}", msg)));

        // counts
        let n_ks = self.ks().len();
        if n_ks != self.spec.n_source {
            return fail(format!("|K_s| = {}, expected {}", n_ks, self.spec.n_source));
        }
        let n_ps = self.ps().len();
        let want_ps = self.spec.n_source * self.spec.paraphrases_per_source_fact;
        if n_ps != want_ps {
            return fail(format!("|P_s| = {}, expected {}", n_ps, want_ps));
        }
        for (pi, &size) in self.spec.target_sizes.iter().enumerate() {
            let phase = pi + 1;
            let n_kt = self.kt(phase).len();
            if n_kt != size {
                return fail(format!("|K_t^{}| = {}, expected {}", phase, n_kt, size));
            }
            let n_conf = self.kt(phase).iter().filter(|p| p.is_conflict).count();
            if n_conf != self.spec.conflicts_for(size) {
                return fail(format!(
                    "phase {} has {} conflicts, expected {}",
                    phase,
                    n_conf,
                    self.spec.conflicts_for(size)
                ));
            }
            let n_pt = self.pt(phase).len();
            let want_pt = size * self.spec.paraphrases_per_target_fact;
            if n_pt != want_pt {
                return fail(format!("|P_t^{}| = {}, expected {}", phase, n_pt, want_pt));
            }
        }

        // no question string in two splits (or twice anywhere)
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if !seen.insert(&p.question) {
                return fail(format!("duplicate question '{}'", p.question));
            }
        }

        // no lineage in two target phases
        let mut lineages = BTreeSet::new();
        for p in &self.pairs {
            if p.split == Split::Kt {
                let lineage = p.fact_id.split('_').next().unwrap_or("").to_string();
                if !lineages.insert((lineage, p.phase)) {
                    continue; // same phase repeats are impossible by counts
                }
            }
        }
        let mut by_lineage = BTreeSet::new();
        for (lineage, _) in &lineages {
            if !by_lineage.insert(lineage.clone()) {
                return fail(format!("lineage {} appears in two phases", lineage));
            }
        }

        // conflicts share their lineage with a source pair but answer differently;
        // new target facts have lineages unseen in the source
        let src_by_lineage: std::collections::BTreeMap<&str, &QaPair> = self
            .pairs
            .iter()
            .filter(|p| p.split == Split::Ks)
            .map(|p| (p.fact_id.split('_').next().unwrap(), p))
            .collect();
        for p in self.pairs.iter().filter(|p| p.split == Split::Kt) {
            let lineage = p.fact_id.split('_').next().unwrap();
            match (p.is_conflict, src_by_lineage.get(lineage)) {
                (true, Some(src)) => {
                    if src.answer == p.answer {
                        return fail(format!("conflict {} keeps the old answer", p.fact_id));
                    }
                }
                (true, None) => return fail(format!("conflict {} has no source lineage", p.fact_id)),
                (false, Some(_)) => {
                    return fail(format!("new fact {} collides with a source lineage", p.fact_id))
                }
                (false, None) => {}
            }
        }

        // paraphrases agree with their K pair's gold answer
        let mut gold: std::collections::BTreeMap<&str, &str> = Default::default();
        for p in &self.pairs {
            if !p.is_paraphrase {
                gold.insert(&p.fact_id, &p.answer);
            }
        }
        for p in &self.pairs {
            if p.is_paraphrase {
                match gold.get(p.fact_id.as_str()) {
                    Some(&a) if a == p.answer => {}
                    _ => return fail(format!("paraphrase of {} disagrees on the answer", p.fact_id)),
                }
            }
        }

        // answers stay inside their pools
        for p in &self.pairs {
            let idx: usize = p
                .answer
                .strip_prefix("obj_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Contract(format!("malformed answer '{}'", p.answer)))?;
            let source_side = p.split.is_source();
            if source_side && idx >= SOURCE_OBJECT_POOL {
                return fail(format!("source answer {} outside its pool", p.answer));
            }
            if !source_side && idx < TARGET_OBJECT_OFFSET {
                return fail(format!("target answer {} outside its pool", p.answer));
            }
        }
        Ok(())
    }
}

/// Deterministic fraction-of-set sample (for dev splits): shuffles a copy of
/// the index space under `seed` and takes the rounded fraction, at least one.
pub fn sample_fraction<'a>(pairs: &[&'a QaPair], frac: f64, seed: u64) -> Vec<&'a QaPair> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((pairs.len() as f64 * frac).round() as usize).clamp(1, pairs.len());
    idx.truncate(n);
    idx.sort();
    idx.into_iter().map(|i| pairs[i]).collect()
}

// ── JSONL round-trip ────────────────────────────────────────────────────────

pub fn write_jsonl(path: &Path, pairs: &[QaPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)
            .map_err(|e| Error::Format(format!("serializing pair: {}", e)))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaPair>> {
    let f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("dataset {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: QaPair = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {}", path.display(), i + 1, e)))?;
        pairs.push(p);
    }
    Ok(pairs)
}
