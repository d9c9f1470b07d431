//! Miniature encoder-decoder transformer.
//!
//! Pre-norm residual blocks, learned positions, bias-free linears in the
//! row-vector convention `y = x·W`.  Batches are packed: examples are
//! concatenated along the row axis with no padding, and attention slices the
//! packed matrix apart so no example attends into another.  A packed forward
//! therefore computes bit-for-bit the same values as running each example
//! alone.
//!
//! Plug-in modules hook into the decoder only: low-rank branches wrap the
//! chosen sublayer projections, knowledge layers sit beside whole decoder
//! layers.  When a phase is inactive it contributes no tape nodes at all, so
//! a gated-off forward is the bare base model, bit-identically.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{ActiveAdapters, AdapterStack, Site};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl TransformerConfig {
    /// Desk-scale default; trains in minutes on one CPU core.
    pub fn toy(vocab_size: usize) -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_seq_len: 32,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// The base model θ: every weight lives in a flat name→tensor map so
/// checkpointing, checksumming and optimizer bookkeeping all share one
/// traversal.  See `init` for the naming scheme.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub cfg: TransformerConfig,
    pub params: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl BaseModel {
    /// Fresh random model.  Weight matrices get Xavier-style Gaussian init,
    /// embeddings and positions a small Gaussian, layer norms identity.
    pub fn init(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let mut params = BTreeMap::new();

        fn linear(
            params: &mut BTreeMap<String, Tensor>,
            rng: &mut ChaCha8Rng,
            name: String,
            i: usize,
            o: usize,
        ) {
            let std = (2.0 / (i + o) as f64).sqrt();
            params.insert(name, Tensor::randn(rng, i, o, std));
        }
        fn ln(params: &mut BTreeMap<String, Tensor>, prefix: String, d: usize) {
            params.insert(format!("{prefix}.g"), Tensor::ones(1, d));
            params.insert(format!("{prefix}.b"), Tensor::zeros(1, d));
        }

        // Draw order below is fixed; never reorder, or seeds change meaning.
        params.insert("embed".into(), Tensor::randn(&mut rng, cfg.vocab_size, d, 0.02));
        params.insert("pos_enc".into(), Tensor::randn(&mut rng, cfg.max_seq_len, d, 0.02));
        params.insert("pos_dec".into(), Tensor::randn(&mut rng, cfg.max_seq_len, d, 0.02));
        for i in 0..cfg.n_enc_layers {
            ln(&mut params, format!("enc.{i}.ln1"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut rng, format!("enc.{i}.attn.{w}"), d, d);
            }
            ln(&mut params, format!("enc.{i}.ln2"), d);
            linear(&mut params, &mut rng, format!("enc.{i}.ff.w1"), d, cfg.d_ff);
            linear(&mut params, &mut rng, format!("enc.{i}.ff.w2"), cfg.d_ff, d);
        }
        ln(&mut params, "enc_final_ln".into(), d);
        for i in 0..cfg.n_dec_layers {
            ln(&mut params, format!("dec.{i}.ln1"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut rng, format!("dec.{i}.self.{w}"), d, d);
            }
            ln(&mut params, format!("dec.{i}.ln2"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut params, &mut rng, format!("dec.{i}.cross.{w}"), d, d);
            }
            ln(&mut params, format!("dec.{i}.ln3"), d);
            linear(&mut params, &mut rng, format!("dec.{i}.ff.w1"), d, cfg.d_ff);
            linear(&mut params, &mut rng, format!("dec.{i}.ff.w2"), cfg.d_ff, d);
        }
        ln(&mut params, "dec_final_ln".into(), d);
        linear(&mut params, &mut rng, "out_proj".into(), d, cfg.vocab_size);

        Ok(BaseModel { cfg, params, frozen: false })
    }

    /// Rebuild a model from stored weights, checking the parameter set and
    /// every shape against what `cfg` dictates.  Loaded models start
    /// unfrozen; callers freeze as needed.
    pub fn from_parts(cfg: TransformerConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = BaseModel::init(cfg.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::Format(format!(
                "{} stored weight blobs, model wants {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, want) in &reference.params {
            match params.get(name) {
                Some(t) if t.rows == want.rows && t.cols == want.cols => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "weight '{}' is {}x{}, model wants {}x{}",
                        name, t.rows, t.cols, want.rows, want.cols
                    )))
                }
                None => return Err(Error::Format(format!("weight '{}' missing", name))),
            }
        }
        Ok(BaseModel { cfg, params, frozen: false })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (name, t) in &self.params {
            f(name, t);
        }
    }

    /// Content hash over every weight (names, shapes, exact f64 bits).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Put the model on a tape.  `trainable` attaches gradient tracking to
    /// every weight; a frozen model refuses that.
    pub fn bind<'t>(&self, tape: &'t mut Tape, trainable: bool) -> Result<ModelForward<'t>> {
        if trainable && self.frozen {
            return Err(Error::Contract(
                "cannot bind a frozen model with gradient tracking".into(),
            ));
        }
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable));
        }
        Ok(ModelForward { tape, cfg: self.cfg, vars, masks: HashMap::new() })
    }

    /// Encoder hidden states and their mean — the question embedding.  Pure
    /// function of the encoder weights and the token ids.
    pub fn encode_question(&self, question: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut fwd = self.bind(&mut tape, false)?;
        let enc = fwd.encode(&[question.to_vec()])?;
        let h = tape.value(enc.h).clone();
        let emb = h.mean_rows();
        Ok((h, emb))
    }

    pub fn question_embedding(&self, question: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode_question(question)?.1)
    }

    /// Logits for one (question, answer prefix) pair under an optional
    /// adapter activation pattern.
    pub fn decode_once(
        &self,
        question: &[usize],
        prefix: &[usize],
        adapters: Option<(&AdapterStack, &[bool])>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = match adapters {
            Some((stack, active)) => Some(stack.bind(&mut tape, active.to_vec(), None)?),
            None => None,
        };
        let mut fwd = self.bind(&mut tape, false)?;
        let enc = fwd.encode(&[question.to_vec()])?;
        let dec = fwd.decode(&enc, &[prefix.to_vec()], bound.as_ref())?;
        Ok(fwd.tape.value(dec.logits).clone())
    }

    /// Greedy decoding: argmax token by token until EOS or `max_len` answer
    /// tokens.  Ties break toward the lowest token id.
    pub fn generate_greedy(
        &self,
        question: &[usize],
        adapters: Option<(&AdapterStack, &[bool])>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = match adapters {
            Some((stack, active)) => Some(stack.bind(&mut tape, active.to_vec(), None)?),
            None => None,
        };
        let mut fwd = self.bind(&mut tape, false)?;
        let enc = fwd.encode(&[question.to_vec()])?;
        let mut prefix = vec![BOS];
        loop {
            let dec = fwd.decode(&enc, &[prefix.clone()], bound.as_ref())?;
            let logits = fwd.tape.value(dec.logits);
            let tok = argmax(logits.row(logits.rows - 1));
            if tok == EOS {
                break;
            }
            prefix.push(tok);
            if prefix.len() - 1 >= max_len || prefix.len() >= self.cfg.max_seq_len {
                break;
            }
        }
        Ok(prefix[1..].to_vec())
    }
}

/// First index of the maximum value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Packed encoder output: `h` holds all examples stacked, `spans` says which
/// rows belong to which example.
pub struct EncBatch {
    pub h: Var,
    pub spans: Vec<(usize, usize)>,
}

/// Packed decoder logits with the same row bookkeeping.
pub struct DecBatch {
    pub logits: Var,
    pub spans: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

/// One model bound onto one tape.
pub struct ModelForward<'t> {
    pub tape: &'t mut Tape,
    cfg: TransformerConfig,
    vars: BTreeMap<String, Var>,
    masks: HashMap<usize, Var>,
}

impl<'t> ModelForward<'t> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no bound parameter '{}'", name)))
    }

    /// All bound parameters, in stable name order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }

    fn attn_vars(&self, prefix: &str) -> Result<AttnVars> {
        Ok(AttnVars {
            wq: self.var(&format!("{prefix}.wq"))?,
            wk: self.var(&format!("{prefix}.wk"))?,
            wv: self.var(&format!("{prefix}.wv"))?,
            wo: self.var(&format!("{prefix}.wo"))?,
        })
    }

    fn ln(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.var(&format!("{prefix}.g"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b)
    }

    /// Additive causal mask leaf for length `len`, cached per tape.
    fn causal_mask(&mut self, len: usize) -> Var {
        if let Some(&v) = self.masks.get(&len) {
            return v;
        }
        let mut m = Tensor::zeros(len, len);
        for i in 0..len {
            for j in i + 1..len {
                *m.at_mut(i, j) = -1e30;
            }
        }
        let v = self.tape.leaf(m, false);
        self.masks.insert(len, v);
        v
    }

    /// `x·W` plus any active low-rank branch wrapping (layer, site).
    fn wrapped_linear(
        &mut self,
        x: Var,
        name: &str,
        wrap: Option<(&ActiveAdapters, usize)>,
        site: Site,
    ) -> Result<Var> {
        let w = self.var(name)?;
        let mut h = self.tape.matmul(x, w)?;
        if let Some((ad, layer)) = wrap {
            for (down, up) in ad.lora_at(layer, site) {
                let mid = self.tape.matmul(x, down)?;
                let delta = self.tape.matmul(mid, up)?;
                h = self.tape.add(h, delta)?;
            }
        }
        Ok(h)
    }

    /// Multi-head attention over packed rows.  `xq` rows follow `q_spans`,
    /// `xkv` rows follow `kv_spans`; each example only sees its own slice.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        xq: Var,
        q_spans: &[(usize, usize)],
        xkv: Var,
        kv_spans: &[(usize, usize)],
        av: AttnVars,
        causal: bool,
        wrap: Option<(&ActiveAdapters, usize)>,
        qv_sites: (Site, Site),
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q_full = match wrap {
            Some(_) => self.wrapped_linear_by_var(xq, av.wq, wrap, qv_sites.0)?,
            None => self.tape.matmul(xq, av.wq)?,
        };
        let k_full = self.tape.matmul(xkv, av.wk)?;
        let v_full = match wrap {
            Some(_) => self.wrapped_linear_by_var(xkv, av.wv, wrap, qv_sites.1)?,
            None => self.tape.matmul(xkv, av.wv)?,
        };

        let mut per_example = Vec::with_capacity(q_spans.len());
        for (e, &(qs, ql)) in q_spans.iter().enumerate() {
            let (ks, kl) = kv_spans[e];
            let qe = self.tape.slice_rows(q_full, qs, ql)?;
            let ke = self.tape.slice_rows(k_full, ks, kl)?;
            let ve = self.tape.slice_rows(v_full, ks, kl)?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = self.tape.slice_cols(qe, h * dh, dh)?;
                let kh = self.tape.slice_cols(ke, h * dh, dh)?;
                let vh = self.tape.slice_cols(ve, h * dh, dh)?;
                let scores = self.tape.matmul_nt(qh, kh)?;
                let mut scores = self.tape.scale(scores, scale);
                if causal {
                    debug_assert_eq!(ql, kl);
                    let mask = self.causal_mask(ql);
                    scores = self.tape.add(scores, mask)?;
                }
                let probs = self.tape.softmax_rows(scores);
                head_outs.push(self.tape.matmul(probs, vh)?);
            }
            per_example.push(self.tape.concat_cols(&head_outs)?);
        }
        let ctx = self.tape.concat_rows(&per_example)?;
        self.tape.matmul(ctx, av.wo)
    }

    /// Same as `wrapped_linear` but with an already-resolved weight var.
    fn wrapped_linear_by_var(
        &mut self,
        x: Var,
        w: Var,
        wrap: Option<(&ActiveAdapters, usize)>,
        site: Site,
    ) -> Result<Var> {
        let mut h = self.tape.matmul(x, w)?;
        if let Some((ad, layer)) = wrap {
            for (down, up) in ad.lora_at(layer, site) {
                let mid = self.tape.matmul(x, down)?;
                let delta = self.tape.matmul(mid, up)?;
                h = self.tape.add(h, delta)?;
            }
        }
        Ok(h)
    }

    fn ff(
        &mut self,
        x: Var,
        prefix: &str,
        wrap: Option<(&ActiveAdapters, usize)>,
    ) -> Result<Var> {
        let h = self.wrapped_linear(x, &format!("{prefix}.w1"), wrap, Site::Ff1)?;
        let h = self.tape.relu(h);
        self.wrapped_linear(h, &format!("{prefix}.w2"), wrap, Site::Ff2)
    }

    /// Token + position embeddings for packed sequences.
    fn embed(&mut self, seqs: &[Vec<usize>], pos_table: &str, what: &str) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Contract(format!("{} on empty input", what)));
            }
            if s.len() > self.cfg.max_seq_len {
                return Err(Error::Contract(format!(
                    "{} length {} exceeds max_seq_len {}",
                    what,
                    s.len(),
                    self.cfg.max_seq_len
                )));
            }
            spans.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let embed = self.var("embed")?;
        let pt = self.var(pos_table)?;
        let tok = self.tape.embed_rows(embed, &ids)?;
        let pe = self.tape.embed_rows(pt, &pos)?;
        let x = self.tape.add(tok, pe)?;
        Ok((x, spans))
    }

    /// Encode packed questions into final hidden states.
    pub fn encode(&mut self, questions: &[Vec<usize>]) -> Result<EncBatch> {
        if questions.is_empty() {
            return Err(Error::Contract("encode on an empty batch".into()));
        }
        let (mut x, spans) = self.embed(questions, "pos_enc", "encode")?;
        for i in 0..self.cfg.n_enc_layers {
            let normed = self.ln(x, &format!("enc.{i}.ln1"))?;
            let av = self.attn_vars(&format!("enc.{i}.attn"))?;
            let attn = self.attention(
                normed,
                &spans,
                normed,
                &spans,
                av,
                false,
                None,
                (Site::SelfQ, Site::SelfV),
            )?;
            x = self.tape.add(x, attn)?;
            let normed = self.ln(x, &format!("enc.{i}.ln2"))?;
            let ff = self.ff(normed, &format!("enc.{i}.ff"), None)?;
            x = self.tape.add(x, ff)?;
        }
        let h = self.ln(x, "enc_final_ln")?;
        Ok(EncBatch { h, spans })
    }

    /// Decode packed answer prefixes against packed encoder output.
    /// Every prefix must start with BOS.
    pub fn decode(
        &mut self,
        enc: &EncBatch,
        prefixes: &[Vec<usize>],
        adapters: Option<&ActiveAdapters>,
    ) -> Result<DecBatch> {
        if prefixes.len() != enc.spans.len() {
            return Err(Error::Contract(format!(
                "{} prefixes for {} encoded questions",
                prefixes.len(),
                enc.spans.len()
            )));
        }
        for p in prefixes {
            if p.first() != Some(&BOS) {
                return Err(Error::Contract("answer prefix must start with BOS".into()));
            }
        }
        let (mut x, spans) = self.embed(prefixes, "pos_dec", "decode")?;
        for i in 0..self.cfg.n_dec_layers {
            let x_in = x;
            let wrap = adapters.map(|a| (a, i));

            let normed = self.ln(x, &format!("dec.{i}.ln1"))?;
            let av = self.attn_vars(&format!("dec.{i}.self"))?;
            let attn = self.attention(
                normed,
                &spans,
                normed,
                &spans,
                av,
                true,
                wrap,
                (Site::SelfQ, Site::SelfV),
            )?;
            x = self.tape.add(x, attn)?;

            let normed = self.ln(x, &format!("dec.{i}.ln2"))?;
            let av = self.attn_vars(&format!("dec.{i}.cross"))?;
            let attn = self.attention(
                normed,
                &spans,
                enc.h,
                &enc.spans,
                av,
                false,
                wrap,
                (Site::CrossQ, Site::CrossV),
            )?;
            x = self.tape.add(x, attn)?;

            let normed = self.ln(x, &format!("dec.{i}.ln3"))?;
            let ff = self.ff(normed, &format!("dec.{i}.ff"), wrap)?;
            x = self.tape.add(x, ff)?;

            if let Some(ad) = adapters {
                let kias: Vec<_> = ad.knowledge_at(i).collect();
                for k in kias {
                    let delta = self.knowledge_forward(x_in, &spans, k)?;
                    x = self.tape.add(x, delta)?;
                }
            }
        }
        let h = self.ln(x, "dec_final_ln")?;
        let out = self.var("out_proj")?;
        let logits = self.tape.matmul(h, out)?;
        Ok(DecBatch { logits, spans })
    }

    /// The knowledge-layer branch: causal self-attention with internal
    /// residual, then a feed-forward whose output is the branch delta.
    fn knowledge_forward(
        &mut self,
        x: Var,
        spans: &[(usize, usize)],
        k: &crate::adapters::BoundKnowledgeLayer,
    ) -> Result<Var> {
        let v = |name: &str| -> Result<Var> {
            k.vars
                .get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("knowledge layer missing '{}'", name)))
        };
        let g1 = v("ln1.g")?;
        let b1 = v("ln1.b")?;
        let normed = self.tape.layer_norm(x, g1, b1)?;
        let av = AttnVars { wq: v("attn.wq")?, wk: v("attn.wk")?, wv: v("attn.wv")?, wo: v("attn.wo")? };
        let attn = self.attention(
            normed,
            spans,
            normed,
            spans,
            av,
            true,
            None,
            (Site::SelfQ, Site::SelfV),
        )?;
        let mid = self.tape.add(x, attn)?;
        let g2 = v("ln2.g")?;
        let b2 = v("ln2.b")?;
        let normed = self.tape.layer_norm(mid, g2, b2)?;
        let h = self.tape.matmul(normed, v("ff.w1")?)?;
        let h = self.tape.relu(h);
        self.tape.matmul(h, v("ff.w2")?)
    }
}
