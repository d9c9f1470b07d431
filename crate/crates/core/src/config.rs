//! Experiment configuration.  One TOML file drives every pipeline stage, so
//! a run is reproducible from its config alone.
//!
//! Keys that only make sense under some update regime (adapter rank, gate
//! threshold, anchor schedule) are optional in the file and rejected when
//! they contradict the chosen regime — a config that says `regime =
//! "finetune"` but also sets `rank` is a mistake worth stopping on, not a
//! value worth ignoring.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, Placement, PlacementPolicy};
use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::train::{PretrainOpts, RecAdamSched, Regime, TrainParams};
use crate::world::SplitSpec;

fn default_out_dir() -> String {
    "runs/exp".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub update: UpdateSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_source: usize,
    pub target_sizes: Vec<usize>,
    pub conflict_fraction: f64,
    pub paraphrases_per_source_fact: usize,
    pub paraphrases_per_target_fact: usize,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let s = SplitSpec::toy(17);
        WorldSection {
            n_source: s.n_source,
            target_sizes: s.target_sizes,
            conflict_fraction: s.conflict_fraction,
            paraphrases_per_source_fact: s.paraphrases_per_source_fact,
            paraphrases_per_target_fact: s.paraphrases_per_target_fact,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = TransformerConfig::toy(0);
        ModelSection {
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            max_seq_len: c.max_seq_len,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once a held-out sample of the training set reaches this EM...
    pub target_em: f64,
    /// ...and the epoch loss has fallen this far.
    pub loss_target: f64,
    /// Epochs without a new loss low before giving up.
    pub patience: usize,
    /// Fraction of the training set scored as the dev sample.
    pub dev_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lr: 0.004,
            epochs: 600,
            batch_size: 16,
            seed: 23,
            target_em: 0.99,
            loss_target: 0.05,
            patience: 60,
            dev_fraction: 0.125,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateSection {
    pub regime: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Low-rank width; adapter regimes only.
    pub rank: Option<usize>,
    /// "attention_qv" | "feed_forward" | "all"; adapter regimes only.
    pub placement: Option<String>,
    /// Gate threshold; gated regimes only.  Ignored when `sweep` is on.
    pub delta: Option<f64>,
    /// Pick the gate threshold by sweeping dev harmonic mean.
    pub sweep: Option<bool>,
    /// Anchor schedule; "recadam" only.
    pub recadam_k: Option<f64>,
    pub recadam_t0: Option<f64>,
    pub recadam_p: Option<u8>,
}

impl Default for UpdateSection {
    fn default() -> Self {
        UpdateSection {
            regime: "gated_lora".into(),
            lr: 0.03,
            epochs: 60,
            batch_size: 8,
            seed: 31,
            rank: None,
            placement: None,
            delta: None,
            sweep: None,
            recadam_k: None,
            recadam_t0: None,
            recadam_p: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Greedy decode budget per answer.
    pub max_answer_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_answer_len: 4 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: default_out_dir(),
            world: WorldSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            update: UpdateSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_source: self.world.n_source,
            target_sizes: self.world.target_sizes.clone(),
            conflict_fraction: self.world.conflict_fraction,
            paraphrases_per_source_fact: self.world.paraphrases_per_source_fact,
            paraphrases_per_target_fact: self.world.paraphrases_per_target_fact,
            seed: self.world.seed,
        }
    }

    pub fn model_cfg(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            n_enc_layers: self.model.n_enc_layers,
            n_dec_layers: self.model.n_dec_layers,
            max_seq_len: self.model.max_seq_len,
            vocab_size,
        }
    }

    pub fn pretrain_opts(&self) -> PretrainOpts {
        PretrainOpts {
            params: TrainParams {
                lr: self.pretrain.lr,
                epochs: self.pretrain.epochs,
                batch_size: self.pretrain.batch_size,
                seed: self.pretrain.seed,
                max_answer_len: self.eval.max_answer_len,
            },
            target_em: self.pretrain.target_em,
            loss_target: self.pretrain.loss_target,
            patience: self.pretrain.patience,
        }
    }

    pub fn update_params(&self) -> TrainParams {
        TrainParams {
            lr: self.update.lr,
            epochs: self.update.epochs,
            batch_size: self.update.batch_size,
            seed: self.update.seed,
            max_answer_len: self.eval.max_answer_len,
        }
    }

    pub fn regime(&self) -> Result<Regime> {
        match self.update.regime.as_str() {
            "finetune" => Ok(Regime::FineTune),
            "recadam" => Ok(Regime::RecAdamLike),
            "lora" => Ok(Regime::AdapterOnly(AdapterKind::LowRank)),
            "gated_lora" => Ok(Regime::GatedPlugin(AdapterKind::LowRank)),
            "kadapter" => Ok(Regime::AdapterOnly(AdapterKind::KnowledgeLayer)),
            "gated_kadapter" => Ok(Regime::GatedPlugin(AdapterKind::KnowledgeLayer)),
            other => Err(Error::Config(format!(
                "unknown regime '{}' (expected finetune, recadam, lora, gated_lora, \
                 kadapter, or gated_kadapter)",
                other
            ))),
        }
    }

    /// Adapter shape for the regimes that train one.
    pub fn policy(&self) -> Result<PlacementPolicy> {
        let kind = match self.regime()? {
            Regime::AdapterOnly(k) | Regime::GatedPlugin(k) => k,
            _ => {
                return Err(Error::Config(format!(
                    "regime '{}' trains no adapters",
                    self.update.regime
                )))
            }
        };
        let placement = match self.update.placement.as_deref() {
            None => Placement::FeedForward,
            Some("attention_qv") => Placement::AttentionQv,
            Some("feed_forward") => Placement::FeedForward,
            Some("all") => Placement::All,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown placement '{}' (expected attention_qv, feed_forward, or all)",
                    other
                )))
            }
        };
        Ok(PlacementPolicy { kind, placement, rank: self.update.rank.unwrap_or(4) })
    }

    pub fn recadam_sched(&self) -> RecAdamSched {
        RecAdamSched {
            k: self.update.recadam_k.unwrap_or(0.05),
            t0: self.update.recadam_t0,
            p: self.update.recadam_p.unwrap_or(2),
            forced_lambda: None,
        }
    }

    /// Sweep the gate threshold unless the config pins one.
    pub fn sweep_delta(&self) -> bool {
        self.update.sweep.unwrap_or(self.update.delta.is_none())
    }

    pub fn delta(&self) -> f64 {
        self.update.delta.unwrap_or(0.5)
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        self.model_cfg(usize::MAX).validate()?;
        self.pretrain_opts().params.validate()?;
        self.update_params().validate()?;
        if !(0.0 < self.pretrain.dev_fraction && self.pretrain.dev_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "dev_fraction {} outside (0, 1]",
                self.pretrain.dev_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain.target_em) {
            return Err(Error::Config(format!(
                "target_em {} outside [0, 1]",
                self.pretrain.target_em
            )));
        }
        if self.eval.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be positive".into()));
        }

        let regime = self.regime()?;
        let is_adapter = regime.adapter_kind().is_some();
        let is_gated = regime.is_gated();
        if !is_adapter {
            for (key, set) in [
                ("rank", self.update.rank.is_some()),
                ("placement", self.update.placement.is_some()),
            ] {
                if set {
                    return Err(Error::Config(format!(
                        "'{}' is an adapter knob; regime '{}' trains the full model",
                        key, self.update.regime
                    )));
                }
            }
        } else {
            self.policy()?;
        }
        if !is_gated {
            for (key, set) in [
                ("delta", self.update.delta.is_some()),
                ("sweep", self.update.sweep.is_some()),
            ] {
                if set {
                    return Err(Error::Config(format!(
                        "'{}' configures the gate; regime '{}' never routes",
                        key, self.update.regime
                    )));
                }
            }
        } else if let Some(d) = self.update.delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("delta {} outside [0, 1]", d)));
            }
        }
        if regime != Regime::RecAdamLike {
            for (key, set) in [
                ("recadam_k", self.update.recadam_k.is_some()),
                ("recadam_t0", self.update.recadam_t0.is_some()),
                ("recadam_p", self.update.recadam_p.is_some()),
            ] {
                if set {
                    return Err(Error::Config(format!(
                        "'{}' belongs to the recadam regime, not '{}'",
                        key, self.update.regime
                    )));
                }
            }
        } else {
            self.recadam_sched().validate()?;
        }
        Ok(())
    }

    /// Canonical JSON of the effective config — the run's identity.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
