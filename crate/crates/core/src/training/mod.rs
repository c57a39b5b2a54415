//! Staged optimization: backbone warm-up, fusion pre-training, then the generation
//! and recommendation subtasks. The backbone is frozen after the first stage.

pub mod backbone;
pub mod losses;
pub mod optim;
mod stage;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::data::synth::{CORPUS_FILE, ENTITIES_FILE, TRIPLES_FILE};
use crate::data::{split_corpus, sample_conversations, vocab, Dataset, DialogueCorpus, EntityLinker, KnowledgeGraph, Splits, Vocab};
use crate::encoders::{FrozenBackbone, Param};
use crate::error::{Error, Result};
use crate::fusion::EntityScoring;
use crate::prompts::PromptBank;
use crate::tensor::Float;

pub use backbone::{BackbonePretrainConfig, BackbonePretrainer};
pub use losses::{LossContext, Prepared, RecLoss};
pub use optim::{clip_global_norm, AdamW};
pub use stage::{generated_templates, metrics_file, prepare, prepare_stage, run_stage, StageParams, StageSummary, StageTrainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Backbone,
    Fuse,
    Gen,
    Rec,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Backbone => "backbone",
            StageKind::Fuse => "fuse",
            StageKind::Gen => "gen",
            StageKind::Rec => "rec",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(StageKind::Backbone),
            "fuse" => Ok(StageKind::Fuse),
            "gen" => Ok(StageKind::Gen),
            "rec" => Ok(StageKind::Rec),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Optimization settings for one stage.
///
/// Every key may be given as `<stage>.<key>` (e.g. `rec.lr`) to override the plain `<key>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Save the stage checkpoint every this many steps (0: only at the end).
    pub ckpt_every: usize,
    /// Validate every this many steps for early stopping (0: never).
    pub eval_every: usize,
    pub patience: usize,
    /// Cap on validation instances per evaluation.
    pub max_valid: usize,
    /// Use gold templates instead of generated ones when training recommendation.
    pub gold_template: bool,
    pub rec_loss: RecLoss,
    /// Entity scoring embeddings of the fusion pre-training loss.
    pub entity_scoring: EntityScoring,
    /// Train on only the first `subset` instances after a seeded shuffle (0: all).
    pub subset: usize,
    pub template_prob: f64,
    pub mask_prob: f64,
}

impl TrainConfig {
    pub fn defaults(stage: StageKind) -> Self {
        let (lr, batch_size, steps) = match stage {
            StageKind::Backbone => (1e-3, 8, 300),
            StageKind::Fuse => (5e-4, 8, 500),
            StageKind::Gen => (1e-4, 8, 500),
            StageKind::Rec => (1e-4, 64, 500),
        };
        Self {
            stage,
            lr,
            batch_size,
            steps,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            ckpt_every: 0,
            eval_every: 0,
            patience: 3,
            max_valid: 64,
            gold_template: false,
            rec_loss: RecLoss::Bce,
            entity_scoring: EntityScoring::Raw,
            subset: 0,
            template_prob: 0.5,
            mask_prob: 0.15,
        }
    }

    pub fn from_kv(kv: &KvConfig, stage: StageKind) -> Result<Self> {
        let d = Self::defaults(stage);
        let get = |key: &str| kv.get(&format!("{}.{key}", stage.name())).or_else(|| kv.get(key));
        fn parse<T: FromStr>(key: &str, v: Option<&str>, default: T) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            match v {
                None => Ok(default),
                Some(v) => v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
            }
        }
        let cfg = Self {
            stage,
            lr: parse("lr", get("lr"), d.lr)?,
            batch_size: parse("batch_size", get("batch_size"), d.batch_size)?,
            steps: parse("steps", get("steps"), d.steps)?,
            seed: parse("seed", get("seed"), d.seed)?,
            weight_decay: parse("weight_decay", get("weight_decay"), d.weight_decay)?,
            clip_norm: parse("clip_norm", get("clip_norm"), d.clip_norm)?,
            ckpt_every: parse("ckpt_every", get("ckpt_every"), d.ckpt_every)?,
            eval_every: parse("eval_every", get("eval_every"), d.eval_every)?,
            patience: parse("patience", get("patience"), d.patience)?,
            max_valid: parse("max_valid", get("max_valid"), d.max_valid)?,
            gold_template: parse("gold_template", get("gold_template"), d.gold_template)?,
            rec_loss: parse("rec_loss", get("rec_loss"), d.rec_loss)?,
            entity_scoring: parse("entity_scoring", get("entity_scoring"), d.entity_scoring)?,
            subset: parse("subset", get("subset"), d.subset)?,
            template_prob: parse("template_prob", get("template_prob"), d.template_prob)?,
            mask_prob: parse("mask_prob", get("mask_prob"), d.mask_prob)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "stage {}: lr, batch_size and clip_norm must be positive and weight_decay non-negative",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn backbone_pretrain(&self) -> BackbonePretrainConfig {
        BackbonePretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
            template_prob: self.template_prob,
            mask_prob: self.mask_prob,
        }
    }
}

/// Where the data lives and how it is split.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub split_seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Fraction of training conversations kept (data-scarcity runs).
    pub train_proportion: f64,
    pub sample_seed: u64,
}

impl DataConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let cfg = Self {
            data_dir: PathBuf::from(kv.get("data_dir").unwrap_or("data")),
            split_seed: kv.get_or("split_seed", 0)?,
            valid_fraction: kv.get_or("valid_fraction", 0.1)?,
            test_fraction: kv.get_or("test_fraction", 0.1)?,
            train_proportion: kv.get_or("train_proportion", 1.0)?,
            sample_seed: kv.get_or("sample_seed", 0)?,
        };
        let frac = |x: f64| (0.0..1.0).contains(&x);
        if !frac(cfg.valid_fraction) || !frac(cfg.test_fraction) || cfg.valid_fraction + cfg.test_fraction >= 1.0 {
            return Err(Error::Config("valid_fraction and test_fraction must be in [0, 1) and sum below 1".into()));
        }
        if !(cfg.train_proportion > 0.0 && cfg.train_proportion <= 1.0) {
            return Err(Error::Config(format!("train_proportion {} must be in (0, 1]", cfg.train_proportion)));
        }
        Ok(cfg)
    }
}

/// A dataset split into train/valid/test conversations.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub kg: KnowledgeGraph,
    pub linker: EntityLinker,
    pub splits: Splits,
}

impl Experiment {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let dir = &cfg.data_dir;
        let ds = Dataset::load(&dir.join(CORPUS_FILE), &dir.join(TRIPLES_FILE), &dir.join(ENTITIES_FILE))?;
        Ok(Self::from_dataset(ds, cfg))
    }

    pub fn from_dataset(ds: Dataset, cfg: &DataConfig) -> Self {
        let mut splits = split_corpus(&ds.corpus, cfg.split_seed, cfg.valid_fraction, cfg.test_fraction);
        splits.train = sample_conversations(&splits.train, cfg.train_proportion, cfg.sample_seed);
        Self {
            kg: ds.kg,
            linker: ds.linker,
            splits,
        }
    }

    /// Vocabulary over the training conversations and every entity name.
    pub fn build_vocab(&self) -> Vocab {
        build_vocab(&self.splits.train, &self.kg)
    }
}

pub fn build_vocab(corpus: &DialogueCorpus, kg: &KnowledgeGraph) -> Vocab {
    let names: Vec<String> = kg.names.iter().flat_map(|n| vocab::words(n)).collect();
    Vocab::build(corpus.words().chain(names.iter().map(String::as_str)))
}

/// Fresh soft-prompt banks (see [`PromptBank::init`]).
pub fn init_prompts<F: Float>(backbone: &FrozenBackbone<F>, seed: u64, len_gen: usize, len_rec: usize) -> PromptBank<Param<F>> {
    PromptBank::init(backbone, seed, len_gen, len_rec)
}

/// Seed-deterministic epoch shuffler.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    /// Next `size` indices; the whole set (in index order) when `size` covers it.
    pub fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if size >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
