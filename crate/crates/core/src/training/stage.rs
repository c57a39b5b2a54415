use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossContext, Prepared};
use super::optim::{clip_global_norm, AdamW};
use super::{BackbonePretrainer, Batcher, Experiment, StageKind, TrainConfig};
use crate::config::KvConfig;
use crate::data::instances::make_instances;
use crate::data::vocab::{self, TokenId, Vocab};
use crate::data::{EntityId, KnowledgeGraph, Stage, TrainingInstance};
use crate::encoders::backbone::VOCAB_FILE;
use crate::encoders::{BackboneConfig, FrozenBackbone, GraphStructure, Param};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::fusion::{FusionParams, Pooling, FUSION_PREFIX};
use crate::model::{
    fusion_shape, generate_with, load_fusion, rank_with, ModelConfig, StageWeights, FUSION_FILE, GEN_FILE,
    KG_ENTITIES_FILE, KG_FILE, MODEL_CONFIG_FILE, REC_FILE,
};
use crate::prompts::{soft_tokens, DecodeConfig, PROMPT_GEN, PROMPT_REC};
use crate::tensor::{Float, Graph, Mat, Var};
use crate::checkpoint::TensorArchive;

/// Tunable parameters of one stage: a fusion copy and, for the subtasks, a soft prompt.
#[derive(Clone, Debug)]
pub struct StageParams<T> {
    pub fusion: FusionParams<T>,
    pub prompt: Option<T>,
}

impl<T> StageParams<T> {
    pub fn map<U>(&self, prompt_name: &str, f: &mut impl FnMut(&str, &T) -> U) -> StageParams<U> {
        StageParams {
            fusion: self.fusion.map(FUSION_PREFIX, f),
            prompt: self.prompt.as_ref().map(|p| f(prompt_name, p)),
        }
    }

    pub fn visit_mut(&mut self, prompt_name: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.fusion.visit_mut(FUSION_PREFIX, f);
        if let Some(p) = self.prompt.as_mut() {
            f(prompt_name, p);
        }
    }
}

pub fn prompt_name(kind: StageKind) -> &'static str {
    match kind {
        StageKind::Rec => PROMPT_REC,
        _ => PROMPT_GEN,
    }
}

/// Single-writer optimizer loop over one stage's tunables with the backbone held fixed.
pub struct StageTrainer<F: Float> {
    pub kind: StageKind,
    pub params: StageParams<Param<F>>,
    pub backbone: Arc<FrozenBackbone<F>>,
    pub structure: GraphStructure<F>,
    pub item_ids: Vec<EntityId>,
    pub pooling: Pooling,
    pub cfg: TrainConfig,
    pub data: Vec<Prepared<F>>,
    pub losses: Vec<f64>,
    eos: TokenId,
    opt: AdamW<F>,
    batcher: Batcher,
}

impl<F: Float> StageTrainer<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: StageKind,
        backbone: Arc<FrozenBackbone<F>>,
        kg: &KnowledgeGraph,
        vocab: &Vocab,
        model: &ModelConfig,
        cfg: TrainConfig,
        params: StageParams<Param<F>>,
        data: Vec<Prepared<F>>,
    ) -> Result<Self> {
        if kind == StageKind::Backbone {
            return Err(Error::InvalidArgument("the backbone stage has its own trainer".into()));
        }
        if data.is_empty() {
            return Err(Error::Empty("stage training instances"));
        }
        if (kind == StageKind::Fuse) != params.prompt.is_none() {
            return Err(Error::InvalidArgument(format!("stage {kind} has the wrong parameter groups")));
        }
        cfg.validate()?;
        let structure = GraphStructure::from_kg(kg);
        params.fusion.graph.check(&structure)?;
        Ok(Self {
            kind,
            batcher: Batcher::new(data.len(), cfg.seed),
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
            eos: vocab.special(vocab::EOS),
            item_ids: kg.item_ids.clone(),
            pooling: model.pooling,
            params,
            backbone,
            structure,
            cfg,
            data,
            losses: Vec::new(),
        })
    }

    pub fn loss_context(&self) -> LossContext<'_, F> {
        LossContext {
            backbone: &self.backbone,
            structure: &self.structure,
            item_ids: &self.item_ids,
            pooling: self.pooling,
            eos: self.eos,
            rec_loss: self.cfg.rec_loss,
            scoring: self.cfg.entity_scoring,
        }
    }

    /// Builds the stage loss over `batch` for the given parameters.
    pub fn build_loss(
        &self,
        g: &mut Graph<F>,
        params: &StageParams<Param<F>>,
        batch: &[&Prepared<F>],
    ) -> Result<(Var, StageParams<Var>)> {
        let ctx = self.loss_context();
        let b = ctx.bind(g, &params.fusion, params.prompt.as_ref())?;
        let loss = match self.kind {
            StageKind::Fuse => ctx.fuse_loss(g, &b, batch)?,
            StageKind::Gen => ctx.gen_loss(g, &b, batch)?,
            StageKind::Rec => ctx.rec_loss(g, &b, batch)?,
            StageKind::Backbone => unreachable!("rejected in new"),
        };
        Ok((
            loss,
            StageParams {
                fusion: b.fusion,
                prompt: b.prompt,
            },
        ))
    }

    /// Loss and named gradients of `batch` (no update).
    pub fn gradients(&self, batch: &[usize]) -> Result<(f64, BTreeMap<String, Mat<F>>)> {
        let items: Vec<&Prepared<F>> = batch.iter().map(|&i| &self.data[i]).collect();
        let mut g = Graph::new();
        let (loss, vars) = self.build_loss(&mut g, &self.params, &items)?;
        let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        let mut grads = g.backward(loss);
        let mut named = BTreeMap::new();
        vars.map(prompt_name(self.kind), &mut |n, v| {
            if let Some(gr) = grads.take(*v) {
                named.insert(n.to_string(), gr);
            }
        });
        Ok((value, named))
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batcher.next(self.cfg.batch_size);
        let (value, mut grads) = self.gradients(&batch)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: self.kind.name().into(),
                step: self.losses.len() + 1,
                last: self.losses.last().copied(),
            });
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.opt.begin_step();
        let opt = &mut self.opt;
        self.params
            .visit_mut(prompt_name(self.kind), &mut |n, p| opt.update(n, p, grads.get(n)));
        self.losses.push(value);
        Ok(value)
    }

    /// Mean stage loss over `data` in chunks of the training batch size (no update).
    pub fn eval_loss(&self, data: &[Prepared<F>]) -> Result<f64> {
        let mut total = 0.0;
        let mut weight = 0.0;
        for chunk in data.chunks(self.cfg.batch_size.max(1)) {
            let items: Vec<&Prepared<F>> = chunk.iter().collect();
            let mut g = Graph::new();
            let (loss, _) = self.build_loss(&mut g, &self.params, &items)?;
            let v = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
            // Rec losses are sums over the chunk; the others are means.
            let w = if self.kind == StageKind::Rec { 1.0 } else { chunk.len() as f64 };
            total += v * w;
            weight += chunk.len() as f64;
        }
        Ok(total / weight.max(1.0))
    }

    pub fn weights(&self) -> Option<StageWeights<F>> {
        self.params.prompt.as_ref().map(|p| StageWeights {
            fusion: self.params.fusion.clone(),
            prompt: p.clone(),
        })
    }

    /// Full catalog ranking for each recommendation instance under the current parameters.
    pub fn rankings(&self, data: &[Prepared<F>]) -> Result<Vec<Vec<EntityId>>> {
        let weights = self
            .weights()
            .ok_or_else(|| Error::InvalidArgument("ranking needs a recommendation prompt".into()))?;
        let table = weights.fusion.entity_table(&self.structure)?;
        data.iter()
            .map(|p| {
                let r = rank_with(
                    &self.backbone,
                    &weights,
                    &table,
                    &self.item_ids,
                    self.pooling,
                    &p.instance.context_tokens,
                    &p.instance.context_entities,
                    &p.continuation,
                )?;
                Ok(r.into_iter().map(|x| x.0).collect())
            })
            .collect()
    }

    /// Recall@{1,10,50} over `data`.
    pub fn recall(&self, data: &[Prepared<F>]) -> Result<[f64; 3]> {
        let ranked = self.rankings(data)?;
        let targets: Vec<Vec<EntityId>> = data.iter().map(|p| p.instance.target_items.clone()).collect();
        Ok([
            recall_at_k(&ranked, &targets, 1)?,
            recall_at_k(&ranked, &targets, 10)?,
            recall_at_k(&ranked, &targets, 50)?,
        ])
    }

    /// Validation score, higher is better, compared lexicographically.
    pub fn validation_score(&self, valid: &[Prepared<F>]) -> Result<Vec<f64>> {
        Ok(match self.kind {
            StageKind::Rec => {
                let [r1, r10, r50] = self.recall(valid)?;
                vec![r50, r10, r1]
            }
            _ => vec![-self.eval_loss(valid)?],
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self.kind {
            StageKind::Fuse => {
                let mut a = TensorArchive::new();
                self.params.fusion.export(FUSION_PREFIX, &mut a);
                a.save(&dir.join(FUSION_FILE))
            }
            StageKind::Gen | StageKind::Rec => {
                let file = if self.kind == StageKind::Gen { GEN_FILE } else { REC_FILE };
                self.weights()
                    .expect("subtask prompt")
                    .save(&dir.join(file), prompt_name(self.kind))
            }
            StageKind::Backbone => unreachable!("rejected in new"),
        }
    }
}

/// Attaches the stage-specific continuation to each instance and precomputes encoder outputs.
pub fn prepare<F: Float>(
    backbone: &FrozenBackbone<F>,
    kg: &KnowledgeGraph,
    instances: Vec<TrainingInstance>,
    continuations: Vec<Vec<TokenId>>,
) -> Result<Vec<Prepared<F>>> {
    instances
        .into_iter()
        .zip(continuations)
        .map(|(i, c)| Prepared::new(backbone, i, c, &|e| kg.item_index(e)))
        .collect()
}

/// Greedy templates from the generation weights, used as `S` when training recommendation.
pub fn generated_templates<F: Float>(
    backbone: &FrozenBackbone<F>,
    gen: &StageWeights<F>,
    kg: &KnowledgeGraph,
    vocab: &Vocab,
    model: &ModelConfig,
    instances: &[TrainingInstance],
) -> Result<Vec<Vec<TokenId>>> {
    let table = gen.fusion.entity_table(&GraphStructure::from_kg(kg))?;
    instances
        .iter()
        .map(|i| {
            generate_with(
                backbone,
                gen,
                &table,
                vocab,
                model,
                &i.context_tokens,
                &i.context_entities,
                DecodeConfig::Greedy,
            )
            .map(|t| t.tokens)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageKind,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub best_step: Option<usize>,
    pub best_score: Option<Vec<f64>>,
    pub stopped_early: bool,
    pub backbone_digest: String,
}

pub fn metrics_file(dir: &Path, stage: StageKind) -> PathBuf {
    dir.join(format!("metrics_{}.jsonl", stage.name()))
}

#[derive(Serialize)]
struct MetricLine {
    step: usize,
    loss: f64,
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn write(&mut self, step: usize, loss: f64) -> Result<()> {
        let line = serde_json::to_string(&MetricLine { step, loss }).expect("metric serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn subset(mut instances: Vec<TrainingInstance>, n: usize, seed: u64) -> Vec<TrainingInstance> {
    if n == 0 || n >= instances.len() {
        return instances;
    }
    instances.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    instances.truncate(n);
    instances
}

fn stage_filter(kind: StageKind) -> Stage {
    match kind {
        StageKind::Fuse => Stage::FusePretrain,
        StageKind::Rec => Stage::Recommendation,
        StageKind::Backbone | StageKind::Gen => Stage::Generation,
    }
}

fn load_backbone(dir: &Path, kind: StageKind) -> Result<FrozenBackbone<f32>> {
    FrozenBackbone::load(dir).map_err(|e| match e {
        Error::Staging { missing, .. } => Error::Staging {
            stage: kind.name().into(),
            missing,
        },
        other => other,
    })
}

fn require(path: &Path, kind: StageKind) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Staging {
            stage: kind.name().into(),
            missing: path.display().to_string(),
        })
    }
}

fn check_prerequisites(dir: &Path, kind: StageKind) -> Result<()> {
    match kind {
        StageKind::Backbone => Ok(()),
        StageKind::Fuse => require(&dir.join(crate::encoders::backbone::BACKBONE_FILE), kind),
        StageKind::Gen => require(&dir.join(FUSION_FILE), kind),
        StageKind::Rec => {
            require(&dir.join(FUSION_FILE), kind)?;
            require(&dir.join(GEN_FILE), kind)
        }
    }
}

/// Runs one training stage end to end and writes its checkpoint and metrics into `dir`.
///
/// Stage order is backbone, fuse, gen, rec; each stage fails with a staging error when
/// its predecessor's checkpoint is absent.
pub fn run_stage(exp: &Experiment, kv: &KvConfig, kind: StageKind, seed: u64, dir: &Path) -> Result<StageSummary> {
    let mut cfg = TrainConfig::from_kv(kv, kind)?;
    cfg.seed = seed;
    let model = ModelConfig::from_kv(kv)?;
    check_prerequisites(dir, kind)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut run_kv = kv.clone();
    run_kv.set("seed", seed);
    run_kv.save(&dir.join(format!("run_{}.cfg", kind.name())))?;
    let mut log = MetricsLog::create(metrics_file(dir, kind))?;

    if kind == StageKind::Backbone {
        let vocab = exp.build_vocab();
        let mut arch = BackboneConfig::from_kv(kv)?;
        arch.vocab_size = vocab.len();
        let instances = make_instances(&exp.splits.train, &vocab, &exp.kg, Stage::Generation, model.max_context_tokens);
        let instances = subset(instances, cfg.subset, seed);
        let mut trainer = BackbonePretrainer::<f32>::new(arch, &vocab, &instances, cfg.backbone_pretrain())?;
        for step in 1..=cfg.steps {
            let loss = trainer.step()?;
            log.write(step, loss)?;
        }
        log.finish()?;
        let losses = trainer.losses.clone();
        let backbone = trainer.finish();
        backbone.save(dir)?;
        vocab.save(&dir.join(VOCAB_FILE))?;
        exp.kg.save(&dir.join(KG_FILE), &dir.join(KG_ENTITIES_FILE))?;
        return Ok(StageSummary {
            stage: kind,
            steps: losses.len(),
            losses,
            best_step: None,
            best_score: None,
            stopped_early: false,
            backbone_digest: backbone.digest().to_string(),
        });
    }

    let (mut trainer, valid) = prepare_stage(exp, kv, kind, seed, dir)?;
    let digest = trainer.backbone.digest().to_string();
    let mut best: Option<(Vec<f64>, usize, StageParams<Param<f32>>)> = None;
    let mut bad = 0;
    let mut stopped_early = false;
    for step in 1..=cfg.steps {
        let loss = trainer.step()?;
        log.write(step, loss)?;
        trainer.backbone.verify_frozen(kind.name())?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !valid.is_empty() {
            let score = trainer.validation_score(&valid)?;
            tracing::info!(stage = kind.name(), step, ?score, "validation");
            let improved = best.as_ref().is_none_or(|(b, _, _)| score.partial_cmp(b) == Some(std::cmp::Ordering::Greater));
            if improved {
                best = Some((score, step, trainer.params.clone()));
                bad = 0;
            } else {
                bad += 1;
                if bad >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 {
            trainer.save(dir)?;
        }
    }
    log.finish()?;
    let (best_score, best_step) = match best {
        Some((score, step, params)) => {
            trainer.params = params;
            (Some(score), Some(step))
        }
        None => (None, None),
    };
    trainer.save(dir)?;
    model.to_kv().save(&dir.join(MODEL_CONFIG_FILE))?;
    trainer.backbone.verify_frozen(kind.name())?;
    if load_backbone(dir, kind)?.digest() != digest {
        return Err(Error::FrozenViolation(kind.name().into()));
    }
    Ok(StageSummary {
        stage: kind,
        steps: trainer.losses.len(),
        losses: trainer.losses,
        best_step,
        best_score,
        stopped_early,
        backbone_digest: digest,
    })
}

/// Loads the prerequisites of a fuse, gen or rec stage from `dir` and builds its trainer
/// together with the prepared validation instances.
pub fn prepare_stage(
    exp: &Experiment,
    kv: &KvConfig,
    kind: StageKind,
    seed: u64,
    dir: &Path,
) -> Result<(StageTrainer<f32>, Vec<Prepared<f32>>)> {
    if kind == StageKind::Backbone {
        return Err(Error::InvalidArgument("the backbone stage has its own trainer".into()));
    }
    check_prerequisites(dir, kind)?;
    let mut cfg = TrainConfig::from_kv(kv, kind)?;
    cfg.seed = seed;
    let model = ModelConfig::from_kv(kv)?;
    let backbone = Arc::new(load_backbone(dir, kind)?);
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let kg = &exp.kg;
    let shape = fusion_shape(&backbone, kg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match kind {
        StageKind::Fuse => StageParams {
            fusion: FusionParams::init(
                &mut rng,
                kg.num_entities(),
                kg.num_relations(),
                backbone.config.enc_d_model,
                backbone.config.d_model,
            ),
            prompt: None,
        },
        StageKind::Gen | StageKind::Rec => {
            let len = if kind == StageKind::Gen { model.prompt_len_gen } else { model.prompt_len_rec };
            StageParams {
                fusion: load_fusion(&dir.join(FUSION_FILE), &shape, kind.name())?,
                prompt: Some(soft_tokens(&backbone.decoder.tok_emb, len, &mut rng)),
            }
        }
        StageKind::Backbone => unreachable!(),
    };

    let filter = stage_filter(kind);
    let train = subset(
        make_instances(&exp.splits.train, &vocab, kg, filter, model.max_context_tokens),
        cfg.subset,
        seed,
    );
    let mut valid = if cfg.eval_every > 0 {
        make_instances(&exp.splits.valid, &vocab, kg, filter, model.max_context_tokens)
    } else {
        Vec::new()
    };
    valid.truncate(cfg.max_valid);
    let gen_weights = if kind == StageKind::Rec && !cfg.gold_template {
        Some(StageWeights::load(&dir.join(GEN_FILE), PROMPT_GEN, &shape, kind.name())?)
    } else {
        None
    };
    let continuations = |set: &[TrainingInstance]| -> Result<Vec<Vec<TokenId>>> {
        match kind {
            StageKind::Fuse => Ok(set.iter().map(|i| i.target_response.clone()).collect()),
            StageKind::Gen => Ok(set.iter().map(|i| i.target_template.clone()).collect()),
            _ => match &gen_weights {
                Some(gw) => generated_templates(&backbone, gw, kg, &vocab, &model, set),
                None => Ok(set.iter().map(|i| i.target_template.clone()).collect()),
            },
        }
    };
    let train_c = continuations(&train)?;
    let valid_c = continuations(&valid)?;
    let data = prepare(&backbone, kg, train, train_c)?;
    let valid = prepare(&backbone, kg, valid, valid_c)?;

    let trainer = StageTrainer::new(kind, backbone.clone(), kg, &vocab, &model, cfg, params, data)?;
    Ok((trainer, valid))
}
