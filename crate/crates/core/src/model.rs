//! The assembled recommender: frozen backbone plus the tuned fusion and prompt weights
//! of the generation and recommendation subtasks.

use std::path::Path;
use std::sync::Arc;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::config::KvConfig;
use crate::data::instances::DEFAULT_MAX_CONTEXT_TOKENS;
use crate::data::{EntityId, EntityLinker, KnowledgeGraph, TokenId, Vocab};
use crate::encoders::backbone::VOCAB_FILE;
use crate::encoders::{FrozenBackbone, GraphStructure, Param};
use crate::error::{Error, Result};
use crate::fusion::{fuse, pool_context, FusedRepresentations, FusionParams, Pooling, FUSION_PREFIX};
use crate::prompts::{
    assemble_gen, assemble_rec, fill_template, generate_template, rank_items, DecodeConfig, Template,
    DEFAULT_PROMPT_LEN_GEN, DEFAULT_PROMPT_LEN_REC, PROMPT_GEN, PROMPT_REC,
};
use crate::tensor::{Float, Mat};

pub const FUSION_FILE: &str = "fusion.tsa";
pub const GEN_FILE: &str = "gen.tsa";
pub const REC_FILE: &str = "rec.tsa";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const KG_FILE: &str = "kg.tsv";
pub const KG_ENTITIES_FILE: &str = "entities.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub prompt_len_gen: usize,
    pub prompt_len_rec: usize,
    pub pooling: Pooling,
    pub max_new_tokens: usize,
    pub decode: DecodeConfig,
    pub max_context_tokens: usize,
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_len_gen: DEFAULT_PROMPT_LEN_GEN,
            prompt_len_rec: DEFAULT_PROMPT_LEN_REC,
            pooling: Pooling::Last,
            max_new_tokens: 32,
            decode: DecodeConfig::Greedy,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            top_k: 3,
        }
    }
}

impl ModelConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            prompt_len_gen: kv.get_or("prompt_len_gen", d.prompt_len_gen)?,
            prompt_len_rec: kv.get_or("prompt_len_rec", d.prompt_len_rec)?,
            pooling: kv.get_or("pooling", d.pooling)?,
            max_new_tokens: kv.get_or("max_new_tokens", d.max_new_tokens)?,
            decode: kv.get_or("decode", d.decode)?,
            max_context_tokens: kv.get_or("max_context_tokens", d.max_context_tokens)?,
            top_k: kv.get_or("top_k", d.top_k)?,
        };
        if cfg.max_context_tokens == 0 {
            return Err(Error::Config("max_context_tokens must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("prompt_len_gen", self.prompt_len_gen);
        kv.set("prompt_len_rec", self.prompt_len_rec);
        kv.set("pooling", self.pooling);
        kv.set("max_new_tokens", self.max_new_tokens);
        kv.set("decode", self.decode);
        kv.set("max_context_tokens", self.max_context_tokens);
        kv.set("top_k", self.top_k);
        kv
    }
}

/// Fusion copy plus soft prompt tuned by one subtask.
#[derive(Clone, Debug)]
pub struct StageWeights<F> {
    pub fusion: FusionParams<Param<F>>,
    pub prompt: Param<F>,
}

impl<F: Float> StageWeights<F> {
    pub fn save(&self, path: &Path, prompt_name: &str) -> Result<()> {
        let mut a = TensorArchive::new();
        self.fusion.export(FUSION_PREFIX, &mut a);
        a.insert(prompt_name, &self.prompt);
        a.save(path)
    }

    /// Loads into the shapes of `fusion_shape`; the prompt keeps whatever length was stored.
    pub fn load(path: &Path, prompt_name: &str, fusion_shape: &FusionParams<Param<F>>, stage: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Staging {
                stage: stage.into(),
                missing: path.display().to_string(),
            });
        }
        let a = TensorArchive::load(path)?;
        let mut fusion = fusion_shape.clone();
        fusion.import(FUSION_PREFIX, &a)?;
        let prompt = Arc::new(a.get(prompt_name)?);
        Ok(Self { fusion, prompt })
    }
}

pub fn load_fusion<F: Float>(path: &Path, shape: &FusionParams<Param<F>>, stage: &str) -> Result<FusionParams<Param<F>>> {
    if !path.exists() {
        return Err(Error::Staging {
            stage: stage.into(),
            missing: path.display().to_string(),
        });
    }
    let a = TensorArchive::load(path)?;
    let mut fusion = shape.clone();
    fusion.import(FUSION_PREFIX, &a)?;
    Ok(fusion)
}

/// Shape-only fusion parameters for a backbone and knowledge graph (values are overwritten on load).
pub fn fusion_shape<F: Float>(backbone: &FrozenBackbone<F>, kg: &KnowledgeGraph) -> FusionParams<Param<F>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    FusionParams::init(
        &mut rng,
        kg.num_entities(),
        kg.num_relations(),
        backbone.config.enc_d_model,
        backbone.config.d_model,
    )
}

/// Result of one pass through template generation, ranking and slot filling.
#[derive(Clone, Debug, PartialEq)]
pub struct Response<F> {
    pub template: Template,
    /// Every catalog item by descending probability; empty when the template has no slots.
    pub ranked: Vec<(EntityId, F)>,
    pub words: Vec<String>,
}

/// The full recommender used for evaluation and serving. Immutable once built.
#[derive(Clone, Debug)]
pub struct Crs<F: Float> {
    pub backbone: Arc<FrozenBackbone<F>>,
    pub vocab: Vocab,
    pub kg: KnowledgeGraph,
    pub linker: EntityLinker,
    pub structure: GraphStructure<F>,
    pub config: ModelConfig,
    pub gen: StageWeights<F>,
    pub rec: StageWeights<F>,
    gen_entities: Mat<F>,
    rec_entities: Mat<F>,
}

impl<F: Float> Crs<F> {
    pub fn new(
        backbone: Arc<FrozenBackbone<F>>,
        vocab: Vocab,
        kg: KnowledgeGraph,
        config: ModelConfig,
        gen: StageWeights<F>,
        rec: StageWeights<F>,
    ) -> Result<Self> {
        let structure = GraphStructure::from_kg(&kg);
        let gen_entities = gen.fusion.entity_table(&structure)?;
        let rec_entities = rec.fusion.entity_table(&structure)?;
        let linker = EntityLinker::from_kg(&kg);
        Ok(Self {
            backbone,
            vocab,
            kg,
            linker,
            structure,
            config,
            gen,
            rec,
            gen_entities,
            rec_entities,
        })
    }

    /// Loads a checkpoint directory holding every stage's output.
    pub fn load(dir: &Path) -> Result<Self> {
        let backbone = Arc::new(FrozenBackbone::load(dir)?);
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let kg = KnowledgeGraph::load(&dir.join(KG_FILE), &dir.join(KG_ENTITIES_FILE))?;
        let cfg_path = dir.join(MODEL_CONFIG_FILE);
        let config = if cfg_path.exists() {
            ModelConfig::from_kv(&KvConfig::load(&cfg_path)?)?
        } else {
            ModelConfig::default()
        };
        let shape = fusion_shape(&backbone, &kg);
        let gen = StageWeights::load(&dir.join(GEN_FILE), PROMPT_GEN, &shape, "eval")?;
        let rec = StageWeights::load(&dir.join(REC_FILE), PROMPT_REC, &shape, "eval")?;
        Self::new(backbone, vocab, kg, config, gen, rec)
    }

    pub fn generate(&self, context: &[TokenId], entities: &[EntityId], decode: DecodeConfig) -> Result<Template> {
        generate_with(
            &self.backbone,
            &self.gen,
            &self.gen_entities,
            &self.vocab,
            &self.config,
            context,
            entities,
            decode,
        )
    }

    /// Full catalog ranking for the recommendation prompt built around `template`.
    pub fn rank(&self, context: &[TokenId], entities: &[EntityId], template: &[TokenId]) -> Result<Vec<(EntityId, F)>> {
        rank_with(
            &self.backbone,
            &self.rec,
            &self.rec_entities,
            &self.kg.item_ids,
            self.config.pooling,
            context,
            entities,
            template,
        )
    }

    /// Template, then (if it has slots) ranking, then slot filling from the top-k items.
    pub fn respond(&self, context: &[TokenId], entities: &[EntityId]) -> Result<Response<F>> {
        let template = self.generate(context, entities, self.config.decode)?;
        let ranked = if template.slot_count > 0 {
            self.rank(context, entities, &template.tokens)?
        } else {
            Vec::new()
        };
        let ids: Vec<EntityId> = ranked.iter().take(self.config.top_k.max(1)).map(|r| r.0).collect();
        let words = fill_template(&template, &ids, &self.vocab, &self.kg)?;
        Ok(Response { template, ranked, words })
    }
}

fn fused<F: Float>(
    backbone: &FrozenBackbone<F>,
    fusion: &FusionParams<Param<F>>,
    table: &Mat<F>,
    context: &[TokenId],
    entities: &[EntityId],
) -> Result<FusedRepresentations<F>> {
    let t = backbone.encode_bidirectional(context)?;
    let t = fusion.project_words(t.view());
    let e = table.select(Axis(0), entities);
    fuse(t.view(), e.view(), fusion.bilinear.view())
}

/// Generation prompt `[T̃; P_gen; C]` followed by template decoding.
#[allow(clippy::too_many_arguments)]
pub fn generate_with<F: Float>(
    backbone: &FrozenBackbone<F>,
    weights: &StageWeights<F>,
    entity_table: &Mat<F>,
    vocab: &Vocab,
    config: &ModelConfig,
    context: &[TokenId],
    entities: &[EntityId],
    decode: DecodeConfig,
) -> Result<Template> {
    let f = fused(backbone, &weights.fusion, entity_table, context, entities)?;
    let budget = backbone.config.max_ctx.saturating_sub(config.max_new_tokens);
    let ctx = assemble_gen(f.words.view(), weights.prompt.view(), context, budget)?;
    generate_template(backbone, &ctx, decode, config.max_new_tokens, vocab)
}

/// Recommendation prompt `[Ẽ; P_rec; C; S]` scored against every catalog item.
#[allow(clippy::too_many_arguments)]
pub fn rank_with<F: Float>(
    backbone: &FrozenBackbone<F>,
    weights: &StageWeights<F>,
    entity_table: &Mat<F>,
    item_ids: &[EntityId],
    pooling: Pooling,
    context: &[TokenId],
    entities: &[EntityId],
    template: &[TokenId],
) -> Result<Vec<(EntityId, F)>> {
    let f = fused(backbone, &weights.fusion, entity_table, context, entities)?;
    let ctx = assemble_rec(f.entities.view(), weights.prompt.view(), context, template, backbone.config.max_ctx)?;
    let (hidden, _) = backbone.decoder_forward(ctx.prefix.view(), &ctx.tokens)?;
    let h_u = pool_context(hidden.view(), pooling)?;
    let items = entity_table.select(Axis(0), item_ids);
    rank_items(&h_u.view(), items.view(), item_ids, item_ids.len())
}
