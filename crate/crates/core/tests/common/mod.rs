#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgprompt::config::KvConfig;
use kgprompt::data::corpus::parse_corpus;
use kgprompt::data::synth::{self, SynthConfig};
use kgprompt::data::{make_instances, Dataset, EntityLinker, KnowledgeGraph, Stage, TrainingInstance, Vocab};
use kgprompt::encoders::{BackboneConfig, FrozenBackbone, Param};
use kgprompt::fusion::{EntityScoring, FusionParams};
use kgprompt::model::{ModelConfig, StageWeights};
use kgprompt::prompts::soft_tokens;
use kgprompt::tensor::{Graph, Mat};
use kgprompt::training::{build_vocab, prepare, RecLoss, StageKind, StageParams, StageTrainer, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Toy-scale settings shared by the end-to-end checks.
pub const TOY_CONFIG: &str = "\
d_model = 64
n_layers = 2
n_heads = 4
max_ctx = 256
enc_layers = 1
backbone.steps = 300
fuse.lr = 1e-2
fuse.steps = 500
gen.lr = 1e-3
gen.steps = 300
rec.lr = 1e-3
rec.batch_size = 16
rec.steps = 300
";

pub fn toy_kv(data_dir: &Path) -> KvConfig {
    let mut kv = KvConfig::parse(TOY_CONFIG).expect("toy config parses");
    kv.set("data_dir", data_dir.display());
    kv
}

/// Writes the default synthetic corpus (200 dialogs, 50 items, 100 entities, 3 relations)
/// under `dir/data` and loads it.
pub fn synth_dataset(dir: &Path, cfg: &SynthConfig) -> (Dataset, PathBuf) {
    let data = dir.join("data");
    synth::generate(cfg).expect("synthetic corpus").write(&data).expect("write corpus");
    let ds = Dataset::load(
        &data.join(synth::CORPUS_FILE),
        &data.join(synth::TRIPLES_FILE),
        &data.join(synth::ENTITIES_FILE),
    )
    .expect("load corpus");
    (ds, data)
}

/// A d=8, 64-bit model over a handful of synthetic dialogues, with an encoder of a
/// different width so the bridge is exercised.
pub struct Micro {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub backbone: Arc<FrozenBackbone<f64>>,
    pub model: ModelConfig,
    pub instances: Vec<TrainingInstance>,
}

impl Micro {
    pub fn new(seed: u64) -> Self {
        let cfg = SynthConfig {
            n_dialogs: 6,
            n_items: 5,
            n_entities: 11,
            n_relations: 2,
            seed,
        };
        let s = synth::generate(&cfg).expect("micro corpus");
        let linker = EntityLinker::from_kg(&s.kg);
        let corpus = parse_corpus(&s.jsonl, "micro", &linker, &s.kg).expect("parse micro corpus");
        let vocab = build_vocab(&corpus, &s.kg);
        let arch = BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_ctx: 96,
            vocab_size: vocab.len(),
            enc_d_model: 6,
            enc_layers: 1,
            enc_heads: 2,
        };
        let backbone = Arc::new(FrozenBackbone::<f64>::random(arch, seed).expect("micro backbone"));
        let model = ModelConfig {
            prompt_len_gen: 3,
            prompt_len_rec: 2,
            max_new_tokens: 6,
            max_context_tokens: 40,
            ..ModelConfig::default()
        };
        let instances = make_instances(&corpus, &vocab, &s.kg, Stage::Generation, model.max_context_tokens);
        Self {
            kg: s.kg,
            vocab,
            backbone,
            model,
            instances,
        }
    }

    /// Fusion parameters with the bilinear map scaled up so the interaction term matters.
    pub fn params(&self, kind: StageKind, seed: u64) -> StageParams<Param<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fusion = FusionParams::init(
            &mut rng,
            self.kg.num_entities(),
            self.kg.num_relations(),
            self.backbone.config.enc_d_model,
            self.backbone.config.d_model,
        );
        fusion.bilinear = Arc::new(random_mat(&mut rng, 8, 8, 0.3));
        let len = match kind {
            StageKind::Gen => Some(self.model.prompt_len_gen),
            StageKind::Rec => Some(self.model.prompt_len_rec),
            _ => None,
        };
        StageParams {
            fusion,
            prompt: len.map(|l| soft_tokens(&self.backbone.decoder.tok_emb, l, &mut rng)),
        }
    }

    pub fn trainer(&self, kind: StageKind, rec_loss: RecLoss, scoring: EntityScoring) -> StageTrainer<f64> {
        let stage = match kind {
            StageKind::Fuse => Stage::FusePretrain,
            StageKind::Rec => Stage::Recommendation,
            _ => Stage::Generation,
        };
        let insts: Vec<TrainingInstance> = self
            .instances
            .iter()
            .filter(|i| match stage {
                Stage::FusePretrain => !i.target_entities.is_empty(),
                Stage::Recommendation => !i.target_items.is_empty(),
                Stage::Generation => true,
            })
            .take(3)
            .cloned()
            .collect();
        let cont = insts
            .iter()
            .map(|i| match kind {
                StageKind::Fuse => i.target_response.clone(),
                _ => i.target_template.clone(),
            })
            .collect();
        let data = prepare(&self.backbone, &self.kg, insts, cont).expect("prepare micro data");
        let mut cfg = TrainConfig::defaults(kind);
        cfg.rec_loss = rec_loss;
        cfg.entity_scoring = scoring;
        StageTrainer::new(
            kind,
            self.backbone.clone(),
            &self.kg,
            &self.vocab,
            &self.model,
            cfg,
            self.params(kind, 11),
            data,
        )
        .expect("micro trainer")
    }

    pub fn weights(&self, kind: StageKind, seed: u64) -> StageWeights<f64> {
        let p = self.params(kind, seed);
        StageWeights {
            fusion: p.fusion,
            prompt: p.prompt.expect("subtask prompt"),
        }
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Mat<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((r, c), || n.sample(rng))
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` between the analytic
/// gradient and central finite differences, over every tunable tensor of `trainer`.
pub fn stage_grad_error(trainer: &StageTrainer<f64>) -> (f64, String) {
    let batch: Vec<usize> = (0..trainer.data.len()).collect();
    let (_, analytic) = trainer.gradients(&batch).expect("gradients");
    let items: Vec<_> = batch.iter().map(|&i| &trainer.data[i]).collect();
    let loss_at = |params: &StageParams<Param<f64>>| -> f64 {
        let mut g = Graph::new();
        let (l, _) = trainer.build_loss(&mut g, params, &items).expect("loss");
        g.scalar(l)
    };
    let prompt_name = match trainer.kind {
        StageKind::Rec => kgprompt::prompts::PROMPT_REC,
        _ => kgprompt::prompts::PROMPT_GEN,
    };
    let mut names = Vec::new();
    trainer.params.map(prompt_name, &mut |n, p: &Param<f64>| names.push((n.to_string(), p.dim())));
    let eps = 1e-6;
    let mut worst = (0.0f64, String::new());
    for (name, (r, c)) in names {
        let mut numeric = Mat::<f64>::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                let shifted = |delta: f64| {
                    let mut p = trainer.params.clone();
                    p.visit_mut(prompt_name, &mut |n, t| {
                        if n == name {
                            Arc::make_mut(t)[[i, j]] += delta;
                        }
                    });
                    loss_at(&p)
                };
                numeric[[i, j]] = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            }
        }
        let zero = Mat::<f64>::zeros((r, c));
        let a = analytic.get(&name).unwrap_or(&zero);
        let err = rel_err(a, &numeric);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    worst
}

pub fn rel_err(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let norm = |m: &Mat<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&(a - b));
    diff / norm(a).max(norm(b)).max(1e-8)
}

/// Untrained single-precision recommender over a few synthetic dialogues, for plumbing tests.
pub fn tiny_crs(seed: u64) -> kgprompt::model::Crs<f32> {
    let s = synth::generate(&SynthConfig {
        n_dialogs: 8,
        n_items: 6,
        n_entities: 14,
        n_relations: 2,
        seed,
    })
    .expect("tiny corpus");
    let linker = EntityLinker::from_kg(&s.kg);
    let corpus = parse_corpus(&s.jsonl, "tiny", &linker, &s.kg).expect("parse tiny corpus");
    let vocab = build_vocab(&corpus, &s.kg);
    let arch = BackboneConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_ctx: 128,
        vocab_size: vocab.len(),
        enc_d_model: 16,
        enc_layers: 1,
        enc_heads: 2,
    };
    let backbone = Arc::new(FrozenBackbone::<f32>::random(arch, seed).expect("tiny backbone"));
    let model = ModelConfig {
        prompt_len_gen: 4,
        prompt_len_rec: 2,
        max_new_tokens: 8,
        max_context_tokens: 64,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = |len: usize| {
        let fusion = FusionParams::init(&mut rng, s.kg.num_entities(), s.kg.num_relations(), 16, 16);
        let prompt = soft_tokens(&backbone.decoder.tok_emb, len, &mut rng);
        StageWeights { fusion, prompt }
    };
    let gen = weights(model.prompt_len_gen);
    let rec = weights(model.prompt_len_rec);
    kgprompt::model::Crs::new(backbone, vocab, s.kg, model, gen, rec).expect("tiny crs")
}
