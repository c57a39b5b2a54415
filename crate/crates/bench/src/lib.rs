//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use kgprompt::data::corpus::parse_corpus;
use kgprompt::data::synth::{self, SynthConfig};
use kgprompt::data::{make_instances, EntityLinker, Stage, TrainingInstance};
use kgprompt::encoders::{BackboneConfig, FrozenBackbone};
use kgprompt::fusion::FusionParams;
use kgprompt::model::{Crs, ModelConfig, StageWeights};
use kgprompt::prompts::soft_tokens;
use kgprompt::tensor::Mat;
use kgprompt::training::build_vocab;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// An untrained toy-scale recommender (d=64, two layers) and the generation
/// instances of its synthetic corpus.
pub fn toy_crs(seed: u64) -> (Crs<f32>, Vec<TrainingInstance>) {
    let s = synth::generate(&SynthConfig { seed, ..SynthConfig::default() }).expect("synthetic corpus");
    let linker = EntityLinker::from_kg(&s.kg);
    let corpus = parse_corpus(&s.jsonl, "bench", &linker, &s.kg).expect("parse corpus");
    let vocab = build_vocab(&corpus, &s.kg);
    let arch = BackboneConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_ctx: 256,
        vocab_size: vocab.len(),
        enc_d_model: 64,
        enc_layers: 1,
        enc_heads: 4,
    };
    let backbone = Arc::new(FrozenBackbone::<f32>::random(arch, seed).expect("backbone"));
    let model = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = |len: usize| StageWeights {
        fusion: FusionParams::init(&mut rng, s.kg.num_entities(), s.kg.num_relations(), 64, 64),
        prompt: soft_tokens(&backbone.decoder.tok_emb, len, &mut rng),
    };
    let gen = weights(model.prompt_len_gen);
    let rec = weights(model.prompt_len_rec);
    let instances = make_instances(&corpus, &vocab, &s.kg, Stage::Recommendation, model.max_context_tokens);
    let crs = Crs::new(backbone, vocab, s.kg, model, gen, rec).expect("crs");
    (crs, instances)
}
