//! Corpus and knowledge-graph ingestion, entity linking, and training-instance construction.

pub mod corpus;
pub mod instances;
pub mod kg;
pub mod linker;
pub mod synth;
pub mod vocab;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use corpus::{load_corpus, Conversation, CorpusStats, DialogueCorpus, Speaker, Utterance};
pub use instances::{make_instances, Stage, TrainingInstance};
pub use kg::{EntityId, KnowledgeGraph, Triple};
pub use linker::{EntityLinker, Mention};
pub use vocab::{TokenId, Vocab};

use crate::error::Result;

impl EntityLinker {
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        Self::new(kg.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)))
    }
}

/// A loaded knowledge graph together with the corpus linked against it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kg: KnowledgeGraph,
    pub linker: EntityLinker,
    pub corpus: DialogueCorpus,
}

impl Dataset {
    pub fn load(corpus: &Path, triples: &Path, entities: &Path) -> Result<Self> {
        let kg = KnowledgeGraph::load(triples, entities)?;
        let linker = EntityLinker::from_kg(&kg);
        let corpus = load_corpus(corpus, &linker, &kg)?;
        Ok(Self { kg, linker, corpus })
    }

    /// Vocabulary over corpus words plus every word of every entity name.
    pub fn build_vocab(&self) -> Vocab {
        let name_words: Vec<String> = self.kg.names.iter().flat_map(|n| vocab::words(n)).collect();
        Vocab::build(self.corpus.words().chain(name_words.iter().map(String::as_str)))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: DialogueCorpus,
    pub valid: DialogueCorpus,
    pub test: DialogueCorpus,
}

/// Seeded split of whole conversations.
pub fn split_corpus(corpus: &DialogueCorpus, seed: u64, valid_fraction: f64, test_fraction: f64) -> Splits {
    let n = corpus.conversations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_valid = (n as f64 * valid_fraction).round() as usize;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        DialogueCorpus {
            conversations: idx.iter().map(|&i| corpus.conversations[i].clone()).collect(),
        }
    };
    Splits {
        test: pick(&order[..n_test.min(n)]),
        valid: pick(&order[n_test.min(n)..(n_test + n_valid).min(n)]),
        train: pick(&order[(n_test + n_valid).min(n)..]),
    }
}

/// Seeded sample of `proportion` of the conversations (at least one when non-empty).
pub fn sample_conversations(corpus: &DialogueCorpus, proportion: f64, seed: u64) -> DialogueCorpus {
    let n = corpus.conversations.len();
    if proportion >= 1.0 {
        return corpus.clone();
    }
    let keep = ((n as f64 * proportion).round() as usize).clamp(n.min(1), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut idx = order[..keep].to_vec();
    idx.sort_unstable();
    DialogueCorpus {
        conversations: idx.iter().map(|&i| corpus.conversations[i].clone()).collect(),
    }
}
