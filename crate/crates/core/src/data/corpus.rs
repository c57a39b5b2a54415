use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kg::{EntityId, KnowledgeGraph};
use super::linker::EntityLinker;
use super::vocab::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

/// A tokenized, entity-linked utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub words: Vec<String>,
    /// Item ids in order of occurrence in the text.
    pub item_mentions: Vec<EntityId>,
    /// Every linked entity occurrence (items included), in text order.
    pub entity_mentions: Vec<EntityId>,
    /// Word-token span of each entry of `entity_mentions`.
    pub mention_spans: Vec<Range<usize>>,
}

impl Utterance {
    pub fn link(speaker: Speaker, text: &str, linker: &EntityLinker, kg: &KnowledgeGraph) -> Self {
        let words: Vec<String> = tokenize(text).into_iter().map(|(w, _)| w).collect();
        let links = linker.link_words(&words);
        let item_mentions = links.iter().map(|l| l.1).filter(|&e| kg.is_item(e)).collect();
        let (mention_spans, entity_mentions) = links.into_iter().unzip();
        Self {
            speaker,
            text: text.to_string(),
            words,
            item_mentions,
            entity_mentions,
            mention_spans,
        }
    }

    /// Word tokens with each item mention collapsed to a single `slot` token.
    pub fn templated(&self, slot: &str, kg: &KnowledgeGraph) -> Vec<String> {
        let mut out = Vec::with_capacity(self.words.len());
        let mut i = 0;
        let mut spans = self
            .mention_spans
            .iter()
            .zip(&self.entity_mentions)
            .filter(|(_, e)| kg.is_item(**e))
            .map(|(s, _)| s.clone())
            .peekable();
        while i < self.words.len() {
            match spans.peek() {
                Some(s) if s.start == i => {
                    out.push(slot.to_string());
                    i = s.end;
                    spans.next();
                }
                _ => {
                    out.push(self.words[i].clone());
                    i += 1;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Utterance>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DialogueCorpus {
    pub conversations: Vec<Conversation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub utterances: usize,
    pub item_mentions: usize,
    pub distinct_items: usize,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
    #[serde(default)]
    items: Vec<EntityId>,
}

#[derive(Serialize, Deserialize)]
struct RawConversation {
    id: String,
    turns: Vec<RawTurn>,
}

/// Loads a line-delimited corpus, one `{id, turns:[{speaker, text, items}]}` record per line.
///
/// The `items` field must list exactly the items the linker finds in `text`.
pub fn load_corpus(path: &Path, linker: &EntityLinker, kg: &KnowledgeGraph) -> Result<DialogueCorpus> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&body, &path.display().to_string(), linker, kg)
}

pub fn parse_corpus(body: &str, file: &str, linker: &EntityLinker, kg: &KnowledgeGraph) -> Result<DialogueCorpus> {
    let mut conversations = Vec::new();
    let mut ids = HashSet::new();
    for (ln, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: file.to_string(),
            line: ln + 1,
            msg,
        };
        let raw: RawConversation = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if raw.turns.is_empty() {
            return Err(err(format!("conversation {} has no turns", raw.id)));
        }
        if !ids.insert(raw.id.clone()) {
            return Err(err(format!("duplicate conversation id {}", raw.id)));
        }
        let mut turns = Vec::with_capacity(raw.turns.len());
        for (t, rt) in raw.turns.iter().enumerate() {
            if let Some(&bad) = rt.items.iter().find(|&&i| !kg.is_item(i)) {
                return Err(err(format!("unknown item id {bad} in turn {t}")));
            }
            let utt = Utterance::link(rt.speaker, &rt.text, linker, kg);
            let mut listed = rt.items.clone();
            let mut found = utt.item_mentions.clone();
            listed.sort_unstable();
            found.sort_unstable();
            if listed != found {
                return Err(err(format!(
                    "turn {t}: items field {:?} disagrees with items linked in text {:?}",
                    rt.items, utt.item_mentions
                )));
            }
            turns.push(utt);
        }
        conversations.push(Conversation { id: raw.id, turns });
    }
    Ok(DialogueCorpus { conversations })
}

impl DialogueCorpus {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.conversations {
            let raw = RawConversation {
                id: c.id.clone(),
                turns: c
                    .turns
                    .iter()
                    .map(|u| RawTurn {
                        speaker: u.speaker,
                        text: u.text.clone(),
                        items: u.item_mentions.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&raw).expect("corpus record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn stats(&self) -> CorpusStats {
        let mut distinct = BTreeSet::new();
        let mut mentions = 0;
        let mut utterances = 0;
        for c in &self.conversations {
            utterances += c.turns.len();
            for u in &c.turns {
                mentions += u.item_mentions.len();
                distinct.extend(u.item_mentions.iter().copied());
            }
        }
        CorpusStats {
            dialogs: self.conversations.len(),
            utterances,
            item_mentions: mentions,
            distinct_items: distinct.len(),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.conversations
            .iter()
            .flat_map(|c| c.turns.iter())
            .flat_map(|u| u.words.iter().map(String::as_str))
    }
}
