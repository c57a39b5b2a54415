use serde::{Deserialize, Serialize};

use super::corpus::{Conversation, DialogueCorpus, Speaker, Utterance};
use super::kg::{EntityId, KnowledgeGraph};
use super::vocab::{self, TokenId, Vocab};

pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FusePretrain,
    Generation,
    Recommendation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FusePretrain => "fuse",
            Stage::Generation => "gen",
            Stage::Recommendation => "rec",
        }
    }
}

/// One (dialogue history, next system utterance) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub conversation: String,
    pub turn: usize,
    /// Flattened history with role markers, ending in the marker that opens the system reply.
    pub context_tokens: Vec<TokenId>,
    /// Distinct entities mentioned in the kept history, first-mention order.
    pub context_entities: Vec<EntityId>,
    pub target_response: Vec<TokenId>,
    pub target_template: Vec<TokenId>,
    pub target_items: Vec<EntityId>,
    pub target_entities: Vec<EntityId>,
}

/// Flattens history into role-marked tokens, dropping whole utterances from the
/// front until at most `max_tokens` remain.
///
/// A speaker change opens a block with `[USER]`/`[SYS]`; consecutive turns by the
/// same speaker are joined with `[SEP]`. The trailing marker opens the system reply.
pub fn flatten_context(turns: &[Utterance], vocab: &Vocab, max_tokens: usize) -> (Vec<TokenId>, Vec<EntityId>) {
    for start in 0..=turns.len() {
        let tokens = flatten(&turns[start..], vocab);
        if tokens.len() <= max_tokens || start == turns.len() {
            let entities = distinct(turns[start..].iter().flat_map(|u| u.entity_mentions.iter().copied()));
            return (tokens, entities);
        }
        // A single remaining utterance that is still too long is cut at the token level.
        if start + 1 == turns.len() {
            let tokens = tokens[tokens.len() - max_tokens..].to_vec();
            let entities = distinct(turns[start].entity_mentions.iter().copied());
            return (tokens, entities);
        }
    }
    unreachable!()
}

fn role(s: Speaker) -> &'static str {
    match s {
        Speaker::User => vocab::USER,
        Speaker::System => vocab::SYS,
    }
}

fn flatten(turns: &[Utterance], vocab: &Vocab) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev: Option<Speaker> = None;
    for u in turns {
        out.push(vocab.special(if prev == Some(u.speaker) { vocab::SEP } else { role(u.speaker) }));
        out.extend(vocab.encode_words(&u.words));
        prev = Some(u.speaker);
    }
    out.push(vocab.special(if prev == Some(Speaker::System) { vocab::SEP } else { vocab::SYS }));
    out
}

pub fn distinct(ids: impl IntoIterator<Item = EntityId>) -> Vec<EntityId> {
    let mut seen = std::collections::HashSet::new();
    ids.into_iter().filter(|e| seen.insert(*e)).collect()
}

pub fn conversation_instances(
    conv: &Conversation,
    vocab: &Vocab,
    kg: &KnowledgeGraph,
    max_context_tokens: usize,
) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for (t, reply) in conv.turns.iter().enumerate() {
        if t == 0 || reply.speaker != Speaker::System {
            continue;
        }
        let (context_tokens, context_entities) = flatten_context(&conv.turns[..t], vocab, max_context_tokens);
        out.push(TrainingInstance {
            conversation: conv.id.clone(),
            turn: t,
            context_tokens,
            context_entities,
            target_response: vocab.encode_words(&reply.words),
            target_template: vocab.encode_words(&reply.templated(vocab::ITEM, kg)),
            target_items: reply.item_mentions.clone(),
            target_entities: distinct(reply.entity_mentions.iter().copied()),
        });
    }
    out
}

/// Builds one instance per (history, next system utterance) pair and applies the stage filter.
pub fn make_instances(
    corpus: &DialogueCorpus,
    vocab: &Vocab,
    kg: &KnowledgeGraph,
    stage: Stage,
    max_context_tokens: usize,
) -> Vec<TrainingInstance> {
    corpus
        .conversations
        .iter()
        .flat_map(|c| conversation_instances(c, vocab, kg, max_context_tokens))
        .filter(|i| match stage {
            Stage::FusePretrain => !i.target_entities.is_empty(),
            Stage::Generation => true,
            Stage::Recommendation => !i.target_items.is_empty(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::kg::Triple;
    use crate::data::linker::EntityLinker;

    fn fixture() -> (KnowledgeGraph, EntityLinker, Vocab) {
        let names = vec!["Heat".to_string(), "Big Fish".to_string(), "crime".to_string(), "Al Pacino".to_string()];
        let kg = KnowledgeGraph::new(
            names.clone(),
            vec!["genre".into()],
            vec![Triple { head: 0, relation: 0, tail: 2 }],
            vec![0, 1],
        )
        .unwrap();
        let linker = EntityLinker::new(names.iter().enumerate().map(|(i, n)| (n.as_str(), i)));
        let vocab = Vocab::build(
            "hi i like crime with al pacino try heat or big fish . ok thanks great a b c"
                .split(' ')
                .collect::<Vec<_>>(),
        );
        (kg, linker, vocab)
    }

    fn conv(turns: &[(Speaker, &str)], kg: &KnowledgeGraph, l: &EntityLinker) -> Conversation {
        Conversation {
            id: "c".into(),
            turns: turns.iter().map(|(s, t)| Utterance::link(*s, t, l, kg)).collect(),
        }
    }

    #[test]
    fn no_system_turns_gives_no_instances() {
        let (kg, l, v) = fixture();
        let c = DialogueCorpus {
            conversations: vec![conv(&[(Speaker::User, "hi"), (Speaker::User, "ok")], &kg, &l)],
        };
        for stage in [Stage::FusePretrain, Stage::Generation, Stage::Recommendation] {
            assert!(make_instances(&c, &v, &kg, stage, 256).is_empty());
        }
    }

    #[test]
    fn two_item_reply_gives_two_slots() {
        let (kg, l, v) = fixture();
        let c = DialogueCorpus {
            conversations: vec![conv(
                &[(Speaker::User, "i like crime"), (Speaker::System, "try Heat or Big Fish .")],
                &kg,
                &l,
            )],
        };
        let rec = make_instances(&c, &v, &kg, Stage::Recommendation, 256);
        assert_eq!(rec.len(), 1);
        let inst = &rec[0];
        assert_eq!(inst.target_items, vec![0, 1]);
        let item = v.special(vocab::ITEM);
        assert_eq!(inst.target_template.iter().filter(|&&t| t == item).count(), 2);
        assert_eq!(inst.context_entities, vec![2]);
        // Filling the slots in order reproduces the response.
        let mut filled = Vec::new();
        let mut items = inst.target_items.iter();
        for &t in &inst.target_template {
            if t == item {
                filled.extend(v.encode(kg.name(*items.next().unwrap())));
            } else {
                filled.push(t);
            }
        }
        assert_eq!(filled, inst.target_response);
    }

    #[test]
    fn entity_only_reply_skips_recommendation() {
        let (kg, l, v) = fixture();
        let c = DialogueCorpus {
            conversations: vec![conv(&[(Speaker::User, "hi"), (Speaker::System, "i like al pacino")], &kg, &l)],
        };
        assert_eq!(make_instances(&c, &v, &kg, Stage::FusePretrain, 256).len(), 1);
        assert_eq!(make_instances(&c, &v, &kg, Stage::Generation, 256).len(), 1);
        assert!(make_instances(&c, &v, &kg, Stage::Recommendation, 256).is_empty());
    }

    #[test]
    fn flattening_marks_roles_and_truncates_whole_utterances() {
        let (kg, l, v) = fixture();
        let c = conv(
            &[(Speaker::User, "a b c"), (Speaker::User, "crime"), (Speaker::System, "ok"), (Speaker::User, "thanks")],
            &kg,
            &l,
        );
        let (toks, ents) = flatten_context(&c.turns, &v, 256);
        assert_eq!(v.decode(&toks), "[USER] a b c [SEP] crime [SYS] ok [USER] thanks [SYS]");
        assert_eq!(ents, vec![2]);
        let (toks, ents) = flatten_context(&c.turns, &v, 6);
        assert_eq!(v.decode(&toks), "[SYS] ok [USER] thanks [SYS]");
        assert!(ents.is_empty());
        let (toks, _) = flatten_context(&c.turns[..1], &v, 2);
        assert_eq!(v.decode(&toks), "c [SYS]");
    }
}
