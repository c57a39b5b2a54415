use std::collections::HashMap;
use std::ops::Range;

use super::kg::EntityId;
use super::vocab::tokenize;

/// One linked occurrence of an entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    /// Byte span in the linked text.
    pub span: Range<usize>,
    /// Word-token span in the tokenized text.
    pub tokens: Range<usize>,
    pub entity: EntityId,
}

/// Exact-dictionary entity linker: longest match first, scanning left to right,
/// matching whole word tokens after lowercasing.
#[derive(Clone, Debug, Default)]
pub struct EntityLinker {
    surface_map: HashMap<String, EntityId>,
    max_words: usize,
}

fn normalize(surface: &str) -> String {
    tokenize(surface)
        .into_iter()
        .map(|(w, _)| w)
        .collect::<Vec<_>>()
        .join(" ")
}

impl EntityLinker {
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = (S, EntityId)>) -> Self {
        let mut linker = Self::default();
        for (name, id) in names {
            linker.insert(name.as_ref(), id);
        }
        linker
    }

    /// Adds a surface form. A later insertion of the same normalized surface wins.
    pub fn insert(&mut self, surface: &str, id: EntityId) {
        let key = normalize(surface);
        if key.is_empty() {
            return;
        }
        self.max_words = self.max_words.max(key.split(' ').count());
        self.surface_map.insert(key, id);
    }

    pub fn len(&self) -> usize {
        self.surface_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_map.is_empty()
    }

    pub fn lookup(&self, surface: &str) -> Option<EntityId> {
        self.surface_map.get(&normalize(surface)).copied()
    }

    pub fn link(&self, text: &str) -> Vec<Mention> {
        let toks = tokenize(text);
        let words: Vec<&str> = toks.iter().map(|(w, _)| w.as_str()).collect();
        self.link_words(&words)
            .into_iter()
            .map(|(tokens, entity)| Mention {
                span: toks[tokens.start].1.start..toks[tokens.end - 1].1.end,
                tokens,
                entity,
            })
            .collect()
    }

    /// Links already-tokenized (lowercase) words; returns token ranges.
    pub fn link_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<(Range<usize>, EntityId)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = (1..=self.max_words.min(words.len() - i)).rev().find_map(|n| {
                let key = words[i..i + n]
                    .iter()
                    .map(AsRef::as_ref)
                    .collect::<Vec<_>>()
                    .join(" ");
                self.surface_map.get(&key).map(|&id| (n, id))
            });
            match longest {
                Some((n, id)) => {
                    out.push((i..i + n, id));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Longest-leftmost matching by brute force over every byte range of the text.
    fn oracle(text: &str, names: &[(&str, EntityId)]) -> Vec<(Range<usize>, EntityId)> {
        let boundaries: Vec<usize> = tokenize(text).iter().flat_map(|(_, r)| [r.start, r.end]).collect();
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let mut best: Option<(usize, EntityId)> = None;
            for end in (pos + 1)..=text.len() {
                if !boundaries.contains(&pos) || !boundaries.contains(&end) {
                    continue;
                }
                if let Some(&(_, id)) = names.iter().find(|(n, _)| *n == &lower[pos..end]) {
                    best = Some((end, id));
                }
            }
            match best {
                Some((end, id)) => {
                    out.push((pos..end, id));
                    pos = end;
                }
                None => pos += 1,
            }
        }
        out
    }

    #[test]
    fn empty_text_links_nothing() {
        let l = EntityLinker::new([("julia", 9)]);
        assert!(l.link("").is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let names = [("julia roberts", 5), ("julia", 9)];
        let l = EntityLinker::new(names);
        let got: Vec<_> = l.link("julia roberts stars").into_iter().map(|m| (m.span, m.entity)).collect();
        assert_eq!(got, vec![(0..13, 5)]);
        assert_eq!(got, oracle("julia roberts stars", &names));
    }

    #[test]
    fn repeated_surface_yields_one_mention_per_occurrence() {
        let l = EntityLinker::new([("comedy", 3)]);
        let got: Vec<_> = l.link("Comedy or comedy?").into_iter().map(|m| m.entity).collect();
        assert_eq!(got, vec![3, 3]);
    }

    #[test]
    fn matches_brute_force_oracle_on_mixed_text() {
        let names = [("a b", 1), ("b c d", 2), ("c", 3), ("d e", 4), ("a", 5)];
        let l = EntityLinker::new(names);
        for text in ["a b c d e", "b c d e a", "x a b c d", "c c a b", "A B c D E"] {
            let got: Vec<_> = l.link(text).into_iter().map(|m| (m.span, m.entity)).collect();
            assert_eq!(got, oracle(text, &names), "text {text:?}");
        }
    }
}
