use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Typed triples over a fixed entity set, a subset of which are recommendable items.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub names: Vec<String>,
    pub relation_names: Vec<String>,
    pub triples: Vec<Triple>,
    /// Item entity ids in ascending order; position in this list is the item index.
    pub item_ids: Vec<EntityId>,
    item_index: HashMap<EntityId, usize>,
}

impl KnowledgeGraph {
    pub fn new(
        names: Vec<String>,
        relation_names: Vec<String>,
        triples: Vec<Triple>,
        mut item_ids: Vec<EntityId>,
    ) -> Result<Self> {
        let n = names.len();
        item_ids.sort_unstable();
        item_ids.dedup();
        if item_ids.is_empty() {
            return Err(Error::Graph("knowledge graph has no items".into()));
        }
        if let Some(&bad) = item_ids.iter().find(|&&i| i >= n) {
            return Err(Error::Graph(format!("item id {bad} out of range (entities: {n})")));
        }
        let mut seen = HashSet::new();
        for t in &triples {
            if t.head >= n || t.tail >= n {
                return Err(Error::Graph(format!(
                    "dangling triple ({}, {}, {}) with {n} entities",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation >= relation_names.len() {
                return Err(Error::Graph(format!("relation id {} out of range", t.relation)));
            }
            if !seen.insert(*t) {
                return Err(Error::Graph(format!(
                    "duplicate triple ({}, {}, {})",
                    t.head, t.relation, t.tail
                )));
            }
        }
        let item_index = item_ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Ok(Self {
            names,
            relation_names,
            triples,
            item_ids,
            item_index,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_item(&self, e: EntityId) -> bool {
        self.item_index.contains_key(&e)
    }

    pub fn item_index(&self, e: EntityId) -> Option<usize> {
        self.item_index.get(&e).copied()
    }

    pub fn name(&self, e: EntityId) -> &str {
        &self.names[e]
    }

    /// Reads `entities.tsv` (`id<TAB>name<TAB>is_item`) and the triple file
    /// (`head<TAB>relation<TAB>tail`). Relation labels get ids in first-seen order.
    pub fn load(triples_path: &Path, entities_path: &Path) -> Result<Self> {
        let ent_body = fs::read_to_string(entities_path).map_err(|e| Error::io(entities_path, e))?;
        let ent_file = entities_path.display().to_string();
        let mut rows: Vec<(usize, String, bool)> = Vec::new();
        for (ln, line) in ent_body.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: ent_file.clone(),
                line: ln + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
            }
            let id = cols[0].trim().parse().map_err(|_| err(format!("bad entity id {:?}", cols[0])))?;
            let is_item = match cols[2].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(format!("bad is_item flag {other:?}"))),
            };
            rows.push((id, cols[1].to_string(), is_item));
        }
        rows.sort_by_key(|r| r.0);
        for (expect, row) in rows.iter().enumerate() {
            if row.0 != expect {
                return Err(Error::Graph(format!(
                    "entity ids must be contiguous from 0; missing or duplicate id near {expect}"
                )));
            }
        }
        let item_ids = rows.iter().filter(|r| r.2).map(|r| r.0).collect();
        let names = rows.into_iter().map(|r| r.1).collect();

        let kg_body = fs::read_to_string(triples_path).map_err(|e| Error::io(triples_path, e))?;
        let kg_file = triples_path.display().to_string();
        let mut relation_names: Vec<String> = Vec::new();
        let mut triples = Vec::new();
        for (ln, line) in kg_body.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: kg_file.clone(),
                line: ln + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
            }
            let head = cols[0].trim().parse().map_err(|_| err(format!("bad head id {:?}", cols[0])))?;
            let tail = cols[2].trim().parse().map_err(|_| err(format!("bad tail id {:?}", cols[2])))?;
            let rel = cols[1].trim();
            let relation = match relation_names.iter().position(|r| r == rel) {
                Some(i) => i,
                None => {
                    relation_names.push(rel.to_string());
                    relation_names.len() - 1
                }
            };
            triples.push(Triple { head, relation, tail });
        }
        Self::new(names, relation_names, triples, item_ids)
    }

    pub fn save(&self, triples_path: &Path, entities_path: &Path) -> Result<()> {
        let mut ents = String::new();
        for (i, name) in self.names.iter().enumerate() {
            ents.push_str(&format!("{i}\t{name}\t{}\n", u8::from(self.is_item(i))));
        }
        fs::write(entities_path, ents).map_err(|e| Error::io(entities_path, e))?;
        let mut kg = String::new();
        for t in &self.triples {
            kg.push_str(&format!("{}\t{}\t{}\n", t.head, self.relation_names[t.relation], t.tail));
        }
        fs::write(triples_path, kg).map_err(|e| Error::io(triples_path, e))
    }
}
