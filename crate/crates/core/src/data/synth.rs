//! Seeded generator of a small movie-recommendation dialogue corpus and its knowledge graph.
//!
//! Each dialogue hides a target item. The user reveals attributes of that item
//! (genre, cast, director, ...) and the system eventually recommends it, so the
//! recommended item is predictable from the entities in the history.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kg::{EntityId, KnowledgeGraph, Triple};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogs: usize,
    pub n_items: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_dialogs: 200,
            n_items: 50,
            n_entities: 100,
            n_relations: 3,
            seed: 7,
        }
    }
}

/// Counts the generator commits to; the loader must reproduce them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub dialogs: usize,
    pub utterances: usize,
    pub item_mentions: usize,
    pub distinct_items: usize,
    pub triples: usize,
}

#[derive(Serialize)]
struct Turn {
    speaker: &'static str,
    text: String,
    items: Vec<EntityId>,
}

#[derive(Serialize)]
struct Record {
    id: String,
    turns: Vec<Turn>,
}

pub struct SynthCorpus {
    pub kg: KnowledgeGraph,
    pub jsonl: String,
    pub manifest: Manifest,
}

const ADJECTIVES: &[&str] = &[
    "crimson", "silent", "broken", "golden", "hidden", "frozen", "electric", "lonely", "savage", "velvet",
    "hollow", "burning", "distant", "wicked", "gentle", "iron", "midnight", "paper", "scarlet", "wild",
    "bitter", "lucky", "quiet", "rusty", "shining", "stolen", "twisted", "wandering", "bright", "fallen",
];
const NOUNS: &[&str] = &[
    "harbor", "empire", "garden", "river", "kingdom", "mirror", "station", "voyage", "storm", "circus",
    "frontier", "island", "machine", "orchard", "palace", "signal", "temple", "valley", "winter", "lantern",
    "canyon", "comet", "desert", "forest", "galaxy", "horizon", "jungle", "meadow", "outpost", "tower",
];
const GENRES: &[&str] = &[
    "comedy", "thriller", "horror", "romance", "western", "documentary", "musical", "animation", "fantasy",
    "mystery", "noir", "satire", "drama", "adventure", "biopic", "heist", "superhero", "sci-fi", "war",
    "sports", "crime", "family", "teen", "disaster", "zombie", "slasher", "spy", "martial-arts", "parody",
    "epic",
];
const FIRST: &[&str] = &[
    "anna", "boris", "clara", "dmitri", "elena", "felix", "greta", "hugo", "irina", "jonas", "kira", "lucas",
    "marta", "nils", "olga", "pavel", "rosa", "sven", "tanya", "viktor",
];
const LAST: &[&str] = &[
    "adler", "berg", "castell", "duran", "eklund", "falk", "grimm", "holm", "ivanov", "jansen", "kovac",
    "lind", "moreau", "novak", "orlov", "petrov", "quist", "rask", "stahl", "varga",
];
const PLACES: &[&str] = &[
    "paris", "tokyo", "cairo", "lima", "oslo", "dublin", "havana", "nairobi", "sydney", "venice", "berlin",
    "lisbon", "mumbai", "quebec", "seoul", "prague", "vienna", "madrid", "athens", "boston",
];
const RELATIONS: &[&str] = &["has_genre", "starring", "directed_by", "set_in", "written_by", "scored_by"];

fn relation_name(r: usize) -> String {
    RELATIONS.get(r).map(|s| s.to_string()).unwrap_or_else(|| format!("related_{r}"))
}

fn attribute_phrase(relation: usize, name: &str) -> String {
    match relation % 4 {
        0 => format!("{name} movies"),
        1 => format!("movies with {name}"),
        2 => format!("films by {name}"),
        _ => format!("movies set in {name}"),
    }
}

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn pick(&mut self, rng: &mut ChaCha8Rng, gen: impl Fn(&mut ChaCha8Rng, usize) -> String) -> String {
        for attempt in 0.. {
            let name = gen(rng, attempt);
            if self.used.insert(name.clone()) {
                return name;
            }
        }
        unreachable!()
    }
}

fn attribute_name(rng: &mut ChaCha8Rng, relation: usize, attempt: usize) -> String {
    let suffix = attempt / 50;
    let base = match relation % 4 {
        0 => GENRES.choose(rng).unwrap().to_string(),
        1 | 2 => format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap()),
        _ => PLACES.choose(rng).unwrap().to_string(),
    };
    if suffix == 0 {
        base
    } else {
        format!("{base} {}", ["junior", "north", "nova", "prime"][suffix % 4])
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_items == 0 || cfg.n_relations == 0 || cfg.n_entities < cfg.n_items + cfg.n_relations {
        return Err(Error::InvalidArgument(format!(
            "need n_items ≥ 1, n_relations ≥ 1 and n_entities ≥ n_items + n_relations (got {cfg:?})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut namer = Namer { used: HashSet::new() };

    // Entities 0..n_items are items; the rest are attributes, dealt round-robin to relations.
    let mut names = Vec::with_capacity(cfg.n_entities);
    for _ in 0..cfg.n_items {
        names.push(namer.pick(&mut rng, |r, attempt| {
            let base = format!("{} {}", ADJECTIVES.choose(r).unwrap(), NOUNS.choose(r).unwrap());
            if attempt < 200 {
                base
            } else {
                format!("{base} {}", attempt / 200 + 1)
            }
        }));
    }
    let n_attr = cfg.n_entities - cfg.n_items;
    let mut pools: Vec<Vec<EntityId>> = vec![Vec::new(); cfg.n_relations];
    for a in 0..n_attr {
        let relation = a % cfg.n_relations;
        let id = names.len();
        names.push(namer.pick(&mut rng, |r, attempt| attribute_name(r, relation, attempt)));
        pools[relation].push(id);
    }

    // Every item gets one attribute per relation; attributes are spread so each is used.
    let mut triples = Vec::new();
    let mut item_attrs: Vec<Vec<(usize, EntityId)>> = vec![Vec::new(); cfg.n_items];
    for (relation, pool) in pools.iter().enumerate() {
        let mut deck: Vec<EntityId> = Vec::new();
        while deck.len() < cfg.n_items {
            let mut p = pool.clone();
            p.shuffle(&mut rng);
            deck.extend(p);
        }
        for (item, attrs) in item_attrs.iter_mut().enumerate() {
            let attr = deck[item];
            attrs.push((relation, attr));
            triples.push(Triple { head: item, relation, tail: attr });
        }
    }
    let kg = KnowledgeGraph::new(
        names.clone(),
        (0..cfg.n_relations).map(relation_name).collect(),
        triples,
        (0..cfg.n_items).collect(),
    )?;

    let similar = |target: EntityId, rng: &mut ChaCha8Rng| -> EntityId {
        let (_, attr) = *item_attrs[target].choose(rng).unwrap();
        let candidates: Vec<EntityId> = (0..cfg.n_items)
            .filter(|&i| i != target && item_attrs[i].iter().any(|&(_, a)| a == attr))
            .collect();
        candidates
            .choose(rng)
            .copied()
            .unwrap_or_else(|| (target + 1 + rng.random_range(0..cfg.n_items.max(2) - 1)) % cfg.n_items)
    };

    let mut jsonl = String::new();
    let mut utterances = 0;
    let mut item_mentions = 0;
    let mut distinct = BTreeSet::new();
    for d in 0..cfg.n_dialogs {
        let target = rng.random_range(0..cfg.n_items);
        let mut attrs = item_attrs[target].clone();
        attrs.shuffle(&mut rng);
        let mut turns = Vec::new();
        let user = |text: String, items: Vec<EntityId>| Turn { speaker: "user", text, items };
        let system = |text: String, items: Vec<EntityId>| Turn { speaker: "system", text, items };

        let (r1, a1) = attrs[0];
        let opener = [
            "hi ! i am looking for {} .",
            "hello , can you suggest some {} ?",
            "hey , i really enjoy {} .",
            "i want to watch {} tonight .",
        ];
        turns.push(user(
            opener.choose(&mut rng).unwrap().replace("{}", &attribute_phrase(r1, &names[a1])),
            vec![],
        ));
        if attrs.len() > 1 && rng.random_bool(0.6) {
            let ask = [
                "sure ! do you have anything else in mind ?",
                "great choice . what else do you like ?",
                "ok , tell me more about your taste .",
            ];
            turns.push(system(ask.choose(&mut rng).unwrap().to_string(), vec![]));
            let (r2, a2) = attrs[1];
            let more = ["i also like {} .", "maybe {} ?", "something like {} would be nice ."];
            turns.push(user(
                more.choose(&mut rng).unwrap().replace("{}", &attribute_phrase(r2, &names[a2])),
                vec![],
            ));
        }
        if rng.random_bool(0.25) {
            let other = similar(target, &mut rng);
            turns.push(system(
                format!("you should watch {} or {} .", names[target], names[other]),
                vec![target, other],
            ));
        } else {
            let rec = [
                "you should watch {} .",
                "have you seen {} ? it is great .",
                "i recommend {} .",
                "how about {} ?",
            ];
            turns.push(system(rec.choose(&mut rng).unwrap().replace("{}", &names[target]), vec![target]));
        }
        if rng.random_bool(0.5) {
            turns.push(user("i have seen that one . anything else ?".into(), vec![]));
            let other = similar(target, &mut rng);
            let again = ["then try {} .", "you might like {} too .", "what about {} ?"];
            turns.push(system(again.choose(&mut rng).unwrap().replace("{}", &names[other]), vec![other]));
        } else {
            turns.push(user("thanks , i will watch it !".into(), vec![]));
            let bye = ["you are welcome , enjoy !", "have fun watching !", "glad i could help ."];
            turns.push(system(bye.choose(&mut rng).unwrap().to_string(), vec![]));
        }

        utterances += turns.len();
        for t in &turns {
            item_mentions += t.items.len();
            distinct.extend(t.items.iter().copied());
        }
        let record = Record { id: format!("d{d:04}"), turns };
        jsonl.push_str(&serde_json::to_string(&record).expect("record serializes"));
        jsonl.push('\n');
    }

    let manifest = Manifest {
        config: cfg.clone(),
        dialogs: cfg.n_dialogs,
        utterances,
        item_mentions,
        distinct_items: distinct.len(),
        triples: kg.triples.len(),
    };
    Ok(SynthCorpus { kg, jsonl, manifest })
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRIPLES_FILE: &str = "kg.tsv";
pub const ENTITIES_FILE: &str = "entities.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthCorpus {
    /// Writes `corpus.jsonl`, `kg.tsv`, `entities.tsv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let corpus = dir.join(CORPUS_FILE);
        fs::write(&corpus, &self.jsonl).map_err(|e| Error::io(&corpus, e))?;
        self.kg.save(&dir.join(TRIPLES_FILE), &dir.join(ENTITIES_FILE))?;
        let manifest = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&manifest, body).map_err(|e| Error::io(&manifest, e))
    }
}
