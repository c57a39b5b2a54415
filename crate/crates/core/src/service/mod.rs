//! Live conversational endpoint: per-session history and entity memory around the
//! template, recommend, fill pipeline.

pub mod http;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::instances::{distinct, flatten_context};
use crate::data::{EntityId, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::model::Crs;
use crate::prompts::fill_template;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item_id: EntityId,
    pub name: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateView {
    pub text: String,
    pub slot_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub template: TemplateView,
    /// Top-k ranked items; empty when the template has no slots.
    pub recommendations: Vec<Recommendation>,
    pub response: String,
    /// Slot fills are exactly the top-ranked recommendations in rank order.
    pub consistency: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub history: Vec<Utterance>,
    /// Every entity mentioned so far, first-mention order.
    pub entity_memory: Vec<EntityId>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub last_result: Option<TurnResult>,
}

impl Session {
    fn new(id: String, created_at: u64) -> Self {
        Self {
            id,
            history: Vec::new(),
            entity_memory: Vec::new(),
            created_at,
            last_result: None,
        }
    }

    fn push(&mut self, u: Utterance) {
        let merged = distinct(self.entity_memory.iter().chain(&u.entity_mentions).copied());
        self.entity_memory = merged;
        self.history.push(u);
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum JournalEntry {
    Created { id: String, created_at: u64 },
    Turn { user: String, result: TurnResult },
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Checks that the items named in `response` are the slot fills, cycling through
/// `recommendations` in rank order, and that no other item is named.
pub fn check_consistency<F: Float>(crs: &Crs<F>, slot_count: usize, response: &str, recommendations: &[Recommendation]) -> bool {
    let named = Utterance::link(Speaker::System, response, &crs.linker, &crs.kg).item_mentions;
    if recommendations.is_empty() {
        return slot_count == 0 && named.is_empty();
    }
    let expected: Vec<EntityId> = (0..slot_count)
        .map(|i| recommendations[i % recommendations.len()].item_id)
        .collect();
    named == expected
}

/// Session store plus the shared, read-only model.
pub struct Service<F: Float> {
    model: Option<Arc<Crs<F>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    journal: Option<PathBuf>,
}

impl<F: Float> Service<F> {
    pub fn new(model: Option<Arc<Crs<F>>>) -> Self {
        Self {
            model,
            sessions: RwLock::new(HashMap::new()),
            journal: None,
        }
    }

    /// Appends every session event to `<dir>/<id>.jsonl` and replays existing journals.
    pub fn with_journal(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let session = self.replay(&path)?;
            self.sessions
                .write()
                .expect("session map poisoned")
                .insert(session.id.clone(), Arc::new(Mutex::new(session)));
        }
        self.journal = Some(dir.to_path_buf());
        Ok(self)
    }

    fn replay(&self, path: &Path) -> Result<Session> {
        let model = self.model()?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut session: Option<Session> = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse {
                file: name.clone(),
                line: n + 1,
                msg,
            };
            match serde_json::from_str(&line).map_err(|e| parse(e.to_string()))? {
                JournalEntry::Created { id, created_at } => session = Some(Session::new(id, created_at)),
                JournalEntry::Turn { user, result } => {
                    let s = session.as_mut().ok_or_else(|| parse("turn before creation".into()))?;
                    s.push(Utterance::link(Speaker::User, &user, &model.linker, &model.kg));
                    s.push(Utterance::link(Speaker::System, &result.response, &model.linker, &model.kg));
                    s.last_result = Some(result);
                }
            }
        }
        session.ok_or(Error::Parse {
            file: name,
            line: 0,
            msg: "journal has no creation entry".into(),
        })
    }

    fn append(&self, id: &str, entry: &JournalEntry) -> Result<()> {
        let Some(dir) = &self.journal else {
            return Ok(());
        };
        let path = dir.join(format!("{id}.jsonl"));
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(entry).expect("journal entry serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn model(&self) -> Result<&Arc<Crs<F>>> {
        self.model.as_ref().ok_or(Error::ServiceUnavailable)
    }

    pub fn create_session(&self) -> Result<Session> {
        self.model()?;
        let session = Session::new(uuid::Uuid::new_v4().to_string(), now_millis());
        self.append(
            &session.id,
            &JournalEntry::Created {
                id: session.id.clone(),
                created_at: session.created_at,
            },
        )?;
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(session.id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }

    pub fn get_state(&self, id: &str) -> Result<Session> {
        Ok(self.session(id)?.lock().expect("session poisoned").clone())
    }

    /// Runs one system turn for `text`. Requests to the same session are serialized.
    pub fn post_message(&self, id: &str, text: &str) -> Result<TurnResult> {
        let model = self.model()?.clone();
        let handle = self.session(id)?;
        let mut session = handle.lock().expect("session poisoned");
        let user = Utterance::link(Speaker::User, text, &model.linker, &model.kg);
        let mut history = session.history.clone();
        history.push(user.clone());
        let (context, entities) = flatten_context(&history, &model.vocab, model.config.max_context_tokens);
        let template = model.generate(&context, &entities, model.config.decode)?;
        let recommendations: Vec<Recommendation> = if template.slot_count > 0 {
            model
                .rank(&context, &entities, &template.tokens)?
                .into_iter()
                .take(model.config.top_k.max(1))
                .map(|(item_id, p)| Recommendation {
                    item_id,
                    name: model.kg.name(item_id).to_string(),
                    probability: p.to_f64().unwrap_or(f64::NAN),
                })
                .collect()
        } else {
            Vec::new()
        };
        let ids: Vec<EntityId> = recommendations.iter().map(|r| r.item_id).collect();
        let response = fill_template(&template, &ids, &model.vocab, &model.kg)?.join(" ");
        let consistency = check_consistency(&model, template.slot_count, &response, &recommendations);
        if !consistency {
            tracing::warn!(session = id, %response, "response names items other than the slot fills");
        }
        let result = TurnResult {
            template: TemplateView {
                text: template.text(&model.vocab),
                slot_count: template.slot_count,
            },
            recommendations,
            response,
            consistency,
        };
        self.append(
            id,
            &JournalEntry::Turn {
                user: text.to_string(),
                result: result.clone(),
            },
        )?;
        let system = Utterance::link(Speaker::System, &result.response, &model.linker, &model.kg);
        session.push(user);
        session.push(system);
        session.last_result = Some(result.clone());
        Ok(result)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }
}
