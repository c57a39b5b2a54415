//! Automatic metrics, checkpoint evaluation and the data-scarcity sweep.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::data::{make_instances, Dataset, DialogueCorpus, EntityId, Stage};
use crate::encoders::backbone::{BACKBONE_CONFIG_FILE, BACKBONE_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::model::{Crs, KG_ENTITIES_FILE, KG_FILE};
use crate::tensor::Float;
use crate::training::{run_stage, DataConfig, Experiment, StageKind};

/// Fraction of instances with at least one target among the first `k` ranked items.
///
/// Returns 0 for an empty instance list.
pub fn recall_at_k(ranked: &[Vec<EntityId>], targets: &[Vec<EntityId>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("recall cutoff k must be positive".into()));
    }
    if ranked.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} ranked lists for {} target sets",
            ranked.len(),
            targets.len()
        )));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (list, gold) in ranked.iter().zip(targets) {
        if gold.is_empty() {
            return Err(Error::Empty("recall target set"));
        }
        if list.iter().take(k).any(|r| gold.contains(r)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Distinct word n-grams pooled over all responses, divided by the number of responses.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("distinct-n order must be positive".into()));
    }
    if responses.is_empty() {
        return Ok(0.0);
    }
    let mut grams: HashSet<Vec<&str>> = HashSet::new();
    for r in responses {
        let words: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        for w in words.windows(n) {
            grams.insert(w.to_vec());
        }
    }
    Ok(grams.len() as f64 / responses.len() as f64)
}

/// Flat record of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "recall@50")]
    pub recall_at_50: f64,
    #[serde(rename = "dist-2")]
    pub dist_2: f64,
    #[serde(rename = "dist-3")]
    pub dist_3: f64,
    #[serde(rename = "dist-4")]
    pub dist_4: f64,
    pub conversations: usize,
    pub rec_instances: usize,
    pub gen_instances: usize,
    pub config_digest: String,
}

impl EvalReport {
    /// recall@1 ≤ recall@10 ≤ recall@50, all within [0, 1].
    pub fn recalls_consistent(&self) -> bool {
        let r = [self.recall_at_1, self.recall_at_10, self.recall_at_50];
        r.iter().all(|x| (0.0..=1.0).contains(x)) && r[0] <= r[1] && r[1] <= r[2]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn config_digest<F: Float>(crs: &Crs<F>) -> String {
    let mut h = Sha256::new();
    h.update(crs.backbone.digest().as_bytes());
    h.update(crs.config.to_kv().render().as_bytes());
    for w in [&crs.gen, &crs.rec] {
        let mut names = Vec::new();
        w.fusion.map("", &mut |n, p| names.push((n.to_string(), p.clone())));
        names.push(("prompt".into(), w.prompt.clone()));
        for (n, p) in names {
            h.update(n.as_bytes());
            for v in p.iter() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs template generation, ranking and slot filling over every system turn of `corpus`.
///
/// Recall uses the full ranking on turns that recommend at least one item; distinct-n
/// uses the filled responses of every turn.
pub fn evaluate<F: Float>(crs: &Crs<F>, corpus: &DialogueCorpus) -> Result<EvalReport> {
    let max_ctx = crs.config.max_context_tokens;
    let instances = make_instances(corpus, &crs.vocab, &crs.kg, Stage::Generation, max_ctx);
    let mut ranked = Vec::new();
    let mut targets = Vec::new();
    let mut responses = Vec::with_capacity(instances.len());
    for inst in &instances {
        let template = crs.generate(&inst.context_tokens, &inst.context_entities, crs.config.decode)?;
        let needs_rank = template.slot_count > 0 || !inst.target_items.is_empty();
        let ranking = if needs_rank {
            crs.rank(&inst.context_tokens, &inst.context_entities, &template.tokens)?
        } else {
            Vec::new()
        };
        let top: Vec<EntityId> = ranking.iter().take(crs.config.top_k.max(1)).map(|r| r.0).collect();
        responses.push(crate::prompts::fill_template(&template, &top, &crs.vocab, &crs.kg)?);
        if !inst.target_items.is_empty() {
            ranked.push(ranking.into_iter().map(|r| r.0).collect::<Vec<_>>());
            targets.push(inst.target_items.clone());
        }
    }
    let report = EvalReport {
        recall_at_1: recall_at_k(&ranked, &targets, 1)?,
        recall_at_10: recall_at_k(&ranked, &targets, 10)?,
        recall_at_50: recall_at_k(&ranked, &targets, 50)?,
        dist_2: distinct_n(&responses, 2)?,
        dist_3: distinct_n(&responses, 3)?,
        dist_4: distinct_n(&responses, 4)?,
        conversations: corpus.conversations.len(),
        rec_instances: ranked.len(),
        gen_instances: instances.len(),
        config_digest: config_digest(crs),
    };
    debug_assert!(report.recalls_consistent());
    Ok(report)
}

/// Loads the checkpoint in `dir` and evaluates it on the named split of `exp`.
pub fn evaluate_checkpoint(dir: &Path, exp: &Experiment, split: &str) -> Result<EvalReport> {
    let corpus = match split {
        "train" => &exp.splits.train,
        "valid" => &exp.splits.valid,
        "test" => &exp.splits.test,
        other => return Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
    };
    let crs = Crs::<f32>::load(dir)?;
    evaluate(&crs, corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub proportion: f64,
    pub seed: u64,
    /// `None` when the sampled data has no recommendation instances.
    pub report: Option<EvalReport>,
    pub skipped: Option<String>,
}

/// Files of a warmed-up backbone directory that every sweep run starts from.
pub const BACKBONE_FILES: [&str; 5] = [BACKBONE_FILE, BACKBONE_CONFIG_FILE, VOCAB_FILE, KG_FILE, KG_ENTITIES_FILE];

fn run_dir(work: &Path, proportion: f64, seed: u64) -> PathBuf {
    work.join(format!("p{proportion}_s{seed}"))
}

/// Retrains the fuse, gen and rec stages on sampled fractions of the training
/// conversations and evaluates each run on the fixed test split.
///
/// The frozen backbone in `backbone_dir` is shared by every run. Seeds are `0..seeds`;
/// each seed drives both the conversation sample and the stage initialization.
pub fn scarcity_sweep(
    dataset: &Dataset,
    kv: &KvConfig,
    backbone_dir: &Path,
    work_dir: &Path,
    proportions: &[f64],
    seeds: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(p) = proportions.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("proportion {p} is outside (0, 1]")));
    }
    for f in BACKBONE_FILES {
        if !backbone_dir.join(f).exists() {
            return Err(Error::Staging {
                stage: "sweep".into(),
                missing: backbone_dir.join(f).display().to_string(),
            });
        }
    }
    let base = DataConfig::from_kv(kv)?;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        for &proportion in proportions {
            let cfg = DataConfig {
                train_proportion: proportion,
                sample_seed: seed,
                ..base.clone()
            };
            let exp = Experiment::from_dataset(dataset.clone(), &cfg);
            let n_rec = make_instances(
                &exp.splits.train,
                &exp.build_vocab(),
                &exp.kg,
                Stage::Recommendation,
                usize::MAX,
            )
            .len();
            if n_rec == 0 {
                rows.push(SweepRow {
                    proportion,
                    seed,
                    report: None,
                    skipped: Some("no recommendation instances".into()),
                });
                continue;
            }
            let dir = run_dir(work_dir, proportion, seed);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in BACKBONE_FILES {
                let to = dir.join(f);
                fs::copy(backbone_dir.join(f), &to).map_err(|e| Error::io(&to, e))?;
            }
            for stage in [StageKind::Fuse, StageKind::Gen, StageKind::Rec] {
                let s = run_stage(&exp, kv, stage, seed, &dir)?;
                tracing::info!(proportion, seed, stage = stage.name(), steps = s.steps, "sweep stage done");
            }
            let report = evaluate_checkpoint(&dir, &exp, "test")?;
            rows.push(SweepRow {
                proportion,
                seed,
                report: Some(report),
                skipped: None,
            });
        }
    }
    Ok(rows)
}

/// Mean recall@10 per proportion over the non-skipped rows, in input order.
pub fn mean_recall_at_10(rows: &[SweepRow], proportions: &[f64]) -> Vec<(f64, Option<f64>)> {
    proportions
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.proportion == p)
                .filter_map(|r| r.report.as_ref().map(|x| x.recall_at_10))
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (p, mean)
        })
        .collect()
}
