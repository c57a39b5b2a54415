//! Soft-prompt banks, prompt-augmented context assembly, template decoding and slot filling.
//!
//! Layouts (prefix rows are latent vectors, the rest are explicit tokens):
//!
//! ```text
//! pretrain        [Ẽ; C; R]
//! generation      [T̃; P_gen; C]
//! recommendation  [Ẽ; P_rec; C; S]
//! ```

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, s, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::data::vocab::{self, TokenId, Vocab};
use crate::data::{EntityId, KnowledgeGraph};
use crate::encoders::{FrozenBackbone, KvCache, Param};
use crate::error::{Error, Result};
use crate::fusion::{pool_context, Pooling};
use crate::tensor::{cst, log_softmax_rows, softmax_rows, Float, Graph, Mat, Var};

pub const DEFAULT_PROMPT_LEN_GEN: usize = 50;
pub const DEFAULT_PROMPT_LEN_REC: usize = 10;

#[derive(Clone, Debug)]
pub struct PromptBank<T> {
    pub gen: T,
    pub rec: T,
}

impl<F: Float> PromptBank<Param<F>> {
    /// Each soft token starts as a copy of a uniformly drawn token-embedding row plus `N(0, 0.01²)` noise.
    pub fn init(backbone: &FrozenBackbone<F>, seed: u64, len_gen: usize, len_rec: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = soft_tokens(&backbone.decoder.tok_emb, len_gen, &mut rng);
        let rec = soft_tokens(&backbone.decoder.tok_emb, len_rec, &mut rng);
        Self { gen, rec }
    }
}

pub fn soft_tokens<F: Float>(table: &Mat<F>, rows: usize, rng: &mut impl Rng) -> Param<F> {
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let mut out = Mat::zeros((rows, table.ncols()));
    for mut row in out.rows_mut() {
        let src = rng.random_range(0..table.nrows());
        for (o, &v) in row.iter_mut().zip(table.row(src)) {
            *o = v + cst::<F>(noise.sample(rng));
        }
    }
    Arc::new(out)
}

pub const PROMPT_GEN: &str = "prompt.gen";
pub const PROMPT_REC: &str = "prompt.rec";

pub fn export_prompt<F: Float>(name: &str, p: &Param<F>, archive: &mut TensorArchive) {
    archive.insert(name, p);
}

pub fn import_prompt<F: Float>(name: &str, archive: &TensorArchive) -> Result<Param<F>> {
    archive.get(name).map(Arc::new)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Pretrain,
    Generation,
    Recommendation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptedContext<F> {
    pub prefix: Mat<F>,
    pub tokens: Vec<TokenId>,
    pub kind: PromptKind,
    /// Number of leading prefix rows that come from fused representations.
    pub fused_rows: usize,
    /// Number of leading tokens that belong to the dialogue context `C`.
    pub context_len: usize,
}

/// How many context tokens to drop from the front so the sequence fits `budget`.
///
/// `fixed` positions are never dropped; each kept context token costs `per_token`
/// positions (2 when the prefix carries an aligned fused-word row).
pub fn front_truncation(context_len: usize, per_token: usize, fixed: usize, budget: usize) -> Result<usize> {
    let total = fixed + per_token * context_len;
    if total <= budget {
        return Ok(0);
    }
    let excess = total - budget;
    let drop = excess.div_ceil(per_token);
    if drop > context_len {
        return Err(Error::ContextOverflow { len: total, max: budget });
    }
    Ok(drop)
}

fn check_width<F: Float>(a: ArrayView2<F>, b: ArrayView2<F>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("prefix widths {} and {} differ", a.ncols(), b.ncols())));
    }
    Ok(())
}

/// `[T̃; P_gen; C]`. `budget` is the number of positions available to the assembled sequence.
pub fn assemble_gen<F: Float>(
    t_fused: ArrayView2<F>,
    p_gen: ArrayView2<F>,
    context: &[TokenId],
    budget: usize,
) -> Result<PromptedContext<F>> {
    if t_fused.nrows() != context.len() {
        return Err(Error::Shape(format!(
            "{} fused word rows for {} context tokens",
            t_fused.nrows(),
            context.len()
        )));
    }
    check_width(t_fused, p_gen)?;
    let drop = front_truncation(context.len(), 2, p_gen.nrows(), budget)?;
    let words = t_fused.slice(s![drop.., ..]);
    let prefix = concatenate(Axis(0), &[words, p_gen]).expect("equal widths");
    Ok(PromptedContext {
        prefix,
        tokens: context[drop..].to_vec(),
        kind: PromptKind::Generation,
        fused_rows: words.nrows(),
        context_len: context.len() - drop,
    })
}

/// `[Ẽ; P_rec; C; S]`.
pub fn assemble_rec<F: Float>(
    e_fused: ArrayView2<F>,
    p_rec: ArrayView2<F>,
    context: &[TokenId],
    template: &[TokenId],
    budget: usize,
) -> Result<PromptedContext<F>> {
    check_width(e_fused, p_rec)?;
    let fixed = e_fused.nrows() + p_rec.nrows() + template.len();
    let drop = front_truncation(context.len(), 1, fixed, budget)?;
    let prefix = concatenate(Axis(0), &[e_fused, p_rec]).expect("equal widths");
    let mut tokens = context[drop..].to_vec();
    tokens.extend_from_slice(template);
    Ok(PromptedContext {
        prefix,
        tokens,
        kind: PromptKind::Recommendation,
        fused_rows: e_fused.nrows(),
        context_len: context.len() - drop,
    })
}

/// `[Ẽ; C; R]`.
pub fn assemble_pretrain<F: Float>(
    e_fused: ArrayView2<F>,
    context: &[TokenId],
    response: &[TokenId],
    budget: usize,
) -> Result<PromptedContext<F>> {
    let fixed = e_fused.nrows() + response.len();
    let drop = front_truncation(context.len(), 1, fixed, budget)?;
    let mut tokens = context[drop..].to_vec();
    tokens.extend_from_slice(response);
    Ok(PromptedContext {
        prefix: e_fused.to_owned(),
        tokens,
        kind: PromptKind::Pretrain,
        fused_rows: e_fused.nrows(),
        context_len: context.len() - drop,
    })
}

/// Concatenates prefix parts inside a graph, skipping empty ones.
pub fn concat_prefix<F: Float>(g: &mut Graph<F>, parts: &[Var]) -> Option<Var> {
    let parts: Vec<Var> = parts.iter().copied().filter(|&p| g.value(p).nrows() > 0).collect();
    match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(g.concat_rows(&parts)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub tokens: Vec<TokenId>,
    pub slot_count: usize,
}

impl Template {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocab) -> Self {
        let slot = vocab.special(vocab::ITEM);
        let slot_count = tokens.iter().filter(|&&t| t == slot).count();
        Self { tokens, slot_count }
    }

    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeConfig {
    #[default]
    Greedy,
    Beam(usize),
    TopK { k: usize, seed: u64 },
}

impl FromStr for DecodeConfig {
    type Err = Error;

    /// `greedy`, `beam:<width>` or `topk:<k>,<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid decode setting {s:?}"));
        let s = s.trim();
        if s == "greedy" {
            return Ok(DecodeConfig::Greedy);
        }
        if let Some(w) = s.strip_prefix("beam:") {
            let w: usize = w.trim().parse().map_err(|_| bad())?;
            return if w == 0 { Err(bad()) } else { Ok(DecodeConfig::Beam(w)) };
        }
        if let Some(rest) = s.strip_prefix("topk:") {
            let (k, seed) = rest.split_once(',').ok_or_else(bad)?;
            let k: usize = k.trim().parse().map_err(|_| bad())?;
            let seed = seed.trim().parse().map_err(|_| bad())?;
            return if k == 0 { Err(bad()) } else { Ok(DecodeConfig::TopK { k, seed }) };
        }
        Err(bad())
    }
}

impl fmt::Display for DecodeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeConfig::Greedy => write!(f, "greedy"),
            DecodeConfig::Beam(w) => write!(f, "beam:{w}"),
            DecodeConfig::TopK { k, seed } => write!(f, "topk:{k},{seed}"),
        }
    }
}

/// Tokens the decoder may never emit while generating a template.
pub fn banned_tokens(vocab: &Vocab) -> Vec<TokenId> {
    [vocab::PAD, vocab::UNK, vocab::MASK, vocab::USER, vocab::SYS, vocab::SEP]
        .iter()
        .map(|t| vocab.special(t))
        .collect()
}

fn masked_log_probs<F: Float>(logits: ArrayView2<F>, banned: &[TokenId]) -> Vec<F> {
    let mut row = logits.to_owned();
    for &b in banned {
        if b < row.ncols() {
            row[[0, b]] = F::neg_infinity();
        }
    }
    log_softmax_rows(&row).row(0).to_vec()
}

/// Autoregressive continuation of a generation prompt until `[EOS]` or `max_new_tokens`.
pub fn generate_template<F: Float>(
    backbone: &FrozenBackbone<F>,
    ctx: &PromptedContext<F>,
    decode: DecodeConfig,
    max_new_tokens: usize,
    vocab: &Vocab,
) -> Result<Template> {
    if max_new_tokens == 0 {
        return Ok(Template::default());
    }
    let eos = vocab.special(vocab::EOS);
    let banned = banned_tokens(vocab);
    let cfg = &backbone.config;
    let room = backbone.config.max_ctx.saturating_sub(ctx.prefix.nrows() + ctx.tokens.len());
    let max_new = max_new_tokens.min(room);
    let mut cache = KvCache::new(cfg.n_layers, cfg.d_model);
    let prefix = (ctx.prefix.nrows() > 0).then(|| ctx.prefix.view());
    let hidden = backbone
        .decoder
        .forward_cached(cfg.n_heads, &mut cache, prefix, &ctx.tokens, true)?;
    if hidden.nrows() == 0 {
        return Err(Error::Empty("generation prompt"));
    }
    let last = backbone.decoder.logits(hidden.slice(s![hidden.nrows() - 1.., ..]));
    let step = |cache: &mut KvCache<F>, tok: TokenId| -> Result<Mat<F>> {
        let h = backbone.decoder.forward_cached(cfg.n_heads, cache, None, &[tok], true)?;
        Ok(backbone.decoder.logits(h.view()))
    };
    let tokens = match decode {
        DecodeConfig::Greedy => {
            let mut out = Vec::new();
            let mut logits = last;
            while out.len() < max_new {
                let lp = masked_log_probs(logits.view(), &banned);
                let tok = argmax(&lp);
                if tok == eos {
                    break;
                }
                out.push(tok);
                if out.len() == max_new {
                    break;
                }
                logits = step(&mut cache, tok)?;
            }
            out
        }
        DecodeConfig::TopK { k, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            let mut logits = last;
            while out.len() < max_new {
                let lp = masked_log_probs(logits.view(), &banned);
                let tok = sample_top_k(&lp, k, &mut rng);
                if tok == eos {
                    break;
                }
                out.push(tok);
                if out.len() == max_new {
                    break;
                }
                logits = step(&mut cache, tok)?;
            }
            out
        }
        DecodeConfig::Beam(width) => beam_search(last, cache, width, max_new, eos, &banned, &step)?,
    };
    Ok(Template::new(tokens, vocab))
}

fn argmax<F: Float>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked<F: Float>(v: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

fn sample_top_k<F: Float>(lp: &[F], k: usize, rng: &mut impl Rng) -> usize {
    let top: Vec<usize> = ranked(lp).into_iter().take(k).filter(|&i| lp[i].is_finite()).collect();
    if top.is_empty() {
        return argmax(lp);
    }
    let m = lp[top[0]];
    let w: Vec<f64> = top.iter().map(|&i| (lp[i] - m).to_f64().unwrap_or(0.0).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &wi) in top.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    *top.last().expect("non-empty")
}

struct Beam<F> {
    tokens: Vec<TokenId>,
    score: f64,
    cache: KvCache<F>,
    logits: Mat<F>,
}

fn beam_search<F: Float>(
    first: Mat<F>,
    cache: KvCache<F>,
    width: usize,
    max_new: usize,
    eos: TokenId,
    banned: &[TokenId],
    step: &dyn Fn(&mut KvCache<F>, TokenId) -> Result<Mat<F>>,
) -> Result<Vec<TokenId>> {
    let mut live = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        cache,
        logits: first,
    }];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    for _ in 0..max_new {
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            let lp = masked_log_probs(beam.logits.view(), banned);
            for tok in ranked(&lp).into_iter().take(width) {
                let v = lp[tok].to_f64().unwrap_or(f64::NEG_INFINITY);
                if v.is_finite() {
                    candidates.push((b, tok, beam.score + v));
                }
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        let mut next = Vec::new();
        for (b, tok, score) in candidates {
            if next.len() + finished.len() >= width * 2 || next.len() >= width {
                break;
            }
            if tok == eos {
                finished.push((live[b].tokens.clone(), score));
                continue;
            }
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let mut cache = live[b].cache.clone();
            let logits = if tokens.len() < max_new { step(&mut cache, tok)? } else { live[b].logits.clone() };
            next.push(Beam {
                tokens,
                score,
                cache,
                logits,
            });
        }
        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        live = next.into_iter().filter(|b| b.score > best_finished).collect();
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|b| (b.tokens, b.score)));
    let best = finished
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
        .map(|f| f.0)
        .unwrap_or_default();
    Ok(best)
}

/// Replaces the i-th `[ITEM]` by the name of the i-th ranked item, cycling from the top
/// when there are more slots than items.
pub fn fill_template(template: &Template, ranked: &[EntityId], vocab: &Vocab, kg: &KnowledgeGraph) -> Result<Vec<String>> {
    if template.slot_count > 0 && ranked.is_empty() {
        return Err(Error::NoRecommendations {
            slots: template.slot_count,
        });
    }
    let slot = vocab.special(vocab::ITEM);
    let mut out = Vec::with_capacity(template.tokens.len());
    let mut next = 0;
    for &t in &template.tokens {
        if t == slot {
            out.extend(vocab::words(kg.name(ranked[next % ranked.len()])));
            next += 1;
        } else {
            out.push(vocab.token(t).to_string());
        }
    }
    Ok(out)
}

/// Scores every catalog item against the pooled context; returns `(item, probability)`
/// pairs sorted by descending probability, ties by ascending item id, truncated to `k`.
pub fn recommend<F: Float>(
    backbone: &FrozenBackbone<F>,
    ctx: &PromptedContext<F>,
    item_table: ArrayView2<F>,
    item_ids: &[EntityId],
    k: usize,
    pooling: Pooling,
) -> Result<Vec<(EntityId, F)>> {
    let (hidden, _) = backbone.decoder_forward(ctx.prefix.view(), &ctx.tokens)?;
    rank_items(&pool_context(hidden.view(), pooling)?.view(), item_table, item_ids, k)
}

pub fn rank_items<F: Float>(
    h_u: &ndarray::ArrayView1<F>,
    item_table: ArrayView2<F>,
    item_ids: &[EntityId],
    k: usize,
) -> Result<Vec<(EntityId, F)>> {
    if item_table.nrows() != item_ids.len() || item_ids.is_empty() {
        return Err(Error::Shape(format!(
            "{} item rows for {} item ids",
            item_table.nrows(),
            item_ids.len()
        )));
    }
    let logits = item_table.dot(h_u).insert_axis(Axis(0));
    let probs = softmax_rows(&logits);
    let probs = probs.row(0);
    let mut order: Vec<usize> = (0..item_ids.len()).collect();
    order.sort_by(|&a, &b| {
        logits[[0, b]]
            .partial_cmp(&logits[[0, a]])
            .unwrap_or(Ordering::Equal)
            .then(item_ids[a].cmp(&item_ids[b]))
    });
    Ok(order.into_iter().take(k).map(|i| (item_ids[i], probs[i])).collect())
}
