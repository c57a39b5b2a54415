//! Graph construction of the three training objectives.

use std::sync::Arc;

use crate::data::{EntityId, TokenId, TrainingInstance};
use crate::encoders::{FrozenBackbone, GraphStructure, Param, Transformer};
use crate::error::{Error, Result};
use crate::fusion::{fuse_graph, pool_graph, EntityScoring, FusionParams, Pooling};
use crate::prompts::{concat_prefix, front_truncation};
use crate::tensor::{cst, Float, Graph, Mat, SparseRows, Var};

/// Probability clamp applied before the logarithms of the recommendation loss.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// Binary cross-entropy over the softmax item probabilities, summed over items and instances.
    #[default]
    Bce,
    /// Softmax cross-entropy of each target item, summed over targets and instances.
    Ce,
}

impl std::str::FromStr for RecLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(RecLoss::Bce),
            "ce" => Ok(RecLoss::Ce),
            other => Err(Error::Config(format!("unknown rec_loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for RecLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecLoss::Bce => "bce",
            RecLoss::Ce => "ce",
        })
    }
}

/// A training instance with its frozen encoder output precomputed.
#[derive(Clone, Debug)]
pub struct Prepared<F> {
    pub instance: TrainingInstance,
    /// Bidirectional encoder output for `instance.context_tokens`.
    pub words: Arc<Mat<F>>,
    /// Explicit tokens after the context: `R` for pre-training, the target template
    /// for generation, the (generated or gold) template `S` for recommendation.
    pub continuation: Vec<TokenId>,
    /// Target rows of the catalog for recommendation.
    pub item_targets: Vec<usize>,
}

impl<F: Float> Prepared<F> {
    pub fn new(backbone: &FrozenBackbone<F>, instance: TrainingInstance, continuation: Vec<TokenId>, item_rows: &dyn Fn(EntityId) -> Option<usize>) -> Result<Self> {
        let words = Arc::new(backbone.encode_bidirectional(&instance.context_tokens)?);
        let item_targets = instance.target_items.iter().filter_map(|&e| item_rows(e)).collect();
        Ok(Self {
            instance,
            words,
            continuation,
            item_targets,
        })
    }
}

/// Parameters bound into one graph: the frozen decoder as constants, the tunables as leaves.
pub struct Bound {
    pub decoder: Transformer<Var>,
    pub fusion: FusionParams<Var>,
    pub prompt: Option<Var>,
    /// Graph-encoded table of every entity.
    pub entities: Var,
}

pub struct LossContext<'a, F: Float> {
    pub backbone: &'a FrozenBackbone<F>,
    pub structure: &'a GraphStructure<F>,
    pub item_ids: &'a [EntityId],
    pub pooling: Pooling,
    pub eos: TokenId,
    pub rec_loss: RecLoss,
    pub scoring: EntityScoring,
}

impl<F: Float> LossContext<'_, F> {
    pub fn bind(&self, g: &mut Graph<F>, fusion: &FusionParams<Param<F>>, prompt: Option<&Param<F>>) -> Result<Bound> {
        fusion.graph.check(self.structure)?;
        let decoder = self.backbone.decoder.bind(g, false);
        let fusion = fusion.bind(g, true);
        let prompt = prompt.map(|p| g.leaf(p.clone(), true));
        let entities = fusion.graph.encode(g, self.structure);
        Ok(Bound {
            decoder,
            fusion,
            prompt,
            entities,
        })
    }

    fn fused(&self, g: &mut Graph<F>, b: &Bound, p: &Prepared<F>) -> (Var, Var) {
        let t = g.leaf(p.words.clone(), false);
        let t = b.fusion.project_words(g, t);
        let e = g.gather_rows(b.entities, &p.instance.context_entities);
        let (_, words, entities) = fuse_graph(g, t, e, b.fusion.bilinear);
        (words, entities)
    }

    fn prompt_rows(&self, g: &Graph<F>, b: &Bound) -> usize {
        b.prompt.map_or(0, |p| g.value(p).nrows())
    }

    fn forward(&self, g: &mut Graph<F>, b: &Bound, prefix: &[Var], tokens: &[TokenId]) -> Result<(Var, usize)> {
        let prefix = concat_prefix(g, prefix);
        let n_prefix = prefix.map_or(0, |p| g.value(p).nrows());
        let cfg = &self.backbone.config;
        let hidden = b.decoder.forward(g, cfg.n_heads, prefix, tokens, true)?;
        Ok((hidden, n_prefix))
    }

    /// Mean cross-entropy over the response entities for the layout `[Ẽ; C; R]`.
    pub fn fuse_instance(&self, g: &mut Graph<F>, b: &Bound, p: &Prepared<F>) -> Result<Var> {
        let inst = &p.instance;
        if inst.target_entities.is_empty() {
            return Err(Error::Empty("pre-training targets"));
        }
        let (_, ents) = self.fused(g, b, p);
        let n_e = g.value(ents).nrows();
        let ctx = &inst.context_tokens;
        let drop = front_truncation(ctx.len(), 1, n_e + p.continuation.len(), self.backbone.config.max_ctx)?;
        let mut tokens = ctx[drop..].to_vec();
        tokens.extend_from_slice(&p.continuation);
        let (hidden, _) = self.forward(g, b, &[ents], &tokens)?;
        let h = pool_graph(g, hidden, self.pooling);
        let table = self.scoring_table(g, b, &inst.context_entities, ents);
        let logits = g.matmul_t(h, table);
        let targets: Vec<(usize, usize)> = inst.target_entities.iter().map(|&e| (0, e)).collect();
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Entity table with the rows of `context` replaced by their fused rows under `Fused` scoring.
    fn scoring_table(&self, g: &mut Graph<F>, b: &Bound, context: &[EntityId], fused: Var) -> Var {
        if self.scoring == EntityScoring::Raw || context.is_empty() {
            return b.entities;
        }
        let raw = g.gather_rows(b.entities, context);
        let neg = g.scale(raw, cst(-1.0));
        let delta = g.add(fused, neg);
        let mut rows = vec![Vec::new(); self.structure.num_entities];
        for (j, &e) in context.iter().enumerate() {
            rows[e].push((j, F::one()));
        }
        let scatter = Arc::new(SparseRows {
            n_cols: context.len(),
            rows,
        });
        let delta = g.spmm(scatter, delta);
        g.add(b.entities, delta)
    }

    /// Mean next-token NLL of the template plus `[EOS]` for `[T̃; P_gen; C]`, and the token count.
    pub fn gen_instance(&self, g: &mut Graph<F>, b: &Bound, p: &Prepared<F>) -> Result<(Var, usize)> {
        let ctx = &p.instance.context_tokens;
        let target = &p.continuation;
        let pl = self.prompt_rows(g, b);
        let drop = front_truncation(ctx.len(), 2, pl + target.len(), self.backbone.config.max_ctx)?;
        let (words, _) = self.fused(g, b, p);
        let words = g.rows(words, drop, ctx.len());
        let mut parts = vec![words];
        parts.extend(b.prompt);
        let mut tokens = ctx[drop..].to_vec();
        tokens.extend_from_slice(target);
        let (hidden, n_prefix) = self.forward(g, b, &parts, &tokens)?;
        let first = (n_prefix + ctx.len() - drop)
            .checked_sub(1)
            .ok_or(Error::Empty("generation prompt"))?;
        let rows = g.rows(hidden, first, first + target.len() + 1);
        let logits = b.decoder.logits(g, rows);
        let targets: Vec<(usize, usize)> = target
            .iter()
            .copied()
            .chain([self.eos])
            .enumerate()
            .collect();
        Ok((g.cross_entropy(logits, &targets), targets.len()))
    }

    /// Item logits (`1 × M`) for `[Ẽ; P_rec; C; S]`.
    pub fn rec_logits(&self, g: &mut Graph<F>, b: &Bound, items: Var, p: &Prepared<F>) -> Result<Var> {
        let ctx = &p.instance.context_tokens;
        let (_, ents) = self.fused(g, b, p);
        let n_e = g.value(ents).nrows();
        let fixed = n_e + self.prompt_rows(g, b) + p.continuation.len();
        let drop = front_truncation(ctx.len(), 1, fixed, self.backbone.config.max_ctx)?;
        let mut parts = vec![ents];
        parts.extend(b.prompt);
        let mut tokens = ctx[drop..].to_vec();
        tokens.extend_from_slice(&p.continuation);
        let (hidden, _) = self.forward(g, b, &parts, &tokens)?;
        let h = pool_graph(g, hidden, self.pooling);
        Ok(g.matmul_t(h, items))
    }

    pub fn items(&self, g: &mut Graph<F>, b: &Bound) -> Var {
        g.gather_rows(b.entities, self.item_ids)
    }

    /// Recommendation loss of one instance under the configured variant.
    pub fn rec_instance(&self, g: &mut Graph<F>, b: &Bound, items: Var, p: &Prepared<F>) -> Result<Var> {
        if p.item_targets.is_empty() {
            return Err(Error::Empty("recommendation targets"));
        }
        let logits = self.rec_logits(g, b, items, p)?;
        Ok(match self.rec_loss {
            RecLoss::Bce => {
                let probs = g.softmax(logits);
                let mut labels = Mat::zeros((1, self.item_ids.len()));
                for &t in &p.item_targets {
                    labels[[0, t]] = F::one();
                }
                g.bce(probs, labels, cst(BCE_CLAMP))
            }
            RecLoss::Ce => {
                let targets: Vec<(usize, usize)> = p.item_targets.iter().map(|&t| (0, t)).collect();
                let ce = g.cross_entropy(logits, &targets);
                g.scale(ce, cst(targets.len() as f64))
            }
        })
    }

    /// Mean over instances of the per-instance pre-training loss.
    pub fn fuse_loss(&self, g: &mut Graph<F>, b: &Bound, batch: &[&Prepared<F>]) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.len());
        for p in batch {
            terms.push(self.fuse_instance(g, b, p)?);
        }
        let total = sum(g, &terms)?;
        Ok(g.scale(total, cst(1.0 / batch.len() as f64)))
    }

    /// Token-level NLL averaged over every target token of the batch.
    pub fn gen_loss(&self, g: &mut Graph<F>, b: &Bound, batch: &[&Prepared<F>]) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.len());
        let mut counts = Vec::with_capacity(batch.len());
        for p in batch {
            let (mean, n) = self.gen_instance(g, b, p)?;
            terms.push(mean);
            counts.push(n);
        }
        let total: usize = counts.iter().sum();
        let weighted: Vec<Var> = terms
            .iter()
            .zip(&counts)
            .map(|(&t, &n)| g.scale(t, cst(n as f64 / total as f64)))
            .collect();
        sum(g, &weighted)
    }

    /// Sum over instances of the recommendation loss.
    pub fn rec_loss(&self, g: &mut Graph<F>, b: &Bound, batch: &[&Prepared<F>]) -> Result<Var> {
        let items = self.items(g, b);
        let mut terms = Vec::with_capacity(batch.len());
        for p in batch {
            terms.push(self.rec_instance(g, b, items, p)?);
        }
        sum(g, &terms)
    }
}

pub fn sum<F: Float>(g: &mut Graph<F>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or(Error::Empty("loss batch"))?;
    Ok(rest.iter().fold(first, |acc, &t| g.add(acc, t)))
}
