//! Self-supervised warm-up that produces the backbone before it is frozen.
//!
//! The decoder learns next-token prediction over `context ++ reply ++ [EOS]`, where
//! the reply is the item-slotted template with probability `template_prob` (so the
//! decoder knows `[ITEM]`). Each sequence starts at a random position so every
//! positional embedding is trained. The encoder learns masked-token prediction over
//! the context.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, AdamW};
use super::Batcher;
use crate::data::vocab::{self, TokenId, Vocab};
use crate::data::TrainingInstance;
use crate::encoders::{BackboneConfig, FrozenBackbone, Param, Transformer};
use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackbonePretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub template_prob: f64,
    pub mask_prob: f64,
}

impl Default for BackbonePretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            template_prob: 0.5,
            mask_prob: 0.15,
        }
    }
}

struct Sequence {
    context: Vec<TokenId>,
    response: Vec<TokenId>,
    template: Vec<TokenId>,
}

pub struct BackbonePretrainer<F: Float> {
    pub config: BackboneConfig,
    pub decoder: Transformer<Param<F>>,
    pub encoder: Transformer<Param<F>>,
    cfg: BackbonePretrainConfig,
    data: Vec<Sequence>,
    opt: AdamW<F>,
    batcher: Batcher,
    rng: ChaCha8Rng,
    eos: TokenId,
    mask: TokenId,
    pub losses: Vec<f64>,
}

impl<F: Float> BackbonePretrainer<F> {
    pub fn new(config: BackboneConfig, vocab: &Vocab, instances: &[TrainingInstance], cfg: BackbonePretrainConfig) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("backbone pre-training instances"));
        }
        if config.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the vocabulary ({})",
                config.vocab_size,
                vocab.len()
            )));
        }
        let init = FrozenBackbone::<F>::random(config.clone(), cfg.seed)?;
        let data = instances
            .iter()
            .map(|i| Sequence {
                context: i.context_tokens.clone(),
                response: i.target_response.clone(),
                template: i.target_template.clone(),
            })
            .collect::<Vec<_>>();
        Ok(Self {
            decoder: init.decoder,
            encoder: init.encoder,
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
            batcher: Batcher::new(data.len(), cfg.seed),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            eos: vocab.special(vocab::EOS),
            mask: vocab.special(vocab::MASK),
            data,
            config,
            cfg,
            losses: Vec::new(),
        })
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batcher.next(self.cfg.batch_size);
        let mut g = Graph::<F>::new();
        let dec = self.decoder.bind(&mut g, true);
        let enc = self.encoder.bind(&mut g, true);
        let mut lm = Vec::new();
        let mut mlm = Vec::new();
        let max_ctx = self.config.max_ctx;
        for &i in &batch {
            let s = &self.data[i];
            let reply = if self.rng.random_bool(self.cfg.template_prob) { &s.template } else { &s.response };
            let mut tokens: Vec<TokenId> = s.context.iter().chain(reply).copied().collect();
            tokens.push(self.eos);
            if tokens.len() > max_ctx {
                tokens.drain(..tokens.len() - max_ctx);
            }
            if tokens.len() >= 2 {
                let offset = self.rng.random_range(0..=max_ctx - tokens.len());
                let h = dec.forward_at(&mut g, self.config.n_heads, None, &tokens[..tokens.len() - 1], true, offset)?;
                let logits = dec.logits(&mut g, h);
                let targets: Vec<(usize, usize)> = tokens[1..].iter().copied().enumerate().collect();
                lm.push(g.cross_entropy(logits, &targets));
            }
            let context = s.context.clone();
            if let Some(loss) = self.masked_lm(&mut g, &enc, &context)? {
                mlm.push(loss);
            }
        }
        let mut parts = Vec::new();
        for terms in [&lm, &mlm] {
            if !terms.is_empty() {
                let total = super::losses::sum(&mut g, terms)?;
                parts.push(g.scale(total, cst(1.0 / terms.len() as f64)));
            }
        }
        let loss = super::losses::sum(&mut g, &parts)?;
        let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "backbone".into(),
                step: self.losses.len() + 1,
                last: self.losses.last().copied(),
            });
        }
        let mut grads = g.backward(loss);
        let mut named = BTreeMap::new();
        dec.map("decoder.", &mut |n, v| {
            if let Some(gr) = grads.take(*v) {
                named.insert(n.to_string(), gr);
            }
        });
        enc.map("encoder.", &mut |n, v| {
            if let Some(gr) = grads.take(*v) {
                named.insert(n.to_string(), gr);
            }
        });
        clip_global_norm(&mut named, self.cfg.clip_norm);
        self.opt.begin_step();
        let opt = &mut self.opt;
        self.decoder.visit_mut("decoder.", &mut |n, p| opt.update(n, p, named.get(n)));
        self.encoder.visit_mut("encoder.", &mut |n, p| opt.update(n, p, named.get(n)));
        self.losses.push(value);
        Ok(value)
    }

    fn masked_lm(&mut self, g: &mut Graph<F>, enc: &Transformer<Var>, context: &[TokenId]) -> Result<Option<Var>> {
        let n = context.len().min(self.config.max_ctx);
        let context = &context[context.len() - n..];
        if n == 0 {
            return Ok(None);
        }
        let mut positions: Vec<usize> = (0..n).filter(|_| self.rng.random_bool(self.cfg.mask_prob)).collect();
        if positions.is_empty() {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut self.rng);
            positions.push(all[0]);
        }
        let mut input = context.to_vec();
        for &p in &positions {
            input[p] = self.mask;
        }
        let h = enc.forward(g, self.config.enc_heads, None, &input, false)?;
        let picked = g.gather_rows(h, &positions);
        let logits = enc.logits(g, picked);
        let targets: Vec<(usize, usize)> = positions.iter().enumerate().map(|(r, &p)| (r, context[p])).collect();
        Ok(Some(g.cross_entropy(logits, &targets)))
    }

    pub fn run(&mut self) -> Result<()> {
        while self.losses.len() < self.cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> FrozenBackbone<F> {
        FrozenBackbone::new(self.config, self.decoder, self.encoder)
    }
}
