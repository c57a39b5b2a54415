//! Pre-norm transformer stack used both as the causal decoder and the bidirectional encoder.
//!
//! Parameter containers are generic over their leaf type: `Transformer<Param<F>>`
//! holds weights, `Transformer<Var>` holds the same weights bound into a [`Graph`].

use std::sync::Arc;

use ndarray::{concatenate, s, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::TensorArchive;
use crate::error::{Error, Result};
use crate::tensor::{attention, cst, gelu, layer_norm, Float, Graph, Mat, Var};

pub type Param<F> = Arc<Mat<F>>;

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_fc: T,
    pub b_fc: T,
    pub w_proj: T,
    pub b_proj: T,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj)
    };
}

impl<T> Block<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Block<U> {
        macro_rules! build {
            ($($field:ident),*) => {
                Block { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)),* }
            };
        }
        block_fields!(build)
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        macro_rules! visit {
            ($($field:ident),*) => {{
                $( f(&format!("{prefix}{}", stringify!($field)), &mut self.$field); )*
            }};
        }
        block_fields!(visit)
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
}

impl<T> Transformer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Transformer<U> {
        Transformer {
            tok_emb: f(&format!("{prefix}tok_emb"), &self.tok_emb),
            pos_emb: f(&format!("{prefix}pos_emb"), &self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{prefix}blocks.{i}."), f))
                .collect(),
            lnf_g: f(&format!("{prefix}lnf_g"), &self.lnf_g),
            lnf_b: f(&format!("{prefix}lnf_b"), &self.lnf_b),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}tok_emb"), &mut self.tok_emb);
        f(&format!("{prefix}pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}."), f);
        }
        f(&format!("{prefix}lnf_g"), &mut self.lnf_g);
        f(&format!("{prefix}lnf_b"), &mut self.lnf_b);
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.map(prefix, &mut |n, t| f(n, t));
    }
}

/// Per-layer key/value rows for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    keys: Vec<Mat<F>>,
    values: Vec<Mat<F>>,
}

impl<F: Float> KvCache<F> {
    pub fn new(layers: usize, d: usize) -> Self {
        Self {
            keys: vec![Mat::zeros((0, d)); layers],
            values: vec![Mat::zeros((0, d)); layers],
        }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn normal<F: Float>(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Param<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Arc::new(Mat::from_shape_fn(shape, |_| cst::<F>(dist.sample(rng))))
}

fn filled<F: Float>(shape: (usize, usize), v: f64) -> Param<F> {
    Arc::new(Mat::from_elem(shape, cst::<F>(v)))
}

impl<F: Float> Transformer<Param<F>> {
    /// GPT-2 style initialization: N(0, 0.02²) weights, residual projections scaled by 1/√(2L).
    pub fn init(rng: &mut impl Rng, vocab: usize, d: usize, layers: usize, max_ctx: usize) -> Self {
        let resid = 0.02 / ((2 * layers.max(1)) as f64).sqrt();
        let blocks = (0..layers)
            .map(|_| Block {
                ln1_g: filled((1, d), 1.0),
                ln1_b: filled((1, d), 0.0),
                w_q: normal(rng, (d, d), 0.02),
                b_q: filled((1, d), 0.0),
                w_k: normal(rng, (d, d), 0.02),
                b_k: filled((1, d), 0.0),
                w_v: normal(rng, (d, d), 0.02),
                b_v: filled((1, d), 0.0),
                w_o: normal(rng, (d, d), resid),
                b_o: filled((1, d), 0.0),
                ln2_g: filled((1, d), 1.0),
                ln2_b: filled((1, d), 0.0),
                w_fc: normal(rng, (d, 4 * d), 0.02),
                b_fc: filled((1, 4 * d), 0.0),
                w_proj: normal(rng, (4 * d, d), resid),
                b_proj: filled((1, d), 0.0),
            })
            .collect();
        Self {
            tok_emb: normal(rng, (vocab, d), 0.02),
            pos_emb: normal(rng, (max_ctx, d), 0.01),
            blocks,
            lnf_g: filled((1, d), 1.0),
            lnf_b: filled((1, d), 0.0),
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.nrows()
    }

    pub fn max_ctx(&self) -> usize {
        self.pos_emb.nrows()
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Transformer<Var> {
        self.map("", &mut |_, p| g.leaf(p.clone(), trainable))
    }

    pub fn export(&self, prefix: &str, archive: &mut TensorArchive) {
        self.visit(prefix, &mut |name, p| archive.insert(name, p));
    }

    /// Overwrites every tensor from `archive`, checking shapes against the current ones.
    pub fn import(&mut self, prefix: &str, archive: &TensorArchive) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut(prefix, &mut |name, p| {
            if res.is_ok() {
                match archive.get_shaped::<F>(name, p.dim()) {
                    Ok(m) => *p = Arc::new(m),
                    Err(e) => res = Err(e),
                }
            }
        });
        res
    }

    /// Runs new positions through the stack, extending `cache`.
    ///
    /// The new sequence is `prefix` rows (latent vectors) followed by embedded
    /// `tokens`; learned positional embeddings are added to both. Returns the
    /// final layer-normed hidden state of every new position.
    pub fn forward_cached(
        &self,
        heads: usize,
        cache: &mut KvCache<F>,
        prefix: Option<ArrayView2<F>>,
        tokens: &[usize],
        causal: bool,
    ) -> Result<Mat<F>> {
        let d = self.d_model();
        let past = cache.len();
        let n_prefix = prefix.map_or(0, |p| p.nrows());
        let n = n_prefix + tokens.len();
        if past + n > self.max_ctx() {
            return Err(Error::ContextOverflow {
                len: past + n,
                max: self.max_ctx(),
            });
        }
        if let Some(p) = prefix {
            if p.ncols() != d {
                return Err(Error::Shape(format!("prefix width {} != d_model {d}", p.ncols())));
            }
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        let emb = self.tok_emb.select(Axis(0), tokens);
        let mut x = match prefix {
            Some(p) => concatenate(Axis(0), &[p, emb.view()]).expect("same width"),
            None => emb,
        };
        x += &self.pos_emb.slice(s![past..past + n, ..]);
        for (l, b) in self.blocks.iter().enumerate() {
            let (h, _, _) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
            let q = h.dot(&*b.w_q) + &*b.b_q;
            let k = h.dot(&*b.w_k) + &*b.b_k;
            let v = h.dot(&*b.w_v) + &*b.b_v;
            cache.keys[l] = concatenate(Axis(0), &[cache.keys[l].view(), k.view()]).expect("same width");
            cache.values[l] = concatenate(Axis(0), &[cache.values[l].view(), v.view()]).expect("same width");
            let (a, _) = attention(
                q.view(),
                cache.keys[l].view(),
                cache.values[l].view(),
                heads,
                causal.then_some(past),
            );
            x += &(a.dot(&*b.w_o) + &*b.b_o);
            let (h2, _, _) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
            let m = (h2.dot(&*b.w_fc) + &*b.b_fc).mapv(gelu);
            x += &(m.dot(&*b.w_proj) + &*b.b_proj);
        }
        Ok(layer_norm(&x, &self.lnf_g, &self.lnf_b).0)
    }

    /// Tied output head: logits = hidden · tok_embᵀ.
    pub fn logits(&self, hidden: ArrayView2<F>) -> Mat<F> {
        hidden.dot(&self.tok_emb.t())
    }
}

impl Transformer<Var> {
    /// Graph version of [`Transformer::forward_cached`] over a whole sequence.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        heads: usize,
        prefix: Option<Var>,
        tokens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        self.forward_at(g, heads, prefix, tokens, causal, 0)
    }

    /// As [`Transformer::forward`], with the first position at `offset`.
    pub fn forward_at<F: Float>(
        &self,
        g: &mut Graph<F>,
        heads: usize,
        prefix: Option<Var>,
        tokens: &[usize],
        causal: bool,
        offset: usize,
    ) -> Result<Var> {
        let max_ctx = g.value(self.pos_emb).nrows();
        let n_prefix = prefix.map_or(0, |p| g.value(p).nrows());
        let n = n_prefix + tokens.len();
        if offset + n > max_ctx {
            return Err(Error::ContextOverflow { len: offset + n, max: max_ctx });
        }
        if n == 0 {
            return Err(Error::Empty("transformer input"));
        }
        let emb = g.gather_rows(self.tok_emb, tokens);
        let x = match prefix {
            Some(p) if n_prefix > 0 => g.concat_rows(&[p, emb]),
            _ => emb,
        };
        let pos = g.rows(self.pos_emb, offset, offset + n);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            let h = g.layer_norm(x, b.ln1_g, b.ln1_b);
            let q = g.matmul(h, b.w_q);
            let q = g.add_row(q, b.b_q);
            let k = g.matmul(h, b.w_k);
            let k = g.add_row(k, b.b_k);
            let v = g.matmul(h, b.w_v);
            let v = g.add_row(v, b.b_v);
            let a = g.attention(q, k, v, heads, causal);
            let o = g.matmul(a, b.w_o);
            let o = g.add_row(o, b.b_o);
            x = g.add(x, o);
            let h2 = g.layer_norm(x, b.ln2_g, b.ln2_b);
            let m = g.matmul(h2, b.w_fc);
            let m = g.add_row(m, b.b_fc);
            let m = g.gelu(m);
            let m = g.matmul(m, b.w_proj);
            let m = g.add_row(m, b.b_proj);
            x = g.add(x, m);
        }
        Ok(g.layer_norm(x, self.lnf_g, self.lnf_b))
    }

    pub fn logits<F: Float>(&self, g: &mut Graph<F>, hidden: Var) -> Var {
        g.matmul_t(hidden, self.tok_emb)
    }
}
