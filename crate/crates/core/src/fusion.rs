//! Bilinear cross-interaction between word and entity representations.
//!
//! Tokens and entities are rows:
//!
//! ```text
//! A  = T W Eᵀ        (n_W × n_E)
//! T̃ = T + A E       (n_W × d)
//! Ẽ = E + Aᵀ T      (n_E × d)
//! ```

use std::sync::Arc;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorArchive;
use crate::encoders::{GraphEncoderParams, GraphStructure, Param};
use crate::error::{Error, Result};
use crate::tensor::{cst, softmax_rows, Float, Graph, Mat, Var};

/// Θ_fuse: bilinear map, graph encoder and the optional encoder-to-decoder bridge.
#[derive(Clone, Debug)]
pub struct FusionParams<T> {
    pub bilinear: T,
    /// `enc_d × d`, present only when the text encoder width differs from the decoder's.
    pub bridge: Option<T>,
    pub graph: GraphEncoderParams<T>,
}

impl<T> FusionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> FusionParams<U> {
        FusionParams {
            bilinear: f(&format!("{prefix}bilinear"), &self.bilinear),
            bridge: self.bridge.as_ref().map(|b| f(&format!("{prefix}bridge"), b)),
            graph: self.graph.map(&format!("{prefix}graph."), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}bilinear"), &mut self.bilinear);
        if let Some(b) = self.bridge.as_mut() {
            f(&format!("{prefix}bridge"), b);
        }
        self.graph.visit_mut(&format!("{prefix}graph."), f);
    }
}

pub const FUSION_PREFIX: &str = "fusion.";

impl<F: Float> FusionParams<Param<F>> {
    /// `W ~ N(0, 0.02²)`; the bridge is added when `enc_d != d`.
    pub fn init(rng: &mut impl Rng, num_entities: usize, num_relations: usize, enc_d: usize, d: usize) -> Self {
        let w = Normal::new(0.0, 0.02).expect("valid std");
        let bilinear = Arc::new(Mat::from_shape_fn((d, d), |_| cst::<F>(w.sample(rng))));
        let bridge = (enc_d != d).then(|| {
            let b = Normal::new(0.0, (1.0 / enc_d as f64).sqrt()).expect("valid std");
            Arc::new(Mat::from_shape_fn((enc_d, d), |_| cst::<F>(b.sample(rng))))
        });
        let graph = GraphEncoderParams::init(rng, num_entities, num_relations, d);
        Self { bilinear, bridge, graph }
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> FusionParams<Var> {
        self.map("", &mut |_, p| g.leaf(p.clone(), trainable))
    }

    pub fn export(&self, prefix: &str, archive: &mut TensorArchive) {
        self.map(prefix, &mut |name, p| archive.insert(name, p));
    }

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

    /// Maps encoder outputs into decoder width.
    pub fn project_words(&self, t: ArrayView2<F>) -> Mat<F> {
        match &self.bridge {
            Some(b) => t.dot(&**b),
            None => t.to_owned(),
        }
    }

    /// Graph-encoded entity table (`num_entities × d`).
    pub fn entity_table(&self, structure: &GraphStructure<F>) -> Result<Mat<F>> {
        self.graph.encode(structure)
    }
}

impl FusionParams<Var> {
    pub fn project_words<F: Float>(&self, g: &mut Graph<F>, t: Var) -> Var {
        match self.bridge {
            Some(b) => g.matmul(t, b),
            None => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentations<F> {
    pub affinity: Mat<F>,
    pub words: Mat<F>,
    pub entities: Mat<F>,
}

pub fn fuse<F: Float>(t: ArrayView2<F>, e: ArrayView2<F>, w: ArrayView2<F>) -> Result<FusedRepresentations<F>> {
    let d = w.nrows();
    if w.ncols() != d || t.ncols() != d || e.ncols() != d {
        return Err(Error::Shape(format!(
            "fuse: T is {:?}, E is {:?}, W is {:?}",
            t.dim(),
            e.dim(),
            w.dim()
        )));
    }
    let affinity = t.dot(&w).dot(&e.t());
    let words = &t + &affinity.dot(&e);
    let entities = &e + &affinity.t().dot(&t);
    Ok(FusedRepresentations {
        affinity,
        words,
        entities,
    })
}

/// Graph version of [`fuse`]; returns `(A, T̃, Ẽ)`. Empty sides pass through unchanged.
pub fn fuse_graph<F: Float>(g: &mut Graph<F>, t: Var, e: Var, w: Var) -> (Option<Var>, Var, Var) {
    if g.value(t).nrows() == 0 || g.value(e).nrows() == 0 {
        return (None, t, e);
    }
    let tw = g.matmul(t, w);
    let a = g.matmul_t(tw, e);
    let ae = g.matmul(a, e);
    let words = g.add(t, ae);
    let at = g.transpose(a);
    let att = g.matmul(at, t);
    let entities = g.add(e, att);
    (Some(a), words, entities)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Pooling::Last),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        })
    }
}

/// Which embeddings score entities in the fusion pre-training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityScoring {
    /// Rows of the graph-encoded entity table.
    #[default]
    Raw,
    /// As `Raw`, but entities of the current context use their fused rows of `Ẽ`.
    Fused,
}

impl std::str::FromStr for EntityScoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EntityScoring::Raw),
            "fused" => Ok(EntityScoring::Fused),
            other => Err(Error::Config(format!("unknown entity_scoring {other:?}"))),
        }
    }
}

impl std::fmt::Display for EntityScoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntityScoring::Raw => "raw",
            EntityScoring::Fused => "fused",
        })
    }
}

/// Context vector `h_u` from the decoder hidden states of a prompted sequence.
pub fn pool_context<F: Float>(hidden: ArrayView2<F>, mode: Pooling) -> Result<Array1<F>> {
    let n = hidden.nrows();
    if n == 0 {
        return Err(Error::Empty("pooled sequence"));
    }
    Ok(match mode {
        Pooling::Last => hidden.row(n - 1).to_owned(),
        Pooling::Mean => hidden.mean_axis(Axis(0)).expect("non-empty"),
    })
}

pub fn pool_graph<F: Float>(g: &mut Graph<F>, hidden: Var, mode: Pooling) -> Var {
    let n = g.value(hidden).nrows();
    match mode {
        Pooling::Last => g.rows(hidden, n - 1, n),
        Pooling::Mean => g.mean_rows(hidden),
    }
}

/// `softmax(h_u · h_e)` over every row of `table`.
pub fn entity_distribution<F: Float>(h_u: ArrayView1<F>, table: ArrayView2<F>) -> Array1<F> {
    let logits = table.dot(&h_u).insert_axis(Axis(0));
    softmax_rows(&logits).row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_example() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let e = array![[1.0, 1.0]];
        let w = Mat::<f64>::eye(2);
        let f = fuse(t.view(), e.view(), w.view()).unwrap();
        assert_eq!(f.affinity, array![[1.0], [1.0]]);
        assert_eq!(f.words, array![[2.0, 1.0], [1.0, 2.0]]);
        assert_eq!(f.entities, array![[2.0, 2.0]]);
    }

    #[test]
    fn empty_sides_pass_through() {
        let t = array![[1.0, 2.0]];
        let e = Mat::<f64>::zeros((0, 2));
        let f = fuse(t.view(), e.view(), Mat::eye(2).view()).unwrap();
        assert_eq!(f.affinity.dim(), (1, 0));
        assert_eq!(f.words, t);
        let f = fuse(e.view(), t.view(), Mat::eye(2).view()).unwrap();
        assert_eq!(f.entities, t);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let t = Mat::<f64>::zeros((2, 3));
        assert!(fuse(t.view(), Mat::zeros((1, 2)).view(), Mat::eye(2).view()).is_err());
    }

    #[test]
    fn distribution_closed_form() {
        let p = entity_distribution(array![1.0].view(), array![[2f64.ln()], [0.0]].view());
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        let u = entity_distribution(array![0.0, 0.0].view(), Mat::<f64>::ones((4, 2)).view());
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn pooling_modes() {
        let h = array![[1.0, 2.0], [3.0, 6.0]];
        assert_eq!(pool_context(h.view(), Pooling::Last).unwrap(), array![3.0, 6.0]);
        assert_eq!(pool_context(h.view(), Pooling::Mean).unwrap(), array![2.0, 4.0]);
        assert!(pool_context(Mat::<f64>::zeros((0, 2)).view(), Pooling::Last).is_err());
    }
}
