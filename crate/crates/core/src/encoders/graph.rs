//! One-layer relational graph convolution over the knowledge graph.
//!
//! Row convention: entity vectors are rows, so each weight right-multiplies.
//!
//! ```text
//! out[e] = relu( Σ_r Σ_{j ∈ N_r(e)} x[j] · W_r / |N_r(e)|  +  x[e] · W_0 )
//! ```
//!
//! `N_r(e)` is the set of entities joined to `e` by relation `r` in either direction.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::transformer::Param;
use crate::checkpoint::TensorArchive;
use crate::data::KnowledgeGraph;
use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Graph, Mat, SparseRows, Var};

#[derive(Clone, Debug)]
pub struct GraphEncoderParams<T> {
    /// Base entity embedding table, `num_entities × d`.
    pub base: T,
    pub self_loop: T,
    pub relations: Vec<T>,
}

impl<T> GraphEncoderParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> GraphEncoderParams<U> {
        GraphEncoderParams {
            base: f(&format!("{prefix}base"), &self.base),
            self_loop: f(&format!("{prefix}self_loop"), &self.self_loop),
            relations: self
                .relations
                .iter()
                .enumerate()
                .map(|(r, w)| f(&format!("{prefix}relation.{r}"), w))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}base"), &mut self.base);
        f(&format!("{prefix}self_loop"), &mut self.self_loop);
        for (r, w) in self.relations.iter_mut().enumerate() {
            f(&format!("{prefix}relation.{r}"), w);
        }
    }
}

/// Mean-normalized adjacency per relation.
#[derive(Clone, Debug)]
pub struct GraphStructure<F> {
    pub adjacency: Vec<Arc<SparseRows<F>>>,
    pub num_entities: usize,
}

impl<F: Float> GraphStructure<F> {
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let n = kg.num_entities();
        let mut neigh: Vec<Vec<BTreeSet<usize>>> = vec![vec![BTreeSet::new(); n]; kg.num_relations()];
        for t in &kg.triples {
            neigh[t.relation][t.head].insert(t.tail);
            neigh[t.relation][t.tail].insert(t.head);
        }
        let adjacency = neigh
            .into_iter()
            .map(|rows| {
                Arc::new(SparseRows {
                    n_cols: n,
                    rows: rows
                        .into_iter()
                        .map(|set| {
                            let w = cst::<F>(1.0 / set.len().max(1) as f64);
                            set.into_iter().map(|j| (j, w)).collect()
                        })
                        .collect(),
                })
            })
            .collect();
        Self {
            adjacency,
            num_entities: n,
        }
    }

    pub fn num_relations(&self) -> usize {
        self.adjacency.len()
    }
}

impl<F: Float> GraphEncoderParams<Param<F>> {
    pub fn init(rng: &mut impl Rng, num_entities: usize, num_relations: usize, d: usize) -> Self {
        let emb = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let glorot = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mat = |r, c, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
            Arc::new(Mat::from_shape_fn((r, c), |_| cst::<F>(dist.sample(rng))))
        };
        Self {
            base: mat(num_entities, d, &emb, rng),
            self_loop: mat(d, d, &glorot, rng),
            relations: (0..num_relations).map(|_| mat(d, d, &glorot, rng)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.base.ncols()
    }

    pub fn check(&self, structure: &GraphStructure<F>) -> Result<()> {
        if self.base.nrows() != structure.num_entities {
            return Err(Error::Shape(format!(
                "entity table has {} rows for {} entities",
                self.base.nrows(),
                structure.num_entities
            )));
        }
        if self.relations.len() != structure.num_relations() {
            return Err(Error::Shape(format!(
                "{} relation matrices for {} relations",
                self.relations.len(),
                structure.num_relations()
            )));
        }
        Ok(())
    }

    /// Graph-free encoding of every entity (`num_entities × d`).
    pub fn encode(&self, structure: &GraphStructure<F>) -> Result<Mat<F>> {
        self.check(structure)?;
        let mut out = self.base.dot(&*self.self_loop);
        for (adj, w) in structure.adjacency.iter().zip(&self.relations) {
            out += &adj.matmul(self.base.view()).dot(&**w);
        }
        out.mapv_inplace(|v| v.max(F::zero()));
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> GraphEncoderParams<Var> {
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
}

impl GraphEncoderParams<Var> {
    pub fn encode<F: Float>(&self, g: &mut Graph<F>, structure: &GraphStructure<F>) -> Var {
        let mut out = g.matmul(self.base, self.self_loop);
        for (adj, &w) in structure.adjacency.iter().zip(&self.relations) {
            let agg = g.spmm(adj.clone(), self.base);
            let msg = g.matmul(agg, w);
            out = g.add(out, msg);
        }
        g.relu(out)
    }
}
