//! Per-position text abstraction: a table of learnable queries, one per
//! token position, cross-attends over the prompt's token embeddings in a
//! single head. The result is added to the time-series tokens to form the
//! fused sequence, and also drives the decoder gate. No output projection;
//! scores are scaled by 1/sqrt(d).

use rand_chacha::ChaCha8Rng;

use crate::diffnum::{Graph, HasParams, NodeId, Param};
use crate::nn::Linear;
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct TextAbstraction {
    d: usize,
    n_max: usize,
    query_table: Param,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
}

/// Forward output: the abstraction vectors plus the attention map
/// (`n x n_s`, rows on the simplex) kept for inspection.
pub struct AbstractionOut {
    pub a: NodeId,
    pub attn: NodeId,
}

impl TextAbstraction {
    pub fn new(d: usize, n_max: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            d,
            n_max,
            query_table: Param::randn("abs.query", &[n_max, d], INIT_STD, rng, true),
            w_q: Linear::new("abs.wq", d, d, INIT_STD, rng, true),
            w_k: Linear::new("abs.wk", d, d, INIT_STD, rng, true),
            w_v: Linear::new("abs.wv", d, d, INIT_STD, rng, true),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Attends the first `n` position queries over prompt embeddings
    /// `text [n_s, d]`.
    pub fn forward(&self, g: &mut Graph, text: NodeId, n: usize) -> Result<AbstractionOut> {
        let tshape = g.shape(text).to_vec();
        if tshape.len() != 2 || tshape[1] != self.d {
            return Err(Error::Length(format!(
                "prompt embeddings must be [n_s, {}], got {tshape:?}",
                self.d
            )));
        }
        if n == 0 || n > self.n_max {
            return Err(Error::Length(format!(
                "{n} positions requested, query table holds 1..={}",
                self.n_max
            )));
        }
        let table = g.param(&self.query_table)?;
        let q_rows = g.slice(table, 0, 0, n)?;
        let q = self.w_q.forward(g, q_rows)?;
        let k = self.w_k.forward(g, text)?;
        let v = self.w_v.forward(g, text)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.affine(scores, 1.0 / (self.d as f64).sqrt(), 0.0)?;
        let attn = g.softmax(scores)?;
        let a = g.matmul(attn, v)?;
        Ok(AbstractionOut { a, attn })
    }
}

/// Fuses time-series tokens with their abstractions by addition.
pub fn fuse(g: &mut Graph, t: NodeId, a: NodeId) -> Result<NodeId> {
    Ok(g.add(t, a)?)
}

impl HasParams for TextAbstraction {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.query_table);
        self.w_q.visit_params(f);
        self.w_k.visit_params(f);
        self.w_v.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.query_table);
        self.w_q.visit_params_mut(f);
        self.w_k.visit_params_mut(f);
        self.w_v.visit_params_mut(f);
    }
}
