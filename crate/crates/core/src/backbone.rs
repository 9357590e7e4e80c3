//! Frozen causal transformer over fused token sequences, GPT-2 style:
//! learned positional embeddings, pre-norm residual blocks of multi-head
//! causal self-attention and a gelu MLP, final layer norm. The token
//! embedding table used for text lives here too, since both come from the
//! same pretrained language model export.
//!
//! Every parameter is constructed frozen. Gradients still flow *through*
//! the backbone to trainable modules on either side of it.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::container::{self, TensorEntry};
use crate::diffnum::{Graph, HasParams, NodeId, Param};
use crate::nn::Linear;
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;
/// Additive score for masked attention entries. After the softmax subtracts
/// the row max, `exp` of this underflows to exactly 0.0, so future tokens
/// contribute nothing, bitwise.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone)]
struct TransformerLayer {
    ln1_g: Param,
    ln1_b: Param,
    w_qkv: Param,
    b_qkv: Param,
    w_proj: Param,
    b_proj: Param,
    ln2_g: Param,
    ln2_b: Param,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    fn new(prefix: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_g: Param::filled(format!("{prefix}.ln1.g"), &[d], 1.0, false),
            ln1_b: Param::zeros(format!("{prefix}.ln1.b"), &[d], false),
            w_qkv: Param::randn(format!("{prefix}.attn.qkv.w"), &[d, 3 * d], INIT_STD, rng, false),
            b_qkv: Param::zeros(format!("{prefix}.attn.qkv.b"), &[3 * d], false),
            w_proj: Param::randn(format!("{prefix}.attn.proj.w"), &[d, d], INIT_STD, rng, false),
            b_proj: Param::zeros(format!("{prefix}.attn.proj.b"), &[d], false),
            ln2_g: Param::filled(format!("{prefix}.ln2.g"), &[d], 1.0, false),
            ln2_b: Param::zeros(format!("{prefix}.ln2.b"), &[d], false),
            fc1: Linear::new(&format!("{prefix}.fc1"), d, ffn, INIT_STD, rng, false),
            fc2: Linear::new(&format!("{prefix}.fc2"), ffn, d, INIT_STD, rng, false),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        h: NodeId,
        n: usize,
        n_heads: usize,
        causal_mask: NodeId,
    ) -> std::result::Result<NodeId, crate::diffnum::DiffError> {
        let d = g.shape(h)[1];
        let dh = d / n_heads;
        let normed = {
            let gain = g.param(&self.ln1_g)?;
            let bias = g.param(&self.ln1_b)?;
            g.layer_norm(h, gain, bias)?
        };
        let w = g.param(&self.w_qkv)?;
        let b = g.param(&self.b_qkv)?;
        let qkv = g.matmul(normed, w)?;
        let qkv = g.add_bias(qkv, b)?;
        let q = g.slice(qkv, 1, 0, d)?;
        let k = g.slice(qkv, 1, d, 2 * d)?;
        let v = g.slice(qkv, 1, 2 * d, 3 * d)?;
        let mut heads: Option<NodeId> = None;
        for i in 0..n_heads {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let qi = g.slice(q, 1, lo, hi)?;
            let ki = g.slice(k, 1, lo, hi)?;
            let vi = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(ki)?;
            let scores = g.matmul(qi, kt)?;
            let scores = g.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
            let scores = g.add(scores, causal_mask)?;
            let attn = g.softmax(scores)?;
            let hi_out = g.matmul(attn, vi)?;
            heads = Some(match heads {
                Some(acc) => g.concat(acc, hi_out, 1)?,
                None => hi_out,
            });
        }
        let merged = heads.expect("n_heads >= 1");
        debug_assert_eq!(g.shape(merged), &[n, d]);
        let wp = g.param(&self.w_proj)?;
        let bp = g.param(&self.b_proj)?;
        let attn_out = g.matmul(merged, wp)?;
        let attn_out = g.add_bias(attn_out, bp)?;
        let h = g.add(h, attn_out)?;

        let normed = {
            let gain = g.param(&self.ln2_g)?;
            let bias = g.param(&self.ln2_b)?;
            g.layer_norm(h, gain, bias)?
        };
        let z = self.fc1.forward(g, normed)?;
        let z = g.gelu(z)?;
        let z = self.fc2.forward(g, z)?;
        g.add(h, z)
    }
}

impl HasParams for TransformerLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.ln1_g);
        f(&self.ln1_b);
        f(&self.w_qkv);
        f(&self.b_qkv);
        f(&self.w_proj);
        f(&self.b_proj);
        f(&self.ln2_g);
        f(&self.ln2_b);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.ln1_g);
        f(&mut self.ln1_b);
        f(&mut self.w_qkv);
        f(&mut self.b_qkv);
        f(&mut self.w_proj);
        f(&mut self.b_proj);
        f(&mut self.ln2_g);
        f(&mut self.ln2_b);
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// The frozen language-model trunk. `bypass = true` turns `forward` into
/// the identity (the no-backbone baseline); the embedding table stays
/// available either way.
#[derive(Debug, Clone)]
pub struct Backbone {
    d_model: usize,
    n_heads: usize,
    n_ctx: usize,
    vocab_size: usize,
    wte: Param,
    wpe: Param,
    layers: Vec<TransformerLayer>,
    ln_f_g: Param,
    ln_f_b: Param,
    bypass: bool,
}

impl Backbone {
    /// Seeded random initialization: weights N(0, 0.02²), norm gains 1,
    /// biases 0, and the pad token's embedding row forced to zero.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        ffn: usize,
        n_ctx: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d_model} must be a positive multiple of {n_heads} heads"
            )));
        }
        if vocab_size == 0 || n_ctx == 0 {
            return Err(Error::Config(
                "vocabulary and context length must be positive".into(),
            ));
        }
        let mut wte = Param::randn("lm.wte", &[vocab_size, d_model], INIT_STD, rng, false);
        wte.data_mut()[..d_model].fill(0.0);
        let wpe = Param::randn("lm.wpe", &[n_ctx, d_model], INIT_STD, rng, false);
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(&format!("lm.h{i}"), d_model, ffn, rng))
            .collect();
        Ok(Self {
            d_model,
            n_heads,
            n_ctx,
            vocab_size,
            wte,
            wpe,
            layers,
            ln_f_g: Param::filled("lm.ln_f.g", &[d_model], 1.0, false),
            ln_f_b: Param::zeros("lm.ln_f.b", &[d_model], false),
            bypass: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn set_bypass(&mut self, bypass: bool) {
        self.bypass = bypass;
    }

    pub fn bypass(&self) -> bool {
        self.bypass
    }

    /// Row-major token embedding table, `vocab_size x d_model`.
    pub fn embedding_table(&self) -> &[f64] {
        self.wte.data()
    }

    /// Runs the trunk over a fused token sequence `[n, d_model]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::Length(format!(
                "backbone expects [n, {}], got {shape:?}",
                self.d_model
            )));
        }
        if self.bypass {
            return Ok(x);
        }
        let n = shape[0];
        if n > self.n_ctx {
            return Err(Error::Length(format!(
                "{n} tokens exceed the backbone context of {}",
                self.n_ctx
            )));
        }
        let wpe = g.param(&self.wpe)?;
        let pos = g.slice(wpe, 0, 0, n)?;
        let mut h = g.add(x, pos)?;
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                mask[i * n + j] = MASKED_SCORE;
            }
        }
        let causal_mask = g.matrix(mask, &[n, n])?;
        for layer in &self.layers {
            h = layer.forward(g, h, n, self.n_heads, causal_mask)?;
        }
        let gain = g.param(&self.ln_f_g)?;
        let bias = g.param(&self.ln_f_b)?;
        Ok(g.layer_norm(h, gain, bias)?)
    }

    /// Loads exported weights. Every parameter must be present with its
    /// exact shape; names in the file that the model does not use are
    /// returned for the caller to warn about.
    pub fn load_weights(&mut self, path: &Path) -> Result<Vec<String>> {
        let tensors = container::load(path)?;
        self.load_from_tensors(&tensors)
    }

    pub fn load_from_tensors(
        &mut self,
        tensors: &BTreeMap<String, TensorEntry>,
    ) -> Result<Vec<String>> {
        container::load_into(self, tensors)
    }
}

impl HasParams for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.wte);
        f(&self.wpe);
        for l in &self.layers {
            l.visit_params(f);
        }
        f(&self.ln_f_g);
        f(&self.ln_f_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wte);
        f(&mut self.wpe);
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
        f(&mut self.ln_f_g);
        f(&mut self.ln_f_b);
    }
}
