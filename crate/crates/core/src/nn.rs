//! Small reusable trainable layers built on the autodiff graph, plus the
//! Adam optimizer and gradient clipping shared by both training stages.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::diffnum::{DiffError, Graph, HasParams, NodeId, Param};

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// Gaussian-initialized weight (given std), zero bias. Parameter names
    /// are `{prefix}.w` and `{prefix}.b`.
    pub fn new(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        Self {
            w: Param::randn(format!("{prefix}.w"), &[in_dim, out_dim], std, rng, trainable),
            b: Param::zeros(format!("{prefix}.b"), &[out_dim], trainable),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

impl HasParams for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Sets the trainable flag on every parameter of `m`.
pub fn set_trainable<M: HasParams>(m: &mut M, trainable: bool) {
    m.visit_params_mut(&mut |p| p.set_trainable(trainable));
}

/// Euclidean norm over every gradient entry in the map.
pub fn global_grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam with bias correction. Moment state is keyed by parameter name and
/// created lazily, so one optimizer instance can drive any parameter subset.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every trainable parameter that has a gradient entry.
    pub fn step<M: HasParams>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), DiffError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m_state, v_state) = (&mut self.m, &mut self.v);
        let mut failure: Option<DiffError> = None;
        model.visit_params_mut(&mut |p: &mut Param| {
            if failure.is_some() || !p.trainable() {
                return;
            }
            let Some(g) = grads.get(p.name()) else {
                return;
            };
            if g.len() != p.numel() {
                failure = Some(DiffError::InvalidShape {
                    op: "adam_step",
                    shape: vec![g.len()],
                    msg: format!("gradient size does not match parameter {}", p.name()),
                });
                return;
            }
            let m = m_state
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = v_state
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
