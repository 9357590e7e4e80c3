//! Probabilistic decoding of token embeddings into per-patch Student's t
//! parameters: sparse top-K expert routing, raw-parameter combination,
//! likelihood and load-balance losses, and point/quantile extraction.
//!
//! Everything here is pure math over plain floats. The trainable heads and
//! gate live in the model; the functions in this module are the reference
//! semantics they must match, and the pieces shared by training and
//! inference (tie-breaking, link functions, loss reductions).

pub mod student_t;

use crate::diffnum::special::softplus;
use crate::diffnum::{DiffError, Graph, NodeId};
use crate::{Error, Result};

/// Lower bound added to the softplus-linked scale so densities stay proper.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-token, per-timestep distribution parameters, row-major
/// `n_tokens x patch_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistParams {
    n_tokens: usize,
    patch_len: usize,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    nu: Vec<f64>,
}

impl PatchDistParams {
    /// Validates shapes and domains: all three matrices `n_tokens x patch_len`,
    /// finite, with `sigma > 0` and `nu > 0`.
    pub fn new(
        n_tokens: usize,
        patch_len: usize,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        nu: Vec<f64>,
    ) -> Result<Self> {
        let want = n_tokens * patch_len;
        if want == 0 {
            return Err(Error::Length(
                "distribution parameters need at least one token and one timestep".into(),
            ));
        }
        for (name, v) in [("mu", &mu), ("sigma", &sigma), ("nu", &nu)] {
            if v.len() != want {
                return Err(Error::Length(format!(
                    "{name} has {} values, expected {n_tokens} x {patch_len} = {want}",
                    v.len()
                )));
            }
            if let Some(&bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::Diff(DiffError::Domain {
                    op: "patch_dist_params",
                    value: bad,
                }));
            }
        }
        if let Some(&bad) = sigma.iter().find(|&&s| s <= 0.0) {
            return Err(Error::Diff(DiffError::Domain {
                op: "patch_dist_params_sigma",
                value: bad,
            }));
        }
        if let Some(&bad) = nu.iter().find(|&&n| n <= 0.0) {
            return Err(Error::Diff(DiffError::Domain {
                op: "patch_dist_params_nu",
                value: bad,
            }));
        }
        Ok(Self {
            n_tokens,
            patch_len,
            mu,
            sigma,
            nu,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Parameter triple at token `i`, timestep `j`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64, f64) {
        let idx = i * self.patch_len + j;
        (self.mu[idx], self.sigma[idx], self.nu[idx])
    }
}

/// Outcome of gating one batch of tokens over M experts.
///
/// `s` holds the full softmax rows; `g` keeps the selected entries at their
/// softmax values and zeros elsewhere (selected weights are deliberately not
/// renormalized, so their sum is below one whenever K < M).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    n_tokens: usize,
    n_experts: usize,
    k: usize,
    s: Vec<f64>,
    g: Vec<f64>,
    selected: Vec<Vec<usize>>,
}

impl RoutingDecision {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Softmax probabilities, row-major `n_tokens x n_experts`.
    pub fn probs(&self) -> &[f64] {
        &self.s
    }

    /// Masked gate weights, row-major `n_tokens x n_experts`.
    pub fn gate_weights(&self) -> &[f64] {
        &self.g
    }

    /// Selected expert indices per token, each ascending and of length K.
    pub fn selected(&self) -> &[Vec<usize>] {
        &self.selected
    }
}

/// Indices of the `k` largest values, ties resolved toward the lower index.
/// Returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort by descending value keeps equal values in index order.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Builds a routing decision from precomputed softmax rows.
///
/// `s` is row-major `n_tokens x n_experts`; every row must be a probability
/// vector (sum within 1e-6 of one). Used directly at inference time and as
/// the reference the in-graph routing is tested against.
pub fn route_from_probs(s: &[f64], n_tokens: usize, n_experts: usize, k: usize) -> Result<RoutingDecision> {
    if n_tokens == 0 {
        return Err(Error::Length("routing needs at least one token".into()));
    }
    if s.len() != n_tokens * n_experts {
        return Err(Error::Length(format!(
            "gate probabilities have {} values, expected {n_tokens} x {n_experts}",
            s.len()
        )));
    }
    if k < 1 || k > n_experts {
        return Err(Error::Config(format!(
            "top-K must satisfy 1 <= K <= {n_experts}, got {k}"
        )));
    }
    let mut g = vec![0.0; s.len()];
    let mut selected = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let row = &s[i * n_experts..(i + 1) * n_experts];
        if let Some(bad) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::Diff(DiffError::Domain {
                op: "route_probs",
                value: *bad,
            }));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Diff(DiffError::Domain {
                op: "route_probs_sum",
                value: sum,
            }));
        }
        let idx = top_k_indices(row, k);
        for &m in &idx {
            g[i * n_experts + m] = row[m];
        }
        selected.push(idx);
    }
    Ok(RoutingDecision {
        n_tokens,
        n_experts,
        k,
        s: s.to_vec(),
        g,
        selected,
    })
}

/// Splits one token's combined raw head output into linked parameters.
///
/// Layout is `[mu_raw | sigma_raw | nu_raw]`, each `patch_len` long. The
/// location passes through untouched, scale is softplus with a small floor,
/// and the degrees of freedom are one plus softplus so the mean exists.
pub fn apply_links(h_raw: &[f64], patch_len: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if h_raw.len() != 3 * patch_len {
        return Err(Error::Length(format!(
            "raw head output has {} values, expected 3 x {patch_len}",
            h_raw.len()
        )));
    }
    let mu = h_raw[..patch_len].to_vec();
    let sigma: Vec<f64> = h_raw[patch_len..2 * patch_len]
        .iter()
        .map(|&x| softplus(x) + SIGMA_FLOOR)
        .collect();
    let nu: Vec<f64> = h_raw[2 * patch_len..]
        .iter()
        .map(|&x| 1.0 + softplus(x))
        .collect();
    Ok((mu, sigma, nu))
}

/// Combines per-expert raw outputs for one token with its gate weights:
/// `h = sum_m g_m * head_m`, in raw space, before any link function.
pub fn combine_raw(g_row: &[f64], heads_raw: &[Vec<f64>]) -> Result<Vec<f64>> {
    if g_row.len() != heads_raw.len() {
        return Err(Error::Length(format!(
            "{} gate weights for {} expert outputs",
            g_row.len(),
            heads_raw.len()
        )));
    }
    let width = heads_raw.first().map(|h| h.len()).unwrap_or(0);
    if width == 0 {
        return Err(Error::Length("expert outputs are empty".into()));
    }
    let mut h = vec![0.0; width];
    for (m, raw) in heads_raw.iter().enumerate() {
        if raw.len() != width {
            return Err(Error::Length(format!(
                "expert {m} output has {} values, expected {width}",
                raw.len()
            )));
        }
        if g_row[m] == 0.0 {
            continue;
        }
        for (acc, &x) in h.iter_mut().zip(raw) {
            *acc += g_row[m] * x;
        }
    }
    if let Some(bad) = h.iter().find(|x| !x.is_finite()) {
        return Err(Error::Diff(DiffError::Domain {
            op: "combine_raw",
            value: *bad,
        }));
    }
    Ok(h)
}

/// Reference decode for a batch of tokens: combine raw expert outputs under
/// the routing decision, then link. `heads_raw[m]` is expert m's output,
/// row-major `n_tokens x 3*patch_len`.
pub fn decode_tokens(
    r: &RoutingDecision,
    heads_raw: &[Vec<f64>],
    patch_len: usize,
) -> Result<PatchDistParams> {
    if heads_raw.len() != r.n_experts {
        return Err(Error::Length(format!(
            "{} expert outputs for {} experts",
            heads_raw.len(),
            r.n_experts
        )));
    }
    let width = 3 * patch_len;
    let n = r.n_tokens;
    let mut mu = Vec::with_capacity(n * patch_len);
    let mut sigma = Vec::with_capacity(n * patch_len);
    let mut nu = Vec::with_capacity(n * patch_len);
    for i in 0..n {
        let g_row = &r.g[i * r.n_experts..(i + 1) * r.n_experts];
        let token_heads: Vec<Vec<f64>> = heads_raw
            .iter()
            .enumerate()
            .map(|(m, h)| {
                if h.len() != n * width {
                    return Err(Error::Length(format!(
                        "expert {m} output has {} values, expected {n} x {width}",
                        h.len()
                    )));
                }
                Ok(h[i * width..(i + 1) * width].to_vec())
            })
            .collect::<Result<_>>()?;
        let h = combine_raw(g_row, &token_heads)?;
        let (m_i, s_i, n_i) = apply_links(&h, patch_len)?;
        mu.extend(m_i);
        sigma.extend(s_i);
        nu.extend(n_i);
    }
    PatchDistParams::new(n, patch_len, mu, sigma, nu)
}

/// Graph-side twin of [`apply_links`]: splits a combined raw head output
/// `[n, 3 * patch_len]` into linked (mu, sigma, nu) nodes.
pub fn split_links_graph(
    g: &mut Graph,
    h: NodeId,
    patch_len: usize,
) -> std::result::Result<(NodeId, NodeId, NodeId), DiffError> {
    let l = patch_len;
    let mu = g.slice(h, 1, 0, l)?;
    let sigma_raw = g.slice(h, 1, l, 2 * l)?;
    let sp = g.softplus(sigma_raw)?;
    let sigma = g.affine(sp, 1.0, SIGMA_FLOOR)?;
    let nu_raw = g.slice(h, 1, 2 * l, 3 * l)?;
    let sp = g.softplus(nu_raw)?;
    let nu = g.affine(sp, 1.0, 1.0)?;
    Ok((mu, sigma, nu))
}

/// Graph-side twin of [`nll_loss`]: mean negative log-likelihood of the
/// constant targets `y` under elementwise (mu, sigma, nu) nodes, all of the
/// same shape. Differentiable in all three parameter matrices.
pub fn student_t_nll_graph(
    g: &mut Graph,
    mu: NodeId,
    sigma: NodeId,
    nu: NodeId,
    y: NodeId,
) -> std::result::Result<NodeId, DiffError> {
    let diff = g.sub(y, mu)?;
    let z = g.div(diff, sigma)?;
    let z2 = g.mul(z, z)?;
    let z2_nu = g.div(z2, nu)?;
    let one_plus = g.affine(z2_nu, 1.0, 1.0)?;
    let ln_term = g.log(one_plus)?;
    let nu_p1_half = g.affine(nu, 0.5, 0.5)?;
    let tail = g.mul(nu_p1_half, ln_term)?;
    let lg_a = g.lgamma(nu_p1_half)?;
    let nu_half = g.affine(nu, 0.5, 0.0)?;
    let lg_b = g.lgamma(nu_half)?;
    let nu_pi = g.affine(nu, std::f64::consts::PI, 0.0)?;
    let ln_nu_pi = g.log(nu_pi)?;
    let half_ln_nu_pi = g.affine(ln_nu_pi, 0.5, 0.0)?;
    let ln_sigma = g.log(sigma)?;
    let mut logpdf = g.sub(lg_a, lg_b)?;
    logpdf = g.sub(logpdf, half_ln_nu_pi)?;
    logpdf = g.sub(logpdf, ln_sigma)?;
    logpdf = g.sub(logpdf, tail)?;
    let mean = g.reduce_mean(logpdf, None)?;
    g.affine(mean, -1.0, 0.0)
}

/// Mean negative log-likelihood of `targets` under `params`, averaged over
/// every token and timestep.
pub fn nll_loss(params: &PatchDistParams, targets: &[f64]) -> Result<f64> {
    let want = params.n_tokens * params.patch_len;
    if targets.len() != want {
        return Err(Error::Length(format!(
            "targets have {} values, expected {} x {} = {want}",
            targets.len(),
            params.n_tokens,
            params.patch_len
        )));
    }
    let mut total = 0.0;
    for (idx, &y) in targets.iter().enumerate() {
        let lp = student_t::logpdf(y, params.mu[idx], params.sigma[idx], params.nu[idx])?;
        total -= lp;
    }
    let loss = total / want as f64;
    if !loss.is_finite() {
        return Err(Error::Diff(DiffError::NonFinite { op: "nll_loss" }));
    }
    Ok(loss)
}

/// Per-expert routing summary: `f[m]` is the fraction of (token, slot)
/// assignments landing on expert m, `p[m]` the mean softmax probability.
/// These are the two factors of the load-balance penalty and what the
/// trainer exports per epoch.
pub fn routing_summary(r: &RoutingDecision) -> (Vec<f64>, Vec<f64>) {
    let m = r.n_experts;
    let mut f = vec![0.0; m];
    for idx in &r.selected {
        for &e in idx {
            f[e] += 1.0;
        }
    }
    let slots = (r.n_tokens * r.k) as f64;
    for x in &mut f {
        *x /= slots;
    }
    let mut p = vec![0.0; m];
    for i in 0..r.n_tokens {
        for e in 0..m {
            p[e] += r.s[i * m + e];
        }
    }
    for x in &mut p {
        *x /= r.n_tokens as f64;
    }
    (f, p)
}

/// Load-balance penalty `alpha * M * sum_m f_m * p_m`. Uniform routing with
/// uniform probabilities gives `alpha`; full collapse onto one expert with
/// saturated probabilities approaches `alpha * M`.
pub fn load_balance_loss(r: &RoutingDecision, alpha: f64) -> f64 {
    let (f, p) = routing_summary(r);
    let dot: f64 = f.iter().zip(&p).map(|(a, b)| a * b).sum();
    alpha * r.n_experts as f64 * dot
}

/// Point forecast: the location parameter, which is the density peak.
/// Row-major `n_tokens x patch_len`.
pub fn point_forecast(params: &PatchDistParams) -> Vec<f64> {
    params.mu.clone()
}

/// Elementwise quantiles at level `q`, row-major `n_tokens x patch_len`.
pub fn quantile(params: &PatchDistParams, q: f64) -> Result<Vec<f64>> {
    let n = params.n_tokens * params.patch_len;
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        out.push(student_t::quantile(
            q,
            params.mu[idx],
            params.sigma[idx],
            params.nu[idx],
        )?);
    }
    Ok(out)
}
