//! Patch-mixer temporal encoder and its self-supervised pretraining.
//!
//! Patches are embedded per-patch, then refined by mixer blocks that
//! alternate mixing across the token axis and across the channel axis, with
//! pre-norm residuals. Token mixing is causally masked (token i never reads
//! tokens after i): the encoder feeds a next-patch objective downstream, and
//! an acausal mix would let every token see its own target. Weights over the
//! token axis are sized for `n_max` positions and sliced to the live length,
//! so autoregressively extended sequences reuse the same parameters.
//!
//! Pretraining masks a fixed fraction of patch embeddings, replaces them
//! with a learned vector, and reconstructs the masked patches with an MSE
//! head.

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;

use crate::diffnum::{DiffError, Graph, HasParams, NodeId, Param};
use crate::nn::{Adam, Linear};
use crate::series_prep::{normalize_slice, patchify, PatchSet};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct MixerBlock {
    ln1_g: Param,
    ln1_b: Param,
    token_w: Param,
    token_b: Param,
    ln2_g: Param,
    ln2_b: Param,
    fc1: Linear,
    fc2: Linear,
}

impl MixerBlock {
    fn new(prefix: &str, d_enc: usize, n_max: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_g: Param::filled(format!("{prefix}.ln1.g"), &[d_enc], 1.0, true),
            ln1_b: Param::zeros(format!("{prefix}.ln1.b"), &[d_enc], true),
            token_w: Param::randn(
                format!("{prefix}.token.w"),
                &[n_max, n_max],
                INIT_STD,
                rng,
                true,
            ),
            token_b: Param::zeros(format!("{prefix}.token.b"), &[n_max], true),
            ln2_g: Param::filled(format!("{prefix}.ln2.g"), &[d_enc], 1.0, true),
            ln2_b: Param::zeros(format!("{prefix}.ln2.b"), &[d_enc], true),
            fc1: Linear::new(&format!("{prefix}.fc1"), d_enc, d_enc, INIT_STD, rng, true),
            fc2: Linear::new(&format!("{prefix}.fc2"), d_enc, d_enc, INIT_STD, rng, true),
        }
    }

    fn forward(&self, g: &mut Graph, h: NodeId, n: usize) -> std::result::Result<NodeId, DiffError> {
        // Token mixing over the sequence axis, causal.
        let normed = {
            let gain = g.param(&self.ln1_g)?;
            let bias = g.param(&self.ln1_b)?;
            g.layer_norm(h, gain, bias)?
        };
        let tt = g.transpose(normed)?;
        let w_full = g.param(&self.token_w)?;
        let w_rows = g.slice(w_full, 0, 0, n)?;
        let w = g.slice(w_rows, 1, 0, n)?;
        // Keep only source <= destination so position j never reads past j.
        let mut tri = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                tri[i * n + j] = 1.0;
            }
        }
        let tri = g.matrix(tri, &[n, n])?;
        let w_causal = g.mul(w, tri)?;
        let mixed = g.matmul(tt, w_causal)?;
        let b_full = g.param(&self.token_b)?;
        let b = g.slice(b_full, 0, 0, n)?;
        let mixed = g.add_bias(mixed, b)?;
        let mixed = g.gelu(mixed)?;
        let mixed = g.transpose(mixed)?;
        let h = g.add(h, mixed)?;

        // Channel mixing within each token.
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

impl HasParams for MixerBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.ln1_g);
        f(&self.ln1_b);
        f(&self.token_w);
        f(&self.token_b);
        f(&self.ln2_g);
        f(&self.ln2_b);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.ln1_g);
        f(&mut self.ln1_b);
        f(&mut self.token_w);
        f(&mut self.token_b);
        f(&mut self.ln2_g);
        f(&mut self.ln2_b);
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// The pretrainable patch encoder. Output shape is `n x d_enc` for any
/// sequence length up to `n_max`.
#[derive(Debug, Clone)]
pub struct MixerEncoder {
    l_p: usize,
    d_enc: usize,
    n_max: usize,
    embed: Linear,
    blocks: Vec<MixerBlock>,
    mask_vec: Param,
}

impl MixerEncoder {
    pub fn new(
        l_p: usize,
        d_enc: usize,
        n_max: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = Linear::new("enc.embed", l_p, d_enc, INIT_STD, rng, true);
        let blocks = (0..n_blocks)
            .map(|i| MixerBlock::new(&format!("enc.b{i}"), d_enc, n_max, rng))
            .collect();
        let mask_vec = Param::randn("enc.mask", &[1, d_enc], INIT_STD, rng, true);
        Self {
            l_p,
            d_enc,
            n_max,
            embed,
            blocks,
            mask_vec,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.l_p
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Runs the encoder over patches already in the graph (`[n, l_p]`).
    /// `mask[i] = true` replaces patch i's embedding with the learned mask
    /// vector (pretraining only).
    pub fn forward(
        &self,
        g: &mut Graph,
        patches: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.l_p {
            return Err(Error::Length(format!(
                "encoder expects [n, {}] patches, got {shape:?}",
                self.l_p
            )));
        }
        let n = shape[0];
        if n > self.n_max {
            return Err(Error::Length(format!(
                "{n} tokens exceed the encoder's maximum of {}",
                self.n_max
            )));
        }
        let mut h = self.embed.forward(g, patches)?;
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(Error::Length(format!(
                    "mask has {} entries for {n} patches",
                    mask.len()
                )));
            }
            let keep: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            let masked_col: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let keep = g.constant(crate::diffnum::Tensor::new(keep, &[n])?);
            let kept = g.scale_rows(h, keep)?;
            let mcol = g.matrix(masked_col, &[n, 1])?;
            let mv = g.param(&self.mask_vec)?;
            let replacement = g.matmul(mcol, mv)?;
            h = g.add(kept, replacement)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h, n)?;
        }
        Ok(h)
    }
}

impl HasParams for MixerEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.embed.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        f(&self.mask_vec);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embed.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        f(&mut self.mask_vec);
    }
}

/// Encoder followed by the modality connector, in an existing graph:
/// `[n, l_p] -> [n, D]`.
pub fn encode_graph(
    g: &mut Graph,
    enc: &MixerEncoder,
    mc: &Linear,
    patches: NodeId,
) -> Result<NodeId> {
    if mc.in_dim() != enc.d_enc() {
        return Err(Error::Config(format!(
            "modality connector expects width {}, encoder produces {}",
            mc.in_dim(),
            enc.d_enc()
        )));
    }
    let h = enc.forward(g, patches, None)?;
    Ok(mc.forward(g, h)?)
}

/// Standalone encode of a patch set to plain values, `n x D` row-major.
pub fn encode(enc: &MixerEncoder, mc: &Linear, p: &PatchSet) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let patches = g.matrix(p.flat().to_vec(), &[p.n_patches(), p.patch_len()])?;
    let out = encode_graph(&mut g, enc, mc, patches)?;
    Ok(g.data(out).to_vec())
}

struct PretrainModel<'a> {
    enc: &'a mut MixerEncoder,
    recon: &'a mut Linear,
}

impl HasParams for PretrainModel<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.enc.visit_params(f);
        self.recon.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc.visit_params_mut(f);
        self.recon.visit_params_mut(f);
    }
}

/// Masked-patch pretraining: per step, sample a batch of raw windows,
/// normalize each, mask `round(mask_ratio * n_patches)` patches, and take
/// one Adam step on the MSE of the reconstruction head over masked patches.
/// Returns the per-step loss curve; encoder and head are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    enc: &mut MixerEncoder,
    recon: &mut Linear,
    windows: &[Vec<f64>],
    steps: usize,
    lr: f64,
    mask_ratio: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::Data(
            "pretraining corpus holds no windows".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if recon.in_dim() != enc.d_enc() || recon.out_dim() != enc.patch_len() {
        return Err(Error::Config(format!(
            "reconstruction head must map {} -> {}, got {} -> {}",
            enc.d_enc(),
            enc.patch_len(),
            recon.in_dim(),
            recon.out_dim()
        )));
    }
    let n_p = windows[0].len().div_ceil(enc.patch_len()) + 1;
    let n_masked = (mask_ratio * n_p as f64).round() as usize;
    if n_masked == 0 {
        return Err(Error::Config(format!(
            "mask_ratio {mask_ratio} masks zero of {n_p} patches; nothing to reconstruct"
        )));
    }
    let mut opt = Adam::new(lr, 0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let mut batch_loss: Option<NodeId> = None;
        let picks = if windows.len() <= batch_size {
            (0..windows.len()).collect::<Vec<_>>()
        } else {
            index_sample(rng, windows.len(), batch_size).into_vec()
        };
        let denom = picks.len() as f64;
        for wi in picks {
            let (normed, _, _, _) = normalize_slice(&windows[wi])?;
            let p = patchify(&normed, enc.patch_len(), 0)?;
            let n = p.n_patches();
            if n > enc.n_max() {
                return Err(Error::Length(format!(
                    "window of {} values needs {n} patches, encoder allows {}",
                    windows[wi].len(),
                    enc.n_max()
                )));
            }
            let mut mask = vec![false; n];
            for idx in index_sample(rng, n, n_masked.min(n)) {
                mask[idx] = true;
            }
            let patches = g.matrix(p.flat().to_vec(), &[n, p.patch_len()])?;
            let h = enc.forward(&mut g, patches, Some(&mask))?;
            let rec = recon.forward(&mut g, h)?;
            let diff = g.sub(rec, patches)?;
            let sq = g.mul(diff, diff)?;
            let mask_f: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let mask_node = g.constant(crate::diffnum::Tensor::new(mask_f, &[n])?);
            let masked = g.scale_rows(sq, mask_node)?;
            let total = g.reduce_sum(masked, None)?;
            let count = (n_masked.min(n) * p.patch_len()) as f64;
            let window_loss = g.affine(total, 1.0 / (count * denom), 0.0)?;
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, window_loss)?,
                None => window_loss,
            });
        }
        let loss = batch_loss.expect("batch is non-empty");
        losses.push(g.data(loss)[0]);
        g.backward(loss)?;
        let grads = g.grads();
        let mut model = PretrainModel { enc, recon };
        opt.step(&mut model, &grads)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::grad_check;
    use crate::mixture_decoder::{split_links_graph, student_t_nll_graph};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_encoder(rng: &mut ChaCha8Rng) -> MixerEncoder {
        MixerEncoder::new(4, 8, 6, 1, rng)
    }

    #[test]
    fn zero_input_produces_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = MixerEncoder::new(4, 8, 6, 2, &mut rng);
        let mc = Linear::new("mc", 8, 16, INIT_STD, &mut rng, true);
        let p = patchify(&[0.0; 8], 4, 0).unwrap();
        let out = encode(&enc, &mc, &p).unwrap();
        assert_eq!(out.len(), 3 * 16);
        let first = &out[..16];
        for row in 1..3 {
            assert_eq!(&out[row * 16..(row + 1) * 16], first);
        }
    }

    #[test]
    fn output_shape_matches_patch_count_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = tiny_encoder(&mut rng);
        let mc = Linear::new("mc", 8, 16, INIT_STD, &mut rng, true);
        let p = patchify(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4, 0).unwrap();
        assert_eq!(p.n_patches(), 3);
        let out = encode(&enc, &mc, &p).unwrap();
        assert_eq!(out.len(), 3 * 16);
    }

    #[test]
    fn token_mixing_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = MixerEncoder::new(4, 8, 6, 2, &mut rng);
        let mc = Linear::new("mc", 8, 16, INIT_STD, &mut rng, true);
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let p = patchify(&base[..12], 4, 0).unwrap();
        let out_base = encode(&enc, &mc, &p).unwrap();
        // Perturb only the last patch; earlier rows must be bitwise equal.
        let mut bumped = base.clone();
        bumped[11] += 10.0;
        let p2 = patchify(&bumped, 4, 0).unwrap();
        let out_bumped = encode(&enc, &mc, &p2).unwrap();
        assert_eq!(out_base[..2 * 16], out_bumped[..2 * 16]);
        assert_ne!(out_base[3 * 16..], out_bumped[3 * 16..]);
    }

    #[test]
    fn longer_sequences_reuse_prefix_weights() {
        // Same prefix, one more patch appended: earlier rows unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = MixerEncoder::new(2, 8, 8, 2, &mut rng);
        let short: Vec<f64> = vec![0.1, -0.4, 0.9, 0.3];
        let long: Vec<f64> = vec![0.1, -0.4, 0.9, 0.3, 2.0, -2.0];
        let mut g = Graph::new();
        let ps = g.matrix(short.clone(), &[2, 2]).unwrap();
        let out_s = enc.forward(&mut g, ps, None).unwrap();
        let short_vals = g.data(out_s).to_vec();
        let mut g = Graph::new();
        let pl = g.matrix(long.clone(), &[3, 2]).unwrap();
        let out_l = enc.forward(&mut g, pl, None).unwrap();
        let long_vals = g.data(out_l).to_vec();
        assert_eq!(short_vals[..], long_vals[..2 * 8]);
    }

    #[test]
    fn sequence_length_overflow_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = MixerEncoder::new(2, 4, 2, 1, &mut rng);
        let mut g = Graph::new();
        let p = g.matrix(vec![0.0; 6], &[3, 2]).unwrap();
        assert!(enc.forward(&mut g, p, None).is_err());
    }

    #[test]
    fn masked_positions_change_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = tiny_encoder(&mut rng);
        let vals: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let p = patchify(&vals, 4, 0).unwrap();
        let run = |mask: Option<&[bool]>| {
            let mut g = Graph::new();
            let c = g
                .matrix(p.flat().to_vec(), &[p.n_patches(), 4])
                .unwrap();
            let out = enc.forward(&mut g, c, mask).unwrap();
            g.data(out).to_vec()
        };
        let clean = run(None);
        let masked = run(Some(&[true, false, false]));
        assert_ne!(clean, masked);
    }

    #[test]
    fn grad_check_through_encode_and_nll() {
        struct Full {
            enc: MixerEncoder,
            mc: Linear,
        }
        impl HasParams for Full {
            fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
                self.enc.visit_params(f);
                self.mc.visit_params(f);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                self.enc.visit_params_mut(f);
                self.mc.visit_params_mut(f);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = tiny_encoder(&mut rng);
        let mc = Linear::new("mc", 8, 12, 0.3, &mut rng, true);
        let mut model = Full { enc, mc };
        let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = patchify(&vals, 4, 0).unwrap();
        let targets: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            &mut model,
            |m| {
                let mut g = Graph::new();
                let patches = g.matrix(p.flat().to_vec(), &[3, 4])?;
                let tokens = encode_graph(&mut g, &m.enc, &m.mc, patches)?;
                let (mu, sigma, nu) = split_links_graph(&mut g, tokens, 4)?;
                let y = g.matrix(targets.clone(), &[3, 4])?;
                let loss = student_t_nll_graph(&mut g, mu, sigma, nu, y)?;
                Ok::<_, Error>((g, loss))
            },
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss_on_sines() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let windows: Vec<Vec<f64>> = (0..8)
            .map(|w| {
                (0..16)
                    .map(|t| ((t as f64 + w as f64 * 3.0) * 0.5).sin())
                    .collect()
            })
            .collect();
        let mut enc = MixerEncoder::new(4, 8, 5, 1, &mut rng);
        let mut recon = Linear::new("recon", 8, 4, INIT_STD, &mut rng, true);
        let losses =
            pretrain(&mut enc, &mut recon, &windows, 50, 1e-3, 0.4, 8, &mut rng).unwrap();
        assert_eq!(losses.len(), 50);
        assert!(
            losses[49] < losses[0],
            "loss failed to drop: {} -> {}",
            losses[0],
            losses[49]
        );
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "no downward trend: {early} -> {late}");
    }

    #[test]
    fn pretraining_is_deterministic_given_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let windows: Vec<Vec<f64>> =
                (0..4).map(|w| (0..8).map(|t| ((t + w) as f64).cos()).collect()).collect();
            let mut enc = MixerEncoder::new(4, 8, 4, 1, &mut rng);
            let mut recon = Linear::new("recon", 8, 4, INIT_STD, &mut rng, true);
            pretrain(&mut enc, &mut recon, &windows, 10, 1e-3, 0.5, 4, &mut rng).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn degenerate_pretraining_configs_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut enc = tiny_encoder(&mut rng);
        let mut recon = Linear::new("recon", 8, 4, INIT_STD, &mut rng, true);
        let windows = vec![vec![1.0; 8]];
        assert!(pretrain(&mut enc, &mut recon, &windows, 1, 1e-3, 0.0, 1, &mut rng).is_err());
        assert!(pretrain(&mut enc, &mut recon, &[], 1, 1e-3, 0.4, 1, &mut rng).is_err());
        let mut bad_recon = Linear::new("recon2", 8, 3, INIT_STD, &mut rng, true);
        assert!(pretrain(&mut enc, &mut bad_recon, &windows, 1, 1e-3, 0.4, 1, &mut rng).is_err());
    }
}
