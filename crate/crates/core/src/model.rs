//! Full model assembly: patch encoder, modality connector, text
//! abstraction, frozen trunk, and the gated mixture decoder, wired per the
//! selected structural variant. One forward pass builds a single graph so
//! gradients reach every trainable adapter around the frozen parts.

use rand_chacha::ChaCha8Rng;

use crate::abstraction::TextAbstraction;
use crate::backbone::Backbone;
use crate::config::{Ablation, Config};
use crate::diffnum::{Graph, HasParams, NodeId, Param, Tensor};
use crate::mixture_decoder::{
    route_from_probs, split_links_graph, student_t_nll_graph, PatchDistParams, RoutingDecision,
};
use crate::nn::{set_trainable, Linear};
use crate::series_prep::PatchSet;
use crate::text_embed::{embed, TextPrompt};
use crate::ts_encoder::MixerEncoder;
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Patch-to-embedding stage. The mixer variant is pretrained then frozen;
/// the plain variant is a trainable one-hidden-layer MLP baseline.
#[derive(Debug, Clone)]
pub enum EncoderKind {
    Mixer(MixerEncoder),
    Mlp(Linear),
}

/// One assembled forecasting model.
#[derive(Debug, Clone)]
pub struct CaptimeModel {
    cfg: Config,
    ablation: Option<Ablation>,
    encoder: EncoderKind,
    mc: Linear,
    abstraction: Option<TextAbstraction>,
    backbone: Backbone,
    gate: Linear,
    heads: Vec<Linear>,
}

/// Everything one forward pass produces. Distribution nodes stay in the
/// graph so losses remain differentiable; the routing decision is plain
/// data.
pub struct ModelOut {
    pub n_tokens: usize,
    /// Location, `[n, patch_len]`.
    pub mu: NodeId,
    /// Scale and tail nodes; absent in the point-forecast variant.
    pub sigma: Option<NodeId>,
    pub nu: Option<NodeId>,
    /// Gate probabilities `[n, n_experts]`, differentiable.
    pub s: NodeId,
    pub routing: RoutingDecision,
    /// Prompt attention map `[n, n_s]` when the abstraction stage exists.
    pub attn: Option<NodeId>,
}

/// Differentiable loss terms of one batch element.
pub struct LossParts {
    pub total: NodeId,
    pub data_term: NodeId,
    pub balance: Option<NodeId>,
}

impl CaptimeModel {
    /// Builds a randomly initialized model for the given variant. The
    /// backbone-finetune and attention-only variants are recognized but
    /// rejected here.
    pub fn assemble(
        cfg: &Config,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let ablation = cfg.ablation;
        match ablation {
            Some(Ablation::B1) => {
                return Err(Error::Unsupported(
                    "backbone finetuning (b1) is recognized but not implemented".into(),
                ))
            }
            Some(Ablation::B4) => {
                return Err(Error::Unsupported(
                    "attention-only backbone (b4) is recognized but not implemented".into(),
                ))
            }
            _ => {}
        }
        let encoder = match ablation {
            Some(Ablation::A1) => EncoderKind::Mlp(Linear::new(
                "enc.fc",
                cfg.patch_len,
                cfg.d_enc,
                INIT_STD,
                rng,
                true,
            )),
            _ => {
                let mut enc = MixerEncoder::new(
                    cfg.patch_len,
                    cfg.d_enc,
                    cfg.n_max,
                    cfg.mixer_blocks,
                    rng,
                );
                // Pretrained separately; frozen inside the full model.
                set_trainable(&mut enc, false);
                EncoderKind::Mixer(enc)
            }
        };
        let mc = Linear::new("mc", cfg.d_enc, cfg.d_model, INIT_STD, rng, true);
        let abstraction = match ablation {
            Some(Ablation::A2) => None,
            _ => Some(TextAbstraction::new(cfg.d_model, cfg.n_max, rng)),
        };
        let mut backbone = Backbone::new(
            vocab_size,
            cfg.d_model,
            cfg.heads,
            cfg.layers,
            cfg.ffn,
            cfg.n_max,
            rng,
        )?;
        if ablation == Some(Ablation::B3) {
            backbone.set_bypass(true);
        }
        let gate = Linear::new("gate", cfg.d_model, cfg.n_experts, INIT_STD, rng, true);
        let head_out = match ablation {
            Some(Ablation::A4) => cfg.patch_len,
            _ => 3 * cfg.patch_len,
        };
        let heads = (0..cfg.n_experts)
            .map(|m| Linear::new(&format!("head{m}"), cfg.d_model, head_out, INIT_STD, rng, true))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            ablation,
            encoder,
            mc,
            abstraction,
            backbone,
            gate,
            heads,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn ablation(&self) -> Option<Ablation> {
        self.ablation
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn encoder(&self) -> &EncoderKind {
        &self.encoder
    }

    /// Loads pretrained patch-encoder weights into the mixer stage; the
    /// trainable-MLP variant has no pretrained form.
    pub fn load_encoder(&mut self, path: &std::path::Path) -> Result<Vec<String>> {
        match &mut self.encoder {
            EncoderKind::Mixer(enc) => {
                let tensors = crate::container::load(path)?;
                let trainable_before = false;
                let warnings = crate::container::load_into(enc, &tensors)?;
                debug_assert!(!trainable_before);
                Ok(warnings)
            }
            EncoderKind::Mlp(_) => Err(Error::Unsupported(
                "the trainable patch embedding has no pretrained weights to load".into(),
            )),
        }
    }

    /// Emits time tokens `[n, d_model]` from patches.
    fn encode_tokens(&self, g: &mut Graph, patches: NodeId) -> Result<NodeId> {
        match &self.encoder {
            EncoderKind::Mixer(enc) => {
                let h = enc.forward(g, patches, None)?;
                Ok(self.mc.forward(g, h)?)
            }
            EncoderKind::Mlp(fc) => {
                let h = fc.forward(g, patches)?;
                let h = g.gelu(h)?;
                Ok(self.mc.forward(g, h)?)
            }
        }
    }

    /// Full forward pass over one window's patches and its prompt.
    pub fn forward(
        &self,
        g: &mut Graph,
        patches: &PatchSet,
        prompt: &TextPrompt,
    ) -> Result<ModelOut> {
        let n = patches.n_patches();
        if patches.patch_len() != self.cfg.patch_len {
            return Err(Error::Length(format!(
                "patches of length {} fed to a model with patch_len {}",
                patches.patch_len(),
                self.cfg.patch_len
            )));
        }
        let p_node = g.matrix(patches.flat().to_vec(), &[n, self.cfg.patch_len])?;
        let t = self.encode_tokens(g, p_node)?;

        let (e, a, attn) = match &self.abstraction {
            Some(abs) => {
                let emb = embed(
                    prompt,
                    self.backbone.embedding_table(),
                    self.backbone.vocab_size(),
                    self.cfg.d_model,
                )?;
                let s_node = g.matrix(emb, &[prompt.len(), self.cfg.d_model])?;
                let out = abs.forward(g, s_node, n)?;
                let e = g.add(t, out.a)?;
                (e, Some(out.a), Some(out.attn))
            }
            None => (t, None, None),
        };

        let z = self.backbone.forward(g, e)?;

        // The gate reads the abstraction; variants without one (or the
        // gate-rewiring variant) read the trunk output instead.
        let gate_in = match (self.ablation, a) {
            (Some(Ablation::A3), _) | (_, None) => z,
            (_, Some(a_node)) => a_node,
        };
        let logits = self.gate.forward(g, gate_in)?;
        let s = g.softmax(logits)?;
        let routing = route_from_probs(
            g.data(s),
            n,
            self.cfg.n_experts,
            self.cfg.top_k,
        )?;

        // Keep selected gate weights differentiable: zero/one mask times
        // the softmax row.
        let mask: Vec<f64> = routing
            .gate_weights()
            .iter()
            .map(|&w| if w > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let mask = g.constant(Tensor::new(mask, &[n, self.cfg.n_experts])?);
        let g_node = g.mul(s, mask)?;

        let mut combined: Option<NodeId> = None;
        for (m, head) in self.heads.iter().enumerate() {
            let out_m = head.forward(g, z)?;
            let col = g.slice(g_node, 1, m, m + 1)?;
            let weighted = g.scale_rows(out_m, col)?;
            combined = Some(match combined {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        let h_raw = combined.expect("n_experts >= 1");

        let (mu, sigma, nu) = if self.ablation == Some(Ablation::A4) {
            (h_raw, None, None)
        } else {
            let (mu, sigma, nu) = split_links_graph(g, h_raw, self.cfg.patch_len)?;
            (mu, Some(sigma), Some(nu))
        };

        Ok(ModelOut {
            n_tokens: n,
            mu,
            sigma,
            nu,
            s,
            routing,
            attn,
        })
    }

    /// Differentiable training loss for one forward pass: likelihood (or
    /// squared error in the point variant) plus the optional load-balance
    /// penalty.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        out: &ModelOut,
        targets: &[f64],
    ) -> Result<LossParts> {
        let want = out.n_tokens * self.cfg.patch_len;
        if targets.len() != want {
            return Err(Error::Length(format!(
                "targets have {} values, expected {} x {} = {want}",
                targets.len(),
                out.n_tokens,
                self.cfg.patch_len
            )));
        }
        let y = g.matrix(targets.to_vec(), &[out.n_tokens, self.cfg.patch_len])?;
        let data_term = match (out.sigma, out.nu) {
            (Some(sigma), Some(nu)) => student_t_nll_graph(g, out.mu, sigma, nu, y)?,
            _ => {
                let diff = g.sub(out.mu, y)?;
                let sq = g.mul(diff, diff)?;
                g.reduce_mean(sq, None)?
            }
        };
        let balance = if self.cfg.alpha > 0.0 {
            let (f, _) = crate::mixture_decoder::routing_summary(&out.routing);
            let f_node = g.matrix(f, &[self.cfg.n_experts])?;
            let p_node = g.reduce_mean(out.s, Some(0))?;
            let fp = g.mul(f_node, p_node)?;
            let dot = g.reduce_sum(fp, None)?;
            Some(g.affine(dot, self.cfg.alpha * self.cfg.n_experts as f64, 0.0)?)
        } else {
            None
        };
        let total = match balance {
            Some(b) => g.add(data_term, b)?,
            None => data_term,
        };
        Ok(LossParts {
            total,
            data_term,
            balance,
        })
    }

    /// Reads decoded distribution parameters out of the graph. The point
    /// variant carries no scale or tails, so it cannot produce one.
    pub fn dist_params(&self, g: &Graph, out: &ModelOut) -> Result<PatchDistParams> {
        match (out.sigma, out.nu) {
            (Some(sigma), Some(nu)) => PatchDistParams::new(
                out.n_tokens,
                self.cfg.patch_len,
                g.data(out.mu).to_vec(),
                g.data(sigma).to_vec(),
                g.data(nu).to_vec(),
            ),
            _ => Err(Error::Unsupported(
                "the point-forecast variant produces locations only".into(),
            )),
        }
    }
}

impl HasParams for CaptimeModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match &self.encoder {
            EncoderKind::Mixer(enc) => enc.visit_params(f),
            EncoderKind::Mlp(fc) => fc.visit_params(f),
        }
        self.mc.visit_params(f);
        if let Some(abs) = &self.abstraction {
            abs.visit_params(f);
        }
        self.backbone.visit_params(f);
        self.gate.visit_params(f);
        for h in &self.heads {
            h.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.encoder {
            EncoderKind::Mixer(enc) => enc.visit_params_mut(f),
            EncoderKind::Mlp(fc) => fc.visit_params_mut(f),
        }
        self.mc.visit_params_mut(f);
        if let Some(abs) = &mut self.abstraction {
            abs.visit_params_mut(f);
        }
        self.backbone.visit_params_mut(f);
        self.gate.visit_params_mut(f);
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series_prep::patchify;
    use crate::text_embed::Vocabulary;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.h = 8;
        cfg.patch_len = 4;
        cfg.d_model = 16;
        cfg.d_enc = 8;
        cfg.mixer_blocks = 1;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.ffn = 32;
        cfg.n_max = 16;
        cfg.n_experts = 2;
        cfg.top_k = 1;
        cfg
    }

    fn demo_vocab() -> Vocabulary {
        Vocabulary::from_tokens(["drop", "flat", "surge"]).unwrap()
    }

    fn demo_prompt(vocab: &Vocabulary) -> TextPrompt {
        vocab.tokenize("surge then flat", 8).unwrap()
    }

    fn demo_patches(cfg: &Config) -> PatchSet {
        let vals: Vec<f64> = (0..cfg.h).map(|i| ((i as f64) * 0.4).sin()).collect();
        patchify(&vals, cfg.patch_len, 0).unwrap()
    }

    fn forward_once(cfg: &Config, seed: u64) -> (CaptimeModel, Graph, ModelOut) {
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CaptimeModel::assemble(cfg, vocab.size(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(cfg), &demo_prompt(&vocab))
            .unwrap();
        (model, g, out)
    }

    #[test]
    fn forward_produces_consistent_shapes_and_routing() {
        let cfg = tiny_cfg();
        let (model, g, out) = forward_once(&cfg, 50);
        assert_eq!(out.n_tokens, 3);
        assert_eq!(g.shape(out.mu), &[3, 4]);
        assert_eq!(g.shape(out.sigma.unwrap()), &[3, 4]);
        assert_eq!(g.shape(out.s), &[3, 2]);
        for sel in out.routing.selected() {
            assert_eq!(sel.len(), cfg.top_k);
        }
        let dist = model.dist_params(&g, &out).unwrap();
        assert!(dist.sigma().iter().all(|&s| s > 0.0));
        assert!(dist.nu().iter().all(|&v| v > 1.0));
    }

    #[test]
    fn selected_gate_weights_are_unrenormalized_softmax_values() {
        let cfg = tiny_cfg();
        let (_, _, out) = forward_once(&cfg, 51);
        let m = out.routing.n_experts();
        for (i, sel) in out.routing.selected().iter().enumerate() {
            let mut nonzero_sum = 0.0;
            for &e in sel {
                let gw = out.routing.gate_weights()[i * m + e];
                assert_eq!(gw, out.routing.probs()[i * m + e]);
                nonzero_sum += gw;
            }
            assert!(nonzero_sum <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn unsupported_variants_are_rejected_at_assembly() {
        for ab in [Ablation::B1, Ablation::B4] {
            let mut cfg = tiny_cfg();
            cfg.ablation = Some(ab);
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            match CaptimeModel::assemble(&cfg, 8, &mut rng) {
                Err(Error::Unsupported(_)) => {}
                other => panic!("expected unsupported, got {other:?}"),
            }
        }
    }

    #[test]
    fn routing_ignores_series_perturbations_when_gated_on_text() {
        // The gate reads the text abstraction, so changing the series
        // (which only shifts trunk inputs) must not move gate probabilities.
        let cfg = tiny_cfg();
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let prompt = demo_prompt(&vocab);
        let run = |vals: &[f64]| {
            let mut g = Graph::new();
            let p = patchify(vals, cfg.patch_len, 0).unwrap();
            let out = model.forward(&mut g, &p, &prompt).unwrap();
            (g.data(out.s).to_vec(), g.data(out.mu).to_vec())
        };
        let a: Vec<f64> = (0..8).map(|i| (i as f64 * 0.4).sin()).collect();
        let mut b = a.clone();
        b[7] += 3.0;
        let (s_a, mu_a) = run(&a);
        let (s_b, mu_b) = run(&b);
        assert_eq!(s_a, s_b, "gate probabilities moved with the series");
        assert_ne!(mu_a, mu_b, "forecast ignored the series");
    }

    #[test]
    fn gate_rewiring_variant_routes_on_the_trunk_output() {
        let mut cfg = tiny_cfg();
        cfg.ablation = Some(Ablation::A3);
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let prompt = demo_prompt(&vocab);
        let run = |vals: &[f64]| {
            let mut g = Graph::new();
            let p = patchify(vals, cfg.patch_len, 0).unwrap();
            let out = model.forward(&mut g, &p, &prompt).unwrap();
            g.data(out.s).to_vec()
        };
        let a: Vec<f64> = (0..8).map(|i| (i as f64 * 0.4).sin()).collect();
        let mut b = a.clone();
        b[0] += 3.0;
        assert_ne!(run(&a), run(&b), "trunk-gated probabilities ignored the series");
    }

    #[test]
    fn no_text_variant_has_no_abstraction_parameters() {
        let mut cfg = tiny_cfg();
        cfg.ablation = Some(Ablation::A2);
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        model.visit_params(&mut |p| assert!(!p.name().starts_with("abs.")));
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        assert!(out.attn.is_none());
        assert_eq!(g.shape(out.mu), &[3, 4]);
    }

    #[test]
    fn point_variant_emits_locations_only_and_uses_squared_error() {
        let mut cfg = tiny_cfg();
        cfg.ablation = Some(Ablation::A4);
        cfg.alpha = 0.0;
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        assert!(out.sigma.is_none() && out.nu.is_none());
        assert!(model.dist_params(&g, &out).is_err());
        let targets = vec![0.25; 3 * 4];
        let loss = model.loss_graph(&mut g, &out, &targets).unwrap();
        let mu = g.data(out.mu).to_vec();
        let manual: f64 = mu
            .iter()
            .map(|&m| (m - 0.25) * (m - 0.25))
            .sum::<f64>()
            / 12.0;
        assert!((g.data(loss.total)[0] - manual).abs() < 1e-12);
        assert!(loss.balance.is_none());
    }

    #[test]
    fn unselected_heads_receive_exactly_zero_gradient() {
        let mut cfg = tiny_cfg();
        cfg.n_experts = 3;
        cfg.top_k = 1;
        cfg.alpha = 0.0;
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        let targets = vec![0.1; 3 * 4];
        let loss = model.loss_graph(&mut g, &out, &targets).unwrap();
        g.backward(loss.total).unwrap();
        let grads = g.grads();
        let mut used = vec![false; 3];
        for sel in out.routing.selected() {
            for &e in sel {
                used[e] = true;
            }
        }
        assert!(used.iter().any(|&u| !u), "all experts used; pick another seed");
        for (m, &u) in used.iter().enumerate() {
            let gw = grads
                .get(&format!("head{m}.w"))
                .expect("head gradient present");
            let max = gw.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            if u {
                assert!(max > 0.0, "selected head {m} got no gradient");
            } else {
                assert_eq!(max, 0.0, "unselected head {m} leaked gradient");
            }
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let cfg = tiny_cfg();
        let (_, g1, o1) = forward_once(&cfg, 58);
        let (_, g2, o2) = forward_once(&cfg, 58);
        assert_eq!(g1.data(o1.mu), g2.data(o2.mu));
        assert_eq!(o1.routing, o2.routing);
        let (_, g3, o3) = forward_once(&cfg, 59);
        assert_ne!(g1.data(o1.mu), g3.data(o3.mu));
    }

    #[test]
    fn load_balance_term_matches_plain_computation() {
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.01;
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        let loss = model
            .loss_graph(&mut g, &out, &vec![0.0; 3 * 4])
            .unwrap();
        let expected = crate::mixture_decoder::load_balance_loss(&out.routing, cfg.alpha);
        let got = g.data(loss.balance.unwrap())[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let total = g.data(loss.total)[0];
        let data = g.data(loss.data_term)[0];
        assert!((total - data - got).abs() < 1e-12);
    }

    #[test]
    fn identity_trunk_variant_runs() {
        let mut cfg = tiny_cfg();
        cfg.ablation = Some(Ablation::B3);
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        assert!(model.backbone().bypass());
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        assert_eq!(g.shape(out.mu), &[3, 4]);
    }

    #[test]
    fn trainable_mlp_variant_swaps_the_encoder() {
        let mut cfg = tiny_cfg();
        cfg.ablation = Some(Ablation::A1);
        let vocab = demo_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng).unwrap();
        let mut has_mixer = false;
        let mut mlp_trainable = false;
        model.visit_params(&mut |p| {
            if p.name().starts_with("enc.b0") || p.name() == "enc.mask" {
                has_mixer = true;
            }
            if p.name() == "enc.fc.w" {
                mlp_trainable = p.trainable();
            }
        });
        assert!(!has_mixer);
        assert!(mlp_trainable);
        assert!(model.load_encoder(std::path::Path::new("/nonexistent")).is_err());
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &demo_patches(&cfg), &demo_prompt(&vocab))
            .unwrap();
        assert_eq!(g.shape(out.mu), &[3, 4]);
    }

    #[test]
    fn mixer_encoder_is_frozen_inside_the_model() {
        let cfg = tiny_cfg();
        let (model, _, _) = forward_once(&cfg, 63);
        model.visit_params(&mut |p| {
            if p.name().starts_with("enc.") {
                assert!(!p.trainable(), "{} should be frozen", p.name());
            }
            if p.name().starts_with("lm.") {
                assert!(!p.trainable(), "{} should be frozen", p.name());
            }
            if p.name() == "mc.w" || p.name().starts_with("gate.") || p.name().starts_with("abs.")
            {
                assert!(p.trainable(), "{} should be trainable", p.name());
            }
        });
    }
}
