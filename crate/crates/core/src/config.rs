//! Run configuration: one flat struct covering architecture, training, and
//! data keys, parsed from a UTF-8 `key = value` file and hashed into run
//! manifests so identical configs are provably identical.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Structural model variants selectable per run.
///
/// `A*` variants swap adapter-side subgraphs; `B*` variants change the
/// backbone. `B1` (finetuned backbone) and `B4` (attention-only backbone)
/// are accepted by the parser but rejected at model assembly as
/// unsupported stubs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Replace the pretrained patch encoder with one trainable MLP.
    A1,
    /// Remove text abstraction: fused tokens are the time tokens alone.
    A2,
    /// Gate on the time token instead of the text abstraction.
    A3,
    /// Point forecasting: heads emit locations only, loss is MSE.
    A4,
    /// Finetune the backbone (unsupported stub).
    B1,
    /// Randomly initialized backbone weights (ignore any provided file).
    B2,
    /// Remove the backbone entirely: identity over fused tokens.
    B3,
    /// Attention-only backbone (unsupported stub).
    B4,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::A1,
        Ablation::A2,
        Ablation::A3,
        Ablation::A4,
        Ablation::B1,
        Ablation::B2,
        Ablation::B3,
        Ablation::B4,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::A1 => "a1",
            Ablation::A2 => "a2",
            Ablation::A3 => "a3",
            Ablation::A4 => "a4",
            Ablation::B1 => "b1",
            Ablation::B2 => "b2",
            Ablation::B3 => "b3",
            Ablation::B4 => "b4",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; expected one of a1, a2, a3, a4, b1, b2, b3, b4"
                ))
            })
    }
}

/// Every tunable of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Config {
    /// Lookback length.
    pub h: usize,
    /// Patch length; also the per-step generation length.
    pub patch_len: usize,
    /// Backbone width.
    pub d_model: usize,
    /// Patch-encoder width.
    pub d_enc: usize,
    /// Mixer blocks in the patch encoder.
    pub mixer_blocks: usize,
    /// Backbone transformer layers.
    pub layers: usize,
    /// Backbone attention heads.
    pub heads: usize,
    /// Backbone feed-forward width.
    pub ffn: usize,
    /// Maximum token positions (lookback plus generated patches).
    pub n_max: usize,
    /// Number of expert heads.
    pub n_experts: usize,
    /// Experts kept per token.
    pub top_k: usize,
    /// Maximum prompt length in tokens.
    pub n_s_max: usize,
    /// Minimum corpus frequency for a vocabulary word.
    pub vocab_min_freq: usize,
    /// Adam learning rate for the main stage.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exact optimizer-step budget, cycling epochs as needed
    /// (0 = run `epochs` epochs instead).
    pub max_steps: usize,
    /// Load-balance penalty weight.
    pub alpha: f64,
    /// Gradient-norm clip threshold.
    pub grad_clip: f64,
    pub seed: u64,
    /// Fraction of patches masked during encoder pretraining.
    pub mask_ratio: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Window sampling stride (0 = patch_len).
    pub stride: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub ablation: Option<Ablation>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            h: 32,
            patch_len: 8,
            d_model: 64,
            d_enc: 64,
            mixer_blocks: 2,
            layers: 2,
            heads: 4,
            ffn: 256,
            n_max: 64,
            n_experts: 4,
            top_k: 2,
            n_s_max: 256,
            vocab_min_freq: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 5,
            max_steps: 0,
            alpha: 0.01,
            grad_clip: 1.0,
            seed: 0,
            mask_ratio: 0.4,
            pretrain_steps: 200,
            pretrain_lr: 1e-3,
            stride: 0,
            train_frac: 0.7,
            val_frac: 0.1,
            ablation: None,
        }
    }
}

impl Config {
    /// Number of patch tokens a lookback of `h` produces.
    pub fn n_patches(&self) -> usize {
        self.h.div_ceil(self.patch_len) + 1
    }

    /// Effective window stride.
    pub fn effective_stride(&self) -> usize {
        if self.stride == 0 {
            self.patch_len
        } else {
            self.stride
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_len == 0 {
            return fail("patch_len must be at least 1".into());
        }
        if self.h < self.patch_len {
            return fail(format!(
                "lookback h = {} must be at least patch_len = {}",
                self.h, self.patch_len
            ));
        }
        if self.d_model == 0 || self.d_enc == 0 || self.ffn == 0 {
            return fail("widths must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model = {} must be divisible by heads = {}",
                self.d_model, self.heads
            ));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!(
                "top_k = {} must satisfy 1 <= top_k <= n_experts = {}",
                self.top_k, self.n_experts
            ));
        }
        if self.n_max < self.n_patches() {
            return fail(format!(
                "n_max = {} cannot hold the {} lookback tokens",
                self.n_max,
                self.n_patches()
            ));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.mask_ratio >= 0.0 && self.mask_ratio < 1.0) {
            return fail(format!(
                "mask_ratio = {} must lie in [0, 1)",
                self.mask_ratio
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.n_s_max == 0 {
            return fail("n_s_max must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("alpha must be nonnegative and grad_clip positive".into());
        }
        if !(self.train_frac > 0.0)
            || !(self.val_frac >= 0.0)
            || self.train_frac + self.val_frac >= 1.0
        {
            return fail(format!(
                "split fractions train = {}, val = {} must leave room for a test split",
                self.train_frac, self.val_frac
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are skipped. Unknown keys and malformed values error.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {}: expected `key = value`, found {raw:?}",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_key_values(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("key {key}: cannot parse value {value:?}"))
            })
        }
        match key {
            "h" => self.h = parse(key, value)?,
            "patch_len" => self.patch_len = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_enc" => self.d_enc = parse(key, value)?,
            "mixer_blocks" => self.mixer_blocks = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn" => self.ffn = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "n_experts" => self.n_experts = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "n_s_max" => self.n_s_max = parse(key, value)?,
            "vocab_min_freq" => self.vocab_min_freq = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "val_frac" => self.val_frac = parse(key, value)?,
            "ablation" => {
                self.ablation = if value == "none" {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            _ => {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Canonical JSON used for manifests and hashing.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the canonical serialization; equal hashes mean equal configs.
    pub fn sha256_hex(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self)?.as_bytes());
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
