//! Autoregressive multi-horizon forecasting and held-out evaluation.
//!
//! Generation stays in the normalized domain of the lookback: each step
//! re-patches the extended sequence (rebuilding the replica patch from the
//! newest values), runs a full forward pass, decodes the last token and
//! appends its location patch. Statistics are computed once from the
//! lookback and never updated, so denormalization is a fixed affine map.

use crate::config::{Ablation, Config};
use crate::data_io::{windows, MultimodalCorpus, Split};
use crate::diffnum::Graph;
use crate::error::Error;
use crate::metrics;
use crate::mixture_decoder::student_t;
use crate::model::CaptimeModel;
use crate::series_prep::{normalize_slice, patchify};
use crate::text_embed::{TextPrompt, TextRecord, Vocabulary};
use crate::Result;

#[derive(Debug, Clone)]
pub struct ForecastRequest {
    /// Raw lookback values; must match the model's configured length.
    pub lookback: Vec<f64>,
    pub texts: Vec<TextRecord>,
    /// Time interval the lookback covers; texts overlapping it feed the
    /// prompt.
    pub window: (i64, i64),
    pub horizon: usize,
    /// Probability levels in (0, 1) for which paths are returned.
    pub quantiles: Vec<f64>,
}

/// Text attention read out at one generation step, row-major
/// `[n_tokens, n_text]`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub n_tokens: usize,
    pub n_text: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForecastResult {
    /// Denormalized location path, exactly `horizon` values; equals `mu`.
    pub point: Vec<f64>,
    pub mu: Vec<f64>,
    /// Denormalized scale/tail paths; empty in the point-forecast variant.
    pub sigma: Vec<f64>,
    pub nu: Vec<f64>,
    /// `(level, path)` pairs sorted by level.
    pub quantiles: Vec<(f64, Vec<f64>)>,
    /// One map per generation step; empty when the model has no text
    /// abstraction.
    pub attn: Vec<AttentionMap>,
}

pub fn forecast(
    model: &CaptimeModel,
    vocab: &Vocabulary,
    req: &ForecastRequest,
) -> Result<ForecastResult> {
    let prompt = vocab.build_prompt(&req.texts, req.window, model.config().n_s_max)?;
    forecast_with_prompt(model, &prompt, &req.lookback, req.horizon, &req.quantiles)
}

/// Forecast with an already-built prompt; the entry point for evaluation,
/// where windows carry their prompts.
pub fn forecast_with_prompt(
    model: &CaptimeModel,
    prompt: &TextPrompt,
    lookback: &[f64],
    horizon: usize,
    quantiles: &[f64],
) -> Result<ForecastResult> {
    let cfg = model.config();
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if lookback.len() != cfg.h {
        return Err(Error::Length(format!(
            "lookback holds {} values but the model expects {}",
            lookback.len(),
            cfg.h
        )));
    }
    for &q in quantiles {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!(
                "quantile level {q} is outside (0, 1)"
            )));
        }
    }
    let l_p = cfg.patch_len;
    let steps = horizon.div_ceil(l_p);
    let final_positions = (cfg.h + steps * l_p).div_ceil(l_p) + 1;
    if final_positions > cfg.n_max {
        return Err(Error::Length(format!(
            "horizon {horizon} needs {final_positions} positions but the model supports {}",
            cfg.n_max
        )));
    }
    let probabilistic = model.ablation() != Some(Ablation::A4);
    if !quantiles.is_empty() && !probabilistic {
        return Err(Error::Unsupported(
            "quantile paths need distribution heads; the point-forecast variant has none".into(),
        ));
    }

    let (mut seq, mean, std, _) = normalize_slice(lookback)?;
    let mut mu_n: Vec<f64> = Vec::with_capacity(steps * l_p);
    let mut sigma_n: Vec<f64> = Vec::new();
    let mut nu_n: Vec<f64> = Vec::new();
    let mut attn_maps = Vec::new();
    for _ in 0..steps {
        let patches = patchify(&seq, l_p, 0)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &patches, prompt)?;
        let last = out.n_tokens - 1;
        let span = last * l_p..(last + 1) * l_p;
        let mu_row = g.data(out.mu)[span.clone()].to_vec();
        if let (Some(sigma), Some(nu)) = (out.sigma, out.nu) {
            sigma_n.extend_from_slice(&g.data(sigma)[span.clone()]);
            nu_n.extend_from_slice(&g.data(nu)[span]);
        }
        if let Some(attn) = out.attn {
            attn_maps.push(AttentionMap {
                n_tokens: out.n_tokens,
                n_text: prompt.len(),
                weights: g.data(attn).to_vec(),
            });
        }
        seq.extend_from_slice(&mu_row);
        mu_n.extend_from_slice(&mu_row);
    }
    mu_n.truncate(horizon);
    sigma_n.truncate(horizon);
    nu_n.truncate(horizon);

    let mu: Vec<f64> = mu_n.iter().map(|v| v * std + mean).collect();
    let sigma: Vec<f64> = sigma_n.iter().map(|v| v * std).collect();
    let nu = nu_n;

    let mut levels = quantiles.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut quantile_paths = Vec::with_capacity(levels.len());
    for q in levels {
        let mut path = Vec::with_capacity(horizon);
        for i in 0..horizon {
            path.push(student_t::quantile(q, mu[i], sigma[i], nu[i])?);
        }
        quantile_paths.push((q, path));
    }

    Ok(ForecastResult {
        point: mu.clone(),
        mu,
        sigma,
        nu,
        quantiles: quantile_paths,
        attn: attn_maps,
    })
}

/// Per-horizon error and calibration summary on a held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub horizon: usize,
    pub n_windows: usize,
    /// Denormalized squared/absolute error per value.
    pub mse: f64,
    pub mae: f64,
    /// Mean negative log-likelihood and central-interval hit rates; `None`
    /// in the point-forecast variant.
    pub nll: Option<f64>,
    pub coverage80: Option<f64>,
    pub coverage95: Option<f64>,
    /// Window-averaged relative metrics against the seasonal naive baseline.
    /// `None` when no window admits the statistic (constant inputs, or a
    /// baseline error of zero).
    pub smape: f64,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
}

/// Forecasts every window of the split once per horizon with the same
/// checkpoint and aggregates denormalized errors. `season` is the period
/// used for the MASE denominator and the seasonally adjusted naive baseline
/// that anchors OWA; pass 1 for non-seasonal data.
pub fn evaluate(
    model: &CaptimeModel,
    vocab: &Vocabulary,
    corpus: &MultimodalCorpus,
    split: Split,
    horizons: &[usize],
    season: usize,
) -> Result<Vec<EvalRow>> {
    if horizons.is_empty() {
        return Err(Error::Config("evaluation needs at least one horizon".into()));
    }
    if season == 0 {
        return Err(Error::Config("season must be at least 1".into()));
    }
    let cfg: Config = model.config().clone();
    let mut corpus = corpus.clone();
    corpus.set_splits(cfg.train_frac, cfg.val_frac)?;
    let probabilistic = model.ablation() != Some(Ablation::A4);
    let mut rows = Vec::with_capacity(horizons.len());
    for &f in horizons {
        if f == 0 {
            return Err(Error::Config("forecast horizon must be at least 1".into()));
        }
        let samples = windows(
            &corpus,
            split,
            cfg.h,
            f,
            cfg.effective_stride(),
            vocab,
            cfg.n_s_max,
        )?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "{split} split has no complete windows at horizon {f}"
            )));
        }
        let mut se = 0.0;
        let mut ae = 0.0;
        let mut nll = 0.0;
        let mut in80 = 0usize;
        let mut in95 = 0usize;
        let mut count = 0usize;
        let mut rel = RelativeAcc::default();
        for sample in &samples {
            let fc = forecast_with_prompt(model, &sample.prompt, &sample.input, f, &[])?;
            for (i, &y) in sample.target.iter().enumerate() {
                let err = fc.point[i] - y;
                se += err * err;
                ae += err.abs();
                if probabilistic {
                    nll -= student_t::logpdf(y, fc.mu[i], fc.sigma[i], fc.nu[i])?;
                    let u = student_t::cdf(y, fc.mu[i], fc.sigma[i], fc.nu[i])?;
                    if (0.10..=0.90).contains(&u) {
                        in80 += 1;
                    }
                    if (0.025..=0.975).contains(&u) {
                        in95 += 1;
                    }
                }
                count += 1;
            }
            rel.add(&sample.target, &fc.point, &sample.input, season);
        }
        let n = count as f64;
        let (smape, mase, owa) = rel.summarize();
        rows.push(EvalRow {
            horizon: f,
            n_windows: samples.len(),
            mse: se / n,
            mae: ae / n,
            nll: probabilistic.then(|| nll / n),
            coverage80: probabilistic.then(|| in80 as f64 / n),
            coverage95: probabilistic.then(|| in95 as f64 / n),
            smape,
            mase,
            owa,
        });
    }
    Ok(rows)
}

/// Window-averaged SMAPE/MASE for the model and the seasonal naive baseline.
/// Each window contributes equally; windows where a statistic is undefined
/// (a constant insample makes the MASE denominator zero) are skipped for
/// that statistic only. OWA is formed from the four averages at the end.
#[derive(Default)]
struct RelativeAcc {
    smape_sum: f64,
    smape_n: usize,
    mase_sum: f64,
    mase_n: usize,
    smape_base_sum: f64,
    smape_base_n: usize,
    mase_base_sum: f64,
    mase_base_n: usize,
}

impl RelativeAcc {
    fn add(&mut self, target: &[f64], point: &[f64], insample: &[f64], season: usize) {
        if let Ok(v) = metrics::smape(target, point) {
            self.smape_sum += v;
            self.smape_n += 1;
        }
        if let Ok(v) = metrics::mase(target, point, insample, season) {
            self.mase_sum += v;
            self.mase_n += 1;
        }
        if let Ok(base) = metrics::naive2(insample, season, target.len()) {
            if let Ok(v) = metrics::smape(target, &base) {
                self.smape_base_sum += v;
                self.smape_base_n += 1;
            }
            if let Ok(v) = metrics::mase(target, &base, insample, season) {
                self.mase_base_sum += v;
                self.mase_base_n += 1;
            }
        }
    }

    fn summarize(&self) -> (f64, Option<f64>, Option<f64>) {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let smape = mean(self.smape_sum, self.smape_n).unwrap_or(f64::NAN);
        let mase = mean(self.mase_sum, self.mase_n);
        let owa = (|| {
            let s = mean(self.smape_sum, self.smape_n)?;
            let m = mase?;
            let sb = mean(self.smape_base_sum, self.smape_base_n)?;
            let mb = mean(self.mase_base_sum, self.mase_base_n)?;
            metrics::owa(s, m, sb, mb).ok()
        })();
        (smape, mase, owa)
    }
}
