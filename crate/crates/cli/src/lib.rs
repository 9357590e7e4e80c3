//! Command-line driver for the captime forecaster.
//!
//! Every subcommand writes its artifacts into `--out`: a `report.json`
//! (metric report) and a `run.json` (what was run, with what parameters),
//! plus command-specific files. Exit codes: 0 on success, 1 when a run
//! fails, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use captime_core::config::{Ablation, Config};
use captime_core::data_io::{self, MultimodalCorpus, Split, SyntheticSpec};
use captime_core::diffnum::{grad_check, DEFAULT_FD_STEP};
use captime_core::diffnum::{Graph, NodeId};
use captime_core::inference::{self, AttentionMap, ForecastRequest};
use captime_core::metrics::MetricReport;
use captime_core::model::CaptimeModel;
use captime_core::nn::Linear;
use captime_core::text_embed::{TextPrompt, TextRecord, Vocabulary};
use captime_core::trainer::{self, WEIGHTS_FILE};
use captime_core::ts_encoder::{self, MixerEncoder};
use captime_core::container;
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENCODER_FILE: &str = "encoder.bin";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(
    name = "captime",
    version,
    about = "Context-aware probabilistic forecasting for numeric + text time series",
    after_help = "A corpus directory holds series.csv (timestamp column plus one column per \
                  channel) and texts.jsonl (one {start, end, text} record per line). The usual \
                  pipeline is synth -> pretrain-encoder -> train -> evaluate / forecast."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic regime-switching corpus
    Synth(SynthArgs),
    /// Pretrain the patch encoder by masked-patch reconstruction
    PretrainEncoder(PretrainEncoderArgs),
    /// Train a forecaster and write a checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on one split at one or more horizons
    Evaluate(EvaluateArgs),
    /// Forecast past a lookback window taken from a corpus
    Forecast(ForecastArgs),
    /// Train one ablation variant and evaluate it in a single run
    Ablate(AblateArgs),
    /// Audit analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Dump the text cross-attention behind one forecast
    InspectAttn(InspectAttnArgs),
}

/// Flags shared by every command that assembles a model.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file: UTF-8 `key = value` lines; defaults apply when omitted
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the configured RNG seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Corpus RNG seed
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Total timesteps (a whole number of segments)
    #[arg(long, value_name = "N")]
    length: Option<usize>,
    /// Steps per regime segment
    #[arg(long, value_name = "N")]
    segment_len: Option<usize>,
    /// Seasonal period of the base sinusoid
    #[arg(long, value_name = "N")]
    period: Option<usize>,
    /// Seasonal amplitude
    #[arg(long, value_name = "X")]
    amp: Option<f64>,
    /// Gaussian noise standard deviation
    #[arg(long, value_name = "X")]
    noise: Option<f64>,
    /// Level change one surge or drop segment accumulates
    #[arg(long, value_name = "X")]
    slope: Option<f64>,
    /// Noise multiplier inside surge and drop segments
    #[arg(long, value_name = "X")]
    regime_noise_mult: Option<f64>,
}

#[derive(Args)]
struct PretrainEncoderArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Model variant: a1, a2, a3, a4, b2 or b3 (overrides the config)
    #[arg(long, value_name = "VARIANT", value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Pretrained patch-encoder weights from pretrain-encoder; required
    /// except under --ablation a1, which trains its own patch embedding
    #[arg(long, value_name = "PATH")]
    encoder: Option<PathBuf>,
    /// Pretrained backbone weights to load before training; the backbone
    /// stays random when omitted, and b2 ignores this flag
    #[arg(long, value_name = "PATH")]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory written by train
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Forecast horizon in steps; repeat the flag to score several
    /// horizons with the same checkpoint (default: one patch)
    #[arg(long, value_name = "F")]
    horizon: Vec<usize>,
    /// Split to score: train, val or test
    #[arg(long, value_name = "SPLIT", default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Seasonal period for MASE and the seasonally adjusted naive baseline
    #[arg(long, value_name = "M", default_value_t = 1)]
    season: usize,
}

#[derive(Args)]
struct ForecastArgs {
    /// Checkpoint directory written by train
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Forecast horizon in steps (default: one patch)
    #[arg(long, value_name = "F")]
    horizon: Option<usize>,
    /// Channel to forecast (default: the first)
    #[arg(long, value_name = "NAME")]
    channel: Option<String>,
    /// Row the lookback ends before, so the window is rows END-h .. END-1
    /// (default: the end of the series)
    #[arg(long, value_name = "END")]
    end: Option<usize>,
    /// Predictive quantile level in (0, 1); repeatable
    #[arg(long, value_name = "Q")]
    quantile: Vec<f64>,
    /// Also write the per-step text attention to attention.csv
    #[arg(long)]
    explain: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Variant to run: a1, a2, a3, a4, b2 or b3
    #[arg(value_name = "VARIANT", value_parser = parse_ablation)]
    variant: Ablation,
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory; receives the checkpoint and the evaluation report
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Pretrained patch-encoder weights (required except for a1)
    #[arg(long, value_name = "PATH")]
    encoder: Option<PathBuf>,
    /// Forecast horizon in steps; repeatable (default: one patch)
    #[arg(long, value_name = "F")]
    horizon: Vec<usize>,
    /// Split to score after training: train, val or test
    #[arg(long, value_name = "SPLIT", default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Seasonal period for MASE and the seasonally adjusted naive baseline
    #[arg(long, value_name = "M", default_value_t = 1)]
    season: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Configuration to audit; omit for a small built-in audit model
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Central-difference step
    #[arg(long, value_name = "H", default_value_t = DEFAULT_FD_STEP)]
    fd_step: f64,
    /// Pass threshold on the worst relative error
    #[arg(long, value_name = "TOL", default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct InspectAttnArgs {
    /// Checkpoint directory written by train
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Corpus directory (series.csv + texts.jsonl)
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Forecast horizon in steps (default: one patch)
    #[arg(long, value_name = "F")]
    horizon: Option<usize>,
    /// Channel to forecast (default: the first)
    #[arg(long, value_name = "NAME")]
    channel: Option<String>,
    /// Row the lookback ends before (default: the end of the series)
    #[arg(long, value_name = "END")]
    end: Option<usize>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

/// Parses the command line and runs it, mapping usage errors to exit
/// code 2 and failed runs to exit code 1.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code: u8 = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::PretrainEncoder(args) => cmd_pretrain_encoder(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::InspectAttn(args) => cmd_inspect_attn(args),
    }
}

// ---- synth ---------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut spec = SyntheticSpec::default();
    spec.seed = args.seed;
    if let Some(v) = args.length {
        spec.length = v;
    }
    if let Some(v) = args.segment_len {
        spec.segment_len = v;
    }
    if let Some(v) = args.period {
        spec.period = v;
    }
    if let Some(v) = args.amp {
        spec.amp = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.slope {
        spec.slope = v;
    }
    if let Some(v) = args.regime_noise_mult {
        spec.regime_noise_mult = v;
    }
    let (corpus, regimes) = data_io::generate_synthetic(&spec)?;
    let out = ensure_out(&args.out)?;
    data_io::write_corpus(&corpus, &out.join("series.csv"), &out.join("texts.jsonl"))?;

    let mut regime_csv = String::from("segment,start_row,regime\n");
    for (k, r) in regimes.iter().enumerate() {
        regime_csv.push_str(&format!("{k},{},{}\n", k * spec.segment_len, r.word()));
    }
    std::fs::write(out.join("regimes.csv"), regime_csv)?;

    let params = serde_json::json!({
        "seed": spec.seed,
        "length": spec.length,
        "segment_len": spec.segment_len,
        "period": spec.period,
        "amp": spec.amp,
        "noise": spec.noise,
        "slope": spec.slope,
        "regime_noise_mult": spec.regime_noise_mult,
    });
    let mut report = MetricReport::new("synthetic", spec.seed, sha256_hex_of(&params.to_string()));
    report.insert(0, "length", spec.length as f64)?;
    report.insert(0, "segments", (spec.length / spec.segment_len) as f64)?;
    report.insert(0, "channels", corpus.n_channels() as f64)?;
    report.insert(0, "texts", corpus.texts().len() as f64)?;
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "synth",
        params,
        &["series.csv", "texts.jsonl", "regimes.csv"],
    )?;
    println!(
        "wrote {} steps / {} texts to {}",
        corpus.len(),
        corpus.texts().len(),
        out.display()
    );
    Ok(())
}

// ---- pretrain-encoder ------------------------------------------------------

fn cmd_pretrain_encoder(args: PretrainEncoderArgs) -> anyhow::Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let corpus = load_corpus(&args.data)?;
    let mut corpus = corpus;
    corpus.set_splits(cfg.train_frac, cfg.val_frac)?;
    let windows = pretrain_windows(&corpus, &cfg);
    if windows.is_empty() {
        bail!("the train split is shorter than one {}-step lookback", cfg.h);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = MixerEncoder::new(cfg.patch_len, cfg.d_enc, cfg.n_max, cfg.mixer_blocks, &mut rng);
    let mut recon = Linear::new("recon", cfg.d_enc, cfg.patch_len, 0.02, &mut rng, true);
    let losses = ts_encoder::pretrain(
        &mut enc,
        &mut recon,
        &windows,
        cfg.pretrain_steps,
        cfg.pretrain_lr,
        cfg.mask_ratio,
        cfg.batch_size,
        &mut rng,
    )?;

    let out = ensure_out(&args.out)?;
    let enc_path = out.join(ENCODER_FILE);
    container::save(&enc_path, &container::dump_params(&enc))?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        curve.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(out.join("pretrain_loss.csv"), curve)?;

    let mut report = MetricReport::new(dataset_name(&args.data), cfg.seed, cfg.sha256_hex()?);
    report.checkpoint_sha256 = Some(sha256_file(&enc_path)?);
    report.insert(0, "steps", losses.len() as f64)?;
    report.insert(0, "windows", windows.len() as f64)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        report.insert(0, "loss_first", *first)?;
        report.insert(0, "loss_last", *last)?;
    }
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "pretrain-encoder",
        serde_json::json!({
            "config": cfg,
            "config_sha256": cfg.sha256_hex()?,
            "data": args.data.display().to_string(),
        }),
        &[ENCODER_FILE, "pretrain_loss.csv"],
    )?;
    println!(
        "pretrained encoder for {} steps on {} windows; loss {:.6} -> {:.6}",
        losses.len(),
        windows.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

/// Train-split lookback windows for encoder pretraining, every channel.
fn pretrain_windows(corpus: &MultimodalCorpus, cfg: &Config) -> Vec<Vec<f64>> {
    let (lo, hi) = corpus.split_range(Split::Train);
    let stride = cfg.effective_stride();
    let mut out = Vec::new();
    for ch in 0..corpus.n_channels() {
        let values = corpus.channel_values(ch);
        let mut start = lo;
        while start + cfg.h <= hi {
            out.push(values[start..start + cfg.h].to_vec());
            start += stride;
        }
    }
    out
}

// ---- train -----------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(v) = args.ablation {
        cfg.ablation = Some(v);
    }
    let corpus = load_corpus(&args.data)?;
    let out = ensure_out(&args.out)?;
    let outcome = train_model(
        &cfg,
        &corpus,
        args.encoder.as_deref(),
        args.backbone.as_deref(),
        &out,
    )?;

    let mut report = MetricReport::new(dataset_name(&args.data), cfg.seed, cfg.sha256_hex()?);
    report.checkpoint_sha256 = Some(sha256_file(&out.join(WEIGHTS_FILE))?);
    report.insert(cfg.h, "steps", outcome.steps as f64)?;
    if let Some(row) = outcome.rows.last() {
        report.insert(cfg.h, "train_nll_final", row.train_obj)?;
    }
    if let Some(v) = outcome.val_start {
        report.insert(cfg.h, "val_nll_start", v)?;
    }
    if let Some(v) = outcome.val_end {
        report.insert(cfg.h, "val_nll_end", v)?;
    }
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "train",
        serde_json::json!({
            "config": cfg,
            "config_sha256": cfg.sha256_hex()?,
            "data": args.data.display().to_string(),
            "encoder": args.encoder.as_ref().map(|p| p.display().to_string()),
            "backbone": args.backbone.as_ref().map(|p| p.display().to_string()),
        }),
        &[
            WEIGHTS_FILE,
            trainer::MANIFEST_FILE,
            trainer::VOCAB_FILE,
            trainer::METRICS_FILE,
        ],
    )?;
    match (outcome.val_start, outcome.val_end) {
        (Some(a), Some(b)) => println!(
            "trained {} steps; val objective {a:.6} -> {b:.6}; checkpoint in {}",
            outcome.steps,
            out.display()
        ),
        _ => println!(
            "trained {} steps; checkpoint in {}",
            outcome.steps,
            out.display()
        ),
    }
    Ok(())
}

/// Assembles a model for `cfg`, loads pretrained stages, trains it on the
/// corpus and writes the checkpoint plus metrics.csv into `out`.
fn train_model(
    cfg: &Config,
    corpus: &MultimodalCorpus,
    encoder: Option<&Path>,
    backbone: Option<&Path>,
    out: &Path,
) -> anyhow::Result<trainer::TrainOutcome> {
    cfg.validate()?;
    let vocab = train_vocab(corpus, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CaptimeModel::assemble(cfg, vocab.size(), &mut rng)?;

    let mlp_encoder = cfg.ablation == Some(Ablation::A1);
    match (mlp_encoder, encoder) {
        (true, Some(_)) => {
            bail!("the a1 variant trains its own patch embedding; --encoder does not apply")
        }
        (true, None) => {}
        (false, Some(path)) => {
            let unused = model
                .load_encoder(path)
                .with_context(|| format!("loading encoder weights {}", path.display()))?;
            for name in unused {
                eprintln!("note: encoder file carries unused tensor {name}");
            }
        }
        (false, None) => bail!(
            "training needs pretrained patch-encoder weights; run pretrain-encoder and pass \
             --encoder, or select --ablation a1"
        ),
    }
    match (cfg.ablation, backbone) {
        (Some(Ablation::B2), Some(_)) => {
            eprintln!("note: b2 keeps the backbone randomly initialized; ignoring --backbone");
        }
        (_, Some(path)) => {
            let unused = model
                .backbone_mut()
                .load_weights(path)
                .with_context(|| format!("loading backbone weights {}", path.display()))?;
            for name in unused {
                eprintln!("note: backbone file carries unused tensor {name}");
            }
        }
        (_, None) => {}
    }

    Ok(trainer::train(&mut model, corpus, &vocab, Some(out))?)
}

/// Vocabulary from the texts that overlap the train split only, so held-out
/// wording cannot leak into the token table.
fn train_vocab(corpus: &MultimodalCorpus, cfg: &Config) -> anyhow::Result<Vocabulary> {
    let mut split = corpus.clone();
    split.set_splits(cfg.train_frac, cfg.val_frac)?;
    let (lo, hi) = split.split_range(Split::Train);
    if lo >= hi {
        bail!("the corpus has no train rows");
    }
    let ts = split.timestamps();
    let texts = split.texts_overlapping(ts[lo], ts[hi - 1]);
    Ok(Vocabulary::from_corpus(
        texts.iter().map(|r| r.text.as_str()),
        cfg.vocab_min_freq,
    )?)
}

// ---- evaluate ----------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (model, vocab, manifest) = trainer::load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data)?;
    let out = ensure_out(&args.out)?;
    let report = evaluate_checkpoint(
        &model,
        &vocab,
        &manifest,
        &args.checkpoint,
        &corpus,
        dataset_name(&args.data),
        &args.horizon,
        args.split,
        args.season,
    )?;
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "evaluate",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "data": args.data.display().to_string(),
            "split": args.split.to_string(),
            "season": args.season,
            "horizons": report.horizons.keys().collect::<Vec<_>>(),
        }),
        &[REPORT_FILE],
    )?;
    Ok(())
}

/// Scores the checkpoint and prints one line per horizon.
#[allow(clippy::too_many_arguments)]
fn evaluate_checkpoint(
    model: &CaptimeModel,
    vocab: &Vocabulary,
    manifest: &trainer::Manifest,
    checkpoint: &Path,
    corpus: &MultimodalCorpus,
    dataset: String,
    horizons: &[usize],
    split: Split,
    season: usize,
) -> anyhow::Result<MetricReport> {
    let cfg = model.config();
    let horizons = if horizons.is_empty() {
        vec![cfg.patch_len]
    } else {
        horizons.to_vec()
    };
    let rows = inference::evaluate(model, vocab, corpus, split, &horizons, season)?;

    let mut report = MetricReport::new(dataset, manifest.config.seed, manifest.config.sha256_hex()?);
    report.checkpoint_sha256 = Some(sha256_file(&checkpoint.join(WEIGHTS_FILE))?);
    for row in &rows {
        report.insert(row.horizon, "n_windows", row.n_windows as f64)?;
        report.insert(row.horizon, "mse", row.mse)?;
        report.insert(row.horizon, "mae", row.mae)?;
        report.insert(row.horizon, "smape", row.smape)?;
        if let Some(v) = row.nll {
            report.insert(row.horizon, "nll", v)?;
        }
        if let Some(v) = row.coverage80 {
            report.insert(row.horizon, "coverage80", v)?;
        }
        if let Some(v) = row.coverage95 {
            report.insert(row.horizon, "coverage95", v)?;
        }
        if let Some(v) = row.mase {
            report.insert(row.horizon, "mase", v)?;
        }
        if let Some(v) = row.owa {
            report.insert(row.horizon, "owa", v)?;
        }
        let opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        };
        println!(
            "horizon {:>3}: {:>4} windows  mse {:.4}  mae {:.4}  nll {}  cov80 {}  cov95 {}  \
             smape {:.3}  mase {}  owa {}",
            row.horizon,
            row.n_windows,
            row.mse,
            row.mae,
            opt(row.nll),
            opt(row.coverage80),
            opt(row.coverage95),
            row.smape,
            opt(row.mase),
            opt(row.owa),
        );
    }
    Ok(report)
}

// ---- forecast ------------------------------------------------------------------

fn cmd_forecast(args: ForecastArgs) -> anyhow::Result<()> {
    let (model, vocab, manifest) = trainer::load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data)?;
    let cfg = model.config();
    let horizon = args.horizon.unwrap_or(cfg.patch_len);

    let (channel, ch_name) = resolve_channel(&corpus, args.channel.as_deref())?;
    let end = args.end.unwrap_or(corpus.len());
    if end > corpus.len() || end < cfg.h {
        bail!(
            "lookback rows {}..{} fall outside the {}-row series",
            end as i64 - cfg.h as i64,
            end,
            corpus.len()
        );
    }
    let start = end - cfg.h;
    let values = corpus.channel_values(channel);
    let ts = corpus.timestamps();
    let request = ForecastRequest {
        lookback: values[start..end].to_vec(),
        texts: corpus.texts().to_vec(),
        window: (ts[start], ts[end - 1]),
        horizon,
        quantiles: args.quantile.clone(),
    };
    let fc = inference::forecast(&model, &vocab, &request)?;

    let out = ensure_out(&args.out)?;
    let probabilistic = !fc.sigma.is_empty();
    let doc = serde_json::json!({
        "channel": ch_name,
        "lookback_end_row": end,
        "horizon": horizon,
        "point": fc.point,
        "mu": fc.mu,
        "sigma": fc.sigma,
        "nu": fc.nu,
        "quantiles": fc.quantiles.iter().map(|(q, v)| {
            serde_json::json!({"level": q, "values": v})
        }).collect::<Vec<_>>(),
    });
    write_json(&out.join("forecast.json"), &doc)?;
    std::fs::write(out.join("forecast.csv"), forecast_csv(&fc, probabilistic))?;

    let mut artifacts = vec!["forecast.json".to_string(), "forecast.csv".to_string()];
    if args.explain {
        if fc.attn.is_empty() {
            eprintln!("note: this variant distills no text, so there is no attention to dump");
        } else {
            let prompt = vocab.build_prompt(&request.texts, request.window, cfg.n_s_max)?;
            std::fs::write(
                out.join("attention.csv"),
                attention_csv(&fc.attn, &prompt, &vocab),
            )?;
            artifacts.push("attention.csv".to_string());
        }
    }

    let mut report = MetricReport::new(
        dataset_name(&args.data),
        manifest.config.seed,
        manifest.config.sha256_hex()?,
    );
    report.checkpoint_sha256 = Some(sha256_file(&args.checkpoint.join(WEIGHTS_FILE))?);
    report.insert(horizon, "n_values", fc.point.len() as f64)?;
    report.save(&out.join(REPORT_FILE))?;
    let artifact_refs: Vec<&str> = artifacts.iter().map(|s| s.as_str()).collect();
    write_run_manifest(
        &out,
        "forecast",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "data": args.data.display().to_string(),
            "channel": ch_name,
            "end": end,
            "horizon": horizon,
            "quantiles": args.quantile,
        }),
        &artifact_refs,
    )?;
    println!(
        "forecast {horizon} steps of {ch_name} from row {end}; wrote {}",
        out.join("forecast.json").display()
    );
    Ok(())
}

fn forecast_csv(fc: &inference::ForecastResult, probabilistic: bool) -> String {
    let mut header = String::from("step,point");
    if probabilistic {
        header.push_str(",sigma,nu");
    }
    for (q, _) in &fc.quantiles {
        header.push_str(&format!(",q{q}"));
    }
    header.push('\n');
    let mut body = String::new();
    for i in 0..fc.point.len() {
        body.push_str(&format!("{},{}", i + 1, fc.point[i]));
        if probabilistic {
            body.push_str(&format!(",{},{}", fc.sigma[i], fc.nu[i]));
        }
        for (_, v) in &fc.quantiles {
            body.push_str(&format!(",{}", v[i]));
        }
        body.push('\n');
    }
    header + &body
}

fn resolve_channel(
    corpus: &MultimodalCorpus,
    name: Option<&str>,
) -> anyhow::Result<(usize, String)> {
    match name {
        None => Ok((0, corpus.channel_names()[0].clone())),
        Some(name) => {
            let idx = corpus
                .channel_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| {
                    anyhow::anyhow!(
                        "unknown channel {name:?}; the corpus has {}",
                        corpus.channel_names().join(", ")
                    )
                })?;
            Ok((idx, name.to_string()))
        }
    }
}

// ---- ablate ---------------------------------------------------------------------

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    cfg.ablation = Some(args.variant);
    let corpus = load_corpus(&args.data)?;
    let out = ensure_out(&args.out)?;
    let outcome = train_model(&cfg, &corpus, args.encoder.as_deref(), None, &out)?;
    println!(
        "trained {} for {} steps; evaluating the {} split",
        args.variant, outcome.steps, args.split
    );

    let (model, vocab, manifest) = trainer::load_checkpoint(&out)?;
    let report = evaluate_checkpoint(
        &model,
        &vocab,
        &manifest,
        &out,
        &corpus,
        dataset_name(&args.data),
        &args.horizon,
        args.split,
        args.season,
    )?;
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "ablate",
        serde_json::json!({
            "variant": args.variant.to_string(),
            "config": cfg,
            "config_sha256": cfg.sha256_hex()?,
            "data": args.data.display().to_string(),
            "encoder": args.encoder.as_ref().map(|p| p.display().to_string()),
            "split": args.split.to_string(),
            "season": args.season,
        }),
        &[
            WEIGHTS_FILE,
            trainer::MANIFEST_FILE,
            trainer::VOCAB_FILE,
            trainer::METRICS_FILE,
            REPORT_FILE,
        ],
    )?;
    Ok(())
}

// ---- gradcheck --------------------------------------------------------------------

/// Small enough that central differences over every trainable parameter
/// finish in seconds.
fn audit_config() -> Config {
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

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config.config {
        Some(_) => args.config.load()?,
        None => {
            let mut cfg = audit_config();
            if let Some(seed) = args.config.seed {
                cfg.seed = seed;
            }
            cfg
        }
    };
    cfg.validate()?;
    // keep both loss terms in the audited objective
    if cfg.alpha <= 0.0 {
        cfg.alpha = 0.01;
    }

    let vocab = Vocabulary::from_tokens([
        "outlook", "for", "the", "next", "period", "surge", "drop",
    ])?;
    let texts = vec![TextRecord {
        start: 0,
        end: cfg.h as i64 - 1,
        text: "outlook for the next period: surge".into(),
    }];
    let prompt = vocab.build_prompt(&texts, (0, cfg.h as i64 - 1), cfg.n_s_max)?;
    let window: Vec<f64> = (0..cfg.h + cfg.patch_len)
        .map(|t| (t as f64 * 0.7).sin() + 0.05 * t as f64 + 0.3)
        .collect();
    let sw = trainer::make_targets(&window, cfg.h, cfg.patch_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CaptimeModel::assemble(&cfg, vocab.size(), &mut rng)?;
    let build = |m: &CaptimeModel| -> captime_core::Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &sw.patches, &prompt)?;
        let parts = m.loss_graph(&mut g, &out, &sw.targets)?;
        Ok((g, parts.total))
    };
    let audit = grad_check(&mut model, build, args.fd_step, args.tol)?;
    print!("{audit}");

    let out = ensure_out(&args.out)?;
    let mut report = MetricReport::new("gradient-audit", cfg.seed, cfg.sha256_hex()?);
    report.insert(0, "max_rel_err", audit.max_rel_err())?;
    report.insert(0, "tol", audit.tol)?;
    report.insert(0, "fd_step", audit.step)?;
    report.insert(0, "tensors_checked", audit.entries.len() as f64)?;
    report.insert(0, "passed", if audit.passed() { 1.0 } else { 0.0 })?;
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "gradcheck",
        serde_json::json!({
            "config": cfg,
            "config_sha256": cfg.sha256_hex()?,
            "fd_step": args.fd_step,
            "tol": args.tol,
        }),
        &[REPORT_FILE],
    )?;
    if !audit.passed() {
        if let Some(worst) = audit.worst() {
            bail!(
                "gradient audit failed: {} disagrees by {:.3e} (tol {:.1e})",
                worst.name,
                worst.max_rel_err,
                args.tol
            );
        }
        bail!("gradient audit failed with no parameters checked");
    }
    Ok(())
}

// ---- inspect-attn -------------------------------------------------------------------

fn cmd_inspect_attn(args: InspectAttnArgs) -> anyhow::Result<()> {
    let (model, vocab, manifest) = trainer::load_checkpoint(&args.checkpoint)?;
    if model.ablation() == Some(Ablation::A2) {
        bail!("the a2 variant removes the text abstraction, so there is no attention to inspect");
    }
    let corpus = load_corpus(&args.data)?;
    let cfg = model.config();
    let horizon = args.horizon.unwrap_or(cfg.patch_len);
    let (channel, ch_name) = resolve_channel(&corpus, args.channel.as_deref())?;
    let end = args.end.unwrap_or(corpus.len());
    if end > corpus.len() || end < cfg.h {
        bail!(
            "lookback rows {}..{} fall outside the {}-row series",
            end as i64 - cfg.h as i64,
            end,
            corpus.len()
        );
    }
    let start = end - cfg.h;
    let values = corpus.channel_values(channel);
    let ts = corpus.timestamps();
    let request = ForecastRequest {
        lookback: values[start..end].to_vec(),
        texts: corpus.texts().to_vec(),
        window: (ts[start], ts[end - 1]),
        horizon,
        quantiles: Vec::new(),
    };
    let fc = inference::forecast(&model, &vocab, &request)?;
    if fc.attn.is_empty() {
        bail!("the forecast produced no attention maps");
    }
    let prompt = vocab.build_prompt(&request.texts, request.window, cfg.n_s_max)?;

    let out = ensure_out(&args.out)?;
    std::fs::write(out.join("attention.csv"), attention_csv(&fc.attn, &prompt, &vocab))?;
    for (step, top) in top_attended(&fc.attn, &prompt, &vocab).into_iter().enumerate() {
        let shown = top
            .iter()
            .map(|(tok, w)| format!("{tok} {w:.3}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!("step {step}: {shown}");
    }

    let mut report = MetricReport::new(
        dataset_name(&args.data),
        manifest.config.seed,
        manifest.config.sha256_hex()?,
    );
    report.checkpoint_sha256 = Some(sha256_file(&args.checkpoint.join(WEIGHTS_FILE))?);
    report.insert(horizon, "steps", fc.attn.len() as f64)?;
    report.insert(horizon, "text_tokens", prompt.len() as f64)?;
    report.save(&out.join(REPORT_FILE))?;
    write_run_manifest(
        &out,
        "inspect-attn",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "data": args.data.display().to_string(),
            "channel": ch_name,
            "end": end,
            "horizon": horizon,
        }),
        &["attention.csv", REPORT_FILE],
    )?;
    Ok(())
}

/// One row per (decode step, fused position); one column per text token.
fn attention_csv(maps: &[AttentionMap], prompt: &TextPrompt, vocab: &Vocabulary) -> String {
    let mut csv = String::from("step,position");
    for &id in prompt.token_ids() {
        csv.push(',');
        csv.push_str(vocab.token(id).unwrap_or("?"));
    }
    csv.push('\n');
    for (step, m) in maps.iter().enumerate() {
        for q in 0..m.n_tokens {
            csv.push_str(&format!("{step},{q}"));
            for t in 0..m.n_text {
                csv.push_str(&format!(",{}", m.weights[q * m.n_text + t]));
            }
            csv.push('\n');
        }
    }
    csv
}

/// Top three text tokens per decode step by attention mass, averaged over
/// fused positions.
fn top_attended(
    maps: &[AttentionMap],
    prompt: &TextPrompt,
    vocab: &Vocabulary,
) -> Vec<Vec<(String, f64)>> {
    maps.iter()
        .map(|m| {
            let mut mass = vec![0.0; m.n_text];
            for q in 0..m.n_tokens {
                for t in 0..m.n_text {
                    mass[t] += m.weights[q * m.n_text + t];
                }
            }
            let scale = 1.0 / m.n_tokens.max(1) as f64;
            let mut pairs: Vec<(String, f64)> = mass
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let tok = prompt
                        .token_ids()
                        .get(t)
                        .and_then(|&id| vocab.token(id))
                        .unwrap_or("?");
                    (tok.to_string(), w * scale)
                })
                .collect();
            pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
            pairs.truncate(3);
            pairs
        })
        .collect()
}

// ---- shared helpers ------------------------------------------------------------------

fn load_corpus(dir: &Path) -> anyhow::Result<MultimodalCorpus> {
    let series = dir.join("series.csv");
    let texts = dir.join("texts.jsonl");
    Ok(data_io::load_csv(&series, &texts)
        .with_context(|| format!("loading corpus from {}", dir.display()))?)
}

fn ensure_out(dir: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

/// The report names datasets by directory basename so that identical runs
/// rooted in different temporary directories stay byte-identical.
fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn sha256_hex_of(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_run_manifest(
    out: &Path,
    command: &str,
    parameters: serde_json::Value,
    artifacts: &[&str],
) -> anyhow::Result<()> {
    write_json(
        &out.join(RUN_FILE),
        &serde_json::json!({
            "command": command,
            "parameters": parameters,
            "artifacts": artifacts,
        }),
    )
}
