//! Training loop: window supervision, the trainable/frozen parameter split,
//! Adam with gradient clipping, metrics logging and checkpointing.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::container;
use crate::data_io::{windows, MultimodalCorpus, Split, TrainSample};
use crate::diffnum::{Graph, HasParams, NodeId};
use crate::error::Error;
use crate::mixture_decoder::routing_summary;
use crate::model::CaptimeModel;
use crate::nn::{clip_grad_norm, Adam};
use crate::series_prep::{normalize_slice, patchify, PatchSet};
use crate::text_embed::Vocabulary;
use crate::Result;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";

/// One window turned into supervision. Token position `j` is trained on
/// input patch `j + 1` while a full one exists ahead of it; every later
/// position (the padded tail and the replica patch) predicts the true
/// continuation. Normalization statistics come from the lookback alone so
/// the future never leaks into the scaling.
#[derive(Debug, Clone)]
pub struct SupervisedWindow {
    pub patches: PatchSet,
    /// Row-major `[n_patches, patch_len]` regression targets, in the
    /// normalized domain of the lookback.
    pub targets: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Builds patches and per-token targets from `h` lookback values followed by
/// at least `l_p` future values.
pub fn make_targets(window: &[f64], h: usize, l_p: usize) -> Result<SupervisedWindow> {
    if l_p == 0 || h < l_p {
        return Err(Error::Config(format!(
            "lookback {h} and patch length {l_p} cannot be supervised"
        )));
    }
    if window.len() < h + l_p {
        return Err(Error::Length(format!(
            "window holds {} values but supervision needs {}",
            window.len(),
            h + l_p
        )));
    }
    let (normed, mean, std, _) = normalize_slice(&window[..h])?;
    let patches = patchify(&normed, l_p, 0)?;
    let future: Vec<f64> = window[h..h + l_p].iter().map(|v| (v - mean) / std).collect();
    let full = h / l_p;
    let mut targets = Vec::with_capacity(patches.n_patches() * l_p);
    for j in 0..patches.n_patches() {
        if j + 1 < full {
            targets.extend_from_slice(patches.patch(j + 1));
        } else {
            targets.extend_from_slice(&future);
        }
    }
    Ok(SupervisedWindow {
        patches,
        targets,
        mean,
        std,
    })
}

/// Names of every tensor, split into `(trainable, frozen)` and sorted.
/// Errors on a duplicate name: gradients and optimizer state are keyed by
/// name, so a collision would silently merge two tensors.
pub fn partition_parameters<M: HasParams>(model: &M) -> Result<(Vec<String>, Vec<String>)> {
    let mut seen = BTreeSet::new();
    let mut duplicate = None;
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    model.visit_params(&mut |p| {
        if !seen.insert(p.name().to_string()) {
            duplicate.get_or_insert_with(|| p.name().to_string());
        }
        if p.trainable() {
            trainable.push(p.name().to_string());
        } else {
            frozen.push(p.name().to_string());
        }
    });
    if let Some(name) = duplicate {
        return Err(Error::Config(format!(
            "parameter name {name} is used by more than one tensor"
        )));
    }
    trainable.sort();
    frozen.sort();
    Ok((trainable, frozen))
}

/// One logged optimizer step. `val_obj` is filled at epoch boundaries and on
/// the final step; blank rows mean validation was skipped at that step. In
/// the point-forecast variant the objective columns hold squared error
/// instead of a likelihood.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub train_obj: f64,
    pub val_obj: Option<f64>,
    pub balance: f64,
    /// Fraction of tokens routed to each expert, averaged over the batch.
    pub expert_load: Vec<f64>,
}

/// Renders rows as `step,train_nll,val_nll,l_b,f0,..` CSV.
pub fn metrics_csv(rows: &[MetricsRow], n_experts: usize) -> String {
    let mut out = String::from("step,train_nll,val_nll,l_b");
    for m in 0..n_experts {
        out.push_str(&format!(",f{m}"));
    }
    out.push('\n');
    for row in rows {
        let val = row.val_obj.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}",
            row.step, row.train_obj, val, row.balance
        ));
        for m in 0..n_experts {
            let f = row.expert_load.get(m).copied().unwrap_or(0.0);
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Validation objective before the first update / after the last one.
    /// `None` when the validation split yields no windows.
    pub val_start: Option<f64>,
    pub val_end: Option<f64>,
    pub steps: usize,
}

/// Mean data objective (no balance term) over a set of windows, forward
/// passes only. `None` for an empty set.
pub fn evaluate_objective(
    model: &CaptimeModel,
    samples: &[TrainSample],
    cfg: &Config,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for sample in samples {
        let mut g = Graph::new();
        let sup = supervise(sample, cfg)?;
        let out = model.forward(&mut g, &sup.patches, &sample.prompt)?;
        let parts = model.loss_graph(&mut g, &out, &sup.targets)?;
        sum += g.data(parts.data_term)[0];
    }
    Ok(Some(sum / samples.len() as f64))
}

fn supervise(sample: &TrainSample, cfg: &Config) -> Result<SupervisedWindow> {
    let window: Vec<f64> = sample
        .input
        .iter()
        .chain(sample.target.iter())
        .copied()
        .collect();
    make_targets(&window, cfg.h, cfg.patch_len)
}

fn step_error(step: usize, batch: &[&TrainSample], e: Error) -> Error {
    let desc: Vec<String> = batch
        .iter()
        .map(|s| format!("ch{} @ {}", s.channel, s.start))
        .collect();
    Error::Train {
        step,
        msg: format!("{e}; batch [{}]", desc.join(", ")),
    }
}

/// Mean loss over the batch plus its readouts:
/// `(loss node, data term, balance term, per-expert load)`.
fn build_batch_loss(
    model: &CaptimeModel,
    batch: &[&TrainSample],
    cfg: &Config,
    g: &mut Graph,
) -> Result<(NodeId, f64, f64, Vec<f64>)> {
    let mut total: Option<NodeId> = None;
    let mut data_sum = 0.0;
    let mut balance_sum = 0.0;
    let mut load = vec![0.0; cfg.n_experts];
    for sample in batch {
        let sup = supervise(sample, cfg)?;
        let out = model.forward(g, &sup.patches, &sample.prompt)?;
        let parts = model.loss_graph(g, &out, &sup.targets)?;
        data_sum += g.data(parts.data_term)[0];
        if let Some(b) = parts.balance {
            balance_sum += g.data(b)[0];
        }
        let (f, _) = routing_summary(&out.routing);
        for (acc, fm) in load.iter_mut().zip(f) {
            *acc += fm;
        }
        total = Some(match total {
            Some(t) => g.add(t, parts.total)?,
            None => parts.total,
        });
    }
    let n = batch.len() as f64;
    let loss = g.affine(total.expect("batch is non-empty"), 1.0 / n, 0.0)?;
    for fm in &mut load {
        *fm /= n;
    }
    Ok((loss, data_sum / n, balance_sum / n, load))
}

/// Trains the model's trainable subset on the corpus train split.
///
/// Each optimizer step draws one shuffled batch, averages per-window losses
/// in a single graph, clips the global gradient norm and applies Adam.
/// When `config.max_steps` is positive the run lasts exactly that many
/// steps, cycling epochs as needed; otherwise it runs `config.epochs`
/// epochs. A non-finite loss aborts with the offending step and batch. When
/// `out_dir` is given, a metrics CSV and a final checkpoint are written
/// there.
pub fn train(
    model: &mut CaptimeModel,
    corpus: &MultimodalCorpus,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = model.config().clone();
    let mut corpus = corpus.clone();
    corpus.set_splits(cfg.train_frac, cfg.val_frac)?;
    let stride = cfg.effective_stride();
    let train_set = windows(
        &corpus,
        Split::Train,
        cfg.h,
        cfg.patch_len,
        stride,
        vocab,
        cfg.n_s_max,
    )?;
    if train_set.is_empty() {
        return Err(Error::Data(
            "training split yields no windows; the series is too short for the configured lookback"
                .into(),
        ));
    }
    let val_set = windows(
        &corpus,
        Split::Val,
        cfg.h,
        cfg.patch_len,
        stride,
        vocab,
        cfg.n_s_max,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let batch_size = cfg.batch_size.max(1);

    let val_start = evaluate_objective(model, &val_set, &cfg)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut epoch = 0usize;
    'epochs: loop {
        if cfg.max_steps == 0 && epoch >= cfg.epochs {
            break;
        }
        if cfg.max_steps > 0 && step >= cfg.max_steps {
            break;
        }
        order.shuffle(&mut rng);
        let mut at = 0;
        while at < order.len() {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let hi = (at + batch_size).min(order.len());
            let batch: Vec<&TrainSample> = order[at..hi].iter().map(|&i| &train_set[i]).collect();
            at = hi;
            step += 1;

            let mut g = Graph::new();
            let (loss, data, balance, load) = build_batch_loss(model, &batch, &cfg, &mut g)
                .map_err(|e| step_error(step, &batch, e))?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(step_error(
                    step,
                    &batch,
                    Error::Data(format!("loss is {loss_val}")),
                ));
            }
            g.backward(loss)
                .map_err(|e| step_error(step, &batch, e.into()))?;
            let mut grads = g.grads();
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(model, &grads)
                .map_err(|e| step_error(step, &batch, e.into()))?;

            let epoch_done = at >= order.len();
            let budget_done = cfg.max_steps > 0 && step >= cfg.max_steps;
            let val_obj = if epoch_done || budget_done {
                evaluate_objective(model, &val_set, &cfg)?
            } else {
                None
            };
            rows.push(MetricsRow {
                step,
                train_obj: data,
                val_obj,
                balance,
                expert_load: load,
            });
        }
        epoch += 1;
    }
    let val_end = evaluate_objective(model, &val_set, &cfg)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METRICS_FILE), metrics_csv(&rows, cfg.n_experts))?;
        save_checkpoint(model, vocab, step, dir)?;
    }
    Ok(TrainOutcome {
        rows,
        val_start,
        val_end,
        steps: step,
    })
}

/// Checkpoint sidecar: enough to rebuild the model and verify what it was
/// trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Config,
    pub vocab_sha256: String,
    pub step: usize,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Writes `weights.bin`, `manifest.json` and `vocab.txt` into `dir`.
pub fn save_checkpoint(
    model: &CaptimeModel,
    vocab: &Vocabulary,
    step: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = container::dump_params(model);
    container::save(&dir.join(WEIGHTS_FILE), &tensors)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let (trainable, frozen) = partition_parameters(model)?;
    let manifest = Manifest {
        config: model.config().clone(),
        vocab_sha256: vocab.sha256_hex(),
        step,
        trainable,
        frozen,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. Fails on a missing or
/// shape-mismatched tensor, on tensors the model does not know, on a
/// vocabulary that does not match the manifest digest, and on a manifest
/// whose trainable/frozen split disagrees with the assembled model.
pub fn load_checkpoint(dir: &Path) -> Result<(CaptimeModel, Vocabulary, Manifest)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.sha256_hex() != manifest.vocab_sha256 {
        return Err(Error::Checkpoint(format!(
            "vocabulary in {} does not match the manifest digest",
            dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.config.seed);
    let mut model = CaptimeModel::assemble(&manifest.config, vocab.size(), &mut rng)?;
    let tensors = container::load(&dir.join(WEIGHTS_FILE))?;
    let unused = container::load_into(&mut model, &tensors)?;
    if !unused.is_empty() {
        return Err(Error::Checkpoint(format!(
            "weights hold tensors the model does not use: {}",
            unused.join(", ")
        )));
    }
    let (trainable, frozen) = partition_parameters(&model)?;
    if trainable != manifest.trainable || frozen != manifest.frozen {
        return Err(Error::Checkpoint(
            "trainable/frozen split in the manifest does not match the assembled model".into(),
        ));
    }
    Ok((model, vocab, manifest))
}
