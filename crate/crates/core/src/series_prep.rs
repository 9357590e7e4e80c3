//! Windowing, per-instance normalization, and patching of raw series.
//!
//! Channels are processed independently: a multi-channel window normalizes
//! and patches each column on its own, and the stats are kept so forecasts
//! and predicted distributions can be mapped back to the original scale.

use crate::mixture_decoder::PatchDistParams;
use crate::diffnum::DiffError;
use crate::{Error, Result};

/// Smallest allowed per-channel standard deviation. Constant channels are
/// clamped here instead of dividing by zero, and the clamp is flagged.
pub const NORM_EPS: f64 = 1e-5;

/// A lookback window of `h` timesteps over `c` channels, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    h: usize,
    c: usize,
    values: Vec<f64>,
    timestamps: Vec<i64>,
    channel_names: Vec<String>,
}

impl SeriesWindow {
    pub fn new(
        values: Vec<f64>,
        timestamps: Vec<i64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let h = timestamps.len();
        let c = channel_names.len();
        if h == 0 || c == 0 {
            return Err(Error::Length(
                "a series window needs at least one timestep and one channel".into(),
            ));
        }
        if values.len() != h * c {
            return Err(Error::Length(format!(
                "window has {} values, expected {h} x {c} = {}",
                values.len(),
                h * c
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diff(DiffError::Domain {
                op: "series_window",
                value: bad,
            }));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(
                "window timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            h,
            c,
            values,
            timestamps,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.h
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0
    }

    pub fn n_channels(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Copies out one channel as a contiguous series.
    pub fn channel(&self, idx: usize) -> Vec<f64> {
        assert!(idx < self.c, "channel {idx} out of {}", self.c);
        (0..self.h).map(|t| self.values[t * self.c + idx]).collect()
    }
}

/// Per-channel normalization statistics retained for inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    clamped: Vec<bool>,
}

impl NormStats {
    /// Builds stats directly, e.g. for mapping an externally normalized
    /// forecast back. Stds below the clamp floor are rejected.
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Length(format!(
                "{} means for {} stds",
                mean.len(),
                std.len()
            )));
        }
        for &s in &std {
            if !s.is_finite() || s < NORM_EPS {
                return Err(Error::Diff(DiffError::Domain {
                    op: "norm_stats_std",
                    value: s,
                }));
            }
        }
        if let Some(&bad) = mean.iter().find(|m| !m.is_finite()) {
            return Err(Error::Diff(DiffError::Domain {
                op: "norm_stats_mean",
                value: bad,
            }));
        }
        let clamped = vec![false; mean.len()];
        Ok(Self { mean, std, clamped })
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self, channel: usize) -> f64 {
        self.mean[channel]
    }

    pub fn std(&self, channel: usize) -> f64 {
        self.std[channel]
    }

    /// True when the channel was (near-)constant and its std was clamped.
    pub fn is_clamped(&self, channel: usize) -> bool {
        self.clamped[channel]
    }
}

/// Normalizes one contiguous series to zero mean and unit population std.
/// Returns (normalized values, mean, std, clamped) where `clamped` marks a
/// (near-)constant input whose std was raised to `NORM_EPS`.
pub fn normalize_slice(values: &[f64]) -> Result<(Vec<f64>, f64, f64, bool)> {
    if values.len() < 2 {
        return Err(Error::Length(
            "instance normalization needs at least 2 timesteps".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let raw_std = var.sqrt();
    let (std, clamped) = if raw_std < NORM_EPS {
        (NORM_EPS, true)
    } else {
        (raw_std, false)
    };
    let out = values.iter().map(|v| (v - mean) / std).collect();
    Ok((out, mean, std, clamped))
}

/// Normalizes every channel to zero mean and unit population std, returning
/// the transformed window plus the stats needed to undo it. Channels with
/// std below `NORM_EPS` are clamped and flagged rather than rejected.
pub fn instance_normalize(w: &SeriesWindow) -> Result<(SeriesWindow, NormStats)> {
    let mut mean = vec![0.0; w.c];
    let mut std = vec![0.0; w.c];
    let mut clamped = vec![false; w.c];
    let mut columns = Vec::with_capacity(w.c);
    for ch in 0..w.c {
        let (col, m, s, cl) = normalize_slice(&w.channel(ch))?;
        mean[ch] = m;
        std[ch] = s;
        clamped[ch] = cl;
        columns.push(col);
    }
    let mut values = Vec::with_capacity(w.values.len());
    for t in 0..w.h {
        for col in &columns {
            values.push(col[t]);
        }
    }
    let normalized = SeriesWindow {
        h: w.h,
        c: w.c,
        values,
        timestamps: w.timestamps.clone(),
        channel_names: w.channel_names.clone(),
    };
    Ok((normalized, NormStats { mean, std, clamped }))
}

/// Maps normalized values of one channel back to the original scale.
pub fn denormalize(values: &[f64], stats: &NormStats, channel: usize) -> Vec<f64> {
    let m = stats.mean(channel);
    let s = stats.std(channel);
    values.iter().map(|&x| s * x + m).collect()
}

/// Maps a predicted distribution back to the original scale: location and
/// scale transform affinely, the tail weight is untouched.
pub fn denormalize_dist(
    p: &PatchDistParams,
    stats: &NormStats,
    channel: usize,
) -> Result<PatchDistParams> {
    let m = stats.mean(channel);
    let s = stats.std(channel);
    let mu: Vec<f64> = p.mu().iter().map(|&x| s * x + m).collect();
    let sigma: Vec<f64> = p.sigma().iter().map(|&x| s * x).collect();
    PatchDistParams::new(p.n_tokens(), p.patch_len(), mu, sigma, p.nu().to_vec())
}

/// Fixed-length patches of one normalized channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    n_p: usize,
    l_p: usize,
    patches: Vec<f64>,
    origin: usize,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.n_p
    }

    pub fn patch_len(&self) -> usize {
        self.l_p
    }

    /// Source channel index.
    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.l_p..(i + 1) * self.l_p]
    }

    /// All patches, row-major `n_patches x patch_len`.
    pub fn flat(&self) -> &[f64] {
        &self.patches
    }
}

/// Cuts one channel into non-overlapping patches of length `l_p`.
///
/// The tail is padded by replicating the final value up to the next multiple
/// of `l_p`, then one extra all-replica patch is appended, so the count is
/// always `ceil(h / l_p) + 1`. The first `floor(h / l_p)` patches are
/// verbatim slices of the input.
pub fn patchify(channel: &[f64], l_p: usize, origin: usize) -> Result<PatchSet> {
    if channel.is_empty() {
        return Err(Error::Length("cannot patch an empty channel".into()));
    }
    if l_p == 0 {
        return Err(Error::Config("patch length must be at least 1".into()));
    }
    let h = channel.len();
    let n_p = h.div_ceil(l_p) + 1;
    let last = *channel.last().unwrap();
    let mut patches = Vec::with_capacity(n_p * l_p);
    patches.extend_from_slice(channel);
    patches.resize(n_p * l_p, last);
    Ok(PatchSet {
        n_p,
        l_p,
        patches,
        origin,
    })
}
