//! Corpus ingestion and the synthetic multimodal benchmark.
//!
//! A corpus is an aligned table of timestamped channels plus interval-tagged
//! text records. Splits are chronological; window extraction never crosses a
//! split boundary, and prompts are built from texts overlapping the lookback
//! interval only, so no future information reaches the model.
//!
//! The synthetic generator produces the benchmark this library is tested
//! on: a seasonal base series where, every segment, a fresh regime (surge,
//! drop or flat) is drawn independently of the past and *announced in text
//! during the preceding segment*. Numbers alone cannot predict the regime;
//! the announcement carries all of it.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffnum::standard_normal;
use crate::text_embed::{TextPrompt, TextRecord, Vocabulary};
use crate::{Error, Result};

/// Aligned multichannel series plus its text records and split fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalCorpus {
    timestamps: Vec<i64>,
    channel_names: Vec<String>,
    /// Row-major `len x n_channels`.
    values: Vec<f64>,
    texts: Vec<TextRecord>,
    train_frac: f64,
    val_frac: f64,
}

/// Chronological corpus regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// The whole corpus, for scoring externally supplied data.
    Full,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Full => "full",
        })
    }
}

/// One supervised example: a lookback, the continuation that immediately
/// follows it, and the prompt assembled from texts overlapping the lookback.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub channel: usize,
    /// Index of the first lookback point in the corpus.
    pub start: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub prompt: TextPrompt,
}

impl MultimodalCorpus {
    pub fn new(
        timestamps: Vec<i64>,
        channel_names: Vec<String>,
        values: Vec<f64>,
        texts: Vec<TextRecord>,
    ) -> Result<Self> {
        if timestamps.is_empty() || channel_names.is_empty() {
            return Err(Error::Data("corpus needs rows and channels".into()));
        }
        if values.len() != timestamps.len() * channel_names.len() {
            return Err(Error::Data(format!(
                "{} values for {} rows x {} channels",
                values.len(),
                timestamps.len(),
                channel_names.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite series value {bad}")));
        }
        for (i, r) in texts.iter().enumerate() {
            if r.end < r.start {
                return Err(Error::Data(format!(
                    "text record {i} ({:?}) has end {} before start {}",
                    truncate_for_display(&r.text),
                    r.end,
                    r.start
                )));
            }
        }
        Ok(Self {
            timestamps,
            channel_names,
            values,
            texts,
            train_frac: 0.7,
            val_frac: 0.1,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn texts(&self) -> &[TextRecord] {
        &self.texts
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channel_names.len() + channel]
    }

    /// All values of one channel in time order.
    pub fn channel_values(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, channel)).collect()
    }

    /// Overrides the default 0.7/0.1 chronological split fractions.
    pub fn set_splits(&mut self, train_frac: f64, val_frac: f64) -> Result<()> {
        if !(train_frac > 0.0) || !(val_frac >= 0.0) || train_frac + val_frac >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions {train_frac}/{val_frac} must leave room for a test region"
            )));
        }
        self.train_frac = train_frac;
        self.val_frac = val_frac;
        Ok(())
    }

    /// Row range `[start, end)` of a split.
    pub fn split_range(&self, split: Split) -> (usize, usize) {
        let n = self.len();
        let train_end = (n as f64 * self.train_frac).floor() as usize;
        let val_end = (n as f64 * (self.train_frac + self.val_frac)).floor() as usize;
        match split {
            Split::Train => (0, train_end),
            Split::Val => (train_end, val_end),
            Split::Test => (val_end, n),
            Split::Full => (0, n),
        }
    }

    /// Texts whose interval overlaps `[lo, hi]` (inclusive on both ends).
    pub fn texts_overlapping(&self, lo: i64, hi: i64) -> Vec<TextRecord> {
        self.texts
            .iter()
            .filter(|r| r.start <= hi && r.end >= lo)
            .cloned()
            .collect()
    }
}

fn truncate_for_display(text: &str) -> String {
    const LIMIT: usize = 40;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let cut: String = text.chars().take(LIMIT).collect();
        format!("{cut}...")
    }
}

/// Supervised windows of one split: lookbacks of `h` values with the `l_p`
/// values that follow, stepped by `stride`, per channel. Windows are clipped
/// to the split so none straddles a boundary.
pub fn windows(
    corpus: &MultimodalCorpus,
    split: Split,
    h: usize,
    l_p: usize,
    stride: usize,
    vocab: &Vocabulary,
    n_s_max: usize,
) -> Result<Vec<TrainSample>> {
    if h == 0 || l_p == 0 || stride == 0 {
        return Err(Error::Config(
            "window length, target length and stride must be positive".into(),
        ));
    }
    let (lo, hi) = corpus.split_range(split);
    let mut out = Vec::new();
    if hi - lo < h + l_p {
        return Ok(out);
    }
    for channel in 0..corpus.n_channels() {
        let mut start = lo;
        while start + h + l_p <= hi {
            let input: Vec<f64> = (start..start + h).map(|r| corpus.value(r, channel)).collect();
            let target: Vec<f64> = (start + h..start + h + l_p)
                .map(|r| corpus.value(r, channel))
                .collect();
            let w = (
                corpus.timestamps()[start],
                corpus.timestamps()[start + h - 1],
            );
            let prompt = vocab.build_prompt(corpus.texts(), w, n_s_max)?;
            out.push(TrainSample {
                channel,
                start,
                input,
                target,
                prompt,
            });
            start += stride;
        }
    }
    Ok(out)
}

// ---- file formats -------------------------------------------------------

/// Reads a series CSV (`timestamp,ch1,...`) and a texts JSONL file
/// (`{"start":..,"end":..,"text":".."}` per line). Missing numeric cells
/// are forward-filled; gaps before the first value are back-filled.
pub fn load_csv(series_path: &Path, texts_path: &Path) -> Result<MultimodalCorpus> {
    let series_text = std::fs::read_to_string(series_path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: series_path.display().to_string(),
        line,
        msg,
    };
    let mut lines = series_text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let mut cols = header.split(',').map(str::trim);
    if cols.next() != Some("timestamp") {
        return Err(parse_err(1, "header must start with `timestamp`".into()));
    }
    let channel_names: Vec<String> = cols.map(String::from).collect();
    if channel_names.is_empty() {
        return Err(parse_err(1, "no channel columns".into()));
    }
    let mut timestamps = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != channel_names.len() + 1 {
            return Err(parse_err(
                lineno,
                format!(
                    "{} fields, expected {}",
                    fields.len(),
                    channel_names.len() + 1
                ),
            ));
        }
        let ts: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad timestamp {:?}", fields[0])))?;
        timestamps.push(ts);
        for f in &fields[1..] {
            if f.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad number {f:?}")))?;
                cells.push(Some(v));
            }
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let n = timestamps.len();
    let c = channel_names.len();
    let mut values = vec![0.0; n * c];
    for ch in 0..c {
        let mut last: Option<f64> = None;
        for row in 0..n {
            if let Some(v) = cells[row * c + ch] {
                last = Some(v);
            }
            if let Some(v) = last {
                values[row * c + ch] = v;
            }
        }
        // Back-fill anything before the first observed value.
        let first = (0..n).find(|&row| cells[row * c + ch].is_some());
        match first {
            None => {
                return Err(Error::Data(format!(
                    "channel {:?} has no values at all",
                    channel_names[ch]
                )))
            }
            Some(first_row) => {
                let v = values[first_row * c + ch];
                for row in 0..first_row {
                    values[row * c + ch] = v;
                }
            }
        }
    }
    let texts = load_texts(texts_path)?;
    MultimodalCorpus::new(timestamps, channel_names, values, texts)
}

fn load_texts(path: &Path) -> Result<Vec<TextRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: TextRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: format!("bad text record: {e}"),
        })?;
        if record.end < record.start {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!(
                    "record {:?} has end {} before start {}",
                    truncate_for_display(&record.text),
                    record.end,
                    record.start
                ),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes the corpus back to the two files `load_csv` reads.
pub fn write_corpus(
    corpus: &MultimodalCorpus,
    series_path: &Path,
    texts_path: &Path,
) -> Result<()> {
    let mut csv = String::from("timestamp");
    for name in corpus.channel_names() {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for row in 0..corpus.len() {
        csv.push_str(&corpus.timestamps()[row].to_string());
        for ch in 0..corpus.n_channels() {
            csv.push(',');
            // Shortest round-tripping decimal form.
            csv.push_str(&corpus.value(row, ch).to_string());
        }
        csv.push('\n');
    }
    std::fs::write(series_path, csv)?;
    let mut jsonl = String::new();
    for record in corpus.texts() {
        jsonl.push_str(&serde_json::to_string(record)?);
        jsonl.push('\n');
    }
    std::fs::write(texts_path, jsonl)?;
    Ok(())
}

// ---- synthetic benchmark ------------------------------------------------

/// Regimes the synthetic texts announce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Surge,
    Drop,
    Flat,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Surge, Regime::Drop, Regime::Flat];

    pub fn word(&self) -> &'static str {
        match self {
            Regime::Surge => "surge",
            Regime::Drop => "drop",
            Regime::Flat => "flat",
        }
    }

    /// Slope direction multiplier.
    pub fn dir(&self) -> f64 {
        match self {
            Regime::Surge => 1.0,
            Regime::Drop => -1.0,
            Regime::Flat => 0.0,
        }
    }
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Total timesteps; must be a whole number of segments.
    pub length: usize,
    /// Seasonal period of the base sinusoid.
    pub period: usize,
    /// Seasonal amplitude.
    pub amp: f64,
    /// Gaussian noise standard deviation.
    pub noise: f64,
    /// Total level change a surge or drop accumulates over one segment.
    pub slope: f64,
    /// Steps per regime segment.
    pub segment_len: usize,
    /// Noise multiplier inside surge and drop segments (1 = homoscedastic).
    pub regime_noise_mult: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            length: 6400,
            period: 8,
            amp: 0.3,
            noise: 0.4,
            slope: 6.0,
            segment_len: 32,
            regime_noise_mult: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || self.length < 2 * self.segment_len {
            return Err(Error::Config(format!(
                "length {} must cover at least two segments of {}",
                self.length, self.segment_len
            )));
        }
        if self.length % self.segment_len != 0 {
            return Err(Error::Config(format!(
                "length {} is not a whole number of {}-step segments",
                self.length, self.segment_len
            )));
        }
        if self.period < 2 {
            return Err(Error::Config("seasonal period must be at least 2".into()));
        }
        if !(self.noise >= 0.0) || !(self.regime_noise_mult > 0.0) {
            return Err(Error::Config(
                "noise must be nonnegative and its regime multiplier positive".into(),
            ));
        }
        Ok(())
    }
}

/// Generates the benchmark corpus and returns the drawn regime per segment
/// (segment 0 is always flat and unannounced).
///
/// Within segment `k` starting at step `b`, the series is
/// `level_k + dir_k * slope * (t - b + 1) / segment_len + amp * sin(2 pi t / period) + noise`,
/// and the level accumulates each segment's full slope. The announcement
/// for segment `k` spans the whole of segment `k-1`, so it is visible to
/// exactly the lookbacks that precede the regime.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MultimodalCorpus, Vec<Regime>)> {
    spec.validate()?;
    let n_seg = spec.length / spec.segment_len;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::with_capacity(n_seg);
    labels.push(Regime::Flat);
    for _ in 1..n_seg {
        labels.push(Regime::ALL[rng.gen_range(0..3)]);
    }
    // Noise drawn after the labels from the same stream: the draws depend
    // only on the seed, never on slope or amplitude, so variants of one
    // seed decompose exactly.
    let noise: Vec<f64> = (0..spec.length).map(|_| standard_normal(&mut rng)).collect();

    let seg = spec.segment_len as f64;
    let mut values = Vec::with_capacity(spec.length);
    let mut level = 0.0;
    for (k, &label) in labels.iter().enumerate() {
        let base = k * spec.segment_len;
        let mult = if label == Regime::Flat {
            1.0
        } else {
            spec.regime_noise_mult
        };
        for i in 0..spec.segment_len {
            let t = base + i;
            let ramp = (i as f64 + 1.0) / seg;
            let seasonal =
                spec.amp * (2.0 * std::f64::consts::PI * t as f64 / spec.period as f64).sin();
            values.push(
                level + label.dir() * spec.slope * ramp + seasonal + mult * spec.noise * noise[t],
            );
        }
        level += label.dir() * spec.slope;
    }

    // The announcement is deliberately the bare regime word: every prompt
    // token is informative, so attention over the prompt is measured on
    // signal rather than template filler.
    let mut texts = Vec::with_capacity(n_seg.saturating_sub(1));
    for (k, &label) in labels.iter().enumerate().skip(1) {
        let start = ((k - 1) * spec.segment_len) as i64;
        let end = (k * spec.segment_len - 1) as i64;
        texts.push(TextRecord {
            start,
            end,
            text: label.word().to_string(),
        });
    }

    let timestamps: Vec<i64> = (0..spec.length as i64).collect();
    let corpus = MultimodalCorpus::new(timestamps, vec!["ch1".into()], values, texts)?;
    Ok((corpus, labels))
}
