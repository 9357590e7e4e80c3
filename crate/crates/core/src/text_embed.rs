//! Tokenization and embedding of exogenous text.
//!
//! A small corpus-built vocabulary feeds a frozen embedding table: text is
//! lowercased, segmented on anything non-alphanumeric, mapped to ids, and
//! gathered into rows. The table never receives gradient; the gather happens
//! outside the autodiff graph and its output enters as a constant.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const QUERY_ID: usize = 2;
pub const SEP_ID: usize = 3;

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<query>", "<sep>"];

/// A text record aligned to the series timeline: `[start, end]` inclusive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextRecord {
    pub start: i64,
    pub end: i64,
    pub text: String,
}

/// Token/id bijection with four reserved specials at the front
/// (pad, unk, query, sep).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw tokens in the given order, specials first.
    /// Tokens must already be normalized (lowercase alphanumeric) and unique.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = BTreeMap::new();
        for t in tokens {
            let t: String = t.into();
            if t.is_empty() || t.chars().any(|c| !c.is_alphanumeric() || c.is_uppercase()) {
                return Err(Error::Config(format!(
                    "vocabulary token {t:?} is not normalized lowercase alphanumeric"
                )));
            }
            if token_to_id.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
            token_to_id.insert(t.clone(), id_to_token.len());
            id_to_token.push(t);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Builds the vocabulary from a corpus: tokens appearing at least
    /// `min_freq` times are kept, sorted alphabetically for determinism.
    pub fn from_corpus<'a, I>(texts: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for (tok, _) in segment(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let kept = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(t, _)| t);
        Self::from_tokens(kept)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// One token per line, line number = id, specials as the fixed header.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = content.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocabulary file {} is missing the special-token header",
                path.display()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *want {
                return Err(Error::Config(format!(
                    "vocabulary line {i} must be {want:?}, found {:?}",
                    lines[i]
                )));
            }
        }
        Self::from_tokens(lines[SPECIAL_TOKENS.len()..].iter().map(|s| s.to_string()))
    }

    /// Hash of the serialized vocabulary, used to pin checkpoints to it.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_file_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Lowercase, segment on non-alphanumerics, map through the vocabulary
    /// (unknown tokens become unk), truncate to `max_len`. Empty text maps
    /// to a single pad token. Spans are byte offsets into the original text.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TextPrompt> {
        if max_len == 0 {
            return Err(Error::Config("prompt length limit must be at least 1".into()));
        }
        let mut token_ids = Vec::new();
        let mut spans = Vec::new();
        for (tok, span) in segment(text) {
            if token_ids.len() == max_len {
                break;
            }
            token_ids.push(self.id(&tok).unwrap_or(UNK_ID));
            spans.push(span);
        }
        if token_ids.is_empty() {
            token_ids.push(PAD_ID);
            spans.push((0, 0));
        }
        Ok(TextPrompt { token_ids, spans })
    }

    /// Concatenates every record whose interval overlaps the lookback window
    /// (closed intervals; touching at one instant counts), in chronological
    /// order by start, separator token between records, then truncates.
    pub fn build_prompt(
        &self,
        texts: &[TextRecord],
        window: (i64, i64),
        max_len: usize,
    ) -> Result<TextPrompt> {
        if max_len == 0 {
            return Err(Error::Config("prompt length limit must be at least 1".into()));
        }
        let (w_start, w_end) = window;
        let mut hits: Vec<&TextRecord> = texts
            .iter()
            .filter(|r| r.start <= w_end && r.end >= w_start)
            .collect();
        hits.sort_by_key(|r| r.start);
        let mut token_ids = Vec::new();
        let mut spans = Vec::new();
        'outer: for (i, rec) in hits.iter().enumerate() {
            if i > 0 {
                if token_ids.len() == max_len {
                    break;
                }
                token_ids.push(SEP_ID);
                spans.push((0, 0));
            }
            for (tok, span) in segment(&rec.text) {
                if token_ids.len() == max_len {
                    break 'outer;
                }
                token_ids.push(self.id(&tok).unwrap_or(UNK_ID));
                spans.push(span);
            }
        }
        if token_ids.is_empty() {
            token_ids.push(PAD_ID);
            spans.push((0, 0));
        }
        Ok(TextPrompt { token_ids, spans })
    }
}

/// Splits text into lowercase alphanumeric runs with their byte spans in the
/// original string.
fn segment(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            out.push((text[s..i].to_lowercase(), (s, i)));
        }
    }
    if let Some(s) = run_start {
        out.push((text[s..].to_lowercase(), (s, text.len())));
    }
    out
}

/// A tokenized prompt: ids plus byte spans into the source text.
/// Synthetic tokens (pad, separator) carry the empty span (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrompt {
    token_ids: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

impl TextPrompt {
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Gathers embedding rows for a prompt. `table` is row-major `vocab_size x d`
/// and is treated as frozen: the result is plain data with no graph history.
/// The pad id always maps to the zero row regardless of table contents.
pub fn embed(p: &TextPrompt, table: &[f64], vocab_size: usize, d: usize) -> Result<Vec<f64>> {
    if table.len() != vocab_size * d {
        return Err(Error::Length(format!(
            "embedding table has {} values, expected {vocab_size} x {d}",
            table.len()
        )));
    }
    let mut out = Vec::with_capacity(p.len() * d);
    for &id in p.token_ids() {
        if id >= vocab_size {
            return Err(Error::Config(format!(
                "token id {id} out of range for vocabulary of size {vocab_size}"
            )));
        }
        if id == PAD_ID {
            out.extend(std::iter::repeat(0.0).take(d));
        } else {
            out.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
    }
    Ok(out)
}
