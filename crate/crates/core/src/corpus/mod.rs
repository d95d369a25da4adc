//! Text preprocessing, vocabulary, feature-file ingestion, dataset splits,
//! and the synthetic features-to-report task used for desk-scale runs.

mod synthetic;

pub use synthetic::{
    generate_synthetic_dataset, recover_findings, report_text, SyntheticExample,
    SyntheticTaskConfig,
};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::tensor::RngState;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Number of reserved vocabulary slots (PAD, BOS, EOS, UNK).
pub const RESERVED_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusError {
    Io { path: PathBuf, message: String },
    Parse { path: PathBuf, line: usize, message: String },
    TooFewItems { have: usize, need: usize },
    InvalidId { id: usize, vocab_size: usize },
    InvalidConfig(String),
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Io { path, message } => {
                write!(f, "io error on {}: {}", path.display(), message)
            }
            CorpusError::Parse { path, line, message } => {
                write!(f, "{}:{}: {}", path.display(), line, message)
            }
            CorpusError::TooFewItems { have, need } => {
                write!(f, "dataset has {} items, need at least {}", have, need)
            }
            CorpusError::InvalidId { id, vocab_size } => {
                write!(f, "token id {} out of range for vocabulary of {}", id, vocab_size)
            }
            CorpusError::InvalidConfig(msg) => write!(f, "invalid config: {}", msg),
        }
    }
}

impl std::error::Error for CorpusError {}

pub type CorpusResult<T> = Result<T, CorpusError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

// ── tokenization ────────────────────────────────────────────────────────

/// Lowercase, split on whitespace, and break punctuation out into standalone
/// tokens. Deterministic and locale independent; idempotent on its own
/// space-joined output.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Token/id mapping with fixed reserved ids 0=PAD, 1=BOS, 2=EOS, 3=UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Count tokens over the corpus and keep those seen at least `min_count`
    /// times, ordered by (count desc, token asc) so ids are platform stable.
    pub fn build<'a, I>(token_lists: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for list in token_lists {
            for tok in list {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = vec![
            "<PAD>".to_string(),
            "<BOS>".to_string(),
            "<EOS>".to_string(),
            "UNK".to_string(),
        ];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            min_count,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Encode tokens; anything out of vocabulary becomes UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }

    /// Decode ids back to tokens. The UNK id decodes to the literal "UNK".
    pub fn decode(&self, ids: &[usize]) -> CorpusResult<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.id_to_token
                    .get(id)
                    .cloned()
                    .ok_or(CorpusError::InvalidId {
                        id,
                        vocab_size: self.size(),
                    })
            })
            .collect()
    }

    /// Decode, dropping PAD/BOS/EOS, and join with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> CorpusResult<String> {
        let toks = self.decode(ids)?;
        Ok(toks
            .into_iter()
            .zip(ids.iter())
            .filter(|(_, &id)| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|(t, _)| t)
            .collect::<Vec<_>>()
            .join(" "))
    }

    pub fn save(&self, path: &Path) -> CorpusResult<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> CorpusResult<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < RESERVED_TOKENS {
            return Err(parse_err(path, 1, "vocabulary needs the 4 reserved lines"));
        }
        let expected = ["<PAD>", "<BOS>", "<EOS>", "UNK"];
        for (i, want) in expected.iter().enumerate() {
            if id_to_token[i] != *want {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("reserved line must be {:?}, found {:?}", want, id_to_token[i]),
                ));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
            min_count: 0,
        })
    }
}

// ── reports ─────────────────────────────────────────────────────────────

/// One report with its tokenized, EOS-terminated id sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub image_id: String,
    pub text: String,
    pub token_ids: Vec<usize>,
}

impl Report {
    pub fn from_text(image_id: &str, text: &str, vocab: &Vocabulary) -> Report {
        let mut token_ids = vocab.encode(&tokenize(text));
        token_ids.push(EOS_ID);
        Report {
            image_id: image_id.to_string(),
            text: text.to_string(),
            token_ids,
        }
    }

    /// Reference token strings for metric computation (no specials).
    pub fn reference_tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

// ── features ────────────────────────────────────────────────────────────

/// Regional feature matrix of one image: N rows of D finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    pub n_regions: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureSet {
    pub fn new(image_id: &str, n_regions: usize, dim: usize, values: Vec<f64>) -> FeatureSet {
        assert_eq!(values.len(), n_regions * dim);
        FeatureSet {
            image_id: image_id.to_string(),
            n_regions,
            dim,
            values,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Write a feature file: header line `N D`, then N lines of D decimal values.
pub fn save_features(path: &Path, features: &FeatureSet) -> CorpusResult<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", features.n_regions, features.dim));
    for i in 0..features.n_regions {
        let row: Vec<String> = features.row(i).iter().map(|v| format!("{}", v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a feature file back; the image id is the file stem.
pub fn load_features(path: &Path) -> CorpusResult<FeatureSet> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty feature file"))?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, 1, "header must be `N D`"))?;
    let d: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, 1, "header must be `N D`"))?;
    if parts.next().is_some() {
        return Err(parse_err(path, 1, "header must be exactly `N D`"));
    }
    if n == 0 || d == 0 {
        return Err(parse_err(path, 1, "N and D must be positive"));
    }

    let mut values = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > n {
            return Err(parse_err(path, idx + 1, format!("more than {} feature rows", n)));
        }
        let mut count = 0usize;
        for piece in line.split_whitespace() {
            let v: f64 = piece.parse().map_err(|_| {
                parse_err(path, idx + 1, format!("bad float {:?}", piece))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, idx + 1, format!("non-finite value {:?}", piece)));
            }
            values.push(v);
            count += 1;
        }
        if count != d {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {} values, found {}", d, count),
            ));
        }
    }
    if rows != n {
        return Err(parse_err(
            path,
            rows + 1,
            format!("expected {} feature rows, found {}", n, rows),
        ));
    }
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSet {
        image_id,
        n_regions: n,
        dim: d,
        values,
    })
}

// ── report corpus file ──────────────────────────────────────────────────

/// One record per line: `image_id<TAB>report text`.
pub fn save_corpus(path: &Path, records: &[(String, String)]) -> CorpusResult<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for (id, text) in records {
        writeln!(f, "{}\t{}", id, text).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> CorpusResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, report) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, idx + 1, "expected `image_id<TAB>report`"))?;
        records.push((id.to_string(), report.to_string()));
    }
    Ok(records)
}

// ── splits ──────────────────────────────────────────────────────────────

/// Image-id lists of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffle ids by seed and partition 7:1:2 (floor rounding, remainder to
/// train). Requires at least 10 items so every split is populated.
pub fn split_dataset(ids: &[String], seed: u64) -> CorpusResult<Splits> {
    if ids.len() < 10 {
        return Err(CorpusError::TooFewItems {
            have: ids.len(),
            need: 10,
        });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = RngState::new(seed).derive(0x5711);
    rng.shuffle(&mut shuffled);
    let n = shuffled.len();
    let n_val = n / 10;
    let n_test = n * 2 / 10;
    let n_train = n - n_val - n_test;
    let train = shuffled[..n_train].to_vec();
    let val = shuffled[n_train..n_train + n_val].to_vec();
    let test = shuffled[n_train + n_val..].to_vec();
    Ok(Splits { train, val, test })
}

pub fn save_split(path: &Path, ids: &[String]) -> CorpusResult<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_split(path: &Path) -> CorpusResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}
