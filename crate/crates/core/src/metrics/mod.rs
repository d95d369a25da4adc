//! Corpus-level NLG metrics: BLEU-1..4, ROUGE-L, METEOR (exact + stem
//! stages), and CIDEr-D. The CIDEr scorer doubles as the SCST reward, with
//! document frequencies frozen over a reference corpus.

pub mod stem;

mod meteor;

pub use meteor::meteor_alignment;

use std::collections::BTreeMap;
use std::fmt;

/// One evaluation item: a candidate against one or more references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(image_id: &str, candidate: Vec<String>, references: Vec<Vec<String>>) -> EvalPair {
        EvalPair {
            image_id: image_id.to_string(),
            candidate,
            references,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricError {
    EmptyCorpus,
    /// A pair has no nonempty reference; scoring against nothing is undefined.
    MissingReference { image_id: String },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::EmptyCorpus => write!(f, "metric over an empty corpus"),
            MetricError::MissingReference { image_id } => {
                write!(f, "pair {} has no nonempty reference", image_id)
            }
        }
    }
}

impl std::error::Error for MetricError {}

pub type MetricResult<T> = Result<T, MetricError>;

fn validate(pairs: &[EvalPair]) -> MetricResult<()> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    for p in pairs {
        if !p.references.iter().any(|r| !r.is_empty()) {
            return Err(MetricError::MissingReference {
                image_id: p.image_id.clone(),
            });
        }
    }
    Ok(())
}

/// All scores of one evaluation run, in documented ranges: BLEU, ROUGE-L,
/// and METEOR in [0, 1]; CIDEr in [0, 10].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

impl MetricReport {
    /// Column order follows the evaluation table convention:
    /// CIDEr, ROUGE-L, METEOR, BLEU-1..4.
    pub fn csv_header() -> &'static str {
        "CIDEr,ROUGE-L,METEOR,BLEU-1,BLEU-2,BLEU-3,BLEU-4"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.cider,
            self.rouge_l,
            self.meteor,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3]
        )
    }

    pub fn kv_block(&self) -> String {
        format!(
            "cider={}\nrouge_l={}\nmeteor={}\nbleu1={}\nbleu2={}\nbleu3={}\nbleu4={}\n",
            self.cider,
            self.rouge_l,
            self.meteor,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3]
        )
    }
}

// ── n-grams ─────────────────────────────────────────────────────────────

/// Sliding-window n-gram counts. Sequences shorter than `n` yield an empty
/// table. Keys are ordered so iteration (and float accumulation) is stable.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    assert!(n >= 1, "n-grams need n >= 1");
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus-level BLEU-1..4 with clipped modified precision and the closest-
/// reference brevity penalty. No smoothing: a zero precision at any order
/// zeroes every BLEU-k that includes it.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> MetricResult<Vec<f64>> {
    validate(pairs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for pair in pairs {
        cand_len += pair.candidate.len();
        ref_len += closest_ref_len(pair.candidate.len(), &pair.references);
        for n in 1..=max_n {
            let cand = ngram_counts(&pair.candidate, n);
            let mut clipped = 0usize;
            for (g, &c) in &cand {
                let best_ref = pair
                    .references
                    .iter()
                    .map(|r| count_ngram(r, g))
                    .max()
                    .unwrap_or(0);
                clipped += c.min(best_ref);
            }
            matched[n - 1] += clipped;
            total[n - 1] += cand.values().sum::<usize>();
        }
    }

    if cand_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    for k in 1..=max_n {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=k {
            if matched[n - 1] == 0 || total[n - 1] == 0 {
                zero = true;
                break;
            }
            log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / k as f64).exp() });
    }
    Ok(out)
}

fn count_ngram(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() || gram.is_empty() {
        return 0;
    }
    tokens.windows(gram.len()).filter(|w| *w == gram).count()
}

/// Reference length closest to the candidate length; ties go to the shorter.
fn closest_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            let diff = (l as i64 - cand_len as i64).abs();
            (diff, l)
        })
        .unwrap_or(0)
}

// ── ROUGE-L ─────────────────────────────────────────────────────────────

/// Corpus ROUGE-L: per pair the best-F reference under the LCS-based
/// F-measure with beta = 1.2, averaged over pairs.
pub fn rouge_l(pairs: &[EvalPair]) -> MetricResult<f64> {
    validate(pairs)?;
    const BETA: f64 = 1.2;
    let mut sum = 0.0;
    for pair in pairs {
        let mut best = 0.0f64;
        for r in &pair.references {
            let l = lcs_len(&pair.candidate, r) as f64;
            if l == 0.0 || pair.candidate.is_empty() || r.is_empty() {
                continue;
            }
            let rec = l / r.len() as f64;
            let prec = l / pair.candidate.len() as f64;
            let f = (1.0 + BETA * BETA) * rec * prec / (rec + BETA * BETA * prec);
            best = best.max(f);
        }
        sum += best;
    }
    Ok(sum / pairs.len() as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ── METEOR ──────────────────────────────────────────────────────────────

/// METEOR with exact and Porter-stem stages (no external synonym resources):
/// `F_mean = 10PR / (R + 9P)`, chunk penalty `0.5 (chunks / matches)^3`,
/// best reference per pair, corpus mean over pairs.
pub fn meteor_lite(pairs: &[EvalPair]) -> MetricResult<f64> {
    validate(pairs)?;
    let mut sum = 0.0;
    for pair in pairs {
        let mut best = 0.0f64;
        for r in &pair.references {
            if r.is_empty() {
                continue;
            }
            let align = meteor_alignment(&pair.candidate, r);
            let m = align.matches as f64;
            if m == 0.0 || pair.candidate.is_empty() {
                continue;
            }
            let p = m / pair.candidate.len() as f64;
            let rec = m / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (align.chunks as f64 / m).powi(3);
            best = best.max(f_mean * (1.0 - penalty));
        }
        sum += best;
    }
    Ok(sum / pairs.len() as f64)
}

// ── CIDEr ───────────────────────────────────────────────────────────────

/// Document frequencies for the CIDEr reward, computed once over a reference
/// corpus (one reference set per image) and reusable across candidates.
#[derive(Clone, Debug)]
pub struct CiderIdf {
    num_images: usize,
    doc_freq: [BTreeMap<Vec<String>, usize>; 4],
}

impl CiderIdf {
    pub fn from_references(refs_per_image: &[Vec<Vec<String>>]) -> CiderIdf {
        let mut doc_freq: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
        for refs in refs_per_image {
            for n in 1..=4usize {
                let mut seen: BTreeMap<Vec<String>, ()> = BTreeMap::new();
                for r in refs {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *doc_freq[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        CiderIdf {
            num_images: refs_per_image.len(),
            doc_freq,
        }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    /// `ln(|I| / max(1, df))`.
    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.doc_freq[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.num_images as f64 / df as f64).ln()
    }
}

const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D score of a single candidate against its references under frozen
/// document frequencies: clipped TF-IDF cosine per n, Gaussian length
/// penalty with sigma = 6, averaged over n in 1..4 and scaled by 10.
pub fn cider_pair(candidate: &[String], references: &[Vec<String>], idf: &CiderIdf) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=4usize {
        let cand = ngram_counts(candidate, n);
        let cand_norm = vec_norm(&cand, n, idf);
        let mut ref_sum = 0.0;
        for r in references {
            let rcounts = ngram_counts(r, n);
            let ref_norm = vec_norm(&rcounts, n, idf);
            if cand_norm == 0.0 || ref_norm == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, &c) in &cand {
                if let Some(&rc) = rcounts.get(g) {
                    let w = idf.idf(n, g);
                    // clipped candidate term frequency
                    dot += (c.min(rc) as f64 * w) * (rc as f64 * w);
                }
            }
            let delta = candidate.len() as f64 - r.len() as f64;
            let length_penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            ref_sum += length_penalty * dot / (cand_norm * ref_norm);
        }
        total += ref_sum / references.len() as f64;
    }
    10.0 * total / 4.0
}

fn vec_norm(counts: &BTreeMap<Vec<String>, usize>, n: usize, idf: &CiderIdf) -> f64 {
    counts
        .iter()
        .map(|(g, &c)| {
            let w = c as f64 * idf.idf(n, g);
            w * w
        })
        .sum::<f64>()
        .sqrt()
}

/// Corpus CIDEr: document frequencies from this corpus's own reference sets,
/// then the mean of per-pair scores.
pub fn cider(pairs: &[EvalPair]) -> MetricResult<f64> {
    validate(pairs)?;
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|p| p.references.clone()).collect();
    let idf = CiderIdf::from_references(&refs);
    let sum: f64 = pairs
        .iter()
        .map(|p| cider_pair(&p.candidate, &p.references, &idf))
        .sum();
    Ok(sum / pairs.len() as f64)
}

// ── combined report ─────────────────────────────────────────────────────

/// Compute every metric over one tokenized corpus.
pub fn evaluate(pairs: &[EvalPair]) -> MetricResult<MetricReport> {
    let b = bleu(pairs, 4)?;
    Ok(MetricReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge_l(pairs)?,
        meteor: meteor_lite(pairs)?,
        cider: cider(pairs)?,
    })
}
