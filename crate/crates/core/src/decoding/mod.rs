//! Greedy, beam, and Monte-Carlo decoding with the trigram repetition
//! penalty: a candidate completing an already-generated trigram has its
//! log-probability reduced by `alpha` per prior occurrence.

use std::fmt;

use crate::corpus::{FeatureSet, BOS_ID, EOS_ID};
use crate::model::{encode_values, step_values, EncodedImage, ModelParams, ModelResult, StateValues};
use crate::tensor::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
    Sample,
}

/// Decoding settings. Defaults: beam size 2, penalty weight 2.
#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_len: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 2,
            max_len: 114,
            alpha: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeError {
    Config(String),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Config(msg) => write!(f, "decode config: {}", msg),
        }
    }
}

impl std::error::Error for DecodeError {}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(DecodeError::Config("alpha must be >= 0".into()));
        }
        if self.max_len == 0 {
            return Err(DecodeError::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that scores next tokens given a decoding state. The real model
/// implements this; tests drive the search code with hand-set tables.
pub trait NextTokenScorer {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Normalized next-token log-probabilities after consuming `prev_token`.
    fn step(&self, state: &Self::State, prev_token: usize) -> (Self::State, Vec<f64>);
}

/// One decoding hypothesis: generated tokens (BOS excluded, EOS included
/// when emitted) and the accumulated log-probability of the chosen tokens,
/// penalized where the search applies the penalty.
#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: S,
}

/// Subtract `alpha` times the prior-occurrence count of the trigram each
/// candidate would complete. Prefixes shorter than two tokens pass through
/// unchanged, and EOS is never penalized (a hypothesis must stay able to
/// terminate).
pub fn repetition_penalty_adjust(
    logprobs: &[f64],
    prefix: &[usize],
    alpha: f64,
) -> Result<Vec<f64>, DecodeError> {
    if alpha < 0.0 {
        return Err(DecodeError::Config("alpha must be >= 0".into()));
    }
    let mut out = logprobs.to_vec();
    if alpha == 0.0 || prefix.len() < 2 {
        return Ok(out);
    }
    let a = prefix[prefix.len() - 2];
    let b = prefix[prefix.len() - 1];
    let mut counts = vec![0usize; logprobs.len()];
    for j in 0..prefix.len().saturating_sub(2) {
        if prefix[j] == a && prefix[j + 1] == b {
            let w = prefix[j + 2];
            if w < counts.len() {
                counts[w] += 1;
            }
        }
    }
    for (w, c) in counts.iter().enumerate() {
        if *c > 0 && w != EOS_ID {
            out[w] -= *c as f64 * alpha;
        }
    }
    Ok(out)
}

/// Deterministic argmax: ties go to the lowest token id.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Greedy search over penalized log-probabilities. Stops at EOS or max_len.
pub fn greedy_decode<S: NextTokenScorer>(
    scorer: &S,
    cfg: &DecodeConfig,
) -> Result<Hypothesis<S::State>, DecodeError> {
    cfg.validate()?;
    let mut state = scorer.initial_state();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..cfg.max_len {
        let (next_state, logprobs) = scorer.step(&state, prev);
        let adjusted = repetition_penalty_adjust(&logprobs, &tokens, cfg.alpha)?;
        let choice = argmax(&adjusted);
        logprob += adjusted[choice];
        tokens.push(choice);
        state = next_state;
        prev = choice;
        if choice == EOS_ID {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        state,
    })
}

/// Beam search over penalized log-probabilities. Hypotheses that emit EOS
/// retire; the final answer is the highest-scoring finished hypothesis, ties
/// broken toward the earlier EOS and then lexicographically. The greedy
/// rollout competes in the final pick, so the result never scores below the
/// greedy path.
pub fn beam_decode<S: NextTokenScorer>(
    scorer: &S,
    cfg: &DecodeConfig,
) -> Result<Hypothesis<S::State>, DecodeError> {
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: scorer.initial_state(),
    }];
    let mut finished: Vec<Hypothesis<S::State>> = vec![greedy_decode(scorer, cfg)?];

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        // expand every live hypothesis over the whole vocabulary
        let mut candidates: Vec<(f64, usize, usize, S::State)> = Vec::new(); // (score, parent, token, state)
        for (pi, h) in live.iter().enumerate() {
            let prev = *h.tokens.last().unwrap_or(&BOS_ID);
            let (next_state, logprobs) = scorer.step(&h.state, prev);
            let adjusted = repetition_penalty_adjust(&logprobs, &h.tokens, cfg.alpha)?;
            for (w, &lp) in adjusted.iter().enumerate() {
                candidates.push((h.logprob + lp, pi, w, next_state.clone()));
            }
        }
        candidates.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap()
                .then(x.2.cmp(&y.2))
                .then(x.1.cmp(&y.1))
        });

        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for (score, pi, w, state) in candidates.into_iter().take(cfg.beam_size) {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(w);
            let hyp = Hypothesis {
                tokens,
                logprob: score,
                state,
            };
            if w == EOS_ID {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }
    finished.extend(live); // length-capped hypotheses compete too

    finished
        .into_iter()
        .max_by(|a, b| {
            a.logprob
                .partial_cmp(&b.logprob)
                .unwrap()
                .then(b.tokens.len().cmp(&a.tokens.len()))
                .then(b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| DecodeError::Config("beam produced no hypothesis".into()))
}

/// Monte-Carlo sample from the unpenalized next-token distribution,
/// reproducible from the rng state. Stops at EOS or max_len.
pub fn sample_decode<S: NextTokenScorer>(
    scorer: &S,
    cfg: &DecodeConfig,
    rng: &mut RngState,
) -> Result<Hypothesis<S::State>, DecodeError> {
    cfg.validate()?;
    let mut state = scorer.initial_state();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..cfg.max_len {
        let (next_state, logprobs) = scorer.step(&state, prev);
        let u = rng.next_f64();
        let choice = sample_from_logprobs(&logprobs, u);
        logprob += logprobs[choice];
        tokens.push(choice);
        state = next_state;
        prev = choice;
        if choice == EOS_ID {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        logprob,
        state,
    })
}

fn sample_from_logprobs(logprobs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1 // numerical remainder lands on the last token
}

// ── model-backed scorer ─────────────────────────────────────────────────

/// Scorer over a frozen model and one encoded image.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    encoded: EncodedImage,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, features: &FeatureSet) -> ModelResult<Self> {
        Ok(ModelScorer {
            params,
            encoded: encode_values(features, params)?,
        })
    }

    pub fn from_encoded(params: &'a ModelParams, encoded: EncodedImage) -> Self {
        ModelScorer { params, encoded }
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    type State = StateValues;

    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn initial_state(&self) -> StateValues {
        StateValues::zeros(self.params.config.d_model)
    }

    fn step(&self, state: &StateValues, prev_token: usize) -> (StateValues, Vec<f64>) {
        let (next, logits) = step_values(self.params, &self.encoded, state, prev_token)
            .expect("decode step over validated inputs");
        (next, log_softmax(&logits))
    }
}

/// Numerically stable log softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Decode one image with the configured mode. The returned sequence ends
/// with EOS or has exactly max_len tokens.
pub fn generate(
    params: &ModelParams,
    features: &FeatureSet,
    cfg: &DecodeConfig,
) -> ModelResult<Vec<usize>> {
    let scorer = ModelScorer::new(params, features)?;
    let mut effective = cfg.clone();
    effective.max_len = cfg.max_len.min(params.config.max_len);
    let hyp = match cfg.mode {
        DecodeMode::Greedy => greedy_decode(&scorer, &effective),
        DecodeMode::Beam => beam_decode(&scorer, &effective),
        DecodeMode::Sample => {
            let mut rng = RngState::new(cfg.seed).derive(0xDEC0);
            sample_decode(&scorer, &effective, &mut rng)
        }
    }
    .map_err(|e| crate::model::ModelError::Config(e.to_string()))?;
    Ok(hyp.tokens)
}

/// Penalized log-probability of each chosen token along a fixed sequence
/// (alpha 0 replays unpenalized scores).
pub fn replay_logprobs<S: NextTokenScorer>(
    scorer: &S,
    tokens: &[usize],
    alpha: f64,
) -> Result<Vec<f64>, DecodeError> {
    let mut state = scorer.initial_state();
    let mut prev = BOS_ID;
    let mut out = Vec::with_capacity(tokens.len());
    let mut prefix: Vec<usize> = Vec::new();
    for &tok in tokens {
        let (next_state, logprobs) = scorer.step(&state, prev);
        let adjusted = repetition_penalty_adjust(&logprobs, &prefix, alpha)?;
        out.push(adjusted[tok]);
        prefix.push(tok);
        state = next_state;
        prev = tok;
    }
    Ok(out)
}
