//! Optimization: Adam with bias correction, the Noam / cosine-annealing /
//! plateau learning-rate schedules, teacher-forced cross-entropy epochs, and
//! self-critical sequence training with a CIDEr reward against the greedy
//! baseline.

use std::fmt;

use crate::corpus::{FeatureSet, Report, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::decoding::{greedy_decode, sample_decode, DecodeConfig, DecodeMode, ModelScorer};
use crate::metrics::{cider_pair, CiderIdf};
use crate::model::{sequence_logprob, ModelError, ModelParams};
use crate::tensor::{GradStore, RngState, Tape, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    Tensor(TensorError),
    Config(String),
    EmptyCorpus,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{}", e),
            TrainError::Tensor(e) => write!(f, "{}", e),
            TrainError::Config(msg) => write!(f, "train config: {}", msg),
            TrainError::EmptyCorpus => write!(f, "training corpus is empty"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

// ── Adam ────────────────────────────────────────────────────────────────

/// Per-parameter first/second moment buffers with the usual constants
/// (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> AdamState {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. A parameter whose gradient is absent or
/// identically zero is left untouched, moments included, so a zero-gradient
/// step is the identity.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
) -> TrainResult<()> {
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - state.beta1.powf(t);
    let bias2 = 1.0 - state.beta2.powf(t);
    for (slot, p) in model.params_mut().into_iter().enumerate() {
        let g = match grads.get(p.id) {
            Some(g) if g.iter().any(|&x| x != 0.0) => g,
            _ => continue,
        };
        if g.len() != p.values.len() {
            return Err(TrainError::Config(format!(
                "gradient length {} does not match parameter length {}",
                g.len(),
                p.values.len()
            )));
        }
        let m = &mut state.first[slot];
        let v = &mut state.second[slot];
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ── schedules ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Noam,
    Cosine,
    Plateau,
    Constant,
}

/// Learning-rate schedule settings. Defaults: Noam warmup of 10,000 steps
/// at base 1e-4 for pretraining; cosine annealing with a 15-epoch period,
/// base 1e-5, and floor 4e-8 for the reinforcement stage; plateau decay by
/// 0.8 after 3 stagnant epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub period_epochs: usize,
    pub min_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl ScheduleConfig {
    pub fn pretrain_default() -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::Noam,
            base_lr: 1e-4,
            warmup_steps: 10_000,
            period_epochs: 15,
            min_lr: 4e-8,
            plateau_factor: 0.8,
            plateau_patience: 3,
        }
    }

    pub fn rl_default() -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            base_lr: 1e-5,
            warmup_steps: 10_000,
            period_epochs: 15,
            min_lr: 4e-8,
            plateau_factor: 0.8,
            plateau_patience: 3,
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        if self.base_lr <= 0.0 {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        if matches!(self.kind, ScheduleKind::Noam) && self.warmup_steps == 0 {
            return Err(TrainError::Config("noam needs warmup_steps >= 1".into()));
        }
        if matches!(self.kind, ScheduleKind::Cosine) && self.period_epochs == 0 {
            return Err(TrainError::Config("cosine needs period_epochs >= 1".into()));
        }
        Ok(())
    }
}

/// Noam schedule normalized to peak at `base_lr` when `step == warmup`:
/// `base_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn noam_lr(step: usize, cfg: &ScheduleConfig) -> f64 {
    assert!(step >= 1, "noam_lr is defined for step >= 1");
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.base_lr * (s / w).min((w / s).sqrt())
}

/// Cosine annealing with warm restarts every `period_epochs`:
/// `min + 0.5 (base - min)(1 + cos(pi (epoch mod T) / T))`.
pub fn cosine_annealing_lr(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let t = cfg.period_epochs;
    let phase = (epoch % t) as f64 / t as f64;
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Replay a monitored-metric history and apply one `plateau_factor`
/// reduction per completed stagnation window (no strict improvement for
/// `plateau_patience` consecutive epochs). Returns the adjusted rate,
/// floored at `min_lr`.
pub fn plateau_lr(history: &[f64], cfg: &ScheduleConfig, current_lr: f64) -> f64 {
    let mut state = PlateauState::new();
    let mut reductions = 0usize;
    for &metric in history {
        if state.observe(metric, cfg.plateau_patience) {
            reductions += 1;
        }
    }
    (current_lr * cfg.plateau_factor.powi(reductions as i32)).max(cfg.min_lr)
}

/// Stateful plateau tracker for a live training loop.
#[derive(Clone, Debug, Default)]
pub struct PlateauState {
    best: Option<f64>,
    stale: usize,
}

impl PlateauState {
    pub fn new() -> PlateauState {
        PlateauState::default()
    }

    /// Feed one epoch's monitored value; true means "reduce the rate now".
    pub fn observe(&mut self, metric: f64, patience: usize) -> bool {
        match self.best {
            None => {
                self.best = Some(metric);
                false
            }
            Some(best) if metric > best => {
                self.best = Some(metric);
                self.stale = 0;
                false
            }
            Some(_) => {
                self.stale += 1;
                if self.stale >= patience {
                    self.stale = 0;
                    true
                } else {
                    false
                }
            }
        }
    }
}

// ── cross-entropy pretraining ───────────────────────────────────────────

/// Epoch/batch-level settings. Pretraining defaults to 60 epochs with
/// batch size 8; the reinforcement stage uses batch size 2.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub reward: RewardKind,
}

/// SCST reward metric. CIDEr is the only reward wired up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    Cider,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            seed: 0,
            grad_clip: 5.0,
            reward: RewardKind::Cider,
        }
    }
}

/// One pretraining curve row: `epoch,step,lr,loss`.
#[derive(Clone, Debug, PartialEq)]
pub struct XentRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl XentRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.lr, self.loss)
    }
}

fn clip_grads(grads: &mut GradStore, clip: f64) {
    if clip > 0.0 {
        let norm = grads.l2_norm();
        if norm > clip {
            grads.scale(clip / norm);
        }
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed).derive(0xE90C).derive(epoch as u64);
    rng.shuffle(&mut order);
    order
}

fn target_ids(report: &Report) -> Vec<usize> {
    report
        .token_ids
        .iter()
        .copied()
        .filter(|&id| id != PAD_ID && id != BOS_ID)
        .collect()
}

/// One epoch of teacher-forced training: seeded shuffle, token-mean
/// cross-entropy per batch, gradient clipping, Adam with the Noam rate by
/// global step. Returns the epoch mean loss and one curve row per batch.
pub fn train_xent_epoch(
    model: &mut ModelParams,
    items: &[(FeatureSet, Report)],
    cfg: &TrainConfig,
    schedule: &ScheduleConfig,
    adam: &mut AdamState,
    epoch: usize,
    global_step: &mut usize,
) -> TrainResult<(f64, Vec<XentRow>)> {
    if items.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    schedule.validate()?;
    let order = shuffled_indices(items.len(), cfg.seed, epoch);
    let mut rows = Vec::new();
    let mut epoch_ce = 0.0;
    let mut epoch_tokens = 0usize;

    for batch in order.chunks(cfg.batch_size.max(1)) {
        let total_tokens: usize = batch.iter().map(|&i| target_ids(&items[i].1).len()).sum();
        if total_tokens == 0 {
            continue;
        }
        let mut grads = GradStore::new();
        let mut batch_ce = 0.0;
        for &i in batch {
            let (features, report) = &items[i];
            let targets = target_ids(report);
            let tape = Tape::new();
            let logprob = sequence_logprob(&tape, features, &targets, model)?;
            batch_ce += -tape.scalar(logprob);
            // d(mean token CE)/dtheta = -d(logprob)/dtheta / total_tokens
            let loss = tape.scale(logprob, -1.0 / total_tokens as f64);
            tape.backward(loss)?;
            grads.merge(&tape.param_grads());
        }
        clip_grads(&mut grads, cfg.grad_clip);
        *global_step += 1;
        let lr = match schedule.kind {
            ScheduleKind::Noam => noam_lr(*global_step, schedule),
            ScheduleKind::Constant => schedule.base_lr,
            ScheduleKind::Cosine => cosine_annealing_lr(epoch, schedule),
            ScheduleKind::Plateau => schedule.base_lr,
        };
        adam_step(model, &grads, adam, lr)?;
        rows.push(XentRow {
            epoch,
            step: *global_step,
            lr,
            loss: batch_ce / total_tokens as f64,
        });
        epoch_ce += batch_ce;
        epoch_tokens += total_tokens;
    }
    Ok((epoch_ce / epoch_tokens.max(1) as f64, rows))
}

// ── SCST ────────────────────────────────────────────────────────────────

/// Decode-side settings of the SCST inner loop.
#[derive(Clone, Debug)]
pub struct ScstConfig {
    pub alpha: f64,
    pub max_len: usize,
}

/// Everything one SCST sample produced: rewards, the advantage, the loss
/// value, and the policy gradient (empty when the advantage is zero).
#[derive(Clone, Debug)]
pub struct ScstOutcome {
    pub loss: f64,
    pub r_sample: f64,
    pub r_greedy: f64,
    pub advantage: f64,
    pub grads: GradStore,
    pub sampled: Vec<usize>,
    pub greedy: Vec<usize>,
}

/// Metric-space token strings of a decoded id sequence (specials dropped).
pub fn decoded_tokens(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
        .map(|&id| {
            vocab
                .decode(&[id])
                .map(|mut v| v.remove(0))
                .unwrap_or_else(|_| "UNK".to_string())
        })
        .collect()
}

/// `-advantage * log p(tokens)` with the advantage held constant: the loss
/// value and its gradient with respect to every parameter.
pub fn policy_gradient(
    model: &ModelParams,
    features: &FeatureSet,
    tokens: &[usize],
    advantage: f64,
) -> TrainResult<(f64, GradStore)> {
    let tape = Tape::new();
    let logprob = sequence_logprob(&tape, features, tokens, model)?;
    let loss = tape.scale(logprob, -advantage);
    tape.backward(loss)?;
    Ok((tape.scalar(loss), tape.param_grads()))
}

/// One SCST term: Monte-Carlo sample (no penalty), greedy baseline (with
/// penalty), CIDEr rewards under frozen document frequencies, and the
/// advantage-weighted policy gradient. A zero advantage short-circuits to a
/// zero loss and no gradient.
pub fn scst_loss(
    model: &ModelParams,
    features: &FeatureSet,
    references: &[Vec<String>],
    cfg: &ScstConfig,
    idf: &CiderIdf,
    vocab: &Vocabulary,
    rng: &mut RngState,
) -> TrainResult<ScstOutcome> {
    let scorer = ModelScorer::new(model, features)?;
    let max_len = cfg.max_len.min(model.config.max_len);
    let sample_cfg = DecodeConfig {
        mode: DecodeMode::Sample,
        beam_size: 1,
        max_len,
        alpha: 0.0,
        seed: 0,
    };
    let greedy_cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        beam_size: 1,
        max_len,
        alpha: cfg.alpha,
        seed: 0,
    };
    let sampled = sample_decode(&scorer, &sample_cfg, rng)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let greedy = greedy_decode(&scorer, &greedy_cfg)
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let r_sample = cider_pair(&decoded_tokens(&sampled.tokens, vocab), references, idf);
    let r_greedy = cider_pair(&decoded_tokens(&greedy.tokens, vocab), references, idf);
    let advantage = r_sample - r_greedy;

    let (loss, grads) = if advantage == 0.0 || sampled.tokens.is_empty() {
        (0.0, GradStore::new())
    } else {
        policy_gradient(model, features, &sampled.tokens, advantage)?
    };
    Ok(ScstOutcome {
        loss,
        r_sample,
        r_greedy,
        advantage,
        grads,
        sampled: sampled.tokens,
        greedy: greedy.tokens,
    })
}

/// One reinforcement curve row: `epoch,lr,r_greedy,r_sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstRow {
    pub epoch: usize,
    pub lr: f64,
    pub r_greedy: f64,
    pub r_sample: f64,
}

impl ScstRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.lr, self.r_greedy, self.r_sample)
    }
}

/// One SCST epoch at a fixed learning rate: shuffled batches, per-item
/// scst_loss, batch-mean gradients, clipping, Adam. Returns mean sampled
/// and greedy rewards as the epoch's curve row.
#[allow(clippy::too_many_arguments)]
pub fn train_scst_epoch(
    model: &mut ModelParams,
    items: &[(FeatureSet, Report)],
    cfg: &TrainConfig,
    scst_cfg: &ScstConfig,
    idf: &CiderIdf,
    vocab: &Vocabulary,
    adam: &mut AdamState,
    epoch: usize,
    lr: f64,
) -> TrainResult<ScstRow> {
    if items.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let order = shuffled_indices(items.len(), cfg.seed, epoch);
    let mut sum_sample = 0.0;
    let mut sum_greedy = 0.0;
    for batch in order.chunks(cfg.batch_size.max(1)) {
        let mut grads = GradStore::new();
        for &i in batch {
            let (features, report) = &items[i];
            let references = vec![report.reference_tokens()];
            let mut rng = RngState::new(cfg.seed)
                .derive(0x5C57)
                .derive(epoch as u64)
                .derive(i as u64);
            let outcome = scst_loss(model, features, &references, scst_cfg, idf, vocab, &mut rng)?;
            sum_sample += outcome.r_sample;
            sum_greedy += outcome.r_greedy;
            grads.merge(&outcome.grads);
        }
        grads.scale(1.0 / batch.len() as f64);
        clip_grads(&mut grads, cfg.grad_clip);
        adam_step(model, &grads, adam, lr)?;
    }
    Ok(ScstRow {
        epoch,
        lr,
        r_greedy: sum_greedy / items.len() as f64,
        r_sample: sum_sample / items.len() as f64,
    })
}

/// Document frequencies for the SCST reward, frozen over the training
/// references once at the start of the reinforcement stage.
pub fn reward_idf(items: &[(FeatureSet, Report)]) -> CiderIdf {
    let refs: Vec<Vec<Vec<String>>> = items
        .iter()
        .map(|(_, r)| vec![r.reference_tokens()])
        .collect();
    CiderIdf::from_references(&refs)
}
