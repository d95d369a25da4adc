//! The full report generator: feature projection, x-linear encoder stack,
//! multi-level fusion, an attention-LSTM decoder with input feeding, GLU
//! context, and word prediction.

use std::fmt;

use crate::corpus::FeatureSet;
use crate::tensor::{Param, ParamBuilder, RngState, Tape, Tensor, TensorError, TensorResult};
use crate::xlinear::{
    encode_stack, xlinear_attend, AttentionError, EncoderStackParams, XLinearParams,
};

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    Attention(AttentionError),
    Config(String),
    EmptyFeatures,
    FeatureDimMismatch { expected: usize, found: usize },
    TargetTooLong { len: usize, max_len: usize },
    EmptyTarget,
    BadToken { token: usize, vocab_size: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{}", e),
            ModelError::Attention(e) => write!(f, "{}", e),
            ModelError::Config(msg) => write!(f, "model config: {}", msg),
            ModelError::EmptyFeatures => write!(f, "feature matrix has no regions"),
            ModelError::FeatureDimMismatch { expected, found } => {
                write!(f, "feature dim {} does not match model input dim {}", found, expected)
            }
            ModelError::TargetTooLong { len, max_len } => {
                write!(f, "target of {} tokens exceeds max_len {}", len, max_len)
            }
            ModelError::EmptyTarget => write!(f, "empty target sequence"),
            ModelError::BadToken { token, vocab_size } => {
                write!(f, "token {} out of range for vocabulary of {}", token, vocab_size)
            }
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<AttentionError> for ModelError {
    fn from(e: AttentionError) -> Self {
        ModelError::Attention(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Model dimensions. Defaults: 1024-wide embeddings and hidden state, four
/// encoder levels, generation capped at 114 tokens over dual-view 4096-dim
/// inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub stack_levels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub feature_dim_in: usize,
    pub n_regions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 1024,
            stack_levels: 4,
            vocab_size: 776,
            max_len: 114,
            feature_dim_in: 4096,
            n_regions: 196,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.d_model == 0
            || self.stack_levels == 0
            || self.vocab_size == 0
            || self.feature_dim_in == 0
            || self.n_regions == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(
                "d_model must be even (the GLU halves the context width)".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(ModelError::Config("max_len must be at least 2".into()));
        }
        if self.vocab_size <= crate::corpus::UNK_ID {
            return Err(ModelError::Config(
                "vocab_size must cover the reserved token ids".into(),
            ));
        }
        Ok(())
    }
}

/// LSTM gate weights over the concatenated `[f_tilde, embedding, context,
/// hidden]` input (width 4 d_model).
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_input: Param,
    pub w_forget: Param,
    pub w_output: Param,
    pub w_cell: Param,
    pub b_input: Param,
    pub b_forget: Param,
    pub b_output: Param,
    pub b_cell: Param,
}

impl LstmParams {
    fn init(d: usize, builder: &mut ParamBuilder) -> TensorResult<Self> {
        let gate_in = 4 * d;
        Ok(LstmParams {
            w_input: builder.xavier(&[d, gate_in])?,
            w_forget: builder.xavier(&[d, gate_in])?,
            w_output: builder.xavier(&[d, gate_in])?,
            w_cell: builder.xavier(&[d, gate_in])?,
            b_input: builder.zeros(&[d])?,
            b_forget: builder.zeros(&[d])?,
            b_output: builder.zeros(&[d])?,
            b_cell: builder.zeros(&[d])?,
        })
    }

    fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_input,
            &self.w_forget,
            &self.w_output,
            &self.w_cell,
            &self.b_input,
            &self.b_forget,
            &self.b_output,
            &self.b_cell,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_input,
            &mut self.w_forget,
            &mut self.w_output,
            &mut self.w_cell,
            &mut self.b_input,
            &mut self.b_forget,
            &mut self.b_output,
            &mut self.b_cell,
        ]
    }
}

/// Every weight of the generator.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_projection: Param, // d x feature_dim_in
    pub encoder: EncoderStackParams,
    pub fuse: Param,      // d x (M+1)d, multi-level feature fusion
    pub embedding: Param, // V x d
    pub lstm: LstmParams,
    pub dec_attn: XLinearParams, // cross-modal attention block
    pub residual_proj: Param,    // d x d, pre-GLU projection
    pub context_proj: Param,     // d x d/2, post-GLU projection
    pub output_proj: Param,      // V x d
    pub output_bias: Param,      // V
}

/// Build a fresh model, deterministically from the seed: xavier weights,
/// zero biases, unit layer-norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> ModelResult<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let mut b = ParamBuilder::new(RngState::new(seed));
    Ok(ModelParams {
        input_projection: b.xavier(&[d, config.feature_dim_in])?,
        encoder: EncoderStackParams::init(d, d, config.stack_levels, &mut b)?,
        fuse: b.xavier(&[d, (config.stack_levels + 1) * d])?,
        embedding: b.xavier(&[config.vocab_size, d])?,
        lstm: LstmParams::init(d, &mut b)?,
        dec_attn: XLinearParams::init(d, d, &mut b)?,
        residual_proj: b.xavier(&[d, d])?,
        context_proj: b.xavier(&[d, d / 2])?,
        output_proj: b.xavier(&[config.vocab_size, d])?,
        output_bias: b.zeros(&[config.vocab_size])?,
        config: config.clone(),
    })
}

impl ModelParams {
    /// Flat parameter list in id order. The optimizer, checkpoints, and
    /// finite-difference checks all iterate this.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.input_projection];
        out.extend(self.encoder.params());
        out.push(&self.fuse);
        out.push(&self.embedding);
        out.extend(self.lstm.params());
        out.extend(self.dec_attn.params());
        out.push(&self.residual_proj);
        out.push(&self.context_proj);
        out.push(&self.output_proj);
        out.push(&self.output_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.input_projection];
        out.extend(self.encoder.params_mut());
        out.push(&mut self.fuse);
        out.push(&mut self.embedding);
        out.extend(self.lstm.params_mut());
        out.extend(self.dec_attn.params_mut());
        out.push(&mut self.residual_proj);
        out.push(&mut self.context_proj);
        out.push(&mut self.output_proj);
        out.push(&mut self.output_bias);
        out
    }

    /// Stable names for the checkpoint format, aligned with `params()`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["input_projection".to_string()];
        for level in 0..self.encoder.levels() {
            for field in ["w_k", "w_q_k", "w_v", "w_q_v", "w_x_k", "w_s", "w_e"] {
                names.push(format!("encoder.{}.{}", level, field));
            }
            for field in [
                "w_n_k",
                "w_n_v",
                "key_ln_gain",
                "key_ln_bias",
                "val_ln_gain",
                "val_ln_bias",
            ] {
                names.push(format!("encoder.{}.{}", level, field));
            }
        }
        names.push("fuse".to_string());
        names.push("embedding".to_string());
        for field in [
            "w_input", "w_forget", "w_output", "w_cell", "b_input", "b_forget", "b_output",
            "b_cell",
        ] {
            names.push(format!("lstm.{}", field));
        }
        for field in ["w_k", "w_q_k", "w_v", "w_q_v", "w_x_k", "w_s", "w_e"] {
            names.push(format!("dec_attn.{}", field));
        }
        names.push("residual_proj".to_string());
        names.push("context_proj".to_string());
        names.push("output_proj".to_string());
        names.push("output_bias".to_string());
        names
    }

    /// Total scalar parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Per-step decoder state as tape tensors (training path).
#[derive(Clone, Copy)]
pub struct DecoderState {
    pub hidden: Tensor,
    pub cell: Tensor,
    pub context: Tensor,
}

impl DecoderState {
    pub fn zeros(tape: &Tape, d: usize) -> TensorResult<DecoderState> {
        Ok(DecoderState {
            hidden: tape.constant(&[d], vec![0.0; d])?,
            cell: tape.constant(&[d], vec![0.0; d])?,
            context: tape.constant(&[d], vec![0.0; d])?,
        })
    }
}

/// Decoder state as plain buffers, for decode loops that rebuild a tape per
/// step.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub context: Vec<f64>,
}

impl StateValues {
    pub fn zeros(d: usize) -> StateValues {
        StateValues {
            hidden: vec![0.0; d],
            cell: vec![0.0; d],
            context: vec![0.0; d],
        }
    }

    pub fn bind(&self, tape: &Tape) -> TensorResult<DecoderState> {
        let d = self.hidden.len();
        Ok(DecoderState {
            hidden: tape.constant(&[d], self.hidden.clone())?,
            cell: tape.constant(&[d], self.cell.clone())?,
            context: tape.constant(&[d], self.context.clone())?,
        })
    }
}

/// Encoder output held as plain buffers so one encode can serve many decode
/// steps across tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub f_tilde: Vec<f64>,
    pub attended: Vec<f64>,
    pub n_regions: usize,
    pub d: usize,
}

impl EncodedImage {
    pub fn bind(&self, tape: &Tape) -> TensorResult<(Tensor, Tensor)> {
        let f = tape.constant(&[self.d], self.f_tilde.clone())?;
        let a = tape.constant(&[self.n_regions, self.d], self.attended.clone())?;
        Ok((f, a))
    }
}

/// Project raw region features, pool the global feature, run the encoder
/// stack, and fuse the global feature with every level's attended feature.
/// Returns the fused conditioning vector and the final attended matrix the
/// decoder attends over.
pub fn encode(
    tape: &Tape,
    features: &FeatureSet,
    params: &ModelParams,
) -> ModelResult<(Tensor, Tensor)> {
    if features.n_regions == 0 {
        return Err(ModelError::EmptyFeatures);
    }
    if features.dim != params.config.feature_dim_in {
        return Err(ModelError::FeatureDimMismatch {
            expected: params.config.feature_dim_in,
            found: features.dim,
        });
    }
    let raw = tape.constant(&[features.n_regions, features.dim], features.values.clone())?;
    let w_in = tape.param(&params.input_projection);
    let projected = tape.matmul(raw, tape.transpose(w_in)?)?; // N x d
    let f_global = tape.mean_axis(projected, 0)?; // d
    let set = encode_stack(tape, f_global, projected, &params.encoder)?;

    let mut parts = vec![f_global];
    parts.extend(set.f_hat_per_level.iter().copied());
    let stacked = tape.concat(&parts, 0)?; // (M+1) d
    let fuse = tape.param(&params.fuse);
    let f_tilde = tape.matmul(fuse, stacked)?; // d
    Ok((f_tilde, set.final_keys))
}

/// Run [`encode`] on a private tape and keep only the values.
pub fn encode_values(features: &FeatureSet, params: &ModelParams) -> ModelResult<EncodedImage> {
    let tape = Tape::new();
    let (f_tilde, attended) = encode(&tape, features, params)?;
    let shape = tape.shape(attended);
    Ok(EncodedImage {
        f_tilde: tape.value(f_tilde),
        attended: tape.value(attended),
        n_regions: shape[0],
        d: shape[1],
    })
}

/// One decoder step: LSTM over `[f_tilde, embed(token), context, hidden]`,
/// cross-modal x-linear attention with the new hidden state as query, GLU
/// context update, and vocabulary logits.
pub fn decoder_step(
    tape: &Tape,
    f_tilde: Tensor,
    token: usize,
    state: &DecoderState,
    attended: Tensor,
    params: &ModelParams,
) -> ModelResult<(DecoderState, Tensor)> {
    let v = params.config.vocab_size;
    if token >= v {
        return Err(ModelError::BadToken {
            token,
            vocab_size: v,
        });
    }
    let d = params.config.d_model;

    let table = tape.param(&params.embedding);
    let emb = tape.reshape(tape.lookup_rows(table, &[token])?, &[d])?;
    let gate_in = tape.concat(&[f_tilde, emb, state.context, state.hidden], 0)?; // 4d

    let gate = |w: &Param, b: &Param| -> TensorResult<Tensor> {
        let pre = tape.matmul(tape.param(w), gate_in)?;
        tape.add(pre, tape.param(b))
    };
    let input_gate = tape.sigmoid(gate(&params.lstm.w_input, &params.lstm.b_input)?);
    let forget_gate = tape.sigmoid(gate(&params.lstm.w_forget, &params.lstm.b_forget)?);
    let output_gate = tape.sigmoid(gate(&params.lstm.w_output, &params.lstm.b_output)?);
    let candidate = tape.tanh(gate(&params.lstm.w_cell, &params.lstm.b_cell)?);

    let kept = tape.hadamard(forget_gate, state.cell)?;
    let written = tape.hadamard(input_gate, candidate)?;
    let cell = tape.add(kept, written)?;
    let hidden = tape.hadamard(output_gate, tape.tanh(cell))?;

    let attended_feat = xlinear_attend(tape, attended, attended, hidden, &params.dec_attn)?;

    let mixed = tape.add(hidden, attended_feat)?;
    let w_l = tape.param(&params.residual_proj);
    let inner = tape.add(hidden, tape.matmul(w_l, mixed)?)?;
    let gated = tape.glu(inner)?; // d/2
    let w_c = tape.param(&params.context_proj);
    let context = tape.matmul(w_c, gated)?; // d

    let w_out = tape.param(&params.output_proj);
    let logits = tape.add(tape.matmul(w_out, context)?, tape.param(&params.output_bias))?;

    Ok((
        DecoderState {
            hidden,
            cell,
            context,
        },
        logits,
    ))
}

/// Decode one step outside any training tape, carrying state as values.
pub fn step_values(
    params: &ModelParams,
    encoded: &EncodedImage,
    state: &StateValues,
    token: usize,
) -> ModelResult<(StateValues, Vec<f64>)> {
    let tape = Tape::new();
    let (f_tilde, attended) = encoded.bind(&tape)?;
    let bound = state.bind(&tape)?;
    let (next, logits) = decoder_step(&tape, f_tilde, token, &bound, attended, params)?;
    Ok((
        StateValues {
            hidden: tape.value(next.hidden),
            cell: tape.value(next.cell),
            context: tape.value(next.context),
        },
        tape.value(logits),
    ))
}

/// Teacher-forced pass over a gold sequence: feed BOS then the gold prefix,
/// return `log p(target_t)` per step as differentiable scalars.
pub fn teacher_forced_logprobs(
    tape: &Tape,
    features: &FeatureSet,
    targets: &[usize],
    params: &ModelParams,
) -> ModelResult<Vec<Tensor>> {
    if targets.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    if targets.len() > params.config.max_len {
        return Err(ModelError::TargetTooLong {
            len: targets.len(),
            max_len: params.config.max_len,
        });
    }
    let (f_tilde, attended) = encode(tape, features, params)?;
    let mut state = DecoderState::zeros(tape, params.config.d_model)?;
    let mut prev = crate::corpus::BOS_ID;
    let mut logprobs = Vec::with_capacity(targets.len());
    for &target in targets {
        let (next, logits) = decoder_step(tape, f_tilde, prev, &state, attended, params)?;
        let nll = tape.cross_entropy(logits, target)?;
        logprobs.push(tape.scale(nll, -1.0));
        state = next;
        prev = target;
    }
    Ok(logprobs)
}

/// Total sequence log-probability: the sum of per-step teacher-forced
/// log-probabilities, as one differentiable scalar.
pub fn sequence_logprob(
    tape: &Tape,
    features: &FeatureSet,
    tokens: &[usize],
    params: &ModelParams,
) -> ModelResult<Tensor> {
    let steps = teacher_forced_logprobs(tape, features, tokens, params)?;
    let mut total = steps[0];
    for t in &steps[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}
