//! X-linear attention: bilinear query-key/query-value pooling with joint
//! spatial and channel-wise attention, plus the residual/layer-norm stacking
//! that lifts it to higher-order feature interactions.

use std::fmt;

use crate::tensor::{Param, ParamBuilder, Tape, Tensor, TensorError, TensorResult};

/// Errors specific to attention over region sets.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionError {
    /// The region set is empty; attention over zero items is undefined.
    EmptyRegions,
    Tensor(TensorError),
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionError::EmptyRegions => write!(f, "attention over an empty region set"),
            AttentionError::Tensor(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for AttentionError {}

impl From<TensorError> for AttentionError {
    fn from(e: TensorError) -> Self {
        AttentionError::Tensor(e)
    }
}

pub type AttentionResult<T> = Result<T, AttentionError>;

/// Which side of the bilinear pooling is being embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolSide {
    Key,
    Value,
}

/// Weights of one x-linear attention block.
///
/// `d` is the feature dimension of queries, keys, and values; `d_b` is the
/// bilinear embedding dimension of the spatial/channel branch.
#[derive(Clone, Debug)]
pub struct XLinearParams {
    pub w_k: Param,   // d x d, key embedding
    pub w_q_k: Param, // d x d, query embedding on the key side
    pub w_v: Param,   // d x d, value embedding
    pub w_q_v: Param, // d x d, query embedding on the value side
    pub w_x_k: Param, // d_b x d, joint representation embedding
    pub w_s: Param,   // 1 x d_b, spatial score row
    pub w_e: Param,   // d x d_b, excitation projection
}

impl XLinearParams {
    pub fn init(d: usize, d_b: usize, builder: &mut ParamBuilder) -> TensorResult<Self> {
        Ok(XLinearParams {
            w_k: builder.xavier(&[d, d])?,
            w_q_k: builder.xavier(&[d, d])?,
            w_v: builder.xavier(&[d, d])?,
            w_q_v: builder.xavier(&[d, d])?,
            w_x_k: builder.xavier(&[d_b, d])?,
            w_s: builder.xavier(&[1, d_b])?,
            w_e: builder.xavier(&[d, d_b])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_k.shape[0]
    }

    pub fn bilinear_dim(&self) -> usize {
        self.w_x_k.shape[0]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_k, &self.w_q_k, &self.w_v, &self.w_q_v, &self.w_x_k, &self.w_s, &self.w_e,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_k,
            &mut self.w_q_k,
            &mut self.w_v,
            &mut self.w_q_v,
            &mut self.w_x_k,
            &mut self.w_s,
            &mut self.w_e,
        ]
    }
}

/// Per-level key/value refresh weights: one projection over the concatenated
/// attended feature and the old key (or value), then residual + layer norm.
/// Keys and values get separate norm statistics.
#[derive(Clone, Debug)]
pub struct LevelUpdateParams {
    pub w_n_k: Param,       // d x 2d
    pub w_n_v: Param,       // d x 2d
    pub key_ln_gain: Param, // d
    pub key_ln_bias: Param, // d
    pub val_ln_gain: Param, // d
    pub val_ln_bias: Param, // d
}

impl LevelUpdateParams {
    pub fn init(d: usize, builder: &mut ParamBuilder) -> TensorResult<Self> {
        Ok(LevelUpdateParams {
            w_n_k: builder.xavier(&[d, 2 * d])?,
            w_n_v: builder.xavier(&[d, 2 * d])?,
            key_ln_gain: builder.filled(&[d], 1.0)?,
            key_ln_bias: builder.zeros(&[d])?,
            val_ln_gain: builder.filled(&[d], 1.0)?,
            val_ln_bias: builder.zeros(&[d])?,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_n_k,
            &self.w_n_v,
            &self.key_ln_gain,
            &self.key_ln_bias,
            &self.val_ln_gain,
            &self.val_ln_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_n_k,
            &mut self.w_n_v,
            &mut self.key_ln_gain,
            &mut self.key_ln_bias,
            &mut self.val_ln_gain,
            &mut self.val_ln_bias,
        ]
    }
}

/// A stack of M x-linear blocks with their key/value update weights.
#[derive(Clone, Debug)]
pub struct EncoderStackParams {
    pub blocks: Vec<XLinearParams>,
    pub updates: Vec<LevelUpdateParams>,
}

impl EncoderStackParams {
    pub fn init(d: usize, d_b: usize, m: usize, builder: &mut ParamBuilder) -> TensorResult<Self> {
        assert!(m >= 1, "encoder stack needs at least one level");
        let mut blocks = Vec::with_capacity(m);
        let mut updates = Vec::with_capacity(m);
        for _ in 0..m {
            blocks.push(XLinearParams::init(d, d_b, builder)?);
            updates.push(LevelUpdateParams::init(d, builder)?);
        }
        Ok(EncoderStackParams { blocks, updates })
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for (b, u) in self.blocks.iter().zip(self.updates.iter()) {
            out.extend(b.params());
            out.extend(u.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (b, u) in self.blocks.iter_mut().zip(self.updates.iter_mut()) {
            out.extend(b.params_mut());
            out.extend(u.params_mut());
        }
        out
    }
}

/// Output of an encoder stack: one attended vector per level plus the final
/// refreshed key/value matrices handed to the decoder.
pub struct AttendedSet {
    pub f_hat_per_level: Vec<Tensor>,
    pub final_keys: Tensor,
    pub final_values: Tensor,
}

/// Call counts for the stack, used to assert the one-attend-one-update-per-
/// level structure from the outside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeCounters {
    pub attend_calls: usize,
    pub update_calls: usize,
}

fn region_count(tape: &Tape, items: Tensor) -> AttentionResult<usize> {
    let shape = tape.shape(items);
    if shape.len() != 2 {
        return Err(AttentionError::Tensor(TensorError::InvalidShape {
            context: "region matrix",
            shape,
        }));
    }
    if shape[0] == 0 {
        return Err(AttentionError::EmptyRegions);
    }
    Ok(shape[0])
}

/// Tile a `d`-vector into an `n x d` matrix (each row the same vector).
fn tile_rows(tape: &Tape, v: Tensor, n: usize) -> TensorResult<Tensor> {
    let d = tape.shape(v)[0];
    let row = tape.reshape(v, &[1, d])?;
    tape.concat(&vec![row; n], 0)
}

/// Low-rank bilinear pooling of the query against every item:
/// `X_i = ELU(W_side item_i) .* ELU(W_q_side Q)`, one row per region.
pub fn bilinear_pool(
    tape: &Tape,
    side: PoolSide,
    query: Tensor,
    items: Tensor,
    params: &XLinearParams,
) -> AttentionResult<Tensor> {
    let n = region_count(tape, items)?;
    let (w_item, w_query) = match side {
        PoolSide::Key => (&params.w_k, &params.w_q_k),
        PoolSide::Value => (&params.w_v, &params.w_q_v),
    };
    let w_item = tape.param(w_item);
    let w_query = tape.param(w_query);
    // rows of items . W^T are W . item_i
    let items_emb = tape.elu(tape.matmul(items, tape.transpose(w_item)?)?);
    let query_emb = tape.elu(tape.matmul(w_query, query)?);
    let query_tiled = tile_rows(tape, query_emb, n)?;
    Ok(tape.hadamard(items_emb, query_tiled)?)
}

/// Spatial branch: embed the joint representation, score each region, and
/// normalize the scores into a distribution.
/// Returns `(X'_k: N x d_b, A_s: N)`.
pub fn spatial_attention(
    tape: &Tape,
    x_k: Tensor,
    params: &XLinearParams,
) -> AttentionResult<(Tensor, Tensor)> {
    let n = region_count(tape, x_k)?;
    let w_x_k = tape.param(&params.w_x_k);
    let w_s = tape.param(&params.w_s);
    let x_prime = tape.relu(tape.matmul(x_k, tape.transpose(w_x_k)?)?);
    let scores = tape.matmul(x_prime, tape.transpose(w_s)?)?; // N x 1
    let scores = tape.reshape(scores, &[n])?;
    let dist = tape.softmax(scores, 0)?;
    Ok((x_prime, dist))
}

/// Channel branch (squeeze-excitation): average the joint representations
/// over regions, project, and gate with a sigmoid. Returns `A_c: d`.
pub fn channel_attention(
    tape: &Tape,
    x_k_prime: Tensor,
    params: &XLinearParams,
) -> AttentionResult<Tensor> {
    region_count(tape, x_k_prime)?;
    let w_e = tape.param(&params.w_e);
    let pooled = tape.mean_axis(x_k_prime, 0)?; // d_b
    let gates = tape.matmul(w_e, pooled)?; // d
    Ok(tape.sigmoid(gates))
}

/// One full x-linear attention step:
/// `f_hat = A_c .* sum_i A_s_i X^v_i`.
pub fn xlinear_attend(
    tape: &Tape,
    keys: Tensor,
    values: Tensor,
    query: Tensor,
    params: &XLinearParams,
) -> AttentionResult<Tensor> {
    let nk = region_count(tape, keys)?;
    let nv = region_count(tape, values)?;
    if nk != nv {
        return Err(AttentionError::Tensor(TensorError::ShapeMismatch {
            op: "xlinear_attend",
            left: tape.shape(keys),
            right: tape.shape(values),
        }));
    }
    let x_k = bilinear_pool(tape, PoolSide::Key, query, keys, params)?;
    let x_v = bilinear_pool(tape, PoolSide::Value, query, values, params)?;
    let (x_prime, spatial) = spatial_attention(tape, x_k, params)?;
    let channel = channel_attention(tape, x_prime, params)?;
    let pooled = tape.matmul(spatial, x_v)?; // [n] . [n x d] -> [d]
    Ok(tape.hadamard(channel, pooled)?)
}

/// Refresh keys and values for the next stack level:
/// `k'_i = LN(ReLU(W [f_hat, k_i]) + k_i)` and likewise for values.
pub fn update_keys_values(
    tape: &Tape,
    f_hat: Tensor,
    keys: Tensor,
    values: Tensor,
    level: &LevelUpdateParams,
) -> AttentionResult<(Tensor, Tensor)> {
    let n = region_count(tape, keys)?;
    let f_tiled = tile_rows(tape, f_hat, n)?;
    let refresh = |w: &Param, gain: &Param, bias: &Param, old: Tensor| -> AttentionResult<Tensor> {
        let w = tape.param(w);
        let cat = tape.concat(&[f_tiled, old], 1)?; // N x 2d
        let pre = tape.relu(tape.matmul(cat, tape.transpose(w)?)?); // N x d
        let res = tape.add(pre, old)?;
        Ok(tape.layer_norm(res, tape.param(gain), tape.param(bias), 1e-5)?)
    };
    let new_keys = refresh(&level.w_n_k, &level.key_ln_gain, &level.key_ln_bias, keys)?;
    let new_values = refresh(&level.w_n_v, &level.val_ln_gain, &level.val_ln_bias, values)?;
    Ok((new_keys, new_values))
}

/// Run the full stack: level 1 queries with the global feature, level n with
/// the previous attended feature, refreshing keys/values between levels.
pub fn encode_stack(
    tape: &Tape,
    f_global: Tensor,
    f_regions: Tensor,
    stack: &EncoderStackParams,
) -> AttentionResult<AttendedSet> {
    let mut counters = EncodeCounters::default();
    encode_stack_counted(tape, f_global, f_regions, stack, &mut counters)
}

/// Same as [`encode_stack`] but reporting how many attend/update calls ran.
pub fn encode_stack_counted(
    tape: &Tape,
    f_global: Tensor,
    f_regions: Tensor,
    stack: &EncoderStackParams,
    counters: &mut EncodeCounters,
) -> AttentionResult<AttendedSet> {
    region_count(tape, f_regions)?;
    let mut query = f_global;
    let mut keys = f_regions;
    let mut values = f_regions;
    let mut f_hats = Vec::with_capacity(stack.levels());
    for (block, update) in stack.blocks.iter().zip(stack.updates.iter()) {
        let f_hat = xlinear_attend(tape, keys, values, query, block)?;
        counters.attend_calls += 1;
        let (k, v) = update_keys_values(tape, f_hat, keys, values, update)?;
        counters.update_calls += 1;
        f_hats.push(f_hat);
        keys = k;
        values = v;
        query = f_hat;
    }
    Ok(AttendedSet {
        f_hat_per_level: f_hats,
        final_keys: keys,
        final_values: values,
    })
}
