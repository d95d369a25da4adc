//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` row-major buffers. A [`Tape`] records every operation of
//! one forward pass; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients. Tapes are rebuilt per forward pass and confined to
//! one thread; persistent weights live in [`Param`] structs outside any tape
//! and are bound in as leaves each pass.

pub mod gradcheck;
pub mod rng;


use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

pub use rng::RngState;

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    /// A constructor received an empty or zero-sized shape where a positive
    /// one is required, or a buffer whose length disagrees with its shape.
    InvalidShape { context: &'static str, shape: Vec<usize> },
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index (axis, row, or token id) is out of range.
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    /// An API contract was violated (non-scalar loss, tensor used on a
    /// foreign tape, and similar caller bugs).
    Contract(&'static str),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidShape { context, shape } => {
                write!(f, "invalid shape {:?} in {}", shape, context)
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{}: shape mismatch {:?} vs {:?}", op, left, right)
            }
            TensorError::IndexOutOfRange { context, index, bound } => {
                write!(f, "{}: index {} out of range (bound {})", context, index, bound)
            }
            TensorError::Contract(msg) => write!(f, "contract violation: {}", msg),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Stable identifier of a persistent parameter within one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// How a fresh parameter buffer is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Zeros,
    XavierUniform,
}

/// A trainable weight. Lives outside any tape; bound in via [`Tape::param`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: ParamId,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Allocates parameters with sequential ids and a shared deterministic RNG,
/// so a model initialized twice from the same seed is bitwise identical.
pub struct ParamBuilder {
    next_id: usize,
    rng: RngState,
}

impl ParamBuilder {
    pub fn new(rng: RngState) -> Self {
        ParamBuilder { next_id: 0, rng }
    }

    /// Build one parameter. Xavier-uniform bound is sqrt(6 / (fan_in + fan_out))
    /// with fan_in the trailing dimension and fan_out the product of the rest
    /// (a lone vector counts fan_out = 1).
    pub fn build(&mut self, shape: &[usize], init: InitKind) -> TensorResult<Param> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                context: "build_parameter",
                shape: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        let values = match init {
            InitKind::Zeros => vec![0.0; numel],
            InitKind::XavierUniform => {
                let fan_in = *shape.last().unwrap();
                let fan_out: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| self.rng.uniform(-bound, bound)).collect()
            }
        };
        let id = ParamId(self.next_id);
        self.next_id += 1;
        Ok(Param {
            id,
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorResult<Param> {
        self.build(shape, InitKind::Zeros)
    }

    pub fn xavier(&mut self, shape: &[usize]) -> TensorResult<Param> {
        self.build(shape, InitKind::XavierUniform)
    }

    /// Constant fill, used for layer-norm gains that start at one.
    pub fn filled(&mut self, shape: &[usize], value: f64) -> TensorResult<Param> {
        let mut p = self.build(shape, InitKind::Zeros)?;
        p.values.fill(value);
        Ok(p)
    }

    /// Number of parameters allocated so far.
    pub fn count(&self) -> usize {
        self.next_id
    }
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Elu,
    Relu,
    Sigmoid,
    Tanh,
}

/// Handle to a node on a specific tape. Cheap to copy; using it on another
/// tape is a contract error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    tape_tag: u64,
}

impl Tensor {
    /// Node identifier within its tape.
    pub fn node_id(&self) -> usize {
        self.id
    }
}

enum Op {
    Leaf,
    Unary { kind: Unary, input: usize },
    Matmul { lhs: usize, rhs: usize },
    Add { lhs: usize, rhs: usize },
    Hadamard { lhs: usize, rhs: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    MeanAxis { input: usize, axis: usize },
    Softmax { input: usize, axis: usize },
    Glu { input: usize },
    LayerNorm { input: usize, gain: usize, bias: usize, eps: f64 },
    LookupRows { table: usize, indices: Vec<usize> },
    CrossEntropy { logits: usize, target: usize },
    Reshape { input: usize },
    Transpose { input: usize },
    SumAll { input: usize },
    Scale { input: usize, factor: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    param: Option<ParamId>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Computation record of one forward pass. Not Sync: a tape and its tensors
/// belong to a single worker.
pub struct Tape {
    tag: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Tensor {
            id: nodes.len() - 1,
            tape_tag: self.tag,
        }
    }

    fn check(&self, t: Tensor) -> TensorResult<usize> {
        if t.tape_tag != self.tag {
            return Err(TensorError::Contract("tensor used on a foreign tape"));
        }
        Ok(t.id)
    }

    // ── node construction ───────────────────────────────────────────────

    /// Record a constant (no gradient flows into it).
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> TensorResult<Tensor> {
        self.leaf_impl(shape, values, false, None)
    }

    /// Record a differentiable leaf not tied to a persistent parameter.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> TensorResult<Tensor> {
        self.leaf_impl(shape, values, true, None)
    }

    /// Bind a persistent parameter as a differentiable leaf. After
    /// `backward`, its gradient is collected by [`Tape::param_grads`].
    pub fn param(&self, p: &Param) -> Tensor {
        self.leaf_impl(&p.shape, p.values.clone(), true, Some(p.id))
            .expect("parameter shapes are validated at construction")
    }

    fn leaf_impl(
        &self,
        shape: &[usize],
        values: Vec<f64>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> TensorResult<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || values.len() != numel {
            return Err(TensorError::InvalidShape {
                context: "leaf",
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(Node {
            op: Op::Leaf,
            shape: shape.to_vec(),
            values,
            requires_grad,
            grad: None,
            param,
        }))
    }

    pub fn scalar_constant(&self, v: f64) -> Tensor {
        self.constant(&[1], vec![v]).unwrap()
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        let id = self.check(t).expect("foreign tensor");
        self.nodes.borrow()[id].shape.clone()
    }

    pub fn value(&self, t: Tensor) -> Vec<f64> {
        let id = self.check(t).expect("foreign tensor");
        self.nodes.borrow()[id].values.clone()
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        let id = self.check(t).expect("foreign tensor");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[id].values.len(), 1, "scalar() on non-scalar tensor");
        nodes[id].values[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        let id = self.check(t).expect("foreign tensor");
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient populated by the last `backward` call, if any reached `t`.
    pub fn grad(&self, t: Tensor) -> Option<Vec<f64>> {
        let id = self.check(t).expect("foreign tensor");
        self.nodes.borrow()[id].grad.clone()
    }

    fn meta(&self, id: usize) -> (Vec<usize>, bool) {
        let nodes = self.nodes.borrow();
        (nodes[id].shape.clone(), nodes[id].requires_grad)
    }

    fn values_of(&self, id: usize) -> Vec<f64> {
        self.nodes.borrow()[id].values.clone()
    }

    // ── ops ─────────────────────────────────────────────────────────────

    /// Elementwise activation. ELU uses alpha = 1.
    pub fn unary(&self, kind: Unary, x: Tensor) -> Tensor {
        let xid = self.check(x).expect("foreign tensor");
        let (shape, rg) = self.meta(xid);
        let values: Vec<f64> = self.nodes.borrow()[xid]
            .values
            .iter()
            .map(|&v| match kind {
                Unary::Elu => {
                    if v >= 0.0 {
                        v
                    } else {
                        v.exp() - 1.0
                    }
                }
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
            })
            .collect();
        self.push(Node {
            op: Op::Unary { kind, input: xid },
            shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        })
    }

    pub fn elu(&self, x: Tensor) -> Tensor {
        self.unary(Unary::Elu, x)
    }
    pub fn relu(&self, x: Tensor) -> Tensor {
        self.unary(Unary::Relu, x)
    }
    pub fn sigmoid(&self, x: Tensor) -> Tensor {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn tanh(&self, x: Tensor) -> Tensor {
        self.unary(Unary::Tanh, x)
    }

    /// Matrix product. Accepts `[m,k]x[k,n] -> [m,n]`, `[m,k]x[k] -> [m]`,
    /// and `[k]x[k,n] -> [n]`.
    pub fn matmul(&self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let aid = self.check(a)?;
        let bid = self.check(b)?;
        let (ashape, arg) = self.meta(aid);
        let (bshape, brg) = self.meta(bid);
        let (m, k, n, out_shape) = match (ashape.as_slice(), bshape.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: ashape,
                    right: bshape,
                })
            }
        };
        let nodes = self.nodes.borrow();
        let av = &nodes[aid].values;
        let bv = &nodes[bid].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Matmul { lhs: aid, rhs: bid },
            shape: out_shape,
            values: out,
            requires_grad: arg || brg,
            grad: None,
            param: None,
        }))
    }

    /// Elementwise sum of equal-shaped tensors.
    pub fn add(&self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        self.zip("add", a, b, |x, y| x + y)
    }

    /// Elementwise (Hadamard) product of equal-shaped tensors.
    pub fn hadamard(&self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        self.zip("hadamard", a, b, |x, y| x * y)
    }

    fn zip(
        &self,
        opname: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        let aid = self.check(a)?;
        let bid = self.check(b)?;
        let (ashape, arg) = self.meta(aid);
        let (bshape, brg) = self.meta(bid);
        if ashape != bshape {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                left: ashape,
                right: bshape,
            });
        }
        let nodes = self.nodes.borrow();
        let values: Vec<f64> = nodes[aid]
            .values
            .iter()
            .zip(nodes[bid].values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        drop(nodes);
        let op = if opname == "add" {
            Op::Add { lhs: aid, rhs: bid }
        } else {
            Op::Hadamard { lhs: aid, rhs: bid }
        };
        Ok(self.push(Node {
            op,
            shape: ashape,
            values,
            requires_grad: arg || brg,
            grad: None,
            param: None,
        }))
    }

    /// Concatenate along `axis`. All parts must agree on every other axis.
    pub fn concat(&self, parts: &[Tensor], axis: usize) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors"));
        }
        let ids: Vec<usize> = parts
            .iter()
            .map(|&t| self.check(t))
            .collect::<TensorResult<_>>()?;
        let (first_shape, _) = self.meta(ids[0]);
        let rank = first_shape.len();
        if axis >= rank {
            return Err(TensorError::IndexOutOfRange {
                context: "concat axis",
                index: axis,
                bound: rank,
            });
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = 0;
        let mut rg = false;
        for &id in &ids {
            let (shape, r) = self.meta(id);
            if shape.len() != rank
                || shape
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first_shape[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first_shape,
                    right: shape,
                });
            }
            out_shape[axis] += shape[axis];
            rg |= r;
        }
        // outer = product of dims before axis; inner = product after
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut values = vec![0.0; numel];
        let nodes = self.nodes.borrow();
        let mut offset = 0usize; // running position along axis
        for &id in &ids {
            let part = &nodes[id];
            let pa = part.shape[axis];
            for o in 0..outer {
                let src = &part.values[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * out_shape[axis] + offset) * inner;
                values[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Concat { inputs: ids, axis },
            shape: out_shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&self, x: Tensor, axis: usize) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let (shape, rg) = self.meta(xid);
        if axis >= shape.len() {
            return Err(TensorError::IndexOutOfRange {
                context: "mean_axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = Vec::with_capacity(shape.len() - 1);
        out_shape.extend_from_slice(&shape[..axis]);
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let nodes = self.nodes.borrow();
        let xv = &nodes[xid].values;
        let mut values = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    values[o * inner + i] += xv[(o * n + a) * inner + i];
                }
            }
        }
        for v in values.iter_mut() {
            *v /= n as f64;
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::MeanAxis { input: xid, axis },
            shape: out_shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Numerically stabilized softmax along `axis` (max is subtracted).
    pub fn softmax(&self, x: Tensor, axis: usize) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let (shape, rg) = self.meta(xid);
        if axis >= shape.len() {
            return Err(TensorError::IndexOutOfRange {
                context: "softmax",
                index: axis,
                bound: shape.len(),
            });
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let nodes = self.nodes.borrow();
        let xv = &nodes[xid].values;
        let mut values = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..n {
                    max = max.max(xv[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..n {
                    let e = (xv[at(a)] - max).exp();
                    values[at(a)] = e;
                    sum += e;
                }
                for a in 0..n {
                    values[at(a)] /= sum;
                }
            }
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Softmax { input: xid, axis },
            shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Gated linear unit over the last dimension: the first half of each row
    /// gated by the sigmoid of the second half.
    pub fn glu(&self, x: Tensor) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let (shape, rg) = self.meta(xid);
        let last = *shape.last().unwrap();
        if last % 2 != 0 || last == 0 {
            return Err(TensorError::InvalidShape {
                context: "glu (odd last dimension)",
                shape,
            });
        }
        let half = last / 2;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let nodes = self.nodes.borrow();
        let xv = &nodes[xid].values;
        let mut values = vec![0.0; rows * half];
        for r in 0..rows {
            for j in 0..half {
                let a = xv[r * last + j];
                let b = xv[r * last + half + j];
                values[r * half + j] = a * sigmoid(b);
            }
        }
        drop(nodes);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = half;
        Ok(self.push(Node {
            op: Op::Glu { input: xid },
            shape: out_shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(
        &self,
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        eps: f64,
    ) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let gid = self.check(gain)?;
        let bid = self.check(bias)?;
        let (shape, xrg) = self.meta(xid);
        let (gshape, grg) = self.meta(gid);
        let (bshape, brg) = self.meta(bid);
        let d = *shape.last().unwrap();
        if gshape != [d] || bshape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: gshape,
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let nodes = self.nodes.borrow();
        let xv = &nodes[xid].values;
        let gv = &nodes[gid].values;
        let bv = &nodes[bid].values;
        let mut values = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            for j in 0..d {
                values[r * d + j] = (row[j] - mean) / denom * gv[j] + bv[j];
            }
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::LayerNorm {
                input: xid,
                gain: gid,
                bias: bid,
                eps,
            },
            shape,
            values,
            requires_grad: xrg || grg || brg,
            grad: None,
            param: None,
        }))
    }

    /// Gather rows of a `[V, d]` table; backward scatter-adds into the table.
    /// An empty index list yields a `[0, d]` tensor.
    pub fn lookup_rows(&self, table: Tensor, indices: &[usize]) -> TensorResult<Tensor> {
        let tid = self.check(table)?;
        let (shape, rg) = self.meta(tid);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                context: "lookup_rows table",
                shape,
            });
        }
        let (v, d) = (shape[0], shape[1]);
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::IndexOutOfRange {
                    context: "lookup_rows",
                    index: ix,
                    bound: v,
                });
            }
        }
        let nodes = self.nodes.borrow();
        let tv = &nodes[tid].values;
        let mut values = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            values.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::LookupRows {
                table: tid,
                indices: indices.to_vec(),
            },
            shape: vec![indices.len(), d],
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Negative log softmax probability of `target` under `logits` (a vector).
    pub fn cross_entropy(&self, logits: Tensor, target: usize) -> TensorResult<Tensor> {
        let lid = self.check(logits)?;
        let (shape, rg) = self.meta(lid);
        if shape.len() != 1 {
            return Err(TensorError::InvalidShape {
                context: "cross_entropy logits",
                shape,
            });
        }
        let v = shape[0];
        if target >= v {
            return Err(TensorError::IndexOutOfRange {
                context: "cross_entropy target",
                index: target,
                bound: v,
            });
        }
        let nodes = self.nodes.borrow();
        let xv = &nodes[lid].values;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - xv[target];
        drop(nodes);
        Ok(self.push(Node {
            op: Op::CrossEntropy {
                logits: lid,
                target,
            },
            shape: vec![1],
            values: vec![loss],
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, x: Tensor, shape: &[usize]) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let (old, rg) = self.meta(xid);
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != old.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: old,
                right: shape.to_vec(),
            });
        }
        let values = self.values_of(xid);
        Ok(self.push(Node {
            op: Op::Reshape { input: xid },
            shape: shape.to_vec(),
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: Tensor) -> TensorResult<Tensor> {
        let xid = self.check(x)?;
        let (shape, rg) = self.meta(xid);
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                context: "transpose",
                shape,
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let nodes = self.nodes.borrow();
        let xv = &nodes[xid].values;
        let mut values = vec![0.0; xv.len()];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = xv[i * n + j];
            }
        }
        drop(nodes);
        Ok(self.push(Node {
            op: Op::Transpose { input: xid },
            shape: vec![n, m],
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self, x: Tensor) -> Tensor {
        let xid = self.check(x).expect("foreign tensor");
        let (_, rg) = self.meta(xid);
        let total: f64 = self.nodes.borrow()[xid].values.iter().sum();
        self.push(Node {
            op: Op::SumAll { input: xid },
            shape: vec![1],
            values: vec![total],
            requires_grad: rg,
            grad: None,
            param: None,
        })
    }

    /// Multiply by a compile-time constant factor (no gradient into the factor).
    pub fn scale(&self, x: Tensor, factor: f64) -> Tensor {
        let xid = self.check(x).expect("foreign tensor");
        let (shape, rg) = self.meta(xid);
        let values: Vec<f64> = self.nodes.borrow()[xid].values.iter().map(|&v| v * factor).collect();
        self.push(Node {
            op: Op::Scale { input: xid, factor },
            shape,
            values,
            requires_grad: rg,
            grad: None,
            param: None,
        })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across all uses of a node; repeated calls keep accumulating.
    pub fn backward(&self, loss: Tensor) -> TensorResult<()> {
        let lid = self.check(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[lid].values.len() != 1 {
            return Err(TensorError::Contract("backward requires a scalar loss"));
        }
        if !nodes[lid].requires_grad {
            return Ok(()); // nothing differentiable upstream
        }
        add_grad(&mut nodes, lid, &[1.0]);
        for id in (0..=lid).rev() {
            if nodes[id].grad.is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = nodes[id].grad.clone().unwrap();
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Unary { kind, input } => {
                    let (kind, input) = (*kind, *input);
                    let dx: Vec<f64> = nodes[input]
                        .values
                        .iter()
                        .zip(nodes[id].values.iter())
                        .zip(g.iter())
                        .map(|((&x, &y), &go)| {
                            let d = match kind {
                                Unary::Elu => {
                                    if x >= 0.0 {
                                        1.0
                                    } else {
                                        y + 1.0 // e^x
                                    }
                                }
                                Unary::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Tanh => 1.0 - y * y,
                            };
                            d * go
                        })
                        .collect();
                    add_grad(&mut nodes, input, &dx);
                }
                Op::Matmul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let (m, k, n) = matmul_dims(&nodes[lhs].shape, &nodes[rhs].shape);
                    // dA = dC . B^T ; dB = A^T . dC
                    if nodes[lhs].requires_grad {
                        let bv = &nodes[rhs].values;
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        add_grad(&mut nodes, lhs, &da);
                    }
                    if nodes[rhs].requires_grad {
                        let av = nodes[lhs].values.clone();
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] = s;
                            }
                        }
                        add_grad(&mut nodes, rhs, &db);
                    }
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if nodes[lhs].requires_grad {
                        add_grad(&mut nodes, lhs, &g);
                    }
                    if nodes[rhs].requires_grad {
                        add_grad(&mut nodes, rhs, &g);
                    }
                }
                Op::Hadamard { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if nodes[lhs].requires_grad {
                        let d: Vec<f64> = nodes[rhs]
                            .values
                            .iter()
                            .zip(g.iter())
                            .map(|(&b, &go)| b * go)
                            .collect();
                        add_grad(&mut nodes, lhs, &d);
                    }
                    if nodes[rhs].requires_grad {
                        let d: Vec<f64> = nodes[lhs]
                            .values
                            .iter()
                            .zip(g.iter())
                            .map(|(&a, &go)| a * go)
                            .collect();
                        add_grad(&mut nodes, rhs, &d);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let inputs = inputs.clone();
                    let axis = *axis;
                    let out_shape = nodes[id].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0usize;
                    for &pid in &inputs {
                        let pa = nodes[pid].shape[axis];
                        if nodes[pid].requires_grad {
                            let mut dg = vec![0.0; nodes[pid].values.len()];
                            for o in 0..outer {
                                let src_start = (o * out_shape[axis] + offset) * inner;
                                dg[o * pa * inner..(o + 1) * pa * inner]
                                    .copy_from_slice(&g[src_start..src_start + pa * inner]);
                            }
                            add_grad(&mut nodes, pid, &dg);
                        }
                        offset += pa;
                    }
                }
                Op::MeanAxis { input, axis } => {
                    let (input, axis) = (*input, *axis);
                    let in_shape = nodes[input].shape.clone();
                    let n = in_shape[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let mut dx = vec![0.0; nodes[input].values.len()];
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                dx[(o * n + a) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    add_grad(&mut nodes, input, &dx);
                }
                Op::Softmax { input, axis } => {
                    let (input, axis) = (*input, *axis);
                    let shape = nodes[id].shape.clone();
                    let n = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let y = nodes[id].values.clone();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + i;
                            let mut dot = 0.0;
                            for a in 0..n {
                                dot += g[at(a)] * y[at(a)];
                            }
                            for a in 0..n {
                                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                    add_grad(&mut nodes, input, &dx);
                }
                Op::Glu { input } => {
                    let input = *input;
                    let in_shape = nodes[input].shape.clone();
                    let last = *in_shape.last().unwrap();
                    let half = last / 2;
                    let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
                    let xv = nodes[input].values.clone();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        for j in 0..half {
                            let a = xv[r * last + j];
                            let s = sigmoid(xv[r * last + half + j]);
                            let go = g[r * half + j];
                            dx[r * last + j] = go * s;
                            dx[r * last + half + j] = go * a * s * (1.0 - s);
                        }
                    }
                    add_grad(&mut nodes, input, &dx);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    eps,
                } => {
                    let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                    let shape = nodes[id].shape.clone();
                    let d = *shape.last().unwrap();
                    let rows: usize = shape[..shape.len() - 1].iter().product();
                    let xv = nodes[input].values.clone();
                    let gv = nodes[gain].values.clone();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let mut sum_gg = 0.0; // sum of grow*gain
                        let mut sum_gg_xhat = 0.0; // sum of grow*gain*xhat
                        for j in 0..d {
                            let gg = grow[j] * gv[j];
                            sum_gg += gg;
                            sum_gg_xhat += gg * xhat[j];
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                        }
                        for j in 0..d {
                            let gg = grow[j] * gv[j];
                            dx[r * d + j] = inv
                                * (gg - sum_gg / d as f64 - xhat[j] * sum_gg_xhat / d as f64);
                        }
                    }
                    if nodes[input].requires_grad {
                        add_grad(&mut nodes, input, &dx);
                    }
                    if nodes[gain].requires_grad {
                        add_grad(&mut nodes, gain, &dgain);
                    }
                    if nodes[bias].requires_grad {
                        add_grad(&mut nodes, bias, &dbias);
                    }
                }
                Op::LookupRows { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let d = nodes[table].shape[1];
                    let mut dt = vec![0.0; nodes[table].values.len()];
                    for (row, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += g[row * d + j];
                        }
                    }
                    add_grad(&mut nodes, table, &dt);
                }
                Op::CrossEntropy { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let xv = nodes[logits].values.clone();
                    let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = xv.iter().map(|&x| (x - max).exp()).sum();
                    let go = g[0];
                    let dx: Vec<f64> = xv
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            let p = (x - max).exp() / sum;
                            (p - if j == target { 1.0 } else { 0.0 }) * go
                        })
                        .collect();
                    add_grad(&mut nodes, logits, &dx);
                }
                Op::Reshape { input } => {
                    let input = *input;
                    add_grad(&mut nodes, input, &g);
                }
                Op::Transpose { input } => {
                    let input = *input;
                    let (n, m) = (nodes[id].shape[0], nodes[id].shape[1]);
                    let mut dx = vec![0.0; g.len()];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    add_grad(&mut nodes, input, &dx);
                }
                Op::SumAll { input } => {
                    let input = *input;
                    let dx = vec![g[0]; nodes[input].values.len()];
                    add_grad(&mut nodes, input, &dx);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let dx: Vec<f64> = g.iter().map(|&v| v * factor).collect();
                    add_grad(&mut nodes, input, &dx);
                }
            }
        }
        Ok(())
    }

    /// Collect gradients of all parameter-bound leaves, keyed by [`ParamId`]
    /// and accumulated across multiple bindings of the same parameter.
    pub fn param_grads(&self) -> GradStore {
        let nodes = self.nodes.borrow();
        let mut store = GradStore::new();
        for node in nodes.iter() {
            if let (Some(pid), Some(grad)) = (node.param, node.grad.as_ref()) {
                store.accumulate(pid, grad);
            }
        }
        store
    }
}

fn matmul_dims(ashape: &[usize], bshape: &[usize]) -> (usize, usize, usize) {
    match (ashape, bshape) {
        ([m, k], [_, n]) => (*m, *k, *n),
        ([m, k], [_]) => (*m, *k, 1),
        ([k], [_, n]) => (1, *k, *n),
        _ => unreachable!("validated at forward time"),
    }
}

fn add_grad(nodes: &mut [Node], id: usize, delta: &[f64]) {
    let slot = &mut nodes[id].grad;
    match slot {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                *gi += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients keyed by parameter id, in deterministic order.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    grads: std::collections::BTreeMap<ParamId, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => {
                self.grads.insert(id, delta.to_vec());
            }
        }
    }

    /// Merge another store into this one (gradient accumulation across items).
    pub fn merge(&mut self, other: &GradStore) {
        for (&id, g) in &other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Global L2 norm over every stored gradient entry.
    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}
