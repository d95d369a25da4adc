//! Finite-difference verification suite behind the `gradcheck` command:
//! every component's analytic gradients are compared against central
//! differences on small random instances.

use crate::corpus::{FeatureSet, BOS_ID, EOS_ID};
use crate::model::{
    decoder_step, init_model, sequence_logprob, DecoderState, ModelConfig, ModelParams,
};
use crate::tensor::gradcheck::{grad_check, rel_err};
use crate::tensor::{GradStore, RngState, Tape};
use crate::xlinear::{encode_stack, EncoderStackParams};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// One row of the gradcheck table.
#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOLERANCE
    }
}

/// Run the whole suite. `corrupt` appends a fixture with a deliberately
/// broken gradient path, to prove the harness flags failures.
pub fn run_gradcheck(seed: u64, corrupt: bool) -> Vec<ComponentReport> {
    let mut reports = vec![
        ComponentReport {
            component: "tensor-ops".into(),
            max_rel_err: check_tensor_ops(seed),
        },
        ComponentReport {
            component: "xlinear-block".into(),
            max_rel_err: check_xlinear_block(seed),
        },
        ComponentReport {
            component: "key-value-update".into(),
            max_rel_err: check_kv_update(seed),
        },
        ComponentReport {
            component: "decoder-step".into(),
            max_rel_err: check_decoder_step(seed),
        },
        ComponentReport {
            component: "teacher-forced-3step".into(),
            max_rel_err: check_teacher_forced(seed),
        },
    ];
    if corrupt {
        reports.push(ComponentReport {
            component: "corrupted-fixture".into(),
            max_rel_err: check_corrupted_fixture(),
        });
    }
    reports
}

fn check_tensor_ops(seed: u64) -> f64 {
    let mut rng = RngState::new(seed).derive(1);
    let mut worst = 0.0f64;
    for case in 0..25 {
        let n = 2 + rng.below(3);
        let d = 2 * (1 + rng.below(3));
        let point: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.uniform(-0.8, 0.8)).collect();
        let gain: Vec<f64> = (0..d).map(|_| rng.uniform(0.5, 1.5)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let pick = case % 5;
        let err = grad_check(
            |t, x| {
                let w = t.constant(&[d, d], w.clone())?;
                let gain = t.constant(&[d], gain.clone())?;
                let bias = t.constant(&[d], bias.clone())?;
                let h = t.matmul(x, w)?;
                let h = match pick {
                    0 => t.layer_norm(t.elu(h), gain, bias, 1e-5)?,
                    1 => {
                        let s = t.softmax(h, 1)?;
                        t.hadamard(s, h)?
                    }
                    2 => t.concat(&[t.glu(h)?, t.glu(x)?], 1)?,
                    3 => {
                        let m = t.mean_axis(h, 0)?;
                        t.reshape(t.tanh(m), &[1, d])?
                    }
                    _ => {
                        let row = t.lookup_rows(h, &[0, n - 1, 0])?;
                        t.sigmoid(row)
                    }
                };
                Ok(t.sum_all(h))
            },
            &[n, d],
            &point,
            1e-5,
        )
        .expect("gradcheck instance");
        worst = worst.max(err);
    }
    worst
}

/// Central differences of `f` with respect to one element of one parameter
/// in a cloneable parameter container.
fn fd_elem<P: Clone>(
    params: &P,
    mutate: &dyn Fn(&mut P, usize, usize, f64),
    f: &dyn Fn(&P) -> f64,
    pi: usize,
    vi: usize,
    eps: f64,
) -> f64 {
    let mut plus = params.clone();
    mutate(&mut plus, pi, vi, eps);
    let mut minus = params.clone();
    mutate(&mut minus, pi, vi, -eps);
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

fn worst_over_stack(
    stack: &EncoderStackParams,
    f: &dyn Fn(&EncoderStackParams) -> f64,
    grads: &GradStore,
) -> f64 {
    let mutate = |s: &mut EncoderStackParams, pi: usize, vi: usize, d: f64| {
        s.params_mut()[pi].values[vi] += d;
    };
    let mut worst = 0.0f64;
    for (pi, p) in stack.params().iter().enumerate() {
        let zero = vec![0.0; p.numel()];
        let analytic = grads.get(p.id).unwrap_or(&zero);
        for vi in 0..p.numel() {
            let numeric = fd_elem(stack, &mutate, f, pi, vi, 1e-5);
            worst = worst.max(rel_err(analytic[vi], numeric));
        }
    }
    worst
}

fn check_xlinear_block(seed: u64) -> f64 {
    let mut rng = RngState::new(seed).derive(2);
    let (d, n) = (4, 3);
    let stack =
        EncoderStackParams::init(d, d, 1, &mut crate::tensor::ParamBuilder::new(rng.derive(0)))
            .unwrap();
    let global: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let regions: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let f = {
        let global = global.clone();
        let regions = regions.clone();
        move |s: &EncoderStackParams| -> f64 {
            let t = Tape::new();
            let g = t.constant(&[d], global.clone()).unwrap();
            let r = t.constant(&[n, d], regions.clone()).unwrap();
            let set = encode_stack(&t, g, r, s).unwrap();
            t.scalar(t.sum_all(set.f_hat_per_level[0]))
        }
    };

    let t = Tape::new();
    let g = t.constant(&[d], global).unwrap();
    let r = t.constant(&[n, d], regions).unwrap();
    let set = encode_stack(&t, g, r, &stack).unwrap();
    let total = t.sum_all(set.f_hat_per_level[0]);
    t.backward(total).unwrap();
    let grads = t.param_grads();

    worst_over_stack(&stack, &f, &grads)
}

fn check_kv_update(seed: u64) -> f64 {
    let mut rng = RngState::new(seed).derive(3);
    let (d, n) = (4, 3);
    let stack =
        EncoderStackParams::init(d, d, 1, &mut crate::tensor::ParamBuilder::new(rng.derive(1)))
            .unwrap();
    let global: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let regions: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let f = {
        let global = global.clone();
        let regions = regions.clone();
        move |s: &EncoderStackParams| -> f64 {
            let t = Tape::new();
            let g = t.constant(&[d], global.clone()).unwrap();
            let r = t.constant(&[n, d], regions.clone()).unwrap();
            let set = encode_stack(&t, g, r, s).unwrap();
            let ks = t.sum_all(set.final_keys);
            let vs = t.sum_all(set.final_values);
            t.scalar(t.add(ks, vs).unwrap())
        }
    };

    let t = Tape::new();
    let g = t.constant(&[d], global).unwrap();
    let r = t.constant(&[n, d], regions).unwrap();
    let set = encode_stack(&t, g, r, &stack).unwrap();
    let ks = t.sum_all(set.final_keys);
    let vs = t.sum_all(set.final_values);
    let total = t.add(ks, vs).unwrap();
    t.backward(total).unwrap();
    let grads = t.param_grads();

    worst_over_stack(&stack, &f, &grads)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        stack_levels: 2,
        vocab_size: 6,
        max_len: 8,
        feature_dim_in: 5,
        n_regions: 3,
    }
}

fn worst_over_model(
    model: &ModelParams,
    f: &dyn Fn(&ModelParams) -> f64,
    grads: &GradStore,
    stride: usize,
) -> f64 {
    let mutate = |m: &mut ModelParams, pi: usize, vi: usize, d: f64| {
        m.params_mut()[pi].values[vi] += d;
    };
    let mut worst = 0.0f64;
    for (pi, p) in model.params().iter().enumerate() {
        let zero = vec![0.0; p.numel()];
        let analytic = grads.get(p.id).unwrap_or(&zero);
        for vi in (0..p.numel()).step_by(stride) {
            let numeric = fd_elem(model, &mutate, f, pi, vi, 1e-5);
            worst = worst.max(rel_err(analytic[vi], numeric));
        }
    }
    worst
}

fn check_decoder_step(seed: u64) -> f64 {
    let cfg = tiny_model_config();
    let model = init_model(&cfg, seed ^ 0xD5).unwrap();
    let mut rng = RngState::new(seed).derive(4);
    let features = FeatureSet::new(
        "img0000",
        cfg.n_regions,
        cfg.feature_dim_in,
        (0..cfg.n_regions * cfg.feature_dim_in)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    );
    let target = 4usize;

    let f = {
        let features = features.clone();
        move |m: &ModelParams| -> f64 {
            let t = Tape::new();
            let (f_tilde, attended) = crate::model::encode(&t, &features, m).unwrap();
            let state = DecoderState::zeros(&t, m.config.d_model).unwrap();
            let (_, logits) = decoder_step(&t, f_tilde, BOS_ID, &state, attended, m).unwrap();
            t.scalar(t.cross_entropy(logits, target).unwrap())
        }
    };

    let t = Tape::new();
    let (f_tilde, attended) = crate::model::encode(&t, &features, &model).unwrap();
    let state = DecoderState::zeros(&t, cfg.d_model).unwrap();
    let (_, logits) = decoder_step(&t, f_tilde, BOS_ID, &state, attended, &model).unwrap();
    let ce = t.cross_entropy(logits, target).unwrap();
    t.backward(ce).unwrap();
    let grads = t.param_grads();

    worst_over_model(&model, &f, &grads, 1)
}

fn check_teacher_forced(seed: u64) -> f64 {
    let cfg = tiny_model_config();
    let model = init_model(&cfg, seed ^ 0x3F).unwrap();
    let mut rng = RngState::new(seed).derive(5);
    let features = FeatureSet::new(
        "img0000",
        cfg.n_regions,
        cfg.feature_dim_in,
        (0..cfg.n_regions * cfg.feature_dim_in)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    );
    let targets = vec![4, 5, EOS_ID];

    let f = {
        let features = features.clone();
        let targets = targets.clone();
        move |m: &ModelParams| -> f64 {
            let t = Tape::new();
            t.scalar(sequence_logprob(&t, &features, &targets, m).unwrap())
        }
    };

    let t = Tape::new();
    let total = sequence_logprob(&t, &features, &targets, &model).unwrap();
    t.backward(total).unwrap();
    let grads = t.param_grads();

    worst_over_model(&model, &f, &grads, 2)
}

/// Fixture: the "analytic" gradient comes from a computation whose value
/// bypasses the tape, so the comparison must fail loudly.
fn check_corrupted_fixture() -> f64 {
    grad_check(
        |t, x| {
            let detached: f64 = t.value(x).iter().map(|v| v * v).sum();
            t.constant(&[1], vec![detached])
        },
        &[3],
        &[0.7, -0.4, 1.1],
        1e-5,
    )
    .expect("fixture evaluation")
}
