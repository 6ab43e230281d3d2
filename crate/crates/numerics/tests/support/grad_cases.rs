//! Gradient-check cases: each draws random shapes and inputs from `rng`
//! and returns the largest relative error against central differences.

use msclip_numerics::{check_gradients, Conv2dSpec, GeluKind, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Contracts an arbitrary output with fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> msclip_numerics::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn grad_add_sub_mul(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
    let ins = [rand_tensor(rng, &s), rand_tensor(rng, &s), rand_tensor(rng, &s)];
    check_gradients(&ins, H, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[2])?;
        let c = t.mul(b, v[1])?;
        weighted_sum(t, c, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_scale_and_mul_scalar(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = [dim(rng, 1, 6)];
    let ins = [rand_tensor(rng, &s), rand_tensor(rng, &[1])];
    check_gradients(&ins, H, |t, v| {
        let a = t.scale(v[0], -2.5)?;
        let b = t.mul_scalar(a, v[1])?;
        weighted_sum(t, b, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_add_bcast(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let ins = [rand_tensor(rng, &[b, 2, n]), rand_tensor(rng, &[n])];
    check_gradients(&ins, H, |t, v| {
        let y = t.add_bcast(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_exp_gelu_relu(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = [dim(rng, 1, 3), dim(rng, 1, 6)];
    let ins = [rand_away_from_zero(rng, &s)];
    check_gradients(&ins, H, |t, v| {
        let a = t.exp(v[0])?;
        let g = t.gelu(v[0], GeluKind::Tanh)?;
        let r = t.relu(v[0])?;
        let y = t.add(a, g)?;
        let y = t.add(y, r)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_sum_mean(rng: &mut ChaCha8Rng, _seed: u64) -> f64 {
    let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let ins = [rand_tensor(rng, &s)];
    check_gradients(&ins, H, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let m = t.mean(sq)?;
        let s = t.sum(v[0])?;
        let p = t.mul(m, s)?;
        t.sum(p)
    })
    .unwrap()
    .max_error()
}

pub fn grad_matmul(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    let ins = [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
    check_gradients(&ins, H, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_bmm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let transpose = rng.random_bool(0.5);
    let bshape = if transpose { [b, n, k] } else { [b, k, n] };
    let ins = [rand_tensor(rng, &[b, m, k]), rand_tensor(rng, &bshape)];
    check_gradients(&ins, H, |t, v| {
        let y = t.bmm(v[0], v[1], transpose)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_linear(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, s, i, o) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let ins = [rand_tensor(rng, &[b, s, i]), rand_tensor(rng, &[i, o]), rand_tensor(rng, &[o])];
    check_gradients(&ins, H, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_shape_ops(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (a, b, c) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3));
    let ins = [rand_tensor(rng, &[a, b, c]), rand_tensor(rng, &[a, b, c])];
    check_gradients(&ins, H, |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let p = t.reshape(p, &[c, a * b])?;
        let p = t.transpose(p)?;
        let p = t.reshape(p, &[a, b, c])?;
        let cat = t.concat(&[p, v[1]], 1)?;
        let s = t.slice(cat, 1, 1, b)?;
        weighted_sum(t, s, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_gather_rows(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (rows, w) = (dim(rng, 2, 6), dim(rng, 1, 4));
    let idx: Vec<usize> = (0..dim(rng, 1, 8)).map(|_| rng.random_range(0..rows)).collect();
    let ins = [rand_tensor(rng, &[rows, w])];
    check_gradients(&ins, H, |t, v| {
        let g = t.gather_rows(v[0], &idx)?;
        weighted_sum(t, g, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_layer_norm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
    let ins = [rand_tensor(rng, &[r, d]), rand_tensor(rng, &[d]), rand_tensor(rng, &[d])];
    check_gradients(&ins, H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_batch_norm_training(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, c, hw) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let ins = [rand_tensor(rng, &[b, c, hw, hw]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
    let stats = RunningStats::empty(c);
    check_gradients(&ins, H, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &stats, true, 1e-5)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_batch_norm_eval(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let c = dim(rng, 1, 4);
    let ins = [rand_tensor(rng, &[3, c]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
    let stats = RunningStats::from_parts(vec![0.3; c], vec![1.7; c]);
    check_gradients(&ins, H, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &stats, false, 1e-5)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_l2_normalize(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let ins = [rand_tensor(rng, &[r, d])];
    check_gradients(&ins, H, |t, v| {
        let y = t.l2_normalize(v[0])?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_softmax_and_causal_mask(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, n) = (dim(rng, 1, 3), dim(rng, 1, 5));
    let ins = [rand_tensor(rng, &[b, n, n])];
    check_gradients(&ins, H, |t, v| {
        let m = t.causal_mask(v[0])?;
        let p = t.softmax_rows(m)?;
        weighted_sum(t, p, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_cross_entropy(rng: &mut ChaCha8Rng, _seed: u64) -> f64 {
    let (n, c) = (dim(rng, 1, 5), dim(rng, 2, 5));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let ins = [rand_tensor(rng, &[n, c])];
    check_gradients(&ins, H, |t, v| t.cross_entropy(v[0], &targets)).unwrap().max_error()
}

pub fn grad_conv2d(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let groups = dim(rng, 1, 2);
    let cg = dim(rng, 1, 2);
    let og = dim(rng, 1, 2);
    let k = dim(rng, 1, 3);
    let stride = dim(rng, 1, 2);
    let pad = rng.random_range(0..k);
    let hw = dim(rng, k.max(2), 5);
    let batch = dim(rng, 1, 2);
    let ins = [
        rand_tensor(rng, &[batch, cg * groups, hw, hw]),
        rand_tensor(rng, &[og * groups, cg, k, k]),
        rand_tensor(rng, &[og * groups]),
    ];
    let spec = Conv2dSpec::new(stride, pad).groups(groups);
    check_gradients(&ins, H, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_avg_pool2d(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let k = dim(rng, 1, 3);
    let pad = rng.random_range(0..k);
    let hw = dim(rng, k.max(2), 6);
    let c = dim(rng, 1, 3);
    let ins = [rand_tensor(rng, &[1, c, hw, hw])];
    let spec = Conv2dSpec::new(dim(rng, 1, 2), pad);
    check_gradients(&ins, H, |t, v| {
        let y = t.avg_pool2d(v[0], k, spec)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_error()
}

pub fn grad_composite_conv_ln_softmax_ce(rng: &mut ChaCha8Rng, _seed: u64) -> f64 {
    let ins = [
        rand_tensor(rng, &[2, 2, 4, 4]),
        rand_tensor(rng, &[3, 2, 3, 3]),
        rand_tensor(rng, &[4]),
        rand_tensor(rng, &[4]),
    ];
    let targets = [rng.random_range(0..4), rng.random_range(0..4)];
    check_gradients(&ins, H, |t, v| {
        let y = t.conv2d(v[0], v[1], None, Conv2dSpec::new(2, 1))?;
        // [2, 3, 2, 2] -> rows of 4 per (batch, channel)
        let y = t.reshape(y, &[6, 4])?;
        let y = t.layer_norm(y, v[2], v[3], 1e-5)?;
        let p = t.softmax_rows(y)?;
        let p = t.reshape(p, &[2, 12])?;
        let logits = t.slice(p, 1, 0, 4)?;
        let logits = t.scale(logits, 5.0)?;
        t.cross_entropy(logits, &targets)
    })
    .unwrap()
    .max_error()
}

pub type Case = fn(&mut ChaCha8Rng, u64) -> f64;

/// Every differentiable op, plus one composite chain.
pub const CASES: &[(&str, Case)] = &[
    ("add/sub/mul", grad_add_sub_mul),
    ("scale/mul_scalar", grad_scale_and_mul_scalar),
    ("add_bcast", grad_add_bcast),
    ("exp/gelu/relu", grad_exp_gelu_relu),
    ("sum/mean", grad_sum_mean),
    ("matmul", grad_matmul),
    ("bmm", grad_bmm),
    ("linear", grad_linear),
    ("reshape/permute/transpose/concat/slice", grad_shape_ops),
    ("gather_rows", grad_gather_rows),
    ("layer_norm", grad_layer_norm),
    ("batch_norm", grad_batch_norm_training),
    ("batch_norm eval", grad_batch_norm_eval),
    ("l2_normalize", grad_l2_normalize),
    ("softmax/causal_mask", grad_softmax_and_causal_mask),
    ("cross_entropy", grad_cross_entropy),
    ("conv2d", grad_conv2d),
    ("avg_pool2d", grad_avg_pool2d),
    ("conv→LN→softmax→CE", grad_composite_conv_ln_softmax_ce),
];
