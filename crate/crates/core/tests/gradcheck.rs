//! Reverse-mode gradients against central finite differences on randomly
//! composed operator graphs.

use blockcd_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 4] = [1, 2, 4, 4];
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
enum Step {
    Sigmoid,
    Relu,
    Abs,
    Exp,
    LogOfSigmoid,
    LogSigmoid,
    Neg,
    Scale,
    AddConst,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Conv,
    ConvStride2Upsample,
    PoolUpsample,
    WindowSoftmax,
    ConcatSlice,
    Transpose,
    SoftmaxChannels,
    AddBias,
    MulChannels,
    ScaleBy,
    Clamp,
    MatMul,
    BatchMatMul,
}

const ALL: [Step; 27] = [
    Step::Sigmoid,
    Step::Relu,
    Step::Abs,
    Step::Exp,
    Step::LogOfSigmoid,
    Step::LogSigmoid,
    Step::Neg,
    Step::Scale,
    Step::AddConst,
    Step::Add,
    Step::Sub,
    Step::Mul,
    Step::Div,
    Step::Minimum,
    Step::Conv,
    Step::ConvStride2Upsample,
    Step::PoolUpsample,
    Step::WindowSoftmax,
    Step::ConcatSlice,
    Step::Transpose,
    Step::SoftmaxChannels,
    Step::AddBias,
    Step::MulChannels,
    Step::ScaleBy,
    Step::Clamp,
    Step::MatMul,
    Step::BatchMatMul,
];

/// Shape of the extra leaf a step consumes, if any.
fn leaf_shape(step: Step) -> Option<Vec<usize>> {
    match step {
        Step::Add | Step::Sub | Step::Mul | Step::Div | Step::Minimum => Some(SHAPE.to_vec()),
        Step::Conv => Some(vec![2, 2, 3, 3]),
        Step::ConvStride2Upsample => Some(vec![2, 2, 3, 3]),
        Step::AddBias => Some(vec![2]),
        Step::MulChannels => Some(vec![1, 1, 4, 4]),
        Step::ScaleBy => Some(vec![]),
        Step::MatMul => Some(vec![4, 4]),
        Step::BatchMatMul => Some(vec![2, 4, 4]),
        _ => None,
    }
}

struct Recipe {
    steps: Vec<Step>,
    leaves: Vec<Tensor>,
    weights: Tensor,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn recipe(seed: u64, len: usize) -> Recipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<Step> = (0..len).map(|_| ALL[rng.gen_range(0..ALL.len())]).collect();
    let mut leaves = vec![random_tensor(&mut rng, &SHAPE)];
    for &s in &steps {
        if let Some(shape) = leaf_shape(s) {
            leaves.push(random_tensor(&mut rng, &shape));
        }
    }
    let weights = random_tensor(&mut rng, &SHAPE);
    Recipe { steps, leaves, weights }
}

fn build(r: &Recipe, leaves: &[Tensor]) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
    let mut next = 1;
    let mut x = vars[0];
    for &s in &r.steps {
        let mut leaf = || {
            next += 1;
            vars[next - 1]
        };
        x = match s {
            Step::Sigmoid => g.sigmoid(x),
            Step::Relu => g.relu(x),
            Step::Abs => g.abs(x),
            Step::Exp => {
                let small = g.scale(x, 0.5);
                g.exp(small)
            }
            Step::LogOfSigmoid => {
                let p = g.sigmoid(x);
                g.log(p)
            }
            Step::LogSigmoid => g.log_sigmoid(x),
            Step::Neg => g.neg(x),
            Step::Scale => g.scale(x, -1.7),
            Step::AddConst => g.add_const(x, 0.3),
            Step::Add => g.add(x, leaf()).unwrap(),
            Step::Sub => g.sub(x, leaf()).unwrap(),
            Step::Mul => g.mul(x, leaf()).unwrap(),
            Step::Div => {
                let d = leaf();
                let sq = g.mul(d, d).unwrap();
                let positive = g.add_const(sq, 0.5);
                g.div(x, positive).unwrap()
            }
            Step::Minimum => g.minimum(x, leaf()).unwrap(),
            Step::Conv => g.conv2d(x, leaf(), 1, 1).unwrap(),
            Step::ConvStride2Upsample => {
                let y = g.conv2d(x, leaf(), 2, 1).unwrap();
                g.upsample_nearest(y, 2).unwrap()
            }
            Step::PoolUpsample => {
                let y = g.max_pool2d(x, 2).unwrap();
                g.upsample_nearest(y, 2).unwrap()
            }
            Step::WindowSoftmax => {
                let w = g.window_partition(x, 2).unwrap();
                let s = g.softmax(w, 1).unwrap();
                g.window_merge(s, 2, 1, 4, 4).unwrap()
            }
            Step::ConcatSlice => {
                let sq = g.mul(x, x).unwrap();
                let c = g.concat(&[x, sq], 1).unwrap();
                let lo = g.slice(c, 1, 1, 3).unwrap();
                let hi = g.slice(c, 1, 0, 2).unwrap();
                g.add(lo, hi).unwrap()
            }
            Step::Transpose => g.transpose_last2(x).unwrap(),
            Step::SoftmaxChannels => g.softmax(x, 1).unwrap(),
            Step::AddBias => g.add_bias(x, leaf(), 1).unwrap(),
            Step::MulChannels => g.mul_channels(x, leaf()).unwrap(),
            Step::ScaleBy => g.scale_by(x, leaf()).unwrap(),
            Step::Clamp => g.clamp(x, -0.6, 0.6),
            Step::MatMul => {
                let flat = g.reshape(x, &[8, 4]).unwrap();
                let y = g.matmul(flat, leaf()).unwrap();
                g.reshape(y, &SHAPE).unwrap()
            }
            Step::BatchMatMul => {
                let b = g.reshape(x, &[2, 4, 4]).unwrap();
                let y = g.batch_matmul(b, leaf()).unwrap();
                g.reshape(y, &SHAPE).unwrap()
            }
        };
    }
    let w = g.input(r.weights.clone());
    let weighted = g.mul(x, w).unwrap();
    let loss = g.sum(weighted);
    (g, loss, vars)
}

fn loss_at(r: &Recipe, leaves: &[Tensor]) -> f64 {
    let (g, loss, _) = build(r, leaves);
    g.value(loss).item()
}

fn central_difference(r: &Recipe, leaf: usize, k: usize, h: f64) -> f64 {
    let mut plus = r.leaves.clone();
    plus[leaf].data_mut()[k] += h;
    let mut minus = r.leaves.clone();
    minus[leaf].data_mut()[k] -= h;
    (loss_at(r, &plus) - loss_at(r, &minus)) / (2.0 * h)
}

/// Norm-wise relative error between analytic and numeric gradients over all
/// leaves. `None` when both are numerically zero, or when a relu, abs,
/// clamp, minimum or max-pool input sits so close to its kink that two step
/// sizes disagree.
fn check(seed: u64, len: usize) -> Option<f64> {
    let r = recipe(seed, len);
    let (g, loss, vars) = build(&r, &r.leaves);
    if !g.value(loss).is_finite() {
        return None;
    }
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (li, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(r.leaves[li].shape()));
        for k in 0..r.leaves[li].numel() {
            let numeric = central_difference(&r, li, k, STEP);
            let finer = central_difference(&r, li, k, STEP / 8.0);
            if (numeric - finer).abs() > 1e-3 * numeric.abs().max(1.0) {
                return None;
            }
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-10 {
        return None;
    }
    Some(diff.sqrt() / scale)
}

#[test]
fn random_five_op_graphs_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..140 {
        if let Some(err) = check(seed, 5) {
            assert!(err < 1e-4, "seed {seed}: {:?} rel err {err:e}", recipe(seed, 5).steps);
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} non-degenerate graphs");
}

#[test]
fn every_operator_is_exercised_alone() {
    for (i, &s) in ALL.iter().enumerate() {
        let r = Recipe {
            steps: vec![s],
            ..recipe(1000 + i as u64, 0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77 + i as u64);
        let mut leaves = vec![random_tensor(&mut rng, &SHAPE)];
        if let Some(shape) = leaf_shape(s) {
            leaves.push(random_tensor(&mut rng, &shape));
        }
        let r = Recipe { leaves, ..r };
        let (g, loss, vars) = build(&r, &r.leaves);
        let grads = g.backward(loss).unwrap();
        for (li, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).unwrap();
            for k in 0..r.leaves[li].numel() {
                let numeric = central_difference(&r, li, k, STEP);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-3),
                    "{s:?} leaf {li}[{k}]: {a} vs {numeric}"
                );
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for axis in 0..3 {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 5, 4], (0..60).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let shape = g.shape(s).to_vec();
        let data = g.value(s).data();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|a| data[(o * shape[axis] + a) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
