//! Central finite-difference checks of every tape operator in f64.

use edgefire::tensor::{BatchNormMode, Padding, Result, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const INSTANCES: u64 = 5;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so a kink is never within one step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced far apart relative to the step, shuffled.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn pad(rng: &mut ChaCha8Rng) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// One random instance of every operator, plus a small composite block.
pub fn cases(instance: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c ^ instance);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |op, inputs, build: Build| out.push(Case { op, inputs, build });

    let (n, c, m) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let (h, w, k) = (r.gen_range(4..7), r.gen_range(4..7), [1, 3][r.gen_range(0..2)]);
    let (stride, p) = (r.gen_range(1..3), pad(r));
    push(
        "conv2d",
        vec![rand_tensor(r, &[n, c, h, w]), rand_tensor(r, &[m, c, k, k])],
        Box::new(move |t, v| t.conv2d(v[0], v[1], stride, p)),
    );

    let (stride, p) = (r.gen_range(1..3), pad(r));
    push(
        "depthwise_conv2d",
        vec![rand_tensor(r, &[n, c, h, w]), rand_tensor(r, &[c, 1, 3, 3])],
        Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], stride, p)),
    );

    let (stride, p) = (r.gen_range(1..3), pad(r));
    push(
        "separable_conv2d",
        vec![rand_tensor(r, &[n, c, h, w]), rand_tensor(r, &[c, 1, 3, 3]), rand_tensor(r, &[m, c, 1, 1])],
        Box::new(move |t, v| t.separable_conv2d(v[0], v[1], v[2], stride, p)),
    );

    let bn_n = r.gen_range(2..4);
    push(
        "batch_norm(train)",
        vec![rand_tensor(r, &[bn_n, c, h, w]), rand_tensor(r, &[c]), rand_tensor(r, &[c])],
        Box::new(move |t, v| {
            let mut stats = RunningStats::new(c);
            t.batch_norm(v[0], v[1], v[2], &mut stats, BatchNormMode::Train { momentum: 0.9 }, 1e-3)
        }),
    );

    let stats = RunningStats {
        mean: (0..c).map(|_| r.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| r.gen_range(0.5..2.0)).collect(),
    };
    push(
        "batch_norm(eval)",
        vec![rand_tensor(r, &[n, c, h, w]), rand_tensor(r, &[c]), rand_tensor(r, &[c])],
        Box::new(move |t, v| {
            let mut s = stats.clone();
            t.batch_norm(v[0], v[1], v[2], &mut s, BatchNormMode::Eval, 1e-3)
        }),
    );

    push("relu", vec![off_zero(r, &[n, c, h, w])], Box::new(|t, v| t.relu(v[0])));

    let (size, stride, p) = (r.gen_range(2..4), r.gen_range(1..3), pad(r));
    push(
        "max_pool",
        vec![distinct(r, &[n, c, h, w])],
        Box::new(move |t, v| t.max_pool(v[0], size, stride, p)),
    );

    push(
        "add",
        vec![rand_tensor(r, &[n, c, h]), rand_tensor(r, &[n, c, h])],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "mul",
        vec![rand_tensor(r, &[n, c, h]), rand_tensor(r, &[n, c, h])],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    push("global_avg_pool", vec![rand_tensor(r, &[n, c, h, w])], Box::new(|t, v| t.global_avg_pool(v[0])));
    push(
        "dense",
        vec![rand_tensor(r, &[n, c + 1]), rand_tensor(r, &[c + 1, m]), rand_tensor(r, &[m])],
        Box::new(|t, v| t.dense(v[0], v[1], v[2])),
    );
    push("sigmoid", vec![rand_tensor(r, &[n, m])], Box::new(|t, v| t.sigmoid(v[0])));

    let (rate, seed) = (r.gen_range(0.1..0.6), r.gen());
    push(
        "dropout",
        vec![rand_tensor(r, &[n, c, h])],
        Box::new(move |t, v| t.dropout(v[0], rate, true, &mut ChaCha8Rng::seed_from_u64(seed))),
    );
    push("sum", vec![rand_tensor(r, &[n, c, h])], Box::new(|t, v| t.sum(v[0])));
    push("mean", vec![rand_tensor(r, &[n, c, h])], Box::new(|t, v| t.mean(v[0])));

    let targets: Vec<f64> = (0..n * m).map(|_| f64::from(r.gen_range(0..2u8))).collect();
    push(
        "bce_with_logits",
        vec![rand_tensor(r, &[n, m])],
        Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
    );

    // separable conv, batch norm, relu, residual add, pooling, dense head
    let (bn_n, side) = (r.gen_range(2..4), r.gen_range(4..7));
    push(
        "block",
        vec![
            rand_tensor(r, &[bn_n, c, side, side]),
            rand_tensor(r, &[c, 1, 3, 3]),
            rand_tensor(r, &[c, c, 1, 1]),
            rand_tensor(r, &[c]),
            rand_tensor(r, &[c]),
            rand_tensor(r, &[c, 1]),
            rand_tensor(r, &[1]),
        ],
        Box::new(move |t, v| {
            let mut stats = RunningStats::new(c);
            let y = t.separable_conv2d(v[0], v[1], v[2], 1, Padding::Same)?;
            let y = t.batch_norm(y, v[3], v[4], &mut stats, BatchNormMode::Train { momentum: 0.9 }, 1e-3)?;
            let y = t.sigmoid(y)?;
            let y = t.add(y, v[0])?;
            let y = t.global_avg_pool(y)?;
            let y = t.dense(y, v[5], v[6])?;
            t.sigmoid(y)
        }),
    );
    out
}

/// Scalar loss `sum(op(inputs) * weights)` with fixed random weights.
fn loss(tape: &mut Tape<f64>, case: &Case, vars: &[Var]) -> Result<Var> {
    let y = (case.build)(tape, vars)?;
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let weights = tape.constant(rand_tensor(&mut rng, &shape));
    let prod = tape.mul(y, weights)?;
    tape.sum(prod)
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let l = loss(&mut tape, case, &vars).unwrap();
    tape.value(l).data()[0]
}

/// Largest relative error between analytic and numeric gradients over all
/// inputs of `case`.
pub fn max_rel_error(case: &Case) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.param(x.clone())).collect();
    let l = loss(&mut tape, case, &vars).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(case, &plus) - eval(case, &minus)) / (2.0 * STEP);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
