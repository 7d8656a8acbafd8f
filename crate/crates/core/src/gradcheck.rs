//! Central finite-difference checks for every differentiable engine op.
//!
//! Each check builds a small random problem in 64-bit, composes the op with
//! an MSE loss against a random target, and compares the tape's gradients
//! with `(L(x + h) − L(x − h)) / 2h` for every input element. The error of a
//! trial is measured in the max norm relative to the larger gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{BatchNormStats, Mode, Shape, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Max-norm relative error between two gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error over all inputs of `f`, comparing tape gradients
/// against central differences with step `h`.
pub fn check_op<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = shape.into();
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Values whose 2×2 windows have a unique maximum separated by more than
/// the finite-difference step, so no tie can flip under perturbation.
fn tie_free(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let shape = shape.into();
    let n = shape.numel();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let data = ranks.into_iter().map(|r| r as f64 * 0.05 - 1.0).collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

type Problem = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn problem(op: &str, rng: &mut ChaCha8Rng) -> Problem {
    let target = |rng: &mut ChaCha8Rng, s: [usize; 4]| uniform(rng, s, -1.0, 1.0);
    match op {
        "conv2d" => {
            let (x, w, b) = (
                uniform(rng, [1, 2, 5, 5], -1.0, 1.0),
                uniform(rng, [3, 2, 3, 3], -0.5, 0.5),
                uniform(rng, [1, 3, 1, 1], -0.5, 0.5),
            );
            let t = target(rng, [1, 3, 5, 5]);
            (
                vec![x, w, b],
                Box::new(move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2])?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "conv2d_transpose" => {
            let (x, w, b) = (
                uniform(rng, [2, 3, 3, 3], -1.0, 1.0),
                uniform(rng, [3, 2, 2, 2], -0.5, 0.5),
                uniform(rng, [1, 2, 1, 1], -0.5, 0.5),
            );
            let t = target(rng, [2, 2, 6, 6]);
            (
                vec![x, w, b],
                Box::new(move |tape, v| {
                    let y = tape.conv2d_transpose(v[0], v[1], v[2], 2)?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "maxpool2x2" => {
            let x = tie_free(rng, [2, 2, 4, 6]);
            let t = target(rng, [2, 2, 2, 3]);
            (
                vec![x],
                Box::new(move |tape, v| {
                    let y = tape.maxpool2x2(v[0])?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "relu" => {
            let x = away_from_zero(rng, [2, 3, 4, 4]);
            let t = target(rng, [2, 3, 4, 4]);
            (
                vec![x],
                Box::new(move |tape, v| {
                    let y = tape.relu(v[0]);
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "sigmoid" => {
            let x = uniform(rng, [2, 3, 4, 4], -4.0, 4.0);
            let t = uniform(rng, [2, 3, 4, 4], 0.0, 1.0);
            (
                vec![x],
                Box::new(move |tape, v| {
                    let y = tape.sigmoid(v[0]);
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "add" => {
            let (a, b) = (uniform(rng, [2, 2, 3, 3], -1.0, 1.0), uniform(rng, [2, 2, 3, 3], -1.0, 1.0));
            let t = target(rng, [2, 2, 3, 3]);
            (
                vec![a, b],
                Box::new(move |tape, v| {
                    let y = tape.add(v[0], v[1])?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if op == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            let x = uniform(rng, [3, 2, 3, 3], -2.0, 2.0);
            let g = uniform(rng, [1, 2, 1, 1], 0.5, 1.5);
            let b = uniform(rng, [1, 2, 1, 1], -0.5, 0.5);
            let t = target(rng, [3, 2, 3, 3]);
            let mut stats = BatchNormStats::<f64>::new(2);
            stats.mean = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            stats.var = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
            (
                vec![x, g, b],
                Box::new(move |tape, v| {
                    let mut s = stats.clone();
                    let y = tape.batch_norm(v[0], v[1], v[2], &mut s, mode)?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        "mse_loss" => {
            let (p, t) = (uniform(rng, [2, 1, 4, 4], -1.0, 1.0), uniform(rng, [2, 1, 4, 4], -1.0, 1.0));
            (vec![p, t], Box::new(|tape, v| tape.mse_loss(v[0], v[1])))
        }
        "conv_relu_bn_chain" => {
            let x = uniform(rng, [2, 2, 4, 4], -1.0, 1.0);
            let w = uniform(rng, [2, 2, 3, 3], -0.5, 0.5);
            let b = uniform(rng, [1, 2, 1, 1], -0.1, 0.1);
            let g = uniform(rng, [1, 2, 1, 1], 0.5, 1.5);
            let be = uniform(rng, [1, 2, 1, 1], -0.5, 0.5);
            let t = target(rng, [2, 2, 4, 4]);
            (
                vec![x, w, b, g, be],
                Box::new(move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2])?;
                    let y = tape.add(y, v[0])?;
                    let y = tape.sigmoid(y);
                    let mut s = BatchNormStats::new(2);
                    let y = tape.batch_norm(y, v[3], v[4], &mut s, Mode::Train)?;
                    let t = tape.leaf(t.clone());
                    tape.mse_loss(y, t)
                }),
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Ops covered by [`run_suite`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_transpose",
    "maxpool2x2",
    "relu",
    "sigmoid",
    "add",
    "batch_norm_train",
    "batch_norm_eval",
    "mse_loss",
    "conv_relu_bn_chain",
];

/// Runs `trials` random problems for one op.
pub fn check_named(op: &str, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (inputs, f) = problem(op, &mut rng);
        worst = worst.max(check_op(&inputs, STEP, f)?);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        trials,
        max_rel_error: worst,
        tolerance: TOLERANCE,
        passed: worst <= TOLERANCE,
    })
}

/// The full suite over [`OPS`].
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_named(op, trials, seed.wrapping_add(i as u64)))
        .collect()
}
