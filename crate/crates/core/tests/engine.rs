use fusionnet_core::gradcheck::{self, check_op, relative_error};
use fusionnet_core::tensor::{
    adam_step, backward, AdamConfig, AdamState, BatchNormStats, Mode, ParamStore, Shape, Tape, Tensor,
};
use fusionnet_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct summation over the zero-padded input.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().0;
    let [co, _, k, _] = w.shape().0;
    let p = (k / 2) as isize;
    Tensor::from_fn([n, co, h, wd], |ni, o, y, xx| {
        let mut s = b[o];
        for ci in 0..c {
            for i in 0..k {
                for j in 0..k {
                    let sy = y as isize + i as isize - p;
                    let sx = xx as isize + j as isize - p;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                        s += w.at(o, ci, i, j) * x.at(ni, ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        s
    })
}

/// Stride-2 convolution with a 2×2 kernel `w[C_big, C_small, 2, 2]`, mapping
/// `C_small` channels at 2H×2W to `C_big` channels at H×W.
fn strided_conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let [n, cs, h2, w2] = x.shape().0;
    let cb = w.shape().n();
    Tensor::from_fn([n, cb, h2 / 2, w2 / 2], |ni, o, y, xx| {
        let mut s = 0.0;
        for c in 0..cs {
            for i in 0..2 {
                for j in 0..2 {
                    s += w.at(o, c, i, j) * x.at(ni, c, 2 * y + i, 2 * xx + j);
                }
            }
        }
        s
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn run_conv(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.conv2d(x, w, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut k = Tensor::zeros([1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let x = Tensor::ones([1, 1, 3, 3]);
    let y = run_conv(x.clone(), k, Tensor::zeros([1, 1, 1, 1]));
    assert_eq!(y, x);
}

#[test]
fn conv_scalar_affine() {
    let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = run_conv(x, Tensor::full([1, 1, 1, 1], 2.0), Tensor::ones([1, 1, 1, 1]));
    assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random(&mut rng, [1, 2, 5, 5]);
        let w = random(&mut rng, [3, 2, 3, 3]);
        let b = random(&mut rng, [1, 3, 1, 1]);
        let expected = conv_oracle(&x, &w, b.data());
        let got = run_conv(x.cast(), w.cast(), b.cast());
        assert!(got.cast::<f64>().max_abs_diff(&expected) < 1e-5);
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([1, 2, 4, 4]));
    let w = tape.leaf(Tensor::zeros([3, 5, 3, 3]));
    let b = tape.leaf(Tensor::zeros([1, 3, 1, 1]));
    let msg = tape.conv2d(x, w, b).unwrap_err().to_string();
    assert!(msg.contains("1×2×4×4") && msg.contains("3×5×3×3"), "{msg}");
    let w_even = tape.leaf(Tensor::zeros([3, 2, 2, 2]));
    assert!(tape.conv2d(x, w_even, b).is_err());
}

#[test]
fn conv_transpose_single_pixel_broadcast() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full([1, 1, 1, 1], 2.5));
    let w = tape.leaf(Tensor::ones([1, 1, 2, 2]));
    let b = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
    let y = tape.conv2d_transpose(x, w, b, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5; 4]);
}

#[test]
fn conv_transpose_doubles_and_rejects_other_strides() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
    let w = tape.leaf(Tensor::ones([1, 3, 2, 2]));
    let b = tape.leaf(Tensor::zeros([1, 3, 1, 1]));
    let y = tape.conv2d_transpose(x, w, b, 2).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 3, 4, 4));
    assert!(tape.conv2d_transpose(x, w, b, 3).is_err());
    let w3 = tape.leaf(Tensor::ones([1, 3, 3, 3]));
    assert!(tape.conv2d_transpose(x, w3, b, 2).is_err());
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        // big = 3 channels at 3×3, small = 2 channels at 6×6
        let w = random(&mut rng, [3, 2, 2, 2]);
        let x_small = random(&mut rng, [1, 2, 6, 6]);
        let y_big = random(&mut rng, [1, 3, 3, 3]);
        let mut tape = Tape::<f64>::new();
        let (yv, wv, bv) = (
            tape.leaf(y_big.clone()),
            tape.leaf(w.clone()),
            tape.leaf(Tensor::zeros([1, 2, 1, 1])),
        );
        let up = tape.conv2d_transpose(yv, wv, bv, 2).unwrap();
        let lhs = dot(&strided_conv_oracle(&x_small, &w), &y_big);
        let rhs = dot(&x_small, tape.value(up));
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.leaf(Tensor::full([2, 3, 4, 6], 0.7));
    let y = tape.maxpool2x2(c).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));

    let big = tape.leaf(Tensor::zeros([1, 1, 640, 640]));
    assert_eq!({ let v = tape.maxpool2x2(big).unwrap(); tape.shape(v) }, Shape::new(1, 1, 320, 320));

    let odd = tape.leaf(Tensor::zeros([1, 1, 3, 4]));
    assert!(matches!(tape.maxpool2x2(odd), Err(Error::InvalidShape { .. })));
}

#[test]
fn maxpool_ties_route_to_first_row_major_element() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0));
    let y = tape.maxpool2x2(x).unwrap();
    let t = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
    let loss = tape.mse_loss(y, t).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_examples_and_kink_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let t = tape.leaf(Tensor::full([1, 1, 1, 3], -1.0));
    let loss = tape.mse_loss(y, t).unwrap();
    let g = tape.backward(loss).unwrap();
    let gx = g.wrt(x).unwrap().data();
    assert_eq!(gx[0], 0.0);
    assert_eq!(gx[1], 0.0);
    assert!(gx[2] > 0.0);

    let pos = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![0.1, 5.0, 3.0]).unwrap());
    let y = tape.relu(pos);
    assert_eq!(tape.value(y), tape.value(pos));
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, [3, 2, 5, 5]).map(|v| 4.0 * v + 7.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x);
    let g = tape.leaf(Tensor::ones([1, 2, 1, 1]));
    let b = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
    let mut stats = BatchNormStats::new(2);
    let y = tape.batch_norm(xv, g, b, &mut stats, Mode::Train).unwrap();
    let y = tape.value(y).clone();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    // running stats moved 10% of the way toward the batch statistics
    assert!(stats.mean.iter().all(|&m| (m - 0.7).abs() < 0.1));

    // affine case on the normalized output
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(y);
    let g = tape.leaf(Tensor::full([1, 2, 1, 1], 2.0));
    let b = tape.leaf(Tensor::full([1, 2, 1, 1], 3.0));
    let mut stats = BatchNormStats::new(2);
    let z = tape.batch_norm(xv, g, b, &mut stats, Mode::Train).unwrap();
    let z = tape.value(z);
    let n = z.len() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 3.0).abs() < 1e-4 && (std - 2.0).abs() < 1e-3, "{mean} {std}");
}

#[test]
fn batch_norm_eval_uses_running_stats_and_rejects_empty() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full([1, 1, 2, 2], 3.0));
    let g = tape.leaf(Tensor::ones([1, 1, 1, 1]));
    let b = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
    let mut stats = BatchNormStats::new(1);
    stats.mean = vec![1.0];
    stats.var = vec![4.0 - stats.eps as f32];
    let y = tape.batch_norm(x, g, b, &mut stats, Mode::Eval).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert_eq!(stats.mean, vec![1.0]);

    let empty = tape.leaf(Tensor::zeros([0, 1, 2, 2]));
    assert!(tape.batch_norm(empty, g, b, &mut stats, Mode::Train).is_err());
    let wrong = tape.leaf(Tensor::zeros([1, 3, 1, 1]));
    assert!(tape.batch_norm(x, wrong, b, &mut stats, Mode::Train).is_err());
}

#[test]
fn add_identities_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, [2, 2, 3, 3]);
    let mut tape = Tape::<f64>::new();
    let av = tape.leaf(a.clone());
    let z = tape.leaf(Tensor::zeros(a.shape()));
    let neg = tape.leaf(a.map(|v| -v));
    assert_eq!({ let v = tape.add(av, z).unwrap(); tape.value(v) }, &a);
    let s = tape.add(av, neg).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

    let bv = tape.leaf(random(&mut rng, [2, 2, 3, 3]));
    let y = tape.add(av, bv).unwrap();
    let t = tape.leaf(Tensor::zeros(a.shape()));
    let loss = tape.mse_loss(y, t).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(av).unwrap().data(), g.wrt(bv).unwrap().data());
    assert_eq!(g.wrt(av).unwrap().data(), g.wrt(y).unwrap().data());

    let other = tape.leaf(Tensor::zeros([2, 2, 3, 4]));
    assert!(matches!(tape.add(av, other), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn sigmoid_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, 1, 4], vec![0.0, -100.0, 100.0, -1e6]).unwrap());
    let y = tape.sigmoid(x);
    let y = tape.value(y).data();
    assert_eq!(y[0], 0.5);
    assert!(y[1] < 1e-6 && y[1] > 0.0);
    assert!(y[2] < 1.0);
    assert!(y[3] > 0.0 && y[3].is_finite());
}

#[test]
fn mse_values_and_errors() {
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(Tensor::full([1, 1, 3, 3], 0.25));
    let t = tape.leaf(Tensor::full([1, 1, 3, 3], 0.25));
    let t1 = tape.leaf(Tensor::full([1, 1, 3, 3], -0.75));
    assert_eq!({ let v = tape.mse_loss(p, t).unwrap(); tape.value(v) }.item().unwrap(), 0.0);
    assert_eq!({ let v = tape.mse_loss(p, t1).unwrap(); tape.value(v) }.item().unwrap(), 1.0);
    let bad = tape.leaf(Tensor::zeros([1, 1, 3, 2]));
    assert!(tape.mse_loss(p, bad).is_err());
}

#[test]
fn mse_gradient_within_1e4() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let p = random(&mut rng, [2, 1, 3, 3]);
        let t = random(&mut rng, [2, 1, 3, 3]);
        let err = check_op(&[p, t], 1e-3, |tape, v| tape.mse_loss(v[0], v[1])).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
    let y = tape.relu(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn backward_conv_weight_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, [2, 2, 4, 4]);
    let y = random(&mut rng, [2, 3, 4, 4]);
    let mut store = ParamStore::<f64>::new();
    let wi = store.insert("w", random(&mut rng, [3, 2, 3, 3])).unwrap();
    let bi = store.insert("b", random(&mut rng, [1, 3, 1, 1])).unwrap();
    let unused = store.insert("unused", random(&mut rng, [1, 1, 1, 1])).unwrap();

    let loss_of = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (wv, bv) = (tape.param(store, wi), tape.param(store, bi));
        let out = tape.conv2d(xv, wv, bv).unwrap();
        let yv = tape.leaf(y.clone());
        let loss = tape.mse_loss(out, yv).unwrap();
        (tape, loss)
    };
    let (tape, loss) = loss_of(&store);
    backward(&tape, loss, &mut store).unwrap();
    let analytic = store.get(wi).value.grad.clone().unwrap();
    assert!(store.get(unused).value.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));

    let mut numeric = Vec::new();
    for j in 0..analytic.len() {
        let orig = store.get(wi).value.data()[j];
        let mut eval = |v: f64| {
            store.get_mut(wi).value.data_mut()[j] = v;
            let (tape, loss) = loss_of(&store);
            tape.value(loss).item().unwrap()
        };
        let up = eval(orig + 1e-3);
        let down = eval(orig - 1e-3);
        store.get_mut(wi).value.data_mut()[j] = orig;
        numeric.push((up - down) / 2e-3);
    }
    assert!(relative_error(&analytic, &numeric) <= 1e-3);
}

#[test]
fn reused_parameter_accumulates_both_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, [1, 2, 4, 4]);
    let w = random(&mut rng, [2, 2, 3, 3]);
    let b = random(&mut rng, [1, 2, 1, 1]);
    let target = random(&mut rng, [1, 2, 4, 4]);

    // shared: the same parameter feeds two stacked convolutions
    let mut shared = ParamStore::<f64>::new();
    shared.insert("w", w.clone()).unwrap();
    shared.insert("b", b.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (wv, bv) = (tape.param(&shared, 0), tape.param(&shared, 1));
    let h = tape.conv2d(xv, wv, bv).unwrap();
    let h = tape.add(h, xv).unwrap();
    let out = tape.conv2d(h, wv, bv).unwrap();
    let t = tape.leaf(target.clone());
    let loss = tape.mse_loss(out, t).unwrap();
    backward(&tape, loss, &mut shared).unwrap();

    // expanded: two independent copies of the parameter
    let mut expanded = ParamStore::<f64>::new();
    for name in ["w1", "b1", "w2", "b2"] {
        let v = if name.starts_with('w') { w.clone() } else { b.clone() };
        expanded.insert(name, v).unwrap();
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let vars: Vec<_> = (0..4).map(|i| tape.param(&expanded, i)).collect();
    let h = tape.conv2d(xv, vars[0], vars[1]).unwrap();
    let h = tape.add(h, xv).unwrap();
    let out = tape.conv2d(h, vars[2], vars[3]).unwrap();
    let t = tape.leaf(target);
    let loss = tape.mse_loss(out, t).unwrap();
    backward(&tape, loss, &mut expanded).unwrap();

    let g = |s: &ParamStore<f64>, n: &str| s.by_name(n).unwrap().value.grad.clone().unwrap();
    let sum: Vec<f64> = g(&expanded, "w1").iter().zip(g(&expanded, "w2")).map(|(a, b)| a + b).collect();
    assert!(relative_error(&g(&shared, "w"), &sum) < 1e-12);
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::ones([1, 1, 3, 3])).unwrap();
    let mut tape = Tape::new();
    let _w = tape.param(&store, 0);
    let a = tape.leaf(Tensor::ones([1, 1, 2, 2]));
    let b = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
    let loss = tape.mse_loss(a, b).unwrap();
    backward(&tape, loss, &mut store).unwrap();
    assert!(store.get(0).value.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn gradients_are_additive() {
    // d/dx [mse(relu(x), t) + mse(sigmoid(x), t)] via one tape equals the sum of
    // two separate backward passes.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, [1, 1, 4, 4]);
    let t = random(&mut rng, [1, 1, 4, 4]);
    let single = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(t.clone());
        let y = if which == 0 { tape.relu(xv) } else { tape.sigmoid(xv) };
        let l = tape.mse_loss(y, tv).unwrap();
        tape.backward(l).unwrap().wrt(xv).unwrap().clone()
    };
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let tv = tape.leaf(t.clone());
    let f = tape.relu(xv);
    let g = tape.sigmoid(xv);
    let lf = tape.mse_loss(f, tv).unwrap();
    let lg = tape.mse_loss(g, tv).unwrap();
    let total = tape.add(lf, lg).unwrap();
    let joint = tape.backward(total).unwrap().wrt(xv).unwrap().clone();
    let (a, b) = (single(0), single(1));
    for ((j, a), b) in joint.data().iter().zip(a.data()).zip(b.data()) {
        assert!((j - (a + b)).abs() < 1e-12);
    }
}

fn quadratic_step(store: &mut ParamStore<f64>, state: &mut AdamState<f64>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(store, 0);
    let t = tape.leaf(Tensor::full([1, 1, 1, 1], 3.0));
    let loss = tape.mse_loss(x, t).unwrap();
    backward(&tape, loss, store).unwrap();
    adam_step(store, state).unwrap();
    store.get(0).value.data()[0]
}

#[test]
fn adam_converges_on_quadratic() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::zeros([1, 1, 1, 1])).unwrap();
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(cfg, &store);
    let mut x = 0.0;
    for _ in 0..500 {
        x = quadratic_step(&mut store, &mut state);
    }
    assert!((x - 3.0).abs() < 0.01, "{x}");
    assert_eq!(state.step, 500);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // With bias correction, m̂ = g and v̂ = g², so the first update is
    // lr · g / (|g| + ε) ≈ lr · sign(g).
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::zeros([1, 1, 1, 1])).unwrap();
    let mut state = AdamState::new(AdamConfig::default(), &store);
    let x = quadratic_step(&mut store, &mut state);
    let g = -6.0f64;
    let expected = -1e-4 * g / (g.abs() + 1e-8);
    assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
    assert_eq!(store.get(0).value.grad.as_ref().unwrap(), &vec![0.0]);
}

#[test]
fn adam_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::full([1, 1, 1, 2], 1.5)).unwrap();
    let mut state = AdamState::new(AdamConfig::default(), &store);
    store.zero_grad();
    adam_step(&mut store, &mut state).unwrap();
    assert_eq!(store.get(0).value.data(), &[1.5, 1.5]);

    state.first[0] = vec![0.5, -0.5];
    state.second[0] = vec![0.25, 0.25];
    store.zero_grad();
    adam_step(&mut store, &mut state).unwrap();
    assert!((state.first[0][0] - 0.45).abs() < 1e-15);
    assert!((state.second[0][0] - 0.25 * 0.999).abs() < 1e-15);
}

#[test]
fn adam_rejects_missing_grad() {
    let mut store = ParamStore::<f32>::new();
    store.insert("x", Tensor::zeros([1, 1, 1, 1])).unwrap();
    let mut state = AdamState::new(AdamConfig::default(), &store);
    assert!(matches!(adam_step(&mut store, &mut state), Err(Error::MissingGradient(n)) if n == "x"));
}

#[test]
fn duplicate_parameter_names_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.insert("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
    assert!(store.insert("a", Tensor::zeros([1, 1, 1, 1])).is_err());
}

#[test]
fn every_op_passes_finite_differences() {
    for report in gradcheck::run_suite(3, 99).unwrap() {
        assert!(report.passed, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_padding_preserves_spatial_dims(h in 1usize..9, w in 1usize..9, half in 0usize..3, c in 1usize..3) {
        let k = 2 * half + 1;
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones([1, c, h, w]));
        let wt = tape.leaf(Tensor::ones([2, c, k, k]));
        let b = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
        let y = tape.conv2d(x, wt, b).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(1, 2, h, w));
    }

    #[test]
    fn maxpool_bounded_by_window(vals in proptest::collection::vec(-10.0f32..10.0, 36)) {
        let x = Tensor::from_vec([1, 1, 6, 6], vals).unwrap();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone());
        let y = tape.maxpool2x2(xv).unwrap();
        let y = tape.value(y);
        let global = x.data().iter().cloned().fold(f32::MIN, f32::max);
        for oy in 0..3 {
            for ox in 0..3 {
                let v = y.at(0, 0, oy, ox);
                prop_assert!(v <= global);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    prop_assert!(v >= x.at(0, 0, 2 * oy + dy, 2 * ox + dx));
                }
            }
        }
    }

    #[test]
    fn mse_is_nonnegative_and_zero_only_at_target(
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec([1, 1, 2, 4], a.clone()).unwrap());
        let t = tape.leaf(Tensor::from_vec([1, 1, 2, 4], b.clone()).unwrap());
        let l = { let v = tape.mse_loss(p, t).unwrap(); tape.value(v) }.item().unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        let same = { let v = tape.mse_loss(p, p).unwrap(); tape.value(v) }.item().unwrap();
        prop_assert_eq!(same, 0.0);
    }

    #[test]
    fn ops_keep_values_finite(vals in proptest::collection::vec(-50.0f32..50.0, 32)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec([2, 1, 4, 4], vals).unwrap());
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        let a = tape.add(s, r).unwrap();
        let g = tape.leaf(Tensor::ones([1, 1, 1, 1]));
        let b = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
        let mut st = BatchNormStats::new(1);
        let n = tape.batch_norm(a, g, b, &mut st, Mode::Train).unwrap();
        let p = tape.maxpool2x2(n).unwrap();
        prop_assert!(tape.value(p).is_finite());
        prop_assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
