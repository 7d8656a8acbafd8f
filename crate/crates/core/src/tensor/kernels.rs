//! Forward and backward kernels over raw tensors. The tape wires these together.

use super::{Scalar, Shape, Tensor};

/// Unfolds one `C×H×W` item into a `(C·k·k) × (H·W)` matrix with zero
/// same-padding.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[((ci * k + i) * k + j) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + i as isize - pad as isize;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + j as isize - pad as isize;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for i in 0..k {
            for j in 0..k {
                let row = &cols[((ci * k + i) * k + j) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + i as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = x as isize + j as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let [co, _, k, _] = weight.shape().0;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros([n, co, h, w]);
    let mut cols = vec![T::zero(); ckk * hw];
    for ni in 0..n {
        let item = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        im2col(item, c, h, w, k, &mut cols);
        let y = &mut out.data_mut()[ni * co * hw..(ni + 1) * co * hw];
        for (o, plane) in y.chunks_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        T::gemm(co, ckk, hw, weight.data(), false, &cols, false, T::one(), y);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> ConvGrads<T> {
    let [n, c, h, w] = x.shape().0;
    let [co, _, k, _] = weight.shape().0;
    let hw = h * w;
    let ckk = c * k * k;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
    let mut cols = vec![T::zero(); ckk * hw];
    let mut gcols = vec![T::zero(); ckk * hw];
    for ni in 0..n {
        let item = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let gy = &grad_out.data()[ni * co * hw..(ni + 1) * co * hw];
        im2col(item, c, h, w, k, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(co, hw, ckk, gy, false, &cols, true, T::one(), gw.data_mut());
        // dcols = Wᵀ · dY
        T::gemm(ckk, co, hw, weight.data(), true, gy, false, T::zero(), &mut gcols);
        col2im(&gcols, c, h, w, k, &mut gx.data_mut()[ni * c * hw..(ni + 1) * c * hw]);
        for (o, plane) in gy.chunks(hw).enumerate() {
            let s: T = plane.iter().copied().sum();
            gb.data_mut()[o] = gb.data()[o] + s;
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Transposed convolution with kernel == stride, weight laid out `[C_in, C_out, k, k]`.
pub fn conv2d_transpose<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [n, ci, h, w] = x.shape().0;
    let [_, co, k, _] = weight.shape().0;
    let hw = h * w;
    let (oh, ow) = (h * k, w * k);
    let rows = co * k * k;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = vec![T::zero(); rows * hw];
    for ni in 0..n {
        let item = &x.data()[ni * ci * hw..(ni + 1) * ci * hw];
        T::gemm(rows, ci, hw, weight.data(), true, item, false, T::zero(), &mut cols);
        let y = &mut out.data_mut()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        for o in 0..co {
            let b = bias.data()[o];
            for i in 0..k {
                for j in 0..k {
                    let row = &cols[((o * k + i) * k + j) * hw..][..hw];
                    for yy in 0..h {
                        let dst = &mut y[(o * oh + yy * k + i) * ow..][..ow];
                        for xx in 0..w {
                            dst[xx * k + j] = row[yy * w + xx] + b;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let [n, ci, h, w] = x.shape().0;
    let [_, co, k, _] = weight.shape().0;
    let hw = h * w;
    let (oh, ow) = (h * k, w * k);
    let rows = co * k * k;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
    let mut gcols = vec![T::zero(); rows * hw];
    for ni in 0..n {
        let gy = &grad_out.data()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        for o in 0..co {
            let s: T = gy[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum();
            gb.data_mut()[o] = gb.data()[o] + s;
            for i in 0..k {
                for j in 0..k {
                    let row = &mut gcols[((o * k + i) * k + j) * hw..][..hw];
                    for yy in 0..h {
                        let src = &gy[(o * oh + yy * k + i) * ow..][..ow];
                        for xx in 0..w {
                            row[yy * w + xx] = src[xx * k + j];
                        }
                    }
                }
            }
        }
        let item = &x.data()[ni * ci * hw..(ni + 1) * ci * hw];
        T::gemm(ci, rows, hw, weight.data(), false, &gcols, false, T::zero(), &mut gx.data_mut()[ni * ci * hw..(ni + 1) * ci * hw]);
        T::gemm(ci, hw, rows, item, false, &gcols, true, T::one(), gw.data_mut());
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2×2 max pooling; also returns the flat input index each output came from.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for idx in [
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ] {
                    // strict comparison keeps the first row-major maximum
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    (out, argmax)
}

/// Per-channel batch statistics over `(N, H, W)`: (mean, biased variance).
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape().0;
    let count = (n * x.shape().plane()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x.plane(ni, ci).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for ni in 0..n {
            ss += x
                .plane(ni, ci)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = ss / count;
    }
    (mean, var)
}

/// Applies `γ·(x − mean)·inv_std + β` per channel; returns `(y, x̂)`.
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = x.shape().0;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let (m, s) = (T::of(mean[ci]), T::of(inv_std[ci]));
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let src = x.plane(ni, ci);
            let xh = xhat.plane_mut(ni, ci);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * s;
            }
            let xh = xhat.plane(ni, ci).to_vec();
            for (d, v) in y.plane_mut(ni, ci).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    (y, xhat)
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of batch normalization. With `batch_stats` the mean and variance
/// depend on the input (training); otherwise they are constants (inference).
pub fn normalize_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[f64],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    batch_stats: bool,
) -> NormGrads<T> {
    let [n, c, _, _] = xhat.shape().0;
    let m = (n * xhat.shape().plane()) as f64;
    let mut gx = Tensor::zeros(xhat.shape());
    let mut ggamma = Tensor::zeros(Shape::new(1, c, 1, 1));
    let mut gbeta = Tensor::zeros(Shape::new(1, c, 1, 1));
    for (ci, &istd) in inv_std.iter().enumerate().take(c) {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            for (&g, &xh) in grad_out.plane(ni, ci).iter().zip(xhat.plane(ni, ci)) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * xh.as_f64();
            }
        }
        ggamma.data_mut()[ci] = T::of(sum_gx);
        gbeta.data_mut()[ci] = T::of(sum_g);
        let scale = gamma.data()[ci].as_f64() * istd;
        for ni in 0..n {
            let go = grad_out.plane(ni, ci).to_vec();
            let xh = xhat.plane(ni, ci).to_vec();
            for ((d, g), xh) in gx.plane_mut(ni, ci).iter_mut().zip(go).zip(xh) {
                let g = g.as_f64();
                *d = if batch_stats {
                    T::of(scale / m * (m * g - sum_g - xh.as_f64() * sum_gx))
                } else {
                    T::of(scale * g)
                };
            }
        }
    }
    NormGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where the exact value rounds to 0 or 1.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    if s.is_nan() {
        return s;
    }
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}
