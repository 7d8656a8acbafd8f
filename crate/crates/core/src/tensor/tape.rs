use super::kernels;
use super::{ParamStore, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight of the previous running value in the moving average.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var },
    ConvTranspose { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mse { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations. Backward replays it in reverse.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_vector(op: &'static str, what: &str, t: &Shape, len: usize) -> Result<()> {
    if t.numel() != len {
        return Err(Error::shape(
            op,
            format!("{what} has shape {t}, expected {len} elements"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.grad.is_none());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant input. Its gradient is still reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Records parameter `index` of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let mut value = store.get(index).value.clone();
        value.grad = None;
        self.push(value, Op::Param(index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.c() != xs.c() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if ws.h() != ws.w() || ws.h() % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws} must be square with odd size"),
            ));
        }
        check_vector("conv2d", "bias", &self.shape(b), ws.n())?;
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b));
        Ok(self.push(y, Op::Conv2d { x, w, b }))
    }

    /// Transposed convolution that doubles the spatial size. The weight is
    /// `[C_in, C_out, 2, 2]` and `stride` must be 2.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if stride != 2 || ws.h() != 2 || ws.w() != 2 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!(
                    "stride {stride} with kernel {}×{} does not exactly double the output",
                    ws.h(),
                    ws.w()
                ),
            ));
        }
        if ws.n() != xs.c() {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                left: xs,
                right: ws,
            });
        }
        check_vector("conv2d_transpose", "bias", &self.shape(b), ws.c())?;
        let y = kernels::conv2d_transpose(self.value(x), self.value(w), self.value(b));
        Ok(self.push(y, Op::ConvTranspose { x, w, b }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(Error::shape(
                "maxpool2x2",
                format!("spatial dims of {s} must be even"),
            ));
        }
        let (y, argmax) = kernels::maxpool2x2(self.value(x));
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let mut y = self.value(a).clone();
        for (d, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *d = *d + v;
        }
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Batch normalization. Train mode normalizes with batch statistics and
    /// folds them into `stats`; eval mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.batch_norm_impl(x, gamma, beta, stats, true),
            Mode::Eval => self.batch_norm_eval(x, gamma, beta, stats),
        }
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchNormStats<T>) -> Result<Var> {
        // eval never writes the stats; the copy keeps one code path
        let mut unused = stats.clone();
        self.batch_norm_impl(x, gamma, beta, &mut unused, false)
    }

    fn batch_norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        train: bool,
    ) -> Result<Var> {
        let s = self.shape(x);
        check_vector("batch_norm", "gamma", &self.shape(gamma), s.c())?;
        check_vector("batch_norm", "beta", &self.shape(beta), s.c())?;
        if stats.channels() != s.c() {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats have {} channels, input {s}", stats.channels()),
            ));
        }
        let count = s.n() * s.plane();
        if count == 0 {
            return Err(Error::shape("batch_norm", format!("input {s} has no elements per channel")));
        }
        let (mean, inv_std, batch_stats): (Vec<f64>, Vec<f64>, bool) = if train {
            let (mean, var) = kernels::channel_moments(self.value(x));
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let keep = stats.momentum;
            for c in 0..s.c() {
                stats.mean[c] = T::of(keep * stats.mean[c].as_f64() + (1.0 - keep) * mean[c]);
                stats.var[c] = T::of(keep * stats.var[c].as_f64() + (1.0 - keep) * var[c] * unbias);
            }
            let inv = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
            (mean, inv, true)
        } else {
            let mean = stats.mean.iter().map(|v| v.as_f64()).collect();
            let inv = stats
                .var
                .iter()
                .map(|v| 1.0 / (v.as_f64() + stats.eps).sqrt())
                .collect();
            (mean, inv, false)
        };
        let (y, xhat) = kernels::normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Mean squared error as a `1×1×1×1` value.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left: sp,
                right: st,
            });
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let loss = if p.is_empty() { 0.0 } else { sum / p.len() as f64 };
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::Mse { pred, target }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::shape("backward", format!("loss {s} is not a scalar")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(s));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d { x, w, b } => {
                    let r = kernels::conv2d_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, r.input);
                    accumulate(&mut grads, *w, r.weight);
                    accumulate(&mut grads, *b, r.bias);
                }
                Op::ConvTranspose { x, w, b } => {
                    let r = kernels::conv2d_transpose_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, r.input);
                    accumulate(&mut grads, *w, r.weight);
                    accumulate(&mut grads, *b, r.bias);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let d = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] = d[src] + gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let mut gx = g.clone();
                    for (d, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g.clone();
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d = *d * y * (T::one() - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let r = kernels::normalize_backward(
                        xhat,
                        inv_std,
                        self.value(*gamma),
                        &g,
                        *batch_stats,
                    );
                    accumulate(&mut grads, *x, r.input);
                    accumulate(&mut grads, *gamma, r.gamma);
                    accumulate(&mut grads, *beta, r.beta);
                }
                Op::Mse { pred, target } => {
                    let upstream = g.data()[0].as_f64();
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let scale = 2.0 * upstream / p.len().max(1) as f64;
                    let mut gp = Tensor::zeros(p.shape());
                    let mut gt = Tensor::zeros(t.shape());
                    for ((dp, dt), (&a, &b)) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(gt.data_mut().iter_mut())
                        .zip(p.data().iter().zip(t.data()))
                    {
                        let v = scale * (a.as_f64() - b.as_f64());
                        *dp = T::of(v);
                        *dt = T::of(-v);
                    }
                    accumulate(&mut grads, *pred, gp);
                    accumulate(&mut grads, *target, gt);
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn reshape_like<T: Scalar>(g: Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::from_vec(shape, g.into_data()).expect("gradient element count matches")
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Writes parameter gradients into `store`: every parameter gets a grad,
    /// zero when unreachable, summed over every recorded use.
    pub fn store_into(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            p.value.grad = Some(vec![T::zero(); p.value.len()]);
        }
        for &(index, var) in &self.params {
            let Some(g) = &self.grads[var.0] else { continue };
            let p = store.get_mut(index);
            let g = reshape_like(g.clone(), p.value.shape());
            let acc = p.value.grad.get_or_insert_with(Vec::new);
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

/// Runs the reverse pass and populates every parameter's gradient.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
    let grads = tape.backward(loss)?;
    grads.store_into(store);
    Ok(grads)
}
