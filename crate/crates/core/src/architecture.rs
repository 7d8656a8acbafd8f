//! The fully residual encoder–decoder.
//!
//! Every level is `conv → residual → conv`. Encoder levels end in a 2×2 max
//! pool; decoder levels start with a 2×2 stride-2 transposed convolution whose
//! output is *added* to the encoder feature map of the same resolution. The
//! residual block itself is three green blocks (conv, ReLU, batch norm) with an
//! identity shortcut. A final convolution and sigmoid produce the probability
//! map.
//!
//! `levels` counts down/up pairs; the bridge sits below the deepest pair. The
//! 640×640 network with four pairs has five resolutions, 640 down to 40.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    he_normal, BatchNormStats, Mode, ParamStore, Scalar, Shape, Tape, Tensor, Var,
};

/// Order of operations inside a green block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    /// conv → ReLU → batch norm.
    #[default]
    ConvReluBn,
    /// conv → batch norm → ReLU.
    ConvBnRelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub levels: usize,
    pub base_features: usize,
    /// `[height, width]` of the training input.
    pub input_size: [usize; 2],
    pub input_channels: usize,
    pub output_channels: usize,
    pub kernel_size: usize,
    pub block_order: BlockOrder,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            levels: 2,
            base_features: 8,
            input_size: [64, 64],
            input_channels: 1,
            output_channels: 1,
            kernel_size: 3,
            block_order: BlockOrder::ConvReluBn,
        }
    }
}

impl NetworkSpec {
    /// Four down/up pairs, 64 base features, 640×640 input.
    pub fn full_size() -> Self {
        NetworkSpec {
            levels: 4,
            base_features: 64,
            input_size: [640, 640],
            ..Self::default()
        }
    }

    /// Feature maps at encoder/decoder level `level` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_features << (level - 1)
    }

    pub fn bridge_width(&self) -> usize {
        self.base_features << self.levels
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.base_features == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return bad("feature and channel counts must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        self.check_spatial(self.input_size[0], self.input_size[1])
    }

    /// Whether an `h×w` input can pass through every pooling level.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::shape(
                "network input",
                format!(
                    "{h}×{w} is not divisible by 2^{} = {d} in both dimensions",
                    self.levels
                ),
            ));
        }
        Ok(())
    }

    /// Feature-map sizes of every stage, derived without running the network.
    pub fn layer_plan(&self) -> Result<LayerPlan> {
        self.validate()?;
        let [h, w] = self.input_size;
        let mut rows = vec![PlanRow::new("inputs", "", &[(h, w, self.input_channels)])];
        let mut skips = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for d in 1..=self.levels {
            let width = self.width(d);
            skips.push((ch, cw, width));
            rows.push(PlanRow::new(
                format!("down {d}"),
                "conv + res + conv + maxpooling",
                &[(ch, cw, width), (ch / 2, cw / 2, width)],
            ));
            ch /= 2;
            cw /= 2;
        }
        rows.push(PlanRow::new(
            "bridge",
            "conv + res + conv",
            &[(ch, cw, self.bridge_width())],
        ));
        for d in (1..=self.levels).rev() {
            let width = self.width(d);
            let merged = (ch * 2, cw * 2, width);
            if merged != skips[d - 1] {
                return Err(Error::shape(
                    "layer plan",
                    format!("decoder level {d} produces {merged:?}, encoder skip is {:?}", skips[d - 1]),
                ));
            }
            ch *= 2;
            cw *= 2;
            rows.push(PlanRow::new(
                format!("upscaling {d}"),
                "deconv + merge + conv + res + conv",
                &[merged, (ch, cw, width)],
            ));
        }
        rows.push(PlanRow::new("output", "conv", &[(ch, cw, self.output_channels)]));
        Ok(LayerPlan { rows })
    }

    /// Names and shapes of every parameter in build order.
    pub fn parameter_layout(&self) -> Result<Vec<(String, Shape)>> {
        self.validate()?;
        let mut sink = LayoutSink::default();
        Topology::declare(self, &mut sink);
        Ok(sink.params)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.parameter_layout()?.iter().map(|(_, s)| s.numel()).sum())
    }
}

/// One row of the architecture table: `(height, width, channels)` per stage output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub block: String,
    pub ops: String,
    pub sizes: Vec<(usize, usize, usize)>,
}

impl PlanRow {
    fn new(block: impl Into<String>, ops: impl Into<String>, sizes: &[(usize, usize, usize)]) -> Self {
        PlanRow {
            block: block.into(),
            ops: ops.into(),
            sizes: sizes.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub rows: Vec<PlanRow>,
}

impl LayerPlan {
    pub fn row(&self, block: &str) -> Option<&PlanRow> {
        self.rows.iter().find(|r| r.block == block)
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            let sizes: Vec<String> = r.sizes.iter().map(|(h, w, c)| format!("{h}×{w}×{c}")).collect();
            writeln!(f, "{:<12} {:<36} {}", r.block, r.ops, sizes.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He normal with the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

trait Sink {
    fn param(&mut self, name: String, shape: Shape, init: Init) -> usize;
    fn stats(&mut self, name: String, channels: usize) -> usize;
}

#[derive(Default)]
struct LayoutSink {
    params: Vec<(String, Shape)>,
    stats: usize,
}

impl Sink for LayoutSink {
    fn param(&mut self, name: String, shape: Shape, _: Init) -> usize {
        self.params.push((name, shape));
        self.params.len() - 1
    }
    fn stats(&mut self, _: String, _: usize) -> usize {
        self.stats += 1;
        self.stats - 1
    }
}

struct StoreSink<T> {
    seed: u64,
    params: ParamStore<T>,
    stats: Vec<(String, BatchNormStats<T>)>,
}

impl<T: Scalar> Sink for StoreSink<T> {
    fn param(&mut self, name: String, shape: Shape, init: Init) -> usize {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::He(fan_in) => {
                // one independent stream per parameter keeps layouts stable
                let stream = self.seed ^ (self.params.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                he_normal(shape, fan_in, stream)
            }
        };
        self.params
            .insert(name, value)
            .expect("layout names are unique by construction")
    }

    fn stats(&mut self, name: String, channels: usize) -> usize {
        self.stats.push((name, BatchNormStats::new(channels)));
        self.stats.len() - 1
    }
}

/// conv → ReLU → BN (or conv → BN → ReLU).
#[derive(Clone, Copy, Debug)]
struct Green {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct Residual {
    blocks: [Green; 3],
    width: usize,
}

/// `conv + res + conv`.
#[derive(Clone, Copy, Debug)]
struct Stage {
    conv_in: Green,
    res: Residual,
    conv_out: Green,
}

#[derive(Clone, Copy, Debug)]
struct Up {
    deconv_weight: usize,
    deconv_bias: usize,
    stage: Stage,
}

#[derive(Clone, Debug)]
struct Topology {
    down: Vec<Stage>,
    bridge: Stage,
    /// Indexed by level − 1.
    up: Vec<Up>,
    head_weight: usize,
    head_bias: usize,
}

impl Topology {
    fn green(sink: &mut impl Sink, spec: &NetworkSpec, path: &str, cin: usize, cout: usize) -> Green {
        let k = spec.kernel_size;
        Green {
            weight: sink.param(format!("{path}.weight"), Shape::new(cout, cin, k, k), Init::He(cin * k * k)),
            bias: sink.param(format!("{path}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros),
            gamma: sink.param(format!("{path}.gamma"), Shape::new(1, cout, 1, 1), Init::Ones),
            beta: sink.param(format!("{path}.beta"), Shape::new(1, cout, 1, 1), Init::Zeros),
            stats: sink.stats(format!("{path}.running"), cout),
        }
    }

    fn stage(sink: &mut impl Sink, spec: &NetworkSpec, path: &str, cin: usize, width: usize) -> Stage {
        let conv_in = Self::green(sink, spec, &format!("{path}.conv_in"), cin, width);
        let blocks = [1, 2, 3].map(|i| Self::green(sink, spec, &format!("{path}.res.conv{i}"), width, width));
        let conv_out = Self::green(sink, spec, &format!("{path}.conv_out"), width, width);
        Stage {
            conv_in,
            res: Residual { blocks, width },
            conv_out,
        }
    }

    fn declare(spec: &NetworkSpec, sink: &mut impl Sink) -> Self {
        let mut down = Vec::with_capacity(spec.levels);
        let mut cin = spec.input_channels;
        for d in 1..=spec.levels {
            down.push(Self::stage(sink, spec, &format!("down{d}"), cin, spec.width(d)));
            cin = spec.width(d);
        }
        let bridge = Self::stage(sink, spec, "bridge", cin, spec.bridge_width());
        let mut up: Vec<Option<Up>> = vec![None; spec.levels];
        let mut cin = spec.bridge_width();
        for d in (1..=spec.levels).rev() {
            let width = spec.width(d);
            let path = format!("up{d}");
            let deconv_weight = sink.param(
                format!("{path}.deconv.weight"),
                Shape::new(cin, width, 2, 2),
                Init::He(cin),
            );
            let deconv_bias = sink.param(format!("{path}.deconv.bias"), Shape::new(1, width, 1, 1), Init::Zeros);
            let stage = Self::stage(sink, spec, &path, width, width);
            up[d - 1] = Some(Up {
                deconv_weight,
                deconv_bias,
                stage,
            });
            cin = width;
        }
        let k = spec.kernel_size;
        let out = spec.output_channels;
        let head_weight = sink.param("head.weight".into(), Shape::new(out, cin, k, k), Init::He(cin * k * k));
        let head_bias = sink.param("head.bias".into(), Shape::new(1, out, 1, 1), Init::Zeros);
        Topology {
            down,
            bridge,
            up: up.into_iter().map(|u| u.expect("every level declared")).collect(),
            head_weight,
            head_bias,
        }
    }

    fn residual(&self, id: ResidualId) -> Residual {
        match id {
            ResidualId::Down(d) => self.down[d - 1].res,
            ResidualId::Bridge => self.bridge.res,
            ResidualId::Up(d) => self.up[d - 1].stage.res,
        }
    }
}

/// Addresses one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualId {
    Down(usize),
    Bridge,
    Up(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace every residual block by its identity shortcut. Diagnostic only:
    /// it describes the function a network computes when all residual branches
    /// are exactly zero.
    pub bypass_residual: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            bypass_residual: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            bypass_residual: false,
        }
    }
}

/// An instantiated network: spec, parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct FusionNet<T = f32> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    stats: Vec<(String, BatchNormStats<T>)>,
    topo: Topology,
}

impl<T: Scalar> FusionNet<T> {
    /// Instantiates every parameter in a deterministic order from `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.layer_plan()?;
        let mut sink = StoreSink {
            seed,
            params: ParamStore::new(),
            stats: Vec::new(),
        };
        let topo = Topology::declare(&spec, &mut sink);
        Ok(FusionNet {
            spec,
            params: sink.params,
            stats: sink.stats,
            topo,
        })
    }

    /// Reassembles a network from stored tensors. Names, order and shapes
    /// must match the layout of `spec`.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<(String, Tensor<T>)>,
        stats: Vec<(String, BatchNormStats<T>)>,
    ) -> Result<Self> {
        let mut net = FusionNet::build(spec, 0)?;
        if params.len() != net.params.len() || stats.len() != net.stats.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters and {} norm layers, got {} and {}",
                net.params.len(),
                net.stats.len(),
                params.len(),
                stats.len()
            )));
        }
        for (i, (name, value)) in params.into_iter().enumerate() {
            let slot = net.params.get_mut(i);
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {i}: expected `{}` {}, got `{name}` {}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                )));
            }
            slot.value = value;
        }
        for (slot, (name, st)) in net.stats.iter_mut().zip(stats) {
            if slot.0 != name || slot.1.channels() != st.channels() || st.var.len() != st.mean.len() {
                return Err(Error::InvalidArgument(format!(
                    "norm layer `{}` does not match stored `{name}`",
                    slot.0
                )));
            }
            slot.1 = st;
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Named batch-norm running statistics in build order.
    pub fn running_stats(&self) -> &[(String, BatchNormStats<T>)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, BatchNormStats<T>)] {
        &mut self.stats
    }

    /// Name of the first convolution's weight (the input layer).
    pub fn input_layer(&self) -> &str {
        &self.params.get(self.topo.down[0].conv_in.weight).name
    }

    /// Sets γ and β of the last green block in every residual branch to zero,
    /// so each branch outputs exactly zero.
    pub fn zero_residual_branches(&mut self) {
        let mut ids = vec![ResidualId::Bridge];
        for d in 1..=self.spec.levels {
            ids.push(ResidualId::Down(d));
            ids.push(ResidualId::Up(d));
        }
        for id in ids {
            let last = self.topo.residual(id).blocks[2];
            for p in [last.gamma, last.beta] {
                self.params.get_mut(p).value.data_mut().fill(T::zero());
            }
        }
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c() != self.spec.input_channels {
            return Err(Error::shape(
                "forward",
                format!("input {s} has {} channels, network expects {}", s.c(), self.spec.input_channels),
            ));
        }
        self.spec.check_spatial(s.h(), s.w())
    }

    /// Starts a pass that records onto `tape`. Train mode updates the running
    /// statistics.
    pub fn pass<'a>(&'a mut self, tape: &mut Tape<T>, opts: ForwardOptions) -> Pass<'a, T> {
        let vars = (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect();
        let stats = match opts.mode {
            Mode::Train => Stats::Train(&mut self.stats),
            Mode::Eval => Stats::Eval(&self.stats),
        };
        Pass {
            spec: &self.spec,
            topo: &self.topo,
            vars,
            stats,
            opts,
        }
    }

    /// Read-only inference pass.
    pub fn eval_pass<'a>(&'a self, tape: &mut Tape<T>) -> Pass<'a, T> {
        let vars = (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect();
        Pass {
            spec: &self.spec,
            topo: &self.topo,
            vars,
            stats: Stats::Eval(&self.stats),
            opts: ForwardOptions::eval(),
        }
    }

    /// Full network on tape; returns the probability map.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, opts: ForwardOptions) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut pass = self.pass(tape, opts);
        pass.run(tape, x)
    }

    /// Eval-mode probability map. Deterministic and safe to call concurrently.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut pass = self.eval_pass(&mut tape);
        let y = pass.run(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

enum Stats<'a, T> {
    Train(&'a mut [(String, BatchNormStats<T>)]),
    Eval(&'a [(String, BatchNormStats<T>)]),
}

/// Block-level access to one forward pass.
pub struct Pass<'a, T> {
    spec: &'a NetworkSpec,
    topo: &'a Topology,
    vars: Vec<Var>,
    stats: Stats<'a, T>,
    opts: ForwardOptions,
}

impl<T: Scalar> Pass<'_, T> {
    fn green(&mut self, tape: &mut Tape<T>, g: Green, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.vars[g.weight], self.vars[g.bias])?;
        let (gamma, beta) = (self.vars[g.gamma], self.vars[g.beta]);
        let mut norm = |tape: &mut Tape<T>, v: Var| match &mut self.stats {
            Stats::Train(s) => tape.batch_norm(v, gamma, beta, &mut s[g.stats].1, Mode::Train),
            Stats::Eval(s) => tape.batch_norm_eval(v, gamma, beta, &s[g.stats].1),
        };
        match self.spec.block_order {
            BlockOrder::ConvReluBn => {
                let y = tape.relu(y);
                norm(tape, y)
            }
            BlockOrder::ConvBnRelu => {
                let y = norm(tape, y)?;
                Ok(tape.relu(y))
            }
        }
    }

    /// `x + F(x)` with F three green blocks of the block's width.
    pub fn residual_block(&mut self, tape: &mut Tape<T>, id: ResidualId, x: Var) -> Result<Var> {
        let res = self.topo.residual(id);
        let s = tape.shape(x);
        if s.c() != res.width {
            return Err(Error::shape(
                "residual_block",
                format!("input {s} has {} channels, block width is {}", s.c(), res.width),
            ));
        }
        if self.opts.bypass_residual {
            return Ok(x);
        }
        let mut f = x;
        for g in res.blocks {
            f = self.green(tape, g, f)?;
        }
        tape.add(x, f)
    }

    fn stage(&mut self, tape: &mut Tape<T>, stage: Stage, id: ResidualId, x: Var) -> Result<Var> {
        let h = self.green(tape, stage.conv_in, x)?;
        let h = self.residual_block(tape, id, h)?;
        self.green(tape, stage.conv_out, h)
    }

    /// Encoder level `level` (1-based): returns `(skip, pooled)`.
    pub fn encoder_level(&mut self, tape: &mut Tape<T>, level: usize, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(Error::shape("encoder_level", format!("input {s} has odd spatial dims")));
        }
        let stage = self.topo.down[level - 1];
        let skip = self.stage(tape, stage, ResidualId::Down(level), x)?;
        let pooled = tape.maxpool2x2(skip)?;
        Ok((skip, pooled))
    }

    pub fn bridge(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let stage = self.topo.bridge;
        self.stage(tape, stage, ResidualId::Bridge, x)
    }

    /// The transposed convolution that opens decoder level `level`.
    pub fn upsample(&mut self, tape: &mut Tape<T>, level: usize, x: Var) -> Result<Var> {
        let up = self.topo.up[level - 1];
        tape.conv2d_transpose(x, self.vars[up.deconv_weight], self.vars[up.deconv_bias], 2)
    }

    /// `conv + res + conv` of decoder level `level`, applied after the merge.
    pub fn decoder_stage(&mut self, tape: &mut Tape<T>, level: usize, merged: Var) -> Result<Var> {
        let stage = self.topo.up[level - 1].stage;
        self.stage(tape, stage, ResidualId::Up(level), merged)
    }

    /// Decoder level `level`: upsample, add the encoder skip, then conv + res + conv.
    pub fn decoder_level(&mut self, tape: &mut Tape<T>, level: usize, x: Var, skip: Var) -> Result<Var> {
        let u = self.upsample(tape, level, x)?;
        let (su, ss) = (tape.shape(u), tape.shape(skip));
        if su != ss {
            return Err(Error::ShapeMismatch {
                op: "decoder_level merge",
                left: su,
                right: ss,
            });
        }
        let merged = tape.add(u, skip)?;
        self.decoder_stage(tape, level, merged)
    }

    pub fn head(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.vars[self.topo.head_weight], self.vars[self.topo.head_bias])?;
        Ok(tape.sigmoid(y))
    }

    pub fn run(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let levels = self.spec.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for d in 1..=levels {
            let (skip, pooled) = self.encoder_level(tape, d, h)?;
            skips.push(skip);
            h = pooled;
        }
        h = self.bridge(tape, h)?;
        for d in (1..=levels).rev() {
            h = self.decoder_level(tape, d, h, skips[d - 1])?;
        }
        self.head(tape, h)
    }
}
