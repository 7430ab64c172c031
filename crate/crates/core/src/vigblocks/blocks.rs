//! Layers and blocks of the LogViG backbone. Blocks hold indices into a
//! [`ParamStore`]; a forward pass turns every stored tensor into a tape leaf
//! and threads a [`Ctx`] through the blocks.

use rand::Rng;
use serde::Serialize;

use crate::error::{shape, Result};
use crate::tensor::{BnMode, Conv2dSpec, RunningStats, Scalar, Shape, Tape, Tensor, Var};

use super::config::{GrapherKind, RelativeSign};
use super::mrconv::{mrconv, schedule_for};

/// Learnable tensors with their dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
    pub names: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.tensors.push(t);
        self.names.push(name);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Allocates parameters and BN state while blocks are constructed.
pub struct Builder<'a, T, R> {
    pub params: &'a mut ParamStore<T>,
    pub stats: &'a mut Vec<RunningStats<T>>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Conv {
        let fan_in = cin / spec.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform([cout, cin / spec.groups, kernel, kernel], bound, self.rng);
        let w = self.params.push(format!("{name}.weight"), w);
        let b = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1])));
        Conv { w, b, spec }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.params.push(format!("{name}.gamma"), Tensor::full([c, 1, 1, 1], T::one()));
        let beta = self.params.push(format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1]));
        self.stats.push(RunningStats::new(c));
        Bn {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    pub fn dense(&mut self, name: &str, fan_in: usize, out: usize) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.params.push(format!("{name}.weight"), Tensor::uniform([out, fan_in, 1, 1], bound, self.rng));
        let b = self.params.push(format!("{name}.bias"), Tensor::zeros([out, 1, 1, 1]));
        Dense { w, b }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, act: bool) -> ConvBn {
        ConvBn {
            conv: self.conv(name, cin, cout, kernel, spec, true),
            bn: self.bn(&format!("{name}.bn"), cout),
            act,
        }
    }
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: BnMode,
    pub momentum: f64,
    pub eps: f64,
    /// Multiply-accumulates of conv and linear layers so far.
    pub macs: u64,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn shape(&self, v: Var) -> Shape {
        self.tape.shape(v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: usize,
    pub b: Option<usize>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx
            .tape
            .conv2d(x, ctx.vars[self.w], self.b.map(|b| ctx.vars[b]), self.spec)?;
        let [_, cin_g, kh, kw] = ctx.shape(ctx.vars[self.w]);
        let [n, cout, oh, ow] = ctx.shape(y);
        ctx.macs += (n * cin_g * cout * kh * kw * oh * ow) as u64;
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Bn {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

impl Bn {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.vars[self.gamma], ctx.vars[self.beta]);
        ctx.tape
            .batchnorm2d(x, g, b, &mut ctx.stats[self.stats], ctx.mode, ctx.momentum, ctx.eps)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.linear(x, ctx.vars[self.w], Some(ctx.vars[self.b]))?;
        let [out, fan_in, ..] = ctx.shape(ctx.vars[self.w]);
        ctx.macs += (ctx.shape(x)[0] * out * fan_in) as u64;
        Ok(y)
    }
}

/// Convolution, batch norm and an optional GeLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: Bn,
    pub act: bool,
}

impl ConvBn {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.act { ctx.tape.gelu(y) } else { y })
    }
}

fn check_channels<T: Scalar>(ctx: &Ctx<'_, T>, op: &'static str, x: Var, expected: usize) -> Result<()> {
    let c = ctx.shape(x)[1];
    if c != expected {
        return Err(shape(op, format!("expected {expected} input channels, got {c}")));
    }
    Ok(())
}

/// Two stride-2 3x3 convolutions: `3 -> C1/2 -> C1`, each with BN and GeLU.
#[derive(Debug, Clone)]
pub struct Stem {
    pub first: ConvBn,
    pub second: ConvBn,
    pub out_channels: usize,
}

impl Stem {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, out_channels: usize) -> Self {
        let s2 = Conv2dSpec::new(2, 1, 1);
        Self {
            first: b.conv_bn("stem.0", 3, out_channels / 2, 3, s2, true),
            second: b.conv_bn("stem.1", out_channels / 2, out_channels, 3, s2, true),
            out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, "stem", x, 3)?;
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }
}

/// Inverted residual: 1x1 expand, 3x3 depthwise, 1x1 project.
#[derive(Debug, Clone)]
pub struct MbConv {
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub in_channels: usize,
    pub residual: bool,
}

impl MbConv {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize, ratio: usize) -> Self {
        let hidden = cin * ratio;
        Self {
            expand: b.conv_bn(&format!("{name}.expand"), cin, hidden, 1, Conv2dSpec::default(), true),
            depthwise: b.conv_bn(&format!("{name}.dw"), hidden, hidden, 3, Conv2dSpec::new(1, 1, hidden), true),
            project: b.conv_bn(&format!("{name}.project"), hidden, cout, 1, Conv2dSpec::default(), false),
            in_channels: cin,
            residual: cin == cout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, "mbconv", x, self.in_channels)?;
        let y = self.expand.forward(ctx, x)?;
        let y = self.depthwise.forward(ctx, y)?;
        let y = self.project.forward(ctx, y)?;
        if self.residual {
            ctx.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// `fc1 -> max-relative conv -> fc2` with a residual around the block.
#[derive(Debug, Clone)]
pub struct Grapher {
    pub fc1: ConvBn,
    pub mr: Conv,
    pub fc2: ConvBn,
    pub channels: usize,
    pub kind: GrapherKind,
    pub k: usize,
    pub sign: RelativeSign,
}

/// Vars produced inside a grapher, exposed for oracle checks.
#[derive(Debug, Clone, Copy)]
pub struct GrapherTrace {
    pub mr_input: Var,
    pub folded: Var,
    pub out: Var,
}

impl Grapher {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        kind: GrapherKind,
        k: usize,
        sign: RelativeSign,
    ) -> Self {
        let pw = Conv2dSpec::default();
        Self {
            fc1: b.conv_bn(&format!("{name}.fc1"), channels, channels, 1, pw, false),
            mr: b.conv(&format!("{name}.mrconv"), 2 * channels, channels, 1, pw, true),
            fc2: b.conv_bn(&format!("{name}.fc2"), channels, channels, 1, pw, false),
            channels,
            kind,
            k,
            sign,
        }
    }

    pub fn forward_traced<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<GrapherTrace> {
        check_channels(ctx, "grapher", x, self.channels)?;
        let [_, _, h, w] = ctx.shape(x);
        let y = self.fc1.forward(ctx, x)?;
        let schedule = schedule_for(self.kind, h, w, self.k)?;
        let mr = mrconv(ctx.tape, y, &schedule, self.sign, ctx.vars[self.mr.w], self.mr.b.map(|b| ctx.vars[b]))?;
        let [n, ..] = ctx.shape(y);
        ctx.macs += (n * 2 * self.channels * self.channels * h * w) as u64;
        let z = self.fc2.forward(ctx, mr.out)?;
        let out = ctx.tape.add(x, z)?;
        Ok(GrapherTrace {
            mr_input: y,
            folded: mr.folded,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.out)
    }
}

/// 1x1 expand + GeLU, 1x1 back + BN, residual.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Conv,
    pub fc2: ConvBn,
    pub channels: usize,
}

impl Ffn {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize, ratio: usize) -> Self {
        let pw = Conv2dSpec::default();
        Self {
            fc1: b.conv(&format!("{name}.fc1"), channels, channels * ratio, 1, pw, true),
            fc2: b.conv_bn(&format!("{name}.fc2"), channels * ratio, channels, 1, pw, false),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, "ffn", x, self.channels)?;
        let y = self.fc1.forward(ctx, x)?;
        let y = ctx.tape.gelu(y);
        let y = self.fc2.forward(ctx, y)?;
        ctx.tape.add(x, y)
    }
}

/// Grapher followed by FFN.
#[derive(Debug, Clone)]
pub struct LsgcBlock {
    pub grapher: Grapher,
    pub ffn: Ffn,
}

impl LsgcBlock {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.grapher.forward(ctx, x)?;
        self.ffn.forward(ctx, y)
    }
}

/// Stride-2 3x3 conv + BN between stages.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: ConvBn,
    pub in_channels: usize,
}

impl Downsample {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: b.conv_bn(name, cin, cout, 3, Conv2dSpec::new(2, 1, 1), false),
            in_channels: cin,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, "downsample", x, self.in_channels)?;
        self.conv.forward(ctx, x)
    }
}

/// High-resolution shortcut: 3x3 stride 2 then 3x3 stride 1, each BN + GeLU.
#[derive(Debug, Clone)]
pub struct Hrs {
    pub down: ConvBn,
    pub refine: ConvBn,
    pub in_channels: usize,
}

impl Hrs {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize) -> Self {
        Self {
            down: b.conv_bn("hrs.0", cin, cout, 3, Conv2dSpec::new(2, 1, 1), true),
            refine: b.conv_bn("hrs.1", cout, cout, 3, Conv2dSpec::new(1, 1, 1), true),
            in_channels: cin,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, "hrs", x, self.in_channels)?;
        let y = self.down.forward(ctx, x)?;
        self.refine.forward(ctx, y)
    }
}

/// Upsample the trunk, match channels, add the shortcut, project back with
/// BN + GeLU.
#[derive(Debug, Clone)]
pub struct Merge {
    pub reduce: Conv,
    pub project: ConvBn,
    pub low_channels: usize,
    pub high_channels: usize,
}

impl Merge {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, low_channels: usize, high_channels: usize) -> Self {
        let pw = Conv2dSpec::default();
        Self {
            reduce: b.conv("merge.reduce", low_channels, high_channels, 1, pw, true),
            project: b.conv_bn("merge.project", high_channels, low_channels, 1, pw, true),
            low_channels,
            high_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, high: Var, low: Var) -> Result<Var> {
        check_channels(ctx, "merge", low, self.low_channels)?;
        check_channels(ctx, "merge", high, self.high_channels)?;
        let [_, _, h, w] = ctx.shape(high);
        let up = ctx.tape.bilinear_upsample(low, h, w)?;
        let reduced = self.reduce.forward(ctx, up)?;
        let sum = ctx.tape.add(reduced, high)?;
        self.project.forward(ctx, sum)
    }
}

/// Global pool, 1x1 conv + GeLU, linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Conv,
    pub classifier: Dense,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, hidden: usize, classes: usize) -> Self {
        Self {
            hidden: b.conv("head.hidden", cin, hidden, 1, Conv2dSpec::default(), true),
            classifier: b.dense("head.classifier", hidden, classes),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.global_avg_pool(x);
        let y = self.hidden.forward(ctx, y)?;
        let y = ctx.tape.gelu(y);
        self.classifier.forward(ctx, y)
    }
}

/// Per-block accounting row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTrace {
    pub name: String,
    pub output_shape: Shape,
    pub macs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        params: ParamStore<f64>,
        stats: Vec<RunningStats<f64>>,
        rng: ChaCha8Rng,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                params: ParamStore::new(),
                stats: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(3),
            }
        }

        fn builder(&mut self) -> Builder<'_, f64, ChaCha8Rng> {
            Builder {
                params: &mut self.params,
                stats: &mut self.stats,
                rng: &mut self.rng,
            }
        }

        /// Runs `f` on a tape with every parameter as a leaf.
        fn run<F>(&mut self, x: &Tensor<f64>, mode: BnMode, f: F) -> Tensor<f64>
        where
            F: FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>,
        {
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx {
                tape: &mut tape,
                vars: &vars,
                stats: &mut self.stats,
                mode,
                momentum: 0.1,
                eps: 1e-5,
                macs: 0,
            };
            let y = f(&mut ctx, xv).unwrap();
            tape.value(y).clone()
        }
    }

    fn input(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn residual_blocks_keep_shape() {
        let mut fx = Fixture::new();
        let g = Grapher::new(&mut fx.builder(), "g", 6, GrapherKind::Lsgc, 2, RelativeSign::SelfMinusNeighbor);
        let f = Ffn::new(&mut fx.builder(), "f", 6, 4);
        let m = MbConv::new(&mut fx.builder(), "m", 6, 6, 4);
        let x = input([2, 6, 5, 7], 1);
        for mode in [BnMode::Train, BnMode::Eval] {
            assert_eq!(fx.run(&x, mode, |c, v| g.forward(c, v)).shape(), x.shape());
            assert_eq!(fx.run(&x, mode, |c, v| f.forward(c, v)).shape(), x.shape());
            assert_eq!(fx.run(&x, mode, |c, v| m.forward(c, v)).shape(), x.shape());
        }
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let mut fx = Fixture::new();
        let g = Grapher::new(&mut fx.builder(), "g", 4, GrapherKind::Svga, 2, RelativeSign::SelfMinusNeighbor);
        let f = Ffn::new(&mut fx.builder(), "f", 4, 4);
        let m = MbConv::new(&mut fx.builder(), "m", 4, 4, 4);
        fx.params.zero_all();
        let x = input([1, 4, 6, 6], 2);
        for mode in [BnMode::Train, BnMode::Eval] {
            assert_eq!(fx.run(&x, mode, |c, v| g.forward(c, v)), x);
            assert_eq!(fx.run(&x, mode, |c, v| f.forward(c, v)), x);
            assert_eq!(fx.run(&x, mode, |c, v| m.forward(c, v)), x);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut fx = Fixture::new();
        let g = Grapher::new(&mut fx.builder(), "g", 4, GrapherKind::Lsgc, 2, RelativeSign::SelfMinusNeighbor);
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = fx.params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: &mut fx.stats,
            mode: BnMode::Eval,
            momentum: 0.1,
            eps: 1e-5,
            macs: 0,
        };
        assert!(g.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn grapher_commutes_with_circular_translation() {
        let mut fx = Fixture::new();
        let g = Grapher::new(&mut fx.builder(), "g", 5, GrapherKind::Lsgc, 2, RelativeSign::SelfMinusNeighbor);
        // non-trivial frozen statistics
        for (i, s) in fx.stats.iter_mut().enumerate() {
            s.mean.iter_mut().enumerate().for_each(|(c, m)| *m = 0.1 * (i + c) as f64);
            s.var.iter_mut().enumerate().for_each(|(c, v)| *v = 0.5 + 0.2 * c as f64);
        }
        let x = input([1, 5, 7, 6], 9);
        let base = fx.run(&x, BnMode::Eval, |c, v| g.forward(c, v));
        for (axis, d) in [(crate::tensor::Axis::H, 3), (crate::tensor::Axis::W, -2)] {
            let shifted_in = x.circular_shift(axis, d);
            let out = fx.run(&shifted_in, BnMode::Eval, |c, v| g.forward(c, v));
            assert_eq!(out, base.circular_shift(axis, d));
        }
    }

    #[test]
    fn stem_downsample_hrs_shapes() {
        let mut fx = Fixture::new();
        let stem = Stem::new(&mut fx.builder(), 8);
        let ds = Downsample::new(&mut fx.builder(), "ds", 8, 16);
        let hrs = Hrs::new(&mut fx.builder(), 8, 16);
        let x = input([1, 3, 32, 32], 4);
        let s = fx.run(&x, BnMode::Train, |c, v| stem.forward(c, v));
        assert_eq!(s.shape(), [1, 8, 8, 8]);
        assert_eq!(fx.run(&s, BnMode::Train, |c, v| ds.forward(c, v)).shape(), [1, 16, 4, 4]);
        assert_eq!(fx.run(&s, BnMode::Train, |c, v| hrs.forward(c, v)).shape(), [1, 16, 4, 4]);
    }

    #[test]
    fn merge_with_zero_shortcut_reduces_to_trunk_path() {
        let mut fx = Fixture::new();
        let merge = Merge::new(&mut fx.builder(), 12, 6);
        let high = Tensor::<f64>::zeros([1, 6, 4, 4]);
        let low = input([1, 12, 1, 1], 5);
        let mut tape = Tape::new();
        let vars: Vec<Var> = fx.params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let (h, l) = (tape.constant(high), tape.constant(low));
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: &mut fx.stats,
            mode: BnMode::Eval,
            momentum: 0.1,
            eps: 1e-5,
            macs: 0,
        };
        let merged = merge.forward(&mut ctx, h, l).unwrap();
        assert_eq!(ctx.shape(merged), [1, 12, 4, 4]);
        // trunk-only path computed by hand
        let up = ctx.tape.bilinear_upsample(l, 4, 4).unwrap();
        let red = merge.reduce.forward(&mut ctx, up).unwrap();
        let expect = merge.project.forward(&mut ctx, red).unwrap();
        assert_eq!(tape.value(merged), tape.value(expect));
    }
}
