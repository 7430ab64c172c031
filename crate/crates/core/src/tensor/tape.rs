use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{numel, Conv2dSpec, Scalar, Shape, Tensor};
use crate::error::{domain, shape, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    H,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_COEF);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Gelu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Max(Var, Var),
    Concat(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Shift {
        x: Var,
        axis: Axis,
        d: isize,
    },
    Upsample(Var),
    AvgPool(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum(Var),
    Scale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation and replays it backwards.
///
/// Leaves keep their gradient across [`Tape::backward`] calls (accumulating);
/// intermediate gradients live only for the duration of one backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, cin_g, kh, kw] = self.shape(w);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape(
                "conv2d",
                format!("input channels {cin}, weight {:?}, groups {groups}", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape("conv2d", format!("bias of {} for {cout} outputs", self.value(b).numel())));
            }
        }
        let (Some(oh), Some(ow)) = (spec.out_len(h, kh), spec.out_len(wd, kw)) else {
            return Err(shape("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {}", spec.padding)));
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::from_vec([n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// Batch normalization over `(N, H, W)` per channel. In train mode the
    /// batch statistics normalize the output and update `stats` by an
    /// exponential moving average (unbiased variance); eval mode reads `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(shape("batchnorm2d", format!("parameters do not match {c} channels")));
        }
        let plane = h * w;
        let count = n * plane;
        let xd = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let m = T::lit(momentum);
        let cnt = T::lit(count as f64);
        for ch in 0..c {
            let idx = |i: usize| (i / plane * c + ch) * plane + i % plane;
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = (0..count).map(|i| xd[idx(i)]).sum::<T>() / cnt;
                    let var = (0..count).map(|i| (xd[idx(i)] - mean).powi(2)).sum::<T>() / cnt;
                    let unbiased = if count > 1 {
                        var * cnt / (cnt - T::one())
                    } else {
                        var
                    };
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean;
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..count {
                let j = idx(i);
                xhat[j] = (xd[j] - mean) * is;
                out[j] = g[ch] * xhat[j] + bt[ch];
            }
        }
        let value = Tensor::from_vec([n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(self.shape(a), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_max", a, b)?;
        let value = self.zip_values(a, b, |x, y| if x >= y { x } else { y });
        Ok(self.push(value, Op::Max(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let plane = h * w;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::from_vec([n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Fully connected layer on `(N, C_in, H, W)` flattened per sample;
    /// weight is `(C_out, C_in*H*W, 1, 1)`. Output `(N, C_out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let fan_in = c * h * wd;
        let [cout, wi, ..] = self.shape(w);
        if wi * self.shape(w)[2] * self.shape(w)[3] != fan_in {
            return Err(shape("linear", format!("input features {fan_in}, weight {:?}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape("linear", format!("bias of {} for {cout} outputs", self.value(b).numel())));
            }
        }
        let (xd, wdat) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let mut out = vec![T::zero(); n * cout];
        for i in 0..n {
            let xi = &xd[i * fan_in..(i + 1) * fan_in];
            for o in 0..cout {
                let wo = &wdat[o * fan_in..(o + 1) * fan_in];
                let dot = xi.iter().zip(wo).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                out[i * cout + o] = dot + bd.map_or(T::zero(), |b| b[o]);
            }
        }
        let value = Tensor::from_vec([n, cout, 1, 1], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// `out[.., r, c] = x[.., (r + d) mod H, c]` for `Axis::H`; `Axis::W`
    /// shifts columns the same way.
    pub fn circular_shift(&mut self, x: Var, axis: Axis, d: isize) -> Var {
        let value = self.value(x).circular_shift(axis, d);
        self.push(value, Op::Shift { x, axis, d }, &[x])
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(domain("upsample target must be at least 1x1"));
        }
        let [n, c, h, w] = self.shape(x);
        let (rows, cols) = (kernels::bilinear_taps(out_h, h), kernels::bilinear_taps(out_w, w));
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for pl in 0..n * c {
            let src = &xd[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
            for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
                let (ty, sy) = (T::lit(ty), T::lit(1.0 - ty));
                for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                    let (tx, sx) = (T::lit(tx), T::lit(1.0 - tx));
                    dst[oy * out_w + ox] = sy * (sx * src[y0 * w + x0] + tx * src[y0 * w + x1])
                        + ty * (sx * src[y1 * w + x0] + tx * src[y1 * w + x1]);
                }
            }
        }
        let value = Tensor::from_vec([n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let data = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        self.push(value, Op::AvgPool(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; logits are
    /// `(N, classes, 1, 1)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, classes, h, w] = self.shape(logits);
        if h * w != 1 || labels.len() != n {
            return Err(shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", self.shape(logits), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(domain(format!("label {bad} out of range for {classes} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * classes];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &ld[i * classes..(i + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for (k, e) in exps.iter().enumerate() {
                probs[i * classes + k] = *e / z;
            }
            loss = loss - (row[labels[i]] - mx - z.ln());
        }
        loss = loss / T::lit(n as f64);
        let value = Tensor::from_vec([1, 1, 1, 1], vec![loss])?;
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(value, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let value = Tensor::from_vec([1, 1, 1, 1], vec![s]).expect("scalar");
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, a: T) -> Var {
        let value = self.value(x).map(|v| v * a);
        self.push(value, Op::Scale(x, a), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(domain(format!("backward needs a scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(gy);
                continue;
            }
            for (input, g) in self.local_grads(i, &gy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with upstream gradient `gy`.
    fn local_grads(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, spec } => {
                let [n, cin, h, wd] = self.shape(*x);
                let [cout, _, kh, kw] = self.shape(*w);
                let [_, _, oh, ow] = node.value.shape();
                let geom = ConvGeom {
                    n,
                    cin,
                    h,
                    w: wd,
                    cout,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec: *spec,
                };
                let mut out = Vec::new();
                if needs(*x) {
                    out.push((*x, kernels::conv2d_grad_input(&geom, gy, self.data(*w))));
                }
                if needs(*w) {
                    out.push((*w, kernels::conv2d_grad_weight(&geom, gy, self.data(*x))));
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let plane = oh * ow;
                    let mut gb = vec![T::zero(); cout];
                    for (k, chunk) in gy.chunks(plane).enumerate() {
                        gb[k % cout] = gb[k % cout] + chunk.iter().copied().sum::<T>();
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let count = n * plane;
                let g = self.data(*gamma);
                let mut gx = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let m = T::lit(count as f64);
                for ch in 0..c {
                    let idx = |k: usize| (k / plane * c + ch) * plane + k % plane;
                    let (mut s_dy, mut s_dyx) = (T::zero(), T::zero());
                    for k in 0..count {
                        let j = idx(k);
                        s_dy = s_dy + gy[j];
                        s_dyx = s_dyx + gy[j] * xhat[j];
                    }
                    gg[ch] = s_dyx;
                    gb[ch] = s_dy;
                    let scale = g[ch] * inv_std[ch];
                    for k in 0..count {
                        let j = idx(k);
                        gx[j] = if *train {
                            scale * (gy[j] - s_dy / m - xhat[j] * s_dyx / m)
                        } else {
                            scale * gy[j]
                        };
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Gelu(x) => {
                let g = self.data(*x).iter().zip(gy).map(|(&v, &d)| gelu_parts(v).1 * d).collect();
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&v| -v).collect())],
            Op::Max(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![T::zero(); gy.len()];
                let mut gb = vec![T::zero(); gy.len()];
                for k in 0..gy.len() {
                    if da[k] >= db[k] {
                        ga[k] = gy[k];
                    } else {
                        gb[k] = gy[k];
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for sample in gy.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&sample[..ca * plane]);
                    gb.extend_from_slice(&sample[ca * plane..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b } => {
                let n = self.shape(*x)[0];
                let fan_in = self.value(*x).numel() / n;
                let cout = gy.len() / n;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut out = Vec::new();
                if needs(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    for i in 0..n {
                        for o in 0..cout {
                            let d = gy[i * cout + o];
                            for f in 0..fan_in {
                                gx[i * fan_in + f] = gx[i * fan_in + f] + d * wd[o * fan_in + f];
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); wd.len()];
                    for o in 0..cout {
                        for i in 0..n {
                            let d = gy[i * cout + o];
                            for f in 0..fan_in {
                                gw[o * fan_in + f] = gw[o * fan_in + f] + d * xd[i * fan_in + f];
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut gb = vec![T::zero(); cout];
                    for i in 0..n {
                        for o in 0..cout {
                            gb[o] = gb[o] + gy[i * cout + o];
                        }
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Shift { x, axis, d } => {
                let mut g = vec![T::zero(); gy.len()];
                kernels::shift_into(gy, &mut g, node.value.shape(), *axis, -*d);
                vec![(*x, g)]
            }
            Op::Upsample(x) => {
                let [n, c, h, w] = self.shape(*x);
                let [_, _, oh, ow] = node.value.shape();
                let (rows, cols) = (kernels::bilinear_taps(oh, h), kernels::bilinear_taps(ow, w));
                let mut g = vec![T::zero(); n * c * h * w];
                for pl in 0..n * c {
                    let src = &gy[pl * oh * ow..(pl + 1) * oh * ow];
                    let dst = &mut g[pl * h * w..(pl + 1) * h * w];
                    for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                            let d = src[oy * ow + ox];
                            let (ty, tx) = (T::lit(ty), T::lit(tx));
                            let (sy, sx) = (T::one() - ty, T::one() - tx);
                            dst[y0 * w + x0] = dst[y0 * w + x0] + d * sy * sx;
                            dst[y0 * w + x1] = dst[y0 * w + x1] + d * sy * tx;
                            dst[y1 * w + x0] = dst[y1 * w + x0] + d * ty * sx;
                            dst[y1 * w + x1] = dst[y1 * w + x1] + d * ty * tx;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::AvgPool(x) => {
                let [_, _, h, w] = self.shape(*x);
                let plane = h * w;
                let inv = T::lit(1.0 / plane as f64);
                let g = gy.iter().flat_map(|&d| std::iter::repeat_n(d * inv, plane)).collect();
                vec![(*x, g)]
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = gy[0] / T::lit(n as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * classes + l] = g[i * classes + l] - scale;
                }
                vec![(*logits, g)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; numel(&self.shape(*x))])],
            Op::Scale(x, a) => vec![(*x, gy.iter().map(|&v| v * *a).collect())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_identity_and_border_counts() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t([1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]), false);
        let w = tp.constant(t([1, 1, 1, 1], &[1.0]));
        let b = tp.constant(t([1, 1, 1, 1], &[0.0]));
        let y = tp.conv2d(x, w, Some(b), Conv2dSpec::default()).unwrap();
        assert_eq!(tp.value(y).data(), tp.value(x).data());

        let c = 2.5;
        let x = tp.constant(Tensor::full([1, 1, 4, 4], c));
        let w = tp.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tp.conv2d(x, w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        let v = tp.value(y);
        assert_eq!(v.at(0, 0, 0, 0), 4.0 * c);
        assert_eq!(v.at(0, 0, 0, 1), 6.0 * c);
        assert_eq!(v.at(0, 0, 1, 2), 9.0 * c);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros([1, 3, 4, 4]));
        let w = tp.constant(Tensor::zeros([4, 2, 3, 3]));
        assert!(tp.conv2d(x, w, None, Conv2dSpec::default()).is_err());
        let w = tp.constant(Tensor::zeros([3, 3, 5, 5]));
        assert!(tp.conv2d(x, w, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn stride_two_output_size() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::zeros([1, 3, 224, 224]));
        let w = tp.constant(Tensor::zeros([16, 3, 3, 3]));
        let y = tp.conv2d(x, w, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(tp.shape(y), [1, 16, 112, 112]);
    }

    #[test]
    fn depthwise_channels_independent() {
        let mut tp = Tape::<f64>::new();
        let base: Vec<f64> = (0..18).map(|i| i as f64 * 0.3).collect();
        let mut bumped = base.clone();
        bumped[9 + 4] += 7.0;
        let w = tp.constant(Tensor::full([2, 1, 3, 3], 0.5));
        let x0 = tp.constant(t([1, 2, 3, 3], &base));
        let x1 = tp.constant(t([1, 2, 3, 3], &bumped));
        let spec = Conv2dSpec::new(1, 1, 2);
        let y0 = tp.conv2d(x0, w, None, spec).unwrap();
        let y1 = tp.conv2d(x1, w, None, spec).unwrap();
        assert_eq!(&tp.value(y0).data()[..9], &tp.value(y1).data()[..9]);
        assert_ne!(&tp.value(y0).data()[9..], &tp.value(y1).data()[9..]);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t([1, 1, 3, 3], &[1., -2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tp.constant(Tensor::zeros([1, 1, 5, 5]));
        let y = tp.conv2d(x, w, None, Conv2dSpec::new(1, 2, 1)).unwrap();
        assert!(tp.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_modes() {
        let mut tp = Tape::<f64>::new();
        let data: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64).collect();
        let x = tp.constant(t([2, 2, 2, 4], &data));
        let g = tp.constant(Tensor::full([2, 1, 1, 1], 1.0));
        let b = tp.constant(Tensor::zeros([2, 1, 1, 1]));
        let mut rs = RunningStats::new(2);
        let y = tp.batchnorm2d(x, g, b, &mut rs, BnMode::Train, 0.1, 1e-5).unwrap();
        let v = tp.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..8).map(move |k| (n, k)))
                .map(|(n, k)| v.at(n, ch, k / 4, k % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_ne!(rs.mean, vec![0.0, 0.0]);

        let mut frozen = RunningStats { mean: vec![3.0], var: vec![0.7] };
        let x = tp.constant(Tensor::full([1, 1, 2, 2], 3.0));
        let g = tp.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let b = tp.constant(Tensor::full([1, 1, 1, 1], -1.5));
        let y = tp.batchnorm2d(x, g, b, &mut frozen, BnMode::Eval, 0.1, 1e-5).unwrap();
        assert!(tp.value(y).data().iter().all(|&v| v == -1.5));
        assert_eq!(frozen.mean, vec![3.0]);

        let x = tp.constant(t([1, 1, 1, 4], &[1.0, 2.0, 3.0, 6.0]));
        let b3 = tp.constant(Tensor::full([1, 1, 1, 1], 3.0));
        let mut rs = RunningStats::new(1);
        let y = tp.batchnorm2d(x, g, b3, &mut rs, BnMode::Train, 0.1, 1e-5).unwrap();
        let d = tp.value(y).data();
        let mean = d.iter().sum::<f64>() / 4.0;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-4);
        assert!(tp.batchnorm2d(x, g, b3, &mut RunningStats::new(2), BnMode::Train, 0.1, 1e-5).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let mut tp = Tape::<f64>::new();
        let z = tp.constant(t([1, 1, 1, 1], &[0.0]));
        let gz = tp.gelu(z);
        assert_eq!(tp.value(gz).data(), &[0.0]);
        let a = tp.constant(t([1, 1, 1, 2], &[1.0, 5.0]));
        let b = tp.constant(t([1, 1, 1, 2], &[3.0, 2.0]));
        let m = tp.max(a, b).unwrap();
        assert_eq!(tp.value(m).data(), &[3.0, 5.0]);
        let p = tp.constant(Tensor::zeros([2, 4, 3, 3]));
        let q = tp.constant(Tensor::zeros([2, 4, 3, 3]));
        let cat = tp.concat_channels(p, q).unwrap();
        assert_eq!(tp.shape(cat), [2, 8, 3, 3]);
        let bad = tp.constant(Tensor::zeros([1, 1, 1, 3]));
        assert!(tp.add(a, bad).is_err());
        assert!(tp.max(a, bad).is_err());
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t([2, 1, 1, 1], &[1.0, 2.0]));
        let b = tp.constant(t([2, 2, 1, 1], &[10.0, 11.0, 20.0, 21.0]));
        let c = tp.concat_channels(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }

    #[test]
    fn shift_examples() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t([1, 1, 1, 4], &[1., 2., 3., 4.]), true);
        let y = tp.circular_shift(x, Axis::W, 1);
        assert_eq!(tp.value(y).data(), &[2., 3., 4., 1.]);
        let id = tp.circular_shift(x, Axis::W, 4);
        assert_eq!(tp.value(id).data(), tp.value(x).data());
        let s = tp.sum(y);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[1.0; 4]);

        let col = t([1, 1, 3, 1], &[1., 2., 3.]);
        assert_eq!(col.circular_shift(Axis::H, -1).data(), &[3., 1., 2.]);
    }

    #[test]
    fn upsample_and_pool() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t([1, 1, 1, 1], &[4.2]));
        let up = tp.bilinear_upsample(x, 2, 2).unwrap();
        assert_eq!(tp.value(up).data(), &[4.2; 4]);
        let r = tp.constant(t([1, 1, 1, 2], &[0.0, 1.0]));
        let up = tp.bilinear_upsample(r, 1, 4).unwrap();
        assert_eq!(tp.value(up).data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = tp.constant(Tensor::full([2, 3, 5, 5], 1.75));
        let p = tp.global_avg_pool(c);
        assert_eq!(tp.shape(p), [2, 3, 1, 1]);
        assert!(tp.value(p).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        assert!(tp.bilinear_upsample(r, 0, 4).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tp = Tape::<f64>::new();
        let logits = tp.leaf(Tensor::zeros([2, 4, 1, 1]), true);
        let loss = tp.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tp.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        tp.backward(loss).unwrap();
        let g = tp.grad(logits).unwrap();
        assert!((g[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[1] - 0.25 / 2.0).abs() < 1e-15);
        assert!((g[7] - (0.25 - 1.0) / 2.0).abs() < 1e-15);

        let sharp = tp.constant(t([1, 2, 1, 1], &[200.0, -200.0]));
        let l = tp.softmax_cross_entropy(sharp, &[0]).unwrap();
        assert!(tp.value(l).data()[0] < 1e-100);
        assert!(tp.softmax_cross_entropy(sharp, &[2]).is_err());
    }

    #[test]
    fn backward_contracts() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t([1, 2, 1, 2], &[0.3, -1.0, 2.0, 0.5]), true);
        let s = tp.sum(x);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[1.0; 4]);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2.0; 4]);
        assert!(tp.backward(x).is_err());
        tp.zero_grad();
        assert!(tp.grad(x).is_none());
    }

    #[test]
    fn backward_is_linear_in_loss_scale() {
        let build = |tp: &mut Tape<f64>, a: f64| {
            let x = tp.leaf(t([1, 1, 2, 2], &[0.3, -1.0, 2.0, 0.5]), true);
            let w = tp.leaf(t([2, 1, 1, 1], &[0.7, -0.2]), true);
            let y = tp.conv2d(x, w, None, Conv2dSpec::default()).unwrap();
            let y = tp.gelu(y);
            let s = tp.sum(y);
            let l = tp.scale(s, a);
            tp.backward(l).unwrap();
            (tp.grad(x).unwrap().to_vec(), tp.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = build(&mut Tape::new(), 1.0);
        let (gx4, gw4) = build(&mut Tape::new(), 4.0);
        for (a, b) in gx1.iter().zip(&gx4).chain(gw1.iter().zip(&gw4)) {
            assert_eq!(a * 4.0, *b);
        }
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut tp = Tape::<f64>::new();
        let a = tp.leaf(t([1, 1, 1, 2], &[1.0, 2.0]), true);
        let b = tp.leaf(t([1, 1, 1, 2], &[1.0, 3.0]), true);
        let m = tp.max(a, b).unwrap();
        let s = tp.sum(m);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tp.grad(b).unwrap(), &[0.0, 1.0]);
    }
}
