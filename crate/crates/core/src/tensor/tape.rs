use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::kernels as qk;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, n: usize, out_ch: usize },
    PixelShuffle { input: Var, r: usize },
    SteRound(Var),
    FakeQuantAsym { input: Var, lower: Var, upper: Var, bits: u32, relaxed: bool, bounds_trainable: bool },
    FakeQuantSym { input: Var, alpha: Var, bits: u32, relaxed: bool },
    ChannelEnergy(Var),
    SampleL2Norm(Var),
    SampleDiv(Var, Var),
    SpatialMean(Var),
    SelectChannel(Var, usize),
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, training: bool, stats: Option<BatchStats> },
    PRelu(Var, Var),
    Concat(Vec<Var>),
    ShiftChannels(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Single-threaded by construction: ops take `&mut self`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || is_scalar(b) {
        Ok(a.shape().to_vec())
    } else if is_scalar(a) {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

fn at(t: &Tensor, i: usize) -> f64 {
    if is_scalar(t) {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Collapse a full-size gradient onto an operand that may have been broadcast.
fn reduce_to(operand: &Tensor, grad: Vec<f64>, out_shape: &[usize]) -> Tensor {
    if operand.shape() == out_shape {
        Tensor::new(operand.shape().to_vec(), grad).expect("shape preserved")
    } else {
        Tensor::new(operand.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar operand")
    }
}

/// Per-sample bound lookup for quantizer ops: bounds hold one value or one
/// value per batch element.
fn bound_at(t: &Tensor, sample: usize) -> f64 {
    if is_scalar(t) {
        t.data()[0]
    } else {
        t.data()[sample]
    }
}

fn check_bounds(op: &'static str, x: &Tensor, b: &Tensor) -> Result<()> {
    if is_scalar(b) || (b.len() == x.shape()[0] && b.shape().len() == 1) {
        Ok(())
    } else {
        Err(Error::dim(op, format!("bounds of shape {:?} do not match batch of {:?}", b.shape(), x.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Record an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        Ok((Tensor::new(shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Logistic function, kept strictly inside (0, 1) where f64 would
    /// otherwise round it onto an endpoint.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| (1.0 / (1.0 + (-x).exp())).clamp(1e-300, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Round half away from zero; the backward pass is the identity.
    pub fn ste_round(&mut self, a: Var) -> Var {
        self.unary(a, Op::SteRound(a), f64::round)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// 2-D convolution: input NCHW, weight OIHW, optional bias O.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = x.dims4()?;
        let (o, i, kh, kw) = w.dims4().map_err(|_| Error::dim("conv2d", format!("weight must be OIHW, got {:?}", w.shape())))?;
        if i != c {
            return Err(Error::dim("conv2d", format!("input channels (axis 1) = {c} but weight in-channels (axis 1) = {i}")));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", format!("non-square kernel {kh}x{kw} on weight axes 2,3")));
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != o {
                return Err(Error::dim("conv2d", format!("bias length {bl} != weight out-channels (axis 0) = {o}")));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, padding).ok_or_else(|| {
            Error::dim("conv2d", format!("spatial axes 2,3 ({h}x{wd}) with padding {padding} smaller than kernel {kh} or stride 0"))
        })?;
        let (out, ho, wo) = kernels::conv2d_forward(
            x.data(),
            n,
            c,
            h,
            wd,
            w.data(),
            o,
            kh,
            bias.map(|b| self.value(b).data()),
            stride,
            padding,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom, n, out_ch: o }, rg))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::dim("pixel_shuffle", format!("channels (axis 1) = {c} not divisible by r^2 = {}", r * r)));
        }
        let out = kernels::pixel_shuffle_values(x.data(), n, c, h, w, r);
        let t = Tensor::new(vec![n, c / (r * r), h * r, w * r], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::PixelShuffle { input, r }, rg))
    }

    /// Dual-bound fake quantization. `lower` / `upper` hold one value or one
    /// value per batch element. With `relaxed` the rounding is replaced by
    /// the identity, which is the function whose exact gradient the
    /// straight-through rule defines.
    ///
    /// When `bounds_trainable` is set, elements sitting exactly on a bound
    /// send their gradient to that bound; otherwise the closed interval
    /// passes gradient to the input.
    pub fn fake_quant_asym(
        &mut self,
        input: Var,
        lower: Var,
        upper: Var,
        bits: u32,
        relaxed: bool,
        bounds_trainable: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.shape().is_empty() {
            return Err(Error::dim("fake_quant_asym", "input has no batch axis"));
        }
        check_bounds("fake_quant_asym", x, self.value(lower))?;
        check_bounds("fake_quant_asym", x, self.value(upper))?;
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let (lo_t, hi_t) = (self.value(lower), self.value(upper));
        let mut out = Vec::with_capacity(x.len());
        for b in 0..n {
            let grid = qk::AsymGrid::new(bound_at(lo_t, b), bound_at(hi_t, b), bits);
            for &v in &x.data()[b * per..(b + 1) * per] {
                out.push(if relaxed { grid.clip(v) } else { grid.dequant(v) });
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input) || self.rg(lower) || self.rg(upper);
        Ok(self.push(t, Op::FakeQuantAsym { input, lower, upper, bits, relaxed, bounds_trainable }, rg))
    }

    /// Single-bound symmetric fake quantization with trainable `alpha`.
    pub fn fake_quant_sym(&mut self, input: Var, alpha: Var, bits: u32, relaxed: bool) -> Result<Var> {
        let a = self.value(alpha);
        if !is_scalar(a) {
            return Err(Error::dim("fake_quant_sym", "alpha must be a single value"));
        }
        let grid = qk::SymGrid::new(a.item(), bits);
        let t = self.value(input).map(|v| if relaxed { grid.clip(v) } else { grid.dequant(v) });
        let rg = self.rg(input) || self.rg(alpha);
        Ok(self.push(t, Op::FakeQuantSym { input, alpha, bits, relaxed }, rg))
    }

    /// `Σ_c x²`: NCHW → N1HW.
    pub fn channel_energy(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, &v) in out[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o += v * v;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, 1, h, w], out)?, Op::ChannelEnergy(input), rg))
    }

    /// Euclidean norm of each batch element over all remaining axes → `[N]`.
    pub fn sample_l2_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.shape()[0];
        let out = (0..n).map(|b| x.sample(b).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let rg = self.rg(input);
        self.push(Tensor::from_vec(out), Op::SampleL2Norm(input), rg)
    }

    /// Divide every batch element of `x` by the matching entry of `d` (`[N]`).
    pub fn sample_div(&mut self, x: Var, d: Var) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(d));
        let n = tx.shape()[0];
        if td.len() != n {
            return Err(Error::dim("sample_div", format!("divisor length {} != batch {}", td.len(), n)));
        }
        let per = tx.len() / n.max(1);
        let data = tx.data().iter().enumerate().map(|(i, &v)| v / td.data()[i / per]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(d);
        Ok(self.push(t, Op::SampleDiv(x, d), rg))
    }

    /// Global average pool: NCHW → NC11.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = (h * w) as f64;
        let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], data)?, Op::SpatialMean(input), rg))
    }

    /// Pick channel `c` of an NC11 tensor → `[N]`.
    pub fn select_channel(&mut self, input: Var, c: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, ch, h, w) = x.dims4()?;
        if h * w != 1 || c >= ch {
            return Err(Error::dim("select_channel", format!("cannot select channel {c} of {:?}", x.shape())));
        }
        let data = (0..n).map(|b| x.data()[b * ch + c]).collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_vec(data), Op::SelectChannel(input, c), rg))
    }

    /// Batch normalisation over (N, H, W) per channel. In training mode the
    /// batch statistics are used (and recorded, see [`Tape::batch_stats`]);
    /// otherwise the supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        training: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batch_norm", format!("affine params do not match {c} channels")));
        }
        let hw = h * w;
        let count = n * hw;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            (mean, var)
        } else {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::dim("batch_norm", "running statistics do not match channels"));
            }
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] = g[ch] * (x.data()[off + i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let stats = training.then(|| BatchStats { mean: mean.clone(), var, count });
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::BatchNorm { input, gamma, beta, mean, inv_std, training, stats }, rg))
    }

    /// Statistics recorded by a training-mode [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Parametric ReLU with a single shared slope.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let a = self.value(slope);
        if !is_scalar(a) {
            return Err(Error::dim("prelu", "slope must be a single value"));
        }
        let a = a.item();
        let t = self.value(input).map(|x| if x > 0.0 { x } else { a * x });
        let rg = self.rg(input) || self.rg(slope);
        Ok(self.push(t, Op::PRelu(input, slope), rg))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?);
        let (n, _, h, w) = first.dims4()?;
        let mut chans = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::dim("concat", format!("{:?} vs {:?} on axes 0,2,3", self.value(v).shape(), first.shape())));
            }
            chans.push(c2);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(vec![n, total, h, w], out)?, Op::Concat(inputs.to_vec()), rg))
    }

    /// Add a constant per-channel offset (mean shift).
    pub fn shift_channels(&mut self, input: Var, offsets: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let (_, c, h, w) = x.dims4()?;
        if offsets.len() != c {
            return Err(Error::dim("shift_channels", format!("{} offsets for {c} channels", offsets.len())));
        }
        let hw = h * w;
        let data = x.data().iter().enumerate().map(|(i, &v)| v + offsets[(i / hw) % c]).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::ShiftChannels(input), rg))
    }

    /// Hash of every branch decision taken by piecewise ops (ReLU side, clip
    /// region, quantization level). Two evaluations with equal signatures
    /// lie on the same smooth piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) | Op::PRelu(a, _) => {
                    for &v in self.value(*a).data() {
                        ((v > 0.0) as u8 + 2 * (v < 0.0) as u8).hash(&mut h);
                    }
                }
                Op::FakeQuantAsym { input, lower, upper, bits, relaxed, .. } => {
                    let x = self.value(*input);
                    let n = x.shape()[0];
                    let per = x.len() / n.max(1);
                    for b in 0..n {
                        let grid = qk::AsymGrid::new(bound_at(self.value(*lower), b), bound_at(self.value(*upper), b), *bits);
                        for &v in &x.data()[b * per..(b + 1) * per] {
                            (grid.region(v) as u8).hash(&mut h);
                            if !relaxed {
                                grid.level(v).hash(&mut h);
                            }
                        }
                    }
                }
                Op::FakeQuantSym { input, alpha, bits, relaxed } => {
                    let grid = qk::SymGrid::new(self.value(*alpha).item(), *bits);
                    for &v in self.value(*input).data() {
                        (grid.region(v) as u8).hash(&mut h);
                        if !relaxed {
                            grid.level(v).hash(&mut h);
                        }
                    }
                }
                Op::SteRound(a) => {
                    for &v in self.value(*a).data() {
                        (v.round() as i64).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(self.value(*a), gd.to_vec(), out_shape));
                self.accumulate(grads, *b, reduce_to(self.value(*b), gd.to_vec(), out_shape));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(self.value(*a), gd.to_vec(), out_shape));
                let neg = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, reduce_to(self.value(*b), neg, out_shape));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = gd.iter().enumerate().map(|(i, v)| v * at(tb, i)).collect();
                    self.accumulate(grads, *a, reduce_to(ta, ga, out_shape));
                }
                if self.rg(*b) {
                    let gb = gd.iter().enumerate().map(|(i, v)| v * at(ta, i)).collect();
                    self.accumulate(grads, *b, reduce_to(tb, gb, out_shape));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) | Op::SteRound(a) | Op::ShiftChannels(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(v, &xv)| if xv > 0.0 { *v } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(v, &s)| v * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), d)?);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(v, &xv)| if xv > 0.0 { *v } else if xv < 0.0 { -v } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), d)?);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(v, &xv)| 2.0 * xv * v).collect();
                self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), d)?);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(s, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::Conv2d { input, weight, bias, geom, n, out_ch } => {
                let want_b = bias.is_some_and(|b| self.rg(b));
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    *n,
                    geom,
                    self.value(*weight).data(),
                    *out_ch,
                    gd,
                    self.rg(*input),
                    self.rg(*weight),
                    want_b,
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), gi)?);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, Tensor::new(self.value(*weight).shape().to_vec(), gw)?);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
            }
            Op::PixelShuffle { input, r } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let back = kernels::pixel_unshuffle_values(gd, n, c / (r * r), h, w, *r);
                self.accumulate(grads, *input, Tensor::new(vec![n, c, h, w], back)?);
            }
            Op::FakeQuantAsym { input, lower, upper, bits, bounds_trainable, .. } => {
                let x = self.value(*input);
                let (lo_t, hi_t) = (self.value(*lower), self.value(*upper));
                let n = x.shape()[0];
                let per = x.len() / n.max(1);
                let mut gx = vec![0.0; x.len()];
                let mut glo = vec![0.0; lo_t.len()];
                let mut ghi = vec![0.0; hi_t.len()];
                for b in 0..n {
                    let grid = qk::AsymGrid::new(bound_at(lo_t, b), bound_at(hi_t, b), *bits);
                    let (li, hi_i) = (if is_scalar(lo_t) { 0 } else { b }, if is_scalar(hi_t) { 0 } else { b });
                    for i in b * per..(b + 1) * per {
                        match grid.route(x.data()[i], *bounds_trainable) {
                            qk::Route::Input => gx[i] += gd[i],
                            qk::Route::Upper => ghi[hi_i] += gd[i],
                            qk::Route::Lower => glo[li] += gd[i],
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                self.accumulate(grads, *lower, Tensor::new(lo_t.shape().to_vec(), glo)?);
                self.accumulate(grads, *upper, Tensor::new(hi_t.shape().to_vec(), ghi)?);
            }
            Op::FakeQuantSym { input, alpha, bits, .. } => {
                let x = self.value(*input);
                let grid = qk::SymGrid::new(self.value(*alpha).item(), *bits);
                let mut gx = vec![0.0; x.len()];
                let mut ga = 0.0;
                for (i, &v) in x.data().iter().enumerate() {
                    match grid.route(v) {
                        qk::Route::Input => gx[i] = gd[i],
                        qk::Route::Upper => ga += gd[i],
                        qk::Route::Lower => ga -= gd[i],
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                self.accumulate(grads, *alpha, Tensor::new(self.value(*alpha).shape().to_vec(), vec![ga])?);
            }
            Op::ChannelEnergy(a) => {
                let x = self.value(*a);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut gx = vec![0.0; x.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in 0..hw {
                            gx[off + i] = 2.0 * x.data()[off + i] * gd[b * hw + i];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::SampleL2Norm(a) => {
                let x = self.value(*a);
                let norms = node.value.data();
                let per = x.len() / x.shape()[0].max(1);
                let gx = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let b = i / per;
                        if norms[b] > 0.0 {
                            gd[b] * v / norms[b]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::SampleDiv(xv, dv) => {
                let (x, d) = (self.value(*xv), self.value(*dv));
                let per = x.len() / x.shape()[0].max(1);
                if self.rg(*xv) {
                    let gx = gd.iter().enumerate().map(|(i, v)| v / d.data()[i / per]).collect();
                    self.accumulate(grads, *xv, Tensor::new(x.shape().to_vec(), gx)?);
                }
                if self.rg(*dv) {
                    let mut gdv = vec![0.0; d.len()];
                    for (i, v) in gd.iter().enumerate() {
                        let b = i / per;
                        gdv[b] -= v * x.data()[i] / (d.data()[b] * d.data()[b]);
                    }
                    self.accumulate(grads, *dv, Tensor::new(d.shape().to_vec(), gdv)?);
                }
            }
            Op::SpatialMean(a) => {
                let x = self.value(*a);
                let (_, _, h, w) = x.dims4()?;
                let hw = h * w;
                let gx = (0..x.len()).map(|i| gd[i / hw] / hw as f64).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::SelectChannel(a, c) => {
                let x = self.value(*a);
                let (n, ch, _, _) = x.dims4()?;
                let mut gx = vec![0.0; x.len()];
                for b in 0..n {
                    gx[b * ch + c] = gd[b];
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, training, .. } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xh;
                        }
                    }
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; x.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                gx[i] = if *training {
                                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                                    gam[ch] * inv_std[ch] / m * (m * gd[i] - sum_g[ch] - xh * sum_gx[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g)?);
            }
            Op::PRelu(a, s) => {
                let x = self.value(*a).data();
                let slope = self.value(*s).item();
                let gx = gd.iter().zip(x).map(|(v, &xv)| if xv > 0.0 { *v } else { slope * v }).collect();
                let gs: f64 = gd.iter().zip(x).map(|(v, &xv)| if xv > 0.0 { 0.0 } else { v * xv }).sum();
                self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), gx)?);
                self.accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::Concat(inputs) => {
                let (n, total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            gv.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.value(v).shape().to_vec(), gv)?);
                    }
                    offset += c;
                }
            }
        }
        Ok(())
    }
}
