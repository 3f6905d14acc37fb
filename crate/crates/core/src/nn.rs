//! Parameter containers shared by the network executor and the gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tensor};

/// Convolution weights (OIHW) with optional bias and fixed geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weight and bias.
    pub fn init<R: Rng + ?Sized>(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let weight = Tensor::uniform(&[out_ch, in_ch, k, k], -bound, bound, rng);
        let bias = bias.then(|| Tensor::uniform(&[out_ch], -bound, bound, rng));
        Conv2dParams { weight, bias, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Plain (untaped) forward.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (o, i, k, _) = self.weight.dims4()?;
        if i != c {
            return Err(Error::dim("conv2d", format!("input channels (axis 1) = {c} but weight in-channels (axis 1) = {i}")));
        }
        let (out, ho, wo) = crate::tensor::conv2d_forward(
            x.data(),
            n,
            c,
            h,
            w,
            self.weight.data(),
            o,
            k,
            self.bias.as_ref().map(Tensor::data),
            self.stride,
            self.pad,
        );
        Tensor::new(vec![n, o, ho, wo], out)
    }
}

/// Batch-norm affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Fold one batch into the running statistics (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }

    /// Inference-mode forward on an NCHW tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::dim("batch_norm", format!("{c} channels vs {} parameters", self.channels())));
        }
        let hw = h * w;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = self.gamma[ch] * (*v - self.running_mean[ch]) / (self.running_var[ch] + self.eps).sqrt() + self.beta[ch];
        }
        Ok(out)
    }
}

/// Absorb an inference-mode batch norm into the preceding convolution:
/// `w' = w·γ/√(σ²+ε)`, `b' = (b − μ)·γ/√(σ²+ε) + β`.
pub fn fold_bn(conv: &Conv2dParams, bn: &BatchNormParams) -> Result<Conv2dParams> {
    let o = conv.out_channels();
    if bn.channels() != o {
        return Err(Error::dim("fold_bn", format!("{} bn channels for {o} conv outputs", bn.channels())));
    }
    let per = conv.weight.len() / o;
    let mut weight = conv.weight.clone();
    let mut bias = vec![0.0; o];
    for c in 0..o {
        let denom = bn.running_var[c] + bn.eps;
        if !(denom > 0.0) {
            return Err(Error::param("running_var", format!("channel {c}: variance + eps = {denom} is not positive")));
        }
        let f = bn.gamma[c] / denom.sqrt();
        for v in &mut weight.data_mut()[c * per..(c + 1) * per] {
            *v *= f;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[c]);
        bias[c] = (b - bn.running_mean[c]) * f + bn.beta[c];
    }
    Ok(Conv2dParams { weight, bias: Some(Tensor::from_vec(bias)), stride: conv.stride, pad: conv.pad })
}
