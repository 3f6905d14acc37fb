use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the network a layer belongs to. Only high-level layers
/// are ever quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleTag {
    LowLevel,
    HighLevel,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    /// Adds `sign · rgb_mean` per channel.
    MeanShift { sign: f64 },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool },
    Relu,
    PRelu,
    BatchNorm { channels: usize },
    Add,
    Concat,
    PixelShuffle { r: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub tag: ModuleTag,
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl Layer {
    /// A convolution whose input activations and weights are quantized.
    pub fn is_quant_site(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
            && self.tag == ModuleTag::HighLevel
            && (self.weight_bits < 32 || self.act_bits < 32)
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, bias, .. } => in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 },
            LayerKind::BatchNorm { channels } => 2 * channels,
            LayerKind::PRelu => 1,
            _ => 0,
        }
    }
}

/// Declarative layer graph. Layers are stored in evaluation order and only
/// reference earlier layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub scale: usize,
    pub layers: Vec<Layer>,
    pub rgb_mean: [f64; 3],
    /// Layer whose output feeds the structure-transfer loss.
    pub feature_tap: usize,
    /// Default gate ratio P (percent) and calibration percentile M.
    pub gate_ratio: f64,
    pub percentile: f64,
}

/// Per-layer output shape `(channels, height, width)`.
pub type Shape3 = (usize, usize, usize);

impl ModelDescriptor {
    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Indices of quantized convolution layers in evaluation order.
    pub fn quant_sites(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_quant_site()).map(|(i, _)| i).collect()
    }

    /// Check references and propagate shapes for an `h × w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<Shape3>> {
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.iter().any(|&j| j >= i) {
                return Err(Error::Contract(format!("layer {} ({}) references a later layer", i, l.name)));
            }
            let arity_err = |n: &str| Error::Contract(format!("layer {} ({}) expects {n} input(s)", i, l.name));
            let first = || l.inputs.first().map(|&j| shapes[j]).ok_or_else(|| arity_err("at least one"));
            let s = match &l.kind {
                LayerKind::Input => (3, h, w),
                LayerKind::MeanShift { .. } => {
                    let s = first()?;
                    if s.0 != 3 {
                        return Err(Error::dim("mean_shift", format!("layer {} sees {} channels", l.name, s.0)));
                    }
                    s
                }
                LayerKind::Conv { in_ch, out_ch, kernel, stride, .. } => {
                    let (c, hh, ww) = first()?;
                    if c != *in_ch {
                        return Err(Error::dim("conv2d", format!("layer {} expects {in_ch} channels, gets {c}", l.name)));
                    }
                    let pad = kernel / 2;
                    if hh + 2 * pad < *kernel || ww + 2 * pad < *kernel {
                        return Err(Error::dim("conv2d", format!("layer {} input {hh}x{ww} smaller than kernel", l.name)));
                    }
                    (*out_ch, (hh + 2 * pad - kernel) / stride + 1, (ww + 2 * pad - kernel) / stride + 1)
                }
                LayerKind::Relu | LayerKind::PRelu => first()?,
                LayerKind::BatchNorm { channels } => {
                    let s = first()?;
                    if s.0 != *channels {
                        return Err(Error::dim("batch_norm", format!("layer {} expects {channels} channels", l.name)));
                    }
                    s
                }
                LayerKind::Add => {
                    let s = first()?;
                    if l.inputs.len() < 2 || l.inputs.iter().any(|&j| shapes[j] != s) {
                        return Err(Error::dim("add", format!("layer {} operands differ", l.name)));
                    }
                    s
                }
                LayerKind::Concat => {
                    let (_, hh, ww) = first()?;
                    let mut c = 0;
                    for &j in &l.inputs {
                        let (cj, hj, wj) = shapes[j];
                        if (hj, wj) != (hh, ww) {
                            return Err(Error::dim("concat", format!("layer {} spatial mismatch", l.name)));
                        }
                        c += cj;
                    }
                    (c, hh, ww)
                }
                LayerKind::PixelShuffle { r } => {
                    let (c, hh, ww) = first()?;
                    if c % (r * r) != 0 {
                        return Err(Error::dim("pixel_shuffle", format!("layer {} has {c} channels for r={r}", l.name)));
                    }
                    (c / (r * r), hh * r, ww * r)
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Input-side shape of layer `i` (its first input's output shape).
    pub fn input_shape(&self, shapes: &[Shape3], i: usize) -> Option<Shape3> {
        self.layers[i].inputs.first().map(|&j| shapes[j])
    }
}

/// Incremental descriptor construction.
pub(crate) struct Builder {
    pub layers: Vec<Layer>,
    pub bits: u32,
}

impl Builder {
    pub fn new(bits: u32) -> Self {
        let mut b = Builder { layers: Vec::new(), bits };
        b.push("input", LayerKind::Input, vec![], ModuleTag::LowLevel);
        b
    }

    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, tag: ModuleTag) -> usize {
        let bits = if tag == ModuleTag::HighLevel { self.bits } else { 32 };
        self.layers.push(Layer { name: name.to_string(), kind, inputs, tag, weight_bits: bits, act_bits: bits });
        self.layers.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: usize, in_ch: usize, out_ch: usize, kernel: usize, tag: ModuleTag) -> usize {
        self.push(name, LayerKind::Conv { in_ch, out_ch, kernel, stride: 1, bias: true }, vec![x], tag)
    }
}
