use serde::{Deserialize, Serialize};

use super::descriptor::{Builder, LayerKind, ModelDescriptor, ModuleTag};
use crate::error::{Error, Result};

/// RGB mean of the DIV2K training set on the [0, 255] scale.
pub const DIV2K_RGB_MEAN: [f64; 3] = [0.4488 * 255.0, 0.4371 * 255.0, 0.4040 * 255.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Edsr,
    Rdn,
    SrResNet,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edsr" => Ok(Preset::Edsr),
            "rdn" => Ok(Preset::Rdn),
            "srresnet" => Ok(Preset::SrResNet),
            other => Err(Error::param("preset", format!("unknown preset `{other}` (expected edsr, rdn or srresnet)"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Edsr => "edsr",
            Preset::Rdn => "rdn",
            Preset::SrResNet => "srresnet",
        }
    }

    /// Default (gate ratio P, calibration percentile M).
    pub fn defaults(self) -> (f64, f64) {
        match self {
            Preset::Edsr => (30.0, 99.0),
            Preset::Rdn => (50.0, 95.0),
            Preset::SrResNet => (10.0, 99.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    Toy,
    Full,
}

impl std::str::FromStr for ModelSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(ModelSize::Toy),
            "full" => Ok(ModelSize::Full),
            other => Err(Error::param("size", format!("unknown model size `{other}` (expected toy or full)"))),
        }
    }
}

/// Build a preset. `bits` applies to the weights and activations of every
/// high-level convolution; everything else stays at 32 bits.
pub fn build_model(preset: Preset, scale: usize, size: ModelSize, bits: u32) -> Result<ModelDescriptor> {
    if !matches!(scale, 2..=4) {
        return Err(Error::param("scale", format!("{scale} not in {{2, 3, 4}}")));
    }
    if !(1..=32).contains(&bits) {
        return Err(Error::param("bits", format!("{bits} outside [1, 32]")));
    }
    let mut desc = match (preset, size) {
        (Preset::Edsr, ModelSize::Full) => edsr(16, 64, scale, bits),
        (Preset::Edsr, ModelSize::Toy) => edsr(4, 16, scale, bits),
        (Preset::Rdn, ModelSize::Full) => rdn(16, 8, 64, scale, bits),
        (Preset::Rdn, ModelSize::Toy) => rdn(2, 3, 8, scale, bits),
        (Preset::SrResNet, ModelSize::Full) => srresnet(16, 64, scale, bits),
        (Preset::SrResNet, ModelSize::Toy) => srresnet(4, 16, scale, bits),
    };
    let (p, m) = preset.defaults();
    desc.gate_ratio = p;
    desc.percentile = m;
    desc.name = format!("{}-{}", preset.name(), if size == ModelSize::Toy { "toy" } else { "full" });
    Ok(desc)
}

/// EDSR with a custom body, named and configured like the EDSR presets.
pub fn build_edsr(blocks: usize, channels: usize, scale: usize, bits: u32) -> Result<ModelDescriptor> {
    if blocks == 0 || channels == 0 {
        return Err(Error::param("blocks/channels", "must be positive"));
    }
    let mut desc = build_model(Preset::Edsr, scale, ModelSize::Toy, bits)?;
    let keep = (desc.gate_ratio, desc.percentile);
    desc = edsr(blocks, channels, scale, bits);
    (desc.gate_ratio, desc.percentile) = keep;
    desc.name = format!("edsr-{blocks}x{channels}");
    Ok(desc)
}

fn finish(b: Builder, scale: usize, tap: usize) -> ModelDescriptor {
    ModelDescriptor {
        name: String::new(),
        scale,
        layers: b.layers,
        rgb_mean: DIV2K_RGB_MEAN,
        feature_tap: tap,
        gate_ratio: 0.0,
        percentile: 99.0,
    }
}

/// conv → pixel shuffle stages; ×4 is two ×2 stages.
fn upsampler(b: &mut Builder, mut x: usize, ch: usize, scale: usize, prelu: bool) -> usize {
    let stages: &[usize] = match scale {
        2 => &[2],
        3 => &[3],
        _ => &[2, 2],
    };
    for (s, &r) in stages.iter().enumerate() {
        x = b.conv(&format!("up{s}.conv"), x, ch, ch * r * r, 3, ModuleTag::Reconstruction);
        x = b.push(&format!("up{s}.shuffle"), LayerKind::PixelShuffle { r }, vec![x], ModuleTag::Reconstruction);
        if prelu {
            x = b.push(&format!("up{s}.prelu"), LayerKind::PRelu, vec![x], ModuleTag::Reconstruction);
        }
    }
    x
}

fn edsr(blocks: usize, ch: usize, scale: usize, bits: u32) -> ModelDescriptor {
    use ModuleTag::*;
    let mut b = Builder::new(bits);
    let x = b.push("sub_mean", LayerKind::MeanShift { sign: -1.0 }, vec![0], LowLevel);
    let head = b.conv("head", x, 3, ch, 3, LowLevel);
    let mut x = head;
    for i in 0..blocks {
        let c1 = b.conv(&format!("body{i}.conv1"), x, ch, ch, 3, HighLevel);
        let r = b.push(&format!("body{i}.relu"), LayerKind::Relu, vec![c1], HighLevel);
        let c2 = b.conv(&format!("body{i}.conv2"), r, ch, ch, 3, HighLevel);
        x = b.push(&format!("body{i}.add"), LayerKind::Add, vec![x, c2], HighLevel);
    }
    let tap = x;
    let end = b.conv("body_end", x, ch, ch, 3, Reconstruction);
    let x = b.push("global_skip", LayerKind::Add, vec![head, end], Reconstruction);
    let x = upsampler(&mut b, x, ch, scale, false);
    let x = b.conv("tail", x, ch, 3, 3, Reconstruction);
    b.push("add_mean", LayerKind::MeanShift { sign: 1.0 }, vec![x], Reconstruction);
    finish(b, scale, tap)
}

/// Residual dense network with `d` blocks of `c` dense layers, growth `g`
/// and `g0 = g` feature channels.
fn rdn(d: usize, c: usize, g: usize, scale: usize, bits: u32) -> ModelDescriptor {
    use ModuleTag::*;
    let g0 = g;
    let mut b = Builder::new(bits);
    let sfe1 = b.conv("sfe1", 0, 3, g0, 3, LowLevel);
    let mut x = b.conv("sfe2", sfe1, g0, g0, 3, LowLevel);
    let mut block_outs = Vec::with_capacity(d);
    for bi in 0..d {
        let mut feats = vec![x];
        let mut cat = x;
        for ci in 0..c {
            let conv = b.conv(&format!("rdb{bi}.conv{ci}"), cat, g0 + ci * g, g, 3, HighLevel);
            let r = b.push(&format!("rdb{bi}.relu{ci}"), LayerKind::Relu, vec![conv], HighLevel);
            feats.push(r);
            cat = b.push(&format!("rdb{bi}.cat{ci}"), LayerKind::Concat, feats.clone(), HighLevel);
        }
        let lff = b.conv(&format!("rdb{bi}.lff"), cat, g0 + c * g, g0, 1, HighLevel);
        x = b.push(&format!("rdb{bi}.add"), LayerKind::Add, vec![x, lff], HighLevel);
        block_outs.push(x);
    }
    let cat = b.push("gff.cat", LayerKind::Concat, block_outs, HighLevel);
    let gff1 = b.conv("gff.conv1", cat, d * g0, g0, 1, HighLevel);
    let gff2 = b.conv("gff.conv2", gff1, g0, g0, 3, HighLevel);
    let x = b.push("global_skip", LayerKind::Add, vec![sfe1, gff2], Reconstruction);
    let x = upsampler(&mut b, x, g0, scale, false);
    b.conv("tail", x, g0, 3, 3, Reconstruction);
    finish(b, scale, gff2)
}

fn srresnet(blocks: usize, ch: usize, scale: usize, bits: u32) -> ModelDescriptor {
    use ModuleTag::*;
    let mut b = Builder::new(bits);
    let x = b.push("sub_mean", LayerKind::MeanShift { sign: -1.0 }, vec![0], LowLevel);
    let head = b.conv("head", x, 3, ch, 9, LowLevel);
    let head = b.push("head.prelu", LayerKind::PRelu, vec![head], LowLevel);
    let mut x = head;
    for i in 0..blocks {
        let c1 = b.conv(&format!("body{i}.conv1"), x, ch, ch, 3, HighLevel);
        let n1 = b.push(&format!("body{i}.bn1"), LayerKind::BatchNorm { channels: ch }, vec![c1], HighLevel);
        let p = b.push(&format!("body{i}.prelu"), LayerKind::PRelu, vec![n1], HighLevel);
        let c2 = b.conv(&format!("body{i}.conv2"), p, ch, ch, 3, HighLevel);
        let n2 = b.push(&format!("body{i}.bn2"), LayerKind::BatchNorm { channels: ch }, vec![c2], HighLevel);
        x = b.push(&format!("body{i}.add"), LayerKind::Add, vec![x, n2], HighLevel);
    }
    let tap = x;
    let end = b.conv("body_end", x, ch, ch, 3, Reconstruction);
    let end = b.push("body_end.bn", LayerKind::BatchNorm { channels: ch }, vec![end], Reconstruction);
    let x = b.push("global_skip", LayerKind::Add, vec![head, end], Reconstruction);
    let x = upsampler(&mut b, x, ch, scale, true);
    let x = b.conv("tail", x, ch, 3, 9, Reconstruction);
    b.push("add_mean", LayerKind::MeanShift { sign: 1.0 }, vec![x], Reconstruction);
    finish(b, scale, tap)
}
