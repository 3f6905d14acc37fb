//! Analytic parameter and bit-operation counts. A convolution costs
//! `2 · MACs` operations (multiply and add) and `ops · b_w · b_a` BOPs;
//! effective parameters are `params · b_w / 32`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::calibration::select_gated_layers;
use crate::error::{Error, Result};
use crate::gate::{GATE_BITS, GATE_HIDDEN};
use crate::models::{LayerKind, ModelDescriptor, ModuleTag};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub high_level: bool,
    pub is_gate: bool,
    pub params: u64,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub macs: u64,
    pub ops: u64,
    pub bops: f64,
    pub effective_params: f64,
}

impl LayerCost {
    /// Cost of a convolution with `macs` multiply-accumulates (2 ops each).
    pub fn conv(name: String, high_level: bool, is_gate: bool, params: u64, macs: u64, weight_bits: u32, act_bits: u32) -> Self {
        let ops = 2 * macs;
        LayerCost {
            name,
            kind: "conv",
            high_level,
            is_gate,
            params,
            weight_bits,
            act_bits,
            macs,
            ops,
            bops: ops as f64 * weight_bits as f64 * act_bits as f64,
            effective_params: params as f64 * weight_bits as f64 / 32.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub output_height: usize,
    pub output_width: usize,
    pub scale: usize,
    pub params: u64,
    pub effective_params: f64,
    pub high_level_effective_params: f64,
    pub gate_params: f64,
    pub gate_param_ratio: f64,
    pub total_bops: f64,
    pub gate_bops: f64,
    pub gate_bops_ratio: f64,
    pub gated_layers: Vec<usize>,
    pub layers: Vec<LayerCost>,
}

/// Default gate placement without statistics: every site has the same
/// intensity, so the shallowest `ceil(P/100 · L)` sites are chosen.
pub fn default_gated(desc: &ModelDescriptor) -> Vec<usize> {
    let flat: Vec<(usize, f64)> = desc.quant_sites().into_iter().map(|i| (i, 0.0)).collect();
    select_gated_layers(&flat, desc.gate_ratio)
}

/// Cost of `desc` producing an `out_h × out_w` image. `gated` lists the
/// layers carrying a gate (default placement when `None`).
pub fn complexity(desc: &ModelDescriptor, out_h: usize, out_w: usize, gated: Option<&[usize]>) -> Result<ComplexityReport> {
    let s = desc.scale;
    if out_h % s != 0 || out_w % s != 0 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("complexity", format!("output {out_w}x{out_h} not divisible by scale {s}")));
    }
    let shapes = desc.infer_shapes(out_h / s, out_w / s)?;
    let out = shapes[desc.output()];
    if (out.1, out.2) != (out_h, out_w) {
        return Err(Error::dim("complexity", format!("descriptor produces {}x{}, not {out_w}x{out_h}", out.2, out.1)));
    }
    let gated: Vec<usize> = match gated {
        Some(g) => g.to_vec(),
        None => if desc.quant_sites().is_empty() { Vec::new() } else { default_gated(desc) },
    };
    let mut layers = Vec::new();
    for (i, l) in desc.layers.iter().enumerate() {
        let hl = l.tag == ModuleTag::HighLevel;
        match l.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let (_, ho, wo) = shapes[i];
                let macs = (ho * wo * out_ch * in_ch * kernel * kernel) as u64;
                layers.push(LayerCost::conv(l.name.clone(), hl, false, l.param_count() as u64, macs, l.weight_bits, l.act_bits));
                if gated.contains(&i) {
                    let (c, h, w) = desc.input_shape(&shapes, i).expect("conv has an input");
                    let (h1, w1) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
                    let p1 = (GATE_HIDDEN * c * 9 + GATE_HIDDEN) as u64;
                    let m1 = (h1 * w1 * GATE_HIDDEN * c * 9) as u64;
                    layers.push(LayerCost::conv(format!("{}.gate.conv1", l.name), true, true, p1, m1, GATE_BITS, GATE_BITS));
                    let p2 = (2 * GATE_HIDDEN + 2) as u64;
                    let m2 = (2 * GATE_HIDDEN) as u64;
                    layers.push(LayerCost::conv(format!("{}.gate.conv2", l.name), true, true, p2, m2, GATE_BITS, GATE_BITS));
                }
            }
            LayerKind::BatchNorm { .. } | LayerKind::PRelu => {
                let params = l.param_count() as u64;
                layers.push(LayerCost {
                    name: l.name.clone(),
                    kind: if matches!(l.kind, LayerKind::PRelu) { "prelu" } else { "batch_norm" },
                    high_level: hl,
                    is_gate: false,
                    params,
                    weight_bits: 32,
                    act_bits: 32,
                    macs: 0,
                    ops: 0,
                    bops: 0.0,
                    effective_params: params as f64,
                });
            }
            _ => {}
        }
    }
    let params = layers.iter().filter(|c| !c.is_gate).map(|c| c.params).sum();
    let effective_params: f64 = layers.iter().map(|c| c.effective_params).fold(0.0, |a, b| a + b);
    let high_level_effective_params = layers.iter().filter(|c| c.high_level).map(|c| c.effective_params).fold(0.0, |a, b| a + b);
    let gate_params: f64 = layers.iter().filter(|c| c.is_gate).map(|c| c.effective_params).fold(0.0, |a, b| a + b);
    let total_bops: f64 = layers.iter().map(|c| c.bops).fold(0.0, |a, b| a + b);
    let gate_bops: f64 = layers.iter().filter(|c| c.is_gate).map(|c| c.bops).fold(0.0, |a, b| a + b);
    Ok(ComplexityReport {
        model: desc.name.clone(),
        output_height: out_h,
        output_width: out_w,
        scale: s,
        params,
        effective_params,
        high_level_effective_params,
        gate_params,
        gate_param_ratio: if effective_params > 0.0 { gate_params / effective_params } else { 0.0 },
        total_bops,
        gate_bops,
        gate_bops_ratio: if total_bops > 0.0 { gate_bops / total_bops } else { 0.0 },
        gated_layers: gated,
        layers,
    })
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Summary followed by a per-layer table.
    pub fn to_table(&self, per_layer: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model              {}", self.model);
        let _ = writeln!(s, "output             {}x{} (x{})", self.output_width, self.output_height, self.scale);
        let _ = writeln!(s, "params             {:.4}M", self.params as f64 / 1e6);
        let _ = writeln!(s, "effective params   {:.4}M ({:.4}M high-level)", self.effective_params / 1e6, self.high_level_effective_params / 1e6);
        let _ = writeln!(s, "gate params        {:.1} ({:.3}%)", self.gate_params, 100.0 * self.gate_param_ratio);
        let _ = writeln!(s, "BOPs               {:.2}T", self.total_bops / 1e12);
        let _ = writeln!(s, "gate BOPs          {:.4}G ({:.4}%)", self.gate_bops / 1e9, 100.0 * self.gate_bops_ratio);
        if per_layer {
            let _ = writeln!(s, "\n{:<24} {:>10} {:>4} {:>4} {:>14} {:>14}", "layer", "params", "w", "a", "MACs", "BOPs");
            for c in &self.layers {
                let _ = writeln!(s, "{:<24} {:>10} {:>4} {:>4} {:>14} {:>14.4e}", c.name, c.params, c.weight_bits, c.act_bits, c.macs, c.bops);
            }
        }
        s
    }
}
