use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::descriptor::{LayerKind, ModelDescriptor};
use crate::error::{Error, Result};
use crate::gate::{GateController, GatePart, GateRecord};
use crate::nn::{BatchNormParams, Conv2dParams};
use crate::quant::{ActQuantizer, SymmetricQuantizer, WeightQuantizer, BOUND_EPS};
use crate::tensor::{BatchStats, Gradients, Tape, Tensor, Var};

/// Activation quantizer attached to one quantized convolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteQuantizer {
    Dual(ActQuantizer),
    Symmetric(SymmetricQuantizer),
}

/// Address of one trainable tensor in a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    Weight(usize),
    Bias(usize),
    BnGamma(usize),
    BnBeta(usize),
    PreluSlope(usize),
    AlphaLower(usize),
    AlphaUpper(usize),
    Alpha(usize),
    Gate(usize, GatePart),
}

impl ParamKey {
    pub fn is_bound(self) -> bool {
        matches!(self, ParamKey::AlphaLower(_) | ParamKey::AlphaUpper(_) | ParamKey::Alpha(_))
    }

    pub fn is_gate(self) -> bool {
        matches!(self, ParamKey::Gate(..))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply weight and activation fake quantization at quantized sites.
    pub quantized: bool,
    /// Replace rounding by the identity (clip only).
    pub relaxed: bool,
    /// Scale quantizer bounds by the gate outputs.
    pub apply_gates: bool,
    /// Batch norms use batch statistics.
    pub training: bool,
    /// Parameters are recorded as differentiable leaves.
    pub trainable: bool,
}

impl ForwardOptions {
    pub fn fp() -> Self {
        ForwardOptions { quantized: false, relaxed: false, apply_gates: false, training: false, trainable: false }
    }

    pub fn quantized_eval() -> Self {
        ForwardOptions { quantized: true, relaxed: false, apply_gates: true, training: false, trainable: false }
    }
}

#[derive(Clone, Debug)]
pub struct GateTrace {
    pub layer: usize,
    pub record: GateRecord,
}

/// Everything a recorded forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    /// Output of the structure-transfer tap layer.
    pub tap: Var,
    pub bindings: Vec<(ParamKey, Var)>,
    pub gates: Vec<GateTrace>,
    pub bn_stats: Vec<(usize, BatchStats)>,
    /// Raw (pre-quantization) input of every quantized convolution.
    pub site_inputs: Vec<(usize, Var)>,
    /// Effective bounds handed to each dual-bound quantizer.
    pub site_bounds: Vec<(usize, Var, Var)>,
    /// Quantized activation entering each quantized convolution.
    pub site_quantized: Vec<(usize, Var)>,
    pub beta_applied: bool,
}

impl ForwardTrace {
    pub fn var(&self, key: ParamKey) -> Option<Var> {
        self.bindings.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
    }

    /// Gradient of every bound parameter that received one.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<(ParamKey, Tensor)> {
        self.bindings
            .iter()
            .map(|&(k, v)| (k, grads.get_or_zeros(v, tape.value(v))))
            .collect()
    }
}

fn bind(tape: &mut Tape, bindings: &mut Vec<(ParamKey, Var)>, trainable: bool, key: ParamKey, t: Tensor) -> Var {
    let v = tape.leaf(t, trainable);
    bindings.push((key, v));
    v
}

/// A descriptor with weights, quantizers and gates.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub desc: ModelDescriptor,
    pub convs: BTreeMap<usize, Conv2dParams>,
    pub bns: BTreeMap<usize, BatchNormParams>,
    pub prelus: BTreeMap<usize, f64>,
    pub act_quant: BTreeMap<usize, SiteQuantizer>,
    pub weight_quant: BTreeMap<usize, WeightQuantizer>,
    pub gates: BTreeMap<usize, GateController>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(desc: ModelDescriptor, rng: &mut R) -> Result<Self> {
        desc.infer_shapes(16, 16)?;
        let mut convs = BTreeMap::new();
        let mut bns = BTreeMap::new();
        let mut prelus = BTreeMap::new();
        for (i, l) in desc.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv { in_ch, out_ch, kernel, stride, bias } => {
                    convs.insert(i, Conv2dParams::init(out_ch, in_ch, kernel, stride, kernel / 2, bias, rng));
                }
                LayerKind::BatchNorm { channels } => {
                    bns.insert(i, BatchNormParams::new(channels));
                }
                LayerKind::PRelu => {
                    prelus.insert(i, 0.25);
                }
                _ => {}
            }
        }
        Ok(Network {
            desc,
            convs,
            bns,
            prelus,
            act_quant: BTreeMap::new(),
            weight_quant: BTreeMap::new(),
            gates: BTreeMap::new(),
        })
    }

    /// Drop every quantizer and gate.
    pub fn clear_quantization(&mut self) {
        self.act_quant.clear();
        self.weight_quant.clear();
        self.gates.clear();
    }

    /// Mutable view of the values behind `key`.
    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        match key {
            ParamKey::Weight(i) => self.convs.get_mut(&i).map(|c| c.weight.data_mut()),
            ParamKey::Bias(i) => self.convs.get_mut(&i).and_then(|c| c.bias.as_mut()).map(Tensor::data_mut),
            ParamKey::BnGamma(i) => self.bns.get_mut(&i).map(|b| b.gamma.as_mut_slice()),
            ParamKey::BnBeta(i) => self.bns.get_mut(&i).map(|b| b.beta.as_mut_slice()),
            ParamKey::PreluSlope(i) => self.prelus.get_mut(&i).map(std::slice::from_mut),
            ParamKey::AlphaLower(i) => match self.act_quant.get_mut(&i) {
                Some(SiteQuantizer::Dual(q)) => Some(std::slice::from_mut(&mut q.alpha_l)),
                _ => None,
            },
            ParamKey::AlphaUpper(i) => match self.act_quant.get_mut(&i) {
                Some(SiteQuantizer::Dual(q)) => Some(std::slice::from_mut(&mut q.alpha_u)),
                _ => None,
            },
            ParamKey::Alpha(i) => match self.act_quant.get_mut(&i) {
                Some(SiteQuantizer::Symmetric(q)) => Some(std::slice::from_mut(&mut q.alpha)),
                _ => None,
            },
            ParamKey::Gate(i, part) => self.gates.get_mut(&i).map(|g| g.part_mut(part)),
        }
    }

    /// Keep every quantizer valid after an update: `α_u ≥ α_l + ε`, `α ≥ ε`.
    pub fn enforce_bound_order(&mut self) {
        for q in self.act_quant.values_mut() {
            match q {
                SiteQuantizer::Dual(a) => a.enforce_order(BOUND_EPS),
                SiteQuantizer::Symmetric(s) => s.alpha = s.alpha.max(BOUND_EPS),
            }
        }
    }

    /// Fold the statistics of a training-mode pass into running averages.
    pub fn observe(&mut self, trace: &ForwardTrace) {
        for (i, stats) in &trace.bn_stats {
            if let Some(bn) = self.bns.get_mut(i) {
                bn.update_running(stats);
            }
        }
        for g in &trace.gates {
            if let Some(gate) = self.gates.get_mut(&g.layer) {
                gate.observe(&g.record);
            }
        }
    }

    /// Record a forward pass of an NCHW batch on `[0, 255]` scale.
    pub fn forward(&self, tape: &mut Tape, input: Var, opts: ForwardOptions) -> Result<ForwardTrace> {
        let mut bindings = Vec::new();
        let mut vals: Vec<Var> = Vec::with_capacity(self.desc.layers.len());
        let mut gates = Vec::new();
        let mut bn_stats = Vec::new();
        let mut site_inputs = Vec::new();
        let mut site_bounds = Vec::new();
        let mut site_quantized = Vec::new();
        let mut beta_applied = false;
        for (i, l) in self.desc.layers.iter().enumerate() {
            let x = l.inputs.first().map(|&j| vals[j]);
            let inp = || x.ok_or_else(|| Error::Contract(format!("layer {} ({}) has no input", i, l.name)));
            let y = match &l.kind {
                LayerKind::Input => input,
                LayerKind::MeanShift { sign } => {
                    let off: Vec<f64> = self.desc.rgb_mean.iter().map(|m| sign * m).collect();
                    tape.shift_channels(inp()?, &off)?
                }
                LayerKind::Conv { .. } => {
                    let conv = &self.convs[&i];
                    let mut w = bind(tape, &mut bindings, opts.trainable, ParamKey::Weight(i), conv.weight.clone());
                    let b = conv.bias.as_ref().map(|b| bind(tape, &mut bindings, opts.trainable, ParamKey::Bias(i), b.clone()));
                    let mut xin = inp()?;
                    if l.is_quant_site() {
                        site_inputs.push((i, xin));
                    }
                    if opts.quantized && l.is_quant_site() {
                        let q = self
                            .act_quant
                            .get(&i)
                            .ok_or_else(|| Error::State(format!("activation quantizer of layer {} ({}) is not calibrated", i, l.name)))?;
                        let gate = match self.gates.get(&i) {
                            Some(g) => {
                                let gv = g.bind(tape, opts.trainable);
                                for part in GatePart::ALL {
                                    bindings.push((ParamKey::Gate(i, part), gv.get(part)));
                                }
                                let rec = g.record(tape, xin, &gv, opts.training, opts.relaxed)?;
                                gates.push(GateTrace { layer: i, record: rec.clone() });
                                Some(rec)
                            }
                            None => None,
                        };
                        xin = match q {
                            SiteQuantizer::Dual(aq) => {
                                let mut lo = bind(tape, &mut bindings, opts.trainable, ParamKey::AlphaLower(i), Tensor::scalar(aq.alpha_l));
                                let mut hi = bind(tape, &mut bindings, opts.trainable, ParamKey::AlphaUpper(i), Tensor::scalar(aq.alpha_u));
                                if let (Some(rec), true) = (&gate, opts.apply_gates) {
                                    lo = tape.mul(rec.beta_l, lo)?;
                                    hi = tape.mul(rec.beta_u, hi)?;
                                    beta_applied = true;
                                }
                                site_bounds.push((i, lo, hi));
                                tape.fake_quant_asym(xin, lo, hi, aq.bits, opts.relaxed, true)?
                            }
                            SiteQuantizer::Symmetric(sq) => {
                                let a = bind(tape, &mut bindings, opts.trainable, ParamKey::Alpha(i), Tensor::scalar(sq.alpha));
                                tape.fake_quant_sym(xin, a, sq.bits, opts.relaxed)?
                            }
                        };
                        site_quantized.push((i, xin));
                        let wq = self
                            .weight_quant
                            .get(&i)
                            .ok_or_else(|| Error::State(format!("weight quantizer of layer {} ({}) is not calibrated", i, l.name)))?;
                        w = wq.apply(tape, w, opts.relaxed)?;
                    }
                    tape.conv2d(xin, w, b, conv.stride, conv.pad)?
                }
                LayerKind::Relu => tape.relu(inp()?),
                LayerKind::PRelu => {
                    let s = bind(tape, &mut bindings, opts.trainable, ParamKey::PreluSlope(i), Tensor::scalar(self.prelus[&i]));
                    tape.prelu(inp()?, s)?
                }
                LayerKind::BatchNorm { .. } => {
                    let bn = &self.bns[&i];
                    let g = bind(tape, &mut bindings, opts.trainable, ParamKey::BnGamma(i), Tensor::from_vec(bn.gamma.clone()));
                    let b = bind(tape, &mut bindings, opts.trainable, ParamKey::BnBeta(i), Tensor::from_vec(bn.beta.clone()));
                    let y = tape.batch_norm(inp()?, g, b, &bn.running_mean, &bn.running_var, bn.eps, opts.training)?;
                    if let Some(s) = tape.batch_stats(y) {
                        bn_stats.push((i, s.clone()));
                    }
                    y
                }
                LayerKind::Add => {
                    let mut acc = inp()?;
                    for &j in &l.inputs[1..] {
                        acc = tape.add(acc, vals[j])?;
                    }
                    acc
                }
                LayerKind::Concat => {
                    let parts: Vec<Var> = l.inputs.iter().map(|&j| vals[j]).collect();
                    tape.concat(&parts)?
                }
                LayerKind::PixelShuffle { r } => tape.pixel_shuffle(inp()?, *r)?,
            };
            vals.push(y);
        }
        Ok(ForwardTrace {
            output: vals[self.desc.output()],
            tap: vals[self.desc.feature_tap],
            bindings,
            gates,
            bn_stats,
            site_inputs,
            site_bounds,
            site_quantized,
            beta_applied,
        })
    }

    /// Untaped inference on a batch.
    pub fn infer(&self, lr: &Tensor, quantized: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(lr.clone());
        let opts = if quantized { ForwardOptions::quantized_eval() } else { ForwardOptions::fp() };
        let trace = self.forward(&mut tape, x, opts)?;
        Ok(tape.value(trace.output).clone())
    }
}
