//! Per-sample dynamic gate: conv 3×3/2 → BN → ReLU → global average pool
//! → conv 1×1 → `2·sigmoid`, giving one `(β_l, β_u)` pair per image. The
//! bounds of the quantizer it controls become `β_l·α_l` and `β_u·α_u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fold_bn, BatchNormParams, Conv2dParams};
use crate::quant::WeightQuantizer;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Output channels of the first gate convolution.
pub const GATE_HIDDEN: usize = 4;
/// Bit-width of gate weights and activations once quantized.
pub const GATE_BITS: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GateController {
    pub conv1: Conv2dParams,
    pub bn: BatchNormParams,
    pub conv2: Conv2dParams,
    pub quantized: bool,
    pub gate_bits: u32,
    /// Tracked (min, max) of the conv1 input and the conv2 input.
    pub act_bounds: [Option<(f64, f64)>; 2],
    pub bound_momentum: f64,
}

/// Addressable gate parameter tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GatePart {
    Conv1Weight,
    Conv1Bias,
    BnGamma,
    BnBeta,
    Conv2Weight,
    Conv2Bias,
}

impl GatePart {
    pub const ALL: [GatePart; 6] = [
        GatePart::Conv1Weight,
        GatePart::Conv1Bias,
        GatePart::BnGamma,
        GatePart::BnBeta,
        GatePart::Conv2Weight,
        GatePart::Conv2Bias,
    ];
}

/// Tape handles for one gate's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub gamma: Var,
    pub beta: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

impl GateVars {
    pub fn get(&self, part: GatePart) -> Var {
        match part {
            GatePart::Conv1Weight => self.conv1_w,
            GatePart::Conv1Bias => self.conv1_b,
            GatePart::BnGamma => self.gamma,
            GatePart::BnBeta => self.beta,
            GatePart::Conv2Weight => self.conv2_w,
            GatePart::Conv2Bias => self.conv2_b,
        }
    }
}

/// What one recorded gate evaluation produced.
#[derive(Clone, Debug)]
pub struct GateRecord {
    pub beta_l: Var,
    pub beta_u: Var,
    pub bn_stats: Option<BatchStats>,
    /// Batch (min, max) seen at the two quantized activation points.
    pub act_ranges: [(f64, f64); 2],
}

impl GateController {
    /// Gate for a `channels`-wide feature map. `head_std` is the standard
    /// deviation of the 1×1 head weights; zero gives `β ≡ 1`.
    pub fn new<R: Rng + ?Sized>(channels: usize, head_std: f64, rng: &mut R) -> Self {
        let conv1 = Conv2dParams::init(GATE_HIDDEN, channels, 3, 2, 1, true, rng);
        let conv2 = Conv2dParams {
            weight: Tensor::randn(&[2, GATE_HIDDEN, 1, 1], head_std, rng),
            bias: Some(Tensor::zeros(&[2])),
            stride: 1,
            pad: 0,
        };
        GateController {
            conv1,
            bn: BatchNormParams::new(GATE_HIDDEN),
            conv2,
            quantized: false,
            gate_bits: GATE_BITS,
            act_bounds: [None, None],
            bound_momentum: 0.9,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weight.shape()[1]
    }

    /// Stored parameter count with the batch norm folded away.
    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GateVars {
        let mut leaf = |t: Tensor| tape.leaf(t, trainable);
        GateVars {
            conv1_w: leaf(self.conv1.weight.clone()),
            conv1_b: leaf(self.conv1.bias.clone().unwrap_or_else(|| Tensor::zeros(&[GATE_HIDDEN]))),
            gamma: leaf(Tensor::from_vec(self.bn.gamma.clone())),
            beta: leaf(Tensor::from_vec(self.bn.beta.clone())),
            conv2_w: leaf(self.conv2.weight.clone()),
            conv2_b: leaf(self.conv2.bias.clone().unwrap_or_else(|| Tensor::zeros(&[2]))),
        }
    }

    pub fn part_mut(&mut self, part: GatePart) -> &mut [f64] {
        match part {
            GatePart::Conv1Weight => self.conv1.weight.data_mut(),
            GatePart::Conv1Bias => self.conv1.bias.get_or_insert_with(|| Tensor::zeros(&[GATE_HIDDEN])).data_mut(),
            GatePart::BnGamma => &mut self.bn.gamma,
            GatePart::BnBeta => &mut self.bn.beta,
            GatePart::Conv2Weight => self.conv2.weight.data_mut(),
            GatePart::Conv2Bias => self.conv2.bias.get_or_insert_with(|| Tensor::zeros(&[2])).data_mut(),
        }
    }

    fn act_bounds_for(&self, slot: usize, x: &Tensor) -> (f64, f64) {
        self.act_bounds[slot].unwrap_or((x.min(), x.max()))
    }

    fn quant_act(&self, tape: &mut Tape, x: Var, slot: usize, relaxed: bool) -> Result<Var> {
        let (lo, hi) = self.act_bounds_for(slot, tape.value(x));
        let q = WeightQuantizer { bounds: Some((lo, hi)), bits: self.gate_bits };
        q.apply(tape, x, relaxed)
    }

    fn quant_weight(&self, tape: &mut Tape, w: Var, relaxed: bool) -> Result<Var> {
        WeightQuantizer::min_max(tape.value(w), self.gate_bits).apply(tape, w, relaxed)
    }

    /// Record the gate on `tape`. In training mode the batch norm uses batch
    /// statistics; otherwise running statistics, folded into conv1 when the
    /// gate is quantized.
    pub fn record(&self, tape: &mut Tape, features: Var, vars: &GateVars, training: bool, relaxed: bool) -> Result<GateRecord> {
        let c = tape.value(features).dims4()?.1;
        if c != self.in_channels() {
            return Err(Error::dim(
                "gate_forward",
                format!("feature channels (axis 1) = {c} but gate expects {}", self.in_channels()),
            ));
        }
        let r0 = (tape.value(features).min(), tape.value(features).max());
        let x = if self.quantized { self.quant_act(tape, features, 0, relaxed)? } else { features };

        let mut bn_stats = None;
        let h = if self.quantized && !training {
            let folded = fold_bn(
                &Conv2dParams {
                    weight: tape.value(vars.conv1_w).clone(),
                    bias: Some(tape.value(vars.conv1_b).clone()),
                    stride: 2,
                    pad: 1,
                },
                &self.bn,
            )?;
            let w = tape.constant(folded.weight);
            let b = tape.constant(folded.bias.expect("fold sets bias"));
            let w = self.quant_weight(tape, w, relaxed)?;
            tape.conv2d(x, w, Some(b), 2, 1)?
        } else {
            let w = if self.quantized { self.quant_weight(tape, vars.conv1_w, relaxed)? } else { vars.conv1_w };
            let y = tape.conv2d(x, w, Some(vars.conv1_b), 2, 1)?;
            let y = tape.batch_norm(y, vars.gamma, vars.beta, &self.bn.running_mean, &self.bn.running_var, self.bn.eps, training)?;
            bn_stats = tape.batch_stats(y).cloned();
            y
        };
        let h = tape.relu(h);
        let p = tape.spatial_mean(h)?;
        let r1 = (tape.value(p).min(), tape.value(p).max());
        let p = if self.quantized { self.quant_act(tape, p, 1, relaxed)? } else { p };
        let w2 = if self.quantized { self.quant_weight(tape, vars.conv2_w, relaxed)? } else { vars.conv2_w };
        let z = tape.conv2d(p, w2, Some(vars.conv2_b), 1, 0)?;
        let head = |ch: usize, tape: &mut Tape| -> Result<Var> {
            let s = tape.select_channel(z, ch)?;
            let s = tape.sigmoid(s);
            Ok(tape.mul_scalar(s, 2.0))
        };
        let beta_l = head(0, tape)?;
        let beta_u = head(1, tape)?;
        Ok(GateRecord { beta_l, beta_u, bn_stats, act_ranges: [r0, r1] })
    }

    /// Fold a training-mode evaluation into the running statistics and the
    /// tracked activation bounds.
    pub fn observe(&mut self, rec: &GateRecord) {
        if let Some(stats) = &rec.bn_stats {
            self.bn.update_running(stats);
        }
        let m = self.bound_momentum;
        for (slot, &(lo, hi)) in rec.act_ranges.iter().enumerate() {
            self.act_bounds[slot] = Some(match self.act_bounds[slot] {
                None => (lo, hi),
                Some((l, h)) => (m * l + (1.0 - m) * lo, m * h + (1.0 - m) * hi),
            });
        }
    }
}

/// Inference-mode gate evaluation: per-sample `(β_l, β_u)`.
pub fn gate_forward(features: &Tensor, g: &GateController) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = g.bind(&mut tape, false);
    let rec = g.record(&mut tape, x, &vars, false, false)?;
    Ok((tape.value(rec.beta_l).clone(), tape.value(rec.beta_u).clone()))
}

/// Copy of `g` whose weights and activations run through 2-bit min/max
/// quantizers. The `(β_l, β_u)` head stays real-valued.
pub fn quantize_gate(g: &GateController) -> GateController {
    let mut q = g.clone();
    q.quantized = true;
    q.gate_bits = GATE_BITS;
    q
}

/// `mean_n[(β_l − 1)² + (β_u − 1)²]` for one gate.
pub fn warmup_loss(tape: &mut Tape, beta_l: Var, beta_u: Var) -> Result<Var> {
    let dl = tape.add_scalar(beta_l, -1.0);
    let du = tape.add_scalar(beta_u, -1.0);
    let sl = tape.square(dl);
    let su = tape.square(du);
    let s = tape.add(sl, su)?;
    Ok(tape.mean(s))
}
