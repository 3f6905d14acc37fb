//! Uniform fake quantizers.
//!
//! * [`SymmetricQuantizer`]: one clipping bound `α`, range `[-α, α]`,
//!   scale `2α / (2^(b-1) - 1)`. Used as the comparison baseline.
//! * [`ActQuantizer`]: independent trainable lower and upper bounds with an
//!   integer zero point. Optionally rescaled per sample by a gate.
//! * [`WeightQuantizer`]: the same dual-bound grid with bounds fixed to the
//!   1st / 99th percentile of the full-precision weights.
//!
//! Rounding is half away from zero throughout. The backward rule treats
//! rounding as the identity and routes each element's upstream gradient to
//! exactly one of: the input (strictly inside the bounds), the upper bound
//! (at or above it) or the lower bound (at or below it).

use serde::{Deserialize, Serialize};

use crate::calibration::percentile;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Minimum gap kept between `alpha_l` and `alpha_u` after every update.
pub const BOUND_EPS: f64 = 1e-4;

pub(crate) mod kernels {
    /// Where an element's upstream gradient goes.
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
    pub enum Route {
        Input,
        Upper,
        Lower,
    }

    pub(crate) fn levels(bits: u32) -> u64 {
        (1u64 << bits) - 1
    }

    /// Dual-bound grid for one set of (possibly gate-scaled) bounds.
    #[derive(Clone, Copy, Debug)]
    pub struct AsymGrid {
        pub lo: f64,
        pub hi: f64,
        pub scale: f64,
        pub zero_point: i64,
        pub k_lo: i64,
        pub k_hi: i64,
    }

    impl AsymGrid {
        pub fn new(lo: f64, hi: f64, bits: u32) -> Self {
            let hi = if hi > lo { hi } else { lo + 1e-12_f64.max(lo.abs() * 1e-12) };
            let n = levels(bits);
            let scale = (hi - lo) / n as f64;
            let zero_point = (-lo / scale).round() as i64;
            let k_lo = (lo / scale).round() as i64;
            // round(lo/s) + round(hi/s) can overshoot by one when both sit on a tie
            let k_hi = ((hi / scale).round() as i64).min(k_lo + n as i64);
            AsymGrid { lo, hi, scale, zero_point, k_lo, k_hi }
        }

        pub fn clip(&self, v: f64) -> f64 {
            v.max(self.lo).min(self.hi)
        }

        /// Signed level index `k` with `dequant = k·s`.
        pub fn level(&self, v: f64) -> i64 {
            ((self.clip(v) / self.scale).round() as i64).clamp(self.k_lo, self.k_hi)
        }

        /// Stored integer `q = k + Z`.
        pub fn code(&self, v: f64) -> i64 {
            self.level(v) + self.zero_point
        }

        pub fn dequant(&self, v: f64) -> f64 {
            self.level(v) as f64 * self.scale
        }

        pub fn region(&self, v: f64) -> Route {
            if v >= self.hi {
                Route::Upper
            } else if v <= self.lo {
                Route::Lower
            } else {
                Route::Input
            }
        }

        pub fn route(&self, v: f64, bounds_trainable: bool) -> Route {
            if bounds_trainable {
                self.region(v)
            } else if v > self.hi {
                Route::Upper
            } else if v < self.lo {
                Route::Lower
            } else {
                Route::Input
            }
        }
    }

    /// Single-bound symmetric grid.
    #[derive(Clone, Copy, Debug)]
    pub struct SymGrid {
        pub alpha: f64,
        pub scale: f64,
    }

    impl SymGrid {
        pub fn new(alpha: f64, bits: u32) -> Self {
            let alpha = alpha.max(1e-12);
            let steps = ((1u64 << (bits - 1)) - 1).max(1) as f64;
            SymGrid { alpha, scale: 2.0 * alpha / steps }
        }

        pub fn clip(&self, v: f64) -> f64 {
            v.max(-self.alpha).min(self.alpha)
        }

        pub fn level(&self, v: f64) -> i64 {
            (self.clip(v) / self.scale).round() as i64
        }

        pub fn dequant(&self, v: f64) -> f64 {
            self.level(v) as f64 * self.scale
        }

        pub fn region(&self, v: f64) -> Route {
            if v >= self.alpha {
                Route::Upper
            } else if v <= -self.alpha {
                Route::Lower
            } else {
                Route::Input
            }
        }

        pub fn route(&self, v: f64) -> Route {
            self.region(v)
        }
    }
}

pub use kernels::Route;
use kernels::{AsymGrid, SymGrid};

fn check_bits(bits: u32, min: u32) -> Result<()> {
    if bits < min || bits > 32 {
        return Err(Error::param("bits", format!("{bits} outside [{min}, 32]")));
    }
    Ok(())
}

/// Baseline single-bound quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricQuantizer {
    pub alpha: f64,
    pub bits: u32,
}

impl SymmetricQuantizer {
    pub fn new(alpha: f64, bits: u32) -> Result<Self> {
        check_bits(bits, 2)?;
        if !(alpha > 0.0) {
            return Err(Error::param("alpha", format!("must be > 0, got {alpha}")));
        }
        Ok(SymmetricQuantizer { alpha, bits })
    }

    pub fn scale(&self) -> f64 {
        SymGrid::new(self.alpha, self.bits).scale
    }

    /// Signed level index of each value.
    pub fn levels_of(&self, values: &[f64]) -> Vec<i64> {
        let g = SymGrid::new(self.alpha, self.bits);
        values.iter().map(|&v| g.level(v)).collect()
    }

    pub fn quantize(&self, x: &Tensor) -> Tensor {
        let g = SymGrid::new(self.alpha, self.bits);
        x.map(|v| g.dequant(v))
    }
}

/// `round(clip(x, -α, α) / s) · s` with `s = 2α / (2^(b-1) - 1)`.
pub fn symmetric_quantize(x: &Tensor, alpha: f64, bits: u32) -> Result<Tensor> {
    Ok(SymmetricQuantizer::new(alpha, bits)?.quantize(x))
}

/// Trainable dual-bound activation quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub alpha_l: f64,
    pub alpha_u: f64,
    pub bits: u32,
}

impl ActQuantizer {
    pub fn new(alpha_l: f64, alpha_u: f64, bits: u32) -> Result<Self> {
        check_bits(bits, 1)?;
        if !(alpha_l < alpha_u) {
            return Err(Error::param("alpha_l", format!("{alpha_l} must be < alpha_u = {alpha_u}")));
        }
        Ok(ActQuantizer { alpha_l, alpha_u, bits })
    }

    pub fn scale(&self) -> f64 {
        (self.alpha_u - self.alpha_l) / kernels::levels(self.bits) as f64
    }

    pub fn zero_point(&self) -> i64 {
        (-self.alpha_l / self.scale()).round() as i64
    }

    /// Integer codes and de-quantized values.
    pub fn quantize(&self, x: &Tensor) -> (Vec<i64>, Tensor) {
        let g = AsymGrid::new(self.alpha_l, self.alpha_u, self.bits);
        let q = x.data().iter().map(|&v| g.code(v)).collect();
        (q, x.map(|v| g.dequant(v)))
    }

    /// Keep `alpha_u - alpha_l >= eps` by moving the upper bound.
    pub fn enforce_order(&mut self, eps: f64) {
        if self.alpha_u - self.alpha_l < eps {
            self.alpha_u = self.alpha_l + eps;
        }
    }
}

/// Dual-bound quantization of `x`: returns `(q, dequant)` where
/// `q = round(clip(x)/s) + Z` and `dequant = (q - Z)·s`.
pub fn ddtb_quantize(x: &Tensor, alpha_l: f64, alpha_u: f64, bits: u32) -> Result<(Vec<i64>, Tensor)> {
    Ok(ActQuantizer::new(alpha_l, alpha_u, bits)?.quantize(x))
}

/// Gradient route of every element of `a` for bounds `(lower, upper)`.
pub fn gradient_routes(a: &Tensor, lower: f64, upper: f64) -> Vec<Route> {
    let g = AsymGrid::new(lower, upper, 8);
    a.data().iter().map(|&v| g.region(v)).collect()
}

/// Scalar gradients `(d_upper, d_lower)` collected from `upstream` by the
/// straight-through clip masks.
pub fn bound_gradients(a: &Tensor, lower: f64, upper: f64, upstream: &Tensor) -> (f64, f64) {
    let mut d_hi = 0.0;
    let mut d_lo = 0.0;
    for (r, g) in gradient_routes(a, lower, upper).into_iter().zip(upstream.data()) {
        match r {
            Route::Upper => d_hi += g,
            Route::Lower => d_lo += g,
            Route::Input => {}
        }
    }
    (d_hi, d_lo)
}

/// Chain rule through gate scaling `α' = β·α`: returns
/// `(d_beta_u, d_beta_l, d_alpha_u, d_alpha_l)` from the effective-bound
/// gradients.
pub fn gated_bound_gradients(
    d_upper_eff: f64,
    d_lower_eff: f64,
    q: &ActQuantizer,
    beta_u: f64,
    beta_l: f64,
) -> (f64, f64, f64, f64) {
    (q.alpha_u * d_upper_eff, q.alpha_l * d_lower_eff, beta_u * d_upper_eff, beta_l * d_lower_eff)
}

/// Record dual-bound fake quantization on a tape with trainable bounds.
pub fn act_fake_quant(tape: &mut Tape, x: Var, lower: Var, upper: Var, bits: u32, relaxed: bool) -> Result<Var> {
    tape.fake_quant_asym(x, lower, upper, bits, relaxed, true)
}

/// Percentile-bounded weight quantizer. Bounds are fixed after calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantizer {
    pub bounds: Option<(f64, f64)>,
    pub bits: u32,
}

impl WeightQuantizer {
    pub fn uncalibrated(bits: u32) -> Self {
        WeightQuantizer { bounds: None, bits }
    }

    /// Bounds at the 1st and 99th percentile of `w`.
    pub fn calibrate(w: &Tensor, bits: u32) -> Result<Self> {
        check_bits(bits, 1)?;
        if w.is_empty() {
            return Err(Error::param("weights", "empty tensor"));
        }
        let lo = percentile(w.data(), 1.0)?;
        let hi = percentile(w.data(), 99.0)?;
        Ok(WeightQuantizer { bounds: Some((lo, hi)), bits })
    }

    /// Bounds at the extremes of `w` (used inside the gate).
    pub fn min_max(w: &Tensor, bits: u32) -> Self {
        WeightQuantizer { bounds: Some((w.min(), w.max())), bits }
    }

    fn checked_bounds(&self) -> Result<(f64, f64)> {
        self.bounds.ok_or_else(|| Error::State("weight quantizer used before calibration".into()))
    }

    /// True when the bounds collapse and the layer is passed through.
    pub fn is_degenerate(&self) -> bool {
        matches!(self.bounds, Some((lo, hi)) if !(hi > lo))
    }

    pub fn quantize(&self, w: &Tensor) -> Result<Tensor> {
        let (lo, hi) = self.checked_bounds()?;
        if self.is_degenerate() {
            log::warn!("degenerate weight bounds ({lo}, {hi}); layer left unquantized");
            return Ok(w.clone());
        }
        let g = AsymGrid::new(lo, hi, self.bits);
        Ok(w.map(|v| g.dequant(v)))
    }

    /// Record weight fake quantization on a tape. Gradient passes to the
    /// weight inside `[w_l, w_u]` and stops outside.
    pub fn apply(&self, tape: &mut Tape, w: Var, relaxed: bool) -> Result<Var> {
        let (lo, hi) = self.checked_bounds()?;
        if self.is_degenerate() {
            log::warn!("degenerate weight bounds ({lo}, {hi}); layer left unquantized");
            return Ok(w);
        }
        let l = tape.constant(Tensor::scalar(lo));
        let h = tape.constant(Tensor::scalar(hi));
        tape.fake_quant_asym(w, l, h, self.bits, relaxed, false)
    }
}

/// De-quantized weights for a calibrated quantizer.
pub fn quantize_weights(w: &Tensor, q: &WeightQuantizer) -> Result<Tensor> {
    q.quantize(w)
}
