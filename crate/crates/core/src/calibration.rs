//! Bound initialisation from a full-precision pass, dynamic intensity and
//! gate placement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateController;
use crate::models::{ForwardOptions, LayerKind, Network, SiteQuantizer};
use crate::quant::{ActQuantizer, SymmetricQuantizer, WeightQuantizer};
use crate::tensor::{Tape, Tensor};

/// Percentile with linear interpolation between closest ranks: position
/// `p/100 · (n − 1)` in the sorted sample.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::param("sample", "empty"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::param("percentile", format!("{p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    Ok(if i + 1 < v.len() { v[i] + f * (v[i + 1] - v[i]) } else { v[i] })
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    // shifting by the first value keeps constant samples at exactly zero
    let n = values.len() as f64;
    let c = values[0];
    let m = values.iter().map(|v| v - c).sum::<f64>() / n;
    values.iter().map(|v| (v - c - m) * (v - c - m)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub name: String,
    pub sample_max: Vec<f64>,
    pub sample_min: Vec<f64>,
    /// Every activation value of the batch.
    pub pooled: Vec<f64>,
    pub v_max: f64,
    pub v_min: f64,
    /// Dynamic intensity `v_max + v_min`.
    pub di: f64,
}

impl LayerStats {
    pub fn from_samples(layer: usize, name: &str, sample_max: Vec<f64>, sample_min: Vec<f64>, pooled: Vec<f64>) -> Self {
        let v_max = variance(&sample_max);
        let v_min = variance(&sample_min);
        LayerStats { layer, name: name.to_string(), sample_max, sample_min, pooled, v_max, v_min, di: v_max + v_min }
    }

    /// Statistics of an activation batch (leading axis = sample).
    pub fn from_activation(layer: usize, name: &str, act: &Tensor) -> Result<Self> {
        let n = *act.shape().first().ok_or_else(|| Error::param("activation", "no batch axis"))?;
        if n == 0 || act.is_empty() {
            return Err(Error::param("activation", "empty batch"));
        }
        let mut mx = Vec::with_capacity(n);
        let mut mn = Vec::with_capacity(n);
        for b in 0..n {
            let s = act.sample(b);
            mx.push(s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            mn.push(s.iter().copied().fold(f64::INFINITY, f64::min));
        }
        Ok(Self::from_samples(layer, name, mx, mn, act.data().to_vec()))
    }

    pub fn min(&self) -> f64 {
        self.sample_min.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.sample_max.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Upper percentile M; the lower bound uses 100 − M.
    pub m: f64,
    /// Gate ratio P in percent.
    pub p: f64,
    /// Warmup epochs.
    pub k: usize,
    /// Patches in the calibration batch.
    pub batch: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig { m: 99.0, p: 30.0, k: 5, batch: 16 }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 50.0 && self.m <= 100.0) {
            return Err(Error::Config { key: "calibration.m".into(), detail: format!("{} not in (50, 100]", self.m) });
        }
        if !(0.0..=100.0).contains(&self.p) {
            return Err(Error::Config { key: "calibration.p".into(), detail: format!("{} not in [0, 100]", self.p) });
        }
        if self.batch == 0 {
            return Err(Error::Config { key: "calibration.batch".into(), detail: "must be positive".into() });
        }
        Ok(())
    }
}

/// One full-precision pass over `calib`, recording statistics at the input
/// of every quantized convolution.
pub fn collect_statistics(net: &Network, calib: &Tensor) -> Result<BTreeMap<usize, LayerStats>> {
    if calib.is_empty() || calib.shape().first() == Some(&0) {
        return Err(Error::param("calibration batch", "empty"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(calib.clone());
    let trace = net.forward(&mut tape, x, ForwardOptions::fp())?;
    let mut out = BTreeMap::new();
    for (layer, v) in trace.site_inputs {
        let name = &net.desc.layers[layer].name;
        out.insert(layer, LayerStats::from_activation(layer, name, tape.value(v))?);
    }
    Ok(out)
}

/// `(percentile(100 − M), percentile(M))` of the pooled sample. Collapsed
/// ranges are widened by `±1e-3` with a warning.
pub fn init_bounds(stats: &LayerStats, m: f64) -> Result<(f64, f64)> {
    let hi = percentile(&stats.pooled, m)?;
    let lo = percentile(&stats.pooled, 100.0 - m)?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        log::warn!("layer {} ({}): degenerate activation range at {lo}; widening", stats.layer, stats.name);
        Ok((lo - 1e-3, hi + 1e-3))
    }
}

/// The `ceil(P/100 · L)` layers with the largest dynamic intensity, ties
/// going to the shallower layer. Returned in layer order.
pub fn select_gated_layers(di: &[(usize, f64)], p: f64) -> Vec<usize> {
    let l = di.len();
    let count = (((p * l as f64) / 100.0) - 1e-9).ceil().clamp(0.0, l as f64) as usize;
    let mut ranked: Vec<(usize, f64)> = di.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = ranked.into_iter().take(count).map(|(i, _)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// `(layer, DI)` pairs in layer order.
pub fn intensities(stats: &BTreeMap<usize, LayerStats>) -> Vec<(usize, f64)> {
    stats.values().map(|s| (s.layer, s.di)).collect()
}

/// Line-oriented report: `layer name min max v_max v_min di`.
pub fn report(stats: &BTreeMap<usize, LayerStats>, gated: &[usize]) -> String {
    let mut s = String::from("layer\tname\tmin\tmax\tv_max\tv_min\tdi\tgated\n");
    for st in stats.values() {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            st.layer,
            st.name,
            st.min(),
            st.max(),
            st.v_max,
            st.v_min,
            st.di,
            gated.contains(&st.layer) as u8
        );
    }
    s
}

/// Which activation quantizer to install.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantScheme {
    /// Dual trainable bounds plus dynamic gates.
    Dual,
    /// One symmetric trainable bound, no gates.
    Symmetric,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub stats: BTreeMap<usize, LayerStats>,
    pub gated: Vec<usize>,
}

/// Initialise every quantizer of `net` from one full-precision pass and
/// attach gates to the selected layers. Weights are left untouched.
pub fn calibrate<R: Rng + ?Sized>(
    net: &mut Network,
    calib: &Tensor,
    cfg: &CalibConfig,
    scheme: QuantScheme,
    gate_head_std: f64,
    rng: &mut R,
) -> Result<Calibration> {
    cfg.validate()?;
    net.clear_quantization();
    let stats = collect_statistics(net, calib)?;
    for (&i, st) in &stats {
        let layer = &net.desc.layers[i];
        let (lo, hi) = init_bounds(st, cfg.m)?;
        let q = match scheme {
            QuantScheme::Dual => SiteQuantizer::Dual(ActQuantizer::new(lo, hi, layer.act_bits)?),
            QuantScheme::Symmetric => SiteQuantizer::Symmetric(SymmetricQuantizer::new(lo.abs().max(hi.abs()).max(1e-3), layer.act_bits.max(2))?),
        };
        net.act_quant.insert(i, q);
        let wq = WeightQuantizer::calibrate(&net.convs[&i].weight, layer.weight_bits)?;
        net.weight_quant.insert(i, wq);
    }
    let gated = match scheme {
        QuantScheme::Dual => select_gated_layers(&intensities(&stats), cfg.p),
        QuantScheme::Symmetric => Vec::new(),
    };
    for &i in &gated {
        let ch = match net.desc.layers[i].kind {
            LayerKind::Conv { in_ch, .. } => in_ch,
            _ => unreachable!("quantized sites are convolutions"),
        };
        net.gates.insert(i, GateController::new(ch, gate_head_std, rng));
    }
    Ok(Calibration { stats, gated })
}
