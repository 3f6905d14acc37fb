#![allow(dead_code)]

pub mod oracles;

use ddtb::tensor::{Tape, Tensor, Var};
use ddtb::Result;
use rand::Rng;

/// Outcome of a central finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Set when some perturbation moved the function onto another smooth piece.
    pub crossed_kink: bool,
}

/// Relative error with a tiny absolute floor so exact zeros compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-10)
    }
}

/// Compare `backward` with central differences for every element of every
/// input in `check` (indices into `inputs`). `build` records the function on
/// a fresh tape given the input vars (all created as params).
pub fn grad_check(
    inputs: &[Tensor],
    check: &[usize],
    h: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> GradCheck {
    let eval = |ins: &[Tensor]| -> (f64, u64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars).unwrap();
        (tape.value(root).item(), tape.kink_signature())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    let mut out = GradCheck { max_rel_err: 0.0, crossed_kink: false };
    for &k in check {
        let analytic = grads.get_or_zeros(vars[k], &inputs[k]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != sm {
                out.crossed_kink = true;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic.data()[i], numeric));
        }
    }
    out
}

/// Values in `[lo, hi)` kept at least `margin` away from every point in `kinks`.
pub fn away_from<R: Rng>(rng: &mut R, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Direct nested-loop convolution, NCHW / OIHW.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

use ddtb::calibration::{calibrate, CalibConfig, QuantScheme};
use ddtb::gate::GatePart;
use ddtb::models::{build_edsr, Network, ParamKey};
use ddtb::training::{record_loss, teacher_features, LossSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Analytic vs central-difference gradients of the full training loss of a
/// 2-block, 2-bit EDSR with one quantized gate. Rounding is relaxed to the
/// identity so the loss is piecewise smooth; `None` means a perturbation
/// crossed a kink and the configuration should be skipped.
pub fn e2e_gradient_case(seed: u64) -> Option<Vec<(String, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = build_edsr(2, 4, 2, 2).unwrap();
    let teacher = Network::new(desc, &mut rng).unwrap();
    let mut net = teacher.clone();
    let x = Tensor::uniform(&[2, 3, 6, 6], 0.0, 255.0, &mut rng);
    let hr = Tensor::uniform(&[2, 3, 12, 12], 0.0, 255.0, &mut rng);
    let cfg = CalibConfig { p: 25.0, m: 99.0, k: 5, batch: 2 };
    let cal = calibrate(&mut net, &x, &cfg, QuantScheme::Dual, 0.5, &mut rng).unwrap();
    assert_eq!(cal.gated.len(), 1);
    for g in net.gates.values_mut() {
        g.quantized = true;
    }
    let tf = teacher_features(&teacher, &x).unwrap();
    // alternate between the warmup phase and the gated phase
    let epoch = if seed % 2 == 0 { cfg.k } else { cfg.k + 1 };
    let s = LossSettings { epoch, k: cfg.k, lambda: 1000.0, relaxed: true };
    let eval = |n: &Network| -> (f64, u64) {
        let mut tape = Tape::new();
        let r = record_loss(&mut tape, n, &x, &hr, &tf, s).unwrap();
        (tape.value(r.root).item(), tape.kink_signature())
    };
    let mut tape = Tape::new();
    let rec = record_loss(&mut tape, &net, &x, &hr, &tf, s).unwrap();
    let grads = tape.backward(rec.root).unwrap();
    let analytic: std::collections::BTreeMap<ParamKey, Tensor> = rec.trace.collect(&tape, &grads).into_iter().collect();

    let g = cal.gated[0];
    let sites = net.desc.quant_sites();
    let site = sites[rng.random_range(0..sites.len())];
    // a weight that actually influences the loss
    let live: Vec<usize> = analytic[&ParamKey::Weight(site)].data().iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
    let widx = if live.is_empty() { 0 } else { live[rng.random_range(0..live.len())] };
    let glen = net.gates[&g].conv2.weight.len();
    let picks = [
        ("conv weight", ParamKey::Weight(site), widx),
        ("alpha_u", ParamKey::AlphaUpper(g), 0),
        ("alpha_l", ParamKey::AlphaLower(g), 0),
        ("gate weight", ParamKey::Gate(g, GatePart::Conv2Weight), rng.random_range(0..glen)),
    ];
    let mut out = Vec::new();
    for (name, key, idx) in picks {
        let p0 = net.param_mut(key).unwrap()[idx];
        let h = 1e-4 * p0.abs().max(1e-2);
        net.param_mut(key).unwrap()[idx] = p0 + h;
        let (fp, sp) = eval(&net);
        net.param_mut(key).unwrap()[idx] = p0 - h;
        let (fm, sm) = eval(&net);
        net.param_mut(key).unwrap()[idx] = p0;
        if sp != sm {
            return None;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.get(&key).map_or(0.0, |t| t.data()[idx]);
        out.push((name.to_string(), a, numeric));
    }
    Some(out)
}

/// The bundled procedural corpus as (train, val) datasets.
pub fn toy_corpus(scale: usize) -> (ddtb::data::Dataset, ddtb::data::Dataset) {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    let load = |d: &str| -> Vec<ddtb::data::Image> { ddtb::data::load_dir(&root.join(d)).unwrap().into_iter().map(|(_, im)| im).collect() };
    (
        ddtb::data::Dataset::from_hr(&load("train"), scale).unwrap(),
        ddtb::data::Dataset::from_hr(&load("val"), scale).unwrap(),
    )
}
