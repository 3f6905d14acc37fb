mod common;

use common::{naive_conv, rel_err};
use ddtb::calibration::{calibrate, intensities, select_gated_layers, CalibConfig, QuantScheme};
use ddtb::models::*;
use ddtb::quant::{ActQuantizer, WeightQuantizer};
use ddtb::tensor::{Tape, Tensor};
use ddtb::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_named(net: &Network, name: &str, x: &Tensor) -> Tensor {
    let i = net.desc.layers.iter().position(|l| l.name == name).unwrap();
    let c = &net.convs[&i];
    naive_conv(x, &c.weight, c.bias.as_ref(), c.stride, c.pad)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()).unwrap()
}

fn shift(x: &Tensor, m: [f64; 3], sign: f64) -> Tensor {
    let (_, c, h, w) = x.dims4().unwrap();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += sign * m[(i / (h * w)) % c];
    }
    y
}

fn shuffle(x: &Tensor, r: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let oc = c / (r * r);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..oc {
            for y in 0..h * r {
                for xx in 0..w * r {
                    let src = ch * r * r + (y % r) * r + xx % r;
                    out[((b * oc + ch) * h * r + y) * w * r + xx] = x.data()[((b * c + src) * h + y / r) * w + xx / r];
                }
            }
        }
    }
    Tensor::new(vec![n, oc, h * r, w * r], out).unwrap()
}

/// Toy EDSR written out layer by layer.
fn edsr_oracle(net: &Network, x: &Tensor, blocks: usize) -> Tensor {
    let m = net.desc.rgb_mean;
    let head = conv_named(net, "head", &shift(x, m, -1.0));
    let mut f = head.clone();
    for i in 0..blocks {
        let a = conv_named(net, &format!("body{i}.conv1"), &f).map(|v| v.max(0.0));
        let b = conv_named(net, &format!("body{i}.conv2"), &a);
        f = zip(&f, &b, |p, q| p + q);
    }
    let body = zip(&head, &conv_named(net, "body_end", &f), |p, q| p + q);
    let up = shuffle(&conv_named(net, "up0.conv", &body), 2);
    let up = shuffle(&conv_named(net, "up1.conv", &up), 2);
    shift(&conv_named(net, "tail", &up), m, 1.0)
}

fn toy(bits: u32, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut desc = build_model(Preset::Edsr, 4, ModelSize::Toy, bits).unwrap();
    desc.rgb_mean = [110.0, 100.0, 90.0];
    Network::new(desc, &mut rng).unwrap()
}

#[test]
fn fp_forward_matches_straight_line_oracle() {
    let net = toy(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[2, 3, 6, 5], 0.0, 255.0, &mut rng);
    let got = net.infer(&x, false).unwrap();
    let want = edsr_oracle(&net, &x, 4);
    assert_eq!(got.shape(), want.shape());
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!(rel_err(*a, *b) < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn toy_shape_contract() {
    let net = toy(2, 3);
    let out = net.infer(&Tensor::zeros(&[1, 3, 24, 24]), false).unwrap();
    assert_eq!(out.shape(), &[1, 3, 96, 96]);
    let shapes = net.desc.infer_shapes(24, 24).unwrap();
    assert_eq!(shapes[net.desc.output()], (3, 96, 96));
}

#[test]
fn unknown_preset_is_parameter_error() {
    assert!(matches!("vdsr".parse::<Preset>(), Err(Error::Parameter { .. })));
    assert!(matches!(build_model(Preset::Edsr, 5, ModelSize::Toy, 2), Err(Error::Parameter { .. })));
}

#[test]
fn uncalibrated_quantized_forward_is_state_error() {
    let net = toy(2, 4);
    assert!(matches!(net.infer(&Tensor::zeros(&[1, 3, 4, 4]), true), Err(Error::State(_))));
}

#[test]
fn only_high_level_layers_are_quantized() {
    for preset in [Preset::Edsr, Preset::Rdn, Preset::SrResNet] {
        let d = build_model(preset, 4, ModelSize::Toy, 2).unwrap();
        for l in &d.layers {
            if l.tag != ModuleTag::HighLevel {
                assert_eq!((l.weight_bits, l.act_bits), (32, 32), "{}", l.name);
            }
        }
        assert!(!d.quant_sites().is_empty());
    }
    let mut net = toy(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::uniform(&[4, 3, 8, 8], 0.0, 255.0, &mut rng);
    calibrate(&mut net, &x, &CalibConfig::default(), QuantScheme::Dual, 0.1, &mut rng).unwrap();
    for i in net.act_quant.keys().chain(net.weight_quant.keys()).chain(net.gates.keys()) {
        assert_eq!(net.desc.layers[*i].tag, ModuleTag::HighLevel);
    }
}

#[test]
fn gates_follow_selection() {
    let mut net = toy(2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform(&[6, 3, 8, 8], 0.0, 255.0, &mut rng);
    for p in [0.0, 30.0, 50.0, 100.0] {
        let cfg = CalibConfig { p, ..CalibConfig::default() };
        let cal = calibrate(&mut net, &x, &cfg, QuantScheme::Dual, 0.1, &mut rng).unwrap();
        let want = select_gated_layers(&intensities(&cal.stats), p);
        assert_eq!(net.gates.keys().copied().collect::<Vec<_>>(), want);
    }
}

#[test]
fn high_precision_limit() {
    let mut net = toy(2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::uniform(&[2, 3, 8, 8], 0.0, 255.0, &mut rng);
    let cal = calibrate(&mut net, &x, &CalibConfig { p: 0.0, ..CalibConfig::default() }, QuantScheme::Dual, 0.1, &mut rng).unwrap();
    for (i, st) in &cal.stats {
        let a = st.max().abs().max(st.min().abs());
        net.act_quant.insert(*i, SiteQuantizer::Dual(ActQuantizer::new(-a, a, 32).unwrap()));
        net.weight_quant.insert(*i, WeightQuantizer::min_max(&net.convs[i].weight, 32));
    }
    let fp = net.infer(&x, false).unwrap();
    let q = net.infer(&x, true).unwrap();
    for (a, b) in q.data().iter().zip(fp.data()) {
        assert!(rel_err(*a, *b) <= 1e-3 || (a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn two_bit_sites_see_four_levels() {
    let mut net = toy(2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::uniform(&[3, 3, 8, 8], 0.0, 255.0, &mut rng);
    calibrate(&mut net, &x, &CalibConfig::default(), QuantScheme::Dual, 0.5, &mut rng).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let tr = net.forward(&mut tape, xv, ForwardOptions::quantized_eval()).unwrap();
    assert_eq!(tr.site_quantized.len(), 8);
    for (_, v) in &tr.site_quantized {
        let t = tape.value(*v);
        // gates rescale bounds per sample, so count per sample
        for n in 0..t.shape()[0] {
            let mut u: Vec<u64> = t.sample(n).iter().map(|v| v.to_bits()).collect();
            u.sort_unstable();
            u.dedup();
            assert!(u.len() <= 4, "{} levels", u.len());
        }
    }
}

#[test]
fn residual_block_is_exact_in_fp() {
    let net = Network::new(build_edsr(1, 4, 2, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::uniform(&[1, 3, 5, 5], 0.0, 255.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tr = net.forward(&mut tape, xv, ForwardOptions::fp()).unwrap();
    let head = conv_named(&net, "head", &shift(&x, net.desc.rgb_mean, -1.0));
    let inner = conv_named(&net, "body0.conv2", &conv_named(&net, "body0.conv1", &head).map(|v| v.max(0.0)));
    let want = zip(&head, &inner, |a, b| a + b);
    for (a, b) in tape.value(tr.tap).data().iter().zip(want.data()) {
        assert!(rel_err(*a, *b) < 1e-12);
    }
}
