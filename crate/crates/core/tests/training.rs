mod common;

use std::sync::OnceLock;

use common::oracles::skt_oracle;
use common::{e2e_gradient_case, rel_err, toy_corpus};
use ddtb::calibration::{CalibConfig, QuantScheme};
use ddtb::data::{load_checkpoint, Dataset, RunConfig};
use ddtb::models::{build_model, ModelSize, Network, ParamKey, Preset};
use ddtb::tensor::{Tape, Tensor};
use ddtb::training::*;
use ddtb::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn l1_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    s / a.len() as f64
}

fn l1_of(a: &Tensor, b: &Tensor) -> ddtb::Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = l1_loss(&mut tape, x, y)?;
    Ok(tape.value(l).item())
}

fn skt_of(a: &Tensor, b: &Tensor) -> ddtb::Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.param(a.clone()), tape.param(b.clone()));
    let l = skt_loss(&mut tape, x, y)?;
    Ok(tape.value(l).item())
}

#[test]
fn l1_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform(&[2, 3, 4, 4], 0.0, 255.0, &mut rng);
    assert_eq!(l1_of(&a, &a).unwrap(), 0.0);
    assert!((l1_of(&a.map(|v| v + 1.0), &a).unwrap() - 1.0).abs() < 1e-12);
    let b = Tensor::uniform(&[2, 3, 4, 4], 0.0, 255.0, &mut rng);
    assert!(rel_err(l1_of(&a, &b).unwrap(), l1_oracle(&a, &b)) < 1e-12);
    assert!(matches!(l1_of(&a, &Tensor::zeros(&[2, 3, 4, 5])), Err(Error::Dimension { .. })));
}

#[test]
fn skt_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::uniform(&[3, 5, 6, 4], -2.0, 2.0, &mut rng);
    assert!(skt_of(&t, &t).unwrap().abs() < 1e-12);
    assert!(skt_of(&t.map(|v| 3.5 * v), &t).unwrap().abs() < 1e-12);
    for _ in 0..10 {
        let s = Tensor::uniform(&[3, 4, 6, 4], -2.0, 2.0, &mut rng);
        assert!(rel_err(skt_of(&s, &t).unwrap(), skt_oracle(&s, &t)) <= 1e-6);
    }
    // zero maps stay finite thanks to the denominator offset
    assert!(skt_of(&Tensor::zeros(&[1, 2, 3, 3]), &t.map(|_| 0.0).reshape(vec![3, 5, 6, 4]).unwrap()).is_err());
    assert_eq!(skt_of(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 2, 3, 3])).unwrap(), 0.0);
    assert!(matches!(skt_of(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 2, 3, 4])), Err(Error::Dimension { .. })));
}

#[test]
fn teacher_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let s = tape.param(Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng));
    let t = tape.param(Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng));
    let l = skt_loss(&mut tape, s, t).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(s).is_some_and(|g| g.data().iter().any(|v| *v != 0.0)));
    assert!(g.get(t).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn total_loss_examples() {
    assert!((total_loss_value(0.5, 0.001, 0.0, 6, 5, 1000.0) - 1.5).abs() < 1e-12);
    assert_eq!(total_loss_value(0.7, 0.0, 0.0, 6, 5, 1000.0), 0.7);
    assert_eq!(total_loss_value(0.5, 0.0, 0.25, 3, 5, 1000.0), 0.75);
    assert_eq!(total_loss_value(0.5, 0.0, 0.25, 6, 5, 1000.0), 0.5);
    assert!(warmup_active(5, 5) && !warmup_active(6, 5) && !warmup_active(1, 0));

    let mut tape = Tape::new();
    let l1 = tape.constant(Tensor::scalar(0.5));
    let skt = tape.constant(Tensor::scalar(0.001));
    let w = tape.constant(Tensor::scalar(0.25));
    let a = total_loss(&mut tape, l1, skt, Some(w), 3, 5, 1000.0).unwrap();
    let b = total_loss(&mut tape, l1, skt, Some(w), 6, 5, 1000.0).unwrap();
    assert!((tape.value(a).item() - 1.75).abs() < 1e-12);
    assert!((tape.value(b).item() - 1.5).abs() < 1e-12);
}

#[test]
fn lr_halves_every_ten_epochs() {
    let lr0 = 1e-4;
    for e in 0..10 {
        assert_eq!(lr_at(lr0, e, 10), lr0);
    }
    assert_eq!(lr_at(lr0, 10, 10), lr0 / 2.0);
    assert_eq!(lr_at(lr0, 19, 10), lr0 / 2.0);
    assert_eq!(lr_at(lr0, 20, 10), lr0 / 4.0);
    assert_eq!(lr_at(lr0, 59, 10), lr0 / 32.0);
}

/// Adam by hand for one scalar.
fn adam_oracle(grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (0.0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let t = (t + 1) as i32;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    p
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::default();
    let mut p = [0.0];
    let mut st = AdamSlot::default();
    adam_step(&mut p, &[1.0], &mut st, 0.01, &cfg);
    assert!((p[0] + 0.01).abs() < 1e-9);

    let mut z = [0.3, -0.2];
    adam_step(&mut z, &[0.0, 0.0], &mut AdamSlot::default(), 0.01, &cfg);
    assert_eq!(z, [0.3, -0.2]);

    let gs = [0.5, -1.0, 2.0, 0.1, 0.0, -0.3];
    let run = || {
        let mut p = [0.0];
        let mut st = AdamSlot::default();
        for g in gs {
            adam_step(&mut p, &[g], &mut st, 1e-3, &cfg);
        }
        p[0]
    };
    assert!(rel_err(run(), adam_oracle(&gs, 1e-3)) < 1e-12);
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn bounds_stay_ordered_under_adversarial_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let desc = build_model(Preset::Edsr, 2, ModelSize::Toy, 2).unwrap();
    let mut net = Network::new(desc, &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 3, 6, 6], 0.0, 255.0, &mut rng);
    ddtb::calibration::calibrate(&mut net, &x, &CalibConfig::default(), QuantScheme::Dual, 0.1, &mut rng).unwrap();
    let sites = net.desc.quant_sites();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..100 {
        // push the lower bound up and the upper bound down as hard as possible
        let g: Vec<(ParamKey, Tensor)> = sites
            .iter()
            .flat_map(|&i| [(ParamKey::AlphaLower(i), Tensor::scalar(-1e3)), (ParamKey::AlphaUpper(i), Tensor::scalar(1e3))])
            .collect();
        adam.step(&mut net, &g, 0.5, 0.5, &|_| false);
        for q in net.act_quant.values() {
            if let ddtb::models::SiteQuantizer::Dual(q) = q {
                assert!(q.alpha_l < q.alpha_u);
            }
        }
    }
}

#[test]
fn frozen_bounds_do_not_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let desc = build_model(Preset::Edsr, 2, ModelSize::Toy, 2).unwrap();
    let mut net = Network::new(desc, &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 3, 6, 6], 0.0, 255.0, &mut rng);
    ddtb::calibration::calibrate(&mut net, &x, &CalibConfig::default(), QuantScheme::Dual, 0.1, &mut rng).unwrap();
    let before = net.act_quant.clone();
    let i = net.desc.quant_sites()[0];
    let g = vec![(ParamKey::AlphaUpper(i), Tensor::scalar(1.0)), (ParamKey::Weight(i), Tensor::full(net.convs[&i].weight.shape(), 1.0))];
    let w0 = net.convs[&i].weight.clone();
    Adam::new(AdamConfig::default()).step(&mut net, &g, 0.1, 0.1, &|k| k.is_bound());
    assert_eq!(net.act_quant, before);
    assert_ne!(net.convs[&i].weight, w0);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut smooth = 0;
    let mut seed = 0;
    while smooth < 20 {
        assert!(seed < 200, "too few smooth configurations");
        if let Some(rows) = e2e_gradient_case(seed) {
            for (name, a, n) in rows {
                assert!(rel_err(a, n) <= 1e-3, "seed {seed} {name}: analytic {a} numeric {n}");
            }
            smooth += 1;
        }
        seed += 1;
    }
}

fn toy_teacher() -> &'static (Network, Dataset, Dataset) {
    static T: OnceLock<(Network, Dataset, Dataset)> = OnceLock::new();
    T.get_or_init(|| {
        let (train, val) = toy_corpus(2);
        let mut desc = build_model(Preset::Edsr, 2, ModelSize::Toy, 2).unwrap();
        desc.rgb_mean = train.rgb_mean();
        let mut net = Network::new(desc, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let cfg = PretrainConfig {
            epochs: 10,
            steps_per_epoch: 6,
            batch: 8,
            patch: 12,
            lr: 1e-3,
            halve_every: 10,
            augment: true,
            adam: AdamConfig::default(),
            seed: 7,
        };
        let losses = pretrain(&mut net, &train, &cfg).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        (net, train, val)
    })
}

fn toy_cfg(epochs: usize, seed: u64) -> TrainConfig {
    let rc = RunConfig { scale: 2, epochs, batch: 8, patch: 12, steps_per_epoch: 6, lr: 1e-3, seed, ..RunConfig::default() };
    TrainConfig::from_run(&rc)
}

#[derive(Default)]
struct Log {
    steps: Vec<StepInfo>,
}

impl TrainObserver for Log {
    fn on_step(&mut self, info: &StepInfo) {
        self.steps.push(info.clone());
    }
}

#[test]
fn loss_decreases_over_first_epochs() {
    let (teacher, train_set, _) = toy_teacher();
    let mut good = 0;
    for seed in 0..5 {
        let mut student = teacher.clone();
        // enough patches per epoch that the epoch mean is not dominated by sampling noise
        let cfg = TrainConfig { batch: 16, steps_per_epoch: 12, ..toy_cfg(5, seed) };
        let r = train(&mut student, teacher, train_set, None, &cfg, &mut NoObserver).unwrap();
        let t: Vec<f64> = r.epochs.iter().map(|m| m.total).collect();
        if t.windows(2).all(|w| w[1] < w[0]) {
            good += 1;
        }
    }
    assert!(good >= 4, "{good} of 5 seeds decreased monotonically");
}

#[test]
fn warmup_boundary_is_respected() {
    let (teacher, train_set, val) = toy_teacher();
    let mut cfg = toy_cfg(3, 1);
    cfg.calib.k = 2;
    cfg.steps_per_epoch = 2;
    let mut student = teacher.clone();
    let mut log = Log::default();
    let dir = tempfile::tempdir().unwrap();
    cfg.metrics_csv = Some(dir.path().join("m.csv"));
    let r = train(&mut student, teacher, train_set, Some(val), &cfg, &mut log).unwrap();
    assert!(!r.calibration.gated.is_empty());
    for s in &log.steps {
        assert_eq!(s.beta_applied, s.epoch > 2, "epoch {}", s.epoch);
        assert_eq!(s.warmup_in_total, s.epoch <= 2);
        assert!(s.warmup.is_some());
    }
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(r.epochs.iter().all(|m| m.val_psnr.is_finite()));
}

#[test]
fn degenerate_config_is_plain_distillation() {
    let (teacher, train_set, _) = toy_teacher();
    let mut desc = build_model(Preset::Edsr, 2, ModelSize::Toy, 32).unwrap();
    desc.rgb_mean = teacher.desc.rgb_mean;
    let mut fp_teacher = Network::new(desc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    fp_teacher.convs = teacher.convs.clone();
    let mut student = fp_teacher.clone();
    let mut cfg = toy_cfg(2, 3);
    cfg.calib.k = 0;
    cfg.calib.p = 0.0;
    cfg.freeze_bounds = true;
    let mut log = Log::default();
    let r = train(&mut student, &fp_teacher, train_set, None, &cfg, &mut log).unwrap();
    assert!(r.calibration.gated.is_empty() && student.gates.is_empty() && student.act_quant.is_empty());
    assert!(log.steps.iter().all(|s| !s.beta_applied && s.warmup.is_none()));
    // skt starts at zero: the student is the teacher
    assert!(log.steps[0].skt.abs() < 1e-12);
    let x = train_set.pairs[0].lr.to_tensor();
    assert_eq!(student.infer(&x, true).unwrap(), student.infer(&x, false).unwrap());
}

#[test]
fn nan_loss_aborts_with_snapshot() {
    let (teacher, train_set, _) = toy_teacher();
    let mut student = teacher.clone();
    let tail = student.desc.layers.iter().position(|l| l.name == "tail").unwrap();
    student.convs.get_mut(&tail).unwrap().weight.data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_cfg(1, 0);
    cfg.snapshot_dir = Some(dir.path().to_path_buf());
    let e = train(&mut student, teacher, train_set, None, &cfg, &mut NoObserver).unwrap_err();
    assert!(matches!(e, Error::Diverged { epoch: 1, step: 0, .. }), "{e}");
    let (_, notes) = load_checkpoint(&dir.path().join("diverged.ckpt")).unwrap();
    assert!(notes.contains_key("diverged"));
}

#[test]
fn training_is_deterministic() {
    let (teacher, train_set, _) = toy_teacher();
    let run = || {
        let mut s = teacher.clone();
        train(&mut s, teacher, train_set, None, &toy_cfg(1, 9), &mut NoObserver).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.convs, b.convs);
    assert_eq!(a.act_quant, b.act_quant);
}
