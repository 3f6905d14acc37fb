use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{l1_loss, lr_at, skt_loss, total_loss, warmup_active};
use super::optim::{Adam, AdamConfig};
use crate::calibration::{calibrate, CalibConfig, Calibration, QuantScheme};
use crate::data::{save_checkpoint, Dataset, RunConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gate::warmup_loss;
use crate::models::{ForwardOptions, ForwardTrace, Network, ParamKey};
use crate::tensor::{Tape, Tensor, Var};

/// Settings for quantization-aware training of a calibrated student.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub bound_lr_scale: f64,
    pub lambda: f64,
    pub halve_every: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    pub freeze_bounds: bool,
    pub scheme: QuantScheme,
    pub calib: CalibConfig,
    pub gate_head_std: f64,
    pub quantize_gates: bool,
    pub seed: u64,
    /// Where the per-epoch CSV goes, if anywhere.
    pub metrics_csv: Option<PathBuf>,
    /// Directory for a checkpoint written when the loss stops being finite.
    pub snapshot_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn from_run(rc: &RunConfig) -> Self {
        TrainConfig {
            epochs: rc.epochs,
            batch: rc.batch,
            patch: rc.patch,
            steps_per_epoch: rc.steps_per_epoch,
            lr: rc.lr,
            bound_lr_scale: rc.bound_lr_scale,
            lambda: rc.lambda,
            halve_every: rc.halve_every,
            adam: AdamConfig { beta1: rc.adam_beta1, beta2: rc.adam_beta2, eps: rc.adam_eps },
            augment: rc.augment,
            freeze_bounds: rc.freeze_bounds,
            scheme: rc.scheme,
            calib: rc.calib,
            gate_head_std: rc.gate_head_std,
            quantize_gates: rc.quantize_gates,
            seed: rc.seed,
            metrics_csv: rc.out_dir.as_ref().map(|d| d.join("metrics.csv")),
            snapshot_dir: rc.out_dir.clone(),
        }
    }
}

/// Settings for full-precision teacher training.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub halve_every: usize,
    pub augment: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn from_run(rc: &RunConfig) -> Self {
        PretrainConfig {
            epochs: rc.teacher_epochs,
            steps_per_epoch: rc.steps_per_epoch,
            batch: rc.batch,
            patch: rc.patch,
            lr: rc.teacher_lr,
            halve_every: rc.halve_every,
            augment: rc.augment,
            adam: AdamConfig { beta1: rc.adam_beta1, beta2: rc.adam_beta2, eps: rc.adam_eps },
            seed: rc.seed,
        }
    }
}

/// Per-epoch means over the training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l1: f64,
    pub skt: f64,
    pub total: f64,
    pub lr: f64,
    /// NaN when there is no validation set.
    pub val_psnr: f64,
}

pub const CSV_HEADER: &str = "epoch,l1,skt,total,lr,val_psnr";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.8},{:.6},{:.3e},{:.4}", self.epoch, self.l1, self.skt, self.total, self.lr, self.val_psnr)
    }
}

/// What happened in one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub skt: f64,
    /// Warmup term value, recorded whenever gates exist.
    pub warmup: Option<f64>,
    pub total: f64,
    /// Whether the warmup term was part of the optimised loss.
    pub warmup_in_total: bool,
    /// Whether gate factors scaled the clipping bounds.
    pub beta_applied: bool,
    /// Mean of `|β − 1|` over gates, samples and both bounds.
    pub mean_beta_dev: Option<f64>,
}

/// Hooks into [`train`]. Every method defaults to doing nothing.
pub trait TrainObserver {
    fn on_calibrated(&mut self, _net: &Network, _cal: &Calibration, _calib_batch: &Tensor) {}
    fn on_step(&mut self, _info: &StepInfo) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _net: &Network) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub calibration: Calibration,
    pub calib_batch: Tensor,
    pub epochs: Vec<EpochMetrics>,
}

/// Loss weights and phase for one recorded step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub epoch: usize,
    pub k: usize,
    pub lambda: f64,
    /// Replace rounding by identity everywhere (for finite differences).
    pub relaxed: bool,
}

pub struct LossRecord {
    pub root: Var,
    pub l1: Var,
    pub skt: Var,
    pub warmup: Option<Var>,
    pub trace: ForwardTrace,
}

/// Feature map of the full-precision teacher at its tap.
pub fn teacher_features(teacher: &Network, lr: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(lr.clone());
    let tr = teacher.forward(&mut tape, x, ForwardOptions::fp())?;
    Ok(tape.value(tr.tap).clone())
}

/// Record the full training objective of `student` on one batch.
pub fn record_loss(tape: &mut Tape, student: &Network, lr: &Tensor, hr: &Tensor, teacher_tap: &Tensor, s: LossSettings) -> Result<LossRecord> {
    let warm = warmup_active(s.epoch, s.k);
    let x = tape.constant(lr.clone());
    let opts = ForwardOptions { quantized: true, relaxed: s.relaxed, apply_gates: !warm, training: true, trainable: true };
    let trace = student.forward(tape, x, opts)?;
    let y = tape.constant(hr.clone());
    let l1 = l1_loss(tape, trace.output, y)?;
    let t = tape.constant(teacher_tap.clone());
    let skt = skt_loss(tape, trace.tap, t)?;
    let warmup = if trace.gates.is_empty() {
        None
    } else {
        let mut acc: Option<Var> = None;
        for g in &trace.gates {
            let w = warmup_loss(tape, g.record.beta_l, g.record.beta_u)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
        acc.map(|a| tape.mul_scalar(a, 1.0 / trace.gates.len() as f64))
    };
    let root = total_loss(tape, l1, skt, warmup, s.epoch, s.k, s.lambda)?;
    Ok(LossRecord { root, l1, skt, warmup, trace })
}

/// Gate outputs `(layer, β_l, β_u)` on `batch` in inference mode.
pub fn gate_betas(net: &Network, batch: &Tensor) -> Result<Vec<(usize, Tensor, Tensor)>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let opts = ForwardOptions { apply_gates: false, ..ForwardOptions::quantized_eval() };
    let tr = net.forward(&mut tape, x, opts)?;
    Ok(tr
        .gates
        .iter()
        .map(|g| (g.layer, tape.value(g.record.beta_l).clone(), tape.value(g.record.beta_u).clone()))
        .collect())
}

fn mean_beta_dev(tape: &Tape, trace: &ForwardTrace) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for g in &trace.gates {
        for v in [g.record.beta_l, g.record.beta_u] {
            for b in tape.value(v).data() {
                sum += (b - 1.0).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn divergence(student: &Network, dir: &Option<PathBuf>, epoch: usize, step: usize, detail: String) -> Error {
    if let Some(d) = dir {
        let mut notes = BTreeMap::new();
        notes.insert("diverged".to_string(), format!("epoch {epoch} step {step}: {detail}"));
        let p = d.join("diverged.ckpt");
        match std::fs::create_dir_all(d).map_err(|e| Error::io(d, e.to_string())).and_then(|_| save_checkpoint(student, &notes, &p)) {
            Ok(()) => warn!("diagnostic snapshot written to {}", p.display()),
            Err(e) => warn!("could not write diagnostic snapshot: {e}"),
        }
    }
    Error::Diverged { epoch, step, detail }
}

/// Calibrate `student`, then train it against the frozen `teacher`.
///
/// Epochs are numbered from 1. Through epoch `cfg.calib.k` the gate
/// warmup term is added and the gate factors are not applied; afterwards
/// the gates scale the clipping bounds and the warmup term is dropped.
pub fn train(
    student: &mut Network,
    teacher: &Network,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    if cfg.batch == 0 || cfg.patch == 0 || cfg.steps_per_epoch == 0 {
        return Err(Error::param("batch/patch/steps_per_epoch", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (calib_batch, _) = data.batch(cfg.calib.batch, cfg.patch, false, &mut rng)?;
    let calibration = calibrate(student, &calib_batch, &cfg.calib, cfg.scheme, cfg.gate_head_std, &mut rng)?;
    for g in student.gates.values_mut() {
        g.quantized = cfg.quantize_gates;
    }
    info!("calibrated {} sites, {} gated", calibration.stats.len(), calibration.gated.len());
    obs.on_calibrated(student, &calibration, &calib_batch);

    let mut adam = Adam::new(cfg.adam);
    let frozen = |k: ParamKey| cfg.freeze_bounds && k.is_bound();
    let mut csv = format!("{CSV_HEADER}\n");
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg.lr, epoch, cfg.halve_every);
        let settings = LossSettings { epoch, k: cfg.calib.k, lambda: cfg.lambda, relaxed: false };
        let (mut l1_sum, mut skt_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_epoch {
            let (x, y) = data.batch(cfg.batch, cfg.patch, cfg.augment, &mut rng)?;
            let tf = teacher_features(teacher, &x)?;
            let mut tape = Tape::new();
            let rec = record_loss(&mut tape, student, &x, &y, &tf, settings)?;
            let l1 = tape.value(rec.l1).item();
            let skt = tape.value(rec.skt).item();
            let warmup = rec.warmup.map(|w| tape.value(w).item());
            let total = tape.value(rec.root).item();
            if !total.is_finite() {
                let detail = format!("loss not finite (l1={l1}, skt={skt}, warmup={warmup:?})");
                return Err(divergence(student, &cfg.snapshot_dir, epoch, step, detail));
            }
            let grads = tape.backward(rec.root)?;
            let pg = rec.trace.collect(&tape, &grads);
            if let Some((k, _)) = pg.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
                return Err(divergence(student, &cfg.snapshot_dir, epoch, step, format!("gradient of {k:?} not finite")));
            }
            adam.step(student, &pg, lr, lr * cfg.bound_lr_scale, &frozen);
            student.observe(&rec.trace);
            obs.on_step(&StepInfo {
                epoch,
                step,
                lr,
                l1,
                skt,
                warmup,
                total,
                warmup_in_total: warmup.is_some() && warmup_active(epoch, cfg.calib.k),
                beta_applied: rec.trace.beta_applied,
                mean_beta_dev: mean_beta_dev(&tape, &rec.trace),
            });
            l1_sum += l1;
            skt_sum += skt;
            tot_sum += total;
        }
        let n = cfg.steps_per_epoch as f64;
        let val_psnr = match val {
            Some(v) if !v.pairs.is_empty() => evaluate(student, v, true)?.psnr,
            _ => f64::NAN,
        };
        let m = EpochMetrics { epoch, l1: l1_sum / n, skt: skt_sum / n, total: tot_sum / n, lr, val_psnr };
        info!("epoch {epoch}: l1 {:.4} skt {:.6} total {:.4} val {:.3} dB", m.l1, m.skt, m.total, m.val_psnr);
        let _ = writeln!(csv, "{}", m.csv_row());
        if let Some(p) = &cfg.metrics_csv {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e.to_string()))?;
            }
            std::fs::write(p, &csv).map_err(|e| Error::io(p, e.to_string()))?;
        }
        obs.on_epoch(&m, student);
        epochs.push(m);
    }
    Ok(TrainReport { calibration, calib_batch, epochs })
}

/// Train a full-precision network with L1 only. Returns the mean loss of
/// each epoch.
pub fn pretrain(net: &mut Network, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea_c4e5);
    let mut adam = Adam::new(cfg.adam);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg.lr, epoch, cfg.halve_every);
        let mut sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let (x, y) = data.batch(cfg.batch, cfg.patch, cfg.augment, &mut rng)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let opts = ForwardOptions { training: true, trainable: true, ..ForwardOptions::fp() };
            let tr = net.forward(&mut tape, xv, opts)?;
            let yv = tape.constant(y);
            let loss = l1_loss(&mut tape, tr.output, yv)?;
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, step, detail: format!("teacher loss {l}") });
            }
            let grads = tape.backward(loss)?;
            let pg = tr.collect(&tape, &grads);
            adam.step(net, &pg, lr, lr, &|_| false);
            net.observe(&tr);
            sum += l;
        }
        let m = sum / cfg.steps_per_epoch.max(1) as f64;
        info!("teacher epoch {epoch}: l1 {m:.4}");
        out.push(m);
    }
    Ok(out)
}
