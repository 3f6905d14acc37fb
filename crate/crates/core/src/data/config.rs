//! Run configuration: a flat `key = value` text format grouped by
//! `[section]` headers. `#` starts a comment. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::calibration::{CalibConfig, QuantScheme};
use crate::error::{Error, Result};
use crate::models::{ModelSize, Preset};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub size: ModelSize,
    pub scale: usize,
    pub bits: u32,

    pub scheme: QuantScheme,
    pub gate_head_std: f64,
    pub quantize_gates: bool,

    pub calib: CalibConfig,

    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Learning-rate multiplier for clipping bounds.
    pub bound_lr_scale: f64,
    pub lambda: f64,
    pub halve_every: usize,
    pub augment: bool,
    pub freeze_bounds: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,

    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub teacher: Option<PathBuf>,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (p, m) = Preset::Edsr.defaults();
        RunConfig {
            preset: Preset::Edsr,
            size: ModelSize::Toy,
            scale: 4,
            bits: 2,
            scheme: QuantScheme::Dual,
            gate_head_std: 0.1,
            quantize_gates: true,
            calib: CalibConfig { m, p, k: 5, batch: 16 },
            epochs: 60,
            batch: 16,
            patch: 48,
            steps_per_epoch: 100,
            lr: 1e-4,
            bound_lr_scale: 1.0,
            lambda: 1000.0,
            halve_every: 10,
            augment: true,
            freeze_bounds: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            teacher_epochs: 0,
            teacher_lr: 1e-4,
            train_dir: None,
            val_dir: None,
            out_dir: None,
            teacher: None,
            seed: 0,
        }
    }
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), detail: detail.into() }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Set one `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.preset" => self.preset = v.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "model.size" => self.size = v.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "model.scale" => self.scale = num(key, v)?,
            "model.bits" => self.bits = num(key, v)?,
            "quant.scheme" => {
                self.scheme = match v {
                    "dual" => QuantScheme::Dual,
                    "symmetric" => QuantScheme::Symmetric,
                    _ => return Err(bad(key, format!("expected dual or symmetric, got `{v}`"))),
                }
            }
            "quant.gate_head_std" => self.gate_head_std = num(key, v)?,
            "quant.quantize_gates" => self.quantize_gates = boolean(key, v)?,
            "calibration.m" => self.calib.m = num(key, v)?,
            "calibration.p" => self.calib.p = num(key, v)?,
            "calibration.k" => self.calib.k = num(key, v)?,
            "calibration.batch" => self.calib.batch = num(key, v)?,
            "train.epochs" => self.epochs = num(key, v)?,
            "train.batch" => self.batch = num(key, v)?,
            "train.patch" => self.patch = num(key, v)?,
            "train.steps_per_epoch" => self.steps_per_epoch = num(key, v)?,
            "train.lr" => self.lr = num(key, v)?,
            "train.bound_lr_scale" => self.bound_lr_scale = num(key, v)?,
            "train.lambda" => self.lambda = num(key, v)?,
            "train.halve_every" => self.halve_every = num(key, v)?,
            "train.augment" => self.augment = boolean(key, v)?,
            "train.freeze_bounds" => self.freeze_bounds = boolean(key, v)?,
            "train.adam_beta1" => self.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => self.adam_beta2 = num(key, v)?,
            "train.adam_eps" => self.adam_eps = num(key, v)?,
            "train.teacher_epochs" => self.teacher_epochs = num(key, v)?,
            "train.teacher_lr" => self.teacher_lr = num(key, v)?,
            "data.train_dir" => self.train_dir = path(v),
            "data.val_dir" => self.val_dir = path(v),
            "data.out_dir" => self.out_dir = path(v),
            "data.teacher" => self.teacher = path(v),
            "run.seed" => self.seed = num(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.preset", self.preset.name().to_string()),
            ("model.size", if self.size == ModelSize::Toy { "toy" } else { "full" }.to_string()),
            ("model.scale", self.scale.to_string()),
            ("model.bits", self.bits.to_string()),
            ("quant.scheme", if self.scheme == QuantScheme::Dual { "dual" } else { "symmetric" }.to_string()),
            ("quant.gate_head_std", self.gate_head_std.to_string()),
            ("quant.quantize_gates", self.quantize_gates.to_string()),
            ("calibration.m", self.calib.m.to_string()),
            ("calibration.p", self.calib.p.to_string()),
            ("calibration.k", self.calib.k.to_string()),
            ("calibration.batch", self.calib.batch.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.patch", self.patch.to_string()),
            ("train.steps_per_epoch", self.steps_per_epoch.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.bound_lr_scale", self.bound_lr_scale.to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.halve_every", self.halve_every.to_string()),
            ("train.augment", self.augment.to_string()),
            ("train.freeze_bounds", self.freeze_bounds.to_string()),
            ("train.adam_beta1", self.adam_beta1.to_string()),
            ("train.adam_beta2", self.adam_beta2.to_string()),
            ("train.adam_eps", self.adam_eps.to_string()),
            ("train.teacher_epochs", self.teacher_epochs.to_string()),
            ("train.teacher_lr", self.teacher_lr.to_string()),
            ("data.train_dir", show_path(&self.train_dir)),
            ("data.val_dir", show_path(&self.val_dir)),
            ("data.out_dir", show_path(&self.out_dir)),
            ("data.teacher", show_path(&self.teacher)),
            ("run.seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            return Err(bad("model.scale", format!("{} not in 2..=4", self.scale)));
        }
        if !(1..=32).contains(&self.bits) {
            return Err(bad("model.bits", format!("{} not in 1..=32", self.bits)));
        }
        if self.scheme == QuantScheme::Symmetric && self.bits < 2 {
            return Err(bad("model.bits", "symmetric quantizer needs at least 2 bits"));
        }
        self.calib.validate()?;
        for (key, v) in [
            ("train.epochs", self.epochs),
            ("train.batch", self.batch),
            ("train.patch", self.patch),
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.halve_every", self.halve_every),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if self.calib.k > self.epochs {
            return Err(bad("calibration.k", format!("{} exceeds train.epochs = {}", self.calib.k, self.epochs)));
        }
        for (key, v) in [
            ("train.lr", self.lr),
            ("train.lambda", self.lambda),
            ("train.adam_eps", self.adam_eps),
            ("train.teacher_lr", self.teacher_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(key, format!("{v} must be positive")));
            }
        }
        if !(self.bound_lr_scale >= 0.0) {
            return Err(bad("train.bound_lr_scale", "must be non-negative"));
        }
        if !(self.gate_head_std >= 0.0) {
            return Err(bad("quant.gate_head_std", "must be non-negative"));
        }
        for (key, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("{v} not in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen_pm = (false, false);
        let mut preset_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| bad(&format!("line {}", n + 1), "unterminated section header"))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(&format!("line {}", n + 1), "expected `key = value`"))?;
            let key = format!("{section}.{}", k.trim());
            cfg.set(&key, v.trim())?;
            match key.as_str() {
                "calibration.p" => seen_pm.0 = true,
                "calibration.m" => seen_pm.1 = true,
                "model.preset" => preset_set = true,
                _ => {}
            }
        }
        if preset_set {
            let (p, m) = cfg.preset.defaults();
            if !seen_pm.0 {
                cfg.calib.p = p;
            }
            if !seen_pm.1 {
                cfg.calib.m = m;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, v) in self.entries() {
            let (sec, k) = key.split_once('.').expect("qualified key");
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn load(p: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e.to_string()))?;
        Self::parse(&text)
    }
}
