//! Command-line front end: calibrate, train, eval, analyze, quantfit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ddtb::calibration::{calibrate, collect_statistics, report};
use ddtb::data::{load_checkpoint, load_dir, save_checkpoint, Dataset, RunConfig};
use ddtb::eval::{complexity, evaluate, psnr_y, ssim_y, wasted_levels, LevelQuantizer};
use ddtb::models::{build_model, ModelSize, Network};
use ddtb::quant::{ActQuantizer, SymmetricQuantizer};
use ddtb::training::{pretrain, train, NoObserver, PretrainConfig, TrainConfig};
use ddtb::{Error, Result};

#[derive(Parser)]
#[command(name = "ddtb", version, about = "Quantization-aware training for super-resolution networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Initialise quantizers from one batch and report layer statistics.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Full-precision weights to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the activations of one layer (whitespace separated) here.
        #[arg(long)]
        dump_acts: Option<PathBuf>,
        /// Layer index for `--dump-acts`; defaults to the first quantized site.
        #[arg(long)]
        dump_layer: Option<usize>,
    },
    /// Pretrain or load a teacher, then run quantization-aware training.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// PSNR/SSIM on the Y channel.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth directory.
        #[arg(long)]
        hr: PathBuf,
        /// Directory of super-resolved images named like those in `--hr`.
        #[arg(long, conflicts_with = "checkpoint")]
        sr: Option<PathBuf>,
        /// Model to run on LR images synthesised from (or provided with) `--hr`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run the checkpoint in full precision even if it is quantized.
        #[arg(long)]
        fp: bool,
    },
    /// Parameter and bit-operation counts of a preset. No weights needed.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Output resolution as WxH.
        #[arg(long, default_value = "1920x1080")]
        out_size: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        per_layer: bool,
    },
    /// Wasted-level diagnostic on an activation dump.
    Quantfit {
        #[command(flatten)]
        common: Common,
        /// File of whitespace-separated activation values.
        input: PathBuf,
    },
}

/// `--config` plus flags that override individual keys.
#[derive(Args, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// toy or full.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    /// dual or symmetric.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Quantize gate weights and activations (true/false).
    #[arg(long)]
    quantize_gates: Option<String>,
    #[arg(long)]
    train_dir: Option<String>,
    #[arg(long)]
    val_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: Option<String>,
    /// Any other key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    /// Config file (relative paths resolved against its directory), then
    /// flag overrides. `base` seeds the values when no file is given.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let mut c = RunConfig::load(p)?;
                let dir = p.parent().unwrap_or(Path::new(""));
                for d in [&mut c.train_dir, &mut c.val_dir, &mut c.out_dir, &mut c.teacher] {
                    if let Some(x) = d.as_mut().filter(|x| x.is_relative()) {
                        *x = dir.join(&*x);
                    }
                }
                c
            }
            None => base,
        };
        let flags = [
            (&self.preset, "model.preset"),
            (&self.size, "model.size"),
            (&self.scale, "model.scale"),
            (&self.bits, "model.bits"),
            (&self.scheme, "quant.scheme"),
            (&self.quantize_gates, "quant.quantize_gates"),
            (&self.epochs, "train.epochs"),
            (&self.batch, "train.batch"),
            (&self.patch, "train.patch"),
            (&self.steps, "train.steps_per_epoch"),
            (&self.lr, "train.lr"),
            (&self.seed, "run.seed"),
            (&self.train_dir, "data.train_dir"),
            (&self.val_dir, "data.val_dir"),
            (&self.out_dir, "data.out_dir"),
            (&self.teacher, "data.teacher"),
        ];
        let preset_flag = self.preset.is_some();
        for (v, key) in flags {
            if let Some(v) = v {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config { key: kv.clone(), detail: "expected KEY=VALUE".into() })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if preset_flag && !self.set.iter().any(|kv| kv.starts_with("calibration.p") || kv.starts_with("calibration.m")) {
            let (p, m) = cfg.preset.defaults();
            cfg.calib.p = p;
            cfg.calib.m = m;
        }
        if cfg.calib.k > cfg.epochs && self.epochs.is_some() {
            // a short run from the command line keeps the whole budget in warmup
            cfg.calib.k = cfg.epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config { key: key.to_string(), detail: "required for this command".into() })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&d).map_err(|e| Error::Io { path: d.clone(), detail: e.to_string() })?;
    Ok(d)
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::Io { path: d.to_path_buf(), detail: e.to_string() })?;
    }
    fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), detail: e.to_string() })
}

/// A fresh network for `cfg` with the dataset's RGB mean.
fn fresh_network(cfg: &RunConfig, data: &Dataset) -> Result<Network> {
    let mut desc = build_model(cfg.preset, cfg.scale, cfg.size, cfg.bits)?;
    desc.rgb_mean = data.rgb_mean();
    Network::new(desc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn load_or_fresh(ckpt: Option<&PathBuf>, cfg: &RunConfig, data: &Dataset) -> Result<Network> {
    match ckpt {
        Some(p) => {
            let (mut net, _) = load_checkpoint(p)?;
            net.clear_quantization();
            Ok(net)
        }
        None => fresh_network(cfg, data),
    }
}

fn cmd_calibrate(cfg: &RunConfig, ckpt: Option<&PathBuf>, dump: Option<&PathBuf>, dump_layer: Option<usize>) -> Result<()> {
    let data = Dataset::load(need(&cfg.train_dir, "data.train_dir")?, cfg.scale)?;
    let ckpt = ckpt.or(cfg.teacher.as_ref());
    if ckpt.is_none() {
        warn!("no checkpoint given; calibrating randomly initialised weights");
    }
    let mut net = load_or_fresh(ckpt, cfg, &data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (batch, _) = data.batch(cfg.calib.batch, cfg.patch, false, &mut rng)?;
    if let Some(p) = dump {
        let stats = collect_statistics(&net, &batch)?;
        let layer = dump_layer.or_else(|| stats.keys().next().copied());
        let st = layer
            .and_then(|l| stats.get(&l))
            .ok_or_else(|| Error::Config { key: "dump_layer".into(), detail: format!("{layer:?} is not a quantized site") })?;
        let mut s = String::with_capacity(st.pooled.len() * 12);
        for v in &st.pooled {
            let _ = writeln!(s, "{v}");
        }
        write(p, &s)?;
        info!("wrote {} activations of layer {} to {}", st.pooled.len(), st.name, p.display());
    }
    let cal = calibrate(&mut net, &batch, &cfg.calib, cfg.scheme, cfg.gate_head_std, &mut rng)?;
    for g in net.gates.values_mut() {
        g.quantized = cfg.quantize_gates;
    }
    let text = report(&cal.stats, &cal.gated);
    print!("{text}");
    let dir = out_dir(cfg)?;
    write(&dir.join("calibration.tsv"), &text)?;
    let notes = BTreeMap::from([("stage".to_string(), "calibrated".to_string())]);
    save_checkpoint(&net, &notes, &dir.join("calibrated.ckpt"))?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::load(need(&cfg.train_dir, "data.train_dir")?, cfg.scale)?;
    let val = cfg.val_dir.as_ref().map(|d| Dataset::load(d, cfg.scale)).transpose()?;
    let dir = out_dir(cfg)?;
    let teacher = match &cfg.teacher {
        Some(p) => load_or_fresh(Some(p), cfg, &data)?,
        None => {
            let mut t = fresh_network(cfg, &data)?;
            if cfg.teacher_epochs == 0 {
                warn!("train.teacher_epochs = 0 and no teacher checkpoint; distilling from random weights");
            } else {
                let losses = pretrain(&mut t, &data, &PretrainConfig::from_run(cfg))?;
                info!("teacher pretrained, final L1 {:.4}", losses.last().copied().unwrap_or(f64::NAN));
            }
            save_checkpoint(&t, &BTreeMap::from([("stage".into(), "teacher".into())]), &dir.join("teacher.ckpt"))?;
            t
        }
    };
    let mut student = teacher.clone();
    let tc = TrainConfig { metrics_csv: Some(dir.join("metrics.csv")), snapshot_dir: Some(dir.clone()), ..TrainConfig::from_run(cfg) };
    let rep = train(&mut student, &teacher, &data, val.as_ref(), &tc, &mut NoObserver)?;
    let last = rep.epochs.last();
    let mut notes = BTreeMap::from([("stage".to_string(), "trained".to_string()), ("epochs".to_string(), cfg.epochs.to_string())]);
    if let Some(m) = last {
        notes.insert("val_psnr".into(), m.val_psnr.to_string());
    }
    save_checkpoint(&student, &notes, &dir.join("student.ckpt"))?;
    write(&dir.join("config.cfg"), &cfg.serialize())?;
    if let Some(m) = last {
        println!("epoch={} l1={:.6} skt={:.6} val_psnr={:.4}", m.epoch, m.l1, m.skt, m.val_psnr);
    }
    println!("checkpoint={}", dir.join("student.ckpt").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, hr: &Path, sr: Option<&PathBuf>, ckpt: Option<&PathBuf>, fp: bool) -> Result<()> {
    let mut out = String::from("image,psnr,ssim\n");
    let (mut ps, mut ss) = (Vec::new(), Vec::new());
    match (sr, ckpt) {
        (Some(sr), _) => {
            let srs: BTreeMap<String, _> = load_dir(sr)?.into_iter().collect();
            for (name, h) in load_dir(hr)? {
                let s = srs.get(&name).ok_or_else(|| Error::Io { path: sr.join(&name), detail: "missing SR image".into() })?;
                let (p, q) = (psnr_y(s, &h, cfg.scale)?, ssim_y(s, &h, cfg.scale)?);
                let _ = writeln!(out, "{name},{p:.4},{q:.6}");
                ps.push(p);
                ss.push(q);
            }
        }
        (None, Some(c)) => {
            let (net, _) = load_checkpoint(c)?;
            let data = Dataset::load(hr, net.desc.scale)?;
            let quantized = !fp && !net.act_quant.is_empty();
            let sum = evaluate(&net, &data, quantized)?;
            for im in &sum.images {
                let _ = writeln!(out, "{},{:.4},{:.6}", im.index, im.psnr, im.ssim);
                ps.push(im.psnr);
                ss.push(im.ssim);
            }
        }
        (None, None) => return Err(Error::Config { key: "eval".into(), detail: "pass --sr DIR or --checkpoint FILE".into() }),
    }
    if ps.is_empty() {
        return Err(Error::Io { path: hr.to_path_buf(), detail: "no .ppm images".into() });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let _ = writeln!(out, "mean,{:.4},{:.6}", mean(&ps), mean(&ss));
    print!("{out}");
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config { key: "out_size".into(), detail: format!("expected WxH, got `{s}`") };
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn cmd_analyze(cfg: &RunConfig, out_size: &str, json: bool, per_layer: bool) -> Result<()> {
    let (w, h) = parse_size(out_size)?;
    let desc = build_model(cfg.preset, cfg.scale, cfg.size, cfg.bits)?;
    let r = complexity(&desc, h, w, None)?;
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.to_table(per_layer));
    }
    Ok(())
}

fn cmd_quantfit(cfg: &RunConfig, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::Io { path: input.to_path_buf(), detail: e.to_string() })?;
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Io { path: input.to_path_buf(), detail: format!("not a number: `{t}`") }))
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Err(Error::Io { path: input.to_path_buf(), detail: "no values".into() });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let alpha = lo.abs().max(hi.abs());
    let sym = SymmetricQuantizer::new(alpha, cfg.bits.max(2))?;
    let dual = ActQuantizer::new(lo, hi, cfg.bits)?;
    println!("values={} min={lo} max={hi} bits={}", values.len(), cfg.bits);
    println!("symmetric_wasted={:.6}", wasted_levels(&values, LevelQuantizer::Symmetric(&sym)));
    println!("dual_wasted={:.6}", wasted_levels(&values, LevelQuantizer::Dual(&dual)));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Calibrate { common, checkpoint, dump_acts, dump_layer } => {
            cmd_calibrate(&common.resolve(RunConfig::default())?, checkpoint.as_ref(), dump_acts.as_ref(), dump_layer)
        }
        Cmd::Train { common } => cmd_train(&common.resolve(RunConfig::default())?),
        Cmd::Eval { common, hr, sr, checkpoint, fp } => cmd_eval(&common.resolve(RunConfig::default())?, &hr, sr.as_ref(), checkpoint.as_ref(), fp),
        Cmd::Analyze { common, out_size, json, per_layer } => {
            // cost tables refer to the full-size networks unless told otherwise
            let base = RunConfig { size: ModelSize::Full, ..RunConfig::default() };
            cmd_analyze(&common.resolve(base)?, &out_size, json, per_layer)
        }
        Cmd::Quantfit { common, input } => cmd_quantfit(&common.resolve(RunConfig::default())?, &input),
    }
}

/// One line, `key=value` fields, values quoted.
fn error_line(e: &Error) -> String {
    match e {
        Error::Config { key, detail } => format!("error kind=config key={key:?} msg={detail:?}"),
        Error::Io { path, detail } => format!("error kind=io path={:?} msg={detail:?}", path.display().to_string()),
        Error::Diverged { epoch, step, detail } => format!("error kind=diverged epoch={epoch} step={step} msg={detail:?}"),
        other => format!("error kind={} msg={:?}", other.kind(), other.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}
