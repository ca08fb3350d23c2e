//! Command implementations behind the `socnn` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;

use socnn::checkpoint::Checkpoint;
use socnn::config::{DataKind, Precision, RunConfig};
use socnn::data::{gen_synthetic, load_cifar10, Augment, FeatureSet, SynthSpec, CIFAR_CLASSES};
use socnn::gradcheck::{self, Fault, GradcheckOptions};
use socnn::models::{count_params, Model, ModelSpec};
use socnn::rng::SeedStream;
use socnn::scalar::Scalar;
use socnn::train::{
    evaluate, load_feature_dataset, load_matching_params, model_from_checkpoint, save_feature_dataset, two_phase_train,
    TrainConfig, TrainData, TwoPhase, BEST_CHECKPOINT,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const DATASET_FILE: &str = "dataset.ckpt";

#[derive(Parser, Debug)]
#[command(name = "socnn", version, about = "Second-order CNN toolkit")]
pub struct Cli {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, writing metrics.csv and checkpoints to the output directory.
    Train {
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Report top-1 and per-class accuracy of a checkpoint.
    Eval {
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        shuffle_labels: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        layers_only: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Per-layer parameter breakdown.
    CountParams { model: Option<String> },
    /// Generate a synthetic covariance dataset file.
    GenSynth {
        /// Defaults to dataset.ckpt in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Defaults, then the config file, then `--set`, then the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    match &cli.command {
        Command::Train { resume: true } => cfg.resume = true,
        Command::Eval { checkpoint, split, shuffle_labels } => {
            if let Some(c) = checkpoint {
                cfg.eval_checkpoint = Some(c.clone());
            }
            if let Some(s) = split {
                cfg.set("eval.split", s)?;
            }
            if *shuffle_labels {
                cfg.eval_shuffle_labels = true;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn synth_spec(cfg: &RunConfig) -> Result<SynthSpec> {
    let mut spec = SynthSpec::subspace(cfg.synth_classes, cfg.synth_dim, cfg.synth_sites, cfg.synth_gain, cfg.seed)?;
    spec.antithetic = cfg.synth_antithetic;
    Ok(spec)
}

fn synth_folds(cfg: &RunConfig) -> Result<(FeatureSet, FeatureSet, FeatureSet)> {
    let spec = synth_spec(cfg)?;
    Ok((
        gen_synthetic(&spec, cfg.synth_train, "train")?,
        gen_synthetic(&spec, cfg.synth_val, "val")?,
        gen_synthetic(&spec, cfg.synth_test, "test")?,
    ))
}

pub fn load_data(cfg: &RunConfig) -> Result<TrainData> {
    let path = || cfg.data_path.as_deref().context("data.path is required for this data.kind");
    Ok(match cfg.data_kind {
        DataKind::Synth => {
            let (train, val, test) = synth_folds(cfg)?;
            TrainData::from_features(train, val, test)?
        }
        DataKind::SynthFile => {
            let p = path()?;
            load_feature_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?
        }
        DataKind::Cifar => {
            let p = path()?;
            let (train, test) = load_cifar10(p).with_context(|| format!("loading CIFAR-10 from {}", p.display()))?;
            let augment = if cfg.data_augment { Augment::CIFAR } else { Augment::NONE };
            TrainData::from_images(
                train,
                test,
                cfg.data_val_size,
                cfg.data_train_limit,
                cfg.data_test_limit,
                augment,
                CIFAR_CLASSES,
            )?
        }
    })
}

pub fn model_spec(cfg: &RunConfig, data: &TrainData) -> Result<ModelSpec> {
    let (sites, dim) = data.train.feature_shape().unwrap_or((0, 0));
    Ok(cfg.model_spec(sites, dim, data.classes)?)
}

fn fmt_pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn train_as<T: Scalar>(cfg: &RunConfig, data: &TrainData, spec: ModelSpec, out: &mut dyn Write) -> Result<()> {
    let mut model: Model<T> = Model::new(spec.clone(), cfg.seed)?;
    if let Some(path) = &cfg.init_checkpoint {
        let ck = Checkpoint::load(path)?;
        let copied = load_matching_params(&mut model, &ck);
        writeln!(out, "initialized {copied} of {} parameter tensors from {}", model.params.len(), path.display())?;
    }
    let mut sgd = cfg.optim.clone();
    sgd.seed = cfg.seed;
    let mut tc = TrainConfig::new(sgd);
    tc.two_phase = cfg.two_phase.then_some(TwoPhase {
        phase1_epochs: cfg.phase1_epochs,
        phase1_lr: cfg.phase1_lr,
        phase2_lr: cfg.phase2_lr,
    });
    tc.threads = cfg.threads;
    tc.wall_clock = cfg.wall_clock;
    tc.out_dir = Some(cfg.out.clone());
    tc.resume = cfg.resume;
    let metrics = two_phase_train(&mut model, data, &tc)?;
    for m in &metrics {
        writeln!(
            out,
            "epoch {:>3}  train {:.4}  val {:.4}  val_acc {}  lr {:e}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            fmt_pct(m.val_acc),
            m.lr
        )?;
    }
    let best = Checkpoint::load(&cfg.out.join(BEST_CHECKPOINT))?;
    let best_model: Model<T> = model_from_checkpoint(&spec, &best)?;
    let report = evaluate(&best_model, &data.test, data.classes, cfg.threads)?;
    writeln!(out, "test accuracy (best checkpoint): {}", fmt_pct(report.accuracy))?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data)?;
    write_config(cfg)?;
    writeln!(out, "model {} ({} parameters), {} training samples", spec.name, count_params(&spec)?, data.train.len())?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, &data, spec, out),
        Precision::F64 => train_as::<f64>(cfg, &data, spec, out),
    }
}

fn eval_as<T: Scalar>(cfg: &RunConfig, data: &TrainData, spec: &ModelSpec, ck: &Checkpoint, out: &mut dyn Write) -> Result<()> {
    let model: Model<T> = model_from_checkpoint(spec, ck)?;
    let mut split = data.split(cfg.eval_split).clone();
    if cfg.eval_shuffle_labels {
        split.labels_mut().shuffle(&mut SeedStream::new(cfg.seed).rng("eval.shuffle"));
    }
    let report = evaluate(&model, &split, data.classes, cfg.threads)?;
    writeln!(out, "top-1 accuracy: {} ({} samples, loss {:.4})", fmt_pct(report.accuracy), split.len(), report.loss)?;
    for (c, &(correct, total)) in report.per_class.iter().enumerate() {
        let acc = if total == 0 { "n/a".to_string() } else { fmt_pct(correct as f64 / total as f64) };
        writeln!(out, "  class {c:>2}: {acc} ({correct}/{total})")?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data)?;
    let path = cfg.eval_checkpoint.clone().unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
    let ck = Checkpoint::load(&path)?;
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg, &data, &spec, &ck, out),
        Precision::F64 => eval_as::<f64>(cfg, &data, &spec, &ck, out),
    }
    .with_context(|| format!("evaluating {}", path.display()))
}

/// Returns whether every check passed.
pub fn cmd_gradcheck(seeds: u64, layers_only: bool, fault: Option<&str>, out: &mut dyn Write) -> Result<bool> {
    let opts = GradcheckOptions {
        seeds,
        models: !layers_only,
        fault: fault.map(str::parse::<Fault>).transpose()?,
        ..GradcheckOptions::default()
    };
    let reports = gradcheck::run(&opts)?;
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let ok = gradcheck::all_passed(&reports);
    writeln!(out, "{}", if ok { "all gradient checks passed" } else { "gradient check FAILED" })?;
    Ok(ok)
}

pub fn cmd_count_params(cfg: &RunConfig, model: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(m) = model {
        cfg.model = m.to_string();
    }
    let spec = cfg.model_spec(cfg.synth_sites, cfg.synth_dim, cfg.synth_classes)?;
    writeln!(out, "{}", spec.name)?;
    writeln!(out, "{:<24} {:<30} {:>10}", "layer", "shapes", "params")?;
    for l in spec.layers()? {
        let shapes = l.params.iter().map(|p| format!("{:?}", p.dims)).collect::<Vec<_>>().join(" ");
        writeln!(out, "{:<24} {:<30} {:>10}", l.layer, shapes, l.count())?;
    }
    writeln!(out, "total {}", count_params(&spec)?)?;
    Ok(())
}

pub fn cmd_gen_synth(cfg: &RunConfig, output: Option<&Path>, out: &mut dyn Write) -> Result<PathBuf> {
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(DATASET_FILE));
    let (train, val, test) = synth_folds(cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_feature_dataset(&path, &train, &val, &test)?;
    write_config(cfg)?;
    writeln!(
        out,
        "wrote {} ({} train, {} val, {} test; {} sites × {} features, {} classes)",
        path.display(),
        train.len(),
        val.len(),
        test.len(),
        train.sites,
        train.dim,
        cfg.synth_classes
    )?;
    Ok(path)
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    if let Command::Gradcheck { seeds, layers_only, inject_fault } = &cli.command {
        let ok = cmd_gradcheck(*seeds, *layers_only, inject_fault.as_deref(), out)?;
        return Ok(if ok { 0 } else { 1 });
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train { .. } => cmd_train(&cfg, out)?,
        Command::Eval { .. } => cmd_eval(&cfg, out)?,
        Command::CountParams { model } => cmd_count_params(&cfg, model.as_deref(), out)?,
        Command::GenSynth { output } => {
            cmd_gen_synth(&cfg, output.as_deref(), out)?;
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(0)
}
