//! `vcr`: train, evaluate, verify, count and export concept-reasoning
//! networks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use vcr_core::checkpoint::{Checkpoint, CheckpointError};
use vcr_core::config::{self, Config};
use vcr_core::cost::sig6;
use vcr_core::gradcheck::GRAD_TOLERANCE;
use vcr_core::network::{Model, NetworkSpec, PRESETS};
use vcr_core::nn::{BufferStore, ParamStore};
use vcr_core::{ablation, export, gradsuite, train, Error, Result, TensorError};

/// Directory searched for `--config` names that do not exist as given.
const CONFIG_DIR_VAR: &str = "VCR_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "vcr", version, about = "Visual concept reasoning networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file, layered over the defaults of its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `schedule.peak_lr=0.1`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, with EMA weights when it has them.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Use the raw weights even when EMA weights are stored.
        #[arg(long)]
        raw: bool,
    },
    /// Finite-difference check of every op, concept-module variant and block.
    GradCheck {
        /// First seed.
        #[arg(long)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Parameter and compute report.
    Count {
        /// Named preset; without it the configured model is counted.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write attention maps and concept states of one block.
    ExportAttn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block index in forward order.
        #[arg(long)]
        block: usize,
        /// Number of images, taken from the start of the split.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a class activation map as CSV and PGM.
    ExportCam {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class; defaults to the image's label.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sampler × reasoner × modulator grid and write a CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn key_help() -> String {
    let mut s = String::from("Configuration keys (defaults of the mini-vcr preset):\n");
    for (k, v) in config::keys_with_defaults() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!("\nPresets: {}\n", PRESETS.join(", ")));
    s.push_str(&format!("{CONFIG_DIR_VAR} names a directory searched for --config files.\n"));
    s.push_str("Exit codes: 0 ok, 2 usage, 3 config, 4 numeric failure, 5 I/O.\n");
    s
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) => 4,
        Error::Tensor(_) => 3,
        Error::Io { .. } | Error::Data(_) => 5,
        Error::Checkpoint(c) => match c {
            CheckpointError::ShapeMismatch { .. } | CheckpointError::Missing(_) | CheckpointError::Unexpected(_) => 3,
            _ => 5,
        },
    }
}

fn resolve(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CONFIG_DIR_VAR) {
        Some(dir) if Path::new(&dir).join(path).exists() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn load(cfg: &ConfigArgs) -> Result<Config> {
    let path = cfg.config.as_deref().map(resolve);
    Config::load(path.as_deref(), &cfg.overrides)
}

fn data(cfg: &Config, split: Split) -> Result<vcr_core::data::Dataset> {
    cfg.data.load(matches!(split, Split::Train))
}

/// Model from the configuration with checkpoint weights; EMA weights are
/// substituted unless `raw`.
fn restore(cfg: &Config, path: &Path, raw: bool, dataset: &vcr_core::data::Dataset) -> Result<(Model, ParamStore, BufferStore, bool)> {
    let ck = Checkpoint::load(path)?;
    let mut model = Model::new(&cfg.model.network()?, ck.seed)?;
    ck.restore(&mut model.params, &mut model.buffers)?;
    if !ck.normalization.mean.is_empty() && ck.normalization != dataset.normalization {
        return Err(Error::Config(format!(
            "{} was trained with input normalization {:?}, the configured data uses {:?}",
            path.display(),
            ck.normalization,
            dataset.normalization
        )));
    }
    let mut params = model.params.clone();
    let mut used_ema = false;
    if !raw {
        if let Some(shadow) = ck.ema(&model.params)? {
            for (p, s) in params.iter_mut().zip(shadow) {
                p.value = s;
            }
            used_ema = true;
        }
    }
    let buffers = model.buffers.clone();
    Ok((model, params, buffers, used_ema))
}

fn run_train(cfg: &ConfigArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let cfg = load(cfg)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir());
    let train_data = data(&cfg, Split::Train)?;
    let test_data = data(&cfg, Split::Test)?;
    let mut model = Model::new(&cfg.model.network()?, seed)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let resolved = dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::Io { path: resolved, source: e })?;
    println!(
        "training {} for {} steps, seed {seed}, {} images",
        cfg.model.preset,
        cfg.steps,
        train_data.len()
    );
    let run = train::train(&mut model, &train_data, &cfg.plan(seed), Some(&dir))?;
    let every = (cfg.steps / 10).max(1);
    for r in run.log.iter().filter(|r| r.step % every == 0 || r.step == cfg.steps) {
        println!(
            "step {:>6}  lr {}  loss {}  top1 {}",
            r.step,
            sig6(r.lr as f64),
            sig6(r.loss as f64),
            sig6(r.top1 as f64)
        );
    }
    let (params, buffers) = run.eval_stores(&model);
    let weights = if run.ema.is_some() { "ema" } else { "raw" };
    for (name, d) in [("train", &train_data), ("test", &test_data)] {
        let e = train::evaluate(&model, &params, &buffers, d, cfg.train.batch_size)?;
        println!(
            "{name} ({weights} weights)  loss {}  top1 {}  images {}",
            sig6(e.loss as f64),
            sig6(e.top1 as f64),
            e.count
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_eval(cfg: &ConfigArgs, checkpoint: &Path, split: Split, raw: bool) -> Result<()> {
    let cfg = load(cfg)?;
    let d = data(&cfg, split)?;
    let (model, params, buffers, ema) = restore(&cfg, checkpoint, raw, &d)?;
    let e = train::evaluate(&model, &params, &buffers, &d, cfg.train.batch_size)?;
    println!(
        "loss {}  top1 {}  images {}  weights {}",
        sig6(e.loss as f64),
        sig6(e.top1 as f64),
        e.count,
        if ema { "ema" } else { "raw" }
    );
    Ok(())
}

fn run_grad_check(seed: u64, seeds: u64) -> Result<bool> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let list: Vec<u64> = (0..seeds).map(|i| seed.wrapping_add(i)).collect();
    let reports = gradsuite::run(&list, |_| {})?;
    let mut ok = true;
    println!("{:<58} {:>12} {:>9} {:>8}  status", "check", "worst rel", "checked", "skipped");
    for r in &reports {
        let pass = r.passed(GRAD_TOLERANCE);
        ok &= pass;
        println!(
            "{:<58} {:>12} {:>9} {:>8}  {}",
            r.name,
            sig6(r.worst as f64),
            r.checked,
            r.skipped,
            if pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} checks over {} seeds; worst relative error {} (tolerance {})",
        reports.len(),
        seeds,
        sig6(gradsuite::worst(&reports) as f64),
        sig6(GRAD_TOLERANCE as f64)
    );
    println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
    Ok(ok)
}

fn run_count(preset: Option<&str>, cfg: &ConfigArgs, csv: Option<&Path>) -> Result<()> {
    let (name, spec) = match preset {
        Some(p) => {
            if cfg.config.is_some() || !cfg.overrides.is_empty() {
                return Err(Error::Config("--preset cannot be combined with --config or --override".into()));
            }
            (p.to_string(), NetworkSpec::preset(p)?)
        }
        None => {
            let c = load(cfg)?;
            (c.model.preset.clone(), c.model.network()?)
        }
    };
    let report = Model::new(&spec, 0)?.cost_report(&name);
    print!("{}", report.to_text());
    if spec.vcr.is_some() {
        let base = Model::new(&NetworkSpec { vcr: None, ..spec.clone() }, 0)?.cost_report(&name);
        println!(
            "overhead vs plain twin  {}% params ({} -> {}), {}% MACs",
            sig6(100.0 * report.param_overhead(&base)),
            base.parameter_count,
            report.parameter_count,
            sig6(100.0 * (report.macs() as f64 - base.macs() as f64) / base.macs() as f64)
        );
    }
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_export_attn(cfg: &ConfigArgs, checkpoint: &Path, block: usize, count: usize, split: Split, out: &Path) -> Result<()> {
    let cfg = load(cfg)?;
    let d = data(&cfg, split)?;
    if count == 0 || count > d.len() {
        return Err(Error::Config(format!("--count must be in 1..={}", d.len())));
    }
    let (model, params, buffers, _) = restore(&cfg, checkpoint, false, &d)?;
    let idx: Vec<usize> = (0..count).collect();
    let (x, _) = d.batch(&idx, None)?;
    let maps = export::concept_maps(&model, &params, &buffers, &x, block)?;
    for f in maps.write(out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run_export_cam(cfg: &ConfigArgs, checkpoint: &Path, index: usize, class: Option<usize>, split: Split, out: &Path) -> Result<()> {
    let cfg = load(cfg)?;
    let d = data(&cfg, split)?;
    if index >= d.len() {
        return Err(Error::Config(format!("--index {index} outside split of {} images", d.len())));
    }
    let (model, params, buffers, _) = restore(&cfg, checkpoint, false, &d)?;
    let class = class.unwrap_or(d.labels[index]);
    let map = export::class_activation_map(&model, &params, &buffers, &d.single(index)?, class)?;
    for f in export::write_cam(&map, out, index, class)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run_ablate(cfg: &ConfigArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = load(cfg)?;
    let train_data = data(&cfg, Split::Train)?;
    let test_data = data(&cfg, Split::Test)?;
    println!("{}", ablation::HEADER);
    let rows = ablation::run(&cfg, seed, &train_data, &test_data, |r| println!("{}", r.to_csv()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(out, ablation::to_csv(&rows)).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let help = key_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for sub in ["train", "eval", "count", "export-attn", "export-cam", "ablate"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(sub, |s| s.after_long_help(h));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Train { cfg, seed, out } => run_train(cfg, *seed, out.clone()),
        Command::Eval { cfg, checkpoint, split, raw } => run_eval(cfg, checkpoint, *split, *raw),
        Command::GradCheck { seed, seeds } => match run_grad_check(*seed, *seeds) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(4),
            Err(e) => Err(e),
        },
        Command::Count { preset, cfg, csv } => run_count(preset.as_deref(), cfg, csv.as_deref()),
        Command::ExportAttn {
            cfg,
            checkpoint,
            block,
            count,
            split,
            out,
        } => run_export_attn(cfg, checkpoint, *block, *count, *split, out),
        Command::ExportCam {
            cfg,
            checkpoint,
            index,
            class,
            split,
            out,
        } => run_export_cam(cfg, checkpoint, *index, *class, *split, out),
        Command::Ablate { cfg, seed, out } => run_ablate(cfg, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
