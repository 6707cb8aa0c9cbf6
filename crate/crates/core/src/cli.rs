//! Command-line driver. Every command resolves a [`RunConfig`], does its
//! work, and writes a `*.run.json` manifest next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{RunConfig, SEED_ENV};
use crate::finetune::{self, FewShotResult, FinetuneConfig, Telemetry};
use crate::meta::{self, MetaOptimizerKind};
use crate::model::DualEncoder;
use crate::synth::{self, io as synth_io, Dataset, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Output of `git describe` at build time.
pub const GIT_DESCRIBE: &str = env!("GRMP_GIT_DESCRIBE");

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "grmp", version, about = "Meta-prompt pre-training and QGR fine-tuning on a synthetic IQA benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field, e.g. `--set meta.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE")]
    pub set: Vec<String>,
    /// Base seed; beats both the config file and GRMP_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic benchmark to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta pre-train prompts and temperature; writes a checkpoint and log.
    MetaPretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        inner_lr: Option<f64>,
        #[arg(long)]
        meta_lr: Option<f64>,
        #[arg(long, value_parser = ["adam", "sgd"])]
        meta_optimizer: Option<String>,
    },
    /// Score a split without fine-tuning.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
        ckpt: Option<PathBuf>,
        /// Use freshly initialized prompts instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["meta-train", "train-pool", "test"])]
        split: Option<String>,
    },
    /// Few-shot fine-tuning over label splits, optionally sweeping lambda.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tune: TuneArgs,
        /// One value or a comma-separated sweep.
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on one label split and export per-step gradient angles.
    AngleTrace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tune: TuneArgs,
        #[arg(long)]
        lambda: Option<f64>,
        /// Which label split to train on.
        #[arg(long, default_value_t = 0)]
        split_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Measure the semantic gradient but never apply the rule.
    #[arg(long)]
    pub no_qgr: bool,
    #[arg(long)]
    pub per_tensor: bool,
}

impl TuneArgs {
    fn apply(&self, f: &mut FinetuneConfig) {
        if let Some(v) = self.labels {
            f.labels = v;
        }
        if let Some(v) = self.epochs {
            f.epochs = v;
        }
        if let Some(v) = self.lr {
            f.lr = v;
        }
        if let Some(v) = self.batch_size {
            f.batch_size = v;
        }
        if self.no_qgr {
            f.qgr = false;
        }
        if self.per_tensor {
            f.per_tensor = true;
        }
    }
}

/// Config file, then `--set`, then `GRMP_SEED`, then `--seed`.
pub fn resolve_config(common: &Common, seed_env: Option<&str>) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let mut cfg = base
        .with_overrides(&common.set)
        .map_err(usage)?
        .with_seed_env(seed_env)
        .map_err(usage)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct InputDigest {
    role: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    git_describe: &'static str,
    seed: u64,
    config: &'a RunConfig,
    options: serde_json::Value,
    inputs: Vec<InputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(role: &str, path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(InputDigest {
        role: role.into(),
        sha256: sha256_hex(&bytes),
    })
}

fn data_digests(dir: &Path) -> Result<Vec<InputDigest>, CliError> {
    Ok(vec![
        digest_file("data/images.bin", &dir.join(synth_io::IMAGES_FILE))?,
        digest_file("data/manifest.json", &dir.join(synth_io::MANIFEST_FILE))?,
    ])
}

fn write_manifest(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    options: serde_json::Value,
    inputs: Vec<InputDigest>,
) -> Result<(), CliError> {
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        git_describe: GIT_DESCRIBE,
        seed: cfg.seed,
        config: cfg,
        options,
        inputs,
    };
    write_json(path, &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// `out.ckpt` -> `out.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    synth_io::read_dataset(dir).map_err(runtime)
}

/// Model with encoder weights from the config and parameters from `ckpt`.
/// The checkpoint must carry exactly the tensors the config describes.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<DualEncoder, CliError> {
    let template = DualEncoder::init(&cfg.model, cfg.seed).map_err(usage)?;
    let params = checkpoint::load(ckpt).map_err(runtime)?;
    let expected: Vec<(&String, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&String, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        return Err(runtime(format!(
            "{}: tensors do not match the model config",
            ckpt.display()
        )));
    }
    Ok(DualEncoder { params, ..template })
}

fn parse_split(s: &str) -> Split {
    match s {
        "meta-train" => Split::MetaTrain,
        "train-pool" => Split::TrainPool,
        _ => Split::Test,
    }
}

#[derive(Debug, Serialize)]
struct TraceRow {
    step: usize,
    loss_ce: f64,
    loss_kl: f64,
    angle_deg: Option<f64>,
    dot_sign: i8,
    norm_qua: f64,
    norm_sem: f64,
    lambda: f64,
}

impl From<&Telemetry> for TraceRow {
    fn from(t: &Telemetry) -> Self {
        Self {
            step: t.step,
            loss_ce: t.loss_ce,
            loss_kl: t.loss_kl,
            angle_deg: t.angle_deg,
            dot_sign: t.dot_sign,
            norm_qua: t.norm_qua,
            norm_sem: t.norm_sem,
            lambda: t.lambda,
        }
    }
}

#[derive(Debug, Serialize)]
struct SplitTraceRow {
    split: usize,
    step: usize,
    loss_ce: f64,
    loss_kl: f64,
    angle_deg: Option<f64>,
    dot_sign: i8,
    norm_qua: f64,
    norm_sem: f64,
    lambda: f64,
}

#[derive(Debug, Serialize)]
struct SplitRow {
    lambda: f64,
    split: usize,
    attempts: u64,
    srcc: f64,
    plcc: f64,
}

#[derive(Debug, Serialize)]
struct MedianRow {
    lambda: f64,
    median_srcc: f64,
    median_plcc: f64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let env = std::env::var(SEED_ENV).ok();
    execute(cli.command, env.as_deref())
}

pub fn execute(command: Command, seed_env: Option<&str>) -> Result<(), CliError> {
    match command {
        Command::GenData { common, out } => {
            let cfg = resolve_config(&common, seed_env)?;
            cfg.data.validate().map_err(usage)?;
            let ds = synth::generate_benchmark(&cfg.data, cfg.seed).map_err(runtime)?;
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            synth_io::write_dataset(&out, &ds).map_err(runtime)?;
            write_manifest(&out.join("run.json"), "gen-data", &cfg, json!({}), vec![])?;
            for split in [Split::MetaTrain, Split::TrainPool, Split::Test] {
                println!("{:<10} {}", split_name(split), ds.indices(split).len());
            }
            println!("{:<10} {}", "total", ds.len());
            Ok(())
        }
        Command::MetaPretrain {
            common,
            data,
            out,
            epochs,
            inner_lr,
            meta_lr,
            meta_optimizer,
        } => {
            let mut cfg = resolve_config(&common, seed_env)?;
            if let Some(v) = epochs {
                cfg.meta.epochs = v;
            }
            if let Some(v) = inner_lr {
                cfg.meta.inner_lr = v;
            }
            if let Some(v) = meta_lr {
                cfg.meta.meta_lr = v;
            }
            if let Some(v) = meta_optimizer {
                cfg.meta.optimizer = if v == "sgd" {
                    MetaOptimizerKind::Sgd
                } else {
                    MetaOptimizerKind::Adam
                };
            }
            let ds = load_data(&data)?;
            let init = DualEncoder::init(&cfg.model, cfg.seed).map_err(usage)?;
            let run = meta::run_meta_pretraining(&ds, &init, &cfg.meta, cfg.seed).map_err(|e| match e {
                meta::MetaError::Config(_) => usage(e),
                e => runtime(e),
            })?;
            ensure_parent(&out)?;
            checkpoint::save(&out, &run.model.params).map_err(runtime)?;
            write_csv(&sibling(&out, "log.csv"), &run.log)?;
            write_manifest(
                &sibling(&out, "run.json"),
                "meta-pretrain",
                &cfg,
                json!({}),
                data_digests(&data)?,
            )?;
            if let Some(last) = run.epochs.last() {
                println!(
                    "epochs {} support_loss {:.6} query_loss {:.6}",
                    run.epochs.len(),
                    last.support_loss,
                    last.query_loss
                );
            } else {
                println!("epochs 0");
            }
            Ok(())
        }
        Command::ZeroShot {
            common,
            ckpt,
            random_init,
            data,
            out,
            split,
        } => {
            let mut cfg = resolve_config(&common, seed_env)?;
            if let Some(s) = split {
                cfg.eval.split = parse_split(&s);
            }
            let ds = load_data(&data)?;
            let mut inputs = data_digests(&data)?;
            let model = match &ckpt {
                Some(p) if !random_init => {
                    inputs.push(digest_file("ckpt", p)?);
                    load_model(&cfg, p)?
                }
                _ => DualEncoder::init(&cfg.model, cfg.seed).map_err(usage)?,
            };
            let indices = ds.indices(cfg.eval.split);
            let eval = finetune::evaluate(&model, &ds, &indices).map_err(runtime)?;
            ensure_parent(&out)?;
            write_json(
                &out,
                &json!({
                    "srcc": eval.srcc,
                    "plcc": eval.plcc,
                    "n": eval.n,
                    "split": cfg.eval.split,
                    "init": if random_init { "random" } else { "checkpoint" },
                }),
            )?;
            write_manifest(
                &sibling(&out, "run.json"),
                "zero-shot",
                &cfg,
                json!({ "random_init": random_init }),
                inputs,
            )?;
            println!("srcc {:.6} plcc {:.6} n {}", eval.srcc, eval.plcc, eval.n);
            Ok(())
        }
        Command::Finetune {
            common,
            tune,
            lambda,
            splits,
            out,
        } => {
            let mut cfg = resolve_config(&common, seed_env)?;
            tune.apply(&mut cfg.finetune);
            if let Some(v) = splits {
                cfg.finetune.splits = v;
            }
            let lambdas = if lambda.is_empty() {
                vec![cfg.finetune.lambda]
            } else {
                lambda
            };
            if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
                return Err(usage(format!("lambda {l} must be >= 0")));
            }
            cfg.finetune.lambda = lambdas[0];
            cfg.finetune.validate().map_err(usage)?;
            let ds = load_data(&tune.data)?;
            let model = load_model(&cfg, &tune.ckpt)?;
            let mut results: Vec<FewShotResult> = Vec::with_capacity(lambdas.len());
            for &l in &lambdas {
                let fc = FinetuneConfig {
                    lambda: l,
                    ..cfg.finetune.clone()
                };
                let r = finetune::run_few_shot(&ds, &model, &fc, cfg.seed).map_err(|e| match e {
                    finetune::QgrError::PoolTooSmall { .. } => usage(e),
                    e => runtime(e),
                })?;
                println!(
                    "lambda {l} median_srcc {:.6} median_plcc {:.6}",
                    r.median_srcc, r.median_plcc
                );
                results.push(r);
            }
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            let split_rows: Vec<SplitRow> = results
                .iter()
                .flat_map(|r| {
                    r.splits.iter().map(|s| SplitRow {
                        lambda: r.lambda,
                        split: s.split,
                        attempts: s.attempts,
                        srcc: s.srcc,
                        plcc: s.plcc,
                    })
                })
                .collect();
            write_csv(&out.join("splits.csv"), &split_rows)?;
            let trace: Vec<SplitTraceRow> = results
                .iter()
                .flat_map(|r| {
                    r.telemetry.iter().enumerate().flat_map(|(split, ts)| {
                        ts.iter().map(move |t| SplitTraceRow {
                            split,
                            step: t.step,
                            loss_ce: t.loss_ce,
                            loss_kl: t.loss_kl,
                            angle_deg: t.angle_deg,
                            dot_sign: t.dot_sign,
                            norm_qua: t.norm_qua,
                            norm_sem: t.norm_sem,
                            lambda: t.lambda,
                        })
                    })
                })
                .collect();
            write_csv(&out.join("telemetry.csv"), &trace)?;
            let medians: Vec<MedianRow> = results
                .iter()
                .map(|r| MedianRow {
                    lambda: r.lambda,
                    median_srcc: r.median_srcc,
                    median_plcc: r.median_plcc,
                })
                .collect();
            write_csv(&out.join("medians.csv"), &medians)?;
            write_json(&out.join("medians.json"), &results)?;
            let mut inputs = data_digests(&tune.data)?;
            inputs.push(digest_file("ckpt", &tune.ckpt)?);
            write_manifest(
                &out.join("run.json"),
                "finetune",
                &cfg,
                json!({ "lambdas": lambdas }),
                inputs,
            )?;
            Ok(())
        }
        Command::AngleTrace {
            common,
            tune,
            lambda,
            split_index,
            out,
        } => {
            let mut cfg = resolve_config(&common, seed_env)?;
            tune.apply(&mut cfg.finetune);
            if let Some(l) = lambda {
                cfg.finetune.lambda = l;
            }
            cfg.finetune.validate().map_err(usage)?;
            let ds = load_data(&tune.data)?;
            let model = load_model(&cfg, &tune.ckpt)?;
            let trace = finetune::trace_split(&ds, &model, &cfg.finetune, cfg.seed, split_index)
                .map_err(|e| match e {
                    finetune::QgrError::PoolTooSmall { .. } => usage(e),
                    e => runtime(e),
                })?;
            ensure_parent(&out)?;
            let rows: Vec<TraceRow> = trace.iter().map(TraceRow::from).collect();
            write_csv(&out, &rows)?;
            let mut inputs = data_digests(&tune.data)?;
            inputs.push(digest_file("ckpt", &tune.ckpt)?);
            write_manifest(
                &sibling(&out, "run.json"),
                "angle-trace",
                &cfg,
                json!({ "split_index": split_index }),
                inputs,
            )?;
            let per_epoch = cfg.finetune.labels.div_ceil(cfg.finetune.batch_size);
            match finetune::AngleSummary::from_trace(&trace, per_epoch) {
                Some(s) => println!(
                    "steps {} mean_angle {:.3} mean_abs_dev {:.3}",
                    trace.len(),
                    s.mean_angle,
                    s.mean_abs_deviation
                ),
                None => println!("steps {} (no angles past the first epoch)", trace.len()),
            }
            Ok(())
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::MetaTrain => "meta-train",
        Split::TrainPool => "train-pool",
        Split::Test => "test",
    }
}
