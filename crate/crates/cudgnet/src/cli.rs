//! Command-line entry points: `train`, `eval`, `uncertainty`, `ablate`.
//!
//! Every run owns a directory `<out>/<timestamp>-<tag>/` containing
//! `manifest.json` (command line, config snapshot, git describe, seed,
//! timestamps, outputs), `config.toml`, `checkpoints/`, `logs/`, and
//! `reports/`. Existing run directories are never overwritten unless
//! `--force` is passed. The dataset root comes from `--data-root`, the
//! config file, or the `CUDGNET_DATA_ROOT` environment variable, in that
//! order.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{self, CorruptionSpec};
use crate::error::{Error, Result};
use crate::models::CudgNetModel;
use crate::training::{
    ablation_ladder, evaluate_corruptions, evaluate_dataset, ladder_table, MetricsLog,
    TrainConfig, Trainer,
};
use crate::uncertainty::{
    bayesian_baseline, calibrate_sigma_s, compare_and_plot, single_pass_uncertainty,
    DomainComparison,
};

pub const DATA_ROOT_ENV: &str = "CUDGNET_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "cudgnet",
    about = "Single-source domain generalization: adversarial feature-space augmentation with single-pass uncertainty",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on CIFAR-10-C corruption slices.
    Eval(EvalArgs),
    /// Compare single-pass uncertainty against the sampling baseline.
    Uncertainty(UncertaintyArgs),
    /// Train the cumulative component-ablation ladder.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonOut {
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Use this exact run directory instead of <out>/<timestamp>-<tag>.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Short run label appended to the directory name.
    #[arg(long, default_value = "run")]
    pub tag: String,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub w1: Option<f64>,
    /// TC repetition cap (k drawn uniformly from [0, k_max]).
    #[arg(long)]
    pub k_max: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Resume from an existing checkpoint archive.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: CommonOut,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated corruption names (default: all 19).
    #[arg(long, value_delimiter = ',')]
    pub corruptions: Vec<String>,
    /// Comma-separated severities in [1,5] (default: 1-5).
    #[arg(long, value_delimiter = ',')]
    pub severities: Vec<u8>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Rows per severity in the corruption stacks (published layout: 10000).
    #[arg(long, default_value_t = 10_000)]
    pub c_rows_per_severity: usize,
    #[command(flatten)]
    pub out: CommonOut,
}

#[derive(Args, Debug)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated corruption names acting as unseen domains.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub severities: Vec<u8>,
    /// Sample count for the Bayesian baseline.
    #[arg(long, default_value_t = 30)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Rows per severity in the corruption stacks (published layout: 10000).
    #[arg(long, default_value_t = 10_000)]
    pub c_rows_per_severity: usize,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[command(flatten)]
    pub out: CommonOut,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub corruptions: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub severities: Vec<u8>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Rows per severity in the corruption stacks (published layout: 10000).
    #[arg(long, default_value_t = 10_000)]
    pub c_rows_per_severity: usize,
    #[command(flatten)]
    pub out: CommonOut,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub git_describe: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

/// RFC 3339 UTC timestamp without subseconds.
pub fn rfc3339_now() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = secs / 86_400;
    let (y, m, d) = civil_from_days(days as i64);
    let rem = secs % 86_400;
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

// days since 1970-01-01 -> (year, month, day), civil calendar
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn resolve_data_root(flag: &Option<PathBuf>, cfg_root: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Some(p) = cfg_root {
        return Ok(p.clone());
    }
    if let Ok(p) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(p));
    }
    Err(Error::Config(format!(
        "no dataset root: pass --data-root, set data_root in the config, or export {DATA_ROOT_ENV}"
    )))
}

fn prepare_run_dir(out: &CommonOut) -> Result<PathBuf> {
    let dir = match &out.run_dir {
        Some(d) => d.clone(),
        None => out.out.join(format!(
            "{}-{}",
            rfc3339_now().replace(':', ""),
            out.tag
        )),
    };
    if dir.exists() {
        if !out.force {
            return Err(Error::OutputExists(dir.display().to_string()));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::create_dir_all(dir.join("logs"))?;
    std::fs::create_dir_all(dir.join("reports"))?;
    Ok(dir)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn apply_train_overrides(cfg: &mut TrainConfig, args: &TrainArgs) {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.subset_size {
        cfg.subset_size = Some(n);
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.beta {
        cfg.loss.beta = b;
    }
    if let Some(w) = args.w1 {
        cfg.loss.w1 = w;
    }
    if let Some(k) = args.k_max {
        cfg.tc.k_max = k;
    }
    if let Some(t) = args.temperature {
        cfg.loss.temperature = t;
    }
    if let Some(r) = &args.data_root {
        cfg.data_root = Some(r.clone());
    }
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    started_at: String,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        git_describe: git_describe(),
        seed,
        started_at,
        finished_at: rfc3339_now(),
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Other(format!("manifest: {e}")))?;
    crate::report::write_text(&dir.join("manifest.json"), &json)?;
    Ok(())
}

fn specs_from_args(corruptions: &[String], severities: &[u8]) -> Result<Vec<CorruptionSpec>> {
    let names: Vec<&str> = if corruptions.is_empty() {
        data::all_corruption_names()
    } else {
        corruptions.iter().map(|s| s.as_str()).collect()
    };
    let sevs: Vec<u8> = if severities.is_empty() {
        vec![1, 2, 3, 4, 5]
    } else {
        severities.to_vec()
    };
    CorruptionSpec::grid(&names, &sevs)
}

fn load_model_from_checkpoint(path: &Path) -> Result<(CudgNetModel, TrainConfig, Option<f64>)> {
    let meta = crate::checkpoint::read_meta(path)?;
    let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("config in checkpoint: {e}")))?;
    let mut init_rng = crate::rng::stream_rng(cfg.seed, crate::rng::Stream::Init);
    let mut model = CudgNetModel::new(cfg.model.clone(), &mut init_rng)?;
    let meta = crate::checkpoint::load_checkpoint_into(path, &mut model)?;
    Ok((model, cfg, meta.sigma_s_ref))
}

pub fn cmd_train(args: &TrainArgs, command_line: &str) -> Result<()> {
    let started = rfc3339_now();
    let mut cfg = load_config(&args.config)?;
    apply_train_overrides(&mut cfg, args);
    cfg.validate()?;
    let dir = prepare_run_dir(&args.out)?;

    // a resumed run keeps the checkpoint's config; only the horizon and the
    // dataset root may be overridden
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let mut t = Trainer::from_checkpoint(ckpt)?;
            if let Some(e) = args.epochs {
                t.cfg.epochs = e;
            }
            if let Some(r) = &args.data_root {
                t.cfg.data_root = Some(r.clone());
            }
            t
        }
        None => Trainer::new(cfg)?,
    };
    let data_root = resolve_data_root(&args.data_root, &trainer.cfg.data_root)?;

    let cfg_toml = toml::to_string_pretty(&trainer.cfg)
        .map_err(|e| Error::Config(format!("snapshot: {e}")))?;
    crate::report::write_text(&dir.join("config.toml"), &cfg_toml)?;

    let source = data::load_source(&data_root, trainer.cfg.subset_size, trainer.cfg.seed)?;
    println!(
        "training on {} source images for {} epochs (seed {}, starting epoch {})",
        source.len(),
        trainer.cfg.epochs,
        trainer.cfg.seed,
        trainer.epoch
    );

    let mut log = MetricsLog::to_file(&dir.join("logs").join("metrics.ndjson"))?;
    trainer.run(&source, Some(&dir.join("checkpoints")), &mut log)?;

    // calibrate sigma(S) on the clean test split when it is available
    match data::load_test(&data_root) {
        Ok(val) => {
            let sigma_s = calibrate_sigma_s(
                &mut trainer.model,
                &trainer.cfg.normalization,
                &val,
                256,
            )?;
            trainer.sigma_s_ref = Some(sigma_s);
            println!("calibrated sigma(S) = {sigma_s:.6}");
        }
        Err(e) => eprintln!("warning: skipping sigma(S) calibration: {e}"),
    }
    let final_ckpt = dir.join("checkpoints").join("final.ckpt");
    trainer.save(&final_ckpt)?;

    let train_acc = evaluate_dataset(
        &mut trainer.model,
        &trainer.cfg.normalization,
        &source,
        256,
    );
    println!("final clean train-subset accuracy: {train_acc:.2}%");

    write_manifest(
        &dir,
        command_line,
        serde_json::to_value(&trainer.cfg).unwrap_or_default(),
        trainer.cfg.seed,
        started,
        vec![
            dir.join("logs/metrics.ndjson").display().to_string(),
            final_ckpt.display().to_string(),
        ],
    )
}

pub fn cmd_eval(args: &EvalArgs, command_line: &str) -> Result<()> {
    let started = rfc3339_now();
    let specs = specs_from_args(&args.corruptions, &args.severities)?;
    let (mut model, cfg, _) = load_model_from_checkpoint(&args.checkpoint)?;
    let data_root = resolve_data_root(&args.data_root, &cfg.data_root)?;
    let dir = prepare_run_dir(&args.out)?;

    let mut report = evaluate_corruptions(
        &mut model,
        &cfg.normalization,
        &data_root,
        &specs,
        args.batch_size,
        args.c_rows_per_severity,
    )?;
    if let Ok(test) = data::load_test(&data_root) {
        report.clean_accuracy = Some(evaluate_dataset(
            &mut model,
            &cfg.normalization,
            &test,
            args.batch_size,
        ));
    }

    let reports = dir.join("reports");
    crate::report::write_text(&reports.join("report.json"), &report.to_json())?;
    crate::report::write_text(&reports.join("summary.csv"), &report.summary_csv())?;
    crate::report::write_text(&reports.join("per_corruption.csv"), &report.detail_csv())?;
    println!("{}", report.summary_csv());

    write_manifest(
        &dir,
        command_line,
        serde_json::json!({"checkpoint": args.checkpoint.display().to_string()}),
        0,
        started,
        vec![
            reports.join("report.json").display().to_string(),
            reports.join("summary.csv").display().to_string(),
            reports.join("per_corruption.csv").display().to_string(),
        ],
    )
}

pub fn cmd_uncertainty(args: &UncertaintyArgs, command_line: &str) -> Result<()> {
    let started = rfc3339_now();
    let specs = specs_from_args(&args.domains, &args.severities)?;
    let (mut model, cfg, sigma_ref) = load_model_from_checkpoint(&args.checkpoint)?;
    let data_root = resolve_data_root(&args.data_root, &cfg.data_root)?;
    let dir = prepare_run_dir(&args.out)?;

    let sigma_s_ref = match sigma_ref {
        Some(s) => s,
        None => {
            // calibrate on the fly from the clean test split
            let val = data::load_test(&data_root)?;
            let s = calibrate_sigma_s(&mut model, &cfg.normalization, &val, args.batch_size)?;
            println!("calibrated sigma(S) on the fly: {s:.6}");
            s
        }
    };

    let mut rngs = crate::rng::RngBundle::from_seed(cfg.seed ^ 0x5eed);
    let mut records = Vec::new();
    for spec in &specs {
        let ds = data::load_cifar10c_slice_rows(
            &data_root,
            &spec.name,
            spec.severity,
            args.c_rows_per_severity,
        )?;
        let take: Vec<usize> = (0..ds.len().min(args.batch_size)).collect();
        let (x, _) = ds.batch(&take);
        let u = single_pass_uncertainty(&mut model, &cfg.normalization, &x, sigma_s_ref)?;
        let (var, ms_bayes) = bayesian_baseline(
            &mut model,
            &cfg.normalization,
            &x,
            args.mc_samples,
            &mut rngs,
        )?;
        println!(
            "{} s{}: score {:+.4}, bayes var {:.3e} ({:.2} ms vs {:.2} ms)",
            spec.name, spec.severity, u.score, var, u.wall_time_ms_per_batch, ms_bayes
        );
        records.push(DomainComparison {
            domain: spec.name.clone(),
            severity: spec.severity,
            single_pass_score: u.score,
            bayesian_variance: var,
            ms_single: u.wall_time_ms_per_batch,
            ms_bayes,
        });
    }

    let reports = dir.join("reports");
    let summary = compare_and_plot(&records, &reports)?;
    println!(
        "spearman {:.3}, pearson {:.3}, speedup {:.1}x",
        summary.spearman, summary.pearson, summary.speedup
    );

    write_manifest(
        &dir,
        command_line,
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "mc_samples": args.mc_samples,
        }),
        cfg.seed,
        started,
        vec![
            reports.join("uncertainty.csv").display().to_string(),
            reports.join("uncertainty_summary.json").display().to_string(),
            reports.join("uncertainty.svg").display().to_string(),
        ],
    )
}

pub fn cmd_ablate(args: &AblateArgs, command_line: &str) -> Result<()> {
    let started = rfc3339_now();
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = &args.data_root {
        cfg.data_root = Some(r.clone());
    }
    cfg.validate()?;
    let specs = specs_from_args(&args.corruptions, &args.severities)?;
    let data_root = resolve_data_root(&args.data_root, &cfg.data_root)?;
    let dir = prepare_run_dir(&args.out)?;

    let source = data::load_source(&data_root, cfg.subset_size, cfg.seed)?;
    let norm = cfg.normalization.clone();
    let batch_size = args.batch_size;
    let c_rows = args.c_rows_per_severity;
    let rows = ablation_ladder(&cfg, &source, Some(&dir.join("logs")), |trainer| {
        evaluate_corruptions(
            &mut trainer.model,
            &norm,
            &data_root,
            &specs,
            batch_size,
            c_rows,
        )
    })?;

    let table = ladder_table(&rows);
    println!("{table}");
    let reports = dir.join("reports");
    crate::report::write_text(&reports.join("ablation.txt"), &table)?;
    let json = serde_json::to_string_pretty(
        &rows
            .iter()
            .map(|(name, r)| serde_json::json!({"variant": name, "report": r}))
            .collect::<Vec<_>>(),
    )
    .map_err(|e| Error::Other(format!("ablation json: {e}")))?;
    crate::report::write_text(&reports.join("ablation.json"), &json)?;

    write_manifest(
        &dir,
        command_line,
        serde_json::to_value(&cfg).unwrap_or_default(),
        cfg.seed,
        started,
        vec![
            reports.join("ablation.txt").display().to_string(),
            reports.join("ablation.json").display().to_string(),
        ],
    )
}

/// Parse and dispatch. The `argv` slice includes the program name.
pub fn run<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let command_line = argv.join(" ");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.strip_prefix("error: ").unwrap_or(&msg);
            return Err(Error::Config(msg.to_string()));
        }
    };
    match &cli.command {
        Command::Train(a) => cmd_train(a, &command_line),
        Command::Eval(a) => cmd_eval(a, &command_line),
        Command::Uncertainty(a) => cmd_uncertainty(a, &command_line),
        Command::Ablate(a) => cmd_ablate(a, &command_line),
    }
}
