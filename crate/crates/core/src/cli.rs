//! The `csep` command line.
//!
//! Every command writes a [`RunManifest`] next to its outputs. The manifest
//! keeps the exact argument vector, so `csep replay <manifest>` reruns the
//! command and reproduces the outputs byte for byte.
//!
//! Seed precedence for `train` / `ablate`: `--seed` flag, then the
//! `CSEP_SEED` environment variable, then the config file, then the default.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{self, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::fsio::{read_all, write_atomic};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::ot::{self, format_csv_matrix, parse_csv_matrix, MaskedCost};
use crate::trainer::{self, MetricLog, TrainConfig, Variant};

pub const SEED_ENV: &str = "CSEP_SEED";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NOT_FOUND: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const INFEASIBLE: i32 = 6;
    pub const NUMERIC: i32 = 7;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => exit::USAGE,
        Error::InvalidConfig(_) | Error::UnknownKey(_) => exit::CONFIG,
        Error::NotFound(_) => exit::NOT_FOUND,
        Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::Inconsistent(_)
        | Error::Csv(_)
        | Error::Json(_) => exit::FORMAT,
        Error::InfeasibleMask { .. } => exit::INFEASIBLE,
        Error::NonFinite(_) | Error::ZeroNorm { .. } => exit::NUMERIC,
        _ => exit::FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "csep", version, about = "Noise-robust composed retrieval toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic triplet dataset.
    Gen(GenArgs),
    /// Train the full method.
    Train(TrainArgs),
    /// Train one ablation variant.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Solve a masked entropic transport problem from CSV.
    Sinkhorn(SinkhornArgs),
    /// Summarize finished runs.
    Report(ReportArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Raw embedding dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Noise rate.
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub hard_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub target_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a clean held-out split of this many triplets.
    #[arg(long, requires = "eval_out")]
    pub n_eval: Option<usize>,
    #[arg(long, requires = "n_eval")]
    pub eval_out: Option<PathBuf>,
    /// Also export the training split as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for the checkpoint, metrics and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Clean split evaluated after every epoch.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub model_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_KS)]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_SUBSET_KS)]
    pub subset_ks: Vec<usize>,
    #[arg(long, default_value_t = eval::DEFAULT_SUBSET_SIZE)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed for the candidate subsets.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Orthogonality histogram as CSV.
    #[arg(long)]
    pub histogram_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SinkhornArgs {
    #[arg(long)]
    pub cost: PathBuf,
    /// 0/1 CSV of the same shape; 1 blocks a cell.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = ot::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = ot::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = ot::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the one-line JSON summary; printed to stdout as well.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `train` or `ablate`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_all(path)?)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Path of the manifest that accompanies a single output file.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

struct Outcome {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, argv) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let name = match &command {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Ablate(_) => "ablate",
        Command::Eval(_) => "eval",
        Command::Sinkhorn(_) => "sinkhorn",
        Command::Report(_) => "report",
        Command::Replay(_) => "replay",
    };
    let outcome = match command {
        Command::Gen(a) => cmd_gen(&a)?,
        Command::Train(a) => cmd_train(&a, Variant::Full)?,
        Command::Ablate(a) => cmd_train(&a.train, a.variant)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Sinkhorn(a) => cmd_sinkhorn(&a)?,
        Command::Report(a) => cmd_report(&a)?,
        Command::Replay(a) => return cmd_replay(&a),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        argv,
        config: outcome.config,
        seed: outcome.seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&outcome.manifest)?;
    info!("wrote {}", outcome.manifest.display());
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<Outcome> {
    let cfg = GenConfig {
        n: a.n,
        d_raw: a.dim,
        clusters: a.clusters,
        sigma: a.noise,
        hard_fraction: a.hard_fraction,
        target_noise_scale: a.target_noise,
        seed: a.seed,
    };
    let mut outputs = vec![a.out.clone()];
    let train = match (a.n_eval, &a.eval_out) {
        (Some(n_eval), Some(path)) => {
            let (train, held) = data::generate_with_holdout(&cfg, n_eval)?;
            data::save(&held, path)?;
            outputs.push(path.clone());
            train
        }
        _ => data::generate(&cfg)?,
    };
    data::save(&train, &a.out)?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, data::to_csv(&train).as_bytes())?;
        outputs.push(csv.clone());
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        seed: Some(cfg.seed),
        inputs: Vec::new(),
        outputs,
        manifest: manifest_path_for(&a.out),
    })
}

/// Applies config file, `CSEP_SEED` and flag overrides in increasing priority.
pub fn resolve_train_config(a: &TrainArgs, env_seed: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let bytes = read_all(path)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::InvalidConfig("config is not UTF-8".into()))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.warmup_epochs, a.warmup_epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.dim, a.model_dim);
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, variant: Variant) -> Result<Outcome> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve_train_config(a, env_seed.as_deref())?;
    let train_set = data::load(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(data::load).transpose()?;
    let (params, log) = trainer::run(&cfg, &train_set, eval_set.as_ref(), variant)?;

    std::fs::create_dir_all(&a.out_dir)?;
    let ckpt = a.out_dir.join(CHECKPOINT_FILE);
    let jsonl = a.out_dir.join(METRICS_JSONL);
    let csv = a.out_dir.join(METRICS_CSV);
    save_checkpoint(&params, &ckpt)?;
    write_atomic(&jsonl, log.to_jsonl().as_bytes())?;
    write_atomic(&csv, log.to_csv().as_bytes())?;

    let mut config = serde_json::to_value(&cfg)?;
    config["variant"] = serde_json::Value::String(variant.to_string());
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    inputs.extend(a.eval_data.clone());
    Ok(Outcome {
        config,
        seed: Some(cfg.seed),
        inputs,
        outputs: vec![ckpt, jsonl, csv],
        manifest: a.out_dir.join(MANIFEST_FILE),
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = data::load(&a.data)?;
    let opts = EvalOptions {
        ks: a.ks.clone(),
        subset_ks: a.subset_ks.clone(),
        subset_size: a.subset_size,
        bins: a.bins,
        seed: a.seed,
    };
    let report = eval::evaluate(&params, &ds, &opts)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.histogram_csv {
        write_atomic(path, report.orthogonality.histogram.to_csv().as_bytes())?;
        outputs.push(path.clone());
    }
    println!("{}", serde_json::to_string(&report.recall)?);
    Ok(Outcome {
        config: serde_json::json!({
            "ks": opts.ks,
            "subset_ks": opts.subset_ks,
            "subset_size": opts.subset_size,
            "bins": opts.bins,
        }),
        seed: Some(a.seed),
        inputs: vec![a.checkpoint.clone(), a.data.clone()],
        outputs,
        manifest: manifest_path_for(&a.out),
    })
}

fn read_csv(path: &Path) -> Result<crate::numeric::Matrix> {
    let bytes = read_all(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Csv(format!("{} is not UTF-8", path.display())))?;
    parse_csv_matrix(&text)
}

fn cmd_sinkhorn(a: &SinkhornArgs) -> Result<Outcome> {
    let cost = read_csv(&a.cost)?;
    let masked = match &a.mask {
        Some(path) => MaskedCost::new(cost, read_csv(path)?)?,
        None => MaskedCost::unmasked(cost),
    };
    let plan = ot::sinkhorn(&masked, a.eps, a.max_iters, a.tol)?;
    write_atomic(&a.out, format_csv_matrix(&plan.plan).as_bytes())?;
    let summary = serde_json::to_string(&plan.summary(&masked, a.eps))?;
    println!("{summary}");
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.summary {
        write_atomic(path, format!("{summary}\n").as_bytes())?;
        outputs.push(path.clone());
    }
    let mut inputs = vec![a.cost.clone()];
    inputs.extend(a.mask.clone());
    Ok(Outcome {
        config: serde_json::json!({ "eps": a.eps, "max_iters": a.max_iters, "tol": a.tol }),
        seed: None,
        inputs,
        outputs,
        manifest: manifest_path_for(&a.out),
    })
}

/// One row of the `report` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_total: f64,
    pub final_robust: f64,
    pub final_precision: f64,
    pub eval_r10: Option<f64>,
}

pub fn summarize_run(dir: &Path) -> Result<RunSummary> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let variant = manifest.config["variant"].as_str().unwrap_or("full").to_string();
    let mut config = manifest.config.clone();
    if let Some(obj) = config.as_object_mut() {
        obj.remove("variant");
    }
    let cfg: TrainConfig = serde_json::from_value(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let text = String::from_utf8(read_all(&dir.join(METRICS_JSONL))?)
        .map_err(|_| Error::Inconsistent("metrics are not UTF-8".into()))?;
    let log = MetricLog::from_jsonl(&text, variant.parse()?, cfg)?;
    let last = log
        .last()
        .ok_or_else(|| Error::Inconsistent(format!("{} has no epoch records", dir.display())))?;
    Ok(RunSummary {
        run: dir.display().to_string(),
        variant,
        seed: log.seed,
        epochs: log.records.len(),
        final_total: last.total,
        final_robust: last.robust,
        final_precision: last.purity.precision,
        eval_r10: last.eval.as_ref().and_then(|e| e.recall.get(&10).copied()),
    })
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome> {
    let rows = a.runs.iter().map(|d| summarize_run(d)).collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("run,variant,seed,epochs,final_total,final_robust,final_precision,eval_r10\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run,
            r.variant,
            r.seed,
            r.epochs,
            r.final_total,
            r.final_robust,
            r.final_precision,
            r.eval_r10.map(|x| x.to_string()).unwrap_or_default()
        ));
    }
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(Outcome {
        config: serde_json::Value::Null,
        seed: None,
        inputs: a.runs.clone(),
        outputs: vec![a.out.clone()],
        manifest: manifest_path_for(&a.out),
    })
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    let args = std::iter::once("csep".to_string()).chain(manifest.argv.iter().cloned());
    let cli =
        Cli::try_parse_from(args).map_err(|e| Error::Inconsistent(format!("manifest argv does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Inconsistent("a manifest cannot replay another replay".into()));
    }
    execute(cli.command, manifest.argv)
}
