//! Command-line driver: dataset generation, training, evaluation, gradient
//! checks and ablation sweeps.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a gradient check failed |
//! | 2 | usage, configuration or data error |
//! | 3 | I/O error or malformed file |
//! | 4 | checkpoint incompatible with the configuration or dataset |
//! | 5 | training aborted on a non-finite loss |
//! | 6 | checkpoint checksum mismatch |
//! | 7 | internal error |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use genkd::checkpoint::Checkpoint;
use genkd::checks::{self, Scope};
use genkd::config::RunConfig;
use genkd::data::{generate_dataset, load_dataset, save_dataset, Dataset, Split};
use genkd::metrics::write_metrics;
use genkd::nn::Network;
use genkd::params::Side;
use genkd::trainer::{self, TrainOutcome, Variant};
use genkd::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_GRADCHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INCOMPATIBLE: u8 = 4;
pub const EXIT_NON_FINITE: u8 = 5;
pub const EXIT_CHECKSUM: u8 = 6;
pub const EXIT_INTERNAL: u8 = 7;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Data(_) => EXIT_USAGE,
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        Error::Incompatible(_) => EXIT_INCOMPATIBLE,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        Error::Checksum { .. } => EXIT_CHECKSUM,
        Error::Tensor(_) | Error::Invariant(_) => EXIT_INTERNAL,
    }
}

#[derive(Parser, Debug)]
#[command(name = "genkd", version, about = "Generative knowledge distillation for small video classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Blocks,
    Losses,
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Ops => Scope::Ops,
            ScopeArg::Blocks => Scope::Blocks,
            ScopeArg::Losses => Scope::Losses,
            ScopeArg::All => Scope::All,
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics log to write.
    #[arg(long)]
    pub metrics: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic clip dataset described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the teacher network and its CVAE.
    TrainTeacher {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Distil a student from a trained teacher with both distillation terms.
    TrainKd {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train a baseline student: student_only, student_plus_attention or
    /// feature_kd_eq1 (the last needs --teacher).
    TrainBaseline {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Also write every sample's logits, one CSV line per sample.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Copy a checkpoint without its CVAE records.
    StripCvae {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        /// Corrupt one operation's backward rule (test fixture).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train every ablation arm for several seeds and summarise as CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Reuse a trained teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> genkd::Result<u8> {
    match cmd {
        Command::GenData { config, out: path } => {
            let cfg = RunConfig::load(&config)?;
            let ds = generate_dataset(&cfg.data)?;
            save_dataset(&path, &ds)?;
            writeln!(out, "wrote {} train and {} val clips to {}", ds.train.len(), ds.val.len(), path.display())?;
        }
        Command::TrainTeacher { args } => {
            let (cfg, ds) = load_inputs(&args)?;
            let res = trainer::train_teacher(&cfg, &ds, None)?;
            finish(&cfg, "teacher", &args, &res, out)?;
        }
        Command::TrainKd { args, teacher } => {
            let teacher = teacher.ok_or_else(|| Error::Usage("train-kd requires --teacher".into()))?;
            let (cfg, ds) = load_inputs(&args)?;
            let t = load_teacher(&teacher, &cfg)?;
            let res = trainer::train_kd(&cfg, &ds, &t, None)?;
            finish(&cfg, Variant::Full.name(), &args, &res, out)?;
        }
        Command::TrainBaseline { args, variant, teacher } => {
            let variant: Variant = variant.parse()?;
            let (cfg, ds) = load_inputs(&args)?;
            let t = teacher.map(|p| load_teacher(&p, &cfg)).transpose()?;
            let res = trainer::train_baseline(&cfg, &ds, variant, t.as_ref(), None)?;
            finish(&cfg, variant.name(), &args, &res, out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            predictions,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let net = ck.network()?;
            let ds = load_dataset(&data)?;
            check_dims(&ck.config, &ds)?;
            let samples = ds.split(split.into());
            let (top1, topk) = trainer::evaluate(&net, samples, ck.config.train.topk)?;
            if let Some(path) = predictions {
                let logits = trainer::predict_all(&net, samples)?;
                let mut text = String::new();
                for row in logits.data().chunks_exact(logits.shape()[1]) {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    writeln!(text, "{}", cells.join(",")).expect("string write");
                }
                fs::write(path, text)?;
            }
            writeln!(out, "top1={top1} topk={topk}")?;
        }
        Command::StripCvae { checkpoint, out: path } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            ck.strip_cvae();
            ck.save(&path)?;
            writeln!(out, "wrote {} tensors to {}", ck.params.len(), path.display())?;
        }
        Command::Gradcheck { scope, inject_fault } => {
            let results = checks::run(scope.into(), inject_fault.as_deref())?;
            writeln!(out, "{:<8} {:<28} {:>12} {:>8}  status", "scope", "check", "max_rel_err", "tol")?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.report.pass { "PASS" } else { "FAIL" };
                writeln!(
                    out,
                    "{:<8} {:<28} {:>12.3e} {:>8.0e}  {status}",
                    r.scope.to_string(),
                    r.name,
                    r.report.max_rel_err,
                    r.tol
                )?;
                if !r.report.pass {
                    failed.push(r.name.as_str());
                }
            }
            if !failed.is_empty() {
                writeln!(out, "failed: {}", failed.join(", "))?;
                return Ok(EXIT_GRADCHECK);
            }
            writeln!(out, "all {} checks passed", results.len())?;
        }
        Command::Ablate {
            config,
            data,
            seeds,
            teacher,
            out: path,
        } => {
            if seeds == 0 {
                return Err(Error::Usage("--seeds must be at least 1".into()));
            }
            let cfg = RunConfig::load(&config)?;
            let ds = load_dataset(&data)?;
            check_dims(&cfg, &ds)?;
            let t = match teacher {
                Some(p) => load_teacher(&p, &cfg)?,
                None => trainer::train_teacher(&cfg, &ds, None)?.network,
            };
            let csv = ablation_csv(&cfg, &ds, &t, seeds)?;
            match path {
                Some(p) => fs::write(p, csv)?,
                None => write!(out, "{csv}")?,
            }
        }
    }
    Ok(EXIT_OK)
}

/// One row per (variant, seed) plus a mean row per variant.
pub fn ablation_csv(cfg: &RunConfig, ds: &Dataset, teacher: &Network, seeds: u64) -> genkd::Result<String> {
    let mut csv = String::from("variant,seed,top1,topk\n");
    for v in Variant::ABLATION {
        let (mut s1, mut sk) = (0.0, 0.0);
        for i in 0..seeds {
            let mut c = cfg.clone();
            c.train.seed = cfg.train.seed + i;
            let res = trainer::train_student(&c, ds, v, Some(teacher), None)?;
            writeln!(csv, "{v},{},{},{}", c.train.seed, res.top1, res.topk).expect("string write");
            s1 += res.top1;
            sk += res.topk;
        }
        let n = seeds as f64;
        writeln!(csv, "{v},mean,{},{}", s1 / n, sk / n).expect("string write");
    }
    Ok(csv)
}

fn load_inputs(args: &TrainArgs) -> genkd::Result<(RunConfig, Dataset)> {
    let cfg = RunConfig::load(&args.config)?;
    let ds = load_dataset(&args.data)?;
    check_dims(&cfg, &ds)?;
    Ok((cfg, ds))
}

/// The networks are built from the config, so the clips must have its shape.
fn check_dims(cfg: &RunConfig, ds: &Dataset) -> genkd::Result<()> {
    let (a, b) = (&cfg.data, &ds.spec);
    let want = (a.num_classes, a.frames, a.height, a.width);
    let got = (b.num_classes, b.frames, b.height, b.width);
    if want != got {
        return Err(Error::Incompatible(format!(
            "config expects (classes, frames, height, width) = {want:?}, dataset has {got:?}"
        )));
    }
    Ok(())
}

fn load_teacher(path: &Path, cfg: &RunConfig) -> genkd::Result<Network> {
    Checkpoint::load(path)?.network_for(cfg.teacher_arch(), Side::Teacher)
}

fn finish(
    cfg: &RunConfig,
    variant: &str,
    args: &TrainArgs,
    res: &TrainOutcome,
    out: &mut dyn Write,
) -> genkd::Result<()> {
    Checkpoint::new(cfg.clone(), variant, &res.network).save(&args.out)?;
    write_metrics(&args.metrics, &res.records)?;
    writeln!(out, "top1={} topk={}", res.top1, res.topk)?;
    Ok(())
}
