//! Command-line front end. [`run`] does everything `main` does, writing to
//! the given streams and returning the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autodiff::OpKind;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Preset, RunConfig};
use crate::data::{generate_split, load_dataset, load_sample, synth_generate, Split};
use crate::error::Error;
use crate::fusion::network::{predict, MODALITY_NAMES};
use crate::fusion::{pmfnet_forward, ForwardMode};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::params::ParamStore;
use crate::train::{bce_loss, evaluate, l2_penalty, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Log file written next to the parameters by `train`.
pub const TRAIN_LOG: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "pmfnet", version, about = "Pedestrian crossing-intention network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print (or write) a fully populated config file
    Init {
        #[arg(long, default_value = "small")]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the planted-rule synthetic dataset
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch on <data>/train and write a checkpoint.
    /// There is no resume: rerunning restarts from initialization.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print Acc AUC F1 P R for one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Central-difference check of every parameter gradient
    Gradcheck {
        /// Defaults to the tiny preset
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Export temporal attention and modality weights for one sample as CSV
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::InvalidArgument { .. } => EXIT_USAGE,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::UndefinedMetric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn load_config(path: Option<&Path>, preset: Preset) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure {
                code: EXIT_USAGE,
                message: format!("{}: {e}", p.display()),
            })?;
            Ok(RunConfig::preset(preset).apply(&text)?)
        }
        None => Ok(RunConfig::preset(preset)),
    }
}

/// Parse `args` (program name first) and execute.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("writing output: {e}"),
    })
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Init { preset, out: path } => {
            let text = RunConfig::preset(preset).to_text();
            match path {
                Some(p) => fs::write(&p, text).map_err(|e| io_fail(&p, e)),
                None => emit(out, &text),
            }
        }
        Command::Synth { config, out: dir, seed } => {
            let mut cfg = load_config(config.as_deref(), Preset::Small)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            synth_generate(&cfg.synth(), &dir)?;
            emit(
                out,
                &format!(
                    "wrote {} train + {} test samples to {}\n",
                    cfg.synth.n_train,
                    cfg.synth.n_test,
                    dir.display()
                ),
            )
        }
        Command::Train { config, data, out: dir } => {
            let cfg = load_config(config.as_deref(), Preset::Small)?;
            cmd_train(&cfg, data.as_deref().unwrap_or(&cfg.data_dir), &dir, out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ck = load_checkpoint::<f32>(&checkpoint)?;
            let samples = load_dataset(data.join(&split))?;
            let m = evaluate(&ck.params, &ck.config.model, &samples, ck.config.train.threshold)?;
            emit(
                out,
                &format!(
                    "Acc\tAUC\tF1\tP\tR\n{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    m.accuracy, m.auc, m.f1, m.precision, m.recall
                ),
            )
        }
        Command::Gradcheck {
            config,
            tol,
            step,
            inject_fault,
        } => {
            let fault = match inject_fault {
                None => None,
                Some(name) => Some(OpKind::parse(&name).ok_or_else(|| Failure {
                    code: EXIT_USAGE,
                    message: format!("unknown op {name:?} for --inject-fault"),
                })?),
            };
            let cfg = load_config(config.as_deref(), Preset::Tiny)?;
            let report = model_grad_check(&cfg, step, tol, fault)?;
            emit(out, &format_report(&report))?;
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|e| e.path.as_str()).collect();
                let shown = names.len().min(3);
                let more = if names.len() > shown { ", ..." } else { "" };
                Err(Failure {
                    code: EXIT_NUMERIC,
                    message: format!(
                        "gradient check failed for {} parameters ({}{more})",
                        names.len(),
                        names[..shown].join(", ")
                    ),
                })
            }
        }
        Command::DumpAttn {
            checkpoint,
            sample,
            out: dir,
        } => cmd_dump_attn(&checkpoint, &sample, &dir, out),
    }
}

fn cmd_train(cfg: &RunConfig, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let samples = load_dataset(data.join("train"))?;
    let mut store = ParamStore::<f32>::init(&cfg.model.param_specs(), cfg.train.seed);
    let mut log = String::new();
    let mut write_err = None;
    let logs = train(&mut store, &cfg.model, &cfg.train, &samples, |l| {
        let line = format!("{l}\n");
        log.push_str(&line);
        if let Err(e) = emit(out, &line) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let steps = logs.len() * samples.len().div_ceil(cfg.train.batch_size);
    save_checkpoint(dir, cfg, &store, steps as u64)?;
    let p = dir.join(TRAIN_LOG);
    fs::write(&p, log).map_err(|e| io_fail(&p, e))
}

/// Gradient check of the full objective (cross-entropy plus head L2, with a
/// fixed dropout mask) on one synthetic sample in f64.
pub fn model_grad_check(cfg: &RunConfig, step: f64, tol: f64, fault: Option<OpKind>) -> Result<GradCheckReport, Error> {
    let mut synth = cfg.synth();
    synth.n_train = 1;
    let sample = generate_split(&synth, Split::Train)?
        .pop()
        .expect("one sample")
        .cast::<f64>();
    let mut store = ParamStore::<f64>::init(&cfg.model.param_specs(), cfg.train.seed);
    let mode = ForwardMode::Train {
        dropout: cfg.train.dropout,
        seed: cfg.train.seed,
    };
    grad_check(
        &mut store,
        |_| true,
        step,
        tol,
        |g| {
            g.inject_backward_fault(fault);
            let fwd = pmfnet_forward(g, &cfg.model, &sample, mode)?;
            let bce = bce_loss(g, fwd.prob, sample.label)?;
            let l2 = l2_penalty(g, cfg.train.l2_head)?;
            g.add(bce, l2)
        },
    )
}

/// Module name of a parameter path: its first segment.
pub fn module_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

/// Per-parameter lines followed by one summary line per module.
pub fn format_report(report: &GradCheckReport) -> String {
    let mut s = report.to_string();
    let mut modules: Vec<&str> = Vec::new();
    for e in &report.entries {
        let m = module_of(&e.path);
        if !modules.contains(&m) {
            modules.push(m);
        }
    }
    for m in modules {
        let entries = report.entries.iter().filter(|e| module_of(&e.path) == m);
        let (mut worst, mut ok, mut n) = (0f64, true, 0);
        for e in entries {
            worst = worst.max(e.max_rel_error);
            ok &= e.max_rel_error <= report.tol;
            n += 1;
        }
        let status = if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "module {m:<5} {status} params={n} max_rel_err={worst:.3e}");
    }
    let _ = writeln!(
        s,
        "overall {} tol={:e} step={:e}",
        if report.passed() { "PASS" } else { "FAIL" },
        report.tol,
        report.step
    );
    s
}

pub const TEMPORAL_CSV: &str = "temporal_attention.csv";
pub const MODALITY_CSV: &str = "modality_weights.csv";

fn cmd_dump_attn(checkpoint: &Path, sample: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let s = load_sample(sample)?;
    let (_, diag) = predict(&ck.params, &ck.config.model, &s)?;
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;

    let att = &diag.temporal_attention;
    let [layers, heads, n, _] = att.shape().try_into().expect("4-d attention");
    let mut csv = String::from("layer,head,query_frame,key_frame,weight\n");
    for (i, w) in att.data().iter().enumerate() {
        let (l, h, q, k) = (i / (heads * n * n), i / (n * n) % heads, i / n % n, i % n);
        let _ = writeln!(csv, "{l},{h},{q},{k},{w}");
    }
    let p = dir.join(TEMPORAL_CSV);
    fs::write(&p, csv).map_err(|e| io_fail(&p, e))?;

    let header: Vec<String> = MODALITY_NAMES.iter().map(|m| format!("alpha_{m}")).collect();
    let mut csv = format!("frame,{}\n", header.join(","));
    for (f, row) in diag.modality_weights.data().chunks(3).enumerate() {
        let _ = writeln!(csv, "{f},{},{},{}", row[0], row[1], row[2]);
    }
    let p = dir.join(MODALITY_CSV);
    fs::write(&p, csv).map_err(|e| io_fail(&p, e))?;

    let (early, late) = attention_mass(att.data(), layers * heads * n, n);
    let q = n.div_ceil(4);
    emit(
        out,
        &format!(
            "mean attention per key frame: first {q} frames {early:.4}, last {q} frames {late:.4} ({})\n",
            if late > early { "late > early" } else { "late <= early" }
        ),
    )
}

/// Mean weight on the first and on the last `ceil(n/4)` key frames, over
/// `rows` attention rows of length `n`.
pub fn attention_mass(weights: &[f32], rows: usize, n: usize) -> (f64, f64) {
    let q = n.div_ceil(4);
    let (mut early, mut late) = (0f64, 0f64);
    for row in weights.chunks(n) {
        early += row[..q].iter().map(|&w| f64::from(w)).sum::<f64>();
        late += row[n - q..].iter().map(|&w| f64::from(w)).sum::<f64>();
    }
    let denom = (rows * q) as f64;
    (early / denom, late / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(Failure::from(Error::config("k", "m")).code, EXIT_USAGE);
        assert_eq!(Failure::from(Error::MissingModality("x".into())).code, EXIT_DATA);
        assert_eq!(
            Failure::from(Error::NonFiniteLoss { context: "c".into() }).code,
            EXIT_NUMERIC
        );
    }

    #[test]
    fn attention_mass_of_uniform_rows() {
        let w = vec![0.25f32; 16];
        let (e, l) = attention_mass(&w, 4, 4);
        assert_eq!((e, l), (0.25, 0.25));
    }

    #[test]
    fn usage_error_exits_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["pmfnet", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert!(!e.is_empty());
    }
}
