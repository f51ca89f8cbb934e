use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use renorm::gradcheck::{self, CheckMode, FdReport};
use renorm::harness::{self, compare_runs, load_checkpoint, load_split, run_experiment, seed_dir, EvalMode, ExperimentConfig, HarnessError};
use renorm::network::NormMode;

#[derive(Parser)]
#[command(name = "renorm", version, about = "Batch renormalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed and write metrics, resolved config and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic backward passes. With no
    /// flags runs the full default suite.
    Gradcheck {
        /// bn, brn-unclipped or brn-clipped.
        #[arg(long)]
        mode: Option<CheckMode>,
        /// Input shape such as `4x3` or `2x3x2x2`.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<Shape>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validation accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// moving_avg, train_mode or ema_weights.
        #[arg(long, default_value = "moving_avg")]
        mode: String,
        /// Seed for the train-mode batch draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge the metrics of several runs into one CSV, joined on step.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct Shape(Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    let dims: Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
    match dims {
        Ok(d) if (d.len() == 2 || d.len() == 4) && d[0] >= 2 && d.iter().all(|&n| n > 0) => Ok(Shape(d)),
        _ => Err(format!("bad shape {s:?}, expected rank 2 or 4 with at least 2 rows, e.g. 4x3")),
    }
}

fn print_reports(reports: &[FdReport]) -> bool {
    for r in reports {
        println!("{r}");
    }
    for r in reports {
        println!("{}", r.to_json_line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", reports.len(), failed);
    failed == 0
}

fn gradcheck_cmd(mode: Option<CheckMode>, shape: Option<Shape>, seed: Option<u64>) -> Result<ExitCode, HarnessError> {
    let reports = if mode.is_none() && shape.is_none() && seed.is_none() {
        gradcheck::default_suite()?
    } else {
        let modes = mode.map_or_else(|| CheckMode::ALL.to_vec(), |m| vec![m]);
        let shapes = shape.map_or_else(|| vec![vec![4, 3], vec![2, 3, 2, 2]], |s| vec![s.0]);
        let seeds = seed.map_or_else(|| vec![7, 8, 9], |s| vec![s]);
        let mut out = Vec::new();
        for s in &shapes {
            for &m in &modes {
                for &sd in &seeds {
                    out.push(gradcheck::check_norm_backward(s, m, sd)?);
                }
            }
        }
        out
    };
    Ok(if print_reports(&reports) { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn train_cmd(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode, HarnessError> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    for &s in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, s, cfg.seeds.len());
        let run = run_experiment(&cfg, s, Some(&dir))?;
        let last = run.final_row();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "seed {s}: step {} loss {} acc moving_avg {} train_mode {} ema {} -> {}",
            last.step,
            fmt(last.train_loss),
            fmt(last.val_acc_moving_avg),
            fmt(last.val_acc_train_mode),
            fmt(last.val_acc_ema),
            dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(checkpoint: PathBuf, config: PathBuf, mode: String, seed: u64) -> Result<ExitCode, HarnessError> {
    let cfg = ExperimentConfig::load(&config)?;
    let mode = match mode.as_str() {
        "moving_avg" => EvalMode::MovingAvg,
        "ema_weights" => EvalMode::EmaWeights,
        "train_mode" => cfg
            .eval_modes
            .iter()
            .find(|m| matches!(m, EvalMode::TrainMode { .. }))
            .cloned()
            .unwrap_or(EvalMode::TrainMode { labels_per_batch: cfg.sampler.labels_per_batch, per_label: cfg.sampler.per_label }),
        other => return Err(HarnessError::Config(format!("--mode: unknown evaluation mode {other:?}"))),
    };
    let ck = load_checkpoint(&checkpoint)?;
    let (_, validation) = load_split(&cfg)?;
    if ck.net.input_width() != validation.width() || ck.net.spec.classes() != validation.classes {
        return Err(HarnessError::Config("checkpoint does not match the config's dataset shape".into()));
    }
    if ck.net.spec.norms.iter().all(|n| *n == NormMode::None) && matches!(mode, EvalMode::TrainMode { .. }) {
        eprintln!("note: model has no normalization layers; train_mode equals moving_avg");
    }
    let acc = harness::evaluate(&ck.net, ck.ema.as_ref(), &validation, &mode, seed)?;
    println!("{}\t{acc}", mode.column());
    Ok(ExitCode::SUCCESS)
}

fn compare_cmd(runs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<ExitCode, HarnessError> {
    let merged = compare_runs(&runs)?;
    match out {
        Some(p) => std::fs::write(&p, merged).map_err(|source| HarnessError::Io { path: p.display().to_string(), source })?,
        None => print!("{merged}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out } => train_cmd(config, seed, out),
        Command::Gradcheck { mode, shape, seed } => gradcheck_cmd(mode, shape, seed),
        Command::Eval { checkpoint, config, mode, seed } => eval_cmd(checkpoint, config, mode, seed),
        Command::Compare { runs, out } => compare_cmd(runs, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
