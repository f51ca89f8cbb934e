//! Experiment runner: training loop, evaluation modes, metrics CSV and
//! checkpoints.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_dataset_cache, load_idx, make_gaussian_mixture, sample_batch, split_microbatches, DataError, Dataset, SamplerSpec};
use crate::error::Error;
use crate::network::{aggregate_gradients, predictions, softmax_xent, Mlp, Optimizer, ParamEma};
use crate::rng::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{DatasetSpec, EvalMode, ExperimentConfig};

/// RNG sub-streams of a run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config-resolved.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.brnl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-finite training loss at step {step} (layer gradient norms {grad_norms:?})")]
    NonFinite { step: u64, loss: f64, grad_norms: Vec<f64> },
}

impl HarnessError {
    /// 1 for anything the user can fix in their input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Data(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// One line of `metrics.csv`. Empty fields mean "not measured".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training loss over the steps since the previous row.
    pub train_loss: Option<f64>,
    pub val_acc_moving_avg: Option<f64>,
    pub val_acc_train_mode: Option<f64>,
    pub val_acc_ema: Option<f64>,
    /// Mean fraction of clipped `r` / `d` entries since the previous row.
    pub clip_frac_r: Option<f64>,
    pub clip_frac_d: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn accuracy(&self, mode: &EvalMode) -> Option<f64> {
        match mode {
            EvalMode::MovingAvg => self.val_acc_moving_avg,
            EvalMode::TrainMode { .. } => self.val_acc_train_mode,
            EvalMode::EmaWeights => self.val_acc_ema,
        }
    }

    /// The row with the wall-clock column blanked, for reproducibility checks.
    pub fn without_time(&self) -> MetricsRow {
        MetricsRow { wall_ms: 0, ..self.clone() }
    }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, HarnessError> {
    Ok(match spec {
        DatasetSpec::Mixture { classes, per_class, width, class_sep, seed } => {
            make_gaussian_mixture(*classes, *per_class, *width, *class_sep, *seed)?
        }
        DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
        DatasetSpec::Cache { path } => load_dataset_cache(path)?,
    })
}

/// Train and validation sets for a config.
pub fn load_split(config: &ExperimentConfig) -> Result<(Dataset, Dataset), HarnessError> {
    let ds = load_dataset(&config.dataset)?;
    Ok(ds.train_validation_split(config.train_fraction)?)
}

/// Validation accuracy of `net` under one evaluation mode.
///
/// Train-mode evaluation draws `ceil(n / (L k))` clustered batches from the
/// validation set with a generator derived from `seed`, so repeated calls
/// see the same batches.
pub fn evaluate(net: &Mlp, ema: Option<&ParamEma>, validation: &Dataset, mode: &EvalMode, seed: u64) -> Result<f64, HarnessError> {
    let accuracy = |pred: &[usize], labels: &[usize]| {
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
    };
    match mode {
        EvalMode::MovingAvg => {
            let logits = net.forward_infer(&validation.features)?;
            Ok(accuracy(&predictions(&logits)?, &validation.labels))
        }
        EvalMode::EmaWeights => {
            let ema = ema.ok_or_else(|| HarnessError::Config("ema_weights evaluation needs a parameter EMA".into()))?;
            let shadow = ema.apply_to(net)?;
            let logits = shadow.forward_infer(&validation.features)?;
            Ok(accuracy(&predictions(&logits)?, &validation.labels))
        }
        EvalMode::TrainMode { labels_per_batch, per_label } => {
            let spec = SamplerSpec::clustered(*labels_per_batch, *per_label);
            let mut rng = Rng::derive(seed, STREAM_EVAL);
            let n_batches = validation.len().div_ceil(spec.batch_size);
            let (mut correct, mut total) = (0usize, 0usize);
            for _ in 0..n_batches {
                let batch = sample_batch(validation, &spec, &mut rng)?;
                let pred = predictions(&net.forward_trainmode(&batch.features)?)?;
                correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                total += batch.len();
            }
            Ok(correct as f64 / total as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

impl RunOutput {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("a run always has the step-0 row")
    }
}

struct Window {
    loss: f64,
    clip_r: f64,
    clip_d: f64,
    steps: u64,
}

impl Window {
    fn new() -> Self {
        Window { loss: 0.0, clip_r: 0.0, clip_d: 0.0, steps: 0 }
    }

    fn mean(&self, v: f64) -> Option<f64> {
        (self.steps > 0).then(|| v / self.steps as f64)
    }
}

/// Runs one seed of an experiment; writes `metrics.csv`,
/// `config-resolved.json` and `checkpoint.brnl` into `out_dir` when given.
///
/// Per step: sample a batch, split it into microbatches, run a training
/// forward/backward per microbatch (each updating the moving statistics),
/// average the gradients, take an optimizer step and update the parameter EMA.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let (train, validation) = load_split(config)?;
    run_on(config, seed, &train, &validation, out_dir)
}

/// As [`run_experiment`] on already-loaded data.
pub fn run_on(
    config: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    validation: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunOutput, HarnessError> {
    let start = Instant::now();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut resolved = config.clone();
        resolved.seeds = vec![seed];
        resolved.output_dir = dir.to_path_buf();
        let json = serde_json::to_string_pretty(&resolved).expect("config serializes");
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, json + "\n").map_err(io_err(&p))?;
    }

    let spec = config.network_spec(train.width(), train.classes);
    let mut net = Mlp::new(spec, &mut Rng::derive(seed, STREAM_INIT))?;
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut ema = ParamEma::new(&net, config.ema_decay)?;
    let mut sampler_rng = Rng::derive(seed, STREAM_SAMPLER);

    let mut rows = Vec::new();
    let mut window = Window::new();
    let eval_row = |net: &Mlp, ema: &ParamEma, step: u64, window: &Window| -> Result<MetricsRow, HarnessError> {
        let mut row = MetricsRow {
            step,
            train_loss: window.mean(window.loss),
            val_acc_moving_avg: None,
            val_acc_train_mode: None,
            val_acc_ema: None,
            clip_frac_r: window.mean(window.clip_r),
            clip_frac_d: window.mean(window.clip_d),
            wall_ms: 0,
        };
        for mode in &config.eval_modes {
            let acc = Some(evaluate(net, Some(ema), validation, mode, seed)?);
            match mode {
                EvalMode::MovingAvg => row.val_acc_moving_avg = acc,
                EvalMode::TrainMode { .. } => row.val_acc_train_mode = acc,
                EvalMode::EmaWeights => row.val_acc_ema = acc,
            }
        }
        row.wall_ms = start.elapsed().as_millis() as u64;
        Ok(row)
    };
    rows.push(eval_row(&net, &ema, 0, &window)?);

    let mut abort = None;
    for step in 0..config.total_steps {
        let batch = sample_batch(train, &config.sampler, &mut sampler_rng)?;
        let micro = split_microbatches(&batch, &config.microbatch)?;
        let mut grad_sets = Vec::with_capacity(micro.len());
        let (mut loss, mut clip_r, mut clip_d) = (0.0, 0.0, 0.0);
        for mb in &micro {
            let (logits, cache) = net.forward_train(&mb.features, step)?;
            let (l, d_logits) = softmax_xent(&logits, &mb.labels)?;
            grad_sets.push(net.backward(&cache, &d_logits)?);
            let (cr, cd) = cache.clip_fractions();
            loss += l;
            clip_r += cr;
            clip_d += cd;
        }
        let k = micro.len() as f64;
        loss /= k;
        let grads = aggregate_gradients(&grad_sets)?;
        if !loss.is_finite() || !grads.is_finite() {
            abort = Some(HarnessError::NonFinite { step: step + 1, loss, grad_norms: net.grad_norms(&grads) });
            break;
        }
        optimizer.step(&mut net.params_mut(), &grads)?;
        ema.update(&net.params())?;

        window.loss += loss;
        window.clip_r += clip_r / k;
        window.clip_d += clip_d / k;
        window.steps += 1;
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.total_steps {
            rows.push(eval_row(&net, &ema, done, &window)?);
            window = Window::new();
        }
    }

    if let Some(dir) = out_dir {
        if let Some(HarnessError::NonFinite { step, loss, grad_norms }) = &abort {
            rows.push(MetricsRow {
                step: *step,
                train_loss: Some(*loss),
                val_acc_moving_avg: None,
                val_acc_train_mode: None,
                val_acc_ema: None,
                clip_frac_r: None,
                clip_frac_d: None,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            let p = dir.join("abort.json");
            let diag = serde_json::json!({ "step": step, "loss": loss.to_string(), "grad_norms": grad_norms });
            fs::write(&p, diag.to_string() + "\n").map_err(io_err(&p))?;
        }
        write_metrics(&rows, &dir.join(METRICS_FILE))?;
    }
    if let Some(e) = abort {
        return Err(e);
    }
    let checkpoint = Checkpoint { net, ema: Some(ema) };
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, dir.join(CHECKPOINT_FILE))?;
    }
    Ok(RunOutput { rows, checkpoint })
}

/// Output directory of one seed: `out` itself for single-seed runs, `out/seed-N` otherwise.
pub fn seed_dir(out: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    }
}

type LossAndAccuracy = (Option<f64>, Option<f64>);

/// Joins several runs' `metrics.csv` on `step`: one `train_loss` and one
/// `val_acc` column per run (the first configured accuracy column present).
pub fn compare_runs(runs: &[PathBuf]) -> Result<String, HarnessError> {
    if runs.is_empty() {
        return Err(HarnessError::Config("compare needs at least one run directory".into()));
    }
    let mut names: Vec<String> = Vec::new();
    let mut table: BTreeMap<u64, Vec<LossAndAccuracy>> = BTreeMap::new();
    for (j, dir) in runs.iter().enumerate() {
        let rows = read_metrics(&dir.join(METRICS_FILE))?;
        let base = dir.file_name().map_or_else(|| format!("run{j}"), |n| n.to_string_lossy().into_owned());
        let name = if names.contains(&base) { format!("{base}_{j}") } else { base };
        names.push(name);
        for r in rows {
            let acc = r.val_acc_moving_avg.or(r.val_acc_train_mode).or(r.val_acc_ema);
            let entry = table.entry(r.step).or_insert_with(|| vec![(None, None); runs.len()]);
            entry[j] = (r.train_loss, acc);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    for n in &names {
        header.push(format!("{n}_train_loss"));
        header.push(format!("{n}_val_acc"));
    }
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for (step, cols) in table {
        let mut rec = vec![step.to_string()];
        for (l, a) in cols {
            rec.push(fmt(l));
            rec.push(fmt(a));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NormMode;

    fn tiny(norm: NormMode, steps: u64) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Mixture { classes: 3, per_class: 40, width: 4, class_sep: 3.0, seed: 0 },
            hidden: vec![8],
            norm,
            total_steps: steps,
            eval_every: 5,
            sampler: SamplerSpec::iid(8),
            microbatch: crate::data::Microbatching::whole(8),
            schedule: crate::norm::CorrectionSchedule { warmup_steps: 2, r_ramp_end: 6, d_ramp_end: 4, r_max_final: 3.0, d_max_final: 5.0 },
            eval_modes: vec![EvalMode::MovingAvg, EvalMode::TrainMode { labels_per_batch: 4, per_label: 2 }, EvalMode::EmaWeights],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_steps_gives_only_initial_row() {
        let out = run_experiment(&tiny(NormMode::BatchNorm, 0), 1, None).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].step, 0);
        assert_eq!(out.rows[0].train_loss, None);
    }

    #[test]
    fn rows_at_eval_points_and_end() {
        let out = run_experiment(&tiny(NormMode::BatchRenorm, 12), 1, None).unwrap();
        let steps: Vec<u64> = out.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 12]);
        for r in &out.rows[1..] {
            for a in [r.val_acc_moving_avg, r.val_acc_train_mode, r.val_acc_ema] {
                let a = a.unwrap();
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn writes_outputs_and_compares() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("bn");
        let b = dir.path().join("brn");
        run_experiment(&tiny(NormMode::BatchNorm, 10), 1, Some(&a)).unwrap();
        run_experiment(&tiny(NormMode::BatchRenorm, 10), 1, Some(&b)).unwrap();
        for f in [METRICS_FILE, CONFIG_FILE, CHECKPOINT_FILE] {
            assert!(a.join(f).exists());
        }
        let rows = read_metrics(&a.join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 3);
        let merged = compare_runs(&[a, b]).unwrap();
        let mut lines = merged.lines();
        assert_eq!(lines.next().unwrap(), "step,bn_train_loss,bn_val_acc,brn_train_loss,brn_val_acc");
        assert_eq!(merged.lines().count(), 4);
    }

    #[test]
    fn nonfinite_loss_aborts_with_diagnostic() {
        let mut cfg = tiny(NormMode::None, 10);
        cfg.optimizer = crate::network::OptimizerConfig::sgd(1e300);
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, 1, Some(dir.path())).unwrap_err();
        assert!(matches!(err, HarnessError::NonFinite { .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(dir.path().join("abort.json").exists());
        let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert!(!rows.last().unwrap().train_loss.unwrap().is_finite());
    }
}
