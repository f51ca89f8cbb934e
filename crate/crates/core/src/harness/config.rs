//! Experiment configuration: INI-style sections of `key = value` lines.
//!
//! Every key is optional and falls back to the desk-scale defaults below;
//! unknown sections or keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{Microbatching, SamplerSpec, SamplingMode, SplitRule};
use crate::network::{NetworkSpec, NormMode, OptimizerConfig, OptimizerKind};
use crate::norm::CorrectionSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Mixture { classes: usize, per_class: usize, width: usize, class_sep: f64, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf },
    Cache { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    /// Per-example inference with the moving statistics.
    MovingAvg,
    /// Minibatch statistics over label-clustered validation batches.
    TrainMode { labels_per_batch: usize, per_label: usize },
    /// Inference with the parameter EMA.
    EmaWeights,
}

impl EvalMode {
    pub fn column(&self) -> &'static str {
        match self {
            EvalMode::MovingAvg => "val_acc_moving_avg",
            EvalMode::TrainMode { .. } => "val_acc_train_mode",
            EvalMode::EmaWeights => "val_acc_ema",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train_fraction: f64,
    pub hidden: Vec<usize>,
    pub norm: NormMode,
    pub learn_gamma: bool,
    pub init_scale: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub schedule: CorrectionSchedule,
    pub sampler: SamplerSpec,
    pub microbatch: Microbatching,
    pub optimizer: OptimizerConfig,
    pub ema_decay: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_modes: Vec<EvalMode>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Mixture { classes: 10, per_class: 5000, width: 16, class_sep: 2.5, seed: 0 },
            train_fraction: 0.8,
            hidden: vec![64, 64],
            norm: NormMode::BatchRenorm,
            learn_gamma: false,
            init_scale: 1.0,
            epsilon: crate::norm::DEFAULT_EPSILON,
            alpha: crate::norm::DEFAULT_ALPHA,
            schedule: CorrectionSchedule::DESK,
            sampler: SamplerSpec { labels_per_batch: 16, per_label: 2, ..SamplerSpec::iid(32) },
            microbatch: Microbatching::whole(32),
            optimizer: OptimizerConfig { momentum: 0.9, ..OptimizerConfig::rmsprop(0.05) },
            ema_decay: 0.999,
            total_steps: 5000,
            eval_every: 500,
            eval_modes: vec![EvalMode::MovingAvg],
            seeds: vec![1],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{field}: {msg}"))
}

struct Section<'a> {
    name: &'a str,
    props: Option<&'a ini::Properties>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| invalid(&format!("{}.{key}", self.name), format!("{v:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| invalid(&format!("{}.{key}", self.name), format!("{s:?}: {e}"))))
                .collect(),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Result<PathBuf, HarnessError> {
        let v = self.raw(key).ok_or_else(|| invalid(&format!("{}.{key}", self.name), "required"))?;
        let p = PathBuf::from(v);
        Ok(if p.is_absolute() { p } else { base.join(p) })
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("dataset", &["kind", "classes", "per_class", "width", "class_sep", "seed", "images", "labels", "path", "train_fraction"]),
    ("network", &["hidden", "norm", "learn_gamma", "init_scale"]),
    ("norm", &["epsilon", "alpha"]),
    ("schedule", &["warmup_steps", "r_ramp_end", "d_ramp_end", "r_max_final", "d_max_final"]),
    ("sampler", &["mode", "batch_size", "labels_per_batch", "per_label"]),
    ("microbatch", &["size", "rule"]),
    ("optimizer", &["kind", "lr", "momentum", "decay", "eps", "ema_decay"]),
    ("train", &["total_steps", "eval_every", "seeds"]),
    ("eval", &["modes", "train_mode_labels", "train_mode_per_label"]),
    ("output", &["dir"]),
];

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| HarnessError::Config(format!("syntax: {e}")))?;
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(invalid(k, "key outside any section"));
                }
                continue;
            };
            let Some((_, keys)) = KNOWN.iter().find(|(s, _)| *s == name) else {
                return Err(HarnessError::Config(format!("unknown section [{name}]")));
            };
            for (k, _) in props.iter() {
                if !keys.contains(&k) {
                    return Err(invalid(&format!("{name}.{k}"), "unknown key"));
                }
            }
        }
        let sec = |name| Section { name, props: ini.section(Some(name)) };
        let d = ExperimentConfig::default();

        let ds = sec("dataset");
        let dataset = match ds.raw("kind").unwrap_or("mixture") {
            "mixture" => DatasetSpec::Mixture {
                classes: ds.parse("classes", 10)?,
                per_class: ds.parse("per_class", 5000)?,
                width: ds.parse("width", 16)?,
                class_sep: ds.parse("class_sep", 2.5)?,
                seed: ds.parse("seed", 0)?,
            },
            "idx" => DatasetSpec::Idx { images: ds.path("images", base)?, labels: ds.path("labels", base)? },
            "cache" => DatasetSpec::Cache { path: ds.path("path", base)? },
            other => return Err(invalid("dataset.kind", format!("unknown kind {other:?}"))),
        };

        let net = sec("network");
        let nrm = sec("norm");
        let sch = sec("schedule");
        let schedule = CorrectionSchedule {
            warmup_steps: sch.parse("warmup_steps", d.schedule.warmup_steps)?,
            r_ramp_end: sch.parse("r_ramp_end", d.schedule.r_ramp_end)?,
            d_ramp_end: sch.parse("d_ramp_end", d.schedule.d_ramp_end)?,
            r_max_final: sch.parse("r_max_final", d.schedule.r_max_final)?,
            d_max_final: sch.parse("d_max_final", d.schedule.d_max_final)?,
        };

        let smp = sec("sampler");
        let mode = match smp.raw("mode").unwrap_or("iid") {
            "iid" => SamplingMode::Iid,
            "label_clustered" | "clustered" => SamplingMode::LabelClustered,
            other => return Err(invalid("sampler.mode", format!("unknown mode {other:?}"))),
        };
        let labels_per_batch = smp.parse("labels_per_batch", 16)?;
        let per_label = smp.parse("per_label", 2)?;
        let default_batch = if mode == SamplingMode::LabelClustered { labels_per_batch * per_label } else { 32 };
        let sampler = SamplerSpec { mode, batch_size: smp.parse("batch_size", default_batch)?, labels_per_batch, per_label };

        let mb = sec("microbatch");
        let rule = match mb.raw("rule").unwrap_or("contiguous") {
            "contiguous" => SplitRule::Contiguous,
            "label_disjoint_halves" => SplitRule::LabelDisjointHalves,
            other => return Err(invalid("microbatch.rule", format!("unknown rule {other:?}"))),
        };
        let default_micro = if rule == SplitRule::LabelDisjointHalves { sampler.batch_size / 2 } else { sampler.batch_size };
        let microbatch = Microbatching { size: mb.parse("size", default_micro)?, rule };

        let opt = sec("optimizer");
        let optimizer = OptimizerConfig {
            kind: opt.parse::<OptimizerKind>("kind", d.optimizer.kind)?,
            lr: opt.parse("lr", d.optimizer.lr)?,
            momentum: opt.parse("momentum", 0.9)?,
            decay: opt.parse("decay", d.optimizer.decay)?,
            eps: opt.parse("eps", d.optimizer.eps)?,
        };

        let tr = sec("train");
        let ev = sec("eval");
        let tm_labels = ev.parse("train_mode_labels", 16)?;
        let tm_per = ev.parse("train_mode_per_label", 2)?;
        let eval_modes = ev
            .list::<String>("modes", vec!["moving_avg".into()])?
            .into_iter()
            .map(|m| match m.as_str() {
                "moving_avg" => Ok(EvalMode::MovingAvg),
                "train_mode" => Ok(EvalMode::TrainMode { labels_per_batch: tm_labels, per_label: tm_per }),
                "ema_weights" => Ok(EvalMode::EmaWeights),
                other => Err(invalid("eval.modes", format!("unknown mode {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let out = sec("output");
        let output_dir = out.raw("dir").map(PathBuf::from).unwrap_or(d.output_dir);

        let cfg = ExperimentConfig {
            dataset,
            train_fraction: ds.parse("train_fraction", d.train_fraction)?,
            hidden: net.list("hidden", d.hidden)?,
            norm: net.parse("norm", d.norm)?,
            learn_gamma: net.parse("learn_gamma", d.learn_gamma)?,
            init_scale: net.parse("init_scale", d.init_scale)?,
            epsilon: nrm.parse("epsilon", d.epsilon)?,
            alpha: nrm.parse("alpha", d.alpha)?,
            schedule,
            sampler,
            microbatch,
            optimizer,
            ema_decay: opt.parse("ema_decay", d.ema_decay)?,
            total_steps: tr.parse("total_steps", d.total_steps)?,
            eval_every: tr.parse("eval_every", d.eval_every)?,
            eval_modes,
            seeds: tr.list("seeds", d.seeds)?,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match &self.dataset {
            DatasetSpec::Mixture { classes, per_class, width, class_sep, .. } => {
                if *classes == 0 || *per_class == 0 || *width == 0 {
                    return Err(invalid("dataset", "mixture counts must be positive"));
                }
                if !(*class_sep >= 0.0) {
                    return Err(invalid("dataset.class_sep", "must be >= 0"));
                }
            }
            DatasetSpec::Idx { images, labels } => {
                for (f, p) in [("dataset.images", images), ("dataset.labels", labels)] {
                    if !p.exists() {
                        return Err(invalid(f, format!("{} does not exist", p.display())));
                    }
                }
            }
            DatasetSpec::Cache { path } => {
                if !path.exists() {
                    return Err(invalid("dataset.path", format!("{} does not exist", path.display())));
                }
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid("dataset.train_fraction", "must be in (0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("network.hidden", "widths must be positive"));
        }
        if !(self.init_scale > 0.0) {
            return Err(invalid("network.init_scale", "must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("norm.epsilon", "must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid("norm.alpha", "must be in (0, 1]"));
        }
        self.schedule.validate().map_err(|e| invalid("schedule", e))?;
        if self.norm == NormMode::BatchRenorm {
            for (field, v) in [
                ("schedule.warmup_steps", self.schedule.warmup_steps),
                ("schedule.r_ramp_end", self.schedule.r_ramp_end),
                ("schedule.d_ramp_end", self.schedule.d_ramp_end),
            ] {
                if v > self.total_steps {
                    return Err(invalid(field, format!("{v} exceeds train.total_steps {}", self.total_steps)));
                }
            }
        }
        self.sampler.validate().map_err(|e| invalid("sampler", e))?;
        let m = self.sampler.batch_size;
        if self.microbatch.size == 0 || !m.is_multiple_of(self.microbatch.size) {
            return Err(invalid("microbatch.size", format!("{} does not divide batch size {m}", self.microbatch.size)));
        }
        if self.norm != NormMode::None && self.microbatch.size < 2 {
            return Err(invalid("microbatch.size", "normalization needs at least 2 examples"));
        }
        if self.microbatch.rule == SplitRule::LabelDisjointHalves
            && (self.sampler.mode != SamplingMode::LabelClustered || self.sampler.per_label != 2 || self.microbatch.size * 2 != m)
        {
            return Err(invalid("microbatch.rule", "label_disjoint_halves needs clustered sampling with per_label = 2 and size = batch_size / 2"));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(invalid("optimizer.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("optimizer.ema_decay", "must be in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(invalid("train.eval_every", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("train.seeds", "need at least one seed"));
        }
        for mode in &self.eval_modes {
            if let EvalMode::TrainMode { labels_per_batch, per_label } = mode {
                if *labels_per_batch == 0 || *per_label == 0 {
                    return Err(invalid("eval.train_mode_labels", "train-mode batches must be non-empty"));
                }
            }
        }
        Ok(())
    }

    /// Network for a dataset of the given input width and class count.
    pub fn network_spec(&self, input_width: usize, classes: usize) -> NetworkSpec {
        let mut widths = vec![input_width];
        widths.extend(&self.hidden);
        widths.push(classes);
        let mut spec = NetworkSpec::uniform(widths, self.norm);
        spec.learn_gamma = self.learn_gamma;
        spec.epsilon = self.epsilon;
        spec.alpha = self.alpha;
        spec.schedule = self.schedule;
        spec.init_scale = self.init_scale;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = ExperimentConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn parses_sections() {
        let text = "
[network]
hidden = 8, 4
norm = batchnorm

[sampler]
mode = label_clustered
labels_per_batch = 8
per_label = 2

[microbatch]
rule = label_disjoint_halves

[train]
total_steps = 100
seeds = 3, 4

[eval]
modes = moving_avg, train_mode
train_mode_labels = 25
";
        let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.norm, NormMode::BatchNorm);
        assert_eq!(cfg.sampler.batch_size, 16);
        assert_eq!(cfg.microbatch.size, 8);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.eval_modes[1], EvalMode::TrainMode { labels_per_batch: 25, per_label: 2 });
    }

    #[test]
    fn anchor_past_total_names_field() {
        let text = "[train]\ntotal_steps = 1000\n[schedule]\nr_ramp_end = 2000\nd_ramp_end = 900\n";
        let err = ExperimentConfig::parse(text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("schedule.r_ramp_end"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "[network]\nwidth = 3\n",
            "[nope]\n",
            "[train]\ntotal_steps = lots\n",
            "[microbatch]\nsize = 5\n",
            "[dataset]\nkind = idx\nimages = /nonexistent/a\nlabels = /nonexistent/b\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text, Path::new(".")), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
