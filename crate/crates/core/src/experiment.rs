//! Experiment configs, run dispatch, CSV output and seed summaries.
//!
//! Config files are flat `key = value` lines; `#` starts a comment and list
//! keys (`strategy`, `ablation_schedule`, `grid`) may repeat.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::idx::{read_idx_images, read_idx_labels};
use crate::linalg::{gaussian_matrix, mix_seed, SeededRng};
use crate::lora::{init_with_angle, BInit, InitSpec, UpdateSchedule};
use crate::sim::{csv_num, run_federated, AggregationStrategy, ClassifierFedTask, FedConfig, LinearFedTask, TrainingTrace};
use crate::task::{
    client_variance, gen_class_clusters, split_by_label, split_dirichlet, ClusterSpec, LabeledShard, LinearTask, SampleMode,
};
use crate::theory::{altmin_gd, ffa_heter_loss_formula, ffa_homog_empirical_loss, ffa_homog_predicted_loss, write_theory_csv, TheoryRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    CompareProtocols,
    TheoryHomog,
    TheoryHeter,
    FfaMonteCarlo,
    NonlinearToy,
    AblationSchedule,
    AblationLocalSteps,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::CompareProtocols,
        ExperimentKind::TheoryHomog,
        ExperimentKind::TheoryHeter,
        ExperimentKind::FfaMonteCarlo,
        ExperimentKind::NonlinearToy,
        ExperimentKind::AblationSchedule,
        ExperimentKind::AblationLocalSteps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CompareProtocols => "compare-protocols",
            ExperimentKind::TheoryHomog => "theory-homog",
            ExperimentKind::TheoryHeter => "theory-heter",
            ExperimentKind::FfaMonteCarlo => "ffa-monte-carlo",
            ExperimentKind::NonlinearToy => "nonlinear-toy",
            ExperimentKind::AblationSchedule => "ablation-schedule",
            ExperimentKind::AblationLocalSteps => "ablation-local-steps",
        }
    }

    fn is_federated(self) -> bool {
        matches!(
            self,
            ExperimentKind::CompareProtocols
                | ExperimentKind::NonlinearToy
                | ExperimentKind::AblationSchedule
                | ExperimentKind::AblationLocalSteps
        )
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Validation { field: "kind".into(), msg: format!("unknown experiment kind `{}`", s.trim()) })
    }
}

/// Workload behind a federated experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Rank-1 linear regression (homogeneous when `gamma = 0`).
    Linear,
    /// Synthetic class clusters with a two-layer ReLU classifier.
    Clusters,
    /// IDX image files with a two-layer ReLU classifier.
    Mnist,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Linear => "linear",
            TaskKind::Clusters => "clusters",
            TaskKind::Mnist => "mnist",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(TaskKind::Linear),
            "clusters" => Ok(TaskKind::Clusters),
            "mnist" => Ok(TaskKind::Mnist),
            other => Err(Error::Validation { field: "task".into(), msg: format!("unknown task `{other}`") }),
        }
    }
}

/// Paths of the four IDX files.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub task: TaskKind,
    pub strategies: Vec<AggregationStrategy>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub record_timing: bool,

    // federated run
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub rank: usize,
    pub alpha: f64,
    /// Overrides RoLoRA's default `[B, A]` cadence.
    pub schedule: Option<UpdateSchedule>,

    // linear task and theory
    pub d: usize,
    pub n_clients: usize,
    pub m: usize,
    pub b_norm: f64,
    pub gamma: f64,
    pub delta0: Vec<f64>,
    pub mode: SampleMode,
    pub exact_b: bool,
    pub iterations: usize,
    pub trials: usize,

    // classifier task
    pub n_classes: usize,
    pub signal_dim: usize,
    pub margin: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub labels_per_client: usize,
    pub dirichlet_alpha: Option<f64>,
    /// Std of the frozen output layer entries.
    pub out_std: f64,
    /// Std of the initial `B`; `None` means zero for linear tasks and
    /// `1/√r` for classifiers.
    pub b_init_std: Option<f64>,
    pub mnist: Option<MnistPaths>,
    /// Keep only the first `n` training images (0 keeps all).
    pub train_limit: usize,

    // ablations
    pub ablation_schedules: Vec<UpdateSchedule>,
    /// `(Q, T)` cells for the local-steps sweep.
    pub grid: Vec<(usize, usize)>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let federated_defaults = vec![AggregationStrategy::RoLoRA, AggregationStrategy::FfaLoRA, AggregationStrategy::FedAvgLoRA];
        Self {
            kind,
            task: if kind == ExperimentKind::NonlinearToy { TaskKind::Clusters } else { TaskKind::Linear },
            strategies: if kind.is_federated() { federated_defaults } else { Vec::new() },
            seeds: vec![1],
            out_dir: PathBuf::from("out"),
            workers: 1,
            record_timing: false,
            rounds: 20,
            local_steps: 1,
            batch_size: 64,
            eta: 0.01,
            rank: 1,
            alpha: 1.0,
            schedule: None,
            d: 20,
            n_clients: 10,
            m: 100,
            b_norm: 1.0,
            gamma: 0.0,
            delta0: vec![0.5],
            mode: SampleMode::FiniteSample,
            exact_b: false,
            iterations: 20,
            trials: 1000,
            n_classes: 10,
            signal_dim: 32,
            margin: 3.0,
            noise: 1.0,
            train_per_class: 100,
            test_per_class: 100,
            labels_per_client: 1,
            dirichlet_alpha: None,
            out_std: 1.0,
            b_init_std: None,
            mnist: None,
            train_limit: 0,
            ablation_schedules: Vec::new(),
            grid: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Validation { field: field.into(), msg: msg.into() });
        if self.seeds.is_empty() {
            return bad("seeds", "seed list is empty");
        }
        for (field, v) in [
            ("workers", self.workers),
            ("local_steps", self.local_steps),
            ("batch_size", self.batch_size),
            ("rank", self.rank),
            ("d", self.d),
            ("n_clients", self.n_clients),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1");
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be positive");
        }
        if self.b_init_std.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return bad("b_init_std", "must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if self.delta0.is_empty() || self.delta0.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return bad("delta0", "angles must lie in (0, 1)");
        }
        if self.kind.is_federated() {
            if self.kind != ExperimentKind::AblationSchedule && self.strategies.is_empty() {
                return bad("strategy", "at least one strategy is required");
            }
            if self.task != TaskKind::Mnist && self.rank > self.d {
                return bad("rank", "rank exceeds d");
            }
            if self.kind == ExperimentKind::NonlinearToy && self.task == TaskKind::Linear {
                return bad("task", "nonlinear-toy needs a classifier task");
            }
            if self.task == TaskKind::Mnist && self.mnist.is_none() {
                return bad("mnist_train_images", "mnist task needs all four IDX paths");
            }
            if let Some(s) = &self.schedule {
                AggregationStrategy::RoLoRA.check_schedule(s)?;
            }
            for s in &self.strategies {
                let sched = self.schedule_for(*s);
                s.check_schedule(&sched)?;
            }
        }
        match self.kind {
            ExperimentKind::AblationSchedule if self.ablation_schedules.is_empty() => {
                bad("ablation_schedule", "at least one schedule is required")
            }
            ExperimentKind::AblationLocalSteps if self.grid.is_empty() => bad("grid", "at least one QxT cell is required"),
            ExperimentKind::FfaMonteCarlo if self.trials < 100 => bad("trials", "Monte Carlo needs at least 100 trials"),
            ExperimentKind::FfaMonteCarlo | ExperimentKind::TheoryHomog if self.m < 3 => bad("m", "need at least 3 samples"),
            _ => Ok(()),
        }
    }

    fn schedule_for(&self, s: AggregationStrategy) -> UpdateSchedule {
        match (&self.schedule, s) {
            (Some(custom), AggregationStrategy::RoLoRA) => custom.clone(),
            _ => s.default_schedule(),
        }
    }

    /// Federated settings for one run.
    pub fn fed_config(&self, strategy: AggregationStrategy, seed: u64) -> FedConfig {
        let mut cfg = FedConfig::new(strategy, self.rounds, self.rank, seed);
        cfg.local_steps = self.local_steps;
        cfg.batch_size = self.batch_size;
        cfg.eta = self.eta;
        cfg.schedule = self.schedule_for(strategy);
        let b_std = match (self.b_init_std, self.task) {
            (Some(s), _) => s,
            (None, TaskKind::Linear) => 0.0,
            (None, _) => 1.0 / (self.rank as f64).sqrt(),
        };
        let b_init = if b_std > 0.0 { BInit::Gaussian { std: b_std } } else { BInit::Zero };
        cfg.init = InitSpec { alpha: self.alpha, b_init, ..InitSpec::standard(mix_seed(seed, &[4])) };
        cfg.record_timing = self.record_timing;
        cfg
    }

    /// Inverse of [`parse_config`]: every field as a `key = value` line.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        kv("kind", self.kind.name().into());
        kv("task", self.task.name().into());
        for st in &self.strategies {
            kv("strategy", st.name().into());
        }
        kv("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        kv("out", self.out_dir.display().to_string());
        kv("workers", self.workers.to_string());
        kv("record_timing", self.record_timing.to_string());
        kv("rounds", self.rounds.to_string());
        kv("local_steps", self.local_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eta", self.eta.to_string());
        kv("rank", self.rank.to_string());
        kv("alpha", self.alpha.to_string());
        if let Some(sc) = &self.schedule {
            kv("schedule", sc.to_string());
        }
        kv("d", self.d.to_string());
        kv("n_clients", self.n_clients.to_string());
        kv("m", self.m.to_string());
        kv("b_norm", self.b_norm.to_string());
        kv("gamma", self.gamma.to_string());
        kv("delta0", join(&self.delta0));
        kv("mode", if self.mode == SampleMode::Population { "population" } else { "finite" }.into());
        kv("exact_b", self.exact_b.to_string());
        kv("iterations", self.iterations.to_string());
        kv("trials", self.trials.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("signal_dim", self.signal_dim.to_string());
        kv("margin", self.margin.to_string());
        kv("noise", self.noise.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("labels_per_client", self.labels_per_client.to_string());
        if let Some(a) = self.dirichlet_alpha {
            kv("dirichlet_alpha", a.to_string());
        }
        kv("out_std", self.out_std.to_string());
        if let Some(b) = self.b_init_std {
            kv("b_init_std", b.to_string());
        }
        if let Some(p) = &self.mnist {
            kv("mnist_train_images", p.train_images.display().to_string());
            kv("mnist_train_labels", p.train_labels.display().to_string());
            kv("mnist_test_images", p.test_images.display().to_string());
            kv("mnist_test_labels", p.test_labels.display().to_string());
        }
        kv("train_limit", self.train_limit.to_string());
        for sc in &self.ablation_schedules {
            kv("ablation_schedule", sc.to_string());
        }
        for (q, t) in &self.grid {
            kv("grid", format!("{q}x{t}"));
        }
        s
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Parse { line, msg: format!("cannot parse `{v}` for `{key}`") })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_value(line, key, x.trim())).collect()
}

/// Parses and validates a config. Syntax errors carry the line number;
/// semantic errors name the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries = Vec::new();
    let mut kind = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, found `{content}`") })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "kind" {
            kind = Some(v.parse::<ExperimentKind>()?);
        } else {
            entries.push((line, k.to_string(), v.to_string()));
        }
    }
    let kind = kind.ok_or_else(|| Error::Validation { field: "kind".into(), msg: "missing experiment kind".into() })?;
    let mut cfg = ExperimentConfig::new(kind);
    let mut strategies = Vec::new();
    let mut mnist = [None, None, None, None];

    for (line, k, v) in entries {
        let v = v.as_str();
        match k.as_str() {
            "task" => cfg.task = v.parse()?,
            "strategy" => strategies.push(v.parse::<AggregationStrategy>()?),
            "seeds" => cfg.seeds = parse_list(line, &k, v)?,
            "out" => cfg.out_dir = PathBuf::from(v),
            "workers" => cfg.workers = parse_value(line, &k, v)?,
            "record_timing" => cfg.record_timing = parse_value(line, &k, v)?,
            "rounds" => cfg.rounds = parse_value(line, &k, v)?,
            "local_steps" => cfg.local_steps = parse_value(line, &k, v)?,
            "batch_size" => cfg.batch_size = parse_value(line, &k, v)?,
            "eta" => cfg.eta = parse_value(line, &k, v)?,
            "rank" => cfg.rank = parse_value(line, &k, v)?,
            "alpha" => cfg.alpha = parse_value(line, &k, v)?,
            "schedule" => {
                cfg.schedule = Some(v.parse().map_err(|e: Error| Error::Validation { field: "schedule".into(), msg: e.to_string() })?)
            }
            "d" => cfg.d = parse_value(line, &k, v)?,
            "n_clients" => cfg.n_clients = parse_value(line, &k, v)?,
            "m" => cfg.m = parse_value(line, &k, v)?,
            "b_norm" => cfg.b_norm = parse_value(line, &k, v)?,
            "gamma" => cfg.gamma = parse_value(line, &k, v)?,
            "delta0" => cfg.delta0 = parse_list(line, &k, v)?,
            "mode" => {
                cfg.mode = match v {
                    "finite" => SampleMode::FiniteSample,
                    "population" => SampleMode::Population,
                    _ => return Err(Error::Validation { field: "mode".into(), msg: format!("expected finite or population, got `{v}`") }),
                }
            }
            "exact_b" => cfg.exact_b = parse_value(line, &k, v)?,
            "iterations" => cfg.iterations = parse_value(line, &k, v)?,
            "trials" => cfg.trials = parse_value(line, &k, v)?,
            "n_classes" => cfg.n_classes = parse_value(line, &k, v)?,
            "signal_dim" => cfg.signal_dim = parse_value(line, &k, v)?,
            "margin" => cfg.margin = parse_value(line, &k, v)?,
            "noise" => cfg.noise = parse_value(line, &k, v)?,
            "train_per_class" => cfg.train_per_class = parse_value(line, &k, v)?,
            "test_per_class" => cfg.test_per_class = parse_value(line, &k, v)?,
            "labels_per_client" => cfg.labels_per_client = parse_value(line, &k, v)?,
            "dirichlet_alpha" => cfg.dirichlet_alpha = Some(parse_value(line, &k, v)?),
            "out_std" => cfg.out_std = parse_value(line, &k, v)?,
            "b_init_std" => cfg.b_init_std = Some(parse_value(line, &k, v)?),
            "mnist_train_images" => mnist[0] = Some(PathBuf::from(v)),
            "mnist_train_labels" => mnist[1] = Some(PathBuf::from(v)),
            "mnist_test_images" => mnist[2] = Some(PathBuf::from(v)),
            "mnist_test_labels" => mnist[3] = Some(PathBuf::from(v)),
            "train_limit" => cfg.train_limit = parse_value(line, &k, v)?,
            "ablation_schedule" => cfg
                .ablation_schedules
                .push(v.parse().map_err(|e: Error| Error::Validation { field: "ablation_schedule".into(), msg: e.to_string() })?),
            "grid" => {
                let (q, t) = v.split_once('x').ok_or_else(|| Error::Parse { line, msg: format!("grid cell `{v}` is not QxT") })?;
                cfg.grid.push((parse_value(line, &k, q.trim())?, parse_value(line, &k, t.trim())?));
            }
            other => return Err(Error::Parse { line, msg: format!("unknown key `{other}`") }),
        }
    }
    if !strategies.is_empty() {
        cfg.strategies = strategies;
    }
    match mnist {
        [Some(a), Some(b), Some(c), Some(d)] => {
            cfg.mnist = Some(MnistPaths { train_images: a, train_labels: b, test_images: c, test_labels: d })
        }
        [None, None, None, None] => {}
        _ => return Err(Error::Validation { field: "mnist_train_images".into(), msg: "all four IDX paths must be given".into() }),
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_config(&text)
}

/// Linear task for a seed: homogeneous when `gamma = 0`.
pub fn build_linear_task(cfg: &ExperimentConfig, seed: u64) -> Result<LinearTask> {
    let mut rng = SeededRng::derive(seed, &[1]);
    if cfg.gamma == 0.0 {
        LinearTask::homogeneous(cfg.d, cfg.m, cfg.n_clients, cfg.b_norm, cfg.mode, &mut rng)
    } else {
        LinearTask::heterogeneous(cfg.d, cfg.m, cfg.n_clients, cfg.b_norm, cfg.gamma, cfg.mode, &mut rng)
    }
}

/// Start vector at angle `delta0` from `a*`, drawn from the seed's own stream.
pub fn start_vector(task: &LinearTask, delta0: f64, seed: u64) -> Result<crate::linalg::Vector> {
    init_with_angle(&task.a_star, delta0, &mut SeededRng::derive(seed, &[5]))
}

/// Clients and test set for a classifier experiment.
pub fn build_classifier_task(cfg: &ExperimentConfig, seed: u64) -> Result<ClassifierFedTask> {
    let (train, test) = match cfg.task {
        TaskKind::Clusters => {
            let spec = ClusterSpec {
                d: cfg.d,
                n_classes: cfg.n_classes,
                signal_dim: cfg.signal_dim,
                margin: cfg.margin,
                noise: cfg.noise,
                train_per_class: cfg.train_per_class,
                test_per_class: cfg.test_per_class,
            };
            gen_class_clusters(&spec, &mut SeededRng::derive(seed, &[1]))?
        }
        TaskKind::Mnist => load_mnist(cfg)?,
        TaskKind::Linear => return Err(Error::Validation { field: "task".into(), msg: "not a classifier task".into() }),
    };
    let d = train.features.cols();
    let w_out = gaussian_matrix(&mut SeededRng::derive(seed, &[2]), d, train.n_classes)?.scale(cfg.out_std);
    let clients = match cfg.dirichlet_alpha {
        Some(a) => split_dirichlet(&train, cfg.n_clients, a, &mut SeededRng::derive(seed, &[3]))?,
        None => split_by_label(&train, cfg.n_clients, cfg.labels_per_client)?,
    };
    Ok(ClassifierFedTask { w_out, clients, test })
}

fn load_mnist(cfg: &ExperimentConfig) -> Result<(LabeledShard, LabeledShard)> {
    let p = cfg.mnist.as_ref().ok_or_else(|| Error::Validation { field: "mnist_train_images".into(), msg: "missing".into() })?;
    let shard = |imgs: &Path, labels: &Path, limit: usize| -> Result<LabeledShard> {
        let x = read_idx_images(imgs)?;
        let y = read_idx_labels(labels)?;
        let n = if limit > 0 { limit.min(y.len()) } else { y.len() };
        let idx: Vec<usize> = (0..n).collect();
        LabeledShard::new(x.select_rows(&idx), y[..n].to_vec(), cfg.n_classes)
    };
    Ok((shard(&p.train_images, &p.train_labels, cfg.train_limit)?, shard(&p.test_images, &p.test_labels, 0)?))
}

/// Final-round metrics of one (label, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    /// CSV header the run was written with.
    pub schema: String,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_angle: Option<f64>,
    pub violations: Option<usize>,
    /// Data rows written.
    pub rows: usize,
}

impl RunOutcome {
    /// Reads the last row of a trace or theory CSV.
    pub fn from_csv(label: &str, seed: u64, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let schema = lines.next().ok_or_else(|| Error::SchemaMismatch("empty trace".into()))?.to_string();
        let cols: Vec<&str> = schema.split(',').collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let (li, ai, gi) = match (find("global_loss"), find("test_accuracy"), find("angle_distance")) {
            (Some(l), Some(a), Some(g)) => (l, a, g),
            _ => return Err(Error::SchemaMismatch(format!("unexpected header `{schema}`"))),
        };
        let body: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        let last = body.last().ok_or_else(|| Error::SchemaMismatch("trace has no rows".into()))?;
        let fields: Vec<&str> = last.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::SchemaMismatch(format!("row has {} fields, header {}", fields.len(), cols.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::SchemaMismatch(format!("non-numeric field `{s}`")))
            }
        };
        Ok(Self {
            label: label.into(),
            seed,
            schema,
            final_loss: num(fields[li])?.unwrap_or(f64::NAN),
            final_accuracy: num(fields[ai])?,
            final_angle: num(fields[gi])?,
            violations: None,
            rows: body.len(),
        })
    }

    fn from_trace(label: String, seed: u64, trace: &TrainingTrace) -> Self {
        let last = trace.records.last();
        Self {
            label,
            seed,
            schema: crate::sim::TRACE_HEADER.into(),
            final_loss: last.map_or(f64::NAN, |r| r.global_loss),
            final_accuracy: last.and_then(|r| r.test_accuracy),
            final_angle: last.and_then(|r| r.angle_distance),
            violations: None,
            rows: trace.records.len(),
        }
    }
}

/// Mean and sample standard deviation over seeds for one label.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub accuracy: Option<(f64, f64)>,
    pub angle: Option<(f64, f64)>,
    pub violations: Option<usize>,
}

pub const SUMMARY_HEADER: &str =
    "label,runs,final_loss_mean,final_loss_std,final_accuracy_mean,final_accuracy_std,final_angle_mean,final_angle_std,violations";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn optional_stats(runs: &[&RunOutcome], get: impl Fn(&RunOutcome) -> Option<f64>, what: &str) -> Result<Option<(f64, f64)>> {
    let vals: Vec<Option<f64>> = runs.iter().map(|r| get(r)).collect();
    if vals.iter().all(Option::is_none) {
        return Ok(None);
    }
    let present: Vec<f64> = vals.iter().flatten().copied().collect();
    if present.len() != vals.len() {
        return Err(Error::SchemaMismatch(format!("{what} present in some runs of `{}` only", runs[0].label)));
    }
    Ok(Some(mean_std(&present)))
}

/// Groups runs by label (first-seen order) and reduces each group.
pub fn summarize(runs: &[RunOutcome]) -> Result<Vec<SummaryRow>> {
    if let Some(first) = runs.first() {
        if let Some(other) = runs.iter().find(|r| r.schema != first.schema) {
            return Err(Error::SchemaMismatch(format!("`{}` vs `{}`", first.schema, other.schema)));
        }
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunOutcome> = runs.iter().filter(|r| r.label == label).collect();
            let losses: Vec<f64> = group.iter().map(|r| r.final_loss).collect();
            let (loss_mean, loss_std) = mean_std(&losses);
            let violations = if group.iter().any(|r| r.violations.is_some()) {
                Some(group.iter().filter_map(|r| r.violations).sum())
            } else {
                None
            };
            Ok(SummaryRow {
                label: label.to_string(),
                runs: group.len(),
                loss_mean,
                loss_std,
                accuracy: optional_stats(&group, |r| r.final_accuracy, "test_accuracy")?,
                angle: optional_stats(&group, |r| r.final_angle, "angle_distance")?,
                violations,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let pair = |p: Option<(f64, f64)>| p.map_or(",".to_string(), |(m, s)| format!("{},{}", csv_num(m), csv_num(s)));
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            r.runs,
            csv_num(r.loss_mean),
            csv_num(r.loss_std),
            pair(r.accuracy),
            pair(r.angle),
            r.violations.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    out
}

/// Files and summary produced by [`run_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// One unit of work: a label, a seed and how to produce its CSV.
#[derive(Clone, Debug)]
struct Job {
    label: String,
    seed: u64,
    spec: JobSpec,
}

#[derive(Clone, Debug)]
enum JobSpec {
    Federated(FedConfig),
    TheoryHomog,
    TheoryHeter,
    FfaMonteCarlo,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    let mut push = |label: String, spec: JobSpec| {
        for &seed in &cfg.seeds {
            let spec = match &spec {
                JobSpec::Federated(fc) => JobSpec::Federated(FedConfig { seed, init: InitSpec { seed: mix_seed(seed, &[4]), ..fc.init.clone() }, ..fc.clone() }),
                other => other.clone(),
            };
            out.push(Job { label: label.clone(), seed, spec });
        }
    };
    match cfg.kind {
        ExperimentKind::CompareProtocols | ExperimentKind::NonlinearToy => {
            for s in &cfg.strategies {
                push(s.name().to_string(), JobSpec::Federated(cfg.fed_config(*s, 0)));
            }
        }
        ExperimentKind::AblationSchedule => {
            for sched in &cfg.ablation_schedules {
                let mut fc = cfg.fed_config(AggregationStrategy::RoLoRA, 0);
                fc.schedule = sched.clone();
                let tag = sched.to_string().replace(',', "").replace(';', "-");
                push(format!("rolora-{tag}"), JobSpec::Federated(fc));
            }
        }
        ExperimentKind::AblationLocalSteps => {
            for s in &cfg.strategies {
                for &(q, t) in &cfg.grid {
                    let mut fc = cfg.fed_config(*s, 0);
                    fc.local_steps = q;
                    fc.rounds = t;
                    push(format!("{}-q{q}-t{t}", s.name()), JobSpec::Federated(fc));
                }
            }
        }
        ExperimentKind::TheoryHomog => push("altmin-gd".into(), JobSpec::TheoryHomog),
        ExperimentKind::TheoryHeter => push("altmin-gd".into(), JobSpec::TheoryHeter),
        ExperimentKind::FfaMonteCarlo => push("ffa-lora".into(), JobSpec::FfaMonteCarlo),
    }
    out
}

fn theory_rows(cfg: &ExperimentConfig, spec: &JobSpec, seed: u64) -> Result<(Vec<TheoryRow>, Option<usize>)> {
    let delta0 = cfg.delta0[0];
    match spec {
        JobSpec::TheoryHomog | JobSpec::TheoryHeter => {
            let mut tcfg = cfg.clone();
            if matches!(spec, JobSpec::TheoryHeter) {
                tcfg.mode = SampleMode::Population;
            }
            let task = build_linear_task(&tcfg, seed)?;
            let a0 = start_vector(&task, delta0, seed)?;
            let report = altmin_gd(&task, &a0, cfg.eta, cfg.iterations, &mut SeededRng::derive(seed, &[6]))?;
            let mut rows = report.rows();
            if matches!(spec, JobSpec::TheoryHeter) {
                let bb = task.b_bar();
                let factor = 1.0 - 2.0 * cfg.eta * (1.0 - delta0 * delta0) * bb.dot(&bb);
                let ffa_floor = ffa_heter_loss_formula(&task, &a0)?;
                let gamma_sq = client_variance(&task).gamma_sq;
                let mut violations = 0;
                for (t, row) in rows.iter_mut().enumerate() {
                    let next = report.deltas[t + 1];
                    row.bound = Some(factor);
                    row.predicted_loss = Some(ffa_floor);
                    row.empirical_loss = Some(gamma_sq + bb.dot(&bb) * next * next);
                    if next > report.deltas[t] * factor + 1e-10 {
                        violations += 1;
                    }
                }
                Ok((rows, Some(violations)))
            } else {
                Ok((rows, Some(report.violations)))
            }
        }
        JobSpec::FfaMonteCarlo => {
            let mut tcfg = cfg.clone();
            tcfg.gamma = 0.0;
            tcfg.mode = SampleMode::FiniteSample;
            let task = build_linear_task(&tcfg, seed)?;
            let mut rows = Vec::new();
            for (i, &d0) in cfg.delta0.iter().enumerate() {
                let a0 = start_vector(&task, d0, mix_seed(seed, &[i as u64]))?;
                let mut rng = SeededRng::derive(seed, &[7, i as u64]);
                let (mean, se) = ffa_homog_empirical_loss(&task, &a0, cfg.trials, &mut rng)?;
                let pred = ffa_homog_predicted_loss(cfg.n_clients, cfg.m, d0, cfg.b_norm)?;
                rows.push(TheoryRow {
                    round: i,
                    trained_factor: "B",
                    global_loss: mean,
                    angle_distance: Some(d0),
                    predicted_loss: Some(pred.predicted),
                    empirical_loss: Some(mean),
                    std_err: Some(se),
                    ..TheoryRow::default()
                });
            }
            // rows whose estimate misses the prediction by more than 4 standard errors
            let misses = rows
                .iter()
                .filter(|r| (r.empirical_loss.unwrap() - r.predicted_loss.unwrap()).abs() > 4.0 * r.std_err.unwrap())
                .count();
            Ok((rows, Some(misses)))
        }
        JobSpec::Federated(_) => unreachable!("federated jobs do not produce theory rows"),
    }
}

fn run_job(cfg: &ExperimentConfig, job: &Job) -> Result<(String, RunOutcome)> {
    match &job.spec {
        JobSpec::Federated(fc) => {
            let trace = match cfg.task {
                TaskKind::Linear => {
                    let task = build_linear_task(cfg, job.seed)?;
                    let mut fc = fc.clone();
                    if fc.rank == 1 {
                        fc.init = InitSpec { alpha: cfg.alpha, ..InitSpec::rank1_given(&start_vector(&task, cfg.delta0[0], job.seed)?) };
                    }
                    let fed = LinearFedTask::new(task, mix_seed(job.seed, &[8]), cfg.exact_b)?;
                    run_federated(&fc, &fed)?
                }
                _ => run_federated(fc, &build_classifier_task(cfg, job.seed)?)?,
            };
            Ok((trace.to_csv_string(), RunOutcome::from_trace(job.label.clone(), job.seed, &trace)))
        }
        spec => {
            let (rows, violations) = theory_rows(cfg, spec, job.seed)?;
            let mut buf = Vec::new();
            write_theory_csv(&rows, &mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            let mut outcome = RunOutcome::from_csv(&job.label, job.seed, &text)?;
            outcome.violations = violations;
            Ok((text, outcome))
        }
    }
}

/// Runs every (label, seed) job, writes one CSV each plus `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    let jobs = jobs(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Io(format!("worker pool: {e}")))?;
    let results: Vec<(PathBuf, RunOutcome)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let (csv, outcome) = run_job(cfg, job)?;
                let path = cfg.out_dir.join(format!("{}_seed{}.csv", job.label, job.seed));
                fs::write(&path, csv).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                Ok((path, outcome))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (mut files, outcomes): (Vec<PathBuf>, Vec<RunOutcome>) = results.into_iter().unzip();
    let summary = summarize(&outcomes)?;
    let summary_path = cfg.out_dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&summary)).map_err(|e| Error::Io(format!("{}: {e}", summary_path.display())))?;
    files.push(summary_path);
    Ok(ExperimentOutput { files, outcomes, summary })
}
