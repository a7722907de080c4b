//! Synthetic tasks, experiment specifications, sweeps and the theory battery.
//!
//! A sweep expands the grids of an [`ExperimentSpec`] into cells, runs every
//! `(cell, seed)` pair (in parallel across pairs, never within one), writes
//! one CSV per run and a `summary.json` that names the cell with the best mean
//! final validation metric.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, MlpBackbone, Parameterization};
use crate::data::{Dataset, Splits};
use crate::dfiv::{self, DfivConfig, DfivVariant, EvalMode, IvDataset};
use crate::error::{Error, Result};
use crate::head::{proximal_solution, ridge_solution, HeadState, Regularization};
use crate::linalg::{matmul, matmul_nt, matmul_tn, solve_spd, Matrix};
use crate::losses::{induced_loss, proximal_loss, ridge_loss};
use crate::optim::{self, DivergenceInfo, EvalKind, Method, TrainConfig};
use crate::record;
use crate::rng;
use crate::snapshot;
use crate::theory::{self, EnvelopeMode, FlowOptions, FlowState};

pub const SCHEMA_VERSION: u32 = 1;

/// `(train, val, test)` sizes for a 72/8/20 split of `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 72 / 100;
    let val = n * 8 / 100;
    (train, val, n - train - val)
}

fn split(data: Dataset) -> Splits {
    let (tr, va, _) = split_sizes(data.len());
    Splits {
        train: data.slice(0, tr),
        val: data.slice(tr, tr + va),
        test: data.slice(tr + va, data.len()),
    }
}

/// Inputs `X ~ N(0, I_m)`, targets from a fixed random tanh teacher
/// `m → w → w → d_out` plus `N(0, noise²)`.
pub fn gen_regression_task(
    n: usize,
    m: usize,
    d_out: usize,
    teacher_width: usize,
    noise: f64,
    seed: u64,
) -> Result<Splits> {
    if n == 0 || m == 0 || d_out == 0 || teacher_width == 0 {
        return Err(Error::Config("regression task sizes must be positive".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let teacher = MlpBackbone::init(
        &[m, teacher_width, teacher_width],
        Activation::Tanh,
        Parameterization::Standard,
        seed ^ 0x7eac_4e57,
    )?;
    let mut r = rng::derive(seed, 1);
    let head = rng::normal_matrix(&mut r, d_out, teacher_width, (1.0 / teacher_width as f64).sqrt());
    let x = rng::normal_matrix(&mut r, m, n, 1.0);
    let mut y = matmul(&head, &teacher.features(&x)?)?;
    if noise > 0.0 {
        y.axpy(noise, &rng::normal_matrix(&mut r, d_out, n, 1.0))?;
    }
    Ok(split(Dataset::new(x, y)?))
}

pub const DEFAULT_SEPARATION: f64 = 6.0;

/// Gaussian blobs with unit covariance around class means at pairwise
/// distance [`DEFAULT_SEPARATION`] (when `classes ≤ m`), one-hot targets.
pub fn gen_classification_task(n: usize, classes: usize, m: usize, seed: u64) -> Result<Splits> {
    gen_classification_task_with_separation(n, classes, m, DEFAULT_SEPARATION, seed)
}

/// Class means are `separation/√2` times random orthonormal directions, so
/// every pair of means is `separation` apart. With more classes than
/// dimensions the directions are random unit vectors instead.
pub fn gen_classification_task_with_separation(
    n: usize,
    classes: usize,
    m: usize,
    separation: f64,
    seed: u64,
) -> Result<Splits> {
    if n == 0 || classes < 2 || m == 0 {
        return Err(Error::Config("classification task needs n > 0, C ≥ 2, m > 0".into()));
    }
    if !(separation >= 0.0) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }
    let mut r = rng::seeded(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut v: Vec<f64> = (0..m).map(|_| rng::normal(&mut r)).collect();
        if k < m {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let order = rng::permutation(&mut r, n);
    let mut x = Matrix::zeros(m, n);
    let mut y = Matrix::zeros(classes, n);
    for (j, &slot) in order.iter().enumerate() {
        let class = slot % classes;
        y[(class, j)] = 1.0;
        for i in 0..m {
            x[(i, j)] = scale * dirs[class][i] + rng::normal(&mut r);
        }
    }
    Ok(split(Dataset::new(x, y)?))
}

/// One row per sample: inputs `x0..`, then targets `y0..`.
pub fn dataset_csv(data: &Dataset) -> String {
    let mut header: Vec<String> = (0..data.input_dim()).map(|i| format!("x{i}")).collect();
    header.extend((0..data.output_dim()).map(|i| format!("y{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for j in 0..data.len() {
        let row: Vec<String> = data.x.column(j).into_iter().chain(data.y.column(j)).map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `train.csv`, `val.csv` and `test.csv` into `dir`.
pub fn write_splits_csv(splits: &Splits, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, data) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, dataset_csv(data)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Generates the data for `spec` and writes it as CSV into `spec.out`.
pub fn write_task_data(spec: &ExperimentSpec) -> Result<()> {
    match build_data(spec)? {
        TaskData::Supervised(splits, _) => write_splits_csv(&splits, &spec.out),
        TaskData::Iv(iv) => iv.write_csv_bundle(&spec.out),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SynthRegression,
    SynthClassification,
    Dfiv,
    TheorySuite,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::SynthRegression => "synth_regression",
            Task::SynthClassification => "synth_classification",
            Task::Dfiv => "dfiv",
            Task::TheorySuite => "theory_suite",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "synth_regression" | "regression" => Ok(Task::SynthRegression),
            "synth_classification" | "classification" => Ok(Task::SynthClassification),
            "dfiv" => Ok(Task::Dfiv),
            "theory_suite" | "theory" => Ok(Task::TheorySuite),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Generator parameters for whichever task is selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_width: usize,
    pub noise: f64,
    pub classes: usize,
    pub separation: f64,
    pub n1: usize,
    pub n2: usize,
    pub n_test: usize,
    pub confound: f64,
    pub iv_noise: f64,
    /// Seed of the data draw; run seeds only change initialization and
    /// batch order.
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            input_dim: 8,
            output_dim: 2,
            teacher_width: 32,
            noise: 0.1,
            classes: 10,
            separation: DEFAULT_SEPARATION,
            n1: 5000,
            n2: 5000,
            n_test: 1000,
            confound: 2.0,
            iv_noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub parameterization: Parameterization,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            parameterization: Parameterization::Standard,
        }
    }
}

/// Sweep axes; `None` keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lr: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    /// `None` entries mean full batch.
    pub batch_size: Option<Vec<Option<usize>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Perturb the analytic envelope gradients, as a negative control.
    WrongGradient,
}

/// Instance counts per theory check; all zero is an empty battery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryBattery {
    pub envelope: usize,
    pub closed_form: usize,
    pub kalman: usize,
    pub criticality: usize,
    pub flow: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for TheoryBattery {
    fn default() -> Self {
        Self {
            envelope: 6,
            closed_form: 20,
            kalman: 5,
            criticality: 5,
            flow: 3,
            seed: 0,
            fault: Fault::None,
        }
    }
}

impl TheoryBattery {
    pub fn empty() -> Self {
        Self {
            envelope: 0,
            closed_form: 0,
            kalman: 0,
            criticality: 0,
            flow: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: Task,
    pub train: TrainConfig,
    pub dfiv: DfivConfig,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads for the sweep; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Also write backbone and head snapshots for every run.
    pub snapshots: bool,
    pub theory: TheoryBattery,
}

impl ExperimentSpec {
    pub fn new(task: Task) -> Self {
        let mut train = TrainConfig::new(Method::ClosedFormProximalSimple);
        train.lambda = Some(1.0);
        Self {
            task,
            train,
            dfiv: DfivConfig::default(),
            data: DataSpec::default(),
            model: ModelSpec::default(),
            grid: SweepGrid::default(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
            threads: None,
            snapshots: false,
            theory: TheoryBattery::default(),
        }
    }

    /// Parses the flat configuration format:
    ///
    /// ```text
    /// task = synth_regression
    /// seeds = 0, 1, 2
    /// [train]
    /// method = closed_form_proximal_simple
    /// [sweep.lr]
    /// values = 1e-3, 1e-2
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored. Top-level keys
    /// may also be written under `[experiment]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut entries = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header '{line}'")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if (section.is_empty() || section == "experiment") && key == "task" {
                task = Some(Task::from_str(value).map_err(|e| err(e.to_string()))?);
            } else {
                entries.push((i + 1, section.clone(), key.to_string(), value.to_string()));
            }
        }
        let task = task.ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing 'task'".into(),
        })?;
        let mut spec = Self::new(task);
        for (line, section, key, value) in entries {
            spec.set(&section, &key, &value).map_err(|e| match e {
                Error::Parse { .. } => e,
                other => Error::Parse {
                    line,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies one `key = value` under `section`; the command line uses this
    /// to override configuration files.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key '{key}' in section '[{section}]'"));
        match section {
            "" | "experiment" => match key {
                "task" => self.task = value.parse()?,
                "out" => self.out = PathBuf::from(value),
                "seeds" | "seed" => self.seeds = parse_list(value, parse_u64)?,
                "threads" => self.threads = Some(parse_usize(value)?),
                "snapshots" => self.snapshots = parse_bool(value)?,
                _ => return Err(unknown()),
            },
            "train" => {
                let t = &mut self.train;
                match key {
                    "method" => switch_method(t, value.parse()?),
                    "batch_size" => t.batch_size = parse_batch(value)?,
                    "lr" | "learning_rate" => t.learning_rate = parse_f64(value)?,
                    "beta" => t.beta = parse_optional_f64(value)?,
                    "lambda" => t.lambda = parse_optional_f64(value)?,
                    "momentum" => t.momentum = parse_f64(value)?,
                    "optimizer" => t.optimizer = value.parse()?,
                    "epochs" => t.epochs = parse_usize(value)?,
                    "head_init" => t.head_init = value.parse()?,
                    "bias" => t.has_bias = parse_bool(value)?,
                    "wall_time" => t.record_wall_time = parse_bool(value)?,
                    _ => return Err(unknown()),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "n" => d.n = parse_usize(value)?,
                    "input_dim" => d.input_dim = parse_usize(value)?,
                    "output_dim" => d.output_dim = parse_usize(value)?,
                    "teacher_width" => d.teacher_width = parse_usize(value)?,
                    "noise" => d.noise = parse_f64(value)?,
                    "classes" => d.classes = parse_usize(value)?,
                    "separation" => d.separation = parse_f64(value)?,
                    "n1" => d.n1 = parse_usize(value)?,
                    "n2" => d.n2 = parse_usize(value)?,
                    "n_test" => d.n_test = parse_usize(value)?,
                    "confound" => d.confound = parse_f64(value)?,
                    "iv_noise" => d.iv_noise = parse_f64(value)?,
                    "seed" => d.seed = parse_u64(value)?,
                    _ => return Err(unknown()),
                }
            }
            "model" => match key {
                "hidden" => self.model.hidden = parse_list(value, parse_usize)?,
                "activation" => self.model.activation = value.parse()?,
                "parameterization" => self.model.parameterization = value.parse()?,
                _ => return Err(unknown()),
            },
            "dfiv" => self.set_dfiv(key, value).map_err(|e| match e {
                Error::Config(m) if m.is_empty() => unknown(),
                other => other,
            })?,
            "theory" => {
                let b = &mut self.theory;
                match key {
                    "envelope" => b.envelope = parse_usize(value)?,
                    "closed_form" => b.closed_form = parse_usize(value)?,
                    "kalman" => b.kalman = parse_usize(value)?,
                    "criticality" => b.criticality = parse_usize(value)?,
                    "flow" => b.flow = parse_usize(value)?,
                    "seed" => b.seed = parse_u64(value)?,
                    "fault" => {
                        b.fault = match value {
                            "none" => Fault::None,
                            "wrong_gradient" => Fault::WrongGradient,
                            other => return Err(Error::Config(format!("unknown fault '{other}'"))),
                        }
                    }
                    _ => return Err(unknown()),
                }
            }
            s if s.starts_with("sweep.") => {
                if key != "values" {
                    return Err(unknown());
                }
                match &s["sweep.".len()..] {
                    "lr" | "learning_rate" => self.grid.lr = Some(parse_list(value, parse_f64)?),
                    "lambda" => self.grid.lambda = Some(parse_list(value, parse_f64)?),
                    "beta" => self.grid.beta = Some(parse_list(value, parse_f64)?),
                    "batch_size" => self.grid.batch_size = Some(parse_list(value, parse_batch)?),
                    axis => return Err(Error::Config(format!("unknown sweep axis '{axis}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown section '[{section}]'"))),
        }
        Ok(())
    }

    fn set_dfiv(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.dfiv;
        match key {
            "variant" => {
                c.variant = match value {
                    "proximal" => DfivVariant::Proximal {
                        lambda1: 100.0,
                        lambda2: 100.0,
                    },
                    "ridge" => DfivVariant::Ridge { beta1: 0.1, beta2: 0.1 },
                    other => return Err(Error::Config(format!("unknown DFIV variant '{other}'"))),
                }
            }
            "lambda1" | "lambda2" | "beta1" | "beta2" => {
                let v = parse_f64(value)?;
                match (&mut c.variant, key) {
                    (DfivVariant::Proximal { lambda1, .. }, "lambda1") => *lambda1 = v,
                    (DfivVariant::Proximal { lambda2, .. }, "lambda2") => *lambda2 = v,
                    (DfivVariant::Ridge { beta1, .. }, "beta1") => *beta1 = v,
                    (DfivVariant::Ridge { beta2, .. }, "beta2") => *beta2 = v,
                    _ => return Err(Error::Config(format!("'{key}' does not apply to the current DFIV variant"))),
                }
            }
            "lambda12" => c.lambda12 = parse_f64(value)?,
            "lr" => {
                c.lr1 = parse_f64(value)?;
                c.lr2 = c.lr1;
            }
            "lr1" => c.lr1 = parse_f64(value)?,
            "lr2" => c.lr2 = parse_f64(value)?,
            "momentum" => c.momentum = parse_f64(value)?,
            "optimizer" => c.optimizer = value.parse()?,
            "batch_size" => {
                c.batch1 = parse_batch(value)?;
                c.batch2 = c.batch1;
            }
            "t1" => c.t1 = parse_usize(value)?,
            "t2" => c.t2 = parse_usize(value)?,
            "iterations" => c.iterations = parse_usize(value)?,
            "eval_every" => c.eval_every = parse_usize(value)?,
            "x_hidden" => c.x_layers = [vec![dfiv::X_DIM], parse_list(value, parse_usize)?].concat(),
            "z_hidden" => c.z_layers = [vec![dfiv::Z_DIM], parse_list(value, parse_usize)?].concat(),
            "activation" => c.activation = value.parse()?,
            "wall_time" => c.record_wall_time = parse_bool(value)?,
            _ => return Err(Error::Config(String::new())),
        }
        Ok(())
    }

    /// Expands the grids into cells. Regularization axes only apply to the
    /// methods (or DFIV variant) that use them.
    pub fn cells(&self) -> Result<Vec<CellParams>> {
        fn axis<T: Clone>(name: &str, grid: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
            match grid {
                Some(v) if v.is_empty() => Err(Error::Config(format!("sweep grid '{name}' is empty"))),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![base]),
            }
        }
        let (uses_lambda, uses_beta, base_lr, base_batch) = match self.task {
            Task::Dfiv => (
                matches!(self.dfiv.variant, DfivVariant::Proximal { .. }),
                matches!(self.dfiv.variant, DfivVariant::Ridge { .. }),
                self.dfiv.lr1,
                self.dfiv.batch1,
            ),
            _ => {
                let m = self.train.method;
                let prox = matches!(m, Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead);
                (prox, !prox, self.train.learning_rate, self.train.batch_size)
            }
        };
        if self.grid.lambda.is_some() && !uses_lambda {
            return Err(Error::Config("sweep.lambda given but the configured method has no λ".into()));
        }
        if self.grid.beta.is_some() && !uses_beta {
            return Err(Error::Config("sweep.beta given but the configured method has no β".into()));
        }
        let lrs = axis("lr", &self.grid.lr, base_lr)?;
        let batches = axis("batch_size", &self.grid.batch_size, base_batch)?;
        let regs: Vec<(Option<f64>, Option<f64>)> = match (&self.grid.lambda, &self.grid.beta) {
            (Some(_), _) => axis("lambda", &self.grid.lambda, 0.0)?.into_iter().map(|l| (Some(l), None)).collect(),
            (_, Some(_)) => axis("beta", &self.grid.beta, 0.0)?.into_iter().map(|b| (None, Some(b))).collect(),
            _ => vec![(None, None)],
        };
        let mut cells = Vec::new();
        for &batch_size in &batches {
            for &(lambda, beta) in &regs {
                for &lr in &lrs {
                    cells.push(CellParams {
                        id: cells.len(),
                        lr,
                        batch_size,
                        lambda,
                        beta,
                    });
                }
            }
        }
        Ok(cells)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        match self.task {
            Task::Dfiv => self.dfiv.validate()?,
            Task::TheorySuite => {}
            _ => {
                if self.model.hidden.is_empty() {
                    return Err(Error::Config("model needs at least one hidden layer".into()));
                }
                for cell in self.cells()? {
                    cell.apply_train(&self.train, 0).validate()?;
                }
            }
        }
        self.cells().map(|_| ())
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| Error::Config(format!("'{s}' is not a number: {e}")))
}

fn parse_optional_f64(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "none" | "" => Ok(None),
        v => parse_f64(v).map(Some),
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|e| Error::Config(format!("'{s}' is not a count: {e}")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|e| Error::Config(format!("'{s}' is not a seed: {e}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("'{other}' is not a boolean"))),
    }
}

/// A batch size, or `full` for the whole training set.
pub fn parse_batch(s: &str) -> Result<Option<usize>> {
    match s.trim() {
        "full" => Ok(None),
        v => parse_usize(v).map(Some),
    }
}

/// Comma-separated list.
pub fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|v| item(v.trim())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub id: usize,
    pub lr: f64,
    pub batch_size: Option<usize>,
    /// Overrides; `None` keeps the base value.
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
}

impl CellParams {
    pub fn apply_train(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.learning_rate = self.lr;
        cfg.batch_size = self.batch_size;
        cfg.seed = seed;
        if let Some(l) = self.lambda {
            cfg.lambda = Some(l);
            cfg.beta = None;
        }
        if let Some(b) = self.beta {
            cfg.beta = Some(b);
            cfg.lambda = None;
        }
        cfg
    }

    pub fn apply_dfiv(&self, base: &DfivConfig, seed: u64) -> DfivConfig {
        let mut cfg = base.clone();
        cfg.lr1 = self.lr;
        cfg.lr2 = self.lr;
        cfg.batch1 = self.batch_size;
        cfg.batch2 = self.batch_size;
        cfg.seed = seed;
        if let Some(l) = self.lambda {
            cfg.variant = DfivVariant::Proximal { lambda1: l, lambda2: l };
        }
        if let Some(b) = self.beta {
            cfg.variant = DfivVariant::Ridge { beta1: b, beta2: b };
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    /// Relative to the output directory.
    pub csv: String,
    pub final_val: Option<f64>,
    pub final_test: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// DFIV only: test MSE with the in-training heads.
    pub final_test_current: Option<f64>,
    pub divergence: Option<DivergenceInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub params: CellParams,
    pub runs: Vec<RunSummary>,
    /// Mean over seeds; `None` if any seed diverged.
    pub mean_val: Option<f64>,
    pub mean_test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub task: Task,
    /// `mse` or `accuracy`.
    pub metric: String,
    pub higher_is_better: bool,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    /// Cell id with the best mean final validation metric.
    pub best_cell: Option<usize>,
    pub best_test: Option<f64>,
    pub diverged_runs: usize,
}

impl SweepSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn cell_file_stem(cell: usize, seed: u64) -> String {
    format!("cell{cell:03}_seed{seed}")
}

enum TaskData {
    Supervised(Splits, EvalKind),
    Iv(IvDataset),
}

fn build_data(spec: &ExperimentSpec) -> Result<TaskData> {
    let d = &spec.data;
    Ok(match spec.task {
        Task::SynthRegression => TaskData::Supervised(
            gen_regression_task(d.n, d.input_dim, d.output_dim, d.teacher_width, d.noise, d.seed)?,
            EvalKind::Mse,
        ),
        Task::SynthClassification => TaskData::Supervised(
            gen_classification_task_with_separation(d.n, d.classes, d.input_dim, d.separation, d.seed)?,
            EvalKind::Accuracy,
        ),
        Task::Dfiv => TaskData::Iv(dfiv::generate_iv_data(d.n1, d.n2, d.n_test, d.confound, d.iv_noise, d.seed)?),
        Task::TheorySuite => {
            return Err(Error::Config("theory_suite runs through run_theory_suite".into()));
        }
    })
}

/// Backbone and head for one supervised run. Joint methods never re-solve the
/// head, so their head carries a placeholder ridge coefficient.
pub fn build_model(model: &ModelSpec, cfg: &TrainConfig, data: &Dataset) -> Result<(MlpBackbone, HeadState)> {
    let mut dims = vec![data.input_dim()];
    dims.extend_from_slice(&model.hidden);
    let bb = MlpBackbone::init(&dims, model.activation, model.parameterization, cfg.seed)?;
    let reg = if cfg.method.is_closed_form() {
        cfg.regularization()?
    } else {
        Regularization::Ridge {
            beta: cfg.beta.filter(|b| *b > 0.0).unwrap_or(1.0),
        }
    };
    let head = HeadState::init(
        data.output_dim(),
        bb.feature_dim(),
        cfg.has_bias,
        cfg.head_init,
        reg,
        cfg.seed.wrapping_add(0x5151),
    )?;
    Ok((bb, head))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn run_supervised(spec: &ExperimentSpec, splits: &Splits, eval: EvalKind, cell: &CellParams, seed: u64) -> Result<RunSummary> {
    let cfg = cell.apply_train(&spec.train, seed);
    let (bb, head) = build_model(&spec.model, &cfg, &splits.train)?;
    let out = optim::train(&cfg, bb, head, &splits.train, Some(&splits.val), eval)?;
    let stem = cell_file_stem(cell.id, seed);
    let csv = format!("{stem}.csv");
    record::write_csv(spec.out.join(&csv), &out.records)?;
    if spec.snapshots {
        snapshot::save_backbone(spec.out.join(format!("{stem}.backbone")), &out.backbone)?;
        snapshot::save_head(spec.out.join(format!("{stem}.head")), &out.head)?;
    }
    let last = out.records.last().expect("train always records iteration 0");
    let ok = out.divergence.is_none();
    Ok(RunSummary {
        seed,
        csv,
        final_val: finite(last.eval_metric).filter(|_| ok),
        final_test: if ok {
            finite(optim::evaluate(&out.backbone, &out.head, &splits.test, eval)?)
        } else {
            None
        },
        final_train_loss: finite(last.train_loss).filter(|_| ok),
        final_test_current: None,
        divergence: out.divergence,
    })
}

fn run_dfiv(spec: &ExperimentSpec, data: &IvDataset, cell: &CellParams, seed: u64) -> Result<RunSummary> {
    let cfg = cell.apply_dfiv(&spec.dfiv, seed);
    let out = dfiv::dfiv_train(&cfg, data)?;
    let stem = cell_file_stem(cell.id, seed);
    let csv = format!("{stem}.csv");
    record::write_csv(spec.out.join(&csv), &out.records)?;
    if spec.snapshots {
        snapshot::save_backbone(spec.out.join(format!("{stem}.x.backbone")), &out.state.x_net)?;
        snapshot::save_backbone(spec.out.join(format!("{stem}.z.backbone")), &out.state.z_net)?;
    }
    let ok = out.divergence.is_none();
    let eval = |f: &dyn Fn() -> Result<f64>| -> Result<Option<f64>> { Ok(if ok { finite(f()?) } else { None }) };
    Ok(RunSummary {
        seed,
        csv,
        final_val: eval(&|| dfiv::dfiv_validate(&out.state, data, EvalMode::Reestimate))?,
        final_test: eval(&|| dfiv::dfiv_evaluate(&out.state, data, EvalMode::Reestimate))?,
        final_train_loss: out.records.last().and_then(|r| finite(r.train_loss)).filter(|_| ok),
        final_test_current: eval(&|| dfiv::dfiv_evaluate(&out.state, data, EvalMode::Current))?,
        divergence: out.divergence,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every `(cell, seed)` pair, writes the per-run CSVs and
/// `summary.json` into `spec.out`, and returns the summary.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<SweepSummary> {
    spec.validate()?;
    let data = build_data(spec)?;
    fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let cells = spec.cells()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run_all = || -> Result<Vec<RunSummary>> {
        jobs.par_iter()
            .map(|&(c, seed)| match &data {
                TaskData::Supervised(splits, eval) => run_supervised(spec, splits, *eval, &cells[c], seed),
                TaskData::Iv(iv) => run_dfiv(spec, iv, &cells[c], seed),
            })
            .collect()
    };
    let runs = match spec.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };

    let higher_is_better = spec.task == Task::SynthClassification;
    let mut runs = runs.into_iter();
    let cell_summaries: Vec<CellSummary> = cells
        .iter()
        .map(|p| {
            let runs: Vec<RunSummary> = runs.by_ref().take(spec.seeds.len()).collect();
            CellSummary {
                params: *p,
                mean_val: mean(runs.iter().map(|r| r.final_val)),
                mean_test: mean(runs.iter().map(|r| r.final_test)),
                runs,
            }
        })
        .collect();
    let best = cell_summaries
        .iter()
        .filter_map(|c| c.mean_val.map(|v| (c, v)))
        .reduce(|a, b| {
            let better = if higher_is_better { b.1 > a.1 } else { b.1 < a.1 };
            if better {
                b
            } else {
                a
            }
        })
        .map(|(c, _)| c);
    let summary = SweepSummary {
        schema_version: SCHEMA_VERSION,
        task: spec.task,
        metric: if higher_is_better { "accuracy" } else { "mse" }.into(),
        higher_is_better,
        seeds: spec.seeds.clone(),
        best_cell: best.map(|c| c.params.id),
        best_test: best.and_then(|c| c.mean_test),
        diverged_runs: cell_summaries
            .iter()
            .flat_map(|c| &c.runs)
            .filter(|r| r.divergence.is_some())
            .count(),
        cells: cell_summaries,
    };
    let path = spec.out.join("summary.json");
    fs::write(&path, summary.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (or mismatch count) over the instances.
    pub measured: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub passed: bool,
    pub checks: Vec<TheoryCheck>,
    pub warnings: Vec<String>,
}

impl TheoryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn check(name: &str, measured: f64, tolerance: f64, instances: usize, detail: String) -> TheoryCheck {
    TheoryCheck {
        name: name.into(),
        passed: measured <= tolerance,
        measured,
        tolerance,
        instances,
        detail,
    }
}

/// A small random network and regression batch for the envelope checks;
/// even instances use tanh, odd ones ReLU.
///
/// Parameters get a little noise on top of the init: zero biases put dead
/// samples exactly on a ReLU kink, where `L⋆` has no gradient to check.
pub fn envelope_instance(seed: u64, index: usize) -> Result<(MlpBackbone, Dataset)> {
    let act = if index % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let s = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let mut bb = MlpBackbone::init(&[3, 6, 4], act, Parameterization::Standard, s)?;
    let mut r = rng::derive(s, 7);
    let theta: Vec<f64> = bb.params_flat().iter().map(|t| t + 0.1 * rng::normal(&mut r)).collect();
    bb.set_params_flat(&theta)?;
    let x = rng::normal_matrix(&mut r, 3, 10, 1.0);
    let y = rng::normal_matrix(&mut r, 2, 10, 1.0);
    Ok((bb, Dataset::new(x, y)?))
}

fn envelope_error(bb: &MlpBackbone, data: &Dataset, mode: &EnvelopeMode, fault: Fault) -> Result<f64> {
    let mut analytic = theory::envelope_gradient(bb, data, true, mode)?;
    if fault == Fault::WrongGradient {
        analytic.iter_mut().for_each(|g| *g *= 1.05);
    }
    let numeric = theory::induced_loss_fd_gradient(bb, data, true, mode)?;
    Ok(theory::max_relative_error(&analytic, &numeric))
}

fn envelope_checks(b: &TheoryBattery) -> Result<Vec<TheoryCheck>> {
    let (mut ridge, mut prox) = (0.0f64, 0.0f64);
    for i in 0..b.envelope {
        let (bb, data) = envelope_instance(b.seed, i)?;
        ridge = ridge.max(envelope_error(&bb, &data, &EnvelopeMode::Ridge { beta: 0.5 }, b.fault)?);
        let mut r = rng::derive(b.seed, 100 + i as u64);
        let mode = EnvelopeMode::Proximal {
            w_prev: rng::normal_matrix(&mut r, 2, bb.feature_dim() + 1, 1.0),
            lambda: [0.1, 1.0, 100.0][i % 3],
        };
        prox = prox.max(envelope_error(&bb, &data, &mode, b.fault)?);
    }
    Ok(vec![
        check("envelope_ridge", ridge, 1e-4, b.envelope, "max relative error vs central differences of L⋆".into()),
        check("envelope_proximal", prox, 1e-4, b.envelope, "λ cycles through 0.1, 1, 100".into()),
    ])
}

fn closed_form_check(b: &TheoryBattery) -> Result<TheoryCheck> {
    let mut worst = 0.0f64;
    for i in 0..b.closed_form {
        let mut r = rng::derive(b.seed, 200 + i as u64);
        let (d, n, o) = (2 + i % 5, 3 + i % 7, 1 + i % 3);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);
        let y = rng::normal_matrix(&mut r, o, n, 1.0);
        let w_prev = rng::normal_matrix(&mut r, o, d, 1.0);
        let coef = [1e-3, 0.1, 1.0, 10.0][i % 4];
        let scale = 2.0 * matmul_nt(&y, &phi)?.max_abs().max(1.0);
        let g1 = ridge_loss(&ridge_solution(&y, &phi, coef)?, &phi, &y, coef)?.grad_w;
        let g2 = proximal_loss(&proximal_solution(&y, &phi, &w_prev, coef)?, &phi, &y, &w_prev, coef)?.grad_w;
        worst = worst.max(g1.max_abs() / scale).max(g2.max_abs() / scale);
    }
    Ok(check(
        "closed_form_optimality",
        worst,
        1e-8,
        b.closed_form,
        "max |∇_W| at the ridge and proximal solutions, relative to max |2YΦᵀ|".into(),
    ))
}

fn kalman_check(b: &TheoryBattery) -> Result<TheoryCheck> {
    let mut worst = 0.0f64;
    for i in 0..b.kalman {
        let mut r = rng::derive(b.seed, 300 + i as u64);
        let phi = rng::normal_matrix(&mut r, 4, 12, 1.0);
        let y = rng::normal_matrix(&mut r, 2, 12, 1.0);
        let w_prev = rng::normal_matrix(&mut r, 2, 4, 1.0);
        let (sy, sw) = ([0.5, 1.0, 2.0][i % 3], [0.3, 1.0, 3.0][(i / 3) % 3]);
        worst = worst.max(theory::check_kalman_equivalence(&y, &phi, &w_prev, sy, sw)?.rel_err);
    }
    Ok(check(
        "kalman_map",
        worst,
        1e-6,
        b.kalman,
        "relative distance between the proximal solution at λ = σ_Y²/σ_W² and the MAP estimate".into(),
    ))
}

/// Central differences of `Φ ↦ L⋆(Φ)` entrywise.
pub fn induced_loss_phi_fd(y: &Matrix, phi: &Matrix, beta: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(phi.rows(), phi.cols());
    let mut p = phi.clone();
    for i in 0..phi.rows() {
        for j in 0..phi.cols() {
            let h = 1e-5 * (1.0 + phi[(i, j)].abs());
            p[(i, j)] = phi[(i, j)] + h;
            let plus = induced_loss(&p, y, beta)?;
            p[(i, j)] = phi[(i, j)] - h;
            let minus = induced_loss(&p, y, beta)?;
            p[(i, j)] = phi[(i, j)];
            out[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

fn criticality_checks(b: &TheoryBattery) -> Result<Vec<TheoryCheck>> {
    let mut grad_err = 0.0f64;
    let mut mismatches = 0usize;
    let tol = theory::DEFAULT_CRITICAL_TOL;
    for i in 0..b.criticality {
        let mut r = rng::derive(b.seed, 400 + i as u64);
        let (d, n, o, beta) = (3, 7, 2, [0.1, 0.5, 1.0][i % 3]);
        let y = rng::normal_matrix(&mut r, o, n, 1.0);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);
        let g = theory::functional_gradient(&y, &phi, beta)?;
        let fd = induced_loss_phi_fd(&y, &phi, beta)?;
        grad_err = grad_err.max(theory::max_relative_error(g.data(), fd.data()));

        // Φ = 0 with Y ≠ 0: critical, not global.
        let zero = theory::is_critical(&y, &Matrix::zeros(d, n), beta, tol)?;
        mismatches += usize::from(!zero.critical || zero.is_global);
        // Rows of Y orthogonal to the row space of Φ: Y⋆ = 0, critical.
        let basis = rng::normal_matrix(&mut r, d, n, 1.0);
        let y_orth = orthogonal_to_rows(&rng::normal_matrix(&mut r, o, n, 1.0), &basis)?;
        mismatches += usize::from(!theory::is_critical(&y_orth, &basis, beta, tol)?.critical);
        // Generic Φ: not critical.
        mismatches += usize::from(theory::is_critical(&y, &phi, beta, tol)?.critical);
    }
    Ok(vec![
        check(
            "functional_gradient",
            grad_err,
            1e-4,
            b.criticality,
            "max relative error of ∇_Φ L⋆ vs central differences".into(),
        ),
        check(
            "criticality",
            mismatches as f64,
            0.0,
            b.criticality,
            "misclassified points among Φ = 0, YΦᵀ = 0 and generic Φ".into(),
        ),
    ])
}

/// Removes from each row of `y` its projection onto the row space of `a`.
pub fn orthogonal_to_rows(y: &Matrix, a: &Matrix) -> Result<Matrix> {
    let coef = solve_spd(&matmul_nt(a, a)?, &matmul_nt(a, y)?)?;
    y.sub(&matmul_tn(&coef, a)?)
}

fn flow_checks(b: &TheoryBattery) -> Result<Vec<TheoryCheck>> {
    let (mut unconverged, mut loss_viol, mut eig_viol) = (0usize, 0.0f64, 0.0f64);
    let opts = FlowOptions {
        stop_ratio: Some(1e-3),
        ..FlowOptions::default()
    };
    for i in 0..b.flow {
        let mut r = rng::derive(b.seed, 500 + i as u64);
        let (d, n) = (4, 6);
        let xi = FlowState::default_kernel(d, &mut r);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);
        let y2 = rng::normal_matrix(&mut r, 2, n, 1.0);
        let traj = theory::integrate_flow(&FlowState::new(phi.clone(), xi.clone(), 0.01)?, &y2, &opts)?;
        unconverged += usize::from(!traj.converged);
        loss_viol = loss_viol.max(theory::check_loss_monotone(&traj, 1e-9).max_violation);
        let y1 = rng::normal_matrix(&mut r, 1, n, 1.0);
        let traj1 = theory::integrate_flow(&FlowState::new(phi, xi, 0.01)?, &y1, &opts)?;
        unconverged += usize::from(!traj1.converged);
        eig_viol = eig_viol.max(theory::check_eig_monotone(&traj1).max_violation);
    }
    Ok(vec![
        check(
            "flow_convergence",
            unconverged as f64,
            0.0,
            2 * b.flow,
            "trajectories not reaching ‖Y⊥‖ ≤ 1e-3‖Y‖".into(),
        ),
        check("flow_loss_monotone", loss_viol, 0.0, b.flow, "largest increase of L⋆ (o = 2)".into()),
        check(
            "flow_eig_monotone_rank1",
            eig_viol,
            0.0,
            b.flow,
            "largest decrease of the eigenvalue of Y⋆Y⋆ᵀ beyond 1e-6(1+eig), rank-1 targets".into(),
        ),
    ])
}

/// Runs the battery and collects one verdict per check.
pub fn run_theory_suite(battery: &TheoryBattery) -> Result<TheoryReport> {
    let mut checks = Vec::new();
    let mut warnings = Vec::new();
    if battery.envelope > 0 {
        checks.extend(envelope_checks(battery)?);
    }
    if battery.closed_form > 0 {
        checks.push(closed_form_check(battery)?);
    }
    if battery.kalman > 0 {
        checks.push(kalman_check(battery)?);
    }
    if battery.criticality > 0 {
        checks.extend(criticality_checks(battery)?);
    }
    if battery.flow > 0 {
        checks.extend(flow_checks(battery)?);
    }
    if checks.is_empty() {
        warnings.push("empty battery: no checks were run".into());
    }
    if battery.fault != Fault::None {
        warnings.push(format!("fault injected: {:?}", battery.fault));
    }
    Ok(TheoryReport {
        schema_version: SCHEMA_VERSION,
        passed: checks.iter().all(|c| c.passed),
        checks,
        warnings,
    })
}

/// Builds a default training configuration for `method` with the
/// regularization field it needs.
pub fn default_train_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::new(method);
    match method {
        Method::ClosedFormRidge => cfg.beta = Some(1e-2),
        Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead => cfg.lambda = Some(1.0),
        Method::JointSgdL2 | Method::JointSgdXent => {}
    }
    cfg
}

/// Changes the method and keeps only the regularization field it uses,
/// filling in the default when that field is unset.
pub fn switch_method(cfg: &mut TrainConfig, method: Method) {
    let defaults = default_train_config(method);
    cfg.method = method;
    match method {
        Method::ClosedFormRidge => {
            cfg.beta = cfg.beta.or(defaults.beta);
            cfg.lambda = None;
        }
        Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead => {
            cfg.lambda = cfg.lambda.or(defaults.lambda);
            cfg.beta = None;
        }
        Method::JointSgdL2 | Method::JointSgdXent => cfg.lambda = None,
    }
}

/// Convenience for callers that only want a single supervised run.
pub fn train_once(
    model: &ModelSpec,
    cfg: &TrainConfig,
    splits: &Splits,
    eval: EvalKind,
) -> Result<optim::TrainOutcome> {
    let (bb, head) = build_model(model, cfg, &splits.train)?;
    optim::train(cfg, bb, head, &splits.train, Some(&splits.val), eval)
}
