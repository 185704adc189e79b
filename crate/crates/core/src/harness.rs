//! Experiment configuration, multi-trial runs and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::apts::{make_partition, AptsConfig};
use crate::baselines::{BaselineConfig, BaselineKind};
use crate::data::{load_idx, make_batches, make_synthetic, Dataset, SyntheticKind};
use crate::model::{Mlp, MlpSpec};
use crate::training::{train, EpochRecord, LoggedStep, Method, TrainSetup};
use crate::trloop::{ModelOrder, TrConfig};
use crate::Error;

/// Default directory for relative IDX paths when the config gives none.
pub const DATA_DIR_ENV: &str = "APTS_DATA_DIR";

pub const EPOCH_HEADER: &str =
    "trial,epoch,train_loss,test_loss,test_accuracy,global_radius,fdl_activations,wall_seconds";

const STEP_HEADER: &str = "trial,epoch,batch,step,loss_before,loss_half,loss_after,delta_before,delta_after,\
precond_norm,fdl_activations,fdl_final_w,local_iterations,accepted,rho";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
        train_samples: Option<usize>,
        test_samples: Option<usize>,
    },
    Synthetic {
        kind: SyntheticKind,
        train_samples: usize,
        test_samples: usize,
        seed: u64,
    },
}

impl DataSource {
    /// Training set and optional test set.
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>), Error> {
        match self {
            DataSource::Idx {
                train_images,
                train_labels,
                test,
                train_samples,
                test_samples,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(n) = train_samples {
                    train = train.take(*n);
                }
                let test = match test {
                    Some((img, lab)) => {
                        let t = load_idx(img, lab)?;
                        Some(match test_samples {
                            Some(n) => t.take(*n),
                            None => t,
                        })
                    }
                    None => None,
                };
                Ok((train, test))
            }
            DataSource::Synthetic {
                kind,
                train_samples,
                test_samples,
                seed,
            } => {
                let train = make_synthetic(*kind, *train_samples, *seed);
                let test = (*test_samples > 0).then(|| make_synthetic(*kind, *test_samples, seed.wrapping_add(1)));
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub label: String,
    pub layers: Vec<usize>,
    pub data: DataSource,
    pub batch_count: usize,
    pub overlap: f64,
    /// Defaults to the master seed.
    pub batch_seed: Option<u64>,
    pub method: Method,
    /// Defaults to the master seed.
    pub partition_seed: Option<u64>,
    pub epochs: usize,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub wall_clock: bool,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    label: Option<String>,
    epochs: usize,
    #[serde(default = "one")]
    trials: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    wall_clock: bool,
    model: RawModel,
    data: RawData,
    #[serde(default)]
    batches: RawBatches,
    optimizer: RawOptimizer,
    #[serde(default)]
    apts: RawApts,
    #[serde(default)]
    tr: RawTr,
    #[serde(default)]
    gd: RawSgd,
    #[serde(default)]
    sgd: RawSgd,
    #[serde(default)]
    adam: RawAdam,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    layers: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: String,
    dir: Option<PathBuf>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    train_samples: Option<usize>,
    test_samples: Option<usize>,
    kind: Option<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatches {
    #[serde(default = "one")]
    count: usize,
    #[serde(default)]
    overlap: f64,
    seed: Option<u64>,
}

impl Default for RawBatches {
    fn default() -> Self {
        Self {
            count: 1,
            overlap: 0.0,
            seed: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    kind: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawApts {
    subdomains: usize,
    nu: usize,
    fdl: bool,
    order: u32,
    partition_seed: Option<u64>,
    parallel: bool,
}

impl Default for RawApts {
    fn default() -> Self {
        let d = AptsConfig::default();
        Self {
            subdomains: d.subdomains,
            nu: d.nu,
            fdl: d.fdl,
            order: 1,
            partition_seed: None,
            parallel: d.parallel,
        }
    }
}

/// Radius policy shared by the standalone optimizer and the APTS global pass.
#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTr {
    order: u32,
    delta_init: f64,
    delta_min: f64,
    delta_max: f64,
    eta1: f64,
    eta2: f64,
    alpha: f64,
    beta: f64,
    history: usize,
}

impl Default for RawTr {
    fn default() -> Self {
        let d = TrConfig::default();
        Self {
            order: 1,
            delta_init: d.delta_init,
            delta_min: d.delta_min,
            delta_max: d.delta_max,
            eta1: d.eta1,
            eta2: d.eta2,
            alpha: d.alpha,
            beta: d.beta,
            history: d.history,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSgd {
    learning_rate: f64,
    momentum: f64,
}

impl Default for RawSgd {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawAdam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Default for RawAdam {
    fn default() -> Self {
        let d = BaselineConfig::adam(1e-3);
        Self {
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: PathBuf,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

fn order_of(order: u32) -> Result<ModelOrder, Error> {
    ModelOrder::from_int(order).ok_or_else(|| Error::InvalidConfig(format!("order must be 1 or 2, got {order}")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses TOML text. Relative data paths resolve against `[data].dir`,
    /// then `APTS_DATA_DIR`, then `base`; the output dir against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Error> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if raw.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }

        let data = match raw.data.source.as_str() {
            "idx" => {
                let dir = match (&raw.data.dir, std::env::var_os(DATA_DIR_ENV)) {
                    (Some(d), _) => base.join(d),
                    (None, Some(env)) => PathBuf::from(env),
                    (None, None) => base.to_path_buf(),
                };
                let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf, Error> {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig(format!("[data] needs {key} for idx sources")))?;
                    let full = dir.join(p);
                    if !full.exists() {
                        return Err(Error::InvalidConfig(format!("{key}: {} does not exist", full.display())));
                    }
                    Ok(full)
                };
                let test = match (&raw.data.test_images, &raw.data.test_labels) {
                    (None, None) => None,
                    (Some(_), Some(_)) => Some((
                        need(&raw.data.test_images, "test_images")?,
                        need(&raw.data.test_labels, "test_labels")?,
                    )),
                    _ => {
                        return Err(Error::InvalidConfig(
                            "[data] test_images and test_labels go together".into(),
                        ))
                    }
                };
                DataSource::Idx {
                    train_images: need(&raw.data.train_images, "train_images")?,
                    train_labels: need(&raw.data.train_labels, "train_labels")?,
                    test,
                    train_samples: raw.data.train_samples,
                    test_samples: raw.data.test_samples,
                }
            }
            "synthetic" => {
                let kind: SyntheticKind = raw
                    .data
                    .kind
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig("[data] needs kind for synthetic sources".into()))?
                    .parse()?;
                DataSource::Synthetic {
                    kind,
                    train_samples: raw.data.train_samples.unwrap_or(200),
                    test_samples: raw.data.test_samples.unwrap_or(0),
                    seed: raw.data.seed,
                }
            }
            other => return Err(Error::InvalidConfig(format!("unknown data source {other:?}"))),
        };

        let t = &raw.tr;
        let tr = TrConfig {
            delta_init: t.delta_init,
            delta_min: t.delta_min,
            delta_max: t.delta_max,
            eta1: t.eta1,
            eta2: t.eta2,
            alpha: t.alpha,
            beta: t.beta,
            order: order_of(t.order)?,
            history: t.history,
        };
        let kind = raw.optimizer.kind.as_str();
        let method = match kind {
            "apts" => Method::Apts(AptsConfig {
                subdomains: raw.apts.subdomains,
                partition_seed: 0,
                nu: raw.apts.nu,
                fdl: raw.apts.fdl,
                global: TrConfig {
                    order: order_of(raw.apts.order)?,
                    ..tr
                },
                parallel: raw.apts.parallel,
            }),
            "tr" => Method::Tr(tr),
            "gd" => Method::Baseline(BaselineConfig {
                momentum: raw.gd.momentum,
                ..BaselineConfig::gd(raw.gd.learning_rate)
            }),
            "sgd" => Method::Baseline(BaselineConfig::sgd(raw.sgd.learning_rate, raw.sgd.momentum)),
            "adam" => Method::Baseline(BaselineConfig {
                beta1: raw.adam.beta1,
                beta2: raw.adam.beta2,
                epsilon: raw.adam.epsilon,
                ..BaselineConfig::adam(raw.adam.learning_rate)
            }),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown optimizer {other:?} (expected apts, tr, gd, sgd or adam)"
                )))
            }
        };
        method.validate()?;
        if matches!(&method, Method::Baseline(b) if b.kind == BaselineKind::Gd) && raw.batches.count != 1 {
            return Err(Error::InvalidConfig("gd is full-batch; use sgd for a batch count above 1".into()));
        }

        Ok(Self {
            label: raw.label.unwrap_or_else(|| kind.to_string()),
            layers: raw.model.layers,
            data,
            batch_count: raw.batches.count,
            overlap: raw.batches.overlap,
            batch_seed: raw.batches.seed,
            method,
            partition_seed: raw.apts.partition_seed,
            epochs: raw.epochs,
            trials: raw.trials,
            seed: raw.seed,
            out_dir: base.join(raw.output.dir),
            wall_clock: raw.wall_clock,
        })
    }

    /// The method with run-level seeds filled in.
    pub fn resolved_method(&self) -> Method {
        match &self.method {
            Method::Apts(c) => Method::Apts(AptsConfig {
                partition_seed: self.partition_seed.unwrap_or(self.seed),
                ..c.clone()
            }),
            m => m.clone(),
        }
    }

    pub fn model(&self) -> Result<Mlp, Error> {
        Ok(Mlp::new(&MlpSpec::new(self.layers.clone(), self.seed))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub epoch: usize,
    pub train_loss: Stats,
    pub test_loss: Option<Stats>,
    pub test_accuracy: Option<Stats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean: mean.clamp(min, max),
            min,
            max,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub label: String,
    /// Epoch records per trial.
    pub trials: Vec<Vec<EpochRecord>>,
    pub steps: Vec<LoggedStep>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

pub fn summarize(trials: &[Vec<EpochRecord>]) -> Vec<SummaryRow> {
    let epochs = trials.iter().map(Vec::len).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let col = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Option<Stats> {
                let v: Option<Vec<f64>> = trials.iter().map(|t| f(&t[e])).collect();
                v.map(|v| Stats::of(&v))
            };
            SummaryRow {
                epoch: trials[0][e].epoch,
                train_loss: col(&|r| Some(r.train_loss)).expect("train loss is always present"),
                test_loss: col(&|r| r.test_loss),
                test_accuracy: col(&|r| r.test_accuracy),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn stats_cells(s: Option<Stats>) -> String {
    match s {
        Some(s) => format!("{},{},{}", s.mean, s.min, s.max),
        None => ",,".to_string(),
    }
}

pub fn epoch_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.trial,
            r.epoch,
            r.train_loss,
            opt(r.test_loss),
            opt(r.test_accuracy),
            opt(r.global_radius),
            r.fdl_activations,
            r.wall_seconds
        );
    }
    out
}

pub fn steps_csv(steps: &[LoggedStep]) -> String {
    let mut out = String::from(STEP_HEADER);
    out.push('\n');
    for s in steps {
        let r = &s.record;
        let locals: Vec<String> = r.local_iterations.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.trial,
            s.epoch,
            s.batch,
            r.step,
            r.loss_before,
            r.loss_half,
            r.loss_after,
            r.delta_before,
            r.delta_after,
            r.precond_norm,
            r.fdl.activations,
            r.fdl.final_w,
            locals.join(";"),
            r.accepted,
            opt(r.rho)
        );
    }
    out
}

const SUMMARY_HEADER: &str = "epoch,train_loss_mean,train_loss_min,train_loss_max,test_loss_mean,test_loss_min,\
test_loss_max,test_accuracy_mean,test_accuracy_min,test_accuracy_max";

fn summary_line(row: &SummaryRow) -> String {
    format!(
        "{},{},{},{}",
        row.epoch,
        stats_cells(Some(row.train_loss)),
        stats_cells(row.test_loss),
        stats_cells(row.test_accuracy)
    )
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&summary_line(row));
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs every trial in memory; nothing is written.
pub fn run_trials(config: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    let mlp = config.model()?;
    let (train_set, test_set) = config.data.load()?;
    if train_set.features != mlp.input_features() {
        return Err(Error::InvalidConfig(format!(
            "model input width {} but data has {} features",
            mlp.input_features(),
            train_set.features
        )));
    }
    let plan = make_batches(
        train_set.len(),
        config.batch_count,
        config.overlap,
        config.batch_seed.unwrap_or(config.seed),
    )?;
    let batches = plan.batches(&train_set)?;
    let train_batch = train_set.to_batch()?;
    let test_batch = test_set.as_ref().map(Dataset::to_batch).transpose()?;
    let method = config.resolved_method();

    let mut trials = Vec::with_capacity(config.trials);
    let mut steps = Vec::new();
    for t in 0..config.trials {
        let seed = config.seed.wrapping_add(t as u64);
        let setup = TrainSetup {
            mlp: &mlp,
            batches: &batches,
            train: &train_batch,
            test: test_batch.as_ref(),
            trial: t,
            wall_clock: config.wall_clock,
        };
        log::info!("{}: trial {t} (seed {seed})", config.label);
        let outcome = train(&setup, &method, mlp.init_params(seed).values, config.epochs)
            .map_err(|e| Error::InvalidConfig(format!("{} trial {t} failed: {e}", config.label)))?;
        trials.push(outcome.epochs);
        steps.extend(outcome.steps);
    }
    let summary = summarize(&trials);
    Ok(ExperimentReport {
        label: config.label.clone(),
        trials,
        steps,
        summary,
        files: Vec::new(),
    })
}

/// Runs all trials and writes `<label>_trial<t>.csv`, `<label>_summary.csv`
/// and, for APTS, `<label>_steps.csv` into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    let mut report = run_trials(config)?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (t, records) in report.trials.iter().enumerate() {
        let path = dir.join(format!("{}_trial{t}.csv", config.label));
        write(&path, &epoch_csv(records))?;
        report.files.push(path);
    }
    let path = dir.join(format!("{}_summary.csv", config.label));
    write(&path, &summary_csv(&report.summary))?;
    report.files.push(path);
    if matches!(config.method, Method::Apts(_)) {
        let path = dir.join(format!("{}_steps.csv", config.label));
        write(&path, &steps_csv(&report.steps))?;
        report.files.push(path);
    }
    Ok(report)
}

/// Runs several experiments on the same data and epoch count and merges
/// their summaries into one table keyed by (label, epoch).
pub fn compare(configs: &[ExperimentConfig]) -> Result<(String, Vec<ExperimentReport>), Error> {
    let first = configs
        .first()
        .ok_or_else(|| Error::InvalidConfig("compare needs at least one config".into()))?;
    for c in &configs[1..] {
        if c.data != first.data {
            return Err(Error::InvalidConfig(format!(
                "{} and {} use different datasets",
                first.label, c.label
            )));
        }
        if c.epochs != first.epochs {
            return Err(Error::InvalidConfig(format!(
                "{} runs {} epochs, {} runs {}",
                first.label, first.epochs, c.label, c.epochs
            )));
        }
    }
    let mut table = format!("label,{SUMMARY_HEADER}\n");
    let mut reports = Vec::with_capacity(configs.len());
    for c in configs {
        let report = run_experiment(c)?;
        for row in &report.summary {
            let _ = writeln!(table, "{},{}", c.label, summary_line(row));
        }
        reports.push(report);
    }
    Ok((table, reports))
}

/// Segment to subdomain map as a tab-separated table.
pub fn inspect_partition(config: &ExperimentConfig) -> Result<String, Error> {
    let mlp = config.model()?;
    let Method::Apts(apts) = config.resolved_method() else {
        return Err(Error::InvalidConfig(format!("{} is not an APTS config", config.label)));
    };
    let partition = make_partition(mlp.segment_count(), apts.subdomains, apts.partition_seed)?;
    let mut out = String::from("segment\tname\tshape\tparameters\tsubdomain\n");
    for (k, seg) in mlp.segments().iter().enumerate() {
        let shape: Vec<String> = seg.shape.iter().map(usize::to_string).collect();
        let owner = partition.owner(k).expect("partition covers every segment");
        let _ = writeln!(out, "{k}\t{}\t{}\t{}\t{owner}", seg.name, shape.join("x"), seg.len);
    }
    Ok(out)
}
