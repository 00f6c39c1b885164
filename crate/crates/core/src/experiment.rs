//! Experiment harness: single fits with metrics, regularization sweeps,
//! multi-seed method comparisons and the orthogonal-but-identifiable demo.
//!
//! Experiments are described by an [`ExperimentConfig`] (TOML). Named presets
//! ship with the crate; command-line flags override individual fields.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{accuracy, threshold_probe, unfairness, AuditConfig, AuditResult};
use crate::bcd::{fit, Fit, Regularizer, TrainConfig};
use crate::datasets::{
    counterexample, counterexample_dataset, counterexample_labels, gen_synthetic, load_contraceptive, onehot,
    ContraceptiveOptions, LabeledDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::io::{read_observed, write_mat, write_observed};
use crate::kernel::{
    fatr_orthogonality, hsic_linear, khsic, normalized_khsic, normalized_khsic_with, Kernel, KernelConfig,
};
use crate::tensor::{relative_residual, Mat};

pub const METRICS_HEADER: &str =
    "method,lambda,seed,relative_residual,unfairness,normalized_khsic,khsic,hsic,orthogonality_norm,wall_time_seconds";

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FAIRTENSOR_OUT";
/// Environment variable overriding the contraceptive data file location.
pub const CMC_PATH_ENV: &str = "FAIRTENSOR_CMC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bcd,
    Fatr,
    Hsic,
    Khsic,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bcd, Method::Fatr, Method::Hsic, Method::Khsic];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bcd => "bcd",
            Method::Fatr => "fatr",
            Method::Hsic => "hsic",
            Method::Khsic => "khsic",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected bcd, fatr, hsic or khsic)")))
    }
}

fn one() -> f64 {
    1.0
}

/// One method with its regularization strength and optional step overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// `lambda` for HSIC/KHSIC, `lambda_o` for FATR; ignored for BCD.
    #[serde(default)]
    pub lambda: f64,
    /// FATR ridge weight on `A`.
    #[serde(default)]
    pub lambda_l2: f64,
    #[serde(default = "one")]
    pub gamma_a: f64,
    #[serde(default = "one")]
    pub gamma_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_bc: Option<f64>,
}

impl MethodConfig {
    pub fn new(method: Method, lambda: f64) -> Self {
        Self {
            method,
            lambda,
            lambda_l2: 0.0,
            gamma_a: 1.0,
            gamma_s: 1.0,
            lr_a: None,
            lr_bc: None,
        }
    }

    pub fn regularizer(&self) -> Regularizer {
        match self.method {
            Method::Bcd => Regularizer::None,
            Method::Fatr => Regularizer::Fatr {
                lambda_o: self.lambda,
                lambda_l2: self.lambda_l2,
            },
            Method::Hsic => Regularizer::Hsic { lambda: self.lambda },
            Method::Khsic => Regularizer::Khsic {
                lambda: self.lambda,
                gamma_a: self.gamma_a,
                gamma_s: self.gamma_s,
            },
        }
    }

    /// Reported strength (`0` for BCD).
    pub fn strength(&self) -> f64 {
        match self.method {
            Method::Bcd => 0.0,
            _ => self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    /// Two-population synthetic tensor, regenerated from each run's seed.
    Synthetic {
        #[serde(default)]
        small: bool,
    },
    /// UCI contraceptive-method-choice matrix.
    Contraceptive {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default)]
        drop_sensitive: bool,
    },
    /// The 6 x 4 rank-1 matrix built on the orthogonal-but-identifiable factor.
    Counterexample,
    /// `X.txt` and `labels.txt` in a directory (as written by `gen-synth`).
    Files { dir: PathBuf },
}

/// Location of the vendored contraceptive data, overridable by environment.
pub fn default_cmc_path() -> PathBuf {
    std::env::var_os(CMC_PATH_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cmc.data"))
}

impl DatasetConfig {
    /// Parses a `--dataset` value: a known name or a directory of files.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "synthetic" | "synth" => DatasetConfig::Synthetic { small: false },
            "synthetic-small" => DatasetConfig::Synthetic { small: true },
            "contraceptive" | "cmc" => DatasetConfig::Contraceptive {
                path: None,
                drop_sensitive: false,
            },
            "counterexample" => DatasetConfig::Counterexample,
            dir if Path::new(dir).is_dir() => DatasetConfig::Files { dir: dir.into() },
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        })
    }

    fn synthetic_spec(small: bool, seed: u64) -> SyntheticSpec {
        if small {
            SyntheticSpec::small(seed)
        } else {
            SyntheticSpec::full(seed)
        }
    }

    /// Decomposition rank used when the config does not set one.
    pub fn default_rank(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { small } => Self::synthetic_spec(*small, 0).fit_rank,
            DatasetConfig::Contraceptive { .. } => 6,
            DatasetConfig::Counterexample => 1,
            DatasetConfig::Files { .. } => 5,
        }
    }

    /// Default probe split: 90% training rows for the contraceptive data.
    pub fn default_train_fraction(&self) -> f64 {
        match self {
            DatasetConfig::Contraceptive { .. } => 0.9,
            _ => 0.75,
        }
    }

    pub fn load(&self, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetConfig::Synthetic { small } => Ok(gen_synthetic(&Self::synthetic_spec(*small, seed))?.data),
            DatasetConfig::Contraceptive { path, drop_sensitive } => {
                let path = path.clone().unwrap_or_else(default_cmc_path);
                load_contraceptive(
                    &path,
                    &ContraceptiveOptions {
                        drop_sensitive_from_x: *drop_sensitive,
                        ..Default::default()
                    },
                )
            }
            DatasetConfig::Counterexample => Ok(counterexample_dataset()),
            DatasetConfig::Files { dir } => load_dataset_dir(dir),
        }
    }
}

/// Writes `X.txt`, `S.txt` and `labels.txt` into `dir`.
pub fn save_dataset_dir(dir: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_observed(dir.join("X.txt"), &data.x)?;
    write_mat(dir.join("S.txt"), &data.s)?;
    let mut labels = String::new();
    for l in &data.labels {
        labels.push_str(if *l == 1 { "1\n" } else { "0\n" });
    }
    std::fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let x = read_observed(dir.join("X.txt"))?;
    let labels = std::fs::read_to_string(dir.join("labels.txt"))?
        .split_whitespace()
        .map(|t| match t {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::Parse(format!("label {other:?} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(x, onehot(&labels), labels, format!("files {}", dir.display()))
}

/// Shared optimizer settings; per-method entries may override the steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    pub lr_a: f64,
    pub lr_bc: f64,
    #[serde(default)]
    pub normalize_residual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

fn default_inner_steps() -> usize {
    200
}

/// Evenly spaced values on `[lo, hi]`, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linspace {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Linspace {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => vec![],
            1 => vec![self.lo],
            n => (0..n)
                .map(|i| {
                    if i == n - 1 {
                        self.hi
                    } else {
                        self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    Values(Vec<f64>),
    Linear(Linspace),
    Segments(Vec<Linspace>),
}

impl LambdaGrid {
    /// Grid values in order; a value repeated at a segment boundary is kept once.
    pub fn values(&self) -> Vec<f64> {
        let mut out = match self {
            LambdaGrid::Values(v) => v.clone(),
            LambdaGrid::Linear(l) => l.values(),
            LambdaGrid::Segments(segs) => segs.iter().flat_map(Linspace::values).collect(),
        };
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub settings: MethodConfig,
    pub grid: LambdaGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditConfig>,
    /// RBF width for the reported dependence metrics.
    #[serde(default = "one")]
    pub metric_gamma: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub sweeps: Vec<SweepConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub const PRESET_NAMES: [&str; 6] = ["fig1a", "fig1b", "fig2a", "fig2b", "fig3a", "fig3b"];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig1a" => include_str!("../presets/fig1a.toml"),
        "fig1b" => include_str!("../presets/fig1b.toml"),
        "fig2a" => include_str!("../presets/fig2a.toml"),
        "fig2b" => include_str!("../presets/fig2b.toml"),
        "fig3a" => include_str!("../presets/fig3a.toml"),
        "fig3b" => include_str!("../presets/fig3b.toml"),
        _ => return None,
    })
}

/// Flag-level overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub inner_steps: Option<usize>,
    pub lr_a: Option<f64>,
    pub lr_bc: Option<f64>,
    pub seed: Option<u64>,
    pub small: bool,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| {
            Error::Config(format!("unknown preset {name:?} (available: {})", PRESET_NAMES.join(", ")))
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A bare single-method config on `dataset`.
    pub fn single(dataset: DatasetConfig, method: MethodConfig, train: TrainSection) -> Self {
        Self {
            name: "custom".into(),
            description: String::new(),
            dataset,
            train,
            audit: None,
            metric_gamma: 1.0,
            seeds: vec![0],
            methods: vec![method],
            sweeps: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        KernelConfig::new(self.metric_gamma)?;
        for m in self.methods.iter().chain(self.sweeps.iter().map(|s| &s.settings)) {
            self.train_config(m, 0)?.validate()?;
        }
        self.audit_config(0).validate()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.small {
            if let DatasetConfig::Synthetic { small } = &mut self.dataset {
                *small = true;
            }
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(n) = o.inner_steps {
            self.train.inner_steps = n;
        }
        // explicit step flags beat per-method entries
        let steps = |m: &mut MethodConfig| {
            if o.lr_a.is_some() {
                m.lr_a = o.lr_a;
            }
            if o.lr_bc.is_some() {
                m.lr_bc = o.lr_bc;
            }
        };
        if let Some(v) = o.lr_a {
            self.train.lr_a = v;
        }
        if let Some(v) = o.lr_bc {
            self.train.lr_bc = v;
        }
        self.methods.iter_mut().for_each(steps);
        self.sweeps.iter_mut().for_each(|s| steps(&mut s.settings));
        if let Some(method) = o.method {
            self.methods.retain(|m| m.method == method);
            self.sweeps.retain(|s| s.settings.method == method);
            if self.methods.is_empty() {
                let m = self.sweeps.first().map(|s| s.settings.clone()).unwrap_or_else(|| {
                    let mut m = MethodConfig::new(method, 0.0);
                    m.lr_a = o.lr_a;
                    m.lr_bc = o.lr_bc;
                    m
                });
                self.methods.push(m);
            }
        }
        if let Some(l) = o.lambda {
            self.methods.iter_mut().for_each(|m| m.lambda = l);
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
    }

    /// The method a single fit uses: the first configured method, else the
    /// first sweep at the top of its grid.
    pub fn fit_method(&self) -> Option<MethodConfig> {
        self.methods.first().cloned().or_else(|| {
            self.sweeps.first().map(|s| {
                let mut m = s.settings.clone();
                m.lambda = s.grid.values().last().copied().unwrap_or(0.0);
                m
            })
        })
    }

    pub fn rank(&self) -> usize {
        self.train.rank.unwrap_or_else(|| self.dataset.default_rank())
    }

    pub fn train_config(&self, m: &MethodConfig, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            rank: self.rank(),
            epochs: self.train.epochs,
            inner_steps: self.train.inner_steps,
            lr_a: m.lr_a.unwrap_or(self.train.lr_a),
            lr_bc: m.lr_bc.unwrap_or(self.train.lr_bc),
            regularizer: m.regularizer(),
            seed,
            normalize_residual: self.train.normalize_residual,
        })
    }

    pub fn audit_config(&self, seed: u64) -> AuditConfig {
        let mut cfg = self.audit.clone().unwrap_or_else(|| AuditConfig {
            train_fraction: self.dataset.default_train_fraction(),
            ..Default::default()
        });
        cfg.seed = seed;
        cfg
    }

    /// All (method settings, seed) points of the configured sweeps.
    pub fn sweep_points(&self) -> Vec<(MethodConfig, u64)> {
        let mut points = Vec::new();
        for sweep in &self.sweeps {
            for lambda in sweep.grid.values() {
                for &seed in &self.seeds {
                    let mut m = sweep.settings.clone();
                    m.lambda = lambda;
                    points.push((m, seed));
                }
            }
        }
        points
    }
}

/// Per-fit metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub relative_residual: f64,
    pub unfairness: f64,
    pub normalized_khsic: f64,
    pub khsic: f64,
    pub hsic: f64,
    pub orthogonality_norm: f64,
    pub wall_time_seconds: f64,
}

impl MetricsRecord {
    fn diverged(method: Method, lambda: f64, seed: u64, wall: f64) -> Self {
        Self {
            method,
            lambda,
            seed,
            relative_residual: f64::NAN,
            unfairness: f64::NAN,
            normalized_khsic: f64::NAN,
            khsic: f64::NAN,
            hsic: f64::NAN,
            orthogonality_norm: f64::NAN,
            wall_time_seconds: wall,
        }
    }
}

/// One audit row: `method,lambda,accuracy,unfairness,majority_floor,n_test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub method: Method,
    pub lambda: f64,
    pub accuracy: f64,
    pub unfairness: f64,
    pub majority_floor: f64,
    pub n_test: usize,
}

impl AuditRecord {
    pub fn new(method: Method, lambda: f64, r: &AuditResult) -> Self {
        Self {
            method,
            lambda,
            accuracy: r.accuracy,
            unfairness: r.unfairness,
            majority_floor: r.majority_floor,
            n_test: r.n_test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub fit: Fit,
    pub audit: AuditResult,
    pub metrics: MetricsRecord,
}

/// Dependence metrics of `a` against `s`; an undefined alignment is NaN.
pub fn dependence_metrics(a: &Mat, s: &Mat, gamma: f64) -> Result<(f64, f64, f64, f64)> {
    let g = KernelConfig::new(gamma)?;
    let rho = match normalized_khsic(a, s, g, g) {
        Ok(v) => v,
        Err(Error::UndefinedAlignment(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((rho, khsic(a, s, g, g)?, hsic_linear(a, s)?, fatr_orthogonality(a, s)?.sqrt()))
}

/// Fits one model, audits its `A` and collects the metrics row.
pub fn run_fit(
    data: &LabeledDataset,
    method: &MethodConfig,
    train: &TrainConfig,
    audit: &AuditConfig,
    metric_gamma: f64,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let fitted = fit(&data.x, &data.s, train)?;
    let audit_result = unfairness(&fitted.model.a, &data.labels, audit)?;
    let (rho, k, h, orth) = dependence_metrics(&fitted.model.a, &data.s, metric_gamma)?;
    let metrics = MetricsRecord {
        method: method.method,
        lambda: method.strength(),
        seed: train.seed,
        relative_residual: relative_residual(&data.x, &fitted.model)?,
        unfairness: audit_result.unfairness,
        normalized_khsic: rho,
        khsic: k,
        hsic: h,
        orthogonality_norm: orth,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        fit: fitted,
        audit: audit_result,
        metrics,
    })
}

/// Fits the config's single method (see [`ExperimentConfig::fit_method`]) on
/// its first seed. Returns the data and method actually used.
pub fn fit_single(cfg: &ExperimentConfig) -> Result<(LabeledDataset, MethodConfig, RunOutcome)> {
    let method = cfg
        .fit_method()
        .ok_or_else(|| Error::Config("no method configured".into()))?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let key_seed = if matches!(cfg.dataset, DatasetConfig::Synthetic { .. }) { seed } else { 0 };
    let data = cfg.dataset.load(key_seed)?;
    let train = cfg.train_config(&method, seed)?;
    let outcome = run_fit(&data, &method, &train, &cfg.audit_config(seed), cfg.metric_gamma)?;
    Ok((data, method, outcome))
}

/// A finished sweep or comparison point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub metrics: MetricsRecord,
    pub majority_floor: f64,
    /// Divergence diagnostics; metric columns are NaN when set.
    pub diverged: Option<String>,
}

impl PointResult {
    pub fn ok(&self) -> bool {
        self.diverged.is_none()
    }
}

fn load_per_seed(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<BTreeMap<u64, LabeledDataset>> {
    let mut out = BTreeMap::new();
    for &seed in seeds {
        if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(seed) {
            // only the synthetic data depends on the seed
            let key_seed = if matches!(cfg.dataset, DatasetConfig::Synthetic { .. }) { seed } else { 0 };
            slot.insert(cfg.dataset.load(key_seed)?);
        }
    }
    Ok(out)
}

/// Runs every point, in parallel, and returns results in a fixed order:
/// sorted by method, then lambda, then seed.
pub fn run_points(cfg: &ExperimentConfig, points: &[(MethodConfig, u64)]) -> Result<Vec<PointResult>> {
    let seeds: Vec<u64> = points.iter().map(|p| p.1).collect();
    let data = load_per_seed(cfg, &seeds)?;
    let mut results = points
        .par_iter()
        .map(|(m, seed)| {
            let train = cfg.train_config(m, *seed)?;
            let audit = cfg.audit_config(*seed);
            let start = Instant::now();
            match run_fit(&data[seed], m, &train, &audit, cfg.metric_gamma) {
                Ok(out) => Ok(PointResult {
                    metrics: out.metrics,
                    majority_floor: out.audit.majority_floor,
                    diverged: None,
                }),
                Err(e @ Error::Divergence { .. }) => Ok(PointResult {
                    metrics: MetricsRecord::diverged(m.method, m.strength(), *seed, start.elapsed().as_secs_f64()),
                    majority_floor: f64::NAN,
                    diverged: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|x, y| {
        x.metrics
            .method
            .cmp(&y.metrics.method)
            .then(x.metrics.lambda.total_cmp(&y.metrics.lambda))
            .then(x.metrics.seed.cmp(&y.metrics.seed))
    });
    Ok(results)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<PointResult>> {
    if cfg.sweeps.is_empty() {
        return Err(Error::Config(format!("config {:?} defines no sweeps", cfg.name)));
    }
    run_points(cfg, &cfg.sweep_points())
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub lambda: f64,
    pub runs: usize,
    pub diverged: usize,
    pub relative_residual: Stat,
    pub unfairness: Stat,
    pub majority_floor: Stat,
    pub normalized_khsic: Stat,
    pub orthogonality_norm: Stat,
}

/// Flat CSV row of a [`MethodSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub lambda: f64,
    pub runs: usize,
    pub diverged: usize,
    pub relative_residual_mean: f64,
    pub relative_residual_std: f64,
    pub unfairness_mean: f64,
    pub unfairness_std: f64,
    pub majority_floor_mean: f64,
    pub normalized_khsic_mean: f64,
    pub normalized_khsic_std: f64,
    pub orthogonality_norm_mean: f64,
    pub orthogonality_norm_std: f64,
}

impl From<&MethodSummary> for SummaryRow {
    fn from(s: &MethodSummary) -> Self {
        Self {
            method: s.method,
            lambda: s.lambda,
            runs: s.runs,
            diverged: s.diverged,
            relative_residual_mean: s.relative_residual.mean,
            relative_residual_std: s.relative_residual.std,
            unfairness_mean: s.unfairness.mean,
            unfairness_std: s.unfairness.std,
            majority_floor_mean: s.majority_floor.mean,
            normalized_khsic_mean: s.normalized_khsic.mean,
            normalized_khsic_std: s.normalized_khsic.std,
            orthogonality_norm_mean: s.orthogonality_norm.mean,
            orthogonality_norm_std: s.orthogonality_norm.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<PointResult>,
    pub summary: Vec<MethodSummary>,
}

impl CompareReport {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Every configured method on every seed, summarized per method over the
/// runs that converged.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    if cfg.methods.is_empty() {
        return Err(Error::Config(format!("config {:?} defines no methods", cfg.name)));
    }
    let points: Vec<(MethodConfig, u64)> = cfg
        .methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m.clone(), s)))
        .collect();
    let rows = run_points(cfg, &points)?;
    let summary = cfg
        .methods
        .iter()
        .map(|m| {
            let mine: Vec<&PointResult> = rows
                .iter()
                .filter(|r| r.metrics.method == m.method && r.metrics.lambda == m.strength())
                .collect();
            let good: Vec<&PointResult> = mine.iter().copied().filter(|r| r.ok()).collect();
            let stat = |f: fn(&PointResult) -> f64| Stat::of(&good.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m.method,
                lambda: m.strength(),
                runs: mine.len(),
                diverged: mine.len() - good.len(),
                relative_residual: stat(|r| r.metrics.relative_residual),
                unfairness: stat(|r| r.metrics.unfairness),
                majority_floor: stat(|r| r.majority_floor),
                normalized_khsic: stat(|r| r.metrics.normalized_khsic),
                orthogonality_norm: stat(|r| r.metrics.orthogonality_norm),
            }
        })
        .collect();
    Ok(CompareReport { rows, summary })
}

/// Writes `# `-prefixed comment lines, then the metrics CSV, then one
/// comment per diverged point.
pub fn write_metrics_csv<W: Write>(mut w: W, comments: &[String], rows: &[PointResult]) -> Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        if rows.is_empty() {
            csv.write_record(METRICS_HEADER.split(','))?;
        }
        for r in rows {
            csv.serialize(&r.metrics)?;
        }
        csv.flush()?;
    }
    for r in rows {
        if let Some(msg) = &r.diverged {
            writeln!(
                w,
                "# diverged: method={} lambda={} seed={}: {msg}",
                r.metrics.method, r.metrics.lambda, r.metrics.seed
            )?;
        }
    }
    Ok(())
}

/// Reads a metrics CSV, skipping comment lines.
pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {:?}", header.join(","))));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?)
}

pub fn write_summary_csv<W: Write>(w: W, summary: &[MethodSummary]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for s in summary {
        csv.serialize(SummaryRow::from(s))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_audit_csv<W: Write>(w: W, rows: &[AuditRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// Provenance comments for result files: tool version, dataset and the
/// fully resolved configuration.
pub fn provenance(cfg: &ExperimentConfig, data_note: &str) -> Result<Vec<String>> {
    Ok(vec![
        format!("fairtensor {}", env!("CARGO_PKG_VERSION")),
        format!("experiment: {}", cfg.name),
        format!("dataset: {data_note}"),
        format!("resolved config:\n{}", cfg.to_toml()?),
    ])
}

/// Companion gnuplot script for a sweep CSV.
pub fn gnuplot_script(csv_name: &str, title: &str) -> String {
    format!(
        "# gnuplot script for {csv_name}\n\
         set datafile separator ','\n\
         set datafile commentschars '#'\n\
         set key autotitle columnhead\n\
         set terminal pngcairo size 1200,450\n\
         set output '{stem}.png'\n\
         set multiplot layout 1,3 title '{title}'\n\
         set xlabel 'lambda'; set ylabel 'unfairness'\n\
         plot '{csv_name}' using 2:5 with points pt 7 notitle\n\
         set xlabel 'normalized KHSIC'; set ylabel 'unfairness'\n\
         plot '{csv_name}' using 6:5 with points pt 7 notitle\n\
         set xlabel 'relative residual'; set ylabel 'unfairness'\n\
         plot '{csv_name}' using 4:5 with points pt 7 notitle\n\
         unset multiplot\n",
        stem = csv_name.trim_end_matches(".csv"),
    )
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The orthogonal-yet-identifiable factor pair and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub a: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub orthogonality_norm: f64,
    /// RBF (gamma = 1) centered kernel alignment.
    pub normalized_khsic: f64,
    /// Linear-kernel alignment, which cannot see the dependence.
    pub linear_alignment: f64,
    pub threshold_probe_accuracy: f64,
    pub checks: Vec<Check>,
}

impl CounterexampleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn counterexample_report() -> Result<CounterexampleReport> {
    let (a, s) = counterexample(2);
    let orth = fatr_orthogonality(&a, &s)?.sqrt();
    let g = KernelConfig::default();
    let rho = normalized_khsic(&a, &s, g, g)?;
    let linear = match normalized_khsic_with(&a, &s, Kernel::Linear, Kernel::Linear) {
        Ok(v) => v,
        Err(Error::UndefinedAlignment(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let acc = accuracy(&threshold_probe(&a), &counterexample_labels());
    let rows = |m: &Mat| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
    let checks = vec![
        Check {
            name: "orthogonality_norm == 0".into(),
            passed: orth == 0.0,
            detail: format!("||A^T S||_F = {orth}"),
        },
        Check {
            name: "threshold_probe_accuracy == 1".into(),
            passed: acc == 1.0,
            detail: format!("accuracy = {acc}"),
        },
        Check {
            name: "normalized_khsic > 0.1 while linear alignment == 0".into(),
            passed: rho > 0.1 && linear.abs() < 1e-12,
            detail: format!("rbf = {rho:.6}, linear = {linear:.3e}"),
        },
    ];
    Ok(CounterexampleReport {
        a: rows(&a),
        s: rows(&s),
        orthogonality_norm: orth,
        normalized_khsic: rho,
        linear_alignment: linear,
        threshold_probe_accuracy: acc,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
            assert!(!cfg.methods.is_empty() || !cfg.sweeps.is_empty(), "{name}");
        }
        assert!(ExperimentConfig::preset("fig9").is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = ExperimentConfig::preset("fig2b").unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn grids() {
        let l = Linspace { lo: 0.0, hi: 0.1, count: 20 };
        let v = l.values();
        assert_eq!(v.len(), 20);
        assert_eq!((v[0], v[19]), (0.0, 0.1));
        let seg = LambdaGrid::Segments(vec![
            Linspace { lo: 0.0, hi: 0.66, count: 15 },
            Linspace { lo: 0.66, hi: 4.8, count: 15 },
        ]);
        assert_eq!(seg.values().len(), 29);
        assert_eq!(LambdaGrid::Values(vec![1.0, 2.0]).values(), vec![1.0, 2.0]);
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::preset("fig2b").unwrap();
        cfg.apply(&Overrides {
            method: Some(Method::Khsic),
            lambda: Some(2.5),
            epochs: Some(3),
            lr_bc: Some(0.01),
            seed: Some(7),
            small: true,
            ..Default::default()
        });
        assert_eq!(cfg.methods.len(), 1);
        assert_eq!(cfg.methods[0].lambda, 2.5);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.dataset, DatasetConfig::Synthetic { small: true });
        let t = cfg.train_config(&cfg.methods[0], 7).unwrap();
        assert_eq!((t.epochs, t.lr_bc, t.seed), (3, 0.01, 7));
    }

    #[test]
    fn bad_config_is_rejected() {
        let text = "name = 'x'\n[dataset]\nkind = 'synthetic'\n[train]\nepochs = 0\nlr_a = 1.0\nlr_bc = 1.0\n\
                    [[methods]]\nmethod = 'bcd'\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("name = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // ties get mean ranks: x ranks 1,2,3,4 and y ranks 1.5,1.5,3,4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn counterexample_checks_pass() {
        let r = counterexample_report().unwrap();
        assert!(r.passed(), "{:?}", r.checks);
        assert_eq!(r.orthogonality_norm, 0.0);
        assert!((r.normalized_khsic - 0.4649858931854296).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_roundtrip_and_flags() {
        let rec = MetricsRecord {
            method: Method::Khsic,
            lambda: 0.5,
            seed: 3,
            relative_residual: 0.1,
            unfairness: 0.25,
            normalized_khsic: 0.05,
            khsic: 1e-3,
            hsic: 2.0,
            orthogonality_norm: 3.0,
            wall_time_seconds: 0.01,
        };
        let rows = vec![
            PointResult { metrics: rec.clone(), majority_floor: 0.0, diverged: None },
            PointResult {
                metrics: MetricsRecord::diverged(Method::Hsic, 1.0, 0, 0.0),
                majority_floor: f64::NAN,
                diverged: Some("objective diverged at epoch 2 while updating B".into()),
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &["hello".into()], &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# hello"));
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(text.contains("# diverged: method=hsic lambda=1 seed=0"));
        let back = read_metrics_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0], rec);
        assert!(back[1].relative_residual.is_nan());
    }

    #[test]
    fn audit_row_header() {
        let r = AuditRecord {
            method: Method::Bcd,
            lambda: 0.0,
            accuracy: 0.75,
            unfairness: 0.25,
            majority_floor: 0.1,
            n_test: 40,
        };
        let mut buf = Vec::new();
        write_audit_csv(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,lambda,accuracy,unfairness,majority_floor,n_test\nbcd,0.0,0.75,0.25,0.1,40\n"
        );
    }
}
