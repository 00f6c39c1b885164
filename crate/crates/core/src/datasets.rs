//! Data generators and loaders.
//!
//! Sensitive matrices are one-hot with the row layout `[label, 1 - label]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{reconstruct, FactorModel, Mat, Observed};

/// Observed data with the sensitive matrix and group labels of its first mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Observed,
    pub s: Mat,
    pub labels: Vec<u8>,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(x: Observed, s: Mat, labels: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        let n = x.sensitive_size();
        if s.rows() != n || labels.len() != n {
            return Err(Error::Dimension(format!(
                "sensitive mode has {n} entities, S has {} rows, {} labels",
                s.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            x,
            s,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

/// One-hot sensitive matrix with rows `[label, 1 - label]`.
pub fn onehot(labels: &[u8]) -> Mat {
    Mat::from_fn(labels.len(), 2, |i, j| {
        let l = f64::from(labels[i]);
        if j == 0 {
            l
        } else {
            1.0 - l
        }
    })
}

/// Two-population synthetic CP tensor.
///
/// Half of the rows of the true `A` are Gaussian with mean `[1, 2, ..., R]`
/// and covariance `diag(R/R, (R-1)/R, ..., 1/R)` (label 1); the other half
/// are `U[0, 1)` per coordinate (label 0). `B` and `C` are `U[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sensitive: usize,
    pub dim_b: usize,
    pub dim_c: usize,
    pub true_rank: usize,
    pub fit_rank: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 200 x 100 x 100, true rank 10, fit rank 8.
    pub fn full(seed: u64) -> Self {
        Self {
            n_sensitive: 200,
            dim_b: 100,
            dim_c: 100,
            true_rank: 10,
            fit_rank: 8,
            seed,
        }
    }

    /// Desk-scale variant: 60 x 30 x 30, true rank 6, fit rank 5.
    pub fn small(seed: u64) -> Self {
        Self {
            n_sensitive: 60,
            dim_b: 30,
            dim_c: 30,
            true_rank: 6,
            fit_rank: 5,
            seed,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        (1..=self.true_rank).map(|r| r as f64).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        let r = self.true_rank as f64;
        (0..self.true_rank).map(|i| (r - i as f64) / r).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sensitive < 2 || self.dim_b == 0 || self.dim_c == 0 || self.true_rank == 0 || self.fit_rank == 0 {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub data: LabeledDataset,
    pub truth: FactorModel,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_gauss = spec.n_sensitive / 2;
    let normals: Vec<Normal<f64>> = spec
        .mean()
        .into_iter()
        .zip(spec.variances())
        .map(|(m, v)| Normal::new(m, v.sqrt()).expect("positive variance"))
        .collect();
    let rank = spec.true_rank;
    let mut a = Mat::zeros(spec.n_sensitive, rank);
    for i in 0..spec.n_sensitive {
        for (r, dist) in normals.iter().enumerate() {
            a[(i, r)] = if i < n_gauss {
                dist.sample(&mut rng)
            } else {
                rng.random::<f64>()
            };
        }
    }
    let b = Mat::from_fn(spec.dim_b, rank, |_, _| rng.random::<f64>());
    let c = Mat::from_fn(spec.dim_c, rank, |_, _| rng.random::<f64>());
    let truth = FactorModel::new(a, b, Some(c))?;
    let labels: Vec<u8> = (0..spec.n_sensitive).map(|i| u8::from(i < n_gauss)).collect();
    let data = LabeledDataset::new(
        reconstruct(&truth),
        onehot(&labels),
        labels,
        format!(
            "synthetic {}x{}x{} true_rank={} seed={}",
            spec.n_sensitive, spec.dim_b, spec.dim_c, spec.true_rank, spec.seed
        ),
    )?;
    Ok(SyntheticDataset { data, truth })
}

/// The orthogonal-yet-identifiable pair: `A^T S = 0` while `|A[i, 0]| > 0`
/// exactly on the rows whose label is 1. `width` is the number of columns
/// of `A` (at least 1); columns beyond the first are zero.
pub fn counterexample(width: usize) -> (Mat, Mat) {
    let first = [1.0, 0.0, 0.0, -1.0, -1.0, 1.0];
    let width = width.max(1);
    let a = Mat::from_fn(6, width, |i, j| if j == 0 { first[i] } else { 0.0 });
    let s = onehot(&counterexample_labels());
    (a, s)
}

pub fn counterexample_labels() -> Vec<u8> {
    vec![1, 0, 0, 1, 1, 1]
}

/// `6 x 4` matrix `a b^T` built on the counterexample column, for fitting demos.
pub fn counterexample_dataset() -> LabeledDataset {
    let (a, s) = counterexample(1);
    let b = Mat::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).expect("static");
    let x = a.matmul_tr(&b).expect("rank 1");
    LabeledDataset::new(
        Observed::Matrix(x),
        s,
        counterexample_labels(),
        "counterexample 6x4 rank-1 matrix",
    )
    .expect("static shapes")
}

pub const CMC_ROWS: usize = 1473;
pub const CMC_COLUMNS: usize = 10;
/// 0-based attribute index of "wife now working" in the CMC file.
pub const CMC_WORKING_COLUMN: usize = 5;
pub const CMC_WORKING_RATE: f64 = 0.749;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContraceptiveOptions {
    pub sensitive_column: usize,
    pub drop_sensitive_from_x: bool,
    /// Min-max scale every feature column to `[0, 1]`.
    pub scale_features: bool,
}

impl Default for ContraceptiveOptions {
    fn default() -> Self {
        Self {
            sensitive_column: CMC_WORKING_COLUMN,
            drop_sensitive_from_x: false,
            scale_features: true,
        }
    }
}

/// Parses the UCI contraceptive-method-choice CSV (1473 rows of 10 integers,
/// no header). Lines starting with `@` are skipped.
pub fn parse_contraceptive(text: &str, opts: &ContraceptiveOptions) -> Result<LabeledDataset> {
    if opts.sensitive_column >= CMC_COLUMNS - 1 {
        return Err(Error::Config(format!(
            "sensitive column {} is not an attribute column",
            opts.sensitive_column
        )));
    }
    let mut rows: Vec<Vec<i64>> = Vec::with_capacity(CMC_ROWS);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('@') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != CMC_COLUMNS {
            return Err(Error::Format(format!(
                "line {}: expected {CMC_COLUMNS} fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parsed = fields
            .iter()
            .map(|f| {
                f.parse::<i64>()
                    .map_err(|_| Error::Parse(format!("line {}: {f:?} is not an integer", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(parsed);
    }
    if rows.len() != CMC_ROWS {
        return Err(Error::Format(format!("expected {CMC_ROWS} rows, got {}", rows.len())));
    }

    let col = opts.sensitive_column;
    let mut codes: Vec<i64> = rows.iter().map(|r| r[col]).collect();
    codes.sort_unstable();
    codes.dedup();
    if codes.len() != 2 {
        return Err(Error::Format(format!(
            "sensitive column {col} has {} distinct codes, expected 2",
            codes.len()
        )));
    }
    let rate_of = |code: i64| rows.iter().filter(|r| r[col] == code).count() as f64 / CMC_ROWS as f64;
    // the code whose frequency matches the documented working rate is "working"
    let working = *codes
        .iter()
        .min_by(|&&x, &&y| {
            (rate_of(x) - CMC_WORKING_RATE)
                .abs()
                .total_cmp(&(rate_of(y) - CMC_WORKING_RATE).abs())
        })
        .expect("two codes");
    let rate = rate_of(working);
    if (rate - CMC_WORKING_RATE).abs() > 0.005 {
        return Err(Error::Format(format!(
            "working rate {rate:.4} is not within 0.005 of {CMC_WORKING_RATE}"
        )));
    }
    let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[col] == working)).collect();

    let keep: Vec<usize> = (0..CMC_COLUMNS - 1)
        .filter(|&j| !(opts.drop_sensitive_from_x && j == col))
        .collect();
    let mut x = Mat::from_fn(CMC_ROWS, keep.len(), |i, j| rows[i][keep[j]] as f64);
    if opts.scale_features {
        for j in 0..x.cols() {
            let column = x.column(j);
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for i in 0..x.rows() {
                x[(i, j)] = (x[(i, j)] - lo) / span;
            }
        }
    }
    let provenance = format!(
        "contraceptive {}x{} sensitive_column={col} working_code={working} working_rate={rate:.4} dropped={} scaled={}",
        x.rows(),
        x.cols(),
        opts.drop_sensitive_from_x,
        opts.scale_features
    );
    LabeledDataset::new(Observed::Matrix(x), onehot(&labels), labels, provenance)
}

pub fn load_contraceptive(path: impl AsRef<Path>, opts: &ContraceptiveOptions) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_contraceptive(&text, opts)
}

/// Fraction of label-1 entities.
pub fn positive_rate(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len().max(1) as f64
}
