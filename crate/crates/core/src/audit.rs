//! Unfairness audit: how well can a classifier recover the binary sensitive
//! label from the rows of a fitted factor `A`?
//!
//! The probe is `softmax(relu(A W1 + b) W2)` trained with cross-entropy and
//! gradient descent on a seeded train/test split. Unfairness is test
//! accuracy minus 0.5.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub hidden_width: usize,
    pub lr: f64,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Mini-batch size for SGD; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Z-score features with training-split statistics before the probe.
    pub standardize: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            hidden_width: 1500,
            lr: 0.003,
            epochs: 100,
            train_fraction: 0.75,
            seed: 0,
            batch_size: Some(32),
            standardize: true,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("probe lr must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub accuracy: f64,
    pub unfairness: f64,
    /// Unfairness of always predicting the test-set majority label.
    pub majority_floor: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// The training split contained a single class.
    pub degenerate_labels: bool,
}

/// Seeded split of `0..n`. Depends only on `n` and the seed, never on the
/// row contents.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Degenerate("need at least two rows to split".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Two-layer ReLU network with a softmax head over two classes.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl ProbeModel {
    fn init(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let u = |fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..bound)
        };
        let w1 = Mat::from_fn(inputs, hidden, |_, _| u(inputs, rng));
        let b1 = (0..hidden).map(|_| u(inputs, rng)).collect();
        let w2 = Mat::from_fn(hidden, 2, |_, _| u(hidden, rng));
        Self {
            w1,
            b1,
            w2,
            shift: vec![0.0; inputs],
            scale: vec![1.0; inputs],
        }
    }

    fn prepare(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.shift[j]) * self.scale[j])
    }

    /// Hidden activations and class probabilities for already-standardized rows.
    fn forward_prepared(&self, x: &Mat) -> (Mat, Mat) {
        let hidden = self.w1.cols();
        let rows: Vec<(Vec<f64>, [f64; 2])> = (0..x.rows())
            .into_par_iter()
            .map(|i| {
                let mut h = self.b1.clone();
                for (r, &xv) in x.row(i).iter().enumerate() {
                    for (hv, &w) in h.iter_mut().zip(self.w1.row(r)) {
                        *hv += xv * w;
                    }
                }
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut logits = [0.0; 2];
                for (hv, p) in h.iter().zip(0..hidden) {
                    logits[0] += hv * self.w2[(p, 0)];
                    logits[1] += hv * self.w2[(p, 1)];
                }
                (h, softmax2(logits))
            })
            .collect();
        let mut hmat = Vec::with_capacity(x.rows() * hidden);
        let mut probs = Vec::with_capacity(x.rows() * 2);
        for (h, p) in rows {
            hmat.extend(h);
            probs.extend(p);
        }
        (
            Mat::new(x.rows(), hidden, hmat).expect("finite activations"),
            Mat::new(x.rows(), 2, probs).expect("finite probabilities"),
        )
    }

    /// `(hidden activations, softmax probabilities)` for raw feature rows.
    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        self.forward_prepared(&self.prepare(x))
    }

    pub fn predict(&self, x: &Mat) -> Vec<u8> {
        let (_, p) = self.forward(x);
        (0..p.rows()).map(|i| u8::from(p[(i, 1)] > p[(i, 0)])).collect()
    }

    /// One gradient step of mean cross-entropy over the given rows.
    fn step(&mut self, x: &Mat, y: &[u8], lr: f64) {
        let n = x.rows() as f64;
        let (h, p) = self.forward_prepared(x);
        let hidden = self.w1.cols();
        // dL/dlogits = (p - onehot(y)) / n
        let dlogits: Vec<[f64; 2]> = (0..x.rows())
            .map(|i| {
                let t = y[i] as usize;
                let mut d = [p[(i, 0)] / n, p[(i, 1)] / n];
                d[t] -= 1.0 / n;
                d
            })
            .collect();
        let mut dw2 = Mat::zeros(hidden, 2);
        let mut dw1 = Mat::zeros(self.w1.rows(), hidden);
        let mut db1 = vec![0.0; hidden];
        let mut dh = vec![0.0; hidden];
        for (i, d) in dlogits.iter().enumerate() {
            let hrow = h.row(i);
            for (p_, &hv) in hrow.iter().enumerate() {
                dw2[(p_, 0)] += hv * d[0];
                dw2[(p_, 1)] += hv * d[1];
                dh[p_] = if hv > 0.0 {
                    d[0] * self.w2[(p_, 0)] + d[1] * self.w2[(p_, 1)]
                } else {
                    0.0
                };
            }
            for (b, &g) in db1.iter_mut().zip(&dh) {
                *b += g;
            }
            for (r, &xv) in x.row(i).iter().enumerate() {
                for (w, &g) in dw1.row_mut(r).iter_mut().zip(&dh) {
                    *w += xv * g;
                }
            }
        }
        self.w1.axpy(-lr, &dw1).expect("same shape");
        self.w2.axpy(-lr, &dw2).expect("same shape");
        for (b, g) in self.b1.iter_mut().zip(db1) {
            *b -= lr * g;
        }
    }
}

fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

fn check_labels(a: &Mat, labels: &[u8]) -> Result<()> {
    if labels.len() != a.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            a.rows()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Config("labels must be binary (0/1)".into()));
    }
    Ok(())
}

/// Trains the probe on `a[train]` and returns it with the split.
pub fn train_probe(a: &Mat, labels: &[u8], cfg: &AuditConfig) -> Result<(ProbeModel, Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    check_labels(a, labels)?;
    let (train, test) = split_indices(a.rows(), cfg.train_fraction, cfg.seed)?;
    // separate stream from the split so the split depends on n only
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut probe = ProbeModel::init(a.cols(), cfg.hidden_width, &mut rng);

    let xtr = a.select_rows(&train);
    if cfg.standardize {
        let means = xtr.column_means();
        let centered = xtr.center_columns();
        let var: Vec<f64> = (0..xtr.cols())
            .map(|j| centered.column(j).iter().map(|v| v * v).sum::<f64>() / xtr.rows() as f64)
            .collect();
        probe.shift = means;
        probe.scale = var
            .iter()
            .map(|&v| if v.sqrt() > 1e-300 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
    }
    let xtr = probe.prepare(&xtr);
    let ytr: Vec<u8> = train.iter().map(|&i| labels[i]).collect();

    let mut order: Vec<usize> = (0..xtr.rows()).collect();
    for _ in 0..cfg.epochs {
        match cfg.batch_size {
            None => probe.step(&xtr, &ytr, cfg.lr),
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    let xb = xtr.select_rows(chunk);
                    let yb: Vec<u8> = chunk.iter().map(|&i| ytr[i]).collect();
                    probe.step(&xb, &yb, cfg.lr);
                }
            }
        }
    }
    Ok((probe, train, test))
}

/// Probe test accuracy minus 0.5, with the majority-guess floor.
pub fn unfairness(a: &Mat, labels: &[u8], cfg: &AuditConfig) -> Result<AuditResult> {
    let (probe, train, test) = train_probe(a, labels, cfg)?;
    let pred = probe.predict(&a.select_rows(&test));
    let correct = test.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
    let accuracy = correct as f64 / test.len() as f64;
    let ones = test.iter().filter(|&&i| labels[i] == 1).count();
    let majority = ones.max(test.len() - ones) as f64 / test.len() as f64;
    let train_ones = train.iter().filter(|&&i| labels[i] == 1).count();
    Ok(AuditResult {
        accuracy,
        unfairness: accuracy - 0.5,
        majority_floor: majority - 0.5,
        n_train: train.len(),
        n_test: test.len(),
        degenerate_labels: train_ones == 0 || train_ones == train.len(),
    })
}

/// Labels row `i` as 1 iff `|a[i, 0]| > 0`.
pub fn threshold_probe(a: &Mat) -> Vec<u8> {
    threshold_probe_tol(a, 0.0)
}

/// Labels row `i` as 1 iff `|a[i, 0]| > tol`.
pub fn threshold_probe_tol(a: &Mat, tol: f64) -> Vec<u8> {
    (0..a.rows()).map(|i| u8::from(a[(i, 0)].abs() > tol)).collect()
}

pub fn accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg(seed: u64) -> AuditConfig {
        AuditConfig {
            hidden_width: 64,
            seed,
            ..AuditConfig::default()
        }
    }

    fn clusters(n: usize, seed: u64) -> (Mat, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let a = Mat::from_fn(n, 2, |i, _| {
            let mu = if labels[i] == 1 { 3.0 } else { -3.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            mu + z
        });
        (a, labels)
    }

    #[test]
    fn threshold_rule() {
        let a = Mat::new(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(threshold_probe(&a), vec![1, 0, 1]);
        assert_eq!(threshold_probe(&Mat::zeros(4, 2)), vec![0; 4]);
    }

    #[test]
    fn split_depends_only_on_row_count() {
        let (tr, te) = split_indices(40, 0.75, 3).unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(te.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!(split_indices(40, 0.75, 3).unwrap(), (tr, te));
    }

    #[test]
    fn separable_clusters_are_found() {
        let (a, labels) = clusters(200, 1);
        let r = unfairness(&a, &labels, &small_cfg(0)).unwrap();
        assert!(r.accuracy > 0.95, "accuracy {}", r.accuracy);
        assert!((r.unfairness - (r.accuracy - 0.5)).abs() < 1e-15);
        assert_eq!(r.n_train + r.n_test, 200);
    }

    #[test]
    fn zero_epochs_is_well_defined() {
        let (a, labels) = clusters(40, 2);
        let cfg = AuditConfig { epochs: 0, ..small_cfg(1) };
        let r = unfairness(&a, &labels, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let (a, labels) = clusters(30, 3);
        let cfg = AuditConfig { epochs: 2, ..AuditConfig::default() };
        let (probe, _, _) = train_probe(&a, &labels, &cfg).unwrap();
        let (h, p) = probe.forward(&a);
        assert_eq!((h.rows(), h.cols()), (30, 1500));
        assert_eq!((p.rows(), p.cols()), (30, 2));
        for i in 0..30 {
            assert!((p[(i, 0)] + p[(i, 1)] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, labels) = clusters(60, 4);
        let r1 = unfairness(&a, &labels, &small_cfg(5)).unwrap();
        let r2 = unfairness(&a, &labels, &small_cfg(5)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn single_class_split_is_flagged() {
        let a = Mat::from_fn(10, 1, |i, _| i as f64);
        let r = unfairness(&a, &[1; 10], &small_cfg(0)).unwrap();
        assert!(r.degenerate_labels);
        assert_eq!(r.majority_floor, 0.5);
    }

    #[test]
    fn rejects_bad_labels() {
        let a = Mat::zeros(4, 1);
        assert!(unfairness(&a, &[0, 1, 2, 0], &small_cfg(0)).is_err());
        assert!(unfairness(&a, &[0, 1], &small_cfg(0)).is_err());
    }

    #[test]
    fn minibatch_training_runs() {
        let (a, labels) = clusters(100, 6);
        let cfg = AuditConfig { batch_size: Some(16), epochs: 20, ..small_cfg(2) };
        let r = unfairness(&a, &labels, &cfg).unwrap();
        assert!(r.accuracy > 0.9);
    }
}
