//! Block coordinate descent for fairness-regularized CP models.
//!
//! Each epoch takes `inner_steps` plain gradient steps on `A` (residual plus
//! fairness penalty, step `lr_a`), then on `B`, then on `C` (residual only,
//! step `lr_bc`). While one block is updated the others are fixed, so the
//! residual gradient `2 s (F G - M)` reuses the same `G` and `M` for every
//! inner step of that block.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    center_gram, fatr_grad_a, fatr_orthogonality, hsic_grad_a_centered, khsic_grad_a_centered,
    rbf_gram, Gram, KernelConfig,
};
use crate::tensor::{mttkrp, normal_gram, residual_scale, residual_sq, FactorModel, Mat, Mode, Observed};

/// Fairness penalty applied to the sensitive factor `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regularizer {
    None,
    /// `(lambda / n^2) <K̃_A, K̃_S>` with RBF kernels.
    Khsic {
        lambda: f64,
        #[serde(default = "one")]
        gamma_a: f64,
        #[serde(default = "one")]
        gamma_s: f64,
    },
    /// `lambda ||Ã^T S̃||_F^2`.
    Hsic { lambda: f64 },
    /// `lambda_o ||A^T S||_F^2 + lambda_l2 ||A||_F^2`.
    Fatr { lambda_o: f64, lambda_l2: f64 },
}

fn one() -> f64 {
    1.0
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        let valid = match *self {
            Regularizer::None => true,
            Regularizer::Khsic { lambda, gamma_a, gamma_s } => {
                ok(lambda) && gamma_a > 0.0 && gamma_s > 0.0 && gamma_a.is_finite() && gamma_s.is_finite()
            }
            Regularizer::Hsic { lambda } => ok(lambda),
            Regularizer::Fatr { lambda_o, lambda_l2 } => ok(lambda_o) && ok(lambda_l2),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid regularizer {self:?}")))
        }
    }

    /// The strength reported in sweeps: `lambda`, or `lambda_o` for FATR.
    pub fn strength(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::Khsic { lambda, .. } | Regularizer::Hsic { lambda } => lambda,
            Regularizer::Fatr { lambda_o, .. } => lambda_o,
        }
    }

    pub fn with_strength(&self, value: f64) -> Regularizer {
        let mut out = self.clone();
        match &mut out {
            Regularizer::None => {}
            Regularizer::Khsic { lambda, .. } | Regularizer::Hsic { lambda } => *lambda = value,
            Regularizer::Fatr { lambda_o, .. } => *lambda_o = value,
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub epochs: usize,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    pub lr_a: f64,
    pub lr_bc: f64,
    pub regularizer: Regularizer,
    #[serde(default)]
    pub seed: u64,
    /// Divide the squared residual by the number of entries.
    #[serde(default)]
    pub normalize_residual: bool,
}

fn default_inner_steps() -> usize {
    200
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.epochs == 0 || self.inner_steps == 0 {
            return Err(Error::Config("rank, epochs and inner_steps must be >= 1".into()));
        }
        // zero rates are allowed for no-op runs
        if !(self.lr_a >= 0.0 && self.lr_bc >= 0.0 && self.lr_a.is_finite() && self.lr_bc.is_finite()) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        self.regularizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub residual_term: f64,
    pub penalty_term: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with header `epoch,residual_term,penalty_term,objective`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}

/// I.i.d. `U[0, 1)` factors from a seeded generator, filled A, B, then C.
pub fn init_factors(seed: u64, shape: &[usize], rank: usize) -> Result<FactorModel> {
    if rank == 0 || !(2..=3).contains(&shape.len()) || shape.contains(&0) {
        return Err(Error::Config(format!(
            "cannot initialize rank-{rank} factors for shape {shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize| Mat::from_fn(rows, rank, |_, _| rng.random::<f64>());
    let a = draw(shape[0]);
    let b = draw(shape[1]);
    let c = shape.get(2).map(|&k| draw(k));
    FactorModel::new(a, b, c)
}

/// Penalty with its data-dependent pieces precomputed.
pub(crate) enum Penalty {
    None,
    Khsic { lambda: f64, gamma_a: KernelConfig, centered_s: Gram },
    Hsic { lambda: f64, centered_s: Mat },
    Fatr { lambda_o: f64, lambda_l2: f64, s: Mat },
}

impl Penalty {
    pub(crate) fn new(reg: &Regularizer, s: &Mat) -> Result<Self> {
        Ok(match *reg {
            Regularizer::None => Penalty::None,
            Regularizer::Khsic { lambda, gamma_a, gamma_s } => Penalty::Khsic {
                lambda,
                gamma_a: KernelConfig::new(gamma_a)?,
                centered_s: center_gram(&rbf_gram(s, KernelConfig::new(gamma_s)?)),
            },
            Regularizer::Hsic { lambda } => Penalty::Hsic {
                lambda,
                centered_s: s.center_columns(),
            },
            Regularizer::Fatr { lambda_o, lambda_l2 } => Penalty::Fatr {
                lambda_o,
                lambda_l2,
                s: s.clone(),
            },
        })
    }

    pub(crate) fn value(&self, a: &Mat) -> Result<f64> {
        match self {
            Penalty::None => Ok(0.0),
            Penalty::Khsic { lambda, gamma_a, centered_s } => {
                if *lambda == 0.0 {
                    return Ok(0.0);
                }
                // <H K_A H, K_S> = <K_A, H K_S H>
                let n = a.rows() as f64;
                let ka = rbf_gram(a, *gamma_a);
                Ok(lambda * ka.mat().inner(centered_s.mat())? / (n * n))
            }
            Penalty::Hsic { lambda, centered_s } => {
                Ok(lambda * a.center_columns().tr_matmul(centered_s)?.frobenius_sq())
            }
            Penalty::Fatr { lambda_o, lambda_l2, s } => {
                Ok(lambda_o * fatr_orthogonality(a, s)? + lambda_l2 * a.frobenius_sq())
            }
        }
    }

    /// Adds the penalty gradient w.r.t. `A` into `grad`.
    pub(crate) fn add_grad(&self, a: &Mat, grad: &mut Mat) -> Result<()> {
        match self {
            Penalty::None => Ok(()),
            Penalty::Khsic { lambda, gamma_a, centered_s } => {
                if *lambda == 0.0 {
                    return Ok(());
                }
                grad.axpy(*lambda, &khsic_grad_a_centered(a, centered_s, *gamma_a)?)
            }
            Penalty::Hsic { lambda, centered_s } => {
                if *lambda == 0.0 {
                    return Ok(());
                }
                grad.axpy(*lambda, &hsic_grad_a_centered(a, centered_s)?)
            }
            Penalty::Fatr { lambda_o, lambda_l2, s } => {
                if *lambda_o != 0.0 {
                    grad.axpy(*lambda_o, &fatr_grad_a(a, s)?)?;
                }
                grad.axpy(2.0 * lambda_l2, a)
            }
        }
    }
}

/// Fitted model plus per-epoch trace.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: FactorModel,
    pub trace: TraceLog,
}

fn check_inputs(x: &Observed, s: &Mat, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if s.rows() != x.sensitive_size() {
        return Err(Error::Dimension(format!(
            "S has {} rows but the sensitive mode has size {}",
            s.rows(),
            x.sensitive_size()
        )));
    }
    if x.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed data".into()));
    }
    Ok(())
}

/// Runs block coordinate descent from seeded uniform factors.
pub fn fit(x: &Observed, s: &Mat, cfg: &TrainConfig) -> Result<Fit> {
    check_inputs(x, s, cfg)?;
    let init = init_factors(cfg.seed, &x.shape(), cfg.rank)?;
    fit_from(x, s, init, cfg)
}

/// Runs block coordinate descent from the given factors.
pub fn fit_from(x: &Observed, s: &Mat, init: FactorModel, cfg: &TrainConfig) -> Result<Fit> {
    check_inputs(x, s, cfg)?;
    init.check_compatible(x)?;
    if init.rank() != cfg.rank {
        return Err(Error::Config(format!(
            "initial factors have rank {} but config asks for {}",
            init.rank(),
            cfg.rank
        )));
    }
    let penalty = Penalty::new(&cfg.regularizer, s)?;
    let scale = 2.0 * residual_scale(x, cfg.normalize_residual);
    let mut model = init;
    let mut trace = TraceLog::default();

    for epoch in 0..cfg.epochs {
        for &mode in model.modes() {
            let (lr, pen) = match mode {
                Mode::A => (cfg.lr_a, Some(&penalty)),
                _ => (cfg.lr_bc, None),
            };
            let gram = normal_gram(&model, mode)?;
            let m = mttkrp(x, &model, mode)?;
            let factor = model.factor_mut(mode)?;
            let diverged = || Error::Divergence { epoch, block: mode.label() };
            for _ in 0..cfg.inner_steps {
                let mut grad = factor.matmul(&gram)?.sub(&m)?.scaled(scale);
                if let Some(p) = pen {
                    p.add_grad(factor, &mut grad).map_err(|e| match e {
                        Error::NonFinite(_) => diverged(),
                        other => other,
                    })?;
                }
                factor.axpy(-lr, &grad)?;
                if !factor.is_finite() {
                    return Err(diverged());
                }
            }
        }
        let residual_term = residual_scale(x, cfg.normalize_residual) * residual_sq(x, &model)?;
        let penalty_term = penalty.value(&model.a)?;
        let objective = residual_term + penalty_term;
        if !objective.is_finite() {
            return Err(Error::Divergence { epoch, block: 'A' });
        }
        trace.records.push(TraceRecord {
            epoch,
            residual_term,
            penalty_term,
            objective,
        });
    }
    Ok(Fit { model, trace })
}

/// Residual term plus active penalty for the configured objective.
pub fn objective(x: &Observed, s: &Mat, model: &FactorModel, cfg: &TrainConfig) -> Result<f64> {
    check_inputs(x, s, cfg)?;
    let residual = residual_scale(x, cfg.normalize_residual) * residual_sq(x, model)?;
    let penalty = Penalty::new(&cfg.regularizer, s)?.value(&model.a)?;
    Ok(residual + penalty)
}
