//! Gram matrices and dependence measures between a factor matrix `A` and
//! the sensitive matrix `S`.
//!
//! The kernel penalty is `(1/n^2) <H K_A H, H K_S H>`. Because the centering
//! matrix `H = I - 11^T/n` is symmetric and idempotent, this equals
//! `(1/n^2) <K_A, H K_S H>`, so only the raw `K_A` depends on `A` and the
//! centered `K_S` can be computed once per fit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Radial basis kernel `exp(-gamma ||x - y||^2)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub gamma: f64,
}

impl KernelConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self { gamma })
        } else {
            Err(Error::Config(format!("RBF gamma must be positive, got {gamma}")))
        }
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// Kernel used to build a Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Rbf(KernelConfig),
    Linear,
}

impl Kernel {
    pub fn gram(&self, m: &Mat) -> Gram {
        match self {
            Kernel::Rbf(cfg) => rbf_gram(m, *cfg),
            Kernel::Linear => Gram(m.matmul_tr(m).expect("square product")),
        }
    }
}

impl From<KernelConfig> for Kernel {
    fn from(cfg: KernelConfig) -> Self {
        Kernel::Rbf(cfg)
    }
}

/// Symmetric `n x n` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram(pub Mat);

impl Gram {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `K[i, j] = exp(-gamma ||m_i - m_j||^2)`; the diagonal is exactly 1.
pub fn rbf_gram(m: &Mat, cfg: KernelConfig) -> Gram {
    let n = m.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        (-cfg.gamma * sq_dist(m.row(i), m.row(j))).exp()
                    }
                })
                .collect()
        })
        .collect();
    Gram(Mat::new(n, n, rows.concat()).expect("finite kernel values"))
}

/// `H K H` with `H = I - 11^T / n`.
pub fn center_gram(k: &Gram) -> Gram {
    let n = k.n();
    let m = k.mat();
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_means = m.column_means();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    Gram(Mat::from_fn(n, n, |i, j| {
        m[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

fn check_rows(a: &Mat, s: &Mat) -> Result<()> {
    if a.rows() != s.rows() {
        return Err(Error::Dimension(format!(
            "A has {} rows but S has {}",
            a.rows(),
            s.rows()
        )));
    }
    Ok(())
}

/// Empirical kernel independence criterion `(1/n^2) <K̃_A, K̃_S>` for
/// arbitrary kernels. Noise below zero down to -1e-12 is clamped.
pub fn khsic_with(a: &Mat, s: &Mat, ka: Kernel, ks: Kernel) -> Result<f64> {
    check_rows(a, s)?;
    let n = a.rows();
    if n < 2 {
        return Err(Error::Dimension("KHSIC needs at least two rows".into()));
    }
    let kt_a = center_gram(&ka.gram(a));
    let kt_s = center_gram(&ks.gram(s));
    let v = kt_a.mat().inner(kt_s.mat())? / (n * n) as f64;
    Ok(if (-1e-12..0.0).contains(&v) { 0.0 } else { v })
}

/// RBF kernel independence criterion between the rows of `a` and `s`.
pub fn khsic(a: &Mat, s: &Mat, cfg_a: KernelConfig, cfg_s: KernelConfig) -> Result<f64> {
    khsic_with(a, s, cfg_a.into(), cfg_s.into())
}

/// Centered kernel alignment: cosine between `K̃_A` and `K̃_S`.
pub fn normalized_khsic_with(a: &Mat, s: &Mat, ka: Kernel, ks: Kernel) -> Result<f64> {
    check_rows(a, s)?;
    let kt_a = center_gram(&ka.gram(a));
    let kt_s = center_gram(&ks.gram(s));
    let (na, ns) = (kt_a.mat().frobenius(), kt_s.mat().frobenius());
    // centered Gram of constant rows is zero up to rounding
    let tiny = 1e-12 * a.rows() as f64;
    if na <= tiny || ns <= tiny {
        return Err(Error::UndefinedAlignment(
            "a centered Gram matrix is zero (constant rows)".into(),
        ));
    }
    // both Grams are PSD, so the exact value lies in [0, 1]; rounding can
    // step just outside
    Ok((kt_a.mat().inner(kt_s.mat())? / (na * ns)).clamp(0.0, 1.0))
}

pub fn normalized_khsic(a: &Mat, s: &Mat, cfg_a: KernelConfig, cfg_s: KernelConfig) -> Result<f64> {
    normalized_khsic_with(a, s, cfg_a.into(), cfg_s.into())
}

/// Linear HSIC `||Ã^T S̃||_F^2` with column-centered `Ã`, `S̃`.
pub fn hsic_linear(a: &Mat, s: &Mat) -> Result<f64> {
    check_rows(a, s)?;
    Ok(a.center_columns().tr_matmul(&s.center_columns())?.frobenius_sq())
}

/// Orthogonality penalty `||A^T S||_F^2`.
pub fn fatr_orthogonality(a: &Mat, s: &Mat) -> Result<f64> {
    check_rows(a, s)?;
    Ok(a.tr_matmul(s)?.frobenius_sq())
}

/// Gradient of `(1/n^2) <K_A, centered_s>` w.r.t. `A` for an RBF `K_A`,
/// where `centered_s` is the precomputed `H K_S H`.
pub fn khsic_grad_a_centered(a: &Mat, centered_s: &Gram, cfg_a: KernelConfig) -> Result<Mat> {
    let n = a.rows();
    if centered_s.n() != n {
        return Err(Error::Dimension(format!(
            "A has {n} rows but the sensitive Gram is {}x{}",
            centered_s.n(),
            centered_s.n()
        )));
    }
    let r = a.cols();
    let ks = centered_s.mat();
    let coef = -4.0 * cfg_a.gamma / (n * n) as f64;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let ap = a.row(p);
            let mut g = vec![0.0; r];
            for j in 0..n {
                if j == p {
                    continue;
                }
                let aj = a.row(j);
                let w = ks[(p, j)] * (-cfg_a.gamma * sq_dist(ap, aj)).exp();
                for ((gv, x), y) in g.iter_mut().zip(ap).zip(aj) {
                    *gv += w * (x - y);
                }
            }
            g.iter_mut().for_each(|v| *v *= coef);
            g
        })
        .collect();
    Mat::new(n, r, rows.concat())
}

pub fn khsic_grad_a(a: &Mat, s: &Mat, cfg_a: KernelConfig, cfg_s: KernelConfig) -> Result<Mat> {
    check_rows(a, s)?;
    let centered = center_gram(&rbf_gram(s, cfg_s));
    khsic_grad_a_centered(a, &centered, cfg_a)
}

/// Gradient of [`hsic_linear`] w.r.t. `A`: `2 S̃ (S̃^T Ã)`.
/// `centered_s` must already be column-centered.
pub fn hsic_grad_a_centered(a: &Mat, centered_s: &Mat) -> Result<Mat> {
    check_rows(a, centered_s)?;
    let cross = centered_s.tr_matmul(&a.center_columns())?;
    Ok(centered_s.matmul(&cross)?.scaled(2.0))
}

pub fn hsic_grad_a(a: &Mat, s: &Mat) -> Result<Mat> {
    hsic_grad_a_centered(a, &s.center_columns())
}

/// Gradient of [`fatr_orthogonality`] w.r.t. `A`: `2 S (S^T A)`.
pub fn fatr_grad_a(a: &Mat, s: &Mat) -> Result<Mat> {
    check_rows(a, s)?;
    Ok(s.matmul(&s.tr_matmul(a)?)?.scaled(2.0))
}

/// Largest atoms-per-variable the exhaustive gap checker accepts.
pub const MAX_ATOMS: usize = 12;

/// Exhaustive statistical-dependence gap between two discrete samples:
/// the maximum over all atom subsets `A`, `B` of
/// `|P(a in A, s in B) - P(a in A) P(s in B)|` under the empirical
/// distribution of the `n` paired samples.
///
/// This is the quantity the kernel criterion is meant to bound; compare it
/// against [`khsic`] for a diagnostic ratio.
pub fn independence_gap_bruteforce(a_labels: &[u32], s_labels: &[u32]) -> Result<f64> {
    if a_labels.len() != s_labels.len() {
        return Err(Error::Dimension(format!(
            "label vectors differ in length: {} vs {}",
            a_labels.len(),
            s_labels.len()
        )));
    }
    if a_labels.is_empty() {
        return Err(Error::Degenerate("no samples".into()));
    }
    let atoms_a = distinct(a_labels);
    let atoms_s = distinct(s_labels);
    if atoms_a.len() > MAX_ATOMS || atoms_s.len() > MAX_ATOMS {
        return Err(Error::Resource(format!(
            "{} and {} atoms; at most {MAX_ATOMS} per variable",
            atoms_a.len(),
            atoms_s.len()
        )));
    }
    let n = a_labels.len() as f64;
    let (na, ns) = (atoms_a.len(), atoms_s.len());
    let mut joint = vec![0.0; na * ns];
    for (x, y) in a_labels.iter().zip(s_labels) {
        let i = atoms_a.binary_search(x).expect("atom present");
        let j = atoms_s.binary_search(y).expect("atom present");
        joint[i * ns + j] += 1.0 / n;
    }
    let marg_a: Vec<f64> = (0..na).map(|i| joint[i * ns..(i + 1) * ns].iter().sum()).collect();
    let marg_s: Vec<f64> = (0..ns).map(|j| (0..na).map(|i| joint[i * ns + j]).sum()).collect();

    let mut best = 0.0_f64;
    for set_a in 0u32..(1 << na) {
        let pa: f64 = (0..na).filter(|i| set_a >> i & 1 == 1).map(|i| marg_a[i]).sum();
        // row of joint mass restricted to set_a, per s-atom
        let restricted: Vec<f64> = (0..ns)
            .map(|j| {
                (0..na)
                    .filter(|i| set_a >> i & 1 == 1)
                    .map(|i| joint[i * ns + j])
                    .sum()
            })
            .collect();
        for set_s in 0u32..(1 << ns) {
            let (mut pab, mut ps) = (0.0, 0.0);
            for j in (0..ns).filter(|j| set_s >> j & 1 == 1) {
                pab += restricted[j];
                ps += marg_s[j];
            }
            best = best.max((pab - pa * ps).abs());
        }
    }
    Ok(best)
}

fn distinct(labels: &[u32]) -> Vec<u32> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random::<f64>())
    }

    fn g1() -> KernelConfig {
        KernelConfig::default()
    }

    #[test]
    fn identical_rows_give_ones() {
        let m = Mat::from_fn(4, 2, |_, j| j as f64);
        assert!(rbf_gram(&m, g1()).mat().values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_point_gram() {
        let m = Mat::new(2, 1, vec![0.0, 1.0]).unwrap();
        let k = rbf_gram(&m, g1());
        let e = (-1.0f64).exp();
        assert_eq!(k.mat().values(), &[1.0, e, e, 1.0]);
    }

    #[test]
    fn gram_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_mat(&mut rng, 5, 3);
        let cfg = KernelConfig::new(0.7).unwrap();
        let k = rbf_gram(&m, cfg);
        for i in 0..5 {
            for j in 0..5 {
                let mut d = 0.0;
                for c in 0..3 {
                    d += (m[(i, c)] - m[(j, c)]).powi(2);
                }
                assert!((k.mat()[(i, j)] - (-0.7 * d).exp()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn centering_edge_cases() {
        let ones = Gram(Mat::from_fn(3, 3, |_, _| 1.0));
        assert!(center_gram(&ones).mat().values().iter().all(|v| v.abs() < 1e-15));
        let single = Gram(Mat::new(1, 1, vec![1.0]).unwrap());
        assert_eq!(center_gram(&single).mat().values(), &[0.0]);
    }

    #[test]
    fn centering_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rand_mat(&mut rng, 4, 4);
        let k = r.add(&r.transpose()).unwrap();
        let h = Mat::from_fn(4, 4, |i, j| if i == j { 0.75 } else { -0.25 });
        let explicit = h.matmul(&k).unwrap().matmul(&h).unwrap();
        let got = center_gram(&Gram(k));
        assert!(got.mat().max_abs_diff(&explicit).unwrap() < 1e-14);
    }

    #[test]
    fn khsic_zero_for_constant_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mat::from_fn(6, 2, |_, j| j as f64 + 0.5);
        let s = rand_mat(&mut rng, 6, 2);
        assert!(khsic(&a, &s, g1(), g1()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn khsic_self_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 5, 2);
        let kt = center_gram(&rbf_gram(&a, g1()));
        let v = khsic(&a, &a, g1(), g1()).unwrap();
        assert!(v > 0.0);
        assert!((v - kt.mat().frobenius_sq() / 25.0).abs() < 1e-15);
    }

    #[test]
    fn khsic_matches_loop_oracle() {
        let a = Mat::new(4, 1, vec![0.0, 0.5, 1.5, 2.0]).unwrap();
        let s = Mat::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let n = 4;
        let h = |i: usize, j: usize| if i == j { 1.0 - 0.25 } else { -0.25 };
        let k = |m: &Mat, i: usize, j: usize| {
            let d: f64 = (0..m.cols()).map(|c| (m[(i, c)] - m[(j, c)]).powi(2)).sum();
            (-d).exp()
        };
        let centered = |m: &Mat| {
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for p in 0..n {
                        for q in 0..n {
                            out[i][j] += h(i, p) * k(m, p, q) * h(q, j);
                        }
                    }
                }
            }
            out
        };
        let (ca, cs) = (centered(&a), centered(&s));
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace += ca[i][j] * cs[j][i];
            }
        }
        let got = khsic(&a, &s, g1(), g1()).unwrap();
        assert!((got - trace / 16.0).abs() < 1e-14);
    }

    #[test]
    fn khsic_row_mismatch() {
        let a = Mat::zeros(3, 1);
        let s = Mat::zeros(4, 1);
        assert!(matches!(khsic(&a, &s, g1(), g1()), Err(Error::Dimension(_))));
        assert!(matches!(hsic_linear(&a, &s), Err(Error::Dimension(_))));
        assert!(matches!(fatr_orthogonality(&a, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn alignment_self_is_one_and_constant_is_undefined() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 7, 3);
        assert!((normalized_khsic(&a, &a, g1(), g1()).unwrap() - 1.0).abs() < 1e-12);
        let c = Mat::from_fn(7, 3, |_, _| 2.0);
        assert!(matches!(
            normalized_khsic(&c, &a, g1(), g1()),
            Err(Error::UndefinedAlignment(_))
        ));
    }

    #[test]
    fn alignment_of_independent_samples_is_small() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = rand_mat(&mut rng, 200, 2);
            let s = rand_mat(&mut rng, 200, 2);
            total += normalized_khsic(&a, &s, g1(), g1()).unwrap();
        }
        assert!(total / 20.0 < 0.1, "mean alignment {}", total / 20.0);
    }

    #[test]
    fn alignment_stays_in_unit_interval() {
        // two rows: both centered Grams are rank one, alignment is 1 up to rounding
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, 2, 3);
            let s = rand_mat(&mut rng, 2, 2);
            let rho = normalized_khsic(&a, &s, g1(), KernelConfig { gamma: 0.7 }).unwrap();
            assert!((0.0..=1.0).contains(&rho), "seed {seed}: {rho}");
        }
    }

    #[test]
    fn hsic_hand_values() {
        let c = Mat::from_fn(4, 2, |_, _| 3.0);
        let s = Mat::new(4, 1, vec![1.0, 2.0, 0.0, 5.0]).unwrap();
        assert_eq!(hsic_linear(&c, &s).unwrap(), 0.0);
        let v = Mat::new(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(hsic_linear(&v, &v).unwrap(), 4.0);
    }

    #[test]
    fn hsic_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 6, 2);
        let s = rand_mat(&mut rng, 6, 3);
        let mut total = 0.0;
        for p in 0..2 {
            let ma: f64 = (0..6).map(|i| a[(i, p)]).sum::<f64>() / 6.0;
            for q in 0..3 {
                let ms: f64 = (0..6).map(|i| s[(i, q)]).sum::<f64>() / 6.0;
                let c: f64 = (0..6).map(|i| (a[(i, p)] - ma) * (s[(i, q)] - ms)).sum();
                total += c * c;
            }
        }
        assert!((hsic_linear(&a, &s).unwrap() - total).abs() < 1e-13);
    }

    #[test]
    fn fatr_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 5, 2);
        let s = rand_mat(&mut rng, 5, 2);
        let mut total = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                let c: f64 = (0..5).map(|i| a[(i, p)] * s[(i, q)]).sum();
                total += c * c;
            }
        }
        assert!((fatr_orthogonality(&a, &s).unwrap() - total).abs() < 1e-13);
        assert_eq!(fatr_orthogonality(&Mat::zeros(5, 2), &s).unwrap(), 0.0);
    }

    #[test]
    fn hsic_equals_fatr_when_already_centered() {
        let a = Mat::new(4, 2, vec![1.0, 2.0, -1.0, 0.5, 2.0, -2.0, -2.0, -0.5]).unwrap();
        let s = Mat::new(4, 1, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let h = hsic_linear(&a, &s).unwrap();
        let f = fatr_orthogonality(&a, &s).unwrap();
        assert!((h - f).abs() < 1e-12);
    }

    #[test]
    fn khsic_gradient_vanishes_at_constant_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Mat::from_fn(6, 3, |_, j| 0.3 * j as f64);
        let s = rand_mat(&mut rng, 6, 2);
        let g = khsic_grad_a(&a, &s, g1(), g1()).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn fatr_grad_on_counterexample() {
        let a = Mat::new(6, 2, vec![1., 0., 0., 0., 0., 0., -1., 0., -1., 0., 1., 0.]).unwrap();
        let s = Mat::new(6, 2, vec![1., 0., 0., 1., 0., 1., 1., 0., 1., 0., 1., 0.]).unwrap();
        // S^T A = 0, so 2 S S^T A = 0
        let g = fatr_grad_a(&a, &s).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        // shifted A: S^T A' = [[4+0, ...]] by hand
        let shifted = a.map(|v| v + 1.0);
        let g = fatr_grad_a(&shifted, &s).unwrap();
        // S^T A' = [[4, 4], [2, 2]]; rows of S pick [4,4] or [2,2]; times 2
        for i in 0..6 {
            let expect = if s[(i, 0)] == 1.0 { 8.0 } else { 4.0 };
            assert_eq!(g.row(i), &[expect, expect]);
        }
    }

    #[test]
    fn gap_of_product_measure_is_zero() {
        let a = [0, 0, 1, 1];
        let s = [0, 1, 0, 1];
        assert!(independence_gap_bruteforce(&a, &s).unwrap().abs() < 1e-15);
    }

    #[test]
    fn gap_of_identical_binary_is_quarter() {
        let a = [0, 0, 1, 1];
        assert!((independence_gap_bruteforce(&a, &a).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gap_rejects_too_many_atoms() {
        let a: Vec<u32> = (0..13).collect();
        assert!(matches!(
            independence_gap_bruteforce(&a, &a),
            Err(Error::Resource(_))
        ));
    }

    /// Second implementation: iterate subsets and count samples directly.
    fn gap_by_counting(a: &[u32], s: &[u32]) -> f64 {
        let atoms_a = distinct(a);
        let atoms_s = distinct(s);
        let n = a.len() as f64;
        let mut best = 0.0_f64;
        for ma in 0u32..(1 << atoms_a.len()) {
            let in_a = |x: &u32| ma >> atoms_a.iter().position(|y| y == x).unwrap() & 1 == 1;
            for ms in 0u32..(1 << atoms_s.len()) {
                let in_s = |x: &u32| ms >> atoms_s.iter().position(|y| y == x).unwrap() & 1 == 1;
                let both = a.iter().zip(s).filter(|(x, y)| in_a(x) && in_s(y)).count() as f64;
                let ca = a.iter().filter(|x| in_a(x)).count() as f64;
                let cs = s.iter().filter(|y| in_s(y)).count() as f64;
                best = best.max((both / n - ca * cs / (n * n)).abs());
            }
        }
        best
    }

    #[test]
    fn gap_matches_counting_implementation() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let s: Vec<u32> = a
                .iter()
                .map(|&x| if rng.random::<f64>() < 0.5 { x % 3 } else { rng.random_range(0..3) })
                .collect();
            let fast = independence_gap_bruteforce(&a, &s).unwrap();
            assert!((fast - gap_by_counting(&a, &s)).abs() < 1e-12);
        }
    }
}
