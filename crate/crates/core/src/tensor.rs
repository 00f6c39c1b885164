//! Dense matrices, 3-mode tensors and CP models.
//!
//! Storage is row-major everywhere. For a tensor of shape `(I, J, K)` the
//! flat index of entry `(i, j, k)` is `(i * J + j) * K + k`.
//!
//! The mode-1 unfolding uses the column order `k * J + j`, i.e.
//! `X_(1)[i, k*J + j] = X[i, j, k]`. With this order the CP identity
//! `[[A, B, C]]_(1) = A (C ⊙ B)^T` holds, where `⊙` is the Khatri-Rao
//! product defined by [`khatri_rao`].

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols,
                pos % cols,
                values[pos]
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = out.row_mut(i);
            for (p, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                for (d, &r) in dst.iter_mut().zip(other.row(p)) {
                    *d += l * r;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn tr_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "cannot form A^T B with A {}x{} and B {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let lhs = self.row(p);
            let rhs = other.row(p);
            for (i, &l) in lhs.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                for (d, &r) in out.row_mut(i).iter_mut().zip(rhs) {
                    *d += l * r;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_tr(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot form A B^T with A {}x{} and B {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other)?;
        for (d, &o) in self.values.iter_mut().zip(&other.values) {
            *d += alpha * o;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Mat {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Frobenius inner product `<self, other> = Tr(self other^T)`.
    pub fn inner(&self, other: &Mat) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Subtracts the column means from every row.
    pub fn center_columns(&self) -> Mat {
        let means = self.column_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn check_same_shape(&self, other: &Mat) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "shape {}x{} does not match {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )))
        }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.values[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.values[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense 3-mode tensor, row-major with mode 1 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let (i, j, k) = dims;
        if i == 0 || j == 0 || k == 0 {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {i}x{j}x{k}"
            )));
        }
        if values.len() != i * j * k {
            return Err(Error::Dimension(format!(
                "{i}x{j}x{k} tensor needs {} values, got {}",
                i * j * k,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor contains NaN or Inf".into()));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    values.push(f(i, j, k));
                }
            }
        }
        Self { dims, values }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let (_, dj, dk) = self.dims;
        self.values[(i * dj + j) * dk + k]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Mode-1 unfolding: `I x (J*K)` with `X_(1)[i, k*J + j] = X[i, j, k]`.
    pub fn mode1_unfold(&self) -> Mat {
        let (di, dj, dk) = self.dims;
        Mat::from_fn(di, dj * dk, |i, col| {
            let (k, j) = (col / dj, col % dj);
            self.get(i, j, k)
        })
    }

    /// Inverse of [`Tensor3::mode1_unfold`].
    pub fn fold_mode1(unfolded: &Mat, dims: (usize, usize, usize)) -> Result<Self> {
        let (di, dj, dk) = dims;
        if unfolded.rows() != di || unfolded.cols() != dj * dk {
            return Err(Error::Dimension(format!(
                "cannot fold {}x{} into {di}x{dj}x{dk}",
                unfolded.rows(),
                unfolded.cols()
            )));
        }
        Ok(Self::from_fn(dims, |i, j, k| unfolded[(i, k * dj + j)]))
    }
}

/// Column-wise Kronecker product: `(u ⊙ v)[p * v.rows + q, r] = u[p, r] * v[q, r]`.
pub fn khatri_rao(u: &Mat, v: &Mat) -> Result<Mat> {
    if u.cols() != v.cols() {
        return Err(Error::Dimension(format!(
            "Khatri-Rao needs equal column counts, got {} and {}",
            u.cols(),
            v.cols()
        )));
    }
    Ok(Mat::from_fn(u.rows() * v.rows(), u.cols(), |row, r| {
        u[(row / v.rows(), r)] * v[(row % v.rows(), r)]
    }))
}

/// Observed data: either a 3-mode tensor or a matrix (2-mode case).
#[derive(Debug, Clone, PartialEq)]
pub enum Observed {
    Tensor(Tensor3),
    Matrix(Mat),
}

impl Observed {
    pub fn values(&self) -> &[f64] {
        match self {
            Observed::Tensor(t) => t.values(),
            Observed::Matrix(m) => m.values(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values().iter().map(|v| v * v).sum()
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    /// Size of the sensitive (first) mode.
    pub fn sensitive_size(&self) -> usize {
        self.shape()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Observed::Tensor(t) => {
                let (i, j, k) = t.dims();
                vec![i, j, k]
            }
            Observed::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn is_three_mode(&self) -> bool {
        matches!(self, Observed::Tensor(_))
    }
}

impl From<Tensor3> for Observed {
    fn from(t: Tensor3) -> Self {
        Observed::Tensor(t)
    }
}

impl From<Mat> for Observed {
    fn from(m: Mat) -> Self {
        Observed::Matrix(m)
    }
}

/// Factor block selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    A,
    B,
    C,
}

impl Mode {
    pub fn label(self) -> char {
        match self {
            Mode::A => 'A',
            Mode::B => 'B',
            Mode::C => 'C',
        }
    }
}

/// Rank-R CP model. `a` is the sensitive mode. Without `c` the model is the
/// matrix factorization `A B^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Option<Mat>,
}

impl FactorModel {
    pub fn new(a: Mat, b: Mat, c: Option<Mat>) -> Result<Self> {
        let rank = a.cols();
        let bad = b.cols() != rank || c.as_ref().is_some_and(|c| c.cols() != rank);
        if bad {
            return Err(Error::Dimension(format!(
                "factor ranks disagree: A has {}, B has {}, C has {:?}",
                rank,
                b.cols(),
                c.as_ref().map(Mat::cols)
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn is_three_mode(&self) -> bool {
        self.c.is_some()
    }

    pub fn factor(&self, mode: Mode) -> Result<&Mat> {
        match mode {
            Mode::A => Ok(&self.a),
            Mode::B => Ok(&self.b),
            Mode::C => self
                .c
                .as_ref()
                .ok_or_else(|| Error::InvalidMode("mode C requested on a 2-mode model".into())),
        }
    }

    pub fn factor_mut(&mut self, mode: Mode) -> Result<&mut Mat> {
        match mode {
            Mode::A => Ok(&mut self.a),
            Mode::B => Ok(&mut self.b),
            Mode::C => self
                .c
                .as_mut()
                .ok_or_else(|| Error::InvalidMode("mode C requested on a 2-mode model".into())),
        }
    }

    pub fn modes(&self) -> &'static [Mode] {
        if self.is_three_mode() {
            &[Mode::A, Mode::B, Mode::C]
        } else {
            &[Mode::A, Mode::B]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.as_ref().is_none_or(Mat::is_finite)
    }

    /// Checks that the factor sizes match the observed data.
    pub fn check_compatible(&self, x: &Observed) -> Result<()> {
        let mut model_shape = vec![self.a.rows(), self.b.rows()];
        if let Some(c) = &self.c {
            model_shape.push(c.rows());
        }
        if model_shape != x.shape() {
            return Err(Error::Dimension(format!(
                "model shape {:?} does not match data shape {:?}",
                model_shape,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// `[[A, B, C]]` (3-mode) or `A B^T` (2-mode).
pub fn reconstruct(model: &FactorModel) -> Observed {
    let (a, b) = (&model.a, &model.b);
    match &model.c {
        None => Observed::Matrix(a.matmul_tr(b).expect("ranks validated at construction")),
        Some(c) => {
            let dims = (a.rows(), b.rows(), c.rows());
            let rank = model.rank();
            let mut values = Vec::with_capacity(dims.0 * dims.1 * dims.2);
            let mut ab = vec![0.0; rank];
            for i in 0..dims.0 {
                for j in 0..dims.1 {
                    for (r, v) in ab.iter_mut().enumerate() {
                        *v = a[(i, r)] * b[(j, r)];
                    }
                    for k in 0..dims.2 {
                        values.push(dot(&ab, c.row(k)));
                    }
                }
            }
            Observed::Tensor(Tensor3 { dims, values })
        }
    }
}

/// `||X - model||_F^2`.
pub fn residual_sq(x: &Observed, model: &FactorModel) -> Result<f64> {
    model.check_compatible(x)?;
    let approx = reconstruct(model);
    Ok(x
        .values()
        .iter()
        .zip(approx.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `||X - model||_F / ||X||_F`.
pub fn relative_residual(x: &Observed, model: &FactorModel) -> Result<f64> {
    let norm_sq = x.frobenius_sq();
    if norm_sq == 0.0 {
        return Err(Error::Degenerate("relative residual of an all-zero tensor".into()));
    }
    Ok((residual_sq(x, model)? / norm_sq).sqrt())
}

/// Hadamard product of the Gram matrices of every factor except `mode`,
/// e.g. `B^T B ∘ C^T C` for mode A.
pub fn normal_gram(model: &FactorModel, mode: Mode) -> Result<Mat> {
    model.factor(mode)?;
    let rank = model.rank();
    let mut out = Mat::from_fn(rank, rank, |_, _| 1.0);
    for &other in model.modes() {
        if other == mode {
            continue;
        }
        let f = model.factor(other)?;
        out = out.hadamard(&f.tr_matmul(f)?)?;
    }
    Ok(out)
}

/// Matricized tensor times Khatri-Rao product for the given mode, e.g.
/// `X_(1) (C ⊙ B)` for mode A; for the 2-mode case `X B` or `X^T A`.
pub fn mttkrp(x: &Observed, model: &FactorModel, mode: Mode) -> Result<Mat> {
    model.check_compatible(x)?;
    model.factor(mode)?;
    let rank = model.rank();
    match x {
        Observed::Matrix(xm) => match mode {
            Mode::A => xm.matmul(&model.b),
            Mode::B => xm.tr_matmul(&model.a),
            Mode::C => unreachable!("rejected by factor()"),
        },
        Observed::Tensor(t) => {
            let (a, b) = (&model.a, &model.b);
            let c = model.c.as_ref().expect("compatible 3-mode model");
            let (di, dj, dk) = t.dims();
            let rows = match mode {
                Mode::A => di,
                Mode::B => dj,
                Mode::C => dk,
            };
            let mut out = Mat::zeros(rows, rank);
            let mut acc = vec![0.0; rank];
            for i in 0..di {
                for j in 0..dj {
                    let fiber = &t.values()[(i * dj + j) * dk..(i * dj + j + 1) * dk];
                    match mode {
                        Mode::A | Mode::B => {
                            // acc[r] = sum_k X[i,j,k] C[k,r]
                            acc.iter_mut().for_each(|v| *v = 0.0);
                            for (k, &xv) in fiber.iter().enumerate() {
                                for (v, &cv) in acc.iter_mut().zip(c.row(k)) {
                                    *v += xv * cv;
                                }
                            }
                            let (dst, other) = if mode == Mode::A {
                                (i, b.row(j))
                            } else {
                                (j, a.row(i))
                            };
                            for ((o, &v), &w) in out.row_mut(dst).iter_mut().zip(&acc).zip(other) {
                                *o += v * w;
                            }
                        }
                        Mode::C => {
                            for (r, v) in acc.iter_mut().enumerate() {
                                *v = a[(i, r)] * b[(j, r)];
                            }
                            for (k, &xv) in fiber.iter().enumerate() {
                                for (o, &v) in out.row_mut(k).iter_mut().zip(&acc) {
                                    *o += xv * v;
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Scale applied to the squared residual: 1 or `1 / (number of entries)`.
pub fn residual_scale(x: &Observed, normalize: bool) -> f64 {
    if normalize {
        1.0 / x.len() as f64
    } else {
        1.0
    }
}

/// Gradient of `scale * ||X - model||_F^2` with respect to one factor:
/// `2 * scale * (F * G - M)` with `G` from [`normal_gram`] and `M` from [`mttkrp`].
pub fn residual_grad(x: &Observed, model: &FactorModel, mode: Mode, normalize: bool) -> Result<Mat> {
    let factor = model.factor(mode)?;
    let gram = normal_gram(model, mode)?;
    let m = mttkrp(x, model, mode)?;
    let scale = 2.0 * residual_scale(x, normalize);
    Ok(factor.matmul(&gram)?.sub(&m)?.scaled(scale))
}
