//! Dense linear-algebra kernels.
//!
//! Everything here is sized for the curvature matrices the mechanism works
//! with: `p` up to a few thousand for materialized Gauss-Newton matrices and
//! `p̃` up to ~500 for projected ones. Storage is row-major `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest dimension accepted by [`sym_eigen`].
pub const EIGEN_DIM_CAP: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            axpy(*yi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a != 0.0 {
                    axpy(*a, b_row, out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square matrix whose entries are exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`.
    pub fn new(mut m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::DimensionMismatch {
                expected: m.rows,
                got: m.cols,
            });
        }
        if m.rows == 0 {
            return Err(Error::InvalidInputs("symmetric matrix must have dim >= 1".into()));
        }
        let n = m.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn diag(values: &[f64]) -> Self {
        Self(Matrix::diag(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.mul_vec(x)
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        Ok(dot(x, &self.mul_vec(x)?))
    }

    /// Returns `self + shift·I`.
    pub fn add_identity(&self, shift: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.rows {
            m[(i, i)] += shift;
        }
        SymMatrix(m)
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        let mut m = self.0.clone();
        m.data.iter_mut().for_each(|v| *v *= factor);
        SymMatrix(m)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)]).sum()
    }

    /// `Aᵀ M A` for a `dim × k` matrix `A`.
    pub fn congruence(&self, a: &Matrix) -> Result<SymMatrix> {
        let ma = self.0.matmul(a)?;
        SymMatrix::new(a.tr_matmul(&ma)?)
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: Matrix,
}

pub fn spd_factor(m: &SymMatrix) -> Result<SpdFactor> {
    let n = m.dim();
    let max_diag = (0..n).map(|i| m.get(i, i).abs()).fold(0.0, f64::max);
    let threshold = n as f64 * f64::EPSILON * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let pivot = m.get(j, j) - dot(&lj, &lj);
        if !(pivot > threshold) || pivot <= 0.0 {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = m.get(i, j) - dot(&l.row(i)[..j], &lj);
            l[(i, j)] = s / d;
        }
    }
    Ok(SpdFactor { lower: l })
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), b.len())?;
        let mut y = b.to_vec();
        for i in 0..y.len() {
            let s = dot(&self.lower.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.lower[(i, i)];
        }
        Ok(y)
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), y.len())?;
        let n = y.len();
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * x[k];
            }
            x[i] = s / self.lower[(i, i)];
        }
        Ok(x)
    }

    pub fn reconstruct(&self) -> SymMatrix {
        let llt = self.lower.matmul(&self.lower.transpose()).expect("square factor");
        SymMatrix::new(llt).expect("square factor")
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.lower[(i, i)].ln()).sum()
    }
}

/// Solves `(L Lᵀ) x = b`.
pub fn solve_spd(f: &SpdFactor, b: &[f64]) -> Result<Vec<f64>> {
    let y = f.solve_lower(b)?;
    f.solve_upper(&y)
}

#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("dim >= 1")
    }

    /// `V f(Λ) Vᵀ`
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|v| f(*v)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.vectors[(i, k)] * fv[k] * self.vectors[(j, k)];
                }
                out[(i, j)] = s;
            }
        }
        SymMatrix::new(out).expect("square")
    }
}

/// Cyclic Jacobi eigensolver.
pub fn sym_eigen(m: &SymMatrix) -> Result<SymEigen> {
    let n = m.dim();
    if n > EIGEN_DIM_CAP {
        return Err(Error::DimensionCap {
            dim: n,
            cap: EIGEN_DIM_CAP,
        });
    }
    let mut a = m.matrix().clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    let new_kp = akp - s * (akq + tau * akp);
                    let new_kq = akq + s * (akp - tau * akq);
                    a[(k, p)] = new_kp;
                    a[(p, k)] = new_kp;
                    a[(k, q)] = new_kq;
                    a[(q, k)] = new_kq;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp - s * (vkq + tau * vkp);
                    v[(k, q)] = vkq + s * (vkp - tau * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

#[derive(Clone, Copy, Debug)]
pub struct PowerIterationSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIterationSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            seed: 0x5eed,
        }
    }
}

/// Largest singular value of the operator `apply: R^cols -> R^rows` by power
/// iteration on `applyᵀ apply`, without materializing the matrix.
pub fn operator_spectral_norm<F, G>(
    apply: F,
    apply_adjoint: G,
    rows: usize,
    cols: usize,
    settings: PowerIterationSettings,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut rho_prev = 0.0;
    let mut rho = 0.0;
    for _ in 0..settings.max_iter {
        let w = apply_adjoint(&apply(&v));
        rho = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rho * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= settings.tol * rho || (rho - rho_prev).abs() <= settings.tol * rho * 1e-2 {
            return Ok(rho.max(0.0).sqrt());
        }
        rho_prev = rho;
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Err(Error::NotConverged {
        iterations: settings.max_iter,
        estimate: rho.max(0.0).sqrt(),
    })
}

/// Thin QR orthonormalization of the columns of `g` (`p × p̃`, `p ≥ p̃`) by
/// twice-iterated modified Gram-Schmidt. The implied `R` has a positive
/// diagonal.
pub fn orthonormalize(g: &Matrix) -> Result<Matrix> {
    let (p, k) = (g.rows(), g.cols());
    if k > p {
        return Err(Error::InvalidInputs(format!(
            "cannot orthonormalize {k} columns in R^{p}"
        )));
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| g.column(j)).collect();
    for j in 0..k {
        let before = norm(&cols[j]);
        let (done, rest) = cols.split_at_mut(j);
        let cj = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let r = dot(q, cj);
                axpy(-r, q, cj);
            }
        }
        let after = norm(cj);
        if after == 0.0 || after < 1e-12 * before {
            return Err(Error::RankDeficient { column: j });
        }
        cj.iter_mut().for_each(|x| *x /= after);
    }
    let mut q = Matrix::zeros(p, k);
    for (j, c) in cols.iter().enumerate() {
        q.set_column(j, c);
    }
    Ok(q)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
