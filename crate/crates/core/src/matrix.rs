//! Small dense real matrices.
//!
//! Everything in this crate lives at dimensions of a handful of rows, so the
//! storage is a plain row-major `Vec<f64>` and the algorithms are the textbook
//! ones: Cholesky for SPD solves and cyclic Jacobi for symmetric spectra.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivot threshold used by [`spd_solve`] unless a caller supplies its own.
pub const DEFAULT_PIVOT_THRESHOLD: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}", self.rows, self.cols)?;
        f.debug_list().entries(self.row_vecs()).finish()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Mat {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Mat::from_nested(&rows)
    }
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        m.row_vecs()
    }
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("matrix shape {rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged matrix literal".into()));
        }
        Mat::new(r, c, rows.iter().flatten().copied().collect())
    }

    /// Panicking constructor for literals in code and tests.
    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Mat::new(rows.len(), C, rows.iter().flatten().copied().collect())
            .expect("invalid matrix literal")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(x: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn column(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Writes `self * rhs` into `out` without allocating.
    pub fn mul_to(&self, rhs: &Mat, out: &mut Mat) {
        debug_assert_eq!(self.cols, rhs.rows);
        debug_assert_eq!(out.shape(), (self.rows, rhs.cols));
        let (n, p) = (self.cols, rhs.cols);
        for i in 0..self.rows {
            let row = &self.data[i * n..(i + 1) * n];
            let dst = &mut out.data[i * p..(i + 1) * p];
            dst.iter_mut().for_each(|x| *x = 0.0);
            for (k, &a) in row.iter().enumerate() {
                let src = &rhs.data[k * p..(k + 1) * p];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
    }

    /// Writes `selfᵀ * rhs` into `out` without allocating.
    pub fn tr_mul_to(&self, rhs: &Mat, out: &mut Mat) {
        debug_assert_eq!(self.rows, rhs.rows);
        debug_assert_eq!(out.shape(), (self.cols, rhs.cols));
        let p = rhs.cols;
        out.data.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..self.rows {
            let src = &rhs.data[k * p..(k + 1) * p];
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                let dst = &mut out.data[i * p..(i + 1) * p];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
    }

    /// `selfᵀ * rhs`.
    pub fn tr_mul(&self, rhs: &Mat) -> Mat {
        let mut out = Mat::zeros(self.cols, rhs.cols);
        self.tr_mul_to(rhs, &mut out);
        out
    }

    /// `xᵀ · self · x` for a square `self`.
    pub fn congruence(&self, x: &Mat) -> Mat {
        x.tr_mul(&(self * x))
    }

    pub fn scale(&self, a: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn scale_mut(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Mat) {
        debug_assert_eq!(self.shape(), x.shape());
        for (d, &s) in self.data.iter_mut().zip(&x.data) {
            *d += a * s;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn copy_from(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.copy_from_slice(&other.data);
    }

    /// Symmetric part `(M + Mᵀ)/2`. Idempotent bit for bit.
    pub fn symmetrize(&self) -> Mat {
        let mut s = self.clone();
        s.symmetrize_mut();
        s
    }

    pub fn symmetrize_mut(&mut self) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(self)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Mat {
    type Output = Mat;

    fn mul(self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        self.mul_to(rhs, &mut out);
        out
    }
}

impl Mul<&Mat> for f64 {
    type Output = Mat;

    fn mul(self, rhs: &Mat) -> Mat {
        rhs.scale(self)
    }
}

impl Add for &Mat {
    type Output = Mat;

    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub for &Mat {
    type Output = Mat;

    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl Add for Mat {
    type Output = Mat;

    fn add(mut self, rhs: Mat) -> Mat {
        self += &rhs;
        self
    }
}

impl Sub for Mat {
    type Output = Mat;

    fn sub(mut self, rhs: Mat) -> Mat {
        self -= &rhs;
        self
    }
}

impl AddAssign<&Mat> for Mat {
    fn add_assign(&mut self, rhs: &Mat) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&Mat> for Mat {
    fn sub_assign(&mut self, rhs: &Mat) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

impl Neg for &Mat {
    type Output = Mat;

    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

/// A square matrix that is exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat(Mat);

impl SymMat {
    /// Projects a square matrix onto its symmetric part.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim("symmetric matrix", (m.rows, m.rows), m.shape()));
        }
        Ok(SymMat(m.symmetrize()))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(Mat::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

pub fn spectral_norm(m: &Mat) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

pub fn trace_norm(m: &Mat) -> f64 {
    singular_values(m).into_iter().sum()
}

fn singular_values(m: &Mat) -> Vec<f64> {
    // Work with the smaller Gram matrix.
    let gram = if m.rows >= m.cols {
        m.tr_mul(m)
    } else {
        m * &m.transpose()
    };
    if m.rows == 1 || m.cols == 1 {
        return vec![gram[(0, 0)].max(0.0).sqrt()];
    }
    let eig = jacobi_eigenvalues(&gram.symmetrize()).unwrap_or_else(|_| gram_fallback(&gram));
    eig.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

fn gram_fallback(gram: &Mat) -> Vec<f64> {
    // Jacobi essentially always converges; the trace bound keeps norms sound
    // if it ever does not.
    vec![gram.trace()]
}

/// Cholesky factor `L` with `a = L Lᵀ`; fails when a pivot drops below
/// `threshold`.
pub fn cholesky(a: &SymMat, threshold: f64) -> Result<Mat> {
    let a = a.as_mat();
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d <= threshold {
            return Err(Error::NotPositiveDefinite {
                context: format!("cholesky pivot {j}"),
                pivot: d,
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `a · X = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &SymMat, b: &Mat) -> Result<Mat> {
    spd_solve_with(a, b, DEFAULT_PIVOT_THRESHOLD)
}

pub fn spd_solve_with(a: &SymMat, b: &Mat, threshold: f64) -> Result<Mat> {
    let n = a.dim();
    if b.rows != n {
        return Err(Error::dim("spd_solve right-hand side", (n, b.cols), b.shape()));
    }
    let l = cholesky(a, threshold)?;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn sym_eigenvalues(s: &SymMat) -> Result<Vec<f64>> {
    let mut e = jacobi_eigenvalues(s.as_mat())?;
    e.sort_by(f64::total_cmp);
    Ok(e)
}

pub fn min_eigenvalue_sym(s: &SymMat) -> Result<f64> {
    let m = s.as_mat();
    match m.rows {
        1 => Ok(m[(0, 0)]),
        2 => {
            let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let mean = 0.5 * (a + d);
            let r = (0.5 * (a - d)).hypot(b);
            Ok(mean - r)
        }
        _ => Ok(sym_eigenvalues(s)?[0]),
    }
}

fn jacobi_eigenvalues(s: &Mat) -> Result<Vec<f64>> {
    let n = s.rows;
    let mut a = s.clone();
    let scale = a.max_abs();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            return Ok((0..n).map(|i| a[(i, i)]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::NoConvergence {
        what: "jacobi eigenvalue sweep",
        iterations: JACOBI_MAX_SWEEPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_simple_matrices() {
        assert_eq!(spectral_norm(&Mat::identity(3)), 1.0);
        assert_eq!(spectral_norm(&Mat::zeros(2, 3)), 0.0);
        let d = Mat::from_rows(&[[3.0, 0.0], [0.0, 4.0]]);
        assert!((spectral_norm(&d) - 4.0).abs() < 1e-14);
        assert!((trace_norm(&d) - 7.0).abs() < 1e-14);
        assert!((trace_norm(&Mat::identity(5)) - 5.0).abs() < 1e-14);
        assert_eq!(trace_norm(&Mat::zeros(3, 3)), 0.0);
    }

    #[test]
    fn rectangular_norms_use_the_small_gram() {
        let m = Mat::from_rows(&[[3.0, 0.0, 0.0], [0.0, 0.0, 4.0]]);
        assert!((spectral_norm(&m) - 4.0).abs() < 1e-14);
        assert!((trace_norm(&m) - 7.0).abs() < 1e-14);
        assert!((spectral_norm(&m.transpose()) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn spd_solve_cases() {
        let b = Mat::from_rows(&[[1.0, 2.0], [3.0, -4.0]]);
        assert_eq!(spd_solve(&SymMat::identity(2), &b).unwrap(), b);
        let two = SymMat::from_mat(&Mat::identity(2).scale(2.0)).unwrap();
        let x = spd_solve(&two, &Mat::identity(2)).unwrap();
        assert!((&x - &Mat::identity(2).scale(0.5)).max_abs() < 1e-15);
        let indefinite = SymMat::from_mat(&Mat::diag(&[1.0, -1.0])).unwrap();
        assert!(matches!(
            spd_solve(&indefinite, &b),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn min_eigenvalues() {
        assert_eq!(min_eigenvalue_sym(&SymMat::identity(3)).unwrap(), 1.0);
        let d = SymMat::from_mat(&Mat::diag(&[0.25, 3.0, 7.0])).unwrap();
        assert!((min_eigenvalue_sym(&d).unwrap() - 0.25).abs() < 1e-15);
        let m = SymMat::from_mat(&Mat::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
        assert!((min_eigenvalue_sym(&m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_and_empty_rejected() {
        assert!(Mat::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Mat::new(0, 1, vec![]).is_err());
        assert!(Mat::from_nested(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn symmetrize_is_idempotent() {
        let m = Mat::from_rows(&[[0.1, 0.7, -0.3], [0.2, 1.0, 0.5], [0.9, -0.4, 2.0]]);
        let s = m.symmetrize();
        assert_eq!(s.symmetrize(), s);
        assert_eq!(s.asymmetry(), 0.0);
    }
}
