//! Small dense real-matrix kernels.
//!
//! Row-major storage, allocation per call, no global state. Sizes in this
//! crate never exceed about 32×32 (the largest object is the filtered
//! regressor Gramian, `(n+m+1)×(n+m+1)`), so the algorithms favour
//! robustness over asymptotic speed: partial-pivot LU for determinants and
//! solves, LU-based adjugates that stay finite on singular input, and cyclic
//! Jacobi for the minimum eigenvalue of a symmetric matrix.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

use crate::numeric::Real;

/// Relative asymmetry accepted by [`min_eig_sym`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Pivots below `SINGULAR_PIVOT_FACTOR · n · eps · max|a|` make [`solve`] fail.
pub const SINGULAR_PIVOT_FACTOR: f64 = 16.0;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("{op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: matrix is {rows}x{cols}, not square")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is singular (pivot magnitude {pivot:e})")]
    Singular { pivot: f64 },
    #[error("matrix is not symmetric (max defect {defect:e})")]
    Asymmetric { defect: f64 },
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, MatrixError>;

#[derive(Clone, PartialEq)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    /// Builds a matrix from row-major entries; rejects non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(MatrixError::Dimension {
                op: "Mat::new",
                expected: format!("{rows}x{cols} = {} entries (non-empty)", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Wraps row-major entries without the finiteness check, for integrator
    /// states that are validated separately.
    ///
    /// # Panics
    /// If `rows * cols != data.len()`.
    pub fn new_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::new_unchecked: entry count");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(MatrixError::Dimension {
                op: "Mat::from_rows",
                expected: format!("rows of length {cols}"),
                found: format!("row of length {}", bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Column vector.
    pub fn column(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// `a·bᵀ` for vectors `a`, `b`.
    pub fn outer(a: &[T], b: &[T]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Rows `r0..r1` as a new matrix.
    pub fn row_block(&self, r0: usize, r1: usize) -> Self {
        Self {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(MatrixError::Dimension {
                op: "vstack",
                expected: format!("{} columns", self.cols),
                found: format!("{} columns", other.cols),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Places `other` to the right of `self`.
    pub fn hstack(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(MatrixError::Dimension {
                op: "hstack",
                expected: format!("{} rows", self.rows),
                found: format!("{} rows", other.rows),
            });
        }
        Ok(Self::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                other[(i, j - self.cols)]
            }
        }))
    }

    pub fn try_mul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(MatrixError::Dimension {
                op: "matmul",
                expected: format!("rhs with {} rows", self.cols),
                found: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(MatrixError::Dimension {
                op: "mul_vec",
                expected: format!("vector of length {}", self.cols),
                found: format!("length {}", v.len()),
            });
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn tr_mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(MatrixError::Dimension {
                op: "tr_mul_vec",
                expected: format!("vector of length {}", self.rows),
                found: format!("length {}", v.len()),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, &v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replaces `self` by `(self + selfᵀ)/2`.
    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        let half = T::lit(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Largest `|m_ij − m_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = (self[(i, j)] - self[(j, i)]).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Column-major flattening (`vec(·)`).
    pub fn vec_col_major(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self[(i, j)]);
            }
        }
        out
    }

    fn require_square(&self, op: &'static str) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(MatrixError::NotSquare {
                op,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// Operator forms panic on shape mismatch; use `try_mul` where shapes come
// from user input.
impl<T: Real> Mul for &Mat<T> {
    type Output = Mat<T>;
    fn mul(self, rhs: &Mat<T>) -> Mat<T> {
        self.try_mul(rhs).expect("matrix product shape mismatch")
    }
}

impl<T: Real> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "matrix sum shape mismatch"
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

impl<T: Real> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "matrix difference shape mismatch"
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }
}

impl<T: Real> Neg for &Mat<T> {
    type Output = Mat<T>;
    fn neg(self) -> Mat<T> {
        self.map(|v| -v)
    }
}

impl<T: Real> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = self
                .row(i)
                .iter()
                .map(|v| format!("{:.6e}", v.to_f64_lossy()))
                .collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

/// Partial-pivot LU factorisation `P·A = L·U` stored compactly.
///
/// Factorisation never fails on singular input; a zero pivot is simply
/// recorded and shows up in [`Lu::det`] and [`Lu::solve`].
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
    max_abs_entry: T,
}

impl<T: Real> Lu<T> {
    pub fn factor(m: &Mat<T>) -> Result<Self> {
        m.require_square("lu")?;
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in (k + 1)..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == T::zero() {
                continue;
            }
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                if factor != T::zero() {
                    for j in (k + 1)..n {
                        let ukj = lu[k * n + j];
                        lu[i * n + j] -= factor * ukj;
                    }
                }
            }
        }
        Ok(Self {
            n,
            lu,
            perm,
            sign,
            max_abs_entry: m.max_abs(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn pivots(&self) -> impl Iterator<Item = T> + '_ {
        (0..self.n).map(move |k| self.lu[k * self.n + k])
    }

    pub fn min_abs_pivot(&self) -> T {
        self.pivots()
            .map(|p| p.abs())
            .fold(T::infinity(), |a, b| if b < a { b } else { a })
    }

    pub fn has_zero_pivot(&self) -> bool {
        self.pivots().any(|p| p == T::zero())
    }

    pub fn det(&self) -> T {
        self.pivots().fold(self.sign, |acc, p| acc * p)
    }

    /// Solves `A·X = B`; `None` when a pivot is exactly zero.
    pub fn solve(&self, b: &Mat<T>) -> Option<Mat<T>> {
        assert_eq!(b.rows, self.n, "Lu::solve: rhs row count");
        if self.has_zero_pivot() {
            return None;
        }
        let n = self.n;
        let nc = b.cols;
        let mut x = Mat::zeros(n, nc);
        for (i, &pi) in self.perm.iter().enumerate() {
            x.data[i * nc..(i + 1) * nc].copy_from_slice(b.row(pi));
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l == T::zero() {
                    continue;
                }
                for j in 0..nc {
                    let v = x.data[k * nc + j];
                    x.data[i * nc + j] -= l * v;
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = self.lu[i * n + k];
                if u == T::zero() {
                    continue;
                }
                for j in 0..nc {
                    let v = x.data[k * nc + j];
                    x.data[i * nc + j] -= u * v;
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..nc {
                x.data[i * nc + j] /= d;
            }
        }
        Some(x)
    }
}

/// Determinant; closed form up to 2×2, pivoted LU beyond.
pub fn determinant<T: Real>(m: &Mat<T>) -> Result<T> {
    m.require_square("determinant")?;
    Ok(match m.rows {
        1 => m.data[0],
        2 => m.data[0] * m.data[3] - m.data[1] * m.data[2],
        _ => Lu::factor(m)?.det(),
    })
}

/// Adjugate `adj(M)` with `adj(M)·M = det(M)·I`, finite for singular `M`.
///
/// Nonsingular factorisations give `det(M)·M⁻¹` directly. If a pivot
/// vanishes the cofactors are formed from LU determinants of the minors.
pub fn adjugate<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    m.require_square("adjugate")?;
    let n = m.rows;
    match n {
        1 => return Ok(Mat::identity(1)),
        2 => {
            return Ok(Mat {
                rows: 2,
                cols: 2,
                data: vec![m.data[3], -m.data[1], -m.data[2], m.data[0]],
            })
        }
        _ => {}
    }
    let lu = Lu::factor(m)?;
    if !lu.has_zero_pivot() {
        let inv = lu.solve(&Mat::identity(n)).expect("nonzero pivots");
        return Ok(inv.scale(lu.det()));
    }
    cofactor_adjugate(m)
}

/// `adj(M)·B` together with `det(M)`.
///
/// Evaluated as `det(M)·solve(M, B)` whenever the factorisation has no zero
/// pivot, which is backward stable even when `M` is badly conditioned.
pub fn det_adjugate_mul<T: Real>(m: &Mat<T>, b: &Mat<T>) -> Result<(T, Mat<T>)> {
    m.require_square("det_adjugate_mul")?;
    if b.rows != m.rows {
        return Err(MatrixError::Dimension {
            op: "det_adjugate_mul",
            expected: format!("rhs with {} rows", m.rows),
            found: format!("{}x{}", b.rows, b.cols),
        });
    }
    if m.rows <= 2 {
        return Ok((determinant(m)?, &adjugate(m)? * b));
    }
    let lu = Lu::factor(m)?;
    let det = lu.det();
    match lu.solve(b) {
        Some(x) => Ok((det, x.scale(det))),
        None => Ok((det, &cofactor_adjugate(m)? * b)),
    }
}

fn minor<T: Real>(m: &Mat<T>, skip_r: usize, skip_c: usize) -> Mat<T> {
    let n = m.rows;
    Mat::from_fn(n - 1, n - 1, |i, j| {
        let r = if i < skip_r { i } else { i + 1 };
        let c = if j < skip_c { j } else { j + 1 };
        m[(r, c)]
    })
}

fn cofactor_adjugate<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    let n = m.rows;
    let mut adj = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = determinant(&minor(m, i, j))?;
            let c = if (i + j) % 2 == 0 { d } else { -d };
            adj[(j, i)] = c;
        }
    }
    Ok(adj)
}

/// Solves `a·x = b`, rejecting numerically singular `a`.
pub fn solve<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    a.require_square("solve")?;
    if b.rows != a.rows {
        return Err(MatrixError::Dimension {
            op: "solve",
            expected: format!("rhs with {} rows", a.rows),
            found: format!("{}x{}", b.rows, b.cols),
        });
    }
    let lu = Lu::factor(a)?;
    let tol =
        T::lit(SINGULAR_PIVOT_FACTOR) * T::lit(a.rows as f64) * T::epsilon() * lu.max_abs_entry;
    let pmin = lu.min_abs_pivot();
    if !(pmin > tol) {
        return Err(MatrixError::Singular {
            pivot: pmin.to_f64_lossy(),
        });
    }
    Ok(lu.solve(b).expect("pivots checked"))
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi, ascending.
pub fn sym_eigenvalues<T: Real>(m: &Mat<T>) -> Result<Vec<T>> {
    m.require_square("sym_eigenvalues")?;
    let scale = m.max_abs();
    if m.asymmetry() > T::lit(SYMMETRY_TOL) * scale {
        return Err(MatrixError::Asymmetric {
            defect: m.asymmetry().to_f64_lossy(),
        });
    }
    let n = m.rows;
    let mut a = m.clone();
    a.symmetrize();
    if scale == T::zero() {
        return Ok(vec![T::zero(); n]);
    }
    let two = T::lit(2.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .fold(T::zero(), |acc, (i, j)| acc + a[(i, j)] * a[(i, j)]);
        if off.sqrt() <= T::epsilon() * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym<T: Real>(m: &Mat<T>) -> Result<T> {
    Ok(sym_eigenvalues(m)?[0])
}

/// Numerical rank by Gaussian elimination with complete pivoting.
pub fn rank<T: Real>(m: &Mat<T>, rel_tol: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = (a.rows, a.cols);
    let tol = T::lit(rel_tol) * m.max_abs();
    let mut r = 0;
    for _ in 0..rows.min(cols) {
        let mut best = T::zero();
        let mut at = (r, r);
        for i in r..rows {
            for j in r..cols {
                if a[(i, j)].abs() > best {
                    best = a[(i, j)].abs();
                    at = (i, j);
                }
            }
        }
        if best <= tol || best == T::zero() {
            break;
        }
        for j in 0..cols {
            a.data.swap(r * cols + j, at.0 * cols + j);
        }
        for i in 0..rows {
            a.data.swap(i * cols + r, i * cols + at.1);
        }
        let pivot = a[(r, r)];
        for i in (r + 1)..rows {
            let f = a[(i, r)] / pivot;
            for j in r..cols {
                let v = a[(r, j)];
                a[(i, j)] -= f * v;
            }
        }
        r += 1;
    }
    r
}
