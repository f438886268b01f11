//! Dense complex linear algebra used throughout the simulator.
//!
//! Everything here works on [`ComplexMatrix`], a row-major matrix of
//! double-precision complex numbers. The decompositions are small and
//! self-contained: a one-sided Jacobi SVD, SVD-based least squares and
//! pseudo-inverse, an LDLᴴ factorisation for Hermitian positive-definite
//! log-determinants, and an LU solver for general square systems.
//!
//! Products that feed the complexity experiments go through
//! [`matmul_counted`], which bumps an explicit [`MultiplicationCounter`].

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

const SVD_MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("svd did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    NoConvergence { rows: usize, cols: usize, sweeps: usize },
    #[error("{op}: matrix is empty")]
    Empty { op: &'static str },
    #[error("{op}: matrix contains non-finite entries")]
    NonFinite { op: &'static str },
    #[error("{op}: matrix is singular or not positive definite")]
    Singular { op: &'static str },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.4}{:+.4}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major storage. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "storage length {} does not match {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(d, 0.0);
        }
        m
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[C64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
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

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[C64]) {
        assert_eq!(v.len(), self.rows);
        for (r, &z) in v.iter().enumerate() {
            self[(r, c)] = z;
        }
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.cols)).collect();
        self.select_columns(&idx)
    }

    pub fn submatrix(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| self[(row0 + r, col0 + c)])
    }

    /// Appends `v` as a new rightmost column.
    pub fn push_column(&self, v: &[C64]) -> Self {
        assert!(self.cols == 0 || v.len() == self.rows);
        let rows = if self.cols == 0 { v.len() } else { self.rows };
        Self::from_fn(
            rows,
            self.cols + 1,
            |r, c| {
                if c < self.cols {
                    self[(r, c)]
                } else {
                    v[r]
                }
            },
        )
    }

    /// Hermitian (conjugate) transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Uncounted product. Panics on shape mismatch; use [`matmul`] for a
    /// fallible version.
    pub fn dot(&self, other: &Self) -> Self {
        matmul(self, other).expect("matrix product shape mismatch")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in add");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in sub");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.dot(rhs)
    }
}

/// Tally of complex multiplications performed by counted kernels.
///
/// Only multiplications are counted, never additions.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MultiplicationCounter {
    count: u64,
}

impl MultiplicationCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add(&mut self, n: u64) {
        self.count += n;
    }
}

pub fn frobenius_norm(m: &ComplexMatrix) -> f64 {
    m.norm_sqr().sqrt()
}

pub fn matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = ComplexMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == ZERO {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `A·B`, adding `a.rows × a.cols × b.cols` to `counter`.
pub fn matmul_counted(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    counter: &mut MultiplicationCounter,
) -> Result<ComplexMatrix> {
    let out = matmul(a, b)?;
    counter.add((a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// `Aᴴ·B` without materialising the adjoint.
pub fn adjoint_mul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "adjoint_mul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = ComplexMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let c = aki.conj();
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += c * bkj;
            }
        }
    }
    Ok(out)
}

/// Counted variant of [`adjoint_mul`]; charges `a.cols × a.rows × b.cols`.
pub fn adjoint_mul_counted(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    counter: &mut MultiplicationCounter,
) -> Result<ComplexMatrix> {
    let out = adjoint_mul(a, b)?;
    counter.add((a.cols * a.rows * b.cols) as u64);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `rows × k`.
    pub u: ComplexMatrix,
    /// Singular values, descending, length `k = min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols × k`.
    pub v: ComplexMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let us = ComplexMatrix::from_fn(self.u.rows, self.sigma.len(), |r, c| self.u[(r, c)] * self.sigma[c]);
        us.dot(&self.v.adjoint())
    }

    /// Number of singular values above `rel_tol · σ₁`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

fn check_input(m: &ComplexMatrix, op: &'static str) -> Result<()> {
    if m.is_empty() {
        return Err(LinalgError::Empty { op });
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite { op });
    }
    Ok(())
}

/// Thin singular value decomposition `M = U·diag(σ)·Vᴴ`.
///
/// One-sided (Hestenes) Jacobi on the columns of `M` (or of `Mᴴ` when `M`
/// is wide). Columns of `U` belonging to zero singular values are completed
/// to an orthonormal set so `UᴴU = I` always holds.
pub fn svd(m: &ComplexMatrix) -> Result<SvdResult> {
    check_input(m, "svd")?;
    if m.rows < m.cols {
        let t = svd_tall(&m.adjoint(), m.shape())?;
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    svd_tall(m, m.shape())
}

fn svd_tall(m: &ComplexMatrix, orig: (usize, usize)) -> Result<SvdResult> {
    let rows = m.rows;
    let n = m.cols;
    // Column-major working copies so rotations touch contiguous memory.
    let mut a: Vec<Vec<C64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<C64>> = (0..n)
        .map(|c| {
            let mut e = vec![ZERO; n];
            e[c] = ONE;
            e
        })
        .collect();

    let tol = 1e-15;
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = ZERO;
                    for (x, y) in ap.iter().zip(aq) {
                        alpha += x.norm_sqr();
                        beta += y.norm_sqr();
                        gamma += x.conj() * y;
                    }
                    (alpha, beta, gamma)
                };
                let g = gamma.norm();
                if g == 0.0 || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                // Rotate [a_p, e^{-jφ} a_q] with a real Jacobi rotation.
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s, phase);
                rotate(&mut v, p, q, c, s, phase);
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            rows: orig.0,
            cols: orig.1,
            sweeps,
        });
    }

    let mut order: Vec<(usize, f64)> = a
        .iter()
        .enumerate()
        .map(|(i, col)| (i, col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));

    let top = order.first().map_or(0.0, |o| o.1);
    let cutoff = top * f64::EPSILON * 1e-3;
    let mut u = ComplexMatrix::zeros(rows, n);
    let mut vm = ComplexMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &(idx, s)) in order.iter().enumerate() {
        vm.set_column(k, &v[idx]);
        if s > cutoff && s > 0.0 {
            let col: Vec<C64> = a[idx].iter().map(|z| z / s).collect();
            u.set_column(k, &col);
            sigma.push(s);
        } else {
            sigma.push(0.0);
            deficient.push(k);
        }
    }
    if !deficient.is_empty() {
        complete_orthonormal(&mut u, &deficient);
    }
    Ok(SvdResult { u, sigma, v: vm })
}

#[inline]
fn rotate(cols: &mut [Vec<C64>], p: usize, q: usize, c: f64, s: f64, phase: C64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    let ph_conj = phase.conj();
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yq = *y * ph_conj;
        let xn = *x * c - yq * s;
        let yn = *x * s + yq * c;
        *x = xn;
        *y = yn;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column (Gram-Schmidt against the standard basis).
fn complete_orthonormal(u: &mut ComplexMatrix, missing: &[usize]) {
    let rows = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|c| !missing.contains(c)).collect();
    let mut basis = 0;
    for &target in missing {
        while basis < rows {
            let mut cand = vec![ZERO; rows];
            cand[basis] = ONE;
            basis += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.column(f);
                    let proj: C64 = col.iter().zip(&cand).map(|(a, b)| a.conj() * b).sum();
                    for (x, a) in cand.iter_mut().zip(&col) {
                        *x -= proj * a;
                    }
                }
            }
            let nrm = cand.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if nrm > 1e-8 {
                let col: Vec<C64> = cand.iter().map(|z| z / nrm).collect();
                u.set_column(target, &col);
                filled.push(target);
                break;
            }
        }
    }
}

/// Solution of a least-squares problem plus rank diagnostics.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub x: ComplexMatrix,
    pub rank: usize,
    /// Set when `A` had numerically dependent columns and the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

/// Minimises `‖A·X − B‖_F` through the SVD of `A`. Rank-deficient systems get
/// the minimum-norm solution.
pub fn least_squares(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<LeastSquares> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "least_squares",
            left: a.shape(),
            right: b.shape(),
        });
    }
    check_input(b, "least_squares")?;
    let dec = svd(a)?;
    let k = dec.sigma.len();
    let tol = dec.sigma.first().copied().unwrap_or(0.0) * (a.rows.max(a.cols) as f64) * f64::EPSILON;
    let uhb = adjoint_mul(&dec.u, b)?;
    let mut scaled = ComplexMatrix::zeros(k, b.cols);
    let mut rank = 0;
    for i in 0..k {
        let s = dec.sigma[i];
        if s > tol && s > 0.0 {
            rank += 1;
            for j in 0..b.cols {
                scaled[(i, j)] = uhb[(i, j)] / s;
            }
        }
    }
    let x = matmul(&dec.v, &scaled)?;
    Ok(LeastSquares {
        x,
        rank,
        rank_deficient: rank < a.cols,
    })
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let dec = svd(a)?;
    let tol = dec.sigma.first().copied().unwrap_or(0.0) * (a.rows.max(a.cols) as f64) * f64::EPSILON;
    let vs = ComplexMatrix::from_fn(dec.v.rows, dec.sigma.len(), |r, c| {
        let s = dec.sigma[c];
        if s > tol && s > 0.0 {
            dec.v[(r, c)] / s
        } else {
            ZERO
        }
    });
    matmul(&vs, &dec.u.adjoint())
}

/// LDLᴴ factorisation of a Hermitian positive-definite matrix. Returns the
/// unit lower-triangular factor and the (real, positive) pivots.
pub fn ldl_hermitian(m: &ComplexMatrix) -> Result<(ComplexMatrix, Vec<f64>)> {
    let mut counter = MultiplicationCounter::new();
    ldl_hermitian_counted(m, &mut counter)
}

fn ldl_hermitian_counted(m: &ComplexMatrix, counter: &mut MultiplicationCounter) -> Result<(ComplexMatrix, Vec<f64>)> {
    if m.rows != m.cols {
        return Err(LinalgError::NotSquare {
            op: "ldl",
            rows: m.rows,
            cols: m.cols,
        });
    }
    check_input(m, "ldl")?;
    let n = m.rows;
    let mut l = ComplexMatrix::identity(n);
    let mut d = vec![0.0; n];
    let mut mults = 0u64;
    for j in 0..n {
        let mut dj = m[(j, j)].re;
        for k in 0..j {
            dj -= l[(j, k)].norm_sqr() * d[k];
        }
        mults += j as u64;
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(LinalgError::Singular { op: "ldl" });
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj() * d[k];
            }
            mults += j as u64;
            l[(i, j)] = s / dj;
        }
    }
    counter.add(mults);
    Ok((l, d))
}

/// `log₂ det(M)` for Hermitian positive-definite `M`, from the LDLᴴ pivots.
pub fn log2_det_hpd(m: &ComplexMatrix) -> Result<f64> {
    let (_, d) = ldl_hermitian(m)?;
    Ok(d.iter().map(|p| p.log2()).sum())
}

/// Solves `M·X = B` for Hermitian positive-definite `M`.
pub fn solve_hpd(m: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let mut counter = MultiplicationCounter::new();
    solve_hpd_counted(m, b, &mut counter)
}

/// [`solve_hpd`] charging every complex multiplication of the factorisation
/// and the two triangular sweeps to `counter`.
pub fn solve_hpd_counted(
    m: &ComplexMatrix,
    b: &ComplexMatrix,
    counter: &mut MultiplicationCounter,
) -> Result<ComplexMatrix> {
    if m.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_hpd",
            left: m.shape(),
            right: b.shape(),
        });
    }
    let (l, d) = ldl_hermitian_counted(m, counter)?;
    let n = m.rows;
    let mut x = b.clone();
    // forward: L·y = b
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            for j in 0..b.cols {
                let t = x[(k, j)];
                x[(i, j)] -= lik * t;
            }
        }
    }
    // diagonal
    for i in 0..n {
        for j in 0..b.cols {
            x[(i, j)] /= d[i];
        }
    }
    // backward: Lᴴ·x = y
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[(k, i)].conj();
            for j in 0..b.cols {
                let t = x[(k, j)];
                x[(i, j)] -= lki * t;
            }
        }
    }
    let tri = (n * (n - 1)) as u64 * b.cols as u64;
    counter.add(tri + (n * b.cols) as u64);
    Ok(x)
}

/// LU factorisation with partial pivoting, kept for repeated solves.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: ComplexMatrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(m: &ComplexMatrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(LinalgError::NotSquare {
                op: "lu",
                rows: m.rows,
                cols: m.cols,
            });
        }
        check_input(m, "lu")?;
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.as_slice().iter().map(|z| z.norm()).fold(0.0, f64::max);
        for k in 0..n {
            let (piv, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].norm()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= scale * 1e-14 || pmax == 0.0 {
                return Err(LinalgError::Singular { op: "lu" });
            }
            if piv != k {
                for c in 0..n {
                    lu.data.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                for c in k + 1..n {
                    let t = lu[(k, c)];
                    lu[(i, c)] -= f * t;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &ComplexMatrix) -> Result<ComplexMatrix> {
        let n = self.lu.rows;
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch {
                op: "lu_solve",
                left: self.lu.shape(),
                right: b.shape(),
            });
        }
        let mut x = ComplexMatrix::from_fn(n, b.cols, |r, c| b[(self.perm[r], c)]);
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[(i, k)];
                for j in 0..b.cols {
                    let t = x[(k, j)];
                    x[(i, j)] -= f * t;
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[(i, k)];
                for j in 0..b.cols {
                    let t = x[(k, j)];
                    x[(i, j)] -= f * t;
                }
            }
            let p = self.lu[(i, i)];
            for j in 0..b.cols {
                x[(i, j)] /= p;
            }
        }
        Ok(x)
    }
}

pub fn solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    Lu::new(a)?.solve(b)
}

pub fn inverse(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    Lu::new(a)?.solve(&ComplexMatrix::identity(a.rows))
}

/// Euclidean norm of a complex vector.
pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `⟨a, b⟩ = aᴴ·b`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `‖P_A − P_B‖_F` for the orthogonal projectors onto the column spaces of
/// `a` and `b`; zero exactly when the spans coincide.
pub fn subspace_distance(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    let pa = projector(a)?;
    let pb = projector(b)?;
    Ok(frobenius_norm(&(&pa - &pb)))
}

fn projector(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let dec = svd(a)?;
    let r = dec.rank(1e-10);
    let q = dec.u.leading_columns(r);
    matmul(&q, &q.adjoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, c, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn orthonormality_error(q: &ComplexMatrix) -> f64 {
        let g = q.adjoint().dot(q);
        frobenius_norm(&(&g - &ComplexMatrix::identity(q.cols())))
    }

    #[test]
    fn svd_identity() {
        let d = svd(&ComplexMatrix::identity(2)).unwrap();
        assert_eq!(d.sigma, vec![1.0, 1.0]);
        let uv = d.u.dot(&d.v.adjoint());
        assert!(uv.max_abs_diff(&ComplexMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn svd_diagonal_sorted() {
        let d = svd(&ComplexMatrix::from_real_diag(&[2.0, 3.0])).unwrap();
        assert!((d.sigma[0] - 3.0).abs() < 1e-15);
        assert!((d.sigma[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn svd_random_reconstruction_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, c) in &[(4, 3), (3, 4), (1, 5), (6, 1), (16, 64), (64, 16), (7, 7)] {
            let m = random_matrix(&mut rng, r, c);
            let d = svd(&m).unwrap();
            assert_eq!(d.sigma.len(), r.min(c));
            assert_eq!(d.u.shape(), (r, r.min(c)));
            assert_eq!(d.v.shape(), (c, r.min(c)));
            let err = frobenius_norm(&(&m - &d.reconstruct())) / frobenius_norm(&m);
            assert!(err < 1e-12, "{r}x{c}: {err}");
            assert!(orthonormality_error(&d.u) < 1e-9);
            assert!(orthonormality_error(&d.v) < 1e-9);
            assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let a = ComplexMatrix::column_vector(&[ONE, C64::new(0.0, 1.0), ZERO, ONE]);
        let b = a.dot(&ComplexMatrix::from_rows(&[vec![ONE, C64::new(2.0, -1.0), ZERO]]));
        let d = svd(&b).unwrap();
        assert_eq!(d.rank(1e-9), 1);
        assert!(orthonormality_error(&d.u) < 1e-9);
        assert!(orthonormality_error(&d.v) < 1e-9);
        assert!(frobenius_norm(&(&b - &d.reconstruct())) < 1e-12);
    }

    #[test]
    fn svd_zero_matrix() {
        let d = svd(&ComplexMatrix::zeros(3, 2)).unwrap();
        assert_eq!(d.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&d.u) < 1e-12);
    }

    #[test]
    fn svd_rejects_empty_and_nan() {
        assert!(matches!(
            svd(&ComplexMatrix::zeros(0, 0)),
            Err(LinalgError::Empty { .. })
        ));
        let mut m = ComplexMatrix::identity(2);
        m[(0, 1)] = C64::new(f64::NAN, 0.0);
        assert!(matches!(svd(&m), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&ComplexMatrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&ComplexMatrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        let m = ComplexMatrix::from_rows(&[vec![C64::new(3.0, 4.0)]]);
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn least_squares_identity_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(&mut rng, 3, 2);
        let ls = least_squares(&ComplexMatrix::identity(3), &b).unwrap();
        assert!(ls.x.max_abs_diff(&b) < 1e-14);
        assert!(!ls.rank_deficient);

        let a = ComplexMatrix::column_vector(&[ONE, ONE]);
        let b = ComplexMatrix::column_vector(&[ZERO, C64::new(2.0, 0.0)]);
        let ls = least_squares(&a, &b).unwrap();
        assert!((ls.x[(0, 0)] - ONE).norm() < 1e-14);
    }

    #[test]
    fn least_squares_rank_deficient_is_min_norm() {
        // Two identical columns: min-norm solution splits the weight evenly.
        let a = ComplexMatrix::from_rows(&[vec![ONE, ONE], vec![ONE, ONE]]);
        let b = ComplexMatrix::column_vector(&[C64::new(2.0, 0.0), C64::new(2.0, 0.0)]);
        let ls = least_squares(&a, &b).unwrap();
        assert!(ls.rank_deficient);
        assert_eq!(ls.rank, 1);
        assert!((ls.x[(0, 0)] - ONE).norm() < 1e-12);
        assert!((ls.x[(1, 0)] - ONE).norm() < 1e-12);
    }

    #[test]
    fn least_squares_shape_error() {
        let err = least_squares(&ComplexMatrix::zeros(3, 2), &ComplexMatrix::zeros(2, 1));
        assert!(matches!(err, Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn matmul_counted_counts() {
        let mut c = MultiplicationCounter::new();
        let a = ComplexMatrix::zeros(2, 3);
        let b = ComplexMatrix::zeros(3, 4);
        matmul_counted(&a, &b, &mut c).unwrap();
        assert_eq!(c.count(), 24);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 5);
        let mut c = MultiplicationCounter::new();
        let p = matmul_counted(&ComplexMatrix::identity(3), &m, &mut c).unwrap();
        assert_eq!(p, m);
        assert_eq!(c.count(), 3 * 3 * 5);

        let mut c = MultiplicationCounter::new();
        let fa = ComplexMatrix::zeros(64, 4);
        let fd = ComplexMatrix::zeros(4, 4);
        let s = ComplexMatrix::zeros(4, 1);
        let f = matmul_counted(&fa, &fd, &mut c).unwrap();
        matmul_counted(&f, &s, &mut c).unwrap();
        assert_eq!(c.count(), 1280);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut c = MultiplicationCounter::new();
        let err = matmul_counted(&ComplexMatrix::zeros(2, 3), &ComplexMatrix::zeros(2, 3), &mut c).unwrap_err();
        assert_eq!(
            err,
            LinalgError::DimensionMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert_eq!(c.count(), 0);
    }

    #[test]
    fn hpd_solve_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 5);
        let m = &a.dot(&a.adjoint()) + &ComplexMatrix::identity(5);
        let b = random_matrix(&mut rng, 5, 2);
        let x = solve_hpd(&m, &b).unwrap();
        assert!(m.dot(&x).max_abs_diff(&b) < 1e-12);
        let x2 = solve(&m, &b).unwrap();
        assert!(x.max_abs_diff(&x2) < 1e-12);

        let d = log2_det_hpd(&ComplexMatrix::from_real_diag(&[2.0, 4.0, 0.5])).unwrap();
        assert_eq!(d, 2.0);
        assert!(log2_det_hpd(&ComplexMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn lu_detects_singular() {
        let m = ComplexMatrix::from_rows(&[vec![ONE, ONE], vec![ONE, ONE]]);
        assert!(matches!(Lu::new(&m), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn pinv_of_tall_is_left_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 3);
        let p = pinv(&a).unwrap();
        assert!(p.dot(&a).max_abs_diff(&ComplexMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn subspace_distance_is_phase_blind() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 6, 2);
        let rotated = a.dot(&ComplexMatrix::from_rows(&[
            vec![C64::new(0.0, 1.0), ONE],
            vec![ZERO, C64::from_polar(1.0, 0.3)],
        ]));
        assert!(subspace_distance(&a, &rotated).unwrap() < 1e-10);
    }
}
