//! Dense matrices and the symmetric positive (semi-)definite kernels the rest
//! of the crate is built on: Cholesky, cyclic Jacobi eigendecomposition,
//! matrix square root and inverse, Mahalanobis distance and weighted
//! covariance.
//!
//! Every call into the eigensolver bumps a thread-local counter
//! ([`eig_call_count`]). Training code asserts that this counter does not move
//! while a loss is built and differentiated.

use std::cell::Cell;
use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Maximum number of full Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;

thread_local! {
    static EIG_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of eigendecompositions (directly or through [`spd_sqrt`] and
/// [`project_to_spd`]) performed on the current thread.
pub fn eig_call_count() -> u64 {
    EIG_CALLS.with(|c| c.get())
}

fn bump_eig_counter() {
    EIG_CALLS.with(|c| c.set(c.get() + 1));
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector.
    pub fn column(v: &[T]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: rhs.rows,
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    fn zip_with(&self, rhs: &Matrix<T>, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                actual: rhs.rows * rhs.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&a| a * a).sum()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// `(A + Aᵀ) / 2`. Exact no-op on a symmetric matrix.
    pub fn symmetrized(&self) -> Matrix<T> {
        let half = T::lit(0.5);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = (self[(i, j)] + self[(j, i)]) * half;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Largest relative asymmetry `|a_ij - a_ji| / (1 + |a_ij|)` and where it occurs.
    fn max_asymmetry(&self) -> (T, usize, usize) {
        let mut worst = (T::zero(), 0, 0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs() / (T::one() + self[(i, j)].abs());
                if gap > worst.0 {
                    worst = (gap, i, j);
                }
            }
        }
        worst
    }

    /// Relative Frobenius distance `‖self - other‖ / max(‖other‖, tiny)`.
    pub fn rel_frobenius_distance(&self, other: &Matrix<T>) -> T {
        let diff = self.sub(other).expect("same shape").frobenius_norm();
        let denom = other.frobenius_norm().max(T::min_positive_value());
        diff / denom
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Symmetric positive semi-definite matrix.
///
/// Construction rejects asymmetric input and repairs input whose smallest
/// eigenvalue lies below `-1e-8 · trace / dim` by clamping the spectrum to the
/// ridge floor.
#[derive(Clone, PartialEq)]
pub struct SpdMatrix<T = f64> {
    inner: Matrix<T>,
}

impl<T: fmt::Debug> fmt::Debug for SpdMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Spd{:?}", self.inner)
    }
}

/// Default ridge floor `1e-6 · trace / dim` (zero for a zero matrix).
pub fn ridge_floor<T: Real>(m: &Matrix<T>) -> T {
    let n = m.rows().max(1);
    (T::lit(1e-6) * m.trace() / T::from_usize(n).unwrap()).max(T::zero())
}

impl<T: Real> SpdMatrix<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        Self::new_repaired(m).map(|(s, _)| s)
    }

    /// Like [`SpdMatrix::new`], also reporting whether the spectrum had to be
    /// clamped.
    pub fn new_repaired(m: Matrix<T>) -> Result<(Self, bool)> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.rows(),
                actual: m.cols(),
            });
        }
        if let Some(pos) = m.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: pos / m.cols().max(1),
                col: pos % m.cols().max(1),
            });
        }
        let (gap, i, j) = m.max_asymmetry();
        if gap > T::symmetry_tol() {
            return Err(Error::NotSymmetric {
                i,
                j,
                gap: gap.to_f64().unwrap_or(f64::NAN),
            });
        }
        let m = m.symmetrized();
        if within_psd_tolerance(&m) {
            Ok((SpdMatrix { inner: m }, false))
        } else {
            let floor = ridge_floor(&m);
            Ok((project_symmetric(m, floor)?, true))
        }
    }

    /// Caller guarantees exact symmetry and positive semi-definiteness.
    pub(crate) fn from_trusted(m: Matrix<T>) -> Self {
        debug_assert!(m.is_square());
        SpdMatrix { inner: m }
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix {
            inner: Matrix::identity(n),
        }
    }

    /// Diagonal matrix; negative entries are clamped by the repair path.
    pub fn from_diag(diag: &[T]) -> Result<Self> {
        Self::new(Matrix::from_diag(diag))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.inner
    }

    pub fn trace(&self) -> T {
        self.inner.trace()
    }

    /// Natural log of the determinant via Cholesky.
    pub fn log_det(&self) -> Result<T> {
        let l = cholesky(self)?;
        Ok(log_det_from_cholesky(&l))
    }

    /// `self + ridge · I`.
    pub fn with_ridge(&self, ridge: T) -> SpdMatrix<T> {
        let mut m = self.inner.clone();
        for i in 0..m.rows() {
            m[(i, i)] += ridge.max(T::zero());
        }
        SpdMatrix { inner: m }
    }
}

impl<T> Index<(usize, usize)> for SpdMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &T {
        &self.inner[idx]
    }
}

/// Smallest eigenvalue ≥ -1e-8 · trace/dim, tested by a shifted Cholesky so
/// that validation never touches the eigensolver.
fn within_psd_tolerance<T: Real>(m: &Matrix<T>) -> bool {
    let n = m.rows();
    if n == 0 {
        return true;
    }
    let tol = if T::jacobi_tol() < T::lit(1e-9) {
        T::lit(1e-8)
    } else {
        T::lit(1e-4)
    };
    let shift = tol * m.trace().max(T::zero()) / T::from_usize(n).unwrap() + T::min_positive_value();
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] += shift;
    }
    cholesky_matrix(&shifted).is_ok()
}

/// Ascending eigenvalues with orthonormal eigenvectors stored as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair<T = f64> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
}

impl<T: Real> EigenPair<T> {
    /// `Q f(Λ) Qᵀ`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let fl: Vec<T> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for k in 0..n {
                    s += q[(i, k)] * fl[k] * q[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        self.reconstruct_with(|l| l)
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky<T: Real>(a: &SpdMatrix<T>) -> Result<Matrix<T>> {
    cholesky_matrix(a.matrix())
}

/// Cholesky of any square matrix, reading only the lower triangle.
pub(crate) fn cholesky_matrix<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: d.to_f64().unwrap_or(f64::NAN),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// `2 Σ ln L_ii`.
pub fn log_det_from_cholesky<T: Real>(l: &Matrix<T>) -> T {
    let two = T::lit(2.0);
    (0..l.rows()).map(|i| two * l[(i, i)].ln()).sum()
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_transposed<T: Real>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig<T: Real>(a: &SpdMatrix<T>) -> Result<EigenPair<T>> {
    jacobi_eig(a.matrix())
}

/// Ascending eigenvalues of a symmetric (not necessarily definite) matrix;
/// the input is symmetrised first.
pub fn symmetric_eigenvalues<T: Real>(a: &Matrix<T>) -> Result<Vec<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    Ok(jacobi_eig(&a.symmetrized())?.eigenvalues)
}

/// Jacobi on an exactly symmetric matrix.
pub(crate) fn jacobi_eig<T: Real>(a: &Matrix<T>) -> Result<EigenPair<T>> {
    bump_eig_counter();
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let tol = T::jacobi_tol() * scale;

    let off_diagonal = |m: &Matrix<T>| {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_diagonal(&m);
        if off > tol {
            return Err(Error::ConvergenceFailure {
                sweeps: JACOBI_MAX_SWEEPS,
                off_diagonal: off.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(EigenPair {
        eigenvalues,
        eigenvectors,
    })
}

/// Principal square root; tiny negative eigenvalues from roundoff map to 0.
pub fn spd_sqrt<T: Real>(a: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    let eig = sym_eig(a)?;
    Ok(SpdMatrix::from_trusted(
        eig.reconstruct_with(|l| l.max(T::zero()).sqrt()),
    ))
}

/// Inverse through the Cholesky factor.
pub fn spd_inverse<T: Real>(a: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    let l = cholesky(a)?;
    let n = a.dim();
    let mut linv = Matrix::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = T::zero());
        e[j] = T::one();
        let col = solve_lower(&l, &e);
        for i in 0..n {
            linv[(i, j)] = col[i];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for k in j..n {
                s += linv[(k, i)] * linv[(k, j)];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(SpdMatrix::from_trusted(inv))
}

/// `sqrt((u - v)ᵀ P (u - v))` for a precision matrix `P`.
pub fn mahalanobis<T: Real>(u: &[T], v: &[T], precision: &SpdMatrix<T>) -> Result<T> {
    let n = precision.dim();
    for len in [u.len(), v.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    Ok(mahalanobis_sq_unchecked(u, v, precision.matrix()).max(T::zero()).sqrt())
}

#[inline]
pub(crate) fn mahalanobis_sq_unchecked<T: Real>(u: &[T], v: &[T], precision: &Matrix<T>) -> T {
    let n = u.len();
    let mut total = T::zero();
    for i in 0..n {
        let di = u[i] - v[i];
        if di == T::zero() {
            continue;
        }
        let prow = precision.row(i);
        let mut s = T::zero();
        for j in 0..n {
            s += prow[j] * (u[j] - v[j]);
        }
        total += di * s;
    }
    total
}

/// Weighted mean and population-convention covariance of the rows of `points`.
pub fn weighted_covariance<T: Real>(
    points: &Matrix<T>,
    weights: &[T],
) -> Result<(Vec<T>, SpdMatrix<T>)> {
    let (n_pts, dim) = points.shape();
    if weights.len() != n_pts {
        return Err(Error::DimensionMismatch {
            expected: n_pts,
            actual: weights.len(),
        });
    }
    if n_pts == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let sum: T = weights.iter().copied().sum();
    if weights.iter().any(|&w| w < T::zero() || !w.is_finite())
        || (sum - T::one()).abs() > T::symmetry_tol()
    {
        return Err(Error::InvalidWeights {
            sum: sum.to_f64().unwrap_or(f64::NAN),
        });
    }
    let rows: Vec<&[T]> = (0..n_pts).map(|i| points.row(i)).collect();
    let (mean, cov) = weighted_moments(&rows, weights, dim);
    Ok((mean, SpdMatrix::new(cov)?))
}

/// Shared accumulation loop: mean first, then upper triangle of the centred
/// outer products, mirrored.
pub(crate) fn weighted_moments<T: Real>(rows: &[&[T]], weights: &[T], dim: usize) -> (Vec<T>, Matrix<T>) {
    let mut mean = vec![T::zero(); dim];
    for (row, &w) in rows.iter().zip(weights) {
        for c in 0..dim {
            mean[c] += w * row[c];
        }
    }
    let mut cov = Matrix::zeros(dim, dim);
    let mut centred = vec![T::zero(); dim];
    for (row, &w) in rows.iter().zip(weights) {
        for c in 0..dim {
            centred[c] = row[c] - mean[c];
        }
        for i in 0..dim {
            let wi = w * centred[i];
            for j in i..dim {
                cov[(i, j)] += wi * centred[j];
            }
        }
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// Symmetrize, then clamp the spectrum to `≥ floor`. Input already satisfying
/// the floor is returned unchanged, which makes the projection idempotent.
pub fn project_to_spd<T: Real>(a: &Matrix<T>, floor: T) -> Result<SpdMatrix<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    project_symmetric(a.symmetrized(), floor)
}

fn project_symmetric<T: Real>(sym: Matrix<T>, floor: T) -> Result<SpdMatrix<T>> {
    let n = sym.rows();
    if n == 0 {
        return Ok(SpdMatrix::from_trusted(sym));
    }
    let eig = jacobi_eig(&sym)?;
    let scale = eig
        .eigenvalues
        .iter()
        .fold(floor.abs(), |acc, &l| acc.max(l.abs()));
    let slack = T::lit(100.0) * T::from_usize(n).unwrap() * T::epsilon() * scale;
    if eig.eigenvalues[0] >= floor - slack {
        return Ok(SpdMatrix::from_trusted(sym));
    }
    Ok(SpdMatrix::from_trusted(
        eig.reconstruct_with(|l| l.max(floor)),
    ))
}
