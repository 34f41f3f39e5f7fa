//! Closed-form quantities between multivariate normals: the likelihood term,
//! KL divergence (plain and calibrated), the exact 2-Wasserstein distance and
//! its eigendecomposition-free upper bound.

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, log_det_from_cholesky, solve_lower, spd_sqrt, Matrix, SpdMatrix,
};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T = f64> {
    pub mean: Vec<T>,
    pub cov: SpdMatrix<T>,
}

impl<T: Real> Gaussian<T> {
    pub fn new(mean: Vec<T>, cov: SpdMatrix<T>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                expected: cov.dim(),
                actual: mean.len(),
            });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: vec![T::zero(); dim],
            cov: SpdMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Square-root parameterization, via the principal root.
    pub fn to_sqrt(&self) -> Result<SqrtGaussian<T>> {
        Ok(SqrtGaussian {
            mean: self.mean.clone(),
            sqrt_cov: spd_sqrt(&self.cov)?.into_matrix(),
        })
    }
}

/// Gaussian carried by a symmetric square-root factor `S` with covariance `S²`.
/// `S` may be indefinite; the implied covariance is PSD regardless.
#[derive(Clone, Debug, PartialEq)]
pub struct SqrtGaussian<T = f64> {
    pub mean: Vec<T>,
    pub sqrt_cov: Matrix<T>,
}

impl<T: Real> SqrtGaussian<T> {
    pub fn new(mean: Vec<T>, sqrt_cov: Matrix<T>) -> Result<Self> {
        if !sqrt_cov.is_square() || sqrt_cov.rows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: sqrt_cov.rows(),
            });
        }
        for i in 0..sqrt_cov.rows() {
            for j in (i + 1)..sqrt_cov.cols() {
                let gap = (sqrt_cov[(i, j)] - sqrt_cov[(j, i)]).abs();
                if gap > T::symmetry_tol() * (T::one() + sqrt_cov[(i, j)].abs()) {
                    return Err(Error::NotSymmetric {
                        i,
                        j,
                        gap: gap.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        Ok(SqrtGaussian {
            mean,
            sqrt_cov: sqrt_cov.symmetrized(),
        })
    }

    /// `N(mean, S·S)`.
    pub fn to_gaussian(&self) -> Result<Gaussian<T>> {
        let sq = self.sqrt_cov.matmul(&self.sqrt_cov)?.symmetrized();
        Gaussian::new(self.mean.clone(), SpdMatrix::new(sq)?)
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `‖L⁻¹ v‖²` = `vᵀ (L Lᵀ)⁻¹ v`.
fn inv_quad<T: Real>(l: &Matrix<T>, v: &[T]) -> T {
    solve_lower(l, v).iter().map(|&z| z * z).sum()
}

/// `Tr((L Lᵀ)⁻¹ A)` = `Σ_ik (L⁻¹A)_ik (L⁻¹)_ik`.
fn inv_trace<T: Real>(l: &Matrix<T>, a: &Matrix<T>) -> T {
    let n = l.rows();
    let mut total = T::zero();
    let mut col = vec![T::zero(); n];
    let mut unit = vec![T::zero(); n];
    for k in 0..n {
        for i in 0..n {
            col[i] = a[(i, k)];
            unit[i] = if i == k { T::one() } else { T::zero() };
        }
        let x = solve_lower(l, &col);
        let linv = solve_lower(l, &unit);
        total += x.iter().zip(&linv).map(|(&p, &q)| p * q).sum();
    }
    total
}

/// `log|Σ̂| + (y - μ̂)ᵀ Σ̂⁻¹ (y - μ̂)`, constants dropped.
pub fn gaussian_nll<T: Real>(y: &[T], pred: &Gaussian<T>) -> Result<T> {
    check_dim(pred.dim(), y.len())?;
    let l = cholesky(&pred.cov)?;
    let r: Vec<T> = y.iter().zip(&pred.mean).map(|(&a, &b)| a - b).collect();
    Ok(log_det_from_cholesky(&l) + inv_quad(&l, &r))
}

/// `KL(p ‖ q)` for multivariate normals.
pub fn kl_divergence<T: Real>(p: &Gaussian<T>, q: &Gaussian<T>) -> Result<T> {
    check_dim(q.dim(), p.dim())?;
    let lq = cholesky(&q.cov)?;
    let lp = cholesky(&p.cov).map_err(|_| Error::DegenerateP)?;
    let k = T::from_usize(p.dim()).unwrap();
    let dmu: Vec<T> = q.mean.iter().zip(&p.mean).map(|(&a, &b)| a - b).collect();
    let value = T::lit(0.5)
        * (inv_trace(&lq, p.cov.matrix()) + inv_quad(&lq, &dmu) - k
            + log_det_from_cholesky(&lq)
            - log_det_from_cholesky(&lp));
    // exact zero for p = q; roundoff can otherwise go slightly negative
    Ok(value.max(T::zero()))
}

/// KL with the trace and residual terms halved so that, with the true
/// covariance as prior, the optimal predicted covariance equals the prior.
pub fn calibrated_kl<T: Real>(y: &[T], prior: &SpdMatrix<T>, pred: &Gaussian<T>) -> Result<T> {
    check_dim(pred.dim(), y.len())?;
    check_dim(pred.dim(), prior.dim())?;
    let l = cholesky(&pred.cov)?;
    let lp = cholesky(prior).map_err(|_| Error::DegenerateP)?;
    let k = T::from_usize(y.len()).unwrap();
    let r: Vec<T> = pred.mean.iter().zip(y).map(|(&a, &b)| a - b).collect();
    let half = T::lit(0.5);
    Ok(half
        * ((inv_trace(&l, prior.matrix()) + inv_quad(&l, &r)) * half - k
            + log_det_from_cholesky(&l)
            - log_det_from_cholesky(&lp)))
}

/// Stationary covariance of the summed uncalibrated KL objective at a fixed
/// mean: `prior + (1/N) Σ rᵢ rᵢᵀ`.
pub fn kl_covariance_optimum<T: Real>(prior: &SpdMatrix<T>, residual_cov: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    SpdMatrix::new(prior.matrix().add(residual_cov.matrix())?)
}

/// Stationary covariance of the calibrated objective: the average of the prior
/// and the residual covariance.
pub fn calibrated_kl_covariance_optimum<T: Real>(
    prior: &SpdMatrix<T>,
    residual_cov: &SpdMatrix<T>,
) -> Result<SpdMatrix<T>> {
    Ok(SpdMatrix::from_trusted(
        kl_covariance_optimum(prior, residual_cov)?
            .matrix()
            .scale(T::lit(0.5)),
    ))
}

/// `‖μ₁ - μ₂‖² + Tr[Σ₁ + Σ₂ - 2 (Σ₂^½ Σ₁ Σ₂^½)^½]`.
pub fn w2_exact<T: Real>(a: &Gaussian<T>, b: &Gaussian<T>) -> Result<T> {
    check_dim(a.dim(), b.dim())?;
    let root_b = spd_sqrt(&b.cov)?;
    let inner = root_b
        .matrix()
        .matmul(a.cov.matrix())?
        .matmul(root_b.matrix())?
        .symmetrized();
    let cross = spd_sqrt(&SpdMatrix::new(inner)?)?.trace();
    let bures = (a.cov.trace() + b.cov.trace() - T::lit(2.0) * cross).max(T::zero());
    Ok(sq_dist(&a.mean, &b.mean) + bures)
}

/// `‖μ₁ - μ₂‖² + ‖S₁ - S₂‖_F²`, an upper bound on [`w2_exact`] that never
/// touches an eigensolver.
pub fn w2_bound<T: Real>(a: &SqrtGaussian<T>, b: &SqrtGaussian<T>) -> Result<T> {
    check_dim(a.mean.len(), b.mean.len())?;
    Ok(sq_dist(&a.mean, &b.mean) + a.sqrt_cov.sub(&b.sqrt_cov)?.frobenius_sq())
}

/// `Tr[(A^½ B A^½)^½] - Tr(A^½ B^½)`, nonnegative for PD `A`, `B`.
pub fn trace_root_gap<T: Real>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<T> {
    check_dim(a.dim(), b.dim())?;
    let ra = spd_sqrt(a)?;
    let rb = spd_sqrt(b)?;
    let inner = ra.matrix().matmul(b.matrix())?.matmul(ra.matrix())?.symmetrized();
    let lhs = spd_sqrt(&SpdMatrix::new(inner)?)?.trace();
    let rhs = ra.matrix().matmul(rb.matrix())?.trace();
    Ok(lhs - rhs)
}

/// Pushes `N(μ, Σ)` through `y ↦ R y`: `N(Rμ, RΣRᵀ)`.
pub fn transform_gaussian<T: Real>(g: &Gaussian<T>, r: &Matrix<T>) -> Result<Gaussian<T>> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch {
            expected: r.rows(),
            actual: r.cols(),
        });
    }
    check_dim(g.dim(), r.cols())?;
    let mean = r.mat_vec(&g.mean)?;
    let cov = r.matmul(g.cov.matrix())?.matmul(&r.transpose())?.symmetrized();
    Gaussian::new(mean, SpdMatrix::new(cov)?)
}
