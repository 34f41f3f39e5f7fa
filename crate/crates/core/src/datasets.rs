//! Regression datasets: synthetic generators, standardization, splits and CSV I/O.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{transform_gaussian, Gaussian};
use crate::linalg::{cholesky, spd_inverse, Matrix, SpdMatrix};
use crate::scalar::Real;

/// Inputs `N×m`, targets `N×n`, optionally the true conditional law of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDataset<T = f64> {
    pub inputs: Matrix<T>,
    pub targets: Matrix<T>,
    pub ground_truth: Option<Vec<Gaussian<T>>>,
}

impl<T: Real> RegressionDataset<T> {
    pub fn new(inputs: Matrix<T>, targets: Matrix<T>) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                actual: targets.rows(),
            });
        }
        if inputs.rows() == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        for m in [&inputs, &targets] {
            if let Some(pos) = m.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEntry {
                    row: pos / m.cols(),
                    col: pos % m.cols(),
                });
            }
        }
        Ok(Self {
            inputs,
            targets,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, gt: Vec<Gaussian<T>>) -> Result<Self> {
        if gt.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: gt.len(),
            });
        }
        if let Some(g) = gt.iter().find(|g| g.dim() != self.target_dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.target_dim(),
                actual: g.dim(),
            });
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> RegressionDataset<T> {
        let pick = |m: &Matrix<T>| {
            let mut data = Vec::with_capacity(idx.len() * m.cols());
            for &i in idx {
                data.extend_from_slice(m.row(i));
            }
            Matrix::from_vec_unchecked(idx.len(), m.cols(), data)
        };
        RegressionDataset {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            ground_truth: self
                .ground_truth
                .as_ref()
                .map(|gt| idx.iter().map(|&i| gt[i].clone()).collect()),
        }
    }
}

/// Shuffles rows with `seed` and splits off the last `test_fraction` as test set.
pub fn train_test_split<T: Real>(
    ds: &RegressionDataset<T>,
    test_fraction: f64,
    seed: u64,
) -> (RegressionDataset<T>, RegressionDataset<T>) {
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let (train, test) = order.split_at(n - n_test);
    (ds.subset(train), ds.subset(test))
}

// ---------------------------------------------------------------------------
// Generators

/// Bivariate fitting problem: learn `target` starting from `init`.
#[derive(Clone, Debug)]
pub struct BivariateProblem {
    pub target: Gaussian,
    pub init: Gaussian,
}

impl BivariateProblem {
    pub fn correlation(&self) -> f64 {
        let c = self.target.cov.matrix();
        c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt()
    }

    /// `n` draws from the target, one per row.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Matrix {
        sample_gaussian(&self.target, n, rng)
    }
}

pub fn sample_gaussian(g: &Gaussian, n: usize, rng: &mut impl Rng) -> Matrix {
    let d = g.dim();
    let l = cholesky(&g.cov).expect("target covariance is PD");
    let mut data = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..d {
            let mut acc = g.mean[i];
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            data.push(acc);
        }
    }
    Matrix::from_vec_unchecked(n, d, data)
}

pub fn gen_bivariate_p1(seed: u64) -> BivariateProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_mean: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..=3.0)).collect();
    let m = Matrix::new(2, 2, (0..4).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let mut c: Matrix = m
        .transpose()
        .matmul(&m)
        .unwrap()
        .add(&Matrix::identity(2).scale(1e-3))
        .unwrap();
    let scale = (c[(0, 0)] * c[(1, 1)]).sqrt();
    let rho = c[(0, 1)] / scale;
    if rho.abs() <= 0.5 {
        // push the correlation into (0.5, 0.95) keeping its sign
        let sign = if rho < 0.0 { -1.0 } else { 1.0 };
        let r = sign * rng.random_range(0.55..0.95);
        c[(0, 1)] = r * scale;
        c[(1, 0)] = r * scale;
    }
    let init_mean: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..=3.0)).collect();
    BivariateProblem {
        target: Gaussian::new(target_mean, SpdMatrix::new(c).unwrap()).unwrap(),
        init: Gaussian::new(init_mean, SpdMatrix::identity(2)).unwrap(),
    }
}

pub const SINUSOID_SAMPLES: usize = 50_000;

/// Noise-free mean of sinusoid `variant` at `x`.
pub fn sinusoid_mean(variant: u32, x: f64) -> Result<f64> {
    let s = (2.0 * std::f64::consts::PI * x).sin();
    match variant {
        1 => Ok(x.abs() * s),
        2 => Ok((5.0 - x.abs()) * s),
        3 => Ok(5.0 * s),
        v => Err(Error::UnknownVariant(v)),
    }
}

/// `x ~ U[-5, 5]`, `y = mean(x) + |x|·ε`.
pub fn gen_sinusoid(variant: u32, n: usize, seed: u64) -> Result<RegressionDataset> {
    sinusoid_mean(variant, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-5.0..=5.0);
        let eps: f64 = rng.sample(StandardNormal);
        let mu = sinusoid_mean(variant, x)?;
        xs.push(x);
        ys.push(mu + x.abs() * eps);
        gt.push(Gaussian {
            mean: vec![mu],
            cov: SpdMatrix::from_trusted(Matrix::from_vec_unchecked(1, 1, vec![x * x])),
        });
    }
    RegressionDataset::new(Matrix::new(n, 1, xs)?, Matrix::new(n, 1, ys)?)?.with_ground_truth(gt)
}

/// Linear interpolation from 4000 rows at dimension 4 to 20000 at 32.
pub fn multivariate_samples(dim: usize) -> usize {
    (4000.0 + (dim as f64 - 4.0) * 16000.0 / 28.0).round().max(0.0) as usize
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Heteroscedastic multivariate regression with `dim` inputs and `dim` targets.
///
/// `(X, Y)` is jointly Gaussian; targets follow the conditional `Y | X` plus an
/// independent noise term with covariance `diag(softplus(W x))`.
pub fn gen_multivariate(dim: usize, n: usize, seed: u64) -> Result<RegressionDataset> {
    if dim < 2 {
        return Err(Error::InvalidSpec(format!("multivariate dim must be ≥ 2, got {dim}")));
    }
    if n < 2 * dim {
        return Err(Error::TooFewSamples { needed: 2 * dim, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2 = 2 * dim;
    let m = Matrix::new(d2, d2, (0..d2 * d2).map(|_| rng.sample(StandardNormal)).collect())?;
    let joint = m
        .transpose()
        .matmul(&m)?
        .scale(1.0 / d2 as f64)
        .add(&Matrix::identity(d2).scale(0.1))?;
    let block = |r0: usize, c0: usize| {
        let mut b = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                b[(i, j)] = joint[(r0 + i, c0 + j)];
            }
        }
        b
    };
    let sxx = SpdMatrix::new(block(0, 0))?;
    let syx = block(dim, 0);
    let syy = block(dim, dim);
    // conditional mean gain and Schur complement
    let gain = syx.matmul(spd_inverse(&sxx)?.matrix())?;
    let cond = SpdMatrix::new(syy.sub(&gain.matmul(&syx.transpose())?)?.symmetrized())?;
    let cond_l = cholesky(&cond)?;
    let sxx_l = cholesky(&sxx)?;
    let w = Matrix::new(
        dim,
        dim,
        (0..dim * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
            .collect(),
    )?;

    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n * dim);
    let mut gt = Vec::with_capacity(n);
    let mut z = vec![0.0; dim];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let x: Vec<f64> = (0..dim)
            .map(|i| (0..=i).map(|k| sxx_l[(i, k)] * z[k]).sum())
            .collect();
        let mu = gain.mat_vec(&x)?;
        let noise_var: Vec<f64> = w.mat_vec(&x)?.into_iter().map(softplus).collect();
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let mut y = mu.clone();
        for i in 0..dim {
            for k in 0..=i {
                y[i] += cond_l[(i, k)] * z[k];
            }
        }
        for (yi, v) in y.iter_mut().zip(&noise_var) {
            *yi += v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let cov = cond.matrix().add(&Matrix::from_diag(&noise_var))?;
        gt.push(Gaussian::new(mu, SpdMatrix::new(cov)?)?);
        xs.extend(x);
        ys.extend(y);
    }
    RegressionDataset::new(Matrix::new(n, dim, xs)?, Matrix::new(n, dim, ys)?)?.with_ground_truth(gt)
}

// ---------------------------------------------------------------------------
// Standardization and feature splits

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats<T = f64> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> ColumnStats<T> {
    pub fn of(m: &Matrix<T>) -> Self {
        let n = T::from_usize(m.rows()).unwrap();
        let mut mean = vec![T::zero(); m.cols()];
        for r in 0..m.rows() {
            for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![T::zero(); m.cols()];
        for r in 0..m.rows() {
            for ((acc, &v), &mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > T::zero() {
                    s
                } else {
                    T::one()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, m: &Matrix<T>) -> Matrix<T> {
        let mut out = m.clone();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out[(r, c)] = (m[(r, c)] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn invert(&self, m: &Matrix<T>) -> Matrix<T> {
        let mut out = m.clone();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out[(r, c)] = m[(r, c)] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardization<T = f64> {
    pub inputs: ColumnStats<T>,
    pub targets: ColumnStats<T>,
}

impl<T: Real> Standardization<T> {
    pub fn unstandardize(&self, ds: &RegressionDataset<T>) -> RegressionDataset<T> {
        RegressionDataset {
            inputs: self.inputs.invert(&ds.inputs),
            targets: self.targets.invert(&ds.targets),
            ground_truth: None,
        }
    }
}

/// Zero mean, unit (population) variance per column of inputs and targets.
/// Constant columns are centred and keep a recorded std of 1.
pub fn standardize<T: Real>(ds: &RegressionDataset<T>) -> (RegressionDataset<T>, Standardization<T>) {
    let stats = Standardization {
        inputs: ColumnStats::of(&ds.inputs),
        targets: ColumnStats::of(&ds.targets),
    };
    let ground_truth = ds.ground_truth.as_ref().map(|gt| {
        let inv: Vec<T> = stats.targets.std.iter().map(|&s| T::one() / s).collect();
        let r = Matrix::from_diag(&inv);
        gt.iter()
            .map(|g| {
                let mut t = transform_gaussian(g, &r).expect("diagonal rescale of a valid Gaussian");
                for ((m, &mu), &s) in t.mean.iter_mut().zip(&stats.targets.mean).zip(&stats.targets.std) {
                    *m -= mu / s;
                }
                t
            })
            .collect()
    });
    let out = RegressionDataset {
        inputs: stats.inputs.apply(&ds.inputs),
        targets: stats.targets.apply(&ds.targets),
        ground_truth,
    };
    (out, stats)
}

/// Randomly assigns `round(fraction · cols)` columns (at least one, at most
/// `cols - 1`) as inputs and the rest as targets.
pub fn feature_split<T: Real>(table: &Matrix<T>, fraction: f64, seed: u64) -> Result<RegressionDataset<T>> {
    let cols = table.cols();
    if cols < 2 {
        return Err(Error::TooFewColumns(cols));
    }
    let n_in = ((fraction * cols as f64).round() as usize).clamp(1, cols - 1);
    let mut order: Vec<usize> = (0..cols).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut input_cols = order[..n_in].to_vec();
    let mut target_cols = order[n_in..].to_vec();
    input_cols.sort_unstable();
    target_cols.sort_unstable();
    let take = |cs: &[usize]| {
        let mut data = Vec::with_capacity(table.rows() * cs.len());
        for r in 0..table.rows() {
            data.extend(cs.iter().map(|&c| table[(r, c)]));
        }
        Matrix::from_vec_unchecked(table.rows(), cs.len(), data)
    };
    RegressionDataset::new(take(&input_cols), take(&target_cols))
}

// ---------------------------------------------------------------------------
// CSV

/// Reads a rectangular numeric CSV. Parse errors carry the 1-based file line
/// and column of the offending cell.
pub fn load_csv<T: Real>(path: &Path, has_header: bool) -> Result<Matrix<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |row: usize, col: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        message,
    };
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 0, e.to_string())
        })?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(parse_err(line, rec.len().min(c) + 1, format!("expected {c} fields, found {}", rec.len())));
            }
            _ => {}
        }
        for (c, field) in rec.iter().enumerate() {
            let v: T = field
                .parse()
                .map_err(|_| parse_err(line, c + 1, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, c + 1, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

/// Writes `m` with an optional header at round-trip precision.
pub fn save_csv<T: Real>(m: &Matrix<T>, header: Option<&[String]>, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for r in 0..m.rows() {
        let fields: Vec<String> = m.row(r).iter().map(|v| v.to_full_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    // pin the default scalar so float literals infer
    type Matrix = crate::linalg::Matrix<f64>;

    #[test]
    fn dataset_validation() {
        let ok = RegressionDataset::new(Matrix::zeros(3, 2), Matrix::zeros(3, 1));
        assert!(ok.is_ok());
        assert!(matches!(
            RegressionDataset::new(Matrix::zeros(3, 2), Matrix::zeros(2, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            RegressionDataset::new(Matrix::zeros(0, 2), Matrix::zeros(0, 1)),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn bivariate_problem_shape() {
        for seed in 0..200 {
            let p = gen_bivariate_p1(seed);
            assert!(p.correlation().abs() > 0.5, "seed {seed}");
            assert_eq!(p.init.cov.matrix(), &Matrix::identity(2));
            assert!(p.target.mean.iter().all(|m| m.abs() <= 3.0));
        }
    }

    #[test]
    fn bivariate_sampling_covariance() {
        let p = gen_bivariate_p1(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = p.sample(100_000, &mut rng);
        let w = vec![1.0 / 100_000.0; 100_000];
        let (mean, cov) = crate::linalg::weighted_covariance(&s, &w).unwrap();
        assert!(cov.matrix().rel_frobenius_distance(p.target.cov.matrix()) < 0.03);
        for i in 0..2 {
            assert!((mean[i] - p.target.mean[i]).abs() < 0.05);
        }
    }

    #[test]
    fn sinusoid_means() {
        assert_eq!(sinusoid_mean(1, 0.0).unwrap(), 0.0);
        assert!((sinusoid_mean(3, 0.25).unwrap() - 5.0).abs() < 1e-12);
        assert!((sinusoid_mean(2, 0.25).unwrap() - 4.75).abs() < 1e-12);
        assert!(matches!(gen_sinusoid(4, 10, 0), Err(Error::UnknownVariant(4))));
    }

    #[test]
    fn sinusoid_noise_level() {
        let ds = gen_sinusoid(1, SINUSOID_SAMPLES, 3).unwrap();
        assert_eq!(ds.len(), 50_000);
        let mut res = Vec::new();
        for r in 0..ds.len() {
            let x = ds.inputs[(r, 0)];
            assert!((-5.0..=5.0).contains(&x));
            if (2.0..2.1).contains(&x.abs()) {
                res.push(ds.targets[(r, 0)] - sinusoid_mean(1, x).unwrap());
            }
        }
        let n = res.len() as f64;
        let std = (res.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
        assert!((std / 2.05 - 1.0).abs() < 0.05, "std {std} from {n} samples");
    }

    #[test]
    fn multivariate_counts_and_truth() {
        assert_eq!(multivariate_samples(4), 4000);
        assert_eq!(multivariate_samples(32), 20000);
        assert_eq!(multivariate_samples(8), 6286);
        let ds = gen_multivariate(4, 4000, 9).unwrap();
        assert_eq!(ds.len(), 4000);
        assert_eq!((ds.input_dim(), ds.target_dim()), (4, 4));
        let gt = ds.ground_truth.as_ref().unwrap();
        let mut max_gap: f64 = 0.0;
        for g in gt {
            let eig = crate::linalg::sym_eig(&g.cov).unwrap();
            assert!(eig.eigenvalues[0] > 0.0);
            max_gap = max_gap.max(g.cov.matrix().sub(gt[0].cov.matrix()).unwrap().frobenius_norm());
        }
        assert!(max_gap > 0.0);
    }

    #[test]
    fn multivariate_residual_covariance_matches_truth() {
        // whitened residuals (y - μ) L⁻¹ are standard normal when the truth is right
        let ds = gen_multivariate(4, 20_000, 5).unwrap();
        let gt = ds.ground_truth.as_ref().unwrap();
        let mut acc = Matrix::zeros(4, 4);
        for (r, g) in gt.iter().enumerate() {
            let l = cholesky(&g.cov).unwrap();
            let res: Vec<f64> = ds.targets.row(r).iter().zip(&g.mean).map(|(y, m)| y - m).collect();
            let z = crate::linalg::solve_lower(&l, &res);
            for i in 0..4 {
                for j in 0..4 {
                    acc[(i, j)] += z[i] * z[j] / 20_000.0;
                }
            }
        }
        assert!(acc.rel_frobenius_distance(&Matrix::identity(4)) < 0.05);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_multivariate(4, 100, 1).unwrap(), gen_multivariate(4, 100, 1).unwrap());
        assert_eq!(gen_sinusoid(2, 100, 1).unwrap(), gen_sinusoid(2, 100, 1).unwrap());
        assert_ne!(gen_sinusoid(2, 100, 1).unwrap(), gen_sinusoid(2, 100, 2).unwrap());
    }

    #[test]
    fn standardize_moments_and_round_trip() {
        let ds = gen_multivariate(4, 500, 2).unwrap();
        let (s, stats) = standardize(&ds);
        for m in [&s.inputs, &s.targets] {
            let cs = ColumnStats::of(m);
            assert!(cs.mean.iter().all(|v| v.abs() < 1e-10));
            assert!(cs.std.iter().all(|v| (v - 1.0).abs() < 1e-10));
        }
        let back = stats.unstandardize(&s);
        assert!(back.inputs.sub(&ds.inputs).unwrap().frobenius_norm() < 1e-10);
        assert!(back.targets.sub(&ds.targets).unwrap().frobenius_norm() < 1e-10);
        let (twice, _) = standardize(&s);
        assert!(twice.targets.sub(&s.targets).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn standardize_constant_column() {
        let ds = RegressionDataset::new(
            Matrix::from_rows(&[&[2.0, 1.0], &[2.0, 3.0]]),
            Matrix::from_rows(&[&[0.0], &[1.0]]),
        )
        .unwrap();
        let (s, stats) = standardize(&ds);
        assert_eq!(stats.inputs.std[0], 1.0);
        assert_eq!(s.inputs[(0, 0)], 0.0);
        assert_eq!(s.inputs[(0, 1)], -1.0);
    }

    #[test]
    fn standardize_moves_ground_truth() {
        let ds = gen_sinusoid(3, 200, 4).unwrap();
        let (s, stats) = standardize(&ds);
        let g = &s.ground_truth.as_ref().unwrap()[7];
        let orig = &ds.ground_truth.as_ref().unwrap()[7];
        let sd = stats.targets.std[0];
        assert!((g.cov[(0, 0)] - orig.cov[(0, 0)] / (sd * sd)).abs() < 1e-12);
        assert!((g.mean[0] - (orig.mean[0] - stats.targets.mean[0]) / sd).abs() < 1e-12);
    }

    #[test]
    fn feature_split_counts() {
        let t4 = Matrix::zeros(5, 4);
        let ds = feature_split(&t4, 0.25, 0).unwrap();
        assert_eq!((ds.input_dim(), ds.target_dim()), (1, 3));
        let t8 = Matrix::new(3, 8, (0..24).map(f64::from).collect()).unwrap();
        let a = feature_split(&t8, 0.25, 7).unwrap();
        assert_eq!((a.input_dim(), a.target_dim()), (2, 6));
        assert_eq!(a, feature_split(&t8, 0.25, 7).unwrap());
        assert!(matches!(feature_split(&Matrix::zeros(3, 1), 0.25, 0), Err(Error::TooFewColumns(1))));
    }

    #[test]
    fn split_partitions_rows() {
        let ds = gen_sinusoid(1, 100, 0).unwrap();
        let (tr, te) = train_test_split(&ds, 0.2, 3);
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut xs: Vec<f64> = tr.inputs.data().iter().chain(te.inputs.data()).copied().collect();
        let mut orig = ds.inputs.data().to_vec();
        xs.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(xs, orig);
    }

    #[test]
    fn csv_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.csv");
        std::fs::write(&p, "3.5\n").unwrap();
        assert_eq!(load_csv::<f64>(&p, false).unwrap(), Matrix::from_rows(&[&[3.5]]));

        std::fs::write(&p, "a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(load_csv::<f64>(&p, true).unwrap(), Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));

        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        match load_csv::<f64>(&p, false) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(load_csv::<f64>(&p, false), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn csv_round_trip_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        let m = Matrix::from_rows(&[&[0.1, 1.0 / 3.0, -2e-300], &[std::f64::consts::PI, 1e300, 0.0]]);
        save_csv(&m, Some(&["a".into(), "b".into(), "c".into()]), &p).unwrap();
        assert_eq!(load_csv::<f64>(&p, true).unwrap(), m);
    }
}
