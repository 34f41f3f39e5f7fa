//! Covariance pseudo-labels from Mahalanobis neighbourhoods.
//!
//! For every training row the `k` nearest inputs (the row itself first) are
//! weighted by `softmax(-d_M)` and the weighted covariance of their targets
//! becomes that row's covariance label. The label square root is computed here,
//! once, so training never needs an eigendecomposition.

use std::cmp::Ordering;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::datasets::RegressionDataset;
use crate::error::{Error, Result};
use crate::linalg::{
    mahalanobis_sq_unchecked, ridge_floor, spd_inverse, spd_sqrt, weighted_covariance,
    weighted_moments, Matrix, SpdMatrix,
};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel<T = f64> {
    pub mean: Vec<T>,
    pub cov: SpdMatrix<T>,
    pub sqrt_cov: SpdMatrix<T>,
    /// Neighbour rows, the labelled row first, then by increasing distance.
    pub neighbors: Vec<usize>,
    pub weights: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet<T = f64> {
    pub k: usize,
    pub labels: Vec<PseudoLabel<T>>,
    /// Rows whose covariance needed a spectral repair.
    pub repaired: usize,
}

impl<T: Real> PseudoLabelSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_trace(&self) -> T {
        if self.labels.is_empty() {
            return T::zero();
        }
        let total: T = self.labels.iter().map(|l| l.cov.trace()).sum();
        total / T::from_usize(self.labels.len()).unwrap()
    }

    /// Element-wise average of all covariance labels.
    pub fn average_cov(&self) -> Matrix<T> {
        let n = self.labels.first().map_or(0, |l| l.cov.dim());
        let mut acc = Matrix::zeros(n, n);
        for l in &self.labels {
            acc = acc.add(l.cov.matrix()).expect("uniform label dims");
        }
        acc.scale(T::one() / T::from_usize(self.labels.len().max(1)).unwrap())
    }
}

/// Default neighbourhood size: ten times the target dimensionality.
pub fn default_k(target_dim: usize) -> usize {
    10 * target_dim
}

/// Population covariance of the inputs plus the default ridge floor.
pub fn input_covariance<T: Real>(ds: &RegressionDataset<T>) -> Result<SpdMatrix<T>> {
    let cov = raw_input_covariance(ds)?;
    let ridge = ridge_floor(cov.matrix());
    Ok(cov.with_ridge(ridge))
}

/// Population covariance of the inputs without regularization.
pub fn raw_input_covariance<T: Real>(ds: &RegressionDataset<T>) -> Result<SpdMatrix<T>> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let w = vec![T::one() / T::from_usize(n).unwrap(); n];
    Ok(weighted_covariance(&ds.inputs, &w)?.1)
}

/// The `k` rows nearest to `query_row` under the Mahalanobis metric given by
/// `precision`. The query comes first; remaining ties break by row index.
pub fn knn_mahalanobis<T: Real>(
    ds: &RegressionDataset<T>,
    query_row: usize,
    k: usize,
    precision: &SpdMatrix<T>,
) -> Result<(Vec<usize>, Vec<T>)> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if precision.dim() != ds.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.input_dim(),
            actual: precision.dim(),
        });
    }
    let mut scratch = Vec::with_capacity(n);
    Ok(knn_into(ds, query_row, k, precision.matrix(), &mut scratch))
}

// One pass over the rows keeping the best `k - 1` in a sorted buffer of
// (squared distance, distance, index). Rows are scanned in index order, so a
// candidate whose squared distance exceeds the current worst can never win:
// its root is at least as large and its index is larger.
fn knn_into<T: Real>(
    ds: &RegressionDataset<T>,
    query: usize,
    k: usize,
    precision: &Matrix<T>,
    scratch: &mut Vec<(T, T, usize)>,
) -> (Vec<usize>, Vec<T>) {
    scratch.clear();
    let others = k - 1;
    let q = ds.inputs.row(query);
    if others > 0 {
        for j in (0..ds.len()).filter(|&j| j != query) {
            let d2 = mahalanobis_sq_unchecked(ds.inputs.row(j), q, precision);
            if scratch.len() == others && d2 > scratch[others - 1].0 {
                continue;
            }
            let d = d2.max(T::zero()).sqrt();
            let pos = scratch.partition_point(|e| e.1 <= d);
            if pos < others {
                scratch.insert(pos, (d2, d, j));
                scratch.truncate(others);
            }
        }
    }

    let mut idx = Vec::with_capacity(k);
    let mut dist = Vec::with_capacity(k);
    idx.push(query);
    dist.push(T::zero());
    for &(_, d, j) in scratch.iter() {
        idx.push(j);
        dist.push(d);
    }
    (idx, dist)
}

/// `softmax(-d)`; closest neighbours carry the most weight.
pub fn neighbor_weights<T: Real>(dist: &[T]) -> Vec<T> {
    let shift = dist.iter().copied().fold(T::infinity(), T::min);
    let mut w: Vec<T> = dist.iter().map(|&d| (shift - d).exp()).collect();
    let total: T = w.iter().copied().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn label_from_neighbors<T: Real>(
    ds: &RegressionDataset<T>,
    idx: Vec<usize>,
    dist: &[T],
) -> Result<(PseudoLabel<T>, bool)> {
    let weights = neighbor_weights(dist);
    let rows: Vec<&[T]> = idx.iter().map(|&j| ds.targets.row(j)).collect();
    let (mean, cov) = weighted_moments(&rows, &weights, ds.target_dim());
    let (cov, repaired) = SpdMatrix::new_repaired(cov)?;
    let sqrt_cov = spd_sqrt(&cov)?;
    Ok((
        PseudoLabel {
            mean,
            cov,
            sqrt_cov,
            neighbors: idx,
            weights,
        },
        repaired,
    ))
}

/// Covariance pseudo-label for every row of `ds`, rows processed in parallel.
pub fn pseudo_labels<T: Real>(ds: &RegressionDataset<T>, k: usize) -> Result<PseudoLabelSet<T>> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let precision = spd_inverse(&input_covariance(ds)?)?;
    pseudo_labels_with_precision(ds, k, &precision)
}

/// As [`pseudo_labels`] with a caller-supplied input precision matrix.
pub fn pseudo_labels_with_precision<T: Real>(
    ds: &RegressionDataset<T>,
    k: usize,
    precision: &SpdMatrix<T>,
) -> Result<PseudoLabelSet<T>> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let p = precision.matrix();
    let results: Vec<Result<(PseudoLabel<T>, bool)>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |scratch, row| {
            let (idx, dist) = knn_into(ds, row, k, p, scratch);
            label_from_neighbors(ds, idx, &dist)
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut repaired = 0;
    for r in results {
        let (label, fixed) = r?;
        repaired += usize::from(fixed);
        labels.push(label);
    }
    Ok(PseudoLabelSet { k, labels, repaired })
}

/// Straightforward O(N²)-per-row reference: full sort of every distance and
/// explicit accumulation loops. Used to cross-check [`pseudo_labels`].
pub fn pseudo_labels_reference<T: Real>(ds: &RegressionDataset<T>, k: usize) -> Result<PseudoLabelSet<T>> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let precision = spd_inverse(&input_covariance(ds)?)?;
    let dim = ds.target_dim();
    let mut labels = Vec::with_capacity(n);
    let mut repaired = 0;
    for q in 0..n {
        let mut all: Vec<(bool, T, usize)> = (0..n)
            .map(|j| {
                let d = crate::linalg::mahalanobis(ds.inputs.row(j), ds.inputs.row(q), &precision)
                    .expect("dims checked");
                (j != q, d, j)
            })
            .collect();
        all.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
        });
        all.truncate(k);

        let dmin = all.iter().map(|t| t.1).fold(T::infinity(), T::min);
        let mut weights = Vec::with_capacity(k);
        let mut total = T::zero();
        for t in &all {
            let e = (dmin - t.1).exp();
            weights.push(e);
            total += e;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }

        let mut mean = vec![T::zero(); dim];
        for (t, &w) in all.iter().zip(&weights) {
            for c in 0..dim {
                mean[c] += w * ds.targets[(t.2, c)];
            }
        }
        let mut cov = Matrix::zeros(dim, dim);
        for (t, &w) in all.iter().zip(&weights) {
            let centred: Vec<T> = (0..dim).map(|c| ds.targets[(t.2, c)] - mean[c]).collect();
            for i in 0..dim {
                for j in i..dim {
                    cov[(i, j)] += w * centred[i] * centred[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let (cov, fixed) = SpdMatrix::new_repaired(cov)?;
        repaired += usize::from(fixed);
        let sqrt_cov = spd_sqrt(&cov)?;
        labels.push(PseudoLabel {
            mean,
            cov,
            sqrt_cov,
            neighbors: all.iter().map(|t| t.2).collect(),
            weights,
        });
    }
    Ok(PseudoLabelSet { k, labels, repaired })
}

fn pair_name(prefix: &str, i: usize, j: usize, n: usize) -> String {
    if n <= 10 {
        format!("{prefix}_{i}{j}")
    } else {
        format!("{prefix}_{i}_{j}")
    }
}

/// Column names of the label CSV for target dimension `n`.
pub fn label_csv_header(n: usize) -> Vec<String> {
    let mut cols = vec!["row_index".to_string()];
    cols.extend((0..n).map(|i| format!("mu_{i}")));
    for prefix in ["cov", "sqrt"] {
        for i in 0..n {
            for j in i..n {
                cols.push(pair_name(prefix, i, j, n));
            }
        }
    }
    cols
}

/// Writes one row per label: index, mean, upper triangle of the covariance
/// and of its square root, all at round-trip precision.
pub fn export_labels<T: Real>(pl: &PseudoLabelSet<T>, path: &Path) -> Result<()> {
    let n = pl.labels.first().map_or(0, |l| l.mean.len());
    let mut out = String::new();
    out.push_str(&label_csv_header(n).join(","));
    out.push('\n');
    for (row, label) in pl.labels.iter().enumerate() {
        let mut fields = vec![row.to_string()];
        fields.extend(label.mean.iter().map(|v| v.to_full_string()));
        for m in [&label.cov, &label.sqrt_cov] {
            for i in 0..n {
                for j in i..n {
                    fields.push(m[(i, j)].to_full_string());
                }
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A label row as read back from CSV; neighbourhoods are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredLabel<T = f64> {
    pub row_index: usize,
    pub mean: Vec<T>,
    pub cov: SpdMatrix<T>,
    pub sqrt_cov: SpdMatrix<T>,
}

pub fn load_labels<T: Real>(path: &Path) -> Result<Vec<StoredLabel<T>>> {
    let table = crate::datasets::load_csv::<T>(path, true)?;
    let cols = table.cols();
    // 1 + n + n(n+1) columns
    let n = (1..=64)
        .find(|&n| 1 + n + n * (n + 1) == cols)
        .ok_or(Error::DimensionMismatch {
            expected: 0,
            actual: cols,
        })?;
    let unpack = |row: &[T], offset: usize| -> Result<SpdMatrix<T>> {
        let mut m = Matrix::zeros(n, n);
        let mut c = offset;
        for i in 0..n {
            for j in i..n {
                m[(i, j)] = row[c];
                m[(j, i)] = row[c];
                c += 1;
            }
        }
        SpdMatrix::new(m)
    };
    let tri = n * (n + 1) / 2;
    (0..table.rows())
        .map(|r| {
            let row = table.row(r);
            Ok(StoredLabel {
                row_index: row[0].to_usize().unwrap_or(usize::MAX),
                mean: row[1..1 + n].to_vec(),
                cov: unpack(row, 1 + n)?,
                sqrt_cov: unpack(row, 1 + n + tri)?,
            })
        })
        .collect()
}
