//! `hetreg pseudolabel`: neighbourhood covariance labels for a CSV dataset.

use std::path::{Path, PathBuf};

use hetreg_core::datasets::{feature_split, load_csv, RegressionDataset};
use hetreg_core::linalg::Matrix;
use hetreg_core::pseudolabel::{default_k, export_labels, pseudo_labels, pseudo_labels_reference, PseudoLabelSet};

use crate::error::{CliError, CliResult};

/// Which columns of the table are targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetColumns {
    /// The last `n` columns.
    Last(usize),
    /// A seeded random split with this fraction of columns as inputs.
    Split { input_fraction: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct LabelArgs {
    pub input: PathBuf,
    pub has_header: bool,
    pub targets: TargetColumns,
    /// Neighbourhood size; `None` uses ten per target dimension.
    pub k: Option<usize>,
    pub out: PathBuf,
    /// Recompute with the brute-force reference and require equality.
    pub check: bool,
}

#[derive(Clone, Debug)]
pub struct LabelSummary {
    pub rows: usize,
    pub target_dim: usize,
    pub k: usize,
    pub mean_trace: f64,
    pub repaired: usize,
    /// `Some(mismatching rows)` when the reference check ran.
    pub reference_mismatches: Option<usize>,
}

impl LabelSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} rows, target dim {}, k = {}\nmean trace {:.6e}\nPSD repairs {}\n",
            self.rows, self.target_dim, self.k, self.mean_trace, self.repaired
        );
        if let Some(m) = self.reference_mismatches {
            s.push_str(&format!("reference check: {m} mismatching rows\n"));
        }
        s
    }
}

pub fn split_table(table: &Matrix, targets: TargetColumns) -> CliResult<RegressionDataset> {
    match targets {
        TargetColumns::Last(n) => {
            let cols = table.cols();
            if n == 0 || n >= cols {
                return Err(CliError::Usage(format!(
                    "--targets must be between 1 and {} for a {cols}-column table",
                    cols.saturating_sub(1)
                )));
            }
            let take = |range: std::ops::Range<usize>| {
                let data = (0..table.rows()).flat_map(|r| table.row(r)[range.clone()].to_vec()).collect();
                Matrix::new(table.rows(), range.len(), data)
            };
            Ok(RegressionDataset::new(take(0..cols - n)?, take(cols - n..cols)?)?)
        }
        TargetColumns::Split { input_fraction, seed } => Ok(feature_split(table, input_fraction, seed)?),
    }
}

fn mismatches(a: &PseudoLabelSet, b: &PseudoLabelSet) -> usize {
    let rows = a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count();
    rows + a.labels.len().abs_diff(b.labels.len())
}

pub fn cmd_pseudolabel(args: &LabelArgs) -> CliResult<LabelSummary> {
    let table = load_csv::<f64>(&args.input, args.has_header)?;
    let ds = split_table(&table, args.targets)?;
    label_dataset(&ds, args.k, &args.out, args.check)
}

pub fn label_dataset(ds: &RegressionDataset, k: Option<usize>, out: &Path, check: bool) -> CliResult<LabelSummary> {
    let k = k.unwrap_or_else(|| default_k(ds.target_dim()));
    let labels = pseudo_labels(ds, k)?;
    export_labels(&labels, out)?;
    let reference_mismatches = if check {
        Some(mismatches(&labels, &pseudo_labels_reference(ds, k)?))
    } else {
        None
    };
    Ok(LabelSummary {
        rows: ds.len(),
        target_dim: ds.target_dim(),
        k,
        mean_trace: labels.mean_trace(),
        repaired: labels.repaired,
        reference_mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetreg_core::datasets::{gen_sinusoid, save_csv};
    use hetreg_core::pseudolabel::load_labels;

    fn table_file(dir: &Path) -> PathBuf {
        let ds = gen_sinusoid(1, 60, 4).unwrap();
        let mut data = Vec::new();
        for r in 0..ds.len() {
            data.extend_from_slice(ds.inputs.row(r));
            data.push(ds.targets[(r, 0)] * 0.5);
            data.extend_from_slice(ds.targets.row(r));
        }
        let p = dir.join("table.csv");
        save_csv(&Matrix::new(ds.len(), 3, data).unwrap(), None, &p).unwrap();
        p
    }

    #[test]
    fn default_k_and_reference_check() {
        let dir = tempfile::tempdir().unwrap();
        let args = LabelArgs {
            input: table_file(dir.path()),
            has_header: false,
            targets: TargetColumns::Last(2),
            k: None,
            out: dir.path().join("labels.csv"),
            check: true,
        };
        let s = cmd_pseudolabel(&args).unwrap();
        assert_eq!((s.rows, s.target_dim, s.k), (60, 2, 20));
        assert_eq!(s.reference_mismatches, Some(0));
        assert_eq!(load_labels::<f64>(&args.out).unwrap().len(), 60);
    }

    #[test]
    fn single_neighbour_gives_zero_covariances() {
        let dir = tempfile::tempdir().unwrap();
        let args = LabelArgs {
            input: table_file(dir.path()),
            has_header: false,
            targets: TargetColumns::Last(1),
            k: Some(1),
            out: dir.path().join("labels.csv"),
            check: false,
        };
        let s = cmd_pseudolabel(&args).unwrap();
        assert_eq!(s.mean_trace, 0.0);
        // row_index, mu_0, cov_00, sqrt_00
        let table = load_csv::<f64>(&args.out, true).unwrap();
        assert!((0..table.rows()).all(|r| table[(r, 2)] == 0.0 && table[(r, 3)] == 0.0));
    }

    #[test]
    fn bad_target_count_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let args = LabelArgs {
            input: table_file(dir.path()),
            has_header: false,
            targets: TargetColumns::Last(3),
            k: None,
            out: dir.path().join("labels.csv"),
            check: false,
        };
        assert!(matches!(cmd_pseudolabel(&args), Err(CliError::Usage(_))));
    }
}
