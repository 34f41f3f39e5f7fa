use proptest::prelude::*;

use hetreg_core::datasets::{load_csv, save_csv, standardize, RegressionDataset};
use hetreg_core::gaussian::{
    calibrated_kl_covariance_optimum, kl_covariance_optimum, kl_divergence, trace_root_gap, w2_bound, w2_exact,
    Gaussian,
};
use hetreg_core::linalg::{cholesky, mahalanobis, spd_sqrt, symmetric_eigenvalues, Matrix, SpdMatrix};
use hetreg_core::mlp::CovHeadKind;
use hetreg_core::pseudolabel::{pseudo_labels, pseudo_labels_reference};
use hetreg_core::{Gaussian32, Matrix32, Spd32};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

/// `MᵀM + 10⁻³I`.
fn spd(d: usize) -> impl Strategy<Value = SpdMatrix> {
    matrix(d, d).prop_map(move |m| {
        let a = m.transpose().matmul(&m).unwrap();
        SpdMatrix::new(a.add(&Matrix::identity(d).scale(1e-3)).unwrap()).unwrap()
    })
}

fn gaussian(d: usize) -> impl Strategy<Value = Gaussian> {
    (prop::collection::vec(-3.0..3.0f64, d), spd(d)).prop_map(|(m, c)| Gaussian::new(m, c).unwrap())
}

fn gaussian_pair() -> impl Strategy<Value = (Gaussian, Gaussian)> {
    (1usize..7).prop_flat_map(|d| (gaussian(d), gaussian(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sqrt_bound_never_below_exact_distance((p, q) in gaussian_pair()) {
        let exact = w2_exact(&p, &q).unwrap();
        let bound = w2_bound(&p.to_sqrt().unwrap(), &q.to_sqrt().unwrap()).unwrap();
        prop_assert!(exact <= bound + 1e-8 * (1.0 + exact), "exact {exact} bound {bound}");
    }

    #[test]
    fn trace_root_gap_is_nonnegative((p, q) in gaussian_pair()) {
        prop_assert!(trace_root_gap(&p.cov, &q.cov).unwrap() >= -1e-9);
    }

    #[test]
    fn exact_distance_is_symmetric_and_zero_on_diagonal((p, q) in gaussian_pair()) {
        let (pq, qp) = (w2_exact(&p, &q).unwrap(), w2_exact(&q, &p).unwrap());
        prop_assert!((pq - qp).abs() <= 1e-9 * (1.0 + pq));
        prop_assert!(w2_exact(&p, &p).unwrap() <= 1e-9 * (1.0 + p.cov.trace()));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self((p, q) in gaussian_pair()) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-10);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn calibrated_optimum_is_half_the_plain_one((prior, resid) in (1usize..6).prop_flat_map(|d| (spd(d), spd(d)))) {
        let plain = kl_covariance_optimum(&prior, &resid).unwrap();
        let half = calibrated_kl_covariance_optimum(&prior, &resid).unwrap();
        prop_assert!(half.matrix().rel_frobenius_distance(&plain.matrix().scale(0.5)) <= 1e-14);
    }

    #[test]
    fn cholesky_and_sqrt_reconstruct(a in (1usize..9).prop_flat_map(spd)) {
        let l = cholesky(&a).unwrap();
        prop_assert!(l.matmul(&l.transpose()).unwrap().rel_frobenius_distance(a.matrix()) <= 1e-10);
        let s = spd_sqrt(&a).unwrap();
        prop_assert!(s.matrix().matmul(s.matrix()).unwrap().rel_frobenius_distance(a.matrix()) <= 1e-8);
    }

    #[test]
    fn mahalanobis_symmetric_and_triangular(
        (p, pts) in (1usize..6).prop_flat_map(|d| (spd(d), matrix(3, d)))
    ) {
        let (u, v, w) = (pts.row(0), pts.row(1), pts.row(2));
        let uv = mahalanobis(u, v, &p).unwrap();
        prop_assert_eq!(uv, mahalanobis(v, u, &p).unwrap());
        prop_assert!(mahalanobis(u, w, &p).unwrap() <= uv + mahalanobis(v, w, &p).unwrap() + 1e-12);
    }

    #[test]
    fn cholesky_head_factor_is_lower_with_positive_diagonal(
        (n, raw) in (1usize..7).prop_flat_map(|n| (Just(n), prop::collection::vec(-30.0..30.0f64, n * (n + 1) / 2)))
    ) {
        let l = CovHeadKind::CholeskyFull.factor(&raw, n);
        for r in 0..n {
            prop_assert!(l[(r, r)] > 0.0);
            for c in r + 1..n {
                prop_assert_eq!(l[(r, c)], 0.0);
            }
        }
    }

    // raw outputs of moderate size: LLᵀ stays numerically well conditioned
    #[test]
    fn cholesky_head_covariance_positive_definite(
        (n, raw) in (1usize..7).prop_flat_map(|n| (Just(n), prop::collection::vec(-3.0..3.0f64, n * (n + 1) / 2)))
    ) {
        let c = CovHeadKind::CholeskyFull.covariance(&raw, n);
        prop_assert!(symmetric_eigenvalues(&c).unwrap()[0] > 0.0);
    }

    #[test]
    fn standardize_is_idempotent(
        (x, y, shift) in (1usize..4, 1usize..3).prop_flat_map(|(m, n)| (matrix(30, m), matrix(30, n), -100.0..100.0f64))
    ) {
        let ds = RegressionDataset::new(x.map(|v| 7.0 * v + shift), y).unwrap();
        let (once, _) = standardize(&ds);
        let (twice, _) = standardize(&once);
        for (a, b) in once.inputs.data().iter().zip(twice.inputs.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pseudo_labels_follow_row_permutations(
        (x, y, seed) in (1usize..4, 1usize..3).prop_flat_map(|(m, n)| (matrix(40, m), matrix(40, n), any::<u64>()))
    ) {
        let ds = RegressionDataset::new(x, y).unwrap();
        let k = 10 * ds.target_dim();
        let mut perm: Vec<usize> = (0..ds.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let base = pseudo_labels(&ds, k).unwrap();
        let moved = pseudo_labels(&ds.subset(&perm), k).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            let (a, b) = (&moved.labels[i], &base.labels[src]);
            prop_assert!(a.cov.matrix().rel_frobenius_distance(b.cov.matrix()) <= 1e-10);
            let mut na: Vec<usize> = a.neighbors.iter().map(|&j| perm[j]).collect();
            let mut nb = b.neighbors.clone();
            na.sort_unstable();
            nb.sort_unstable();
            prop_assert_eq!(na, nb);
            let sum: f64 = a.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12 && a.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn fast_labels_equal_brute_force(
        (x, y) in (1usize..4, 1usize..3).prop_flat_map(|(m, n)| (matrix(50, m), matrix(50, n)))
    ) {
        let ds = RegressionDataset::new(x, y).unwrap();
        let k = 10 * ds.target_dim();
        prop_assert_eq!(pseudo_labels(&ds, k).unwrap(), pseudo_labels_reference(&ds, k).unwrap());
    }

    #[test]
    fn csv_round_trip_is_bit_exact(m in (1usize..6, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let scaled = m.map(|v| v * 1e-7 + v.powi(3) * 1e9);
        save_csv(&scaled, None, &path).unwrap();
        let back: Matrix = load_csv(&path, false).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        scaled.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn single_precision_metrics_track_double_precision() {
    let a = Matrix::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]);
    let b = Matrix::from_rows(&[&[1.0, -0.2], &[-0.2, 0.5]]);
    let p = Gaussian::new(vec![0.5, -1.0], SpdMatrix::new(a.clone()).unwrap()).unwrap();
    let q = Gaussian::new(vec![0.0, 0.25], SpdMatrix::new(b.clone()).unwrap()).unwrap();
    let to32 = |m: &Matrix| Matrix32::new(2, 2, m.data().iter().map(|&v| v as f32).collect()).unwrap();
    let p32 = Gaussian32::new(vec![0.5, -1.0], Spd32::new(to32(&a)).unwrap()).unwrap();
    let q32 = Gaussian32::new(vec![0.0, 0.25], Spd32::new(to32(&b)).unwrap()).unwrap();
    let exact = w2_exact(&p, &q).unwrap();
    let exact32 = w2_exact(&p32, &q32).unwrap();
    assert!((exact - exact32 as f64).abs() <= 1e-4 * (1.0 + exact), "{exact} vs {exact32}");
    let kl = kl_divergence(&p, &q).unwrap();
    assert!((kl - kl_divergence(&p32, &q32).unwrap() as f64).abs() <= 1e-4 * (1.0 + kl));
}
