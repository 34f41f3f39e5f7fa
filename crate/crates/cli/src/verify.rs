//! `hetreg verify`: every module's numerical properties, run from one registry.
//!
//! Each property samples its own inputs and reports the worst margin against
//! its tolerance (positive = slack left, negative = violated).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use hetreg_core::autodiff::{grad_check, ParamStore, Tape, Var};
use hetreg_core::datasets::{
    gen_bivariate_p1, gen_multivariate, gen_sinusoid, load_csv, sample_gaussian, save_csv, standardize,
    RegressionDataset,
};
use hetreg_core::gaussian::{
    calibrated_kl, calibrated_kl_covariance_optimum, kl_covariance_optimum, kl_divergence, trace_root_gap, w2_bound,
    w2_exact, Gaussian, SqrtGaussian,
};
use hetreg_core::linalg::{
    cholesky, eig_call_count, mahalanobis, project_to_spd, spd_inverse, spd_sqrt, sym_eig, symmetric_eigenvalues, weighted_covariance,
    Matrix, SpdMatrix,
};
use hetreg_core::losses::{build_loss, loss_mse, Batch, LossKind, Supervision};
use hetreg_core::mlp::{Activation, CovHeadKind, HeteroscedasticModel, MlpConfig};
use hetreg_core::pseudolabel::{
    export_labels, pseudo_labels, pseudo_labels_reference, pseudo_labels_with_precision, raw_input_covariance,
};
use hetreg_core::train::{fit_bivariate, train, trajectory_csv_string, Labels, TrainOptions, TrainSpec};

type CoreResult<T> = hetreg_core::Result<T>;

/// The metric implementations the Wasserstein/trace properties exercise.
/// Swappable so the suite itself can be shown to catch a broken kernel.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub w2_exact: fn(&Gaussian, &Gaussian) -> CoreResult<f64>,
    pub w2_bound: fn(&SqrtGaussian, &SqrtGaussian) -> CoreResult<f64>,
    pub trace_root_gap: fn(&SpdMatrix, &SpdMatrix) -> CoreResult<f64>,
}

impl Default for Kernels {
    fn default() -> Self {
        Kernels {
            w2_exact: w2_exact::<f64>,
            w2_bound: w2_bound::<f64>,
            trace_root_gap: trace_root_gap::<f64>,
        }
    }
}

/// Fraction of each property's nominal sample count to draw (1 = full).
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub fraction: f64,
}

impl Budget {
    pub fn full() -> Self {
        Budget { fraction: 1.0 }
    }

    pub fn count(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.fraction).ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub samples: usize,
    pub worst_margin: f64,
    pub note: String,
}

/// Running minimum of margins.
struct Tracker {
    samples: usize,
    worst: f64,
    note: String,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            samples: 0,
            worst: f64::INFINITY,
            note: String::new(),
        }
    }

    fn record(&mut self, margin: f64, what: impl FnOnce() -> String) {
        self.samples += 1;
        // NaN margins count as failures; `+ 0.0` turns -0 into +0
        let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin + 0.0 };
        if margin < self.worst {
            self.worst = margin;
            self.note = what();
        }
    }

    fn done(self) -> CoreResult<Outcome> {
        Ok(Outcome {
            samples: self.samples,
            worst_margin: self.worst,
            note: self.note,
        })
    }
}

pub struct Property {
    pub module: &'static str,
    pub name: &'static str,
    pub check: fn(&Kernels, &Budget) -> CoreResult<Outcome>,
}

/// How many properties each module declares. A property added to a module
/// must be registered below, or [`meta_check`] fails.
pub const MODULE_PROPERTY_COUNTS: [(&str, usize); 7] = [
    ("linalg-core", 5),
    ("gaussian-metrics", 7),
    ("pseudolabel", 6),
    ("autodiff-mlp", 4),
    ("losses", 5),
    ("datasets", 3),
    ("bench-cli", 1),
];

macro_rules! prop {
    ($module:literal, $name:ident) => {
        Property {
            module: $module,
            name: stringify!($name),
            check: $name,
        }
    };
}

pub fn registry() -> Vec<Property> {
    vec![
        prop!("linalg-core", spd_sqrt_squares_back),
        prop!("linalg-core", cholesky_reconstructs),
        prop!("linalg-core", mahalanobis_is_a_metric),
        prop!("linalg-core", uniform_weighted_covariance_is_population),
        prop!("linalg-core", spd_projection_is_idempotent),
        prop!("gaussian-metrics", w2_bound_dominates_exact),
        prop!("gaussian-metrics", w2_bound_tight_for_commuting),
        prop!("gaussian-metrics", trace_root_gap_nonnegative),
        prop!("gaussian-metrics", kl_zero_on_self_and_nonnegative),
        prop!("gaussian-metrics", w2_exact_symmetric),
        prop!("gaussian-metrics", kl_optimum_doubles_covariance),
        prop!("gaussian-metrics", calibrated_kl_optimum_recovers_covariance),
        prop!("pseudolabel", neighbor_weights_on_simplex),
        prop!("pseudolabel", labels_are_psd),
        prop!("pseudolabel", labels_permutation_equivariant),
        prop!("pseudolabel", neighborhoods_scaling_invariant),
        prop!("pseudolabel", labels_match_reference),
        prop!("pseudolabel", homoscedastic_noise_recovered),
        prop!("autodiff-mlp", tape_ops_match_finite_differences),
        prop!("autodiff-mlp", training_is_deterministic),
        prop!("autodiff-mlp", cholesky_head_positive_definite),
        prop!("autodiff-mlp", sym_sqrt_head_psd),
        prop!("losses", beta_nll_zero_is_nll_diag),
        prop!("losses", faithful_mean_gradient_is_mse),
        prop!("losses", w2_cov_gradient_ignores_residual),
        prop!("losses", no_eigendecomposition_in_training),
        prop!("losses", losses_match_finite_differences),
        prop!("datasets", generators_deterministic),
        prop!("datasets", multivariate_truth_positive_definite),
        prop!("datasets", standardize_idempotent),
        prop!("bench-cli", csv_outputs_round_trip),
    ]
}

/// Registry agrees with the declared per-module counts and has unique names.
pub fn meta_check(reg: &[Property]) -> Result<(), String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in reg {
        *counts.entry(p.module).or_default() += 1;
    }
    for (module, expected) in MODULE_PROPERTY_COUNTS {
        let got = counts.remove(module).unwrap_or(0);
        if got != expected {
            return Err(format!("{module}: {expected} properties declared, {got} registered"));
        }
    }
    if let Some((m, _)) = counts.into_iter().next() {
        return Err(format!("properties registered under undeclared module {m}"));
    }
    let mut names: Vec<&str> = reg.iter().map(|p| p.name).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(format!("duplicate property {}", w[0]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub module: &'static str,
    pub name: &'static str,
    pub samples: usize,
    pub worst_margin: f64,
    pub passed: bool,
    pub note: String,
}

pub fn run_properties(reg: &[Property], kernels: &Kernels, budget: &Budget) -> Vec<ReportRow> {
    reg.par_iter()
        .map(|p| {
            let (samples, worst_margin, note) = match (p.check)(kernels, budget) {
                Ok(o) => (o.samples, o.worst_margin, o.note),
                Err(e) => (0, f64::NEG_INFINITY, format!("error: {e}")),
            };
            ReportRow {
                module: p.module,
                name: p.name,
                samples,
                worst_margin,
                passed: samples > 0 && worst_margin >= 0.0,
                note,
            }
        })
        .collect()
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<17} {:<42} {:>8} {:>13}  result\n",
        "module", "property", "samples", "worst margin"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<17} {:<42} {:>8} {:>+13.3e}  {}{}\n",
            r.module,
            r.name,
            r.samples,
            r.worst_margin,
            if r.passed { "PASS" } else { "FAIL" },
            if r.passed || r.note.is_empty() {
                String::new()
            } else {
                format!("  ({})", r.note)
            }
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} properties, {failed} failed\n", rows.len()));
    s
}

// ---------------------------------------------------------------------------
// Sampling helpers

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + tag)
}

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).expect("finite")
}

/// `MᵀM + 10⁻³I` with `M` standard normal.
fn random_spd(d: usize, rng: &mut impl Rng) -> SpdMatrix {
    let m = randn(d, d, rng);
    let a = m.transpose().matmul(&m).expect("square");
    SpdMatrix::new(a.add(&Matrix::identity(d).scale(1e-3)).expect("square")).expect("spd")
}

fn random_gaussian(d: usize, rng: &mut impl Rng) -> Gaussian {
    let mean = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    Gaussian::new(mean, random_spd(d, rng)).expect("valid")
}

fn to_sqrt(g: &Gaussian) -> CoreResult<SqrtGaussian> {
    SqrtGaussian::new(g.mean.clone(), spd_sqrt(&g.cov)?.matrix().clone())
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.rel_frobenius_distance(b)
}

fn min_eig(m: &Matrix) -> CoreResult<f64> {
    Ok(symmetric_eigenvalues(m)?[0])
}

fn dataset(n: usize, m: usize, d: usize, rng: &mut impl Rng) -> RegressionDataset {
    RegressionDataset::new(randn(n, m, rng), randn(n, d, rng)).expect("finite")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// linalg-core

fn spd_sqrt_squares_back(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(1);
    let mut t = Tracker::new();
    for i in 0..b.count(1000) {
        let d = 2 + i % 15;
        let a = random_spd(d, &mut r);
        let s = spd_sqrt(&a)?;
        let err = rel(&s.matrix().matmul(s.matrix())?, a.matrix());
        t.record(1e-8 - err, || format!("dim {d}, rel err {err:.2e}"));
    }
    t.done()
}

fn cholesky_reconstructs(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(2);
    let mut t = Tracker::new();
    for i in 0..b.count(1000) {
        let d = 2 + i % 15;
        let a = random_spd(d, &mut r);
        let l = cholesky(&a)?;
        let err = rel(&l.matmul(&l.transpose())?, a.matrix());
        t.record(1e-10 - err, || format!("dim {d}, rel err {err:.2e}"));
    }
    t.done()
}

fn mahalanobis_is_a_metric(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(3);
    let mut t = Tracker::new();
    for i in 0..b.count(1000) {
        let d = 1 + i % 8;
        let p = random_spd(d, &mut r);
        let pts = randn(3, d, &mut r);
        let (u, v, w) = (pts.row(0), pts.row(1), pts.row(2));
        let (uv, vu) = (mahalanobis(u, v, &p)?, mahalanobis(v, u, &p)?);
        let (vw, uw) = (mahalanobis(v, w, &p)?, mahalanobis(u, w, &p)?);
        t.record(-(uv - vu).abs(), || format!("asymmetry {:.2e}", (uv - vu).abs()));
        t.record(uv + vw + 1e-12 - uw, || format!("triangle excess {:.2e}", uw - uv - vw));
    }
    t.done()
}

fn uniform_weighted_covariance_is_population(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(4);
    let mut t = Tracker::new();
    for i in 0..b.count(500) {
        let n = 3 + i % 28;
        let d = 1 + i % 5;
        let pts = randn(n, d, &mut r);
        let (_, cov) = weighted_covariance(&pts, &vec![1.0 / n as f64; n])?;
        // textbook unbiased estimator
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|k| pts[(k, j)]).sum::<f64>() / n as f64).collect();
        let mut unbiased = Matrix::zeros(d, d);
        for k in 0..n {
            for a in 0..d {
                for c in 0..d {
                    unbiased[(a, c)] += (pts[(k, a)] - mean[a]) * (pts[(k, c)] - mean[c]) / (n - 1) as f64;
                }
            }
        }
        let err = rel(cov.matrix(), &unbiased.scale((n - 1) as f64 / n as f64));
        t.record(1e-12 - err, || format!("n {n}, dim {d}, rel err {err:.2e}"));
    }
    t.done()
}

fn spd_projection_is_idempotent(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(5);
    let mut t = Tracker::new();
    for i in 0..b.count(500) {
        let d = 1 + i % 8;
        let a = randn(d, d, &mut r);
        let once = project_to_spd(&a, 1e-6)?;
        let twice = project_to_spd(once.matrix(), 1e-6)?;
        let diff = max_abs_diff(once.matrix().data(), twice.matrix().data());
        t.record(-diff, || format!("dim {d}, changed by {diff:.2e}"));
    }
    t.done()
}

// ---------------------------------------------------------------------------
// gaussian-metrics

const THEOREM_DIMS: [usize; 4] = [2, 4, 8, 16];

fn w2_bound_dominates_exact(k: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(6);
    let mut t = Tracker::new();
    for d in THEOREM_DIMS {
        for _ in 0..b.count(1000) {
            let (p, q) = (random_gaussian(d, &mut r), random_gaussian(d, &mut r));
            let exact = (k.w2_exact)(&p, &q)?;
            let bound = (k.w2_bound)(&to_sqrt(&p)?, &to_sqrt(&q)?)?;
            t.record(bound + 1e-8 * (1.0 + exact) - exact, || {
                format!("dim {d}: exact {exact:.6e} > bound {bound:.6e}")
            });
        }
    }
    t.done()
}

/// Random orthogonal matrix (eigenvectors of a random SPD matrix).
fn random_rotation(d: usize, r: &mut impl Rng) -> CoreResult<Matrix> {
    Ok(sym_eig(&random_spd(d, r))?.eigenvectors)
}

fn w2_bound_tight_for_commuting(k: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(7);
    let mut t = Tracker::new();
    for d in THEOREM_DIMS {
        for _ in 0..b.count(250) {
            let q = random_rotation(d, &mut r)?;
            let make = |r: &mut ChaCha8Rng| -> CoreResult<Gaussian> {
                let diag: Vec<f64> = (0..d).map(|_| 10f64.powf(r.random_range(-1.0..1.0))).collect();
                let c = q.matmul(&Matrix::from_diag(&diag))?.matmul(&q.transpose())?;
                Gaussian::new((0..d).map(|_| r.sample(StandardNormal)).collect(), SpdMatrix::new(c.symmetrized())?)
            };
            let (p1, p2) = (make(&mut r)?, make(&mut r)?);
            let exact = (k.w2_exact)(&p1, &p2)?;
            let bound = (k.w2_bound)(&to_sqrt(&p1)?, &to_sqrt(&p2)?)?;
            t.record(1e-9 - (exact - bound).abs(), || {
                format!("dim {d}: |exact - bound| = {:.2e}", (exact - bound).abs())
            });
        }
    }
    t.done()
}

fn trace_root_gap_nonnegative(k: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(8);
    let mut t = Tracker::new();
    for d in THEOREM_DIMS {
        for _ in 0..b.count(1000) {
            let (p, q) = (random_spd(d, &mut r), random_spd(d, &mut r));
            let gap = (k.trace_root_gap)(&p, &q)?;
            t.record(gap + 1e-9, || format!("dim {d}: gap {gap:.3e}"));
        }
    }
    t.done()
}

fn kl_zero_on_self_and_nonnegative(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(9);
    let mut t = Tracker::new();
    for i in 0..b.count(1000) {
        let d = 1 + i % 16;
        let (p, q) = (random_gaussian(d, &mut r), random_gaussian(d, &mut r));
        let own = kl_divergence(&p, &p)?;
        let cross = kl_divergence(&p, &q)?;
        t.record(1e-12 - own.abs(), || format!("dim {d}: KL(p,p) = {own:.2e}"));
        t.record(cross, || format!("dim {d}: KL(p,q) = {cross:.2e}"));
    }
    t.done()
}

fn w2_exact_symmetric(k: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(10);
    let mut t = Tracker::new();
    for i in 0..b.count(1000) {
        let d = THEOREM_DIMS[i % 4];
        let (p, q) = (random_gaussian(d, &mut r), random_gaussian(d, &mut r));
        let diff = ((k.w2_exact)(&p, &q)? - (k.w2_exact)(&q, &p)?).abs();
        t.record(1e-9 - diff, || format!("dim {d}: asymmetry {diff:.2e}"));
    }
    t.done()
}

pub const LEMMA_SAMPLES: usize = 50_000;

struct LemmaSetup {
    sigma: SpdMatrix,
    ys: Matrix,
    mu_hat: Vec<f64>,
    residual_cov: SpdMatrix,
}

fn lemma_setup() -> CoreResult<LemmaSetup> {
    let mut r = rng(11);
    let a = randn(3, 3, &mut r);
    let sigma = SpdMatrix::new(a.transpose().matmul(&a)?.add(&Matrix::identity(3).scale(0.5))?)?;
    let truth = Gaussian::new(vec![1.0, -2.0, 0.5], sigma.clone())?;
    let ys = sample_gaussian(&truth, LEMMA_SAMPLES, &mut r);
    let n = ys.rows();
    let mu_hat: Vec<f64> = (0..3).map(|j| (0..n).map(|i| ys[(i, j)]).sum::<f64>() / n as f64).collect();
    let (_, residual_cov) = weighted_covariance(&ys, &vec![1.0 / n as f64; n])?;
    Ok(LemmaSetup {
        sigma,
        ys,
        mu_hat,
        residual_cov,
    })
}

/// Average objective over the samples at covariance `c`; used to confirm a
/// closed-form minimiser by perturbation.
fn lemma_objective(s: &LemmaSetup, c: &SpdMatrix, calibrated: bool) -> CoreResult<f64> {
    let pred = Gaussian::new(s.mu_hat.clone(), c.clone())?;
    let mut total = 0.0;
    for i in 0..s.ys.rows() {
        let y = s.ys.row(i);
        total += if calibrated {
            calibrated_kl(y, &s.sigma, &pred)?
        } else {
            kl_divergence(&Gaussian::new(y.to_vec(), s.sigma.clone())?, &pred)?
        };
    }
    Ok(total / s.ys.rows() as f64)
}

fn check_lemma(calibrated: bool, target_scale: f64) -> CoreResult<Outcome> {
    let s = lemma_setup()?;
    let opt = if calibrated {
        calibrated_kl_covariance_optimum(&s.sigma, &s.residual_cov)?
    } else {
        kl_covariance_optimum(&s.sigma, &s.residual_cov)?
    };
    let err = rel(opt.matrix(), &s.sigma.matrix().scale(target_scale));
    let mut t = Tracker::new();
    t.record(0.05 - err, || format!("rel distance to {target_scale}Σ: {err:.3e}"));
    // the closed form must beat nearby covariances on the sampled objective
    let base = lemma_objective(&s, &opt, calibrated)?;
    let mut r = rng(12);
    for _ in 0..6 {
        let e = randn(3, 3, &mut r);
        let e = e.add(&e.transpose())?.scale(0.02 * opt.matrix().frobenius_norm());
        let moved = SpdMatrix::new(opt.matrix().add(&e)?)?;
        let f = lemma_objective(&s, &moved, calibrated)?;
        let slack = f - base + 1e-12 * base.abs();
        t.record(if slack >= 0.0 { 0.05 - err } else { slack }, || {
            format!("perturbation lowered the objective by {:.3e}", base - f)
        });
    }
    t.done()
}

fn kl_optimum_doubles_covariance(_: &Kernels, _: &Budget) -> CoreResult<Outcome> {
    check_lemma(false, 2.0)
}

fn calibrated_kl_optimum_recovers_covariance(_: &Kernels, _: &Budget) -> CoreResult<Outcome> {
    check_lemma(true, 1.0)
}

// ---------------------------------------------------------------------------
// pseudolabel

fn neighbor_weights_on_simplex(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(13);
    let mut t = Tracker::new();
    for i in 0..b.count(20) {
        let ds = dataset(60, 1 + i % 3, 2, &mut r);
        for l in pseudo_labels(&ds, 20)?.labels {
            let sum: f64 = l.weights.iter().sum();
            let min = l.weights.iter().copied().fold(f64::INFINITY, f64::min);
            t.record((1e-12 - (sum - 1.0).abs()).min(min), || format!("sum {sum}, min {min:.2e}"));
        }
    }
    t.done()
}

fn labels_are_psd(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(14);
    let mut t = Tracker::new();
    for i in 0..b.count(20) {
        let n = 1 + i % 4;
        let ds = dataset(60, 2, n, &mut r);
        for l in pseudo_labels(&ds, 10 * n)?.labels {
            let e = min_eig(l.cov.matrix())?;
            t.record(e + 1e-10, || format!("target dim {n}: min eigenvalue {e:.3e}"));
        }
    }
    t.done()
}

fn labels_permutation_equivariant(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(15);
    let mut t = Tracker::new();
    for _ in 0..b.count(10) {
        let ds = dataset(80, 2, 2, &mut r);
        let mut perm: Vec<usize> = (0..ds.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let a = pseudo_labels(&ds, 20)?;
        let p = pseudo_labels(&ds.subset(&perm), 20)?;
        for (i, &src) in perm.iter().enumerate() {
            let err = rel(p.labels[i].cov.matrix(), a.labels[src].cov.matrix());
            let same_set = {
                let mut x: Vec<usize> = p.labels[i].neighbors.iter().map(|&j| perm[j]).collect();
                let mut y = a.labels[src].neighbors.clone();
                x.sort_unstable();
                y.sort_unstable();
                x == y
            };
            t.record(if same_set { 1e-10 - err } else { -1.0 }, || {
                format!("row {src}: same neighbours {same_set}, rel err {err:.2e}")
            });
        }
    }
    t.done()
}

fn neighborhoods_scaling_invariant(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(16);
    let mut t = Tracker::new();
    for _ in 0..b.count(10) {
        let ds = dataset(80, 3, 2, &mut r);
        let scale: Vec<f64> = (0..3).map(|_| 10f64.powf(r.random_range(-1.0..1.0))).collect();
        let mut x = ds.inputs.clone();
        for i in 0..x.rows() {
            for (j, s) in scale.iter().enumerate() {
                x[(i, j)] *= s;
            }
        }
        let scaled = RegressionDataset::new(x, ds.targets.clone())?;
        let plain = pseudo_labels_with_precision(&ds, 15, &spd_inverse(&raw_input_covariance(&ds)?)?)?;
        let other = pseudo_labels_with_precision(&scaled, 15, &spd_inverse(&raw_input_covariance(&scaled)?)?)?;
        let mismatched = plain
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| {
                let (mut x, mut y) = (a.neighbors.clone(), b.neighbors.clone());
                x.sort_unstable();
                y.sort_unstable();
                x != y
            })
            .count();
        t.record(-(mismatched as f64), || format!("{mismatched} rows changed neighbourhood"));
    }
    t.done()
}

fn labels_match_reference(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for seed in 0..b.count(20) as u64 {
        let mut r = rng(100 + seed);
        let n = 1 + seed as usize % 3;
        let ds = dataset(100, 1 + seed as usize % 4, n, &mut r);
        let fast = pseudo_labels(&ds, 10 * n)?;
        let slow = pseudo_labels_reference(&ds, 10 * n)?;
        let mismatched = fast
            .labels
            .iter()
            .zip(&slow.labels)
            .filter(|(a, b)| a.neighbors != b.neighbors || a.weights != b.weights || a.mean != b.mean || a.cov != b.cov)
            .count()
            + usize::from(fast.repaired != slow.repaired);
        t.record(-(mismatched as f64), || format!("seed {seed}: {mismatched} rows differ"));
    }
    t.done()
}

pub const HOMOSCEDASTIC_SAMPLES: usize = 20_000;

/// `y = A x + ε` with constant noise covariance; returns the data and `Σ₀`.
pub fn homoscedastic_problem(n: usize, seed: u64) -> CoreResult<(RegressionDataset, SpdMatrix)> {
    let mut r = rng(seed);
    let sigma0 = SpdMatrix::new(Matrix::from_rows(&[&[1.0, 0.6], &[0.6, 2.0]]))?;
    let a = randn(2, 2, &mut r);
    let x = randn(n, 2, &mut r);
    let noise = sample_gaussian(&Gaussian::new(vec![0.0, 0.0], sigma0.clone())?, n, &mut r);
    let y = x.matmul(&a.transpose())?.add(&noise)?;
    Ok((RegressionDataset::new(x, y)?, sigma0))
}

fn homoscedastic_noise_recovered(_: &Kernels, _: &Budget) -> CoreResult<Outcome> {
    let (ds, sigma0) = homoscedastic_problem(HOMOSCEDASTIC_SAMPLES, 17)?;
    let labels = pseudo_labels(&ds, 10 * ds.target_dim())?;
    let err = rel(&labels.average_cov(), sigma0.matrix());
    let mut t = Tracker::new();
    t.record(0.1 - err, || format!("average label vs Σ₀: rel err {err:.3e}"));
    t.done()
}

// ---------------------------------------------------------------------------
// autodiff-mlp

type TapeFn = fn(&mut Tape<'_>, &[Var]) -> CoreResult<Var>;

fn tape_cases() -> Vec<(&'static str, TapeFn)> {
    vec![
        ("matmul", |t, p| {
            let m = t.matmul(p[0], p[1])?;
            let s = t.square(m);
            Ok(t.sum(s))
        }),
        ("add_row/tanh/elu", |t, p| {
            let a = t.add_row(p[0], p[2])?;
            let h = t.tanh(a);
            let e = t.elu(a);
            let m = t.mul(h, e)?;
            Ok(t.mean(m))
        }),
        ("div/exp/softplus/ln/pow", |t, p| {
            let e = t.exp(p[0]);
            let s = t.softplus(p[0]);
            let one = t.add_scalar(s, 1.0);
            let l = t.ln(one);
            let q = t.powf(one, 1.5);
            let d = t.div(l, e)?;
            let sum = t.sub(d, q)?;
            let sc = t.scale(sum, 0.3);
            Ok(t.sum(sc))
        }),
        ("frobenius", |t, p| Ok(t.frobenius_sq(p[0]))),
        ("cholesky head", |t, p| {
            let l = t.tril_head(p[3], 3)?;
            let ld = t.logdet_chol(l, 3)?;
            let q = t.inv_quad(l, p[4], 3, 1)?;
            let s = t.add(ld, q)?;
            Ok(t.sum(s))
        }),
        ("sym head", |t, p| {
            let s = t.sym_head(p[5], 3)?;
            let sq = t.square(s);
            let f = t.frobenius_sq(s);
            let a = t.sum(sq);
            t.add(a, f)
        }),
    ]
}

fn tape_ops_match_finite_differences(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(18);
    let mut t = Tracker::new();
    for _ in 0..b.count(20) {
        let mut store = ParamStore::new();
        let shapes = [(3, 4), (4, 2), (1, 4), (2, 6), (2, 3), (2, 9)];
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| store.add(format!("p{i}"), randn(rows, cols, &mut r)))
            .collect();
        for (name, f) in tape_cases() {
            let res = grad_check(&store, |tape| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
                f(tape, &vars)
            })?;
            let e = res.max_rel_err;
            t.record(1e-4 - e, || format!("{name}: rel err {e:.2e}"));
        }
    }
    t.done()
}

fn training_is_deterministic(_: &Kernels, _: &Budget) -> CoreResult<Outcome> {
    let ds = gen_sinusoid(1, 200, 3)?;
    let labels = Supervision::from_pseudo_labels(&pseudo_labels(&ds, 10)?)?;
    let template = MlpConfig {
        input_dim: 1,
        output_dim: 1,
        hidden_layers: 2,
        hidden_width: 8,
        activation: Activation::Tanh,
    };
    let mut t = Tracker::new();
    for loss in [LossKind::W2Bound, LossKind::NllFull] {
        let mut spec = TrainSpec::new(loss, template.clone(), 1);
        spec.epochs = 3;
        spec.batch = 32;
        let run = || {
            train(
                &ds,
                Labels::Given(&labels),
                &spec,
                TrainOptions {
                    eval: Some(&ds),
                    ..Default::default()
                },
            )
        };
        let (a, b) = (run()?, run()?);
        let same_params = a
            .model
            .store
            .ids()
            .all(|id| a.model.store.get(id).data().iter().map(|v| v.to_bits()).eq(b.model.store.get(id).data().iter().map(|v| v.to_bits())));
        let same_log = a.log.to_csv_string() == b.log.to_csv_string();
        t.record(if same_params && same_log { 0.0 } else { -1.0 }, || {
            format!("{}: params equal {same_params}, logs equal {same_log}", loss.label())
        });
    }
    t.done()
}

fn cholesky_head_positive_definite(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(19);
    let mut t = Tracker::new();
    let head = CovHeadKind::CholeskyFull;
    for i in 0..b.count(10_000) {
        let n = 1 + i % 6;
        let raw: Vec<f64> = (0..head.raw_dim(n)).map(|_| r.sample(StandardNormal)).collect();
        let e = min_eig(&head.covariance(&raw, n))?;
        t.record(e - f64::MIN_POSITIVE, || format!("dim {n}: min eigenvalue {e:.3e}"));
    }
    t.done()
}

fn sym_sqrt_head_psd(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(20);
    let mut t = Tracker::new();
    let head = CovHeadKind::SymSqrt;
    for i in 0..b.count(10_000) {
        let n = 1 + i % 6;
        let raw: Vec<f64> = (0..head.raw_dim(n)).map(|_| r.sample(StandardNormal)).collect();
        let c = head.covariance(&raw, n);
        let e = min_eig(&c)?;
        let tol = 1e-12 * (1.0 + c.frobenius_norm());
        t.record(e + tol, || format!("dim {n}: min eigenvalue {e:.3e}"));
    }
    t.done()
}

// ---------------------------------------------------------------------------
// losses

fn small_model(kind: LossKind, m: usize, n: usize, seed: u64) -> CoreResult<HeteroscedasticModel> {
    let mut r = rng(1000 + seed);
    let arch = |out| MlpConfig {
        input_dim: m,
        output_dim: out,
        hidden_layers: 1,
        hidden_width: 3,
        activation: Activation::Tanh,
    };
    HeteroscedasticModel::init(arch(n), arch(kind.head().raw_dim(n)), kind.head(), &mut r)
}

fn random_batch(rows: usize, m: usize, n: usize, seed: u64) -> CoreResult<Batch> {
    let mut r = rng(2000 + seed);
    let covs = (0..rows)
        .map(|_| Gaussian::new(vec![0.0; n], random_spd(n, &mut r)))
        .collect::<CoreResult<Vec<_>>>()?;
    Ok(Batch {
        x: randn(rows, m, &mut r),
        y: randn(rows, n, &mut r),
        labels: Some(Supervision::from_ground_truth(&covs)?),
    })
}

fn loss_value_and_grads(
    model: &HeteroscedasticModel,
    batch: &Batch,
    f: impl Fn(&mut Tape<'_>) -> CoreResult<Var>,
) -> CoreResult<(f64, Vec<Option<Matrix>>)> {
    let mut tape = Tape::new(&model.store);
    let v = f(&mut tape)?;
    let _ = batch;
    Ok((tape.scalar(v), tape.backward(v)?.into_params()))
}

fn grads_diff(a: &[Option<Matrix>], b: &[Option<Matrix>], ids: impl Iterator<Item = usize>) -> f64 {
    ids.map(|i| match (&a[i], &b[i]) {
        (Some(x), Some(y)) => max_abs_diff(x.data(), y.data()),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    })
    .fold(0.0, f64::max)
}

const LOSS_DIMS: [usize; 4] = [1, 2, 4, 8];

fn beta_nll_zero_is_nll_diag(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for i in 0..b.count(20) {
        let n = LOSS_DIMS[i % 4];
        let model = small_model(LossKind::NllDiag, 2, n, i as u64)?;
        let batch = random_batch(4, 2, n, i as u64)?;
        let (va, ga) = loss_value_and_grads(&model, &batch, |t| build_loss(LossKind::BetaNll(0.0), t, &model, &batch))?;
        let (vb, gb) = loss_value_and_grads(&model, &batch, |t| build_loss(LossKind::NllDiag, t, &model, &batch))?;
        let diff = (va - vb).abs().max(grads_diff(&ga, &gb, 0..ga.len()));
        t.record(-diff, || format!("dim {n}: differs by {diff:.2e}"));
    }
    t.done()
}

fn faithful_mean_gradient_is_mse(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for i in 0..b.count(20) {
        let n = LOSS_DIMS[i % 4];
        let model = small_model(LossKind::Faithful, 2, n, 100 + i as u64)?;
        let batch = random_batch(4, 2, n, 100 + i as u64)?;
        let (_, ga) = loss_value_and_grads(&model, &batch, |t| build_loss(LossKind::Faithful, t, &model, &batch))?;
        let (_, gb) = loss_value_and_grads(&model, &batch, |t| loss_mse(t, &model, &batch))?;
        let diff = grads_diff(&ga, &gb, model.mean.params().map(|p| p.0));
        let scale = grads_diff(&gb, &vec![None; gb.len()], std::iter::empty()).max(1.0);
        t.record(1e-12 * scale - diff, || format!("dim {n}: mean gradients differ by {diff:.2e}"));
    }
    t.done()
}

fn w2_cov_gradient_ignores_residual(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(21);
    let mut t = Tracker::new();
    for i in 0..b.count(20) {
        let n = LOSS_DIMS[i % 4];
        let model = small_model(LossKind::W2Bound, 2, n, 200 + i as u64)?;
        let batch = random_batch(4, 2, n, 200 + i as u64)?;
        let mut moved = batch.clone();
        moved.y = moved.y.add(&randn(4, n, &mut r).scale(10.0))?;
        let (_, ga) = loss_value_and_grads(&model, &batch, |t| build_loss(LossKind::W2Bound, t, &model, &batch))?;
        let (_, gb) = loss_value_and_grads(&model, &moved, |t| build_loss(LossKind::W2Bound, t, &model, &moved))?;
        let diff = grads_diff(&ga, &gb, model.cov.params().map(|p| p.0));
        t.record(-diff, || format!("dim {n}: covariance gradients moved by {diff:.2e}"));
    }
    t.done()
}

fn no_eigendecomposition_in_training(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for i in 0..b.count(8) {
        let n = LOSS_DIMS[i % 4];
        for kind in LossKind::all() {
            let model = small_model(kind, 2, n, 300 + i as u64)?;
            let batch = random_batch(4, 2, n, 300 + i as u64)?;
            let before = eig_call_count();
            loss_value_and_grads(&model, &batch, |t| build_loss(kind, t, &model, &batch))?;
            let calls = eig_call_count() - before;
            t.record(-(calls as f64), || format!("{} dim {n}: {calls} eig calls", kind.label()));
        }
    }
    t.done()
}

fn losses_match_finite_differences(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for point in 0..b.count(20) {
        for n in LOSS_DIMS {
            for kind in LossKind::all() {
                let seed = (point * 100 + n) as u64;
                let model = small_model(kind, 2, n, 400 + seed)?;
                let batch = random_batch(3, 2, n, 400 + seed)?;
                let res = grad_check(&model.store, |tape| build_loss(kind, tape, &model, &batch))?;
                let e = res.max_rel_err;
                t.record(1e-4 - e, || format!("{} dim {n}: rel err {e:.2e}", kind.label()));
            }
        }
    }
    t.done()
}

// ---------------------------------------------------------------------------
// datasets

fn same_dataset(a: &RegressionDataset, b: &RegressionDataset) -> bool {
    a.inputs == b.inputs && a.targets == b.targets && a.ground_truth == b.ground_truth
}

fn generators_deterministic(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for seed in 0..b.count(5) as u64 {
        for variant in 1..=3 {
            let same = same_dataset(&gen_sinusoid(variant, 300, seed)?, &gen_sinusoid(variant, 300, seed)?);
            t.record(if same { 0.0 } else { -1.0 }, || format!("sinusoid {variant} seed {seed}"));
        }
        for dim in [2, 4, 8] {
            let same = same_dataset(&gen_multivariate(dim, 200, seed)?, &gen_multivariate(dim, 200, seed)?);
            t.record(if same { 0.0 } else { -1.0 }, || format!("multivariate {dim} seed {seed}"));
        }
        let (p, q) = (gen_bivariate_p1(seed), gen_bivariate_p1(seed));
        let same = p.target == q.target && p.init == q.init;
        t.record(if same { 0.0 } else { -1.0 }, || format!("bivariate seed {seed}"));
    }
    t.done()
}

fn multivariate_truth_positive_definite(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut t = Tracker::new();
    for dim in [2, 4, 8, 16] {
        let ds = gen_multivariate(dim, b.count(200).max(2 * dim), dim as u64)?;
        for g in ds.ground_truth.as_ref().expect("generator sets ground truth") {
            let e = min_eig(g.cov.matrix())?;
            t.record(e - f64::MIN_POSITIVE, || format!("dim {dim}: min eigenvalue {e:.3e}"));
        }
    }
    t.done()
}

fn standardize_idempotent(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let mut r = rng(22);
    let mut t = Tracker::new();
    for i in 0..b.count(50) {
        let mut ds = dataset(40, 1 + i % 4, 1 + i % 3, &mut r);
        ds.inputs = ds.inputs.scale(1.0 + i as f64).add(&Matrix::new(40, ds.input_dim(), vec![3.0; 40 * ds.input_dim()])?)?;
        let (once, _) = standardize(&ds);
        let (twice, _) = standardize(&once);
        let diff = max_abs_diff(once.inputs.data(), twice.inputs.data())
            .max(max_abs_diff(once.targets.data(), twice.targets.data()));
        t.record(1e-10 - diff, || format!("moved by {diff:.2e}"));
    }
    t.done()
}

// ---------------------------------------------------------------------------
// bench-cli

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn csv_outputs_round_trip(_: &Kernels, b: &Budget) -> CoreResult<Outcome> {
    let dir = std::env::temp_dir().join(format!("hetreg-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| hetreg_core::Error::InvalidSpec(format!("{}: {e}", dir.display())))?;
    let mut r = rng(23);
    let mut t = Tracker::new();
    for i in 0..b.count(5) {
        // plain matrices
        let m = randn(7, 3, &mut r).scale(10f64.powi(i as i32 * 3 - 6));
        let p = dir.join(format!("m{i}.csv"));
        save_csv(&m, None, &p)?;
        let back: Matrix = load_csv(&p, false)?;
        t.record(if bits(&back) == bits(&m) { 0.0 } else { -1.0 }, || "matrix csv changed".into());

        // pseudo-label export
        let ds = dataset(30, 2, 1 + i % 3, &mut r);
        let pl = pseudo_labels(&ds, 5)?;
        let p = dir.join(format!("labels{i}.csv"));
        export_labels(&pl, &p)?;
        let table: Matrix = load_csv(&p, true)?;
        let n = ds.target_dim();
        let mut ok = table.rows() == pl.len();
        for (row, l) in pl.labels.iter().enumerate().take(table.rows()) {
            let rec = table.row(row);
            ok &= rec[1..1 + n].iter().zip(&l.mean).all(|(a, b)| a.to_bits() == b.to_bits());
            let upper = (0..n).flat_map(|i| (i..n).map(move |j| (i, j)));
            ok &= rec[1 + n..].iter().zip(upper).all(|(a, (i, j))| a.to_bits() == l.cov[(i, j)].to_bits());
        }
        t.record(if ok { 0.0 } else { -1.0 }, || "label csv changed".into());

        // bivariate trajectory
        let prob = gen_bivariate_p1(i as u64);
        let samples = prob.sample(50, &mut r);
        let fit = fit_bivariate(&prob, &samples, LossKind::W2Bound, 1e-2, 5, i as u64)?;
        let p = dir.join(format!("traj{i}.csv"));
        std::fs::write(&p, trajectory_csv_string(&fit.trajectory))
            .map_err(|e| hetreg_core::Error::InvalidSpec(format!("{}: {e}", p.display())))?;
        let table: Matrix = load_csv(&p, true)?;
        let ok = table.rows() == fit.trajectory.len()
            && fit.trajectory.iter().enumerate().all(|(row, pt)| {
                let v = [pt.mean[0], pt.mean[1], pt.cov[0], pt.cov[1], pt.cov[2], pt.kl, pt.w2];
                table.row(row)[1..].iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits())
            });
        t.record(if ok { 0.0 } else { -1.0 }, || "trajectory csv changed".into());
    }
    let _ = std::fs::remove_dir_all(&dir);
    t.done()
}
