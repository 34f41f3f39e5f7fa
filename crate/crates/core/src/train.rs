//! Training loop, schedules, ground-truth evaluation and the metrics log.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::datasets::{BivariateProblem, RegressionDataset};
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_nll, kl_divergence, w2_exact, Gaussian};
use crate::linalg::{eig_call_count, Matrix};
use crate::losses::{build_loss, gather_rows, loss_mse, Batch, LossKind, Supervision};
use crate::mlp::{Activation, CovHeadKind, HeteroscedasticModel, MlpConfig};
use crate::optim::AdamW;

/// How the objective changes over the run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Standard,
    /// Mean network alone (MSE) for the first `mean_only_fraction` of epochs.
    Warmup { mean_only_fraction: f64 },
    /// Train with the spec's loss until `switch_epoch`, then with `then`.
    Hybrid { switch_epoch: usize, then: LossKind },
}

impl Schedule {
    pub fn warmup() -> Self {
        Schedule::Warmup { mean_only_fraction: 0.5 }
    }

    /// Stable text form, also used in the metrics CSV (contains no commas).
    pub fn label(&self) -> String {
        match self {
            Schedule::Standard => "standard".into(),
            Schedule::Warmup { mean_only_fraction } => format!("warmup:{mean_only_fraction}"),
            Schedule::Hybrid { switch_epoch, then } => format!("hybrid:{switch_epoch}:{}", then.label()),
        }
    }

    pub fn validate(&self, first: LossKind, epochs: usize) -> Result<()> {
        match *self {
            Schedule::Standard => Ok(()),
            Schedule::Warmup { mean_only_fraction: f } => {
                if f > 0.0 && f < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidSpec(format!("warm-up fraction must lie in (0, 1), got {f}")))
                }
            }
            Schedule::Hybrid { switch_epoch, then } => {
                then.validate()?;
                if switch_epoch >= epochs {
                    return Err(Error::InvalidSpec(format!(
                        "switch epoch {switch_epoch} must be below the epoch count {epochs}"
                    )));
                }
                if first.head() != CovHeadKind::SymSqrt || then.head() != CovHeadKind::CholeskyFull {
                    return Err(Error::InvalidSpec(format!(
                        "hybrid runs go from a sym_sqrt loss to a cholesky loss, got {} -> {}",
                        first.label(),
                        then.label()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of leading mean-only epochs.
    fn mean_only_epochs(&self, epochs: usize) -> usize {
        match *self {
            Schedule::Warmup { mean_only_fraction } => (mean_only_fraction * epochs as f64).round() as usize,
            _ => 0,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `standard`, `warmup`, `warmup:<fraction>`, `hybrid:<epoch>:<loss>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("unknown schedule {s:?}"));
        let mut parts = s.trim().splitn(3, ':');
        match parts.next().ok_or_else(bad)? {
            "standard" => Ok(Schedule::Standard),
            "warmup" => match parts.next() {
                None => Ok(Schedule::warmup()),
                Some(f) => Ok(Schedule::Warmup {
                    mean_only_fraction: f.parse().map_err(|_| bad())?,
                }),
            },
            "hybrid" => {
                let switch_epoch = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let then = parts.next().unwrap_or("nll_full").parse()?;
                Ok(Schedule::Hybrid { switch_epoch, then })
            }
            _ => Err(bad()),
        }
    }
}

/// Everything that defines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub loss: LossKind,
    pub schedule: Schedule,
    pub mean_arch: MlpConfig,
    pub cov_arch: MlpConfig,
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch: usize,
    pub seed: u64,
    /// Neighbourhood size for pseudo-labels; `None` means `10·n`.
    pub pseudo_k: Option<usize>,
}

impl TrainSpec {
    /// Both networks share the hidden layout of `template`; output widths
    /// follow from the loss and the target dimension.
    pub fn new(loss: LossKind, template: MlpConfig, target_dim: usize) -> Self {
        let mean_arch = MlpConfig {
            output_dim: target_dim,
            ..template.clone()
        };
        let cov_arch = MlpConfig {
            output_dim: loss.head().raw_dim(target_dim),
            ..template
        };
        TrainSpec {
            loss,
            schedule: Schedule::Standard,
            mean_arch,
            cov_arch,
            lr: 1e-3,
            epochs: 100,
            batch: 64,
            seed: 0,
            pseudo_k: None,
        }
    }

    pub fn target_dim(&self) -> usize {
        self.mean_arch.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.mean_arch.validate()?;
        self.cov_arch.validate()?;
        let n = self.target_dim();
        if self.cov_arch.output_dim != self.loss.head().raw_dim(n) {
            return Err(Error::InvalidSpec(format!(
                "{} uses a {} head: covariance network must emit {} values, not {}",
                self.loss.label(),
                self.loss.head().name(),
                self.loss.head().raw_dim(n),
                self.cov_arch.output_dim
            )));
        }
        if self.mean_arch.input_dim != self.cov_arch.input_dim {
            return Err(Error::InvalidSpec("mean and covariance networks need equal input widths".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidSpec(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.pseudo_k == Some(0) {
            return Err(Error::InvalidSpec("pseudo_k must be at least 1".into()));
        }
        self.schedule.validate(self.loss, self.epochs)
    }

    pub fn pseudo_k(&self) -> usize {
        self.pseudo_k.unwrap_or(10 * self.target_dim())
    }

    /// Whether any phase of the run consumes covariance labels.
    pub fn needs_labels(&self) -> bool {
        self.loss.needs_labels() || matches!(self.schedule, Schedule::Hybrid { then, .. } if then.needs_labels())
    }

    /// Fresh model for this spec; identical for equal seeds.
    pub fn init_model(&self) -> Result<HeteroscedasticModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        HeteroscedasticModel::init(self.mean_arch.clone(), self.cov_arch.clone(), self.loss.head(), &mut rng)
    }
}

/// Per-epoch batch orders. Depends only on the seed and the dataset size, so
/// runs with different losses but equal seeds see identical batches.
pub struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch: usize,
}

impl BatchOrder {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let batch = if batch == 0 || batch > n { n } else { batch };
        BatchOrder {
            rng,
            order: (0..n).collect(),
            batch,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch == self.order.len()
    }

    /// Index chunks for the next epoch (last chunk may be short).
    pub fn next_epoch(&mut self) -> std::slice::Chunks<'_, usize> {
        if !self.is_full_batch() {
            self.order.shuffle(&mut self.rng);
        }
        self.order.chunks(self.batch.max(1))
    }
}

/// One optimisation step: build the loss graph, backpropagate, update.
/// Returns the loss value, or `None` (parameters untouched) when it is not
/// finite.
pub fn training_step(
    model: &mut HeteroscedasticModel,
    opt: &mut AdamW,
    loss: Option<LossKind>,
    batch: &Batch,
) -> Result<Option<f64>> {
    let (value, grads) = {
        let mut tape = Tape::new(&model.store);
        let out = match loss {
            Some(kind) => build_loss(kind, &mut tape, model, batch)?,
            None => loss_mse(&mut tape, model, batch)?,
        };
        let value = tape.scalar(out);
        if !value.is_finite() {
            return Ok(None);
        }
        (value, tape.backward(out)?)
    };
    opt.step(&mut model.store, &grads.into_params())?;
    Ok(Some(value))
}

/// Instrumentation around each optimisation step (e.g. an allocation counter).
pub trait StepProbe {
    fn begin(&mut self);
    /// Peak bytes attributable to the step just finished.
    fn end(&mut self) -> u64;
}

/// Optional extras for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Evaluated after every epoch; no metrics rows are written without it.
    pub eval: Option<&'a RegressionDataset>,
    /// Wall-clock step times are written to the metrics log only when set,
    /// keeping logs byte-identical across reruns otherwise.
    pub record_timing: bool,
    pub probe: Option<&'a mut dyn StepProbe>,
    /// Called after every epoch with the 1-based epoch number.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &HeteroscedasticModel) -> Result<()>>,
}

/// Where a run diverged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::NonFinite {
            epoch: d.epoch,
            step: d.step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HeteroscedasticModel,
    pub log: MetricsLog,
    pub divergence: Option<Divergence>,
    /// Eigendecomposition/square-root calls made inside optimisation steps.
    pub train_eig_calls: u64,
    /// Wall time of every step, in milliseconds.
    pub step_times_ms: Vec<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    /// Turns a recorded divergence into `Error::NonFinite`.
    pub fn check(&self) -> Result<()> {
        match self.divergence {
            Some(d) => Err(d.into()),
            None => Ok(()),
        }
    }
}

/// Supervision rows for the label-based losses.
pub enum Labels<'a> {
    None,
    Given(&'a Supervision),
}

/// Runs `spec.epochs` epochs of AdamW on `ds`.
///
/// A non-finite loss stops the run; the outcome then carries the partial log
/// and `divergence` is set.
pub fn train(
    ds: &RegressionDataset,
    labels: Labels<'_>,
    spec: &TrainSpec,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if ds.input_dim() != spec.mean_arch.input_dim || ds.target_dim() != spec.target_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: (ds.input_dim(), ds.target_dim()),
            rhs: (spec.mean_arch.input_dim, spec.target_dim()),
        });
    }
    let labels = match labels {
        Labels::Given(s) => {
            if s.len() != ds.len() || s.n != ds.target_dim() {
                return Err(Error::ShapeMismatch {
                    op: "train_labels",
                    lhs: (s.len(), s.n),
                    rhs: (ds.len(), ds.target_dim()),
                });
            }
            Some(s)
        }
        Labels::None => None,
    };
    if spec.needs_labels() && labels.is_none() {
        return Err(Error::InvalidSpec(format!("{} needs covariance labels", spec.loss.label())));
    }
    let metrics_wanted = opts.eval.map(|e| {
        if e.ground_truth.is_some() {
            vec![Metric::Mse, Metric::Nll, Metric::Kl, Metric::W2]
        } else {
            vec![Metric::Mse, Metric::Nll]
        }
    });

    let mut model = spec.init_model()?;
    let mut opt = AdamW::new(spec.lr);
    let mut order = BatchOrder::new(ds.len(), spec.batch, spec.seed);
    let full = order.is_full_batch().then(|| Batch {
        x: ds.inputs.clone(),
        y: ds.targets.clone(),
        labels: labels.cloned(),
    });
    let warm = spec.schedule.mean_only_epochs(spec.epochs);
    let mut log = MetricsLog::default();
    let mut step_times = Vec::new();
    let mut eig_calls = 0;
    let mut current = spec.loss;
    let mut steps = 0;

    for epoch in 1..=spec.epochs {
        if let Schedule::Hybrid { switch_epoch, then } = spec.schedule {
            if epoch == switch_epoch + 1 {
                let calib: Vec<usize> = (0..ds.len().min(256)).collect();
                model.convert_to_cholesky(&gather_rows(&ds.inputs, &calib))?;
                current = then;
            }
        }
        let mean_only = epoch <= warm;
        let mut epoch_ms = 0.0;
        let mut epoch_peak = 0u64;
        let mut epoch_steps = 0usize;
        let chunks: Vec<Vec<usize>> = order.next_epoch().map(<[usize]>::to_vec).collect();
        for (step, idx) in chunks.iter().enumerate() {
            let owned;
            let batch = match &full {
                Some(b) => b,
                None => {
                    owned = Batch {
                        x: gather_rows(&ds.inputs, idx),
                        y: gather_rows(&ds.targets, idx),
                        labels: labels.map(|s| s.gather(idx)),
                    };
                    &owned
                }
            };
            if let Some(p) = opts.probe.as_deref_mut() {
                p.begin();
            }
            let eig_before = eig_call_count();
            let t0 = Instant::now();
            let value = training_step(&mut model, &mut opt, (!mean_only).then_some(current), batch)?;
            if value.is_none() {
                if let Some(p) = opts.probe.as_deref_mut() {
                    p.end();
                }
                return Ok(TrainOutcome {
                    model,
                    log,
                    divergence: Some(Divergence { epoch, step }),
                    train_eig_calls: eig_calls,
                    step_times_ms: step_times,
                    steps,
                });
            }
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            eig_calls += eig_call_count() - eig_before;
            if let Some(p) = opts.probe.as_deref_mut() {
                epoch_peak = epoch_peak.max(p.end());
            }
            step_times.push(ms);
            epoch_ms += ms;
            epoch_steps += 1;
            steps += 1;
        }
        if let (Some(eval), Some(wanted)) = (opts.eval, &metrics_wanted) {
            let e = evaluate(&model, eval, wanted)?;
            log.records.push(MetricsRecord {
                epoch,
                loss_kind: spec.loss.label(),
                schedule: spec.schedule.label(),
                mse: e.mse,
                nll: e.nll,
                kl: e.kl.unwrap_or(f64::NAN),
                w2: e.w2.unwrap_or(f64::NAN),
                step_time_ms: if opts.record_timing {
                    epoch_ms / epoch_steps.max(1) as f64
                } else {
                    0.0
                },
                peak_bytes: epoch_peak,
            });
        }
        if let Some(f) = opts.on_epoch.as_deref_mut() {
            f(epoch, &model)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        divergence: None,
        train_eig_calls: eig_calls,
        step_times_ms: step_times,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Nll,
    /// KL(ground truth ‖ prediction)
    Kl,
    W2,
}

impl Metric {
    fn needs_ground_truth(self) -> bool {
        matches!(self, Metric::Kl | Metric::W2)
    }
}

/// Dataset-averaged metrics; unrequested ones are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub nll: f64,
    pub kl: Option<f64>,
    pub w2: Option<f64>,
}

/// Averages over `ds` of the requested metrics. Runs outside any training
/// graph and may use eigendecompositions.
pub fn evaluate(model: &HeteroscedasticModel, ds: &RegressionDataset, metrics: &[Metric]) -> Result<Evaluation> {
    let gt = match (&ds.ground_truth, metrics.iter().find(|m| m.needs_ground_truth())) {
        (None, Some(_)) => return Err(Error::MissingGroundTruth("kl/w2 evaluation")),
        (gt, _) => gt.as_deref(),
    };
    let preds = model.predict(&ds.inputs)?;
    evaluate_predictions(&preds, &ds.targets, gt, metrics)
}

/// [`evaluate`] on precomputed predictions.
pub fn evaluate_predictions(
    preds: &[Gaussian],
    targets: &Matrix,
    gt: Option<&[Gaussian]>,
    metrics: &[Metric],
) -> Result<Evaluation> {
    let n = preds.len().max(1) as f64;
    let mut out = Evaluation::default();
    for (r, p) in preds.iter().enumerate() {
        let y = targets.row(r);
        if metrics.contains(&Metric::Mse) {
            out.mse += y.iter().zip(&p.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        }
        if metrics.contains(&Metric::Nll) {
            out.nll += gaussian_nll(y, p)? / n;
        }
        if metrics.contains(&Metric::Kl) || metrics.contains(&Metric::W2) {
            let g = &gt.ok_or(Error::MissingGroundTruth("kl/w2 evaluation"))?[r];
            if metrics.contains(&Metric::Kl) {
                *out.kl.get_or_insert(0.0) += kl_divergence(g, p)? / n;
            }
            if metrics.contains(&Metric::W2) {
                *out.w2.get_or_insert(0.0) += w2_exact(g, p)? / n;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics log

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_kind: String,
    pub schedule: String,
    pub mse: f64,
    pub nll: f64,
    pub kl: f64,
    pub w2: f64,
    pub step_time_ms: f64,
    pub peak_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "loss_kind",
    "schedule",
    "mse",
    "nll",
    "kl",
    "w2",
    "step_time_ms",
    "peak_bytes",
];

/// Shortest text that parses back to the same `f64` (`NaN` for missing values).
pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = METRICS_HEADER.join(",");
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss_kind,
                r.schedule,
                fmt_f64(r.mse),
                fmt_f64(r.nll),
                fmt_f64(r.kl),
                fmt_f64(r.w2),
                fmt_f64(r.step_time_ms),
                r.peak_bytes
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse_err = |row: usize, col: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            col,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(1, 1, e.to_string()))?;
        let header = rdr.headers().map_err(|e| parse_err(1, 1, e.to_string()))?.clone();
        if header.iter().ne(METRICS_HEADER) {
            return Err(parse_err(1, 1, format!("expected header {}", METRICS_HEADER.join(","))));
        }
        let mut records = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, 1, e.to_string()))?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse()
                    .map_err(|_| parse_err(line, c + 1, format!("not a number: {:?}", &rec[c])))
            };
            let int = |c: usize| -> Result<u64> {
                rec[c]
                    .parse()
                    .map_err(|_| parse_err(line, c + 1, format!("not an integer: {:?}", &rec[c])))
            };
            records.push(MetricsRecord {
                epoch: int(0)? as usize,
                loss_kind: rec[1].to_string(),
                schedule: rec[2].to_string(),
                mse: num(3)?,
                nll: num(4)?,
                kl: num(5)?,
                w2: num(6)?,
                step_time_ms: num(7)?,
                peak_bytes: int(8)?,
            });
        }
        Ok(MetricsLog { records })
    }
}

// ---------------------------------------------------------------------------
// Bivariate fitting

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub mean: [f64; 2],
    /// `c00, c01, c11`
    pub cov: [f64; 3],
    pub kl: f64,
    pub w2: f64,
}

pub const TRAJECTORY_HEADER: [&str; 8] = ["step", "mu0", "mu1", "c00", "c01", "c11", "metric_kl", "metric_w2"];

pub fn trajectory_csv_string(points: &[TrajectoryPoint]) -> String {
    let mut s = TRAJECTORY_HEADER.join(",");
    s.push('\n');
    for p in points {
        let vals = [p.mean[0], p.mean[1], p.cov[0], p.cov[1], p.cov[2], p.kl, p.w2];
        s.push_str(&p.step.to_string());
        for v in vals {
            s.push(',');
            s.push_str(&fmt_f64(v));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct BivariateFit {
    /// Step 0 is the initial distribution.
    pub trajectory: Vec<TrajectoryPoint>,
    pub log: MetricsLog,
    pub divergence: Option<Divergence>,
    pub train_eig_calls: u64,
}

impl BivariateFit {
    pub fn final_point(&self) -> &TrajectoryPoint {
        self.trajectory.last().expect("trajectory holds the initial point")
    }

    /// First step whose exact W2 to the target is at most `tol`.
    pub fn first_step_within(&self, tol: f64) -> Option<usize> {
        self.trajectory.iter().find(|p| p.w2 <= tol).map(|p| p.step)
    }
}

/// Spec for fitting a single bivariate Gaussian: input-free (a constant zero
/// feature), so the networks reduce to their output biases.
pub fn bivariate_spec(loss: LossKind, lr: f64, steps: usize, seed: u64) -> TrainSpec {
    let template = MlpConfig {
        input_dim: 1,
        output_dim: 2,
        hidden_layers: 0,
        hidden_width: 0,
        activation: Activation::Tanh,
    };
    TrainSpec {
        lr,
        epochs: steps,
        batch: 0,
        seed,
        ..TrainSpec::new(loss, template, 2)
    }
}

fn distribution_point(step: usize, g: &Gaussian, target: &Gaussian) -> Result<TrajectoryPoint> {
    let c = g.cov.matrix();
    Ok(TrajectoryPoint {
        step,
        mean: [g.mean[0], g.mean[1]],
        cov: [c[(0, 0)], c[(0, 1)], c[(1, 1)]],
        kl: kl_divergence(target, g)?,
        w2: w2_exact(target, g)?,
    })
}

/// Full-batch fit of `problem.target` from `samples` drawn from it, starting
/// at `problem.init`. Label-based losses are supervised with the target
/// covariance. One step per epoch; every step is recorded.
pub fn fit_bivariate(
    problem: &BivariateProblem,
    samples: &Matrix,
    loss: LossKind,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<BivariateFit> {
    let spec = bivariate_spec(loss, lr, steps, seed);
    let n = samples.rows();
    let ds = RegressionDataset::new(Matrix::zeros(n, 1), samples.clone())?;
    let sup = if spec.needs_labels() {
        let root = Supervision::from_ground_truth(std::slice::from_ref(&problem.target))?;
        Some(root.gather(&vec![0; n]))
    } else {
        None
    };
    let probe_x = Matrix::zeros(1, 1);
    // every row gets the same prediction, so MSE and NLL follow from the
    // sample mean and second moment
    let inv_n = 1.0 / n.max(1) as f64;
    let ybar: Vec<f64> = (0..2).map(|j| (0..n).map(|r| samples[(r, j)]).sum::<f64>() * inv_n).collect();
    let mut second: Matrix = Matrix::zeros(2, 2);
    for r in 0..n {
        for i in 0..2 {
            for j in 0..2 {
                second[(i, j)] += samples[(r, i)] * samples[(r, j)] * inv_n;
            }
        }
    }
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut log = MetricsLog::default();

    // initial state: the model's bias is moved onto the init distribution
    let mut record = |step: usize, model: &HeteroscedasticModel| -> Result<()> {
        let g = model.predict(&probe_x)?.remove(0);
        trajectory.push(distribution_point(step, &g, &problem.target)?);
        if step > 0 {
            let mu = &g.mean;
            let mut resid = second.clone();
            for i in 0..2 {
                for j in 0..2 {
                    resid[(i, j)] += mu[i] * mu[j] - ybar[i] * mu[j] - mu[i] * ybar[j];
                }
            }
            let mse = resid[(0, 0)] + resid[(1, 1)];
            let prec = crate::linalg::spd_inverse(&g.cov)?;
            let quad: f64 = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| prec.matrix()[(i, j)] * resid[(i, j)])
                .sum();
            let nll = g.cov.log_det()? + quad;
            let last = trajectory.last().expect("just pushed");
            log.records.push(MetricsRecord {
                epoch: step,
                loss_kind: loss.label(),
                schedule: Schedule::Standard.label(),
                mse,
                nll,
                kl: last.kl,
                w2: last.w2,
                step_time_ms: 0.0,
                peak_bytes: 0,
            });
        }
        Ok(())
    };
    let outcome = train_bivariate(&ds, sup.as_ref(), &spec, problem, &mut record)?;
    Ok(BivariateFit {
        trajectory,
        log,
        divergence: outcome.divergence,
        train_eig_calls: outcome.train_eig_calls,
    })
}

fn train_bivariate(
    ds: &RegressionDataset,
    sup: Option<&Supervision>,
    spec: &TrainSpec,
    problem: &BivariateProblem,
    record: &mut dyn FnMut(usize, &HeteroscedasticModel) -> Result<()>,
) -> Result<TrainOutcome> {
    // same step as `train`, but the model starts at the init distribution
    spec.validate()?;
    let mut model = spec.init_model()?;
    place_at(&mut model, &problem.init)?;
    record(0, &model)?;
    let batch = Batch {
        x: ds.inputs.clone(),
        y: ds.targets.clone(),
        labels: sup.cloned(),
    };
    let mut opt = AdamW::new(spec.lr);
    let mut eig_calls = 0;
    for step in 1..=spec.epochs {
        let before = eig_call_count();
        if training_step(&mut model, &mut opt, Some(spec.loss), &batch)?.is_none() {
            return Ok(TrainOutcome {
                model,
                log: MetricsLog::default(),
                divergence: Some(Divergence { epoch: step, step: 0 }),
                train_eig_calls: eig_calls,
                step_times_ms: Vec::new(),
                steps: step - 1,
            });
        }
        eig_calls += eig_call_count() - before;
        record(step, &model)?;
    }
    Ok(TrainOutcome {
        model,
        log: MetricsLog::default(),
        divergence: None,
        train_eig_calls: eig_calls,
        step_times_ms: Vec::new(),
        steps: spec.epochs,
    })
}

/// Sets the output biases of an input-free model so it predicts `g` exactly
/// (weights are zeroed).
fn place_at(model: &mut HeteroscedasticModel, g: &Gaussian) -> Result<()> {
    let n = model.target_dim;
    let (mw, mb) = model.mean.final_layer();
    let (cw, cb) = model.cov.final_layer();
    for w in [mw, cw] {
        model.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    *model.store.get_mut(mb) = Matrix::new(1, n, g.mean.clone())?;
    let raw = match model.head {
        CovHeadKind::SymSqrt => crate::linalg::spd_sqrt(&g.cov)?.matrix().data().to_vec(),
        CovHeadKind::CholeskyFull => {
            let l = crate::linalg::cholesky(&g.cov)?;
            let mut v = vec![0.0; model.head.raw_dim(n)];
            for r in 0..n {
                for c in 0..r {
                    v[r * (r + 1) / 2 + c] = l[(r, c)];
                }
                v[r * (r + 1) / 2 + r] = crate::autodiff::softplus_floor_inverse(l[(r, r)]);
            }
            v
        }
        CovHeadKind::Diagonal => {
            let c = g.cov.matrix();
            (0..n).map(|i| crate::autodiff::softplus_floor_inverse(c[(i, i)])).collect()
        }
    };
    *model.store.get_mut(cb) = Matrix::new(1, raw.len(), raw)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_bivariate_p1, gen_multivariate, gen_sinusoid};
    use crate::linalg::SpdMatrix;
    use crate::pseudolabel::pseudo_labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_template(input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            output_dim: 1,
            hidden_layers: 2,
            hidden_width: 8,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn schedule_labels_round_trip() {
        for s in [
            Schedule::Standard,
            Schedule::warmup(),
            Schedule::Warmup { mean_only_fraction: 0.25 },
            Schedule::Hybrid {
                switch_epoch: 3,
                then: LossKind::NllFull,
            },
        ] {
            assert_eq!(s.label().parse::<Schedule>().unwrap(), s);
            assert!(!s.label().contains(','));
        }
        assert!("cosine".parse::<Schedule>().is_err());
        assert!("warmup:x".parse::<Schedule>().is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::Warmup { mean_only_fraction: 1.0 }.validate(LossKind::NllFull, 10).is_err());
        assert!(Schedule::Warmup { mean_only_fraction: 0.0 }.validate(LossKind::NllFull, 10).is_err());
        let h = Schedule::Hybrid {
            switch_epoch: 10,
            then: LossKind::NllFull,
        };
        assert!(h.validate(LossKind::W2Bound, 10).is_err());
        assert!(h.validate(LossKind::W2Bound, 11).is_ok());
        assert!(h.validate(LossKind::NllFull, 11).is_err());
        let to_diag = Schedule::Hybrid {
            switch_epoch: 1,
            then: LossKind::NllDiag,
        };
        assert!(to_diag.validate(LossKind::W2Bound, 5).is_err());
    }

    #[test]
    fn spec_rejects_head_mismatch() {
        let mut spec = TrainSpec::new(LossKind::W2Bound, small_template(1), 2);
        spec.validate().unwrap();
        assert_eq!(spec.cov_arch.output_dim, 4);
        spec.cov_arch.output_dim = 3;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        assert_eq!(TrainSpec::new(LossKind::NllDiag, small_template(1), 3).cov_arch.output_dim, 3);
        assert_eq!(TrainSpec::new(LossKind::NllFull, small_template(1), 3).cov_arch.output_dim, 6);
        assert_eq!(spec.pseudo_k(), 20);
    }

    #[test]
    fn batch_order_depends_only_on_seed() {
        let mut a = BatchOrder::new(10, 3, 7);
        let mut b = BatchOrder::new(10, 3, 7);
        for _ in 0..3 {
            let ea: Vec<Vec<usize>> = a.next_epoch().map(<[usize]>::to_vec).collect();
            let eb: Vec<Vec<usize>> = b.next_epoch().map(<[usize]>::to_vec).collect();
            assert_eq!(ea, eb);
            assert_eq!(ea.len(), 4);
            let mut all: Vec<usize> = ea.concat();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        let mut c = BatchOrder::new(10, 3, 8);
        let first_a: Vec<usize> = BatchOrder::new(10, 3, 7).next_epoch().flatten().copied().collect();
        let first_c: Vec<usize> = c.next_epoch().flatten().copied().collect();
        assert_ne!(first_a, first_c);
        assert!(BatchOrder::new(5, 0, 1).is_full_batch());
    }

    #[test]
    fn evaluate_perfect_and_identity_predictors() {
        let gt = Gaussian::new(vec![0.0, 0.0], SpdMatrix::from_diag(&[2.0, 2.0]).unwrap()).unwrap();
        let ident = Gaussian::standard(2);
        let y = Matrix::zeros(3, 2);
        let all = [Metric::Mse, Metric::Nll, Metric::Kl, Metric::W2];
        let e = evaluate_predictions(&vec![gt.clone(); 3], &y, Some(&vec![gt.clone(); 3]), &all).unwrap();
        assert_eq!(e.mse, 0.0);
        assert!(e.kl.unwrap().abs() < 1e-12 && e.w2.unwrap().abs() < 1e-12);
        let e = evaluate_predictions(&vec![ident; 3], &y, Some(&vec![gt; 3]), &all).unwrap();
        assert!((e.kl.unwrap() - (1.0 - 2f64.ln())).abs() < 1e-12);
        // W2 between N(0, 2I) and N(0, I): 2 (√2 − 1)²
        assert!((e.w2.unwrap() - 2.0 * (2f64.sqrt() - 1.0).powi(2)).abs() < 1e-10);
        assert!(matches!(
            evaluate_predictions(&[Gaussian::standard(2)], &Matrix::zeros(1, 2), None, &all),
            Err(Error::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn evaluate_matches_per_sample_oracles() {
        let ds = gen_multivariate(2, 30, 4).unwrap();
        let spec = TrainSpec::new(LossKind::NllFull, small_template(2), 2);
        let model = spec.init_model().unwrap();
        let e = evaluate(&model, &ds, &[Metric::Mse, Metric::Nll, Metric::Kl, Metric::W2]).unwrap();
        let preds = model.predict(&ds.inputs).unwrap();
        let gt = ds.ground_truth.as_ref().unwrap();
        let (mut nll, mut kl) = (0.0, 0.0);
        for (i, p) in preds.iter().enumerate() {
            nll += gaussian_nll(ds.targets.row(i), p).unwrap();
            kl += kl_divergence(&gt[i], p).unwrap();
        }
        assert!((e.nll - nll / 30.0).abs() < 1e-12);
        assert!((e.kl.unwrap() - kl / 30.0).abs() < 1e-12);
        let no_gt = RegressionDataset::new(ds.inputs.clone(), ds.targets.clone()).unwrap();
        assert!(matches!(evaluate(&model, &no_gt, &[Metric::Kl]), Err(Error::MissingGroundTruth(_))));
        assert!(evaluate(&model, &no_gt, &[Metric::Mse]).is_ok());
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let ds = gen_sinusoid(1, 50, 1).unwrap();
        let mut spec = TrainSpec::new(LossKind::NllFull, small_template(1), 1);
        spec.epochs = 0;
        let out = train(&ds, Labels::None, &spec, TrainOptions { eval: Some(&ds), ..Default::default() }).unwrap();
        let fresh = spec.init_model().unwrap();
        for id in fresh.store.ids() {
            assert_eq!(fresh.store.get(id), out.model.store.get(id));
        }
        assert!(out.log.records.is_empty());
        assert_eq!(out.log.to_csv_string(), METRICS_HEADER.join(",") + "\n");
    }

    #[test]
    fn label_losses_require_labels() {
        let ds = gen_sinusoid(1, 20, 1).unwrap();
        let spec = TrainSpec::new(LossKind::W2Bound, small_template(1), 1);
        assert!(train(&ds, Labels::None, &spec, TrainOptions::default()).is_err());
    }

    #[test]
    fn reruns_are_identical_and_csv_round_trips() {
        let ds = gen_sinusoid(1, 200, 3).unwrap();
        let labels = Supervision::from_pseudo_labels(&pseudo_labels(&ds, 10).unwrap()).unwrap();
        let mut spec = TrainSpec::new(LossKind::W2Bound, small_template(1), 1);
        spec.epochs = 3;
        spec.batch = 32;
        let run = || {
            train(&ds, Labels::Given(&labels), &spec, TrainOptions { eval: Some(&ds), ..Default::default() }).unwrap()
        };
        let (a, b) = (run(), run());
        let csv = a.log.to_csv_string();
        assert_eq!(csv, b.log.to_csv_string());
        assert_eq!(a.log.records.len(), 3);
        assert_eq!(a.steps, 3 * 7);
        assert_eq!(a.train_eig_calls, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        a.log.write_csv(&p).unwrap();
        let back = MetricsLog::read_csv(&p).unwrap();
        assert_eq!(back.to_csv_string(), csv);
        for (x, y) in back.records.iter().zip(&a.log.records) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
            assert_eq!(x.kl.to_bits(), y.kl.to_bits());
        }
    }

    #[test]
    fn metrics_reader_reports_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{}\n1,nll_full,standard,0.5,x,NaN,NaN,0,0\n", METRICS_HEADER.join(","))).unwrap();
        match MetricsLog::read_csv(&p) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_reduces_nll() {
        let ds = gen_sinusoid(1, 400, 5).unwrap();
        let mut spec = TrainSpec::new(LossKind::NllFull, small_template(1), 1);
        spec.epochs = 20;
        spec.lr = 1e-2;
        let out = train(&ds, Labels::None, &spec, TrainOptions { eval: Some(&ds), ..Default::default() }).unwrap();
        out.check().unwrap();
        let first = out.log.records[0].nll;
        assert!(out.log.last().unwrap().nll < first, "{first} -> {}", out.log.last().unwrap().nll);
    }

    #[test]
    fn warmup_freezes_covariance_network_first() {
        let ds = gen_sinusoid(1, 100, 2).unwrap();
        let mut spec = TrainSpec::new(LossKind::NllFull, small_template(1), 1);
        spec.epochs = 2;
        spec.schedule = Schedule::warmup();
        let fresh = spec.init_model().unwrap();
        let mut snapshots = Vec::new();
        let mut hook = |_: usize, m: &HeteroscedasticModel| -> Result<()> {
            snapshots.push(m.cov.params().map(|id| m.store.get(id).clone()).collect::<Vec<_>>());
            Ok(())
        };
        train(&ds, Labels::None, &spec, TrainOptions { on_epoch: Some(&mut hook), ..Default::default() }).unwrap();
        let init: Vec<Matrix> = fresh.cov.params().map(|id| fresh.store.get(id).clone()).collect();
        assert_eq!(snapshots[0], init);
        assert_ne!(snapshots[1], init);
    }

    #[test]
    fn hybrid_switches_head() {
        let ds = gen_multivariate(2, 120, 1).unwrap();
        let labels = Supervision::from_ground_truth(ds.ground_truth.as_ref().unwrap()).unwrap();
        let mut spec = TrainSpec::new(LossKind::W2Bound, small_template(2), 2);
        spec.epochs = 4;
        spec.schedule = Schedule::Hybrid {
            switch_epoch: 2,
            then: LossKind::NllFull,
        };
        let mut heads = Vec::new();
        let mut hook = |_: usize, m: &HeteroscedasticModel| -> Result<()> {
            heads.push(m.head);
            Ok(())
        };
        let out = train(
            &ds,
            Labels::Given(&labels),
            &spec,
            TrainOptions {
                eval: Some(&ds),
                on_epoch: Some(&mut hook),
                ..Default::default()
            },
        )
        .unwrap();
        out.check().unwrap();
        use CovHeadKind::*;
        assert_eq!(heads, vec![SymSqrt, SymSqrt, CholeskyFull, CholeskyFull]);
        assert!(out.log.records.iter().all(|r| r.schedule == "hybrid:2:nll_full"));
    }

    #[test]
    fn divergence_is_recorded_with_partial_log() {
        let ds = gen_sinusoid(1, 64, 2).unwrap();
        // one target far enough out that its squared residual overflows
        let mut y = ds.targets.clone();
        y[(40, 0)] = 1e200;
        let bad = RegressionDataset::new(ds.inputs.clone(), y).unwrap();
        let mut spec = TrainSpec::new(LossKind::NllFull, small_template(1), 1);
        spec.epochs = 5;
        spec.batch = 16;
        let out = train(&bad, Labels::None, &spec, TrainOptions { eval: Some(&ds), ..Default::default() }).unwrap();
        let d = out.divergence.expect("overflowing residual");
        assert_eq!(d.epoch, 1);
        assert!(matches!(out.check(), Err(Error::NonFinite { epoch: 1, .. })));
        assert!(out.log.records.is_empty());
        assert_eq!(out.steps, d.step);
    }

    #[test]
    fn bivariate_w2_bound_converges() {
        let p = gen_bivariate_p1(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = p.sample(1000, &mut rng);
        let fit = fit_bivariate(&p, &samples, LossKind::W2Bound, 1e-2, 3000, 3).unwrap();
        assert!(fit.divergence.is_none());
        assert_eq!(fit.trajectory.len(), 3001);
        assert_eq!(fit.trajectory[0].mean, [p.init.mean[0], p.init.mean[1]]);
        assert!((fit.trajectory[0].cov[0] - 1.0).abs() < 1e-12);
        assert!(fit.final_point().w2 < 0.05, "{:?}", fit.final_point());
        assert_eq!(fit.train_eig_calls, 0);
        let last = fit.final_point();
        let g = Gaussian::new(
            last.mean.to_vec(),
            SpdMatrix::new(Matrix::from_rows(&[&[last.cov[0], last.cov[1]], &[last.cov[1], last.cov[2]]])).unwrap(),
        )
        .unwrap();
        let direct = evaluate_predictions(&vec![g; 1000], &samples, None, &[Metric::Mse, Metric::Nll]).unwrap();
        let rec = fit.log.last().unwrap();
        assert!((rec.mse - direct.mse).abs() < 1e-9 * (1.0 + direct.mse));
        assert!((rec.nll - direct.nll).abs() < 1e-9 * (1.0 + direct.nll.abs()));
        let csv = trajectory_csv_string(&fit.trajectory);
        assert!(csv.starts_with("step,mu0,mu1,c00,c01,c11,metric_kl,metric_w2\n0,"));
    }
}
