//! Training objectives for mean/covariance estimation, assembled on the tape.
//!
//! Every loss is the batch mean of a per-sample term. Labels needed by the
//! KL and Wasserstein objectives (prior factors, label square roots) are
//! precomputed into a [`Supervision`] so no eigendecomposition happens while
//! training.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{cholesky_matrix, log_det_from_cholesky, ridge_floor, spd_sqrt, Matrix, SpdMatrix};
use crate::mlp::{CovHeadKind, HeteroscedasticModel};
use crate::pseudolabel::PseudoLabelSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    NllFull,
    NllDiag,
    BetaNll(f64),
    Faithful,
    KlCalibrated,
    W2Bound,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::NllFull => "nll_full",
            LossKind::NllDiag => "nll_diag",
            LossKind::BetaNll(_) => "beta_nll",
            LossKind::Faithful => "faithful",
            LossKind::KlCalibrated => "kl_calibrated",
            LossKind::W2Bound => "w2_bound",
        }
    }

    /// Name including the β parameter where there is one, e.g. `beta_nll_0.5`.
    pub fn label(self) -> String {
        match self {
            LossKind::BetaNll(b) => format!("beta_nll_{b}"),
            k => k.name().to_string(),
        }
    }

    pub fn head(self) -> CovHeadKind {
        match self {
            LossKind::W2Bound => CovHeadKind::SymSqrt,
            LossKind::NllDiag | LossKind::BetaNll(_) => CovHeadKind::Diagonal,
            _ => CovHeadKind::CholeskyFull,
        }
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, LossKind::KlCalibrated | LossKind::W2Bound)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            LossKind::BetaNll(b) if !(0.0..=1.0).contains(&b) => {
                Err(Error::InvalidSpec(format!("beta must lie in [0, 1], got {b}")))
            }
            _ => Ok(()),
        }
    }

    /// One representative of each family (β = 0.5).
    pub fn all() -> [LossKind; 6] {
        [
            LossKind::NllFull,
            LossKind::NllDiag,
            LossKind::BetaNll(0.5),
            LossKind::Faithful,
            LossKind::KlCalibrated,
            LossKind::W2Bound,
        ]
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    /// Accepts the names of [`LossKind::name`]; β-NLL as `beta_nll` (β = 0.5)
    /// or `beta_nll_<β>`.
    fn from_str(s: &str) -> Result<Self> {
        let k = match s {
            "nll_full" | "nll" => LossKind::NllFull,
            "nll_diag" => LossKind::NllDiag,
            "beta_nll" => LossKind::BetaNll(0.5),
            "faithful" => LossKind::Faithful,
            "kl_calibrated" | "kl" => LossKind::KlCalibrated,
            "w2_bound" | "w2" => LossKind::W2Bound,
            other => match other.strip_prefix("beta_nll_").map(str::parse::<f64>) {
                Some(Ok(b)) => LossKind::BetaNll(b),
                _ => return Err(Error::InvalidSpec(format!("unknown loss {other:?}"))),
            },
        };
        k.validate()?;
        Ok(k)
    }
}

/// Per-sample covariance supervision: label square roots for the Wasserstein
/// bound and prior Cholesky factors (with log-determinants) for the KL terms.
/// Each row holds one `n×n` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub n: usize,
    pub sqrt: Matrix,
    pub prior_chol: Matrix,
    pub prior_logdet: Vec<f64>,
    /// Priors that needed a ridge before they could be factored.
    pub ridged: usize,
}

impl Supervision {
    fn build<'a>(n: usize, rows: impl Iterator<Item = (&'a SpdMatrix, SpdMatrix)>) -> Result<Self> {
        let mut sqrt = Vec::new();
        let mut chol = Vec::new();
        let mut logdet = Vec::new();
        let mut ridged = 0;
        let mut count = 0;
        for (cov, root) in rows {
            if cov.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: cov.dim(),
                });
            }
            let l = match cholesky_matrix(cov.matrix()) {
                Ok(l) => l,
                Err(_) => {
                    ridged += 1;
                    let ridge = ridge_floor(cov.matrix()).max(1e-9);
                    cholesky_matrix(cov.with_ridge(ridge).matrix())?
                }
            };
            logdet.push(log_det_from_cholesky(&l));
            chol.extend_from_slice(l.data());
            sqrt.extend_from_slice(root.matrix().data());
            count += 1;
        }
        Ok(Supervision {
            n,
            sqrt: Matrix::new(count, n * n, sqrt)?,
            prior_chol: Matrix::new(count, n * n, chol)?,
            prior_logdet: logdet,
            ridged,
        })
    }

    pub fn from_pseudo_labels(pl: &PseudoLabelSet) -> Result<Self> {
        let n = pl.labels.first().map_or(0, |l| l.cov.dim());
        Self::build(n, pl.labels.iter().map(|l| (&l.cov, l.sqrt_cov.clone())))
    }

    /// Uses the true covariances; their square roots are computed here, once.
    pub fn from_ground_truth(gt: &[Gaussian]) -> Result<Self> {
        let n = gt.first().map_or(0, |g| g.dim());
        let roots = gt.iter().map(|g| spd_sqrt(&g.cov)).collect::<Result<Vec<_>>>()?;
        Self::build(n, gt.iter().map(|g| &g.cov).zip(roots))
    }

    pub fn len(&self) -> usize {
        self.prior_logdet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_logdet.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Supervision {
        Supervision {
            n: self.n,
            sqrt: gather_rows(&self.sqrt, idx),
            prior_chol: gather_rows(&self.prior_chol, idx),
            prior_logdet: idx.iter().map(|&i| self.prior_logdet[i]).collect(),
            ridged: 0,
        }
    }
}

pub fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec_unchecked(idx.len(), m.cols(), data)
}

/// One minibatch: inputs, targets and (for label-based losses) supervision rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
    pub labels: Option<Supervision>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    fn labels(&self, what: &'static str) -> Result<&Supervision> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec(format!("{what} needs covariance labels")))
    }
}

struct Heads {
    mu: Var,
    y: Var,
    n: usize,
    inv_batch: f64,
}

fn check_head(model: &HeteroscedasticModel, want: CovHeadKind, loss: &'static str) -> Result<()> {
    if model.head != want {
        return Err(Error::InvalidSpec(format!(
            "{loss} needs a {} head, model has {}",
            want.name(),
            model.head.name()
        )));
    }
    Ok(())
}

fn mean_part(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<(Heads, Var)> {
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let mu = model.mean.forward(tape, x)?;
    let heads = Heads {
        mu,
        y,
        n: model.target_dim,
        inv_batch: 1.0 / batch.len().max(1) as f64,
    };
    Ok((heads, x))
}

fn finish(tape: &mut Tape<'_>, per_sample: Var, inv_batch: f64) -> Var {
    let s = tape.sum(per_sample);
    tape.scale(s, inv_batch)
}

/// `log|LLᵀ| + ‖L⁻¹ r‖²` per row.
fn chol_nll_terms(tape: &mut Tape<'_>, l: Var, r: Var, n: usize) -> Result<Var> {
    let q = tape.inv_quad(l, r, n, 1)?;
    let ld = tape.logdet_chol(l, n)?;
    tape.add(q, ld)
}

/// Mean squared residual norm only; used while a schedule trains the mean alone.
pub fn loss_mse(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    let (h, _) = mean_part(tape, model, batch)?;
    let r = tape.sub(h.y, h.mu)?;
    let sq = tape.frobenius_sq(r);
    Ok(tape.scale(sq, h.inv_batch))
}

/// Full-covariance negative log-likelihood (constants dropped).
pub fn loss_nll_full(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    check_head(model, CovHeadKind::CholeskyFull, "nll_full")?;
    let (h, x) = mean_part(tape, model, batch)?;
    let raw = model.cov.forward(tape, x)?;
    let l = tape.tril_head(raw, h.n)?;
    let r = tape.sub(h.y, h.mu)?;
    let per = chol_nll_terms(tape, l, r, h.n)?;
    Ok(finish(tape, per, h.inv_batch))
}

fn diag_terms(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<(Var, Var, f64)> {
    let (h, x) = mean_part(tape, model, batch)?;
    let raw = model.cov.forward(tape, x)?;
    let var = CovHeadKind::Diagonal.apply(tape, raw, h.n)?;
    let r = tape.sub(h.y, h.mu)?;
    let r2 = tape.square(r);
    let ratio = tape.div(r2, var)?;
    let lv = tape.ln(var);
    let per_dim = tape.add(lv, ratio)?;
    Ok((per_dim, var, h.inv_batch))
}

/// Negative log-likelihood with independent per-dimension variances.
pub fn loss_nll_diag(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    check_head(model, CovHeadKind::Diagonal, "nll_diag")?;
    let (per_dim, _, inv) = diag_terms(tape, model, batch)?;
    Ok(finish(tape, per_dim, inv))
}

/// Per-dimension likelihood terms weighted by the detached factor `σ̂^{2β}`.
pub fn loss_beta_nll(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch, beta: f64) -> Result<Var> {
    check_head(model, CovHeadKind::Diagonal, "beta_nll")?;
    LossKind::BetaNll(beta).validate()?;
    let (per_dim, var, inv) = diag_terms(tape, model, batch)?;
    let w = tape.powf(var, beta);
    let w = tape.stop_gradient(w);
    let weighted = tape.mul(per_dim, w)?;
    Ok(finish(tape, weighted, inv))
}

/// `‖y - μ̂‖²` plus the likelihood of the residual around a detached mean:
/// the mean network sees exactly the squared-error gradient.
pub fn loss_faithful(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    check_head(model, CovHeadKind::CholeskyFull, "faithful")?;
    let (h, x) = mean_part(tape, model, batch)?;
    let raw = model.cov.forward(tape, x)?;
    let l = tape.tril_head(raw, h.n)?;
    let r = tape.sub(h.y, h.mu)?;
    let mse = tape.frobenius_sq(r);
    let mu_detached = tape.stop_gradient(h.mu);
    let r_detached = tape.sub(h.y, mu_detached)?;
    let nll = chol_nll_terms(tape, l, r_detached, h.n)?;
    let nll = tape.sum(nll);
    let total = tape.add(mse, nll)?;
    Ok(tape.scale(total, h.inv_batch))
}

/// `½[(Tr(Σ̂⁻¹P) + rᵀΣ̂⁻¹r)/2 - n + log|Σ̂| - log|P|]` with `P` the per-sample prior.
pub fn loss_kl_calibrated(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    check_head(model, CovHeadKind::CholeskyFull, "kl_calibrated")?;
    let labels = batch.labels("kl_calibrated")?;
    let (h, x) = mean_part(tape, model, batch)?;
    let raw = model.cov.forward(tape, x)?;
    let l = tape.tril_head(raw, h.n)?;
    let r = tape.sub(h.y, h.mu)?;
    let c = tape.constant(labels.prior_chol.clone());
    let tr = tape.inv_quad(l, c, h.n, h.n)?;
    let quad = tape.inv_quad(l, r, h.n, 1)?;
    let ld = tape.logdet_chol(l, h.n)?;
    let prior_ld = tape.constant(Matrix::new(labels.len(), 1, labels.prior_logdet.clone())?);

    let fit = tape.add(tr, quad)?;
    let fit = tape.scale(fit, 0.5);
    let t = tape.add(fit, ld)?;
    let t = tape.sub(t, prior_ld)?;
    let t = tape.add_scalar(t, -(h.n as f64));
    let per = tape.scale(t, 0.5);
    Ok(finish(tape, per, h.inv_batch))
}

/// `‖y - μ̂‖² + ‖Ŝ - Σ̃^½‖_F²`: covariance gradients never see the residual.
pub fn loss_w2_bound(tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    check_head(model, CovHeadKind::SymSqrt, "w2_bound")?;
    let labels = batch.labels("w2_bound")?;
    let (h, x) = mean_part(tape, model, batch)?;
    let raw = model.cov.forward(tape, x)?;
    let s = tape.sym_head(raw, h.n)?;
    let r = tape.sub(h.y, h.mu)?;
    let mean_term = tape.frobenius_sq(r);
    let target = tape.constant(labels.sqrt.clone());
    let d = tape.sub(s, target)?;
    let cov_term = tape.frobenius_sq(d);
    let total = tape.add(mean_term, cov_term)?;
    Ok(tape.scale(total, h.inv_batch))
}

pub fn build_loss(kind: LossKind, tape: &mut Tape<'_>, model: &HeteroscedasticModel, batch: &Batch) -> Result<Var> {
    match kind {
        LossKind::NllFull => loss_nll_full(tape, model, batch),
        LossKind::NllDiag => loss_nll_diag(tape, model, batch),
        LossKind::BetaNll(b) => loss_beta_nll(tape, model, batch, b),
        LossKind::Faithful => loss_faithful(tape, model, batch),
        LossKind::KlCalibrated => loss_kl_calibrated(tape, model, batch),
        LossKind::W2Bound => loss_w2_bound(tape, model, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, tests::randn, ParamId};
    use crate::gaussian::{calibrated_kl, gaussian_nll};
    use crate::linalg::eig_call_count;
    use crate::mlp::{Activation, MlpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(kind: LossKind, m: usize, n: usize, seed: u64) -> HeteroscedasticModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = |out| MlpConfig {
            input_dim: m,
            output_dim: out,
            hidden_layers: 1,
            hidden_width: 5,
            activation: Activation::Tanh,
        };
        HeteroscedasticModel::init(arch(n), arch(kind.head().raw_dim(n)), kind.head(), &mut rng).unwrap()
    }

    fn random_batch(rows: usize, m: usize, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let covs: Vec<Gaussian> = (0..rows)
            .map(|_| {
                let a = randn(n, n, &mut rng);
                let c = a.transpose().matmul(&a).unwrap().add(&Matrix::identity(n).scale(0.5)).unwrap();
                Gaussian::new(vec![0.0; n], SpdMatrix::new(c).unwrap()).unwrap()
            })
            .collect();
        Batch {
            x: randn(rows, m, &mut rng),
            y: randn(rows, n, &mut rng),
            labels: Some(Supervision::from_ground_truth(&covs).unwrap()),
        }
    }

    fn value(kind: LossKind, model: &HeteroscedasticModel, batch: &Batch) -> f64 {
        let mut t = Tape::new(&model.store);
        let v = build_loss(kind, &mut t, model, batch).unwrap();
        t.scalar(v)
    }

    fn grads(kind: LossKind, model: &HeteroscedasticModel, batch: &Batch) -> Vec<Option<Matrix>> {
        let mut t = Tape::new(&model.store);
        let v = build_loss(kind, &mut t, model, batch).unwrap();
        t.backward(v).unwrap().into_params()
    }

    #[test]
    fn nll_full_matches_closed_form() {
        let model = small_model(LossKind::NllFull, 2, 3, 1);
        let batch = random_batch(5, 2, 3, 2);
        let preds = model.predict(&batch.x).unwrap();
        let oracle: f64 = preds
            .iter()
            .enumerate()
            .map(|(r, g)| gaussian_nll(batch.y.row(r), g).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((value(LossKind::NllFull, &model, &batch) - oracle).abs() < 1e-10);
    }

    #[test]
    fn nll_diag_matches_closed_form() {
        let model = small_model(LossKind::NllDiag, 2, 3, 3);
        let batch = random_batch(4, 2, 3, 4);
        let preds = model.predict(&batch.x).unwrap();
        let oracle: f64 = preds
            .iter()
            .enumerate()
            .map(|(r, g)| gaussian_nll(batch.y.row(r), g).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((value(LossKind::NllDiag, &model, &batch) - oracle).abs() < 1e-10);
    }

    #[test]
    fn kl_calibrated_matches_closed_form() {
        let model = small_model(LossKind::KlCalibrated, 2, 3, 5);
        let batch = random_batch(4, 2, 3, 6);
        let preds = model.predict(&batch.x).unwrap();
        let labels = batch.labels.as_ref().unwrap();
        let oracle: f64 = (0..4)
            .map(|r| {
                let l = Matrix::new(3, 3, labels.prior_chol.row(r).to_vec()).unwrap();
                let prior = SpdMatrix::new(l.matmul(&l.transpose()).unwrap()).unwrap();
                calibrated_kl(batch.y.row(r), &prior, &preds[r]).unwrap()
            })
            .sum::<f64>()
            / 4.0;
        assert!((value(LossKind::KlCalibrated, &model, &batch) - oracle).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions() {
        // zero networks: μ̂ = 0 and identity covariance
        let n = 2;
        let mut batch = random_batch(3, 1, n, 7);
        batch.y = Matrix::zeros(3, n);
        for kind in [LossKind::NllFull, LossKind::W2Bound, LossKind::KlCalibrated] {
            let mut model = small_model(kind, 1, n, 8);
            for id in model.mean.params().chain(model.cov.params()).collect::<Vec<_>>() {
                if !model.store.name(id).starts_with("cov.b1") {
                    let z = model.store.get(id).map(|_| 0.0);
                    *model.store.get_mut(id) = z;
                }
            }
            let mut b = batch.clone();
            let eye = Gaussian::standard(n);
            b.labels = Some(Supervision::from_ground_truth(&[eye.clone(), eye.clone(), eye]).unwrap());
            let v = value(kind, &model, &b);
            let expected = if kind == LossKind::KlCalibrated { -(n as f64) / 4.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-10, "{kind:?}: {v}");
        }
    }

    #[test]
    fn beta_zero_is_nll_diag() {
        let model = small_model(LossKind::NllDiag, 2, 2, 9);
        let batch = random_batch(6, 2, 2, 10);
        assert_eq!(value(LossKind::BetaNll(0.0), &model, &batch), value(LossKind::NllDiag, &model, &batch));
        assert_eq!(grads(LossKind::BetaNll(0.0), &model, &batch), grads(LossKind::NllDiag, &model, &batch));
    }

    #[test]
    fn beta_half_matches_manual_composition() {
        let model = small_model(LossKind::NllDiag, 2, 2, 11);
        let batch = random_batch(3, 2, 2, 12);
        let (mu, raw) = model.predict_raw(&batch.x).unwrap();
        let mut manual = 0.0;
        for r in 0..3 {
            for d in 0..2 {
                let v = crate::autodiff::softplus(raw[(r, d)]) + 1e-6;
                let res = batch.y[(r, d)] - mu[(r, d)];
                manual += (v.ln() + res * res / v) * v.sqrt();
            }
        }
        assert!((value(LossKind::BetaNll(0.5), &model, &batch) - manual / 3.0).abs() < 1e-12);
    }

    #[test]
    fn faithful_mean_gradient_is_mse_gradient() {
        let model = small_model(LossKind::Faithful, 2, 3, 13);
        let batch = random_batch(5, 2, 3, 14);
        let g_f = grads(LossKind::Faithful, &model, &batch);
        let mut t = Tape::new(&model.store);
        let v = loss_mse(&mut t, &model, &batch).unwrap();
        let g_m = t.backward(v).unwrap().into_params();
        for id in model.mean.params() {
            assert_eq!(g_f[id.0], g_m[id.0], "{}", model.store.name(id));
        }
    }

    #[test]
    fn w2_covariance_gradient_ignores_targets() {
        let model = small_model(LossKind::W2Bound, 2, 2, 15);
        let batch = random_batch(5, 2, 2, 16);
        let mut moved = batch.clone();
        moved.y = moved.y.map(|v| 3.0 * v + 7.0);
        let (a, b) = (grads(LossKind::W2Bound, &model, &batch), grads(LossKind::W2Bound, &model, &moved));
        for id in model.cov.params() {
            assert_eq!(a[id.0], b[id.0]);
        }
        let mean_id: ParamId = model.mean.params().next().unwrap();
        assert_ne!(a[mean_id.0], b[mean_id.0]);
    }

    #[test]
    fn head_mismatch_and_missing_labels() {
        let model = small_model(LossKind::NllFull, 1, 2, 17);
        let mut batch = random_batch(2, 1, 2, 18);
        let mut t = Tape::new(&model.store);
        assert!(matches!(loss_w2_bound(&mut t, &model, &batch), Err(Error::InvalidSpec(_))));
        batch.labels = None;
        assert!(matches!(loss_kl_calibrated(&mut t, &model, &batch), Err(Error::InvalidSpec(_))));
        assert!(LossKind::BetaNll(1.5).validate().is_err());
        assert_eq!("beta_nll_0.25".parse::<LossKind>().unwrap(), LossKind::BetaNll(0.25));
    }

    #[test]
    fn all_losses_gradcheck_without_eigensolver() {
        for kind in LossKind::all() {
            for n in [1, 2, 3] {
                let model = small_model(kind, 2, n, 19 + n as u64);
                let batch = random_batch(4, 2, n, 29 + n as u64);
                let before = eig_call_count();
                let r = grad_check(&model.store, |t| build_loss(kind, t, &model, &batch)).unwrap();
                assert_eq!(eig_call_count(), before, "{kind:?}");
                assert!(r.max_rel_err <= 1e-4, "{kind:?} n={n}: {r:?}");
            }
        }
    }

    #[test]
    fn supervision_repairs_singular_priors() {
        let zero = Gaussian {
            mean: vec![0.0, 0.0],
            cov: SpdMatrix::new(Matrix::zeros(2, 2)).unwrap(),
        };
        let s = Supervision::from_ground_truth(&[zero]).unwrap();
        assert_eq!(s.ridged, 1);
        assert!(s.prior_logdet[0].is_finite());
        assert_eq!(s.sqrt.data(), &[0.0; 4]);
    }
}
