//! Fully connected mean and covariance estimators.

use rand::Rng;

use crate::autodiff::{softplus, softplus_floor_inverse, ParamId, ParamStore, Tape, Var, POSITIVE_FLOOR};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{Matrix, SpdMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Elu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            other => Err(Error::InvalidSpec(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl MlpConfig {
    /// Four tanh layers of width 50, used for scalar targets.
    pub fn univariate(input_dim: usize, output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            output_dim,
            hidden_layers: 4,
            hidden_width: 50,
            activation: Activation::Tanh,
        }
    }

    /// Ten ELU layers of width `input_dim²`.
    pub fn multivariate(input_dim: usize, output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            output_dim,
            hidden_layers: 10,
            hidden_width: input_dim * input_dim,
            activation: Activation::Elu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(Error::InvalidSpec(format!("layer widths must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

/// Affine layers alternating with activations; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub cfg: MlpConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: MlpConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
            let w = store.add(format!("{prefix}.w{i}"), Matrix::new(fan_in, fan_out, w)?);
            let b = store.add(format!("{prefix}.b{i}"), Matrix::zeros(1, fan_out));
            layers.push((w, b));
        }
        Ok(Mlp { cfg, layers })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("at least the output layer")
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: tape.value(x).shape(),
                rhs: (self.cfg.input_dim, self.cfg.hidden_width),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            let z = tape.matmul(h, wv)?;
            h = tape.add_row(z, bv)?;
            if i < last {
                h = match self.cfg.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Elu => tape.elu(h),
                };
            }
        }
        Ok(h)
    }

    /// Swaps in a new output layer (appended to `store`; the old tensors stay
    /// but are no longer referenced).
    pub fn replace_output(&mut self, store: &mut ParamStore, prefix: &str, weight: Matrix, bias: Matrix) -> Result<()> {
        let fan_in = self.cfg.layer_dims().last().map_or(self.cfg.input_dim, |d| d.0);
        if weight.rows() != fan_in || bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::ShapeMismatch {
                op: "replace_output",
                lhs: weight.shape(),
                rhs: bias.shape(),
            });
        }
        let i = self.layers.len() - 1;
        self.cfg.output_dim = weight.cols();
        let w = store.add(format!("{prefix}.w{i}'"), weight);
        let b = store.add(format!("{prefix}.b{i}'"), bias);
        self.layers[i] = (w, b);
        Ok(())
    }

    /// Raw outputs for a batch, outside of any training graph.
    pub fn predict(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// How raw covariance-network outputs map to a covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovHeadKind {
    /// Lower-triangular factor `L`, `Σ̂ = LLᵀ`, positive diagonal.
    CholeskyFull,
    /// Independent positive variances.
    Diagonal,
    /// Symmetric square root `S`, `Σ̂ = S²`.
    SymSqrt,
}

impl CovHeadKind {
    pub fn raw_dim(self, n: usize) -> usize {
        match self {
            CovHeadKind::CholeskyFull => n * (n + 1) / 2,
            CovHeadKind::Diagonal => n,
            CovHeadKind::SymSqrt => n * n,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CovHeadKind::CholeskyFull => "cholesky_full",
            CovHeadKind::Diagonal => "diagonal",
            CovHeadKind::SymSqrt => "sym_sqrt",
        }
    }

    /// Raw output that decodes to the identity covariance.
    pub fn identity_raw(self, n: usize) -> Vec<f64> {
        let one = softplus_floor_inverse(1.0);
        match self {
            CovHeadKind::CholeskyFull => {
                let mut v = vec![0.0; self.raw_dim(n)];
                for r in 0..n {
                    v[r * (r + 1) / 2 + r] = one;
                }
                v
            }
            CovHeadKind::Diagonal => vec![one; n],
            CovHeadKind::SymSqrt => Matrix::identity(n).into_data(),
        }
    }

    /// Builds the head on the tape: batched `L` (`N×n²`), variances (`N×n`)
    /// or batched `S` (`N×n²`).
    pub fn apply(self, tape: &mut Tape<'_>, raw: Var, n: usize) -> Result<Var> {
        match self {
            CovHeadKind::CholeskyFull => tape.tril_head(raw, n),
            CovHeadKind::Diagonal => {
                let cols = tape.value(raw).cols();
                if cols != n {
                    return Err(Error::ShapeMismatch {
                        op: "diagonal_head",
                        lhs: tape.value(raw).shape(),
                        rhs: (tape.value(raw).rows(), n),
                    });
                }
                let sp = tape.softplus(raw);
                Ok(tape.add_scalar(sp, POSITIVE_FLOOR))
            }
            CovHeadKind::SymSqrt => tape.sym_head(raw, n),
        }
    }

    /// Covariance implied by one raw output row.
    pub fn covariance(self, raw: &[f64], n: usize) -> Matrix {
        match self {
            CovHeadKind::CholeskyFull => {
                let l = self.factor(raw, n);
                l.matmul(&l.transpose()).expect("square").symmetrized()
            }
            CovHeadKind::Diagonal => {
                Matrix::from_diag(&raw.iter().map(|&v| softplus(v) + POSITIVE_FLOOR).collect::<Vec<_>>())
            }
            CovHeadKind::SymSqrt => {
                let s = self.factor(raw, n);
                s.matmul(&s).expect("square").symmetrized()
            }
        }
    }

    /// The head's matrix factor (`L`, `diag(σ)` or `S`) for one raw row.
    pub fn factor(self, raw: &[f64], n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        match self {
            CovHeadKind::CholeskyFull => {
                for r in 0..n {
                    for c in 0..r {
                        m[(r, c)] = raw[r * (r + 1) / 2 + c];
                    }
                    m[(r, r)] = softplus(raw[r * (r + 1) / 2 + r]) + POSITIVE_FLOOR;
                }
            }
            CovHeadKind::Diagonal => {
                for r in 0..n {
                    m[(r, r)] = (softplus(raw[r]) + POSITIVE_FLOOR).sqrt();
                }
            }
            CovHeadKind::SymSqrt => {
                for r in 0..n {
                    for c in 0..n {
                        m[(r, c)] = 0.5 * (raw[r * n + c] + raw[c * n + r]);
                    }
                }
            }
        }
        m
    }
}

/// Separate mean and covariance networks sharing one parameter store.
#[derive(Clone, Debug)]
pub struct HeteroscedasticModel {
    pub store: ParamStore,
    pub mean: Mlp,
    pub cov: Mlp,
    pub head: CovHeadKind,
    pub target_dim: usize,
}

impl HeteroscedasticModel {
    /// Networks are drawn from `rng`; the covariance network's final bias is
    /// set so the initial prediction is close to the identity covariance.
    pub fn init(
        mean_arch: MlpConfig,
        cov_arch: MlpConfig,
        head: CovHeadKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = mean_arch.output_dim;
        if cov_arch.output_dim != head.raw_dim(n) {
            return Err(Error::InvalidSpec(format!(
                "covariance network must emit {} values for a {} head of dimension {n}, got {}",
                head.raw_dim(n),
                head.name(),
                cov_arch.output_dim
            )));
        }
        if cov_arch.input_dim != mean_arch.input_dim {
            return Err(Error::InvalidSpec("mean and covariance networks need equal input widths".into()));
        }
        let mut store = ParamStore::new();
        let mean = Mlp::init(mean_arch, &mut store, "mean", rng)?;
        let cov = Mlp::init(cov_arch, &mut store, "cov", rng)?;
        let (_, bias) = cov.final_layer();
        *store.get_mut(bias) = Matrix::new(1, head.raw_dim(n), head.identity_raw(n))?;
        Ok(HeteroscedasticModel {
            store,
            mean,
            cov,
            head,
            target_dim: n,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.cfg.input_dim
    }

    /// Replaces a symmetric-square-root head by a Cholesky head whose initial
    /// prediction `LLᵀ` is the average of `S²` over `calibration` inputs.
    /// The new output layer starts with zero weights, so the transferred
    /// covariance is input-independent until training moves it.
    pub fn convert_to_cholesky(&mut self, calibration: &Matrix) -> Result<()> {
        if self.head != CovHeadKind::SymSqrt {
            return Err(Error::InvalidSpec(format!(
                "head conversion starts from sym_sqrt, model has {}",
                self.head.name()
            )));
        }
        let n = self.target_dim;
        let raw = self.cov.predict(&self.store, calibration)?;
        let mut avg = Matrix::zeros(n, n);
        for r in 0..raw.rows() {
            avg = avg.add(&self.head.covariance(raw.row(r), n))?;
        }
        let avg = avg.scale(1.0 / raw.rows().max(1) as f64);
        let spd = SpdMatrix::new_repaired(avg)?.0;
        let l = match crate::linalg::cholesky(&spd) {
            Ok(l) => l,
            Err(_) => crate::linalg::cholesky(&spd.with_ridge(crate::linalg::ridge_floor(spd.matrix()).max(1e-9)))?,
        };
        let mut bias = vec![0.0; CovHeadKind::CholeskyFull.raw_dim(n)];
        for r in 0..n {
            for c in 0..r {
                bias[r * (r + 1) / 2 + c] = l[(r, c)];
            }
            bias[r * (r + 1) / 2 + r] = softplus_floor_inverse(l[(r, r)].max(2.0 * POSITIVE_FLOOR));
        }
        let fan_in = self.store.get(self.cov.final_layer().0).rows();
        let width = bias.len();
        self.cov.replace_output(
            &mut self.store,
            "cov",
            Matrix::zeros(fan_in, width),
            Matrix::new(1, width, bias)?,
        )?;
        self.head = CovHeadKind::CholeskyFull;
        Ok(())
    }

    /// Predicted means (`N×n`) and raw covariance outputs.
    pub fn predict_raw(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.mean.predict(&self.store, x)?, self.cov.predict(&self.store, x)?))
    }

    /// Predicted Gaussian per row. Covariances that lost definiteness to
    /// rounding are nudged by a small ridge.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<Gaussian>> {
        let (mu, raw) = self.predict_raw(x)?;
        (0..x.rows())
            .map(|r| {
                let c = self.head.covariance(raw.row(r), self.target_dim);
                let cov = match SpdMatrix::new(c.clone()) {
                    Ok(s) if crate::linalg::cholesky(&s).is_ok() => s,
                    _ => {
                        let ridge = crate::linalg::ridge_floor(&c).max(1e-12);
                        SpdMatrix::new_repaired(c)?.0.with_ridge(ridge)
                    }
                };
                Gaussian::new(mu.row(r).to_vec(), cov)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::autodiff::tests::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = Mlp::init(MlpConfig::univariate(2, 3), &mut store, "m", &mut rng).unwrap();
        for id in net.params().collect::<Vec<_>>() {
            let m = store.get(id).map(|_| 0.0);
            *store.get_mut(id) = m;
        }
        let (_, b) = net.final_layer();
        *store.get_mut(b) = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        let out = net.predict(&store, &randn(4, 2, &mut rng)).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn zero_depth_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = MlpConfig {
            input_dim: 3,
            output_dim: 2,
            hidden_layers: 0,
            hidden_width: 0,
            activation: Activation::Tanh,
        };
        let net = Mlp::init(cfg, &mut store, "a", &mut rng).unwrap();
        let x = randn(5, 3, &mut rng);
        let (w, _) = net.final_layer();
        let expected = x.matmul(store.get(w)).unwrap();
        let got = net.predict(&store, &x).unwrap();
        assert!(got.sub(&expected).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = Mlp::init(MlpConfig::multivariate(4, 4), &mut store, "m", &mut rng).unwrap();
        assert_eq!(net.params().count(), 22);
        for id in net.params() {
            let m = store.get(id);
            if store.name(id).contains(".b") {
                assert!(m.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
                assert!(m.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let net = Mlp::init(MlpConfig::univariate(1, 1), &mut store, "m", &mut rng).unwrap();
            let x = randn(16, 1, &mut rng);
            net.predict(&store, &x).unwrap()
        };
        assert_eq!(build().data(), build().data());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = Mlp::init(MlpConfig::univariate(2, 1), &mut store, "m", &mut rng).unwrap();
        assert!(matches!(net.predict(&store, &Matrix::zeros(3, 5)), Err(Error::ShapeMismatch { .. })));
        assert!(MlpConfig { hidden_width: 0, ..MlpConfig::univariate(1, 1) }.validate().is_err());
    }

    #[test]
    fn mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Tanh, Activation::Elu] {
            let mut store = ParamStore::new();
            let cfg = MlpConfig {
                input_dim: 2,
                output_dim: 2,
                hidden_layers: 2,
                hidden_width: 4,
                activation: act,
            };
            let net = Mlp::init(cfg, &mut store, "m", &mut rng).unwrap();
            let x = randn(6, 2, &mut rng);
            let r = grad_check(&store, |t| {
                let xv = t.constant(x.clone());
                let o = net.forward(t, xv)?;
                let s = t.square(o);
                Ok(t.sum(s))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{act:?}: {r:?}");
        }
    }

    #[test]
    fn model_starts_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for head in [CovHeadKind::CholeskyFull, CovHeadKind::Diagonal, CovHeadKind::SymSqrt] {
            let n = 3;
            let mut arch = MlpConfig::multivariate(3, head.raw_dim(n));
            arch.hidden_layers = 2;
            let mut mean_arch = arch.clone();
            mean_arch.output_dim = n;
            let mut m = HeteroscedasticModel::init(mean_arch, arch, head, &mut rng).unwrap();
            // with the final weights zeroed the head decodes to exactly I
            let (w, _) = m.cov.final_layer();
            let z = m.store.get(w).map(|_| 0.0);
            *m.store.get_mut(w) = z;
            let preds = m.predict(&randn(4, 3, &mut rng)).unwrap();
            for g in preds {
                assert!(g.cov.matrix().sub(&Matrix::identity(n)).unwrap().frobenius_norm() < 1e-12, "{head:?}");
            }
        }
    }

    #[test]
    fn cholesky_transfer_reproduces_average_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 2;
        let arch = |out| MlpConfig {
            input_dim: 3,
            output_dim: out,
            hidden_layers: 2,
            hidden_width: 6,
            activation: Activation::Elu,
        };
        let mut m = HeteroscedasticModel::init(arch(n), arch(4), CovHeadKind::SymSqrt, &mut rng).unwrap();
        let x = randn(20, 3, &mut rng);
        let before = m.predict(&x).unwrap();
        let mut avg = Matrix::zeros(n, n);
        for g in &before {
            avg = avg.add(g.cov.matrix()).unwrap();
        }
        let avg = avg.scale(1.0 / 20.0);
        m.convert_to_cholesky(&x).unwrap();
        assert_eq!(m.head, CovHeadKind::CholeskyFull);
        for (g, b) in m.predict(&x).unwrap().iter().zip(&before) {
            assert!(g.cov.matrix().rel_frobenius_distance(&avg) < 1e-10);
            assert_eq!(g.mean, b.mean);
        }
        assert!(m.convert_to_cholesky(&x).is_err());
    }

    #[test]
    fn head_covariances_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        for _ in 0..10_000 {
            let raw = randn(1, 6, &mut rng);
            let c = CovHeadKind::CholeskyFull.covariance(raw.data(), n);
            let eig = crate::linalg::sym_eig(&SpdMatrix::new(c).unwrap()).unwrap();
            assert!(eig.eigenvalues[0] > 0.0);
            // det(LLᵀ) = Π L_ii² stays positive even for extreme raw outputs
            let l = CovHeadKind::CholeskyFull.factor(raw.scale(50.0).data(), n);
            assert!((0..n).all(|i| l[(i, i)] >= POSITIVE_FLOOR));
        }
        for _ in 0..1000 {
            let raw = randn(1, 9, &mut rng).scale(5.0);
            let c = CovHeadKind::SymSqrt.covariance(raw.data(), n);
            let eig = crate::linalg::sym_eig(&SpdMatrix::new(c).unwrap()).unwrap();
            assert!(eig.eigenvalues[0] >= -1e-10 * eig.eigenvalues[n - 1].abs().max(1.0));
        }
    }
}
