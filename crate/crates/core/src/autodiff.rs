//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records operations in creation order, so parents always precede
//! children and a single reverse sweep visits every node once. Trainable
//! tensors live in a [`ParamStore`] and are referenced, not copied, by the tape.
//!
//! Besides the usual elementwise and matrix ops there are a few fused batch
//! ops for Gaussian heads: each row of a "batched square" tensor holds one
//! `n×n` matrix in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Lower bound added to softplus outputs that must stay strictly positive.
pub const POSITIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

const CHECKPOINT_MAGIC: &str = "hetreg-params v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Text checkpoint: a magic line, then per tensor a `name rows cols`
    /// line followed by one line of space-separated values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        for (name, m) in self.names.iter().zip(&self.values) {
            writeln!(out, "{} {} {}", name, m.rows(), m.cols()).unwrap();
            let vals: Vec<String> = m.data().iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |row: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            col: 0,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad(1, format!("missing header {CHECKPOINT_MAGIC:?}"))),
        }
        let mut store = ParamStore::new();
        while let Some((i, head)) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = head.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(i + 1, "expected `name rows cols`".into()));
            };
            let rows: usize = rows.parse().map_err(|_| bad(i + 1, "bad row count".into()))?;
            let cols: usize = cols.parse().map_err(|_| bad(i + 1, "bad column count".into()))?;
            let (j, body) = lines.next().ok_or_else(|| bad(i + 2, "missing values".into()))?;
            let data = body
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(j + 1, e.to_string()))?;
            if data.len() != rows * cols {
                return Err(bad(j + 1, format!("expected {} values, got {}", rows * cols, data.len())));
            }
            store.add(name, Matrix::new(rows, cols, data)?);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Elu(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Ln(Var),
    PowConst(Var, f64),
    SumAll(Var),
    FrobeniusSq(Var),
    // detached copy; no parent edge
    Stop,
    TrilHead { raw: Var, n: usize },
    SymHead { raw: Var, n: usize },
    InvQuad { l: Var, v: Var, n: usize, m: usize },
    LogdetChol { l: Var, n: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf | Param(_) | Stop => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Tanh(a) | Elu(a) | Exp(a) | Softplus(a) | Square(a) | Ln(a)
            | PowConst(a, _) | SumAll(a) | FrobeniusSq(a) => vec![a],
            TrilHead { raw, .. } | SymHead { raw, .. } => vec![raw],
            InvQuad { l, v, .. } => vec![l, v],
            LogdetChol { l, .. } => vec![l],
        }
    }
}

struct Node {
    op: Op,
    // `None` for parameters, whose value lives in the store.
    value: Option<Matrix>,
}

enum StopMode {
    Live,
    Record(Vec<Matrix>),
    Replay(Vec<Matrix>, usize),
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    stops: StopMode,
}

/// Gradients of a scalar with respect to every parameter and leaf it depends on.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Matrix>>,
    leaves: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the parameter did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&self, v: Var) -> Option<&Matrix> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

/// `C ← beta·C + A·B` for `m×k` times `k×n` with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let span = |r: usize, c: usize, rs: usize, cs: usize| if r == 0 || c == 0 { 0 } else { (r - 1) * rs + (c - 1) * cs + 1 };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus(x) + POSITIVE_FLOOR`; the raw value that yields `target`.
pub fn softplus_floor_inverse(target: f64) -> f64 {
    let t = target - POSITIVE_FLOOR;
    if t > 30.0 {
        t
    } else {
        t.exp_m1().ln()
    }
}

fn tril_index(r: usize, c: usize) -> usize {
    r * (r + 1) / 2 + c
}

/// Forward substitution on an `n×m` block: `Z = L⁻¹ V`.
fn lower_solve_block(l: &[f64], v: &[f64], n: usize, m: usize, z: &mut [f64]) {
    for i in 0..n {
        for k in 0..m {
            let mut acc = v[i * m + k];
            for j in 0..i {
                acc -= l[i * n + j] * z[j * m + k];
            }
            z[i * m + k] = acc / l[i * n + i];
        }
    }
}

/// Back substitution with the transpose: `Q = L⁻ᵀ Z`.
fn upper_t_solve_block(l: &[f64], z: &[f64], n: usize, m: usize, q: &mut [f64]) {
    for i in (0..n).rev() {
        for k in 0..m {
            let mut acc = z[i * m + k];
            for j in i + 1..n {
                acc -= l[j * n + i] * q[j * m + k];
            }
            q[i * m + k] = acc / l[i * n + i];
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            stops: StopMode::Live,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable input; its gradient is still reported by `backward`.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), (k, 1), y.data(), (n, 1), 0.0, &mut out);
        Ok(self.push(Op::MatMul(a, b), Matrix::from_vec_unchecked(m, n, out)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Matrix::from_vec_unchecked(x.rows(), x.cols(), data);
        Ok(self.push(op, out))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", Op::Div(a, b), |p, q| p / q)
    }

    /// `a + 1·row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let out = Matrix::from_vec_unchecked(x.rows(), c, data);
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.map(a, Op::PowConst(a, p), |x| x.powf(p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Matrix::from_vec_unchecked(1, 1, vec![s]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        self.push(Op::FrobeniusSq(a), Matrix::from_vec_unchecked(1, 1, vec![s]))
    }

    /// Forwards the value; blocks the gradient.
    ///
    /// While a finite-difference check replays a recorded base point, the
    /// recorded value is returned instead so the detached factor stays frozen.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let live = self.value(a).clone();
        let value = match &mut self.stops {
            StopMode::Live => live,
            StopMode::Record(rec) => {
                rec.push(live.clone());
                live
            }
            StopMode::Replay(rec, next) => {
                let v = rec.get(*next).cloned().unwrap_or(live);
                *next += 1;
                v
            }
        };
        self.push(Op::Stop, value)
    }

    /// Raw `N × n(n+1)/2` outputs to batched lower-triangular factors `N × n²`
    /// with diagonal `softplus(raw) + 1e-6`.
    pub fn tril_head(&mut self, raw: Var, n: usize) -> Result<Var> {
        let x = self.value(raw);
        let t = n * (n + 1) / 2;
        if x.cols() != t {
            return Err(Error::ShapeMismatch {
                op: "tril_head",
                lhs: x.shape(),
                rhs: (x.rows(), t),
            });
        }
        let mut out = vec![0.0; x.rows() * n * n];
        for (src, dst) in x.data().chunks(t.max(1)).zip(out.chunks_mut((n * n).max(1))) {
            for r in 0..n {
                for c in 0..r {
                    dst[r * n + c] = src[tril_index(r, c)];
                }
                dst[r * n + r] = softplus(src[tril_index(r, r)]) + POSITIVE_FLOOR;
            }
        }
        let out = Matrix::from_vec_unchecked(x.rows(), n * n, out);
        Ok(self.push(Op::TrilHead { raw, n }, out))
    }

    /// Raw `N × n²` outputs to batched symmetric matrices `(A + Aᵀ)/2`.
    pub fn sym_head(&mut self, raw: Var, n: usize) -> Result<Var> {
        let x = self.value(raw);
        if x.cols() != n * n {
            return Err(Error::ShapeMismatch {
                op: "sym_head",
                lhs: x.shape(),
                rhs: (x.rows(), n * n),
            });
        }
        let mut out = vec![0.0; x.rows() * n * n];
        for (src, dst) in x.data().chunks((n * n).max(1)).zip(out.chunks_mut((n * n).max(1))) {
            for r in 0..n {
                for c in 0..n {
                    dst[r * n + c] = 0.5 * (src[r * n + c] + src[c * n + r]);
                }
            }
        }
        let out = Matrix::from_vec_unchecked(x.rows(), n * n, out);
        Ok(self.push(Op::SymHead { raw, n }, out))
    }

    /// Per row `‖L⁻¹ V‖_F²` with `L` a batched `n×n` lower factor and `V` a
    /// batched `n×m` block; output `N×1`. With `m = 1` this is the quadratic
    /// form `vᵀ(LLᵀ)⁻¹v`; with `V` a factor of `P` it is `Tr((LLᵀ)⁻¹ P)`.
    pub fn inv_quad(&mut self, l: Var, v: Var, n: usize, m: usize) -> Result<Var> {
        let (lv, vv) = (self.value(l), self.value(v));
        if lv.cols() != n * n || vv.cols() != n * m || lv.rows() != vv.rows() {
            return Err(shape_err("inv_quad", lv, vv));
        }
        let mut z = vec![0.0; n * m];
        let mut out = Vec::with_capacity(lv.rows());
        for r in 0..lv.rows() {
            lower_solve_block(lv.row(r), vv.row(r), n, m, &mut z);
            out.push(z.iter().map(|x| x * x).sum());
        }
        let out = Matrix::from_vec_unchecked(lv.rows(), 1, out);
        Ok(self.push(Op::InvQuad { l, v, n, m }, out))
    }

    /// Per row `log det(L Lᵀ) = 2 Σ log L_ii`; output `N×1`.
    pub fn logdet_chol(&mut self, l: Var, n: usize) -> Result<Var> {
        let lv = self.value(l);
        if lv.cols() != n * n {
            return Err(Error::ShapeMismatch {
                op: "logdet_chol",
                lhs: lv.shape(),
                rhs: (lv.rows(), n * n),
            });
        }
        let out = (0..lv.rows())
            .map(|r| 2.0 * (0..n).map(|i| lv.row(r)[i * n + i].ln()).sum::<f64>())
            .collect();
        let out = Matrix::from_vec_unchecked(lv.rows(), 1, out);
        Ok(self.push(Op::LogdetChol { l, n }, out))
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: out.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_vec_unchecked(1, 1, vec![1.0]));
        let mut params: Vec<Option<Matrix>> = vec![None; self.params.len()];
        let mut leaves: Vec<Option<Matrix>> = vec![None; loss.0 + 1];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::CycleDetected { node: i, parent: p.0 });
                }
            }
            match node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => accumulate(&mut params[id.0], g),
                Op::Stop => {}
                _ => self.pullback(i, &g, &mut grads),
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn pullback(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = node.value.as_ref().expect("op nodes carry values");
        let elementwise = |x: &Matrix, f: &dyn Fn(f64, f64, f64) -> f64| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Matrix::from_vec_unchecked(x.rows(), x.cols(), data)
        };
        match node.op {
            Op::Leaf | Op::Param(_) | Op::Stop => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(a), self.value(b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n, 1), w.data(), (1, n), 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, x.data(), (1, k), g.data(), (n, 1), 0.0, &mut db);
                accumulate(&mut grads[a.0], Matrix::from_vec_unchecked(m, k, da));
                accumulate(&mut grads[b.0], Matrix::from_vec_unchecked(k, n, db));
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                let c = g.cols();
                let mut row = vec![0.0; c];
                for chunk in g.data().chunks(c.max(1)) {
                    for (acc, &v) in row.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(&mut grads[b.0], Matrix::from_vec_unchecked(1, c, row));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (x, w) = (self.value(a), self.value(b));
                let da = elementwise(w, &|wv, _, gv| gv * wv);
                let db = elementwise(x, &|xv, _, gv| gv * xv);
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Div(a, b) => {
                let w = self.value(b);
                let da = elementwise(w, &|wv, _, gv| gv / wv);
                // d(a/b)/db = -(a/b)/b
                let db = elementwise(w, &|wv, yv, gv| -gv * yv / wv);
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(s)),
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Tanh(a) => {
                let d = elementwise(self.value(a), &|_, yv, gv| gv * (1.0 - yv * yv));
                accumulate(&mut grads[a.0], d);
            }
            Op::Elu(a) => {
                let d = elementwise(self.value(a), &|xv, yv, gv| if xv > 0.0 { gv } else { gv * (yv + 1.0) });
                accumulate(&mut grads[a.0], d);
            }
            Op::Exp(a) => {
                let d = elementwise(self.value(a), &|_, yv, gv| gv * yv);
                accumulate(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let d = elementwise(self.value(a), &|xv, _, gv| gv * sigmoid(xv));
                accumulate(&mut grads[a.0], d);
            }
            Op::Square(a) => {
                let d = elementwise(self.value(a), &|xv, _, gv| 2.0 * gv * xv);
                accumulate(&mut grads[a.0], d);
            }
            Op::Ln(a) => {
                let d = elementwise(self.value(a), &|xv, _, gv| gv / xv);
                accumulate(&mut grads[a.0], d);
            }
            Op::PowConst(a, p) => {
                let d = elementwise(self.value(a), &|xv, _, gv| gv * p * xv.powf(p - 1.0));
                accumulate(&mut grads[a.0], d);
            }
            Op::SumAll(a) => {
                let x = self.value(a);
                let d = Matrix::from_vec_unchecked(x.rows(), x.cols(), vec![g.data()[0]; x.data().len()]);
                accumulate(&mut grads[a.0], d);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.data()[0];
                accumulate(&mut grads[a.0], self.value(a).scale(s));
            }
            Op::TrilHead { raw, n } => {
                let x = self.value(raw);
                let t = x.cols();
                let mut d = vec![0.0; x.rows() * t];
                for ((src, gr), dst) in x
                    .data()
                    .chunks(t.max(1))
                    .zip(g.data().chunks((n * n).max(1)))
                    .zip(d.chunks_mut(t.max(1)))
                {
                    for r in 0..n {
                        for c in 0..r {
                            dst[tril_index(r, c)] = gr[r * n + c];
                        }
                        let k = tril_index(r, r);
                        dst[k] = gr[r * n + r] * sigmoid(src[k]);
                    }
                }
                accumulate(&mut grads[raw.0], Matrix::from_vec_unchecked(x.rows(), t, d));
            }
            Op::SymHead { raw, n } => {
                let mut d = vec![0.0; g.data().len()];
                for (gr, dst) in g.data().chunks((n * n).max(1)).zip(d.chunks_mut((n * n).max(1))) {
                    for r in 0..n {
                        for c in 0..n {
                            dst[r * n + c] = 0.5 * (gr[r * n + c] + gr[c * n + r]);
                        }
                    }
                }
                accumulate(&mut grads[raw.0], Matrix::from_vec_unchecked(g.rows(), n * n, d));
            }
            Op::InvQuad { l, v, n, m } => {
                let (lv, vv) = (self.value(l), self.value(v));
                let rows = lv.rows();
                let mut dl = vec![0.0; rows * n * n];
                let mut dv = vec![0.0; rows * n * m];
                let mut z = vec![0.0; n * m];
                let mut q = vec![0.0; n * m];
                for r in 0..rows {
                    let gr = g.data()[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let lr = lv.row(r);
                    lower_solve_block(lr, vv.row(r), n, m, &mut z);
                    upper_t_solve_block(lr, &z, n, m, &mut q);
                    let dvr = &mut dv[r * n * m..(r + 1) * n * m];
                    for (d, &qv) in dvr.iter_mut().zip(&q) {
                        *d = 2.0 * gr * qv;
                    }
                    let dlr = &mut dl[r * n * n..(r + 1) * n * n];
                    for i in 0..n {
                        for j in 0..=i {
                            let dot: f64 = (0..m).map(|k| q[i * m + k] * z[j * m + k]).sum();
                            dlr[i * n + j] = -2.0 * gr * dot;
                        }
                    }
                }
                accumulate(&mut grads[l.0], Matrix::from_vec_unchecked(rows, n * n, dl));
                accumulate(&mut grads[v.0], Matrix::from_vec_unchecked(rows, n * m, dv));
            }
            Op::LogdetChol { l, n } => {
                let lv = self.value(l);
                let mut d = vec![0.0; lv.data().len()];
                for r in 0..lv.rows() {
                    let gr = g.data()[r];
                    for i in 0..n {
                        d[r * n * n + i * n + i] = 2.0 * gr / lv.row(r)[i * n + i];
                    }
                }
                accumulate(&mut grads[l.0], Matrix::from_vec_unchecked(lv.rows(), n * n, d));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Outcome of comparing `backward` against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-coordinate relative error; coordinates whose absolute
    /// error is at most `GRAD_CHECK_ABS` count as exact.
    pub max_rel_err: f64,
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_ABS: f64 = 1e-7;

/// Central-difference check (step `1e-5`) of every parameter coordinate.
///
/// Stop-gradient nodes are frozen at their base-point values during the
/// perturbed evaluations, so detached factors are treated as the constants
/// `backward` assumes them to be.
pub fn grad_check<F>(store: &ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    tape.stops = StopMode::Record(Vec::new());
    let out = f(&mut tape)?;
    let grads = tape.backward(out)?;
    let StopMode::Record(frozen) = std::mem::replace(&mut tape.stops, StopMode::Live) else {
        unreachable!()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new(s);
        t.stops = StopMode::Replay(frozen.clone(), 0);
        let v = f(&mut t)?;
        Ok(t.scalar(v))
    };

    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in store.ids() {
        for k in 0..store.get(id).data().len() {
            let base = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = base + GRAD_CHECK_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = base - GRAD_CHECK_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = base;

            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
            let abs = (numeric - analytic).abs();
            let rel = if abs <= GRAD_CHECK_ABS {
                0.0
            } else {
                abs / numeric.abs().max(analytic.abs())
            };
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((id, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn check(store: &ParamStore, f: impl Fn(&mut Tape<'_>) -> Result<Var>) {
        let r = grad_check(store, f).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn matmul_identity() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let i = t.constant(Matrix::identity(2));
        let x = t.constant(a.clone());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_rows(&[&[1.0, 2.0]]));
        let mut t = Tape::new(&store);
        let v = t.param(x);
        let s = t.frobenius_sq(v);
        assert_eq!(t.scalar(s), 5.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.param(x).unwrap(), &Matrix::from_rows(&[&[2.0, 4.0]]));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_rows(&[&[3.0, -2.0]]));
        let mut t = Tape::new(&store);
        let v = t.param(x);
        let s = t.stop_gradient(v);
        let p = t.mul(s, v).unwrap();
        let out = t.sum(p);
        let g = t.backward(out).unwrap();
        // d(stop(x)·x)/dx = x, not 2x
        assert_eq!(g.param(x).unwrap(), &Matrix::from_rows(&[&[3.0, -2.0]]));
    }

    #[test]
    fn affine_gradient_is_design_rows() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[&[0.5], &[-1.0]]));
        let b = store.add("b", Matrix::from_rows(&[&[0.25]]));
        let design = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        for row in 0..3 {
            let mut t = Tape::new(&store);
            let x = t.constant(Matrix::from_rows(&[design.row(row)]));
            let (wv, bv) = (t.param(w), t.param(b));
            let xw = t.matmul(x, wv).unwrap();
            let y = t.add_row(xw, bv).unwrap();
            let out = t.sum(y);
            let g = t.backward(out).unwrap();
            assert_eq!(g.param(w).unwrap().data(), design.row(row));
            assert_eq!(g.param(b).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
        let c = t.constant(Matrix::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.backward(a), Err(Error::ShapeMismatch { op: "backward", .. })));
        assert!(matches!(t.tril_head(a, 3), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_reference_to_later_node_is_a_cycle() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Matrix::from_rows(&[&[1.0]]));
        let b = t.scale(a, 2.0);
        // corrupt the graph: make `b` depend on itself
        t.nodes[b.0].op = Op::Scale(b, 2.0);
        assert!(matches!(t.backward(b), Err(Error::CycleDetected { node: 1, parent: 1 })));
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", randn(3, 4, &mut rng));
        let y = store.add("y", randn(3, 4, &mut rng).map(|v| v.abs() + 0.5));
        let r = store.add("r", randn(1, 4, &mut rng));
        check(&store, |t| {
            let (a, b, row) = (t.param(x), t.param(y), t.param(r));
            let terms = [
                t.tanh(a),
                t.elu(a),
                t.exp(a),
                t.softplus(a),
                t.square(a),
                t.ln(b),
                t.powf(b, 0.7),
                t.mul(a, b)?,
                t.div(a, b)?,
                t.sub(a, b)?,
                t.add_row(a, row)?,
                t.add_scalar(a, 3.0),
            ];
            let mut acc = terms[0];
            for (i, &v) in terms[1..].iter().enumerate() {
                let s = t.scale(v, 1.0 + i as f64 * 0.1);
                acc = t.add(acc, s)?;
            }
            let f = t.frobenius_sq(acc);
            let m = t.mean(acc);
            t.add(f, m)
        });
    }

    #[test]
    fn tanh_mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", randn(3, 5, &mut rng).scale(0.5));
        let b1 = store.add("b1", randn(1, 5, &mut rng));
        let w2 = store.add("w2", randn(5, 2, &mut rng).scale(0.5));
        let x = randn(7, 3, &mut rng);
        check(&store, |t| {
            let xv = t.constant(x.clone());
            let (w1, b1, w2) = (t.param(w1), t.param(b1), t.param(w2));
            let h = t.matmul(xv, w1)?;
            let h = t.add_row(h, b1)?;
            let h = t.tanh(h);
            let o = t.matmul(h, w2)?;
            Ok(t.sum(o))
        });
    }

    fn batched_lower(rows: usize, n: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, n * n);
        for r in 0..rows {
            for i in 0..n {
                for j in 0..=i {
                    m[(r, i * n + j)] = if i == j {
                        1.0 + rng.random::<f64>()
                    } else {
                        0.3 * rng.sample::<f64, _>(StandardNormal)
                    };
                }
            }
        }
        m
    }

    #[test]
    fn inv_quad_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3;
        let l = batched_lower(2, n, &mut rng);
        let v = randn(2, n, &mut rng);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let (lv, vv) = (t.constant(l.clone()), t.constant(v.clone()));
        let q = t.inv_quad(lv, vv, n, 1).unwrap();
        for r in 0..2 {
            let lm = Matrix::new(n, n, l.row(r).to_vec()).unwrap();
            let sigma = crate::linalg::SpdMatrix::new(lm.matmul(&lm.transpose()).unwrap()).unwrap();
            let p = crate::linalg::spd_inverse(&sigma).unwrap();
            let direct = crate::linalg::mahalanobis(v.row(r), &[0.0; 3], &p).unwrap().powi(2);
            assert!((t.value(q)[(r, 0)] - direct).abs() < 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn covariance_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 2, 4] {
            let mut store = ParamStore::new();
            let raw = store.add("raw", randn(3, n * (n + 1) / 2, &mut rng));
            let sym = store.add("sym", randn(3, n * n, &mut rng));
            let v = store.add("v", randn(3, n, &mut rng));
            let c = store.add("c", randn(3, n * 2, &mut rng));
            check(&store, |t| {
                let r = t.param(raw);
                let l = t.tril_head(r, n)?;
                let (vv, cv) = (t.param(v), t.param(c));
                let q = t.inv_quad(l, vv, n, 1)?;
                let q2 = t.inv_quad(l, cv, n, 2)?;
                let ld = t.logdet_chol(l, n)?;
                let s = t.param(sym);
                let sh = t.sym_head(s, n)?;
                let f = t.frobenius_sq(sh);
                let a = t.add(q, q2)?;
                let a = t.add(a, ld)?;
                let a = t.sum(a);
                t.add(a, f)
            });
        }
    }

    #[test]
    fn tril_head_diagonal_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let raw = t.constant(randn(10_000, 3, &mut rng).scale(30.0));
        let l = t.tril_head(raw, 2).unwrap();
        for r in 0..10_000 {
            let row = t.value(l).row(r);
            assert!(row[0] > 0.0 && row[3] > 0.0);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for target in [1e-3, 0.5, 1.0, 7.0, 100.0] {
            let raw = softplus_floor_inverse(target);
            assert!((softplus(raw) + POSITIVE_FLOOR - target).abs() < 1e-12 * target.max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        store.add("mean.w0", randn(3, 4, &mut rng));
        store.add("mean.b0", randn(1, 4, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.txt");
        store.save(&p).unwrap();
        assert_eq!(ParamStore::load(&p).unwrap(), store);
        fs::write(&p, "nope\n").unwrap();
        assert!(matches!(ParamStore::load(&p), Err(Error::Parse { .. })));
    }
}
