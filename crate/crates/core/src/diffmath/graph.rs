//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for [`Graph::backward`]. Gradient buffers are zeroed at
//! the start of each `backward` call and then filled; they never accumulate
//! across calls.

use crate::diffmath::linalg::{self, JITTER};
use crate::diffmath::tensor::gemm;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Softplus(Var),
    Gelu(Var),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    Diag(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Tokenize {
        coef: Tensor,
        widx: Vec<usize>,
        w: Var,
        b: Var,
        cls: Var,
    },
    SqDist(Var, Var),
    Matern32 {
        d2: Var,
        lengthscale: Var,
        variance: Var,
    },
    Cholesky(Var),
    SolveLower(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. Nodes that
    /// do not influence the loss report a zero gradient.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradient of `v`, or `None` when no path from the last loss reached it.
    pub fn try_grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Returns an error if `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same("add", a, b);
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same("sub", a, b);
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same("mul", a, b);
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias shape");
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: scalar expected");
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v * sv);
        let rg = self.any_grad(&[a, s]);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// Adds the `1 x 1` node `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "add_scalar: scalar expected");
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v + sv);
        let rg = self.any_grad(&[a, s]);
        self.push(out, Op::AddScalar(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / v, Op::Recip(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |v| gelu_parts(v).0, Op::Gelu(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `r x c -> r x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::column((0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::RowSums(a), rg)
    }

    /// `r x c -> 1 x c`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::row(out), Op::ColSums(a), rg)
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), t.cols(), "diag: square matrix expected");
        let out = Tensor::column((0..t.rows()).map(|i| t.get(i, i)).collect());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Diag(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.any_grad(parts);
        let out = Tensor::new(rows, cols, data).expect("consistent");
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(idx.len(), cols, data).expect("consistent");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SelectRows(a, idx.to_vec()), rg)
    }

    /// Row-wise layer normalization with `1 x c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention. `q`, `k`, `v` are
    /// `(batch * seq) x d`; each consecutive block of `seq` rows is one
    /// sequence. No masking and no positional information.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        assert!(seq > 0 && n % seq == 0, "attention: rows not a multiple of seq");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide d");
        let dh = d / heads;
        let batch = n / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(n, d);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qt.row_slice(b * seq + i)[off..off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kt.row_slice(b * seq + j)[off..off + dh];
                        *s = scale * dot(qi, kj);
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / z;
                    }
                    let orow = &mut out.row_slice_mut(b * seq + i)[off..off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vt.row_slice(b * seq + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Feature tokenizer. For each of the `batch` rows of `coef` (`batch x d`)
    /// emits `d + 1` tokens: the `cls` row, then `coef[r, j] * w[widx[r, j]] +
    /// b[j]` for each column `j`. Output is `(batch * (d + 1)) x e`.
    pub fn tokenize(&mut self, coef: Tensor, widx: Vec<usize>, w: Var, b: Var, cls: Var) -> Var {
        let (batch, d) = coef.shape();
        let e = self.shape(cls).1;
        assert_eq!(self.shape(cls).0, 1);
        assert_eq!(self.shape(b), (d, e), "tokenize: bias table shape");
        assert_eq!(self.shape(w).1, e, "tokenize: weight table width");
        assert_eq!(widx.len(), batch * d, "tokenize: index count");
        let wt = self.value(w);
        assert!(widx.iter().all(|&i| i < wt.rows()), "tokenize: index out of range");
        let bt = self.value(b);
        let ct = self.value(cls);
        let seq = d + 1;
        let mut out = Tensor::zeros(batch * seq, e);
        for r in 0..batch {
            out.row_slice_mut(r * seq).copy_from_slice(ct.data());
            for j in 0..d {
                let c = coef.get(r, j);
                let wr = wt.row_slice(widx[r * d + j]);
                let br = bt.row_slice(j);
                let orow = out.row_slice_mut(r * seq + 1 + j);
                for k in 0..e {
                    orow[k] = c * wr[k] + br[k];
                }
            }
        }
        let rg = self.any_grad(&[w, b, cls]);
        self.push(
            out,
            Op::Tokenize {
                coef,
                widx,
                w,
                b,
                cls,
            },
            rg,
        )
    }

    /// Pairwise squared Euclidean distances, `n x p` and `m x p` -> `n x m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "sq_dist: feature dims differ");
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for i in 0..ta.rows() {
            let ai = ta.row_slice(i);
            for j in 0..tb.rows() {
                let bj = tb.row_slice(j);
                let d: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, j, d);
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::SqDist(a, b), rg)
    }

    /// Matérn-3/2 covariance from squared distances:
    /// `variance * (1 + sqrt(3) r / l) * exp(-sqrt(3) r / l)`.
    pub fn matern32(&mut self, d2: Var, lengthscale: Var, variance: Var) -> Var {
        let l = self.value(lengthscale).item();
        let s2 = self.value(variance).item();
        let out = self.value(d2).map(|d| matern32_value(d, l, s2));
        let rg = self.any_grad(&[d2, lengthscale, variance]);
        self.push(
            out,
            Op::Matern32 {
                d2,
                lengthscale,
                variance,
            },
            rg,
        )
    }

    /// Lower Cholesky factor of the symmetric matrix `a + jitter * I`,
    /// using the jitter schedule of [`linalg::cholesky`].
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let (l, _) = linalg::cholesky(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(l, Op::Cholesky(a), rg))
    }

    /// `L^{-1} B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        assert_eq!(self.shape(l).0, self.shape(b).0, "solve_lower: row mismatch");
        let out = linalg::solve_lower(self.value(l), self.value(b));
        let rg = self.any_grad(&[l, b]);
        self.push(out, Op::SolveLower(l, b), rg)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradient buffers of every node reachable from the scalar
    /// `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(r, c));
        f(g);
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Temporarily take the op out so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_value = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
        let out = &out_value;
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let bt = self.value(b).clone();
                    self.accum_with(a, |ga| gemm(g, false, &bt, true, ga, 1.0));
                }
                if self.requires_grad(b) {
                    let at = self.value(a).clone();
                    self.accum_with(b, |gb| gemm(&at, true, g, false, gb, 1.0));
                }
            }
            Op::Transpose(a) => self.accum(*a, g.transpose()),
            Op::Add(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = zip_map(g, self.value(b), |x, y| x * y);
                let gb = zip_map(g, self.value(a), |x, y| x * y);
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::AddRow(a, row) => {
                self.accum(*a, g.clone());
                let mut s = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (o, v) in s.iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.accum(*row, Tensor::row(s));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(*a, g.map(|v| v * s));
            }
            Op::AddConst(a) => self.accum(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.value(s).item();
                let gs: f64 = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).sum();
                self.accum(a, g.map(|v| v * sv));
                self.accum(s, Tensor::scalar(gs));
            }
            Op::AddScalar(a, s) => {
                self.accum(*a, g.clone());
                self.accum(*s, Tensor::scalar(g.sum()));
            }
            Op::Exp(a) => self.accum(*a, zip_map(g, out, |x, y| x * y)),
            Op::Ln(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x / y);
                self.accum(*a, d);
            }
            Op::Sqrt(a) => self.accum(*a, zip_map(g, out, |x, y| 0.5 * x / y)),
            Op::Square(a) => {
                let d = zip_map(g, self.value(*a), |x, y| 2.0 * x * y);
                self.accum(*a, d);
            }
            Op::Recip(a) => self.accum(*a, zip_map(g, out, |x, y| -x * y * y)),
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * sigmoid(y));
                self.accum(*a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x * gelu_parts(y).1);
                self.accum(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accum(*a, Tensor::full(r, c, g.item()));
            }
            Op::RowSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    d.row_slice_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                self.accum(*a, d);
            }
            Op::ColSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i).copy_from_slice(g.data());
                }
                self.accum(*a, d);
            }
            Op::Diag(a) => {
                let n = self.shape(*a).0;
                let mut d = Tensor::zeros(n, n);
                for k in 0..n {
                    d.set(k, k, g.get(k, 0));
                }
                self.accum(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let slice = g.data()[row * c..(row + r) * c].to_vec();
                    self.accum(p, Tensor::new(r, c, slice).expect("consistent"));
                    row += r;
                }
            }
            Op::SelectRows(a, idx) => {
                let a = *a;
                self.accum_with(a, |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(k)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.shape();
                let gam = self.value(*gamma).data().to_vec();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = Tensor::zeros(r, c);
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let gi = g.row_slice(i);
                    let hi = xhat.row_slice(i);
                    for j in 0..c {
                        gg[j] += gi[j] * hi[j];
                        gb[j] += gi[j];
                        dxhat[j] = gi[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dh = dxhat.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    let row = gx.row_slice_mut(i);
                    for j in 0..c {
                        row[j] = inv_std[i] * (dxhat[j] - mean_d - hi[j] * mean_dh);
                    }
                }
                self.accum(*x, gx);
                self.accum(*gamma, Tensor::row(gg));
                self.accum(*beta, Tensor::row(gb));
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v, seq, heads) = (*q, *k, *v, *seq, *heads);
                let (n, d) = self.shape(q);
                let dh = d / heads;
                let batch = n / seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
                let mut gq = Tensor::zeros(n, d);
                let mut gk = Tensor::zeros(n, d);
                let mut gv = Tensor::zeros(n, d);
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let gi = &g.row_slice(b * seq + i)[off..off + dh];
                            for j in 0..seq {
                                let vj = &vt.row_slice(b * seq + j)[off..off + dh];
                                dp[j] = dot(gi, vj);
                                let gvj = &mut gv.row_slice_mut(b * seq + j)[off..off + dh];
                                for (o, x) in gvj.iter_mut().zip(gi) {
                                    *o += p[j] * x;
                                }
                            }
                            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = qt.row_slice(b * seq + i)[off..off + dh].to_vec();
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kt.row_slice(b * seq + j)[off..off + dh];
                                let gqi = &mut gq.row_slice_mut(b * seq + i)[off..off + dh];
                                for (o, x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk.row_slice_mut(b * seq + j)[off..off + dh];
                                for (o, x) in gkj.iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accum(q, gq);
                self.accum(k, gk);
                self.accum(v, gv);
            }
            Op::Tokenize {
                coef,
                widx,
                w,
                b,
                cls,
            } => {
                let (batch, d) = coef.shape();
                let e = g.cols();
                let seq = d + 1;
                let (wr, wc) = self.shape(*w);
                let mut gw = Tensor::zeros(wr, wc);
                let mut gb = Tensor::zeros(d, e);
                let mut gc = vec![0.0; e];
                for r in 0..batch {
                    for (o, v) in gc.iter_mut().zip(g.row_slice(r * seq)) {
                        *o += v;
                    }
                    for j in 0..d {
                        let c = coef.get(r, j);
                        let gr = g.row_slice(r * seq + 1 + j);
                        for (o, v) in gb.row_slice_mut(j).iter_mut().zip(gr) {
                            *o += v;
                        }
                        for (o, v) in gw.row_slice_mut(widx[r * d + j]).iter_mut().zip(gr) {
                            *o += c * v;
                        }
                    }
                }
                self.accum(*w, gw);
                self.accum(*b, gb);
                self.accum(*cls, Tensor::row(gc));
            }
            Op::SqDist(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let p = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), p);
                let mut gb = Tensor::zeros(tb.rows(), p);
                for i in 0..ta.rows() {
                    for j in 0..tb.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..p {
                            let diff = gij * (ta.get(i, k) - tb.get(j, k));
                            ga.data_mut()[i * p + k] += diff;
                            gb.data_mut()[j * p + k] -= diff;
                        }
                    }
                }
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::Matern32 {
                d2,
                lengthscale,
                variance,
            } => {
                let l = self.value(*lengthscale).item();
                let s2 = self.value(*variance).item();
                let sqrt3 = 3f64.sqrt();
                let dist = self.value(*d2);
                let mut gd = Tensor::zeros(dist.rows(), dist.cols());
                let mut gl = 0.0;
                let mut gs = 0.0;
                for (idx, (&dd, &gv)) in dist.data().iter().zip(g.data()).enumerate() {
                    let r = dd.max(0.0).sqrt();
                    let e = (-sqrt3 * r / l).exp();
                    gd.data_mut()[idx] = gv * (-1.5 * s2 / (l * l) * e);
                    gl += gv * s2 * 3.0 * dd.max(0.0) / (l * l * l) * e;
                    gs += gv * (1.0 + sqrt3 * r / l) * e;
                }
                self.accum(*d2, gd);
                self.accum(*lengthscale, Tensor::scalar(gl));
                self.accum(*variance, Tensor::scalar(gs));
            }
            Op::Cholesky(a) => {
                // With P = Phi(L^T G), dA = sym(L^{-T} P L^{-1}), where Phi
                // keeps the lower triangle and halves the diagonal.
                let n = out.rows();
                let mut p = Tensor::zeros(n, n);
                gemm(out, true, g, false, &mut p, 0.0);
                for r in 0..n {
                    for c in 0..n {
                        if c > r {
                            p.set(r, c, 0.0);
                        } else if c == r {
                            p.set(r, c, 0.5 * p.get(r, c));
                        }
                    }
                }
                // S = L^{-T} P L^{-1} = L^{-T} (L^{-T} P^T)^T
                let tmp = linalg::solve_lower_transpose(out, &p.transpose());
                let s = linalg::solve_lower_transpose(out, &tmp.transpose());
                self.accum(*a, linalg::symmetrize(&s));
            }
            Op::SolveLower(l, b) => {
                let (l, b) = (*l, *b);
                let lt = self.value(l).clone();
                let gb = linalg::solve_lower_transpose(&lt, g);
                if self.requires_grad(l) {
                    let n = lt.rows();
                    let mut gl = Tensor::zeros(n, n);
                    gemm(&gb, false, out, true, &mut gl, 0.0);
                    for r in 0..n {
                        for c in 0..n {
                            let v = if c > r { 0.0 } else { -gl.get(r, c) };
                            gl.set(r, c, v);
                        }
                    }
                    self.accum(l, gl);
                }
                self.accum(b, gb);
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].value = out_value;
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

pub(crate) fn matern32_value(d2: f64, lengthscale: f64, variance: f64) -> f64 {
    let r = d2.max(0.0).sqrt();
    let a = 3f64.sqrt() * r / lengthscale;
    variance * (1.0 + a) * (-a).exp()
}

/// Jitter constant added to prior diagonals so that sparse and exact GP
/// computations factor the same covariance.
pub const PRIOR_JITTER: f64 = JITTER;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::row(vec![1.0, 2.0]));
        let sq = g.mul(p, p);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::row(vec![1.0, -3.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.exp(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::row(vec![1.0, 2.0]));
        let sq = g.square(p);
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(3.0));
        let loss = g.square(p);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).item(), 6.0);
    }

    #[test]
    fn nan_in_backward_is_an_error() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::scalar(0.0));
        let s = g.sqrt(p);
        let loss = g.sum(s);
        assert!(matches!(g.backward(loss), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-8, 0.01, 1.0, 25.0, 100.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
