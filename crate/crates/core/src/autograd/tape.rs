//! Reverse-mode tape over row-major `f64` buffers.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep. Constants can
//! borrow their storage (frozen encoder weights are never copied per pass).

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Input and `tanh` of the inner polynomial, kept for the backward pass.
    Gelu(Var, Vec<f64>),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, rest @ ..] => (*m, rest.iter().product()),
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (k, 1), b, (n, 1), m, k, n, out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_t_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (k, 1), b, (1, k), m, k, n, out);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn t_matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, (1, k), b, (n, 1), k, m, n, out);
}

/// out[m×n] += A[m×k] · B[k×n] with (row, column) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(out.len() >= m * n && a.len() >= m * k && b.len() >= k * n, "gemm buffers too small");
    // SAFETY: the slices cover every index the strides address: A spans
    // (m-1)*sa.0 + (k-1)*sa.1 < a.len(), likewise B and out.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("{op}: NaN input")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Registers a tensor, borrowing its storage. `requires_grad` follows the tensor.
    pub fn input(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Registers a tensor under a different shape of equal element count.
    pub fn input_as(&mut self, t: &'a Tensor, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("input_as", t.shape(), &shape));
        }
        Ok(self.push(shape, Cow::Borrowed(t.data()), t.requires_grad(), Op::Leaf))
    }

    /// Borrowed constant that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: &'a [f64]) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, Cow::Borrowed(data), false, Op::Leaf))
    }

    /// Owned leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("leaf", &shape, &[data.len()]));
        }
        Ok(self.push(shape, Cow::Owned(data), requires_grad, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_t", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), rg, Op::MatMulT(a, b)))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(name, sa, sb));
        }
        Ok((sa.to_vec(), self.requires_grad(a) || self.requires_grad(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.elementwise(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.elementwise(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Mul(a, b)))
    }

    /// Adds a length-`n` row to every row of an `[m×n]` node.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), m * n);
        let rg = self.requires_grad(x) || self.requires_grad(row);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), rg, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, Cow::Owned(out), rg, Op::Scale(x, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| (GELU_C * (v + 0.044715 * v * v * v)).tanh())
            .collect();
        let out = self.value(x).iter().zip(&t).map(|(&v, t)| 0.5 * v * (1.0 + t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        let t = if rg { t } else { Vec::new() };
        self.push(shape, Cow::Owned(out), rg, Op::Gelu(x, t))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, Cow::Owned(out), rg, Op::Tanh(x))
    }

    /// Row-wise layer normalization with per-feature gain and bias.
    ///
    /// A zero-variance row normalizes to zeros, so the output is `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax", self.value(x))?;
        let (_, n) = rows_cols(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        for (o, i) in out.chunks_mut(n).zip(self.value(x).chunks(n)) {
            softmax_row(i, o);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Softmax(x)))
    }

    /// Multi-head scaled dot-product attention over `[tokens×width]` inputs.
    /// Head `h` uses columns `h*dh..(h+1)*dh`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let (sk, sv) = (self.shape(k), self.shape(v));
        if sq.len() != 2 || sk != sq.as_slice() || sv != sq.as_slice() {
            return Err(Error::dim("attention", &sq, sk));
        }
        let (n, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    *s = dot(qi, kj) * scale;
                }
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                softmax_row(&scores, p);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(
            sq,
            Cow::Owned(out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Stacks 2-D nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let cols = rows_cols(self.shape(*first)).1;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
            rg |= self.requires_grad(p);
        }
        Ok(self.push(vec![rows, cols], Cow::Owned(out), rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a 2-D node.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if start >= end || end > m {
            return Err(Error::Index { index: end, len: m });
        }
        let out = self.value(x)[start * n..end * n].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![end - start, n], Cow::Owned(out), rg, Op::SliceRows(x, start)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::Reshape(x)))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return Err(Error::Numeric(format!("cannot normalize row with norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::NormalizeRows { x, norms }))
    }

    /// Mean over rows of `-ln p[row, label]`; each row of `p` must be a distribution.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(p));
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", self.shape(p), &[labels.len()]));
        }
        let ps = self.value(p);
        let mut total = 0.0;
        for (row, &y) in ps.chunks(k).zip(labels) {
            if y >= k {
                return Err(Error::Index { index: y, len: k });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::Numeric(format!("cross_entropy input is not a distribution (sum {s})")));
            }
            total -= row[y].ln();
        }
        let value = total / m as f64;
        if !value.is_finite() {
            return Err(Error::Numeric("cross_entropy of a zero probability".into()));
        }
        let rg = self.requires_grad(p);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![value]),
            rg,
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len() as f64;
        let s = self.value(x).iter().sum::<f64>() / len;
        let rg = self.requires_grad(x);
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Mean(x))
    }

    /// Gradient of `output` (a scalar) with respect to every node that requires grad.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", self.shape(output), &[1]));
        }
        self.backward_with_seed(output, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// through the tape. Previous gradients are cleared.
    pub fn backward_with_seed(&mut self, output: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("backward_with_seed", self.shape(output), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires_grad(output) {
            grads[output.0] = Some(seed.to_vec());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient from the last backward pass; `None` when `v` does not require
    /// grad or is not reachable from the output.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = node.shape[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_t_into(g, self.value(*b), m, n, k, &mut da);
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    t_matmul_into(self.value(*a), g, m, k, n, &mut db);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = node.shape[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, self.value(*b), m, n, k, &mut da);
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    t_matmul_into(g, self.value(*a), m, n, k, &mut db);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if wants(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                    }
                    accumulate(&mut grads[row.0], &d);
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Gelu(x, tanh) => {
                if wants(*x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .zip(tanh)
                        .map(|((g, &v), &t)| {
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain);
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, inv) in inv_std.iter().enumerate() {
                        let rows = i * n..(i + 1) * n;
                        let gr = &g[rows.clone()];
                        let xh = &xhat[rows.clone()];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, o) in dx[rows].iter_mut().enumerate() {
                            *o = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                if wants(*gain) {
                    let mut d = vec![0.0; n];
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        d.iter_mut().zip(gr.iter().zip(xh)).for_each(|(d, (a, b))| *d += a * b);
                    }
                    accumulate(&mut grads[gain.0], &d);
                }
                if wants(*bias) {
                    let mut d = vec![0.0; n];
                    for gr in g.chunks(n) {
                        d.iter_mut().zip(gr).for_each(|(d, a)| *d += a);
                    }
                    accumulate(&mut grads[bias.0], &d);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let (_, n) = rows_cols(&node.shape);
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let gi = &g[i * d + off..i * d + off + dh];
                        for j in 0..n {
                            let vj = &vs[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            dvj.iter_mut().zip(gi).for_each(|(o, a)| *o += p[j] * a);
                        }
                        let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * ks[j * d + off + c];
                                dk[j * d + off + c] += ds * qs[i * d + off + c];
                            }
                        }
                    }
                }
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if wants(*var) {
                        accumulate(&mut grads[var.0], &d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if wants(*x) {
                    let n = node.shape[1];
                    let mut d = vec![0.0; self.value(*x).len()];
                    d[start * n..start * n + g.len()].copy_from_slice(g);
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let n = g.len() / norms.len();
                    let mut d = vec![0.0; g.len()];
                    for (i, norm) in norms.iter().enumerate() {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[i * n + j] = (gr[j] - y[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::CrossEntropy { p, labels } => {
                if wants(*p) {
                    let (m, k) = rows_cols(self.shape(*p));
                    let ps = self.value(*p);
                    let mut d = vec![0.0; m * k];
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * k + y] = -g[0] / (m as f64 * ps[i * k + y]);
                    }
                    accumulate(&mut grads[p.0], &d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let len = self.value(*x).len();
                    let d = vec![g[0] / len as f64; len];
                    accumulate(&mut grads[x.0], &d);
                }
            }
        }
    }
}
