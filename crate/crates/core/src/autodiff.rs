//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("sqrt of negative value {0}")]
    NegativeSqrt(f64),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    /// Leading dimension and product of the rest (a 1-D tensor is `[n, 1]`).
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(AutodiffError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// `c = alpha a b + beta c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices covering the strided extents, and `c` is
    // a contiguous row-major m×n block disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics returned by a training-mode batch norm so the caller can
/// update running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Concat(Vec<Var>),
    IndexSelect(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Huber(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    AddRow(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, name)?;
        let out = ta.zip(tb, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&neg) = self.value(a).values.iter().find(|&&x| x < 0.0) {
            return Err(AutodiffError::NegativeSqrt(neg));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    /// Elementwise Huber loss of a residual: quadratic for `|a| ≤ delta`,
    /// linear beyond.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(a, |x| huber_value(x, delta), Op::Huber(a, delta))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = if t.numel() == 0 {
            0.0
        } else {
            t.values.iter().sum::<f64>() / t.numel() as f64
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor {
            shape: shape.to_vec(),
            values: t.values.clone(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.values, k as isize, 1, &tb.values, n as isize, 1, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], values: out }, Op::MatMul(a, b), rg))
    }

    /// Batched `[e, m, k] × [e, k, n] → [e, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 3 || tb.shape.len() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[1] {
            return Err(AutodiffError::Shape {
                op: "bmm",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (e, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
        let mut out = vec![0.0; e * m * n];
        for i in 0..e {
            gemm(
                m,
                k,
                n,
                &ta.values[i * m * k..],
                k as isize,
                1,
                &tb.values[i * k * n..],
                n as isize,
                1,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![e, m, n], values: out }, Op::Bmm(a, b), rg))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.rows_cols();
        if ta.shape.len() != 2 || tr.numel() != n {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: ta.shape.clone(),
                rhs: tr.shape.clone(),
            });
        }
        let mut out = ta.values.clone();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&tr.values) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor { shape: ta.shape.clone(), values: out }, Op::AddRow(a, row), rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat of nothing".into()))?;
        let m = self.value(*first).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 2 || t.shape[0] != m {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&t.values[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                values: out,
            },
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Gathers rows (along dimension 0): `out[i] = a[idx[i]]`.
    pub fn index_select(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        let (m, w) = t.rows_cols();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            if i >= m {
                return Err(AutodiffError::Index { index: i, len: m });
            }
            out.extend_from_slice(&t.values[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, values: out }, Op::IndexSelect(a, idx), rg))
    }

    /// Sums rows into `n_out` buckets: `out[idx[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, w) = t.rows_cols();
        if idx.len() != m {
            return Err(AutodiffError::Shape {
                op: "scatter_add",
                lhs: t.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; n_out * w];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(AutodiffError::Index { index: i, len: n_out });
            }
            for (o, v) in out[i * w..(i + 1) * w].iter_mut().zip(&t.values[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        let mut shape = t.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = n_out;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, values: out }, Op::ScatterAdd(a, idx), rg))
    }

    /// Per-column normalization of `[m, f]`. Training mode uses batch
    /// statistics and returns them; eval mode uses the supplied running
    /// estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        let (m, f) = tx.rows_cols();
        if tx.shape.len() != 2 || self.value(gamma).numel() != f || self.value(beta).numel() != f {
            return Err(AutodiffError::Shape {
                op: "batch_norm",
                lhs: tx.shape.clone(),
                rhs: self.value(gamma).shape.clone(),
            });
        }
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(AutodiffError::Invalid("training batch norm needs at least 2 rows".into()));
        }
        let (mean, var_b, stats) = if train {
            let mut mean = vec![0.0; f];
            for r in 0..m {
                for (mu, v) in mean.iter_mut().zip(&tx.values[r * f..(r + 1) * f]) {
                    *mu += v;
                }
            }
            mean.iter_mut().for_each(|mu| *mu /= m as f64);
            let mut ss = vec![0.0; f];
            for r in 0..m {
                for j in 0..f {
                    let d = tx.values[r * f + j] - mean[j];
                    ss[j] += d * d;
                }
            }
            let var_b: Vec<f64> = ss.iter().map(|s| s / m as f64).collect();
            let var_u: Vec<f64> = ss.iter().map(|s| s / (m - 1) as f64).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: var_u,
            };
            (mean, var_b, Some(stats))
        } else {
            if running.0.len() != f || running.1.len() != f {
                return Err(AutodiffError::Invalid("running statistics have wrong length".into()));
            }
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (&self.value(gamma).values, &self.value(beta).values);
        let mut xhat = vec![0.0; m * f];
        let mut out = vec![0.0; m * f];
        for r in 0..m {
            for j in 0..f {
                let h = (tx.values[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor { shape, values: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout with a mask drawn from `seed`; identity in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return self.reshape(a, &self.value(a).shape.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Reverse sweep from a scalar output. Gradients are then read with
    /// [`Tape::grad`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let shape = self.value(out).shape.clone();
        if self.value(out).numel() != 1 {
            return Err(AutodiffError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.values.iter_mut().zip(&t.values) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                if needs(*a) {
                    acc(*a, g.zip(tb, |x, y| x / y));
                }
                if needs(*b) {
                    let gb = Tensor {
                        shape: tb.shape.clone(),
                        values: g
                            .values
                            .iter()
                            .zip(&node.value.values)
                            .zip(&tb.values)
                            .map(|((gx, q), y)| -gx * q / y)
                            .collect(),
                    };
                    acc(*b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g.values, n as isize, 1, &tb.values, 1, n as isize, &mut ga, 0.0);
                    acc(*a, Tensor { shape: ta.shape.clone(), values: ga });
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ta.values, 1, k as isize, &g.values, n as isize, 1, &mut gb, 0.0);
                    acc(*b, Tensor { shape: tb.shape.clone(), values: gb });
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (e, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
                if needs(*a) {
                    let mut ga = vec![0.0; e * m * k];
                    for j in 0..e {
                        gemm(
                            m,
                            n,
                            k,
                            &g.values[j * m * n..],
                            n as isize,
                            1,
                            &tb.values[j * k * n..],
                            1,
                            n as isize,
                            &mut ga[j * m * k..(j + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(*a, Tensor { shape: ta.shape.clone(), values: ga });
                }
                if needs(*b) {
                    let mut gb = vec![0.0; e * k * n];
                    for j in 0..e {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.values[j * m * k..],
                            1,
                            k as isize,
                            &g.values[j * m * n..],
                            n as isize,
                            1,
                            &mut gb[j * k * n..(j + 1) * k * n],
                            0.0,
                        );
                    }
                    acc(*b, Tensor { shape: tb.shape.clone(), values: gb });
                }
            }
            Op::Sum(a) => acc(*a, Tensor::full(&val(*a).shape, g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel().max(1) as f64;
                acc(*a, Tensor::full(&val(*a).shape, g.item() / n));
            }
            Op::Relu(a) => acc(*a, g.zip(val(*a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::Square(a) => acc(*a, g.zip(val(*a), |x, v| 2.0 * x * v)),
            Op::Sqrt(a) => acc(*a, g.zip(&node.value, |x, s| 0.5 * x / s)),
            Op::Sin(a) => acc(*a, g.zip(val(*a), |x, v| x * v.cos())),
            Op::Cos(a) => acc(*a, g.zip(val(*a), |x, v| -x * v.sin())),
            Op::MulConst(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddConst(a) | Op::Reshape(a) => acc(
                *a,
                Tensor {
                    shape: val(*a).shape.clone(),
                    values: g.values.clone(),
                },
            ),
            Op::Huber(a, delta) => acc(*a, g.zip(val(*a), |x, v| x * huber_grad(v, *delta))),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if needs(*row) {
                    let n = val(*row).numel();
                    let mut gr = vec![0.0; n];
                    for chunk in g.values.chunks(n) {
                        for (s, x) in gr.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    acc(*row, Tensor { shape: val(*row).shape.clone(), values: gr });
                }
            }
            Op::Concat(parts) => {
                let m = g.shape[0];
                let total = g.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.values[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor { shape: vec![m, w], values: gp });
                    }
                    off += w;
                }
            }
            Op::IndexSelect(a, idx) => {
                let ta = val(*a);
                let (_, w) = ta.rows_cols();
                let mut ga = vec![0.0; ta.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, x) in ga[src * w..(src + 1) * w].iter_mut().zip(&g.values[r * w..(r + 1) * w]) {
                        *o += x;
                    }
                }
                acc(*a, Tensor { shape: ta.shape.clone(), values: ga });
            }
            Op::ScatterAdd(a, idx) => {
                let ta = val(*a);
                let (_, w) = ta.rows_cols();
                let mut ga = Vec::with_capacity(ta.numel());
                for &dst in idx.iter() {
                    ga.extend_from_slice(&g.values[dst * w..(dst + 1) * w]);
                }
                acc(*a, Tensor { shape: ta.shape.clone(), values: ga });
            }
            Op::Dropout(a, mask) => acc(
                *a,
                Tensor {
                    shape: g.shape.clone(),
                    values: g.values.iter().zip(mask).map(|(x, m)| x * m).collect(),
                },
            ),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (m, f) = g.rows_cols();
                let gam = &val(*gamma).values;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..m {
                    for j in 0..f {
                        let gv = g.values[r * f + j];
                        dgamma[j] += gv * xhat[r * f + j];
                        dbeta[j] += gv;
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * f];
                    if *train {
                        let mf = m as f64;
                        for r in 0..m {
                            for j in 0..f {
                                let dxhat = g.values[r * f + j] * gam[j];
                                dx[r * f + j] = inv_std[j] / mf
                                    * (mf * dxhat - gam[j] * dbeta[j] - xhat[r * f + j] * gam[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..f {
                                dx[r * f + j] = g.values[r * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, Tensor { shape: g.shape.clone(), values: dx });
                }
                acc(*gamma, Tensor { shape: val(*gamma).shape.clone(), values: dgamma });
                acc(*beta, Tensor { shape: val(*beta).shape.clone(), values: dbeta });
            }
        }
    }
}

pub fn huber_value(a: f64, delta: f64) -> f64 {
    let m = a.abs();
    if m <= delta {
        0.5 * a * a
    } else {
        delta * (m - 0.5 * delta)
    }
}

/// Derivative of [`huber_value`]; the quadratic branch owns `|a| = delta`.
pub fn huber_grad(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        a
    } else {
        delta * a.signum()
    }
}

/// Compares tape gradients of a scalar function with central differences.
/// Returns `max_i |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |xs: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(xs);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.values[i] += eps;
        let mut lo = x.clone();
        lo.values[i] -= eps;
        let fd = (eval(hi)? - eval(lo)?) / (2.0 * eps);
        let err = (analytic.values[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Values bounded away from zero so kinked primitives are smooth.
    fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
        let mut t = random(shape, seed, 0.2, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for v in t.values_mut() {
            if rng.gen::<bool>() {
                *v = -*v;
            }
        }
        t
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn huber_values_and_slopes() {
        assert_eq!(huber_value(0.5, 1.0), 0.125);
        assert_eq!(huber_value(2.0, 1.0), 1.5);
        assert_eq!(huber_grad(2.0, 1.0), 1.0);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
        assert_eq!(huber_grad(1.0, 1.0), 1.0);
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![2.0, 0.5]));
        let h = t.huber(x, 1.0);
        let s = t.sum(h);
        t.backward(s).unwrap();
        assert_eq!(t.value(h).values(), &[1.5, 0.125]);
        assert_eq!(t.grad(x).unwrap().values(), &[1.0, 0.5]);
    }

    #[test]
    fn relu_kink_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let x = random(&[10], 1, -2.0, 2.0);
        let err = grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_relu_chain_grad_check() {
        let w1 = random(&[4, 6], 42, -1.0, 1.0);
        let w2 = random(&[6, 3], 43, -1.0, 1.0);
        let x = random(&[5, 4], 44, -1.0, 1.0);
        let err = grad_check(
            |t, x| {
                let a = t.constant(w1.clone());
                let b = t.constant(w2.clone());
                let h = t.matmul(x, a)?;
                let h = t.relu(h);
                let o = t.matmul(h, b)?;
                let o = t.square(o);
                Ok(t.sum(o))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = random(&[4], 3, -1.0, 1.0);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let c = t.constant(Tensor::scalar(2.5));
        t.backward(c).unwrap();
        assert!(t.grad(xv).is_none());
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(2.5))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 3]));
        let b = t.param(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        let n = t.param(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(t.sqrt(n), Err(AutodiffError::NegativeSqrt(_))));
        let m = t.matmul(a, b).unwrap();
        assert!(matches!(t.backward(m), Err(AutodiffError::NotScalar(_))));
    }

    /// Every primitive through one smooth scalar objective, checked with
    /// respect to each of its inputs.
    fn primitive_objectives() -> Vec<(&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> {
        let other = away_from_zero(&[4, 3], 99);
        let mat = random(&[3, 5], 98, -1.0, 1.0);
        let batch = random(&[2, 3, 2], 97, -1.0, 1.0);
        let row = random(&[3], 96, -1.0, 1.0);
        let gamma = random(&[3], 95, 0.5, 1.5);
        let idx: Arc<[usize]> = Arc::from(vec![3, 0, 0, 2]);
        let sidx: Arc<[usize]> = Arc::from(vec![1, 1, 0, 2]);
        let weights = random(&[4, 3], 94, -1.0, 1.0);
        let w2 = weights.clone();
        let wsum = move |t: &mut Tape, v: Var| -> Result<Var> {
            let c = t.constant(w2.clone());
            let p = t.mul(v, c)?;
            Ok(t.sum(p))
        };
        let ws = std::sync::Arc::new(wsum);
        macro_rules! with_w {
            ($body:expr) => {{
                let ws = ws.clone();
                Box::new(move |t: &mut Tape, x: Var| -> Result<Var> {
                    let v = $body(t, x)?;
                    ws(t, v)
                }) as Box<dyn Fn(&mut Tape, Var) -> Result<Var>>
            }};
        }
        let o1 = other.clone();
        let o2 = other.clone();
        let o3 = other.clone();
        let o4 = other.clone();
        let o5 = other.clone();
        let r1 = row.clone();
        let g1 = gamma.clone();
        let g2 = gamma.clone();
        let b2 = row.clone();
        vec![
            ("add", vec![4, 3], with_w!(|t: &mut Tape, x| { let c = t.constant(o1.clone()); t.add(x, c) })),
            ("sub", vec![4, 3], with_w!(|t: &mut Tape, x| { let c = t.constant(o2.clone()); t.sub(c, x) })),
            ("mul", vec![4, 3], with_w!(|t: &mut Tape, x| { let c = t.constant(o3.clone()); t.mul(x, x).and_then(|s| t.mul(s, c)) })),
            ("div_num", vec![4, 3], with_w!(|t: &mut Tape, x| { let c = t.constant(o4.clone()); t.div(x, c) })),
            ("div_den", vec![4, 3], with_w!(|t: &mut Tape, x| { let c = t.constant(o5.clone()); t.div(c, x) })),
            ("matmul", vec![4, 3], Box::new(move |t: &mut Tape, x: Var| {
                let m = t.constant(mat.clone());
                let p = t.matmul(x, m)?;
                let s = t.square(p);
                Ok(t.sum(s))
            })),
            ("bmm_lhs", vec![2, 2, 3], Box::new({ let b = batch.clone(); move |t: &mut Tape, x: Var| {
                let c = t.constant(b.clone());
                let p = t.bmm(x, c)?;
                let s = t.square(p);
                Ok(t.sum(s))
            }})),
            ("bmm_rhs", vec![2, 3, 2], Box::new(|t: &mut Tape, x: Var| {
                let c = t.constant(random(&[2, 2, 3], 93, -1.0, 1.0));
                let p = t.bmm(c, x)?;
                let s = t.square(p);
                Ok(t.sum(s))
            })),
            ("mean", vec![4, 3], Box::new(|t: &mut Tape, x: Var| { let s = t.square(x); Ok(t.mean(s)) })),
            ("relu", vec![4, 3], with_w!(|t: &mut Tape, x| Ok::<_, AutodiffError>(t.relu(x)))),
            ("sqrt", vec![4, 3], with_w!(|t: &mut Tape, x| { let s = t.square(x); let s = t.add_const(s, 0.5); t.sqrt(s) })),
            ("sin", vec![4, 3], with_w!(|t: &mut Tape, x| Ok::<_, AutodiffError>(t.sin(x)))),
            ("cos", vec![4, 3], with_w!(|t: &mut Tape, x| Ok::<_, AutodiffError>(t.cos(x)))),
            ("mul_const", vec![4, 3], with_w!(|t: &mut Tape, x| Ok::<_, AutodiffError>(t.mul_const(x, -1.7)))),
            ("huber", vec![4, 3], Box::new(|t: &mut Tape, x: Var| { let y = t.mul_const(x, 2.0); let h = t.huber(y, 1.0); Ok(t.sum(h)) })),
            ("add_row", vec![4, 3], with_w!(|t: &mut Tape, x| { let r = t.constant(r1.clone()); t.add_row(x, r) })),
            ("add_row_bias", vec![3], Box::new(|t: &mut Tape, x: Var| {
                let m = t.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
                let y = t.add_row(m, x)?;
                let s = t.square(y);
                Ok(t.sum(s))
            })),
            ("concat", vec![4, 3], Box::new(|t: &mut Tape, x: Var| {
                let s = t.square(x);
                let c = t.concat(&[x, s, x])?;
                let c = t.sin(c);
                Ok(t.sum(c))
            })),
            ("index_select", vec![4, 3], Box::new({ let idx = idx.clone(); move |t: &mut Tape, x: Var| {
                let g = t.index_select(x, idx.clone())?;
                let s = t.square(g);
                let s = t.sin(s);
                Ok(t.sum(s))
            }})),
            ("scatter_add", vec![4, 3], Box::new({ let sidx = sidx.clone(); move |t: &mut Tape, x: Var| {
                let g = t.scatter_add(x, sidx.clone(), 3)?;
                let s = t.square(g);
                Ok(t.sum(s))
            }})),
            ("reshape", vec![4, 3], Box::new(|t: &mut Tape, x: Var| {
                let r = t.reshape(x, &[2, 6])?;
                let m = t.constant(random(&[6, 2], 5, -1.0, 1.0));
                let p = t.matmul(r, m)?;
                let s = t.square(p);
                Ok(t.sum(s))
            })),
            ("batch_norm_train", vec![4, 3], Box::new({ let g = g1.clone(); let ws = ws.clone(); move |t: &mut Tape, x: Var| {
                let gv = t.constant(g.clone());
                let bv = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
                let (y, _) = t.batch_norm(x, gv, bv, Mode::Train, (&[], &[]))?;
                ws(t, y)
            }})),
            ("batch_norm_eval", vec![4, 3], Box::new({ let g = g2.clone(); let ws = ws.clone(); move |t: &mut Tape, x: Var| {
                let gv = t.constant(g.clone());
                let bv = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
                let (y, _) = t.batch_norm(x, gv, bv, Mode::Eval, (&[0.1, 0.2, -0.1], &[0.5, 1.5, 2.0]))?;
                ws(t, y)
            }})),
            ("batch_norm_affine", vec![3], Box::new({ let b = b2.clone(); let ws = ws.clone(); move |t: &mut Tape, x: Var| {
                let xs = t.constant(random(&[4, 3], 11, -1.0, 1.0));
                let bv = t.constant(b.clone());
                let (y, _) = t.batch_norm(xs, x, bv, Mode::Train, (&[], &[]))?;
                ws(t, y)
            }})),
            ("dropout", vec![4, 3], with_w!(|t: &mut Tape, x| t.dropout(x, 0.2, Mode::Train, 17))),
        ]
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        for seed in 0..10u64 {
            for (name, shape, f) in primitive_objectives() {
                let x = away_from_zero(&shape, 1000 + seed);
                let err = grad_check(|t, v| f(t, v), &x, 1e-6).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn batch_norm_statistics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        let g = t.param(Tensor::vector(vec![1.0]));
        let b = t.param(Tensor::vector(vec![0.0]));
        let (y, stats) = t.batch_norm(x, g, b, Mode::Train, (&[], &[])).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![2.0]);
        let v = t.value(y).values();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((v[0] + expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes() {
        let x = random(&[50, 4], 8, 0.5, 1.0);
        let run = |mode, seed| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let d = t.dropout(v, 0.2, mode, seed).unwrap();
            t.value(d).clone()
        };
        assert_eq!(run(Mode::Eval, 1), x);
        assert_eq!(run(Mode::Train, 5), run(Mode::Train, 5));
        assert_ne!(run(Mode::Train, 5), run(Mode::Train, 6));
        let dropped = run(Mode::Train, 5).values().iter().filter(|&&v| v == 0.0).count();
        assert!(dropped > 10 && dropped < 70, "{dropped}");
    }

    #[test]
    fn backward_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let x = t.param(random(&[8, 5], 3, -1.0, 1.0));
            let w = t.param(random(&[5, 4], 4, -1.0, 1.0));
            let h = t.matmul(x, w).unwrap();
            let h = t.relu(h);
            let idx: Arc<[usize]> = Arc::from(vec![0, 1, 0, 3, 2, 2, 1, 0]);
            let s = t.scatter_add(h, idx, 4).unwrap();
            let s = t.square(s);
            let l = t.mean(s);
            t.backward(l).unwrap();
            (t.grad(x).unwrap().clone(), t.grad(w).unwrap().clone())
        };
        let (a, b) = (build(), build());
        assert_eq!(a.0.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.0.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    proptest! {
        #[test]
        fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let a = random(&[m, k], seed, -1.0, 1.0);
            let b = random(&[k, n], seed + 1, -1.0, 1.0);
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.matmul(va, vb).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a.values()[i * k + p] * b.values()[p * n + j]).sum();
                    prop_assert!((t.value(c).values()[i * n + j] - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn scatter_is_adjoint_of_gather(seed in 0u64..1000, len in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
            let x = random(&[5, 2], seed, -1.0, 1.0);
            let y = random(&[len, 2], seed + 7, -1.0, 1.0);
            let mut t = Tape::new();
            let (vx, vy) = (t.constant(x.clone()), t.constant(y.clone()));
            let g = t.index_select(vx, Arc::from(idx.clone())).unwrap();
            let s = t.scatter_add(vy, Arc::from(idx), 5).unwrap();
            let lhs: f64 = t.value(g).values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
            let rhs: f64 = t.value(s).values().iter().zip(x.values()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
