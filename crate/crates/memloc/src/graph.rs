//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs and
//! forward value, so node ids are already topologically ordered and the backward
//! sweep is a single reverse pass. Gradients only flow through nodes with a
//! trainable leaf upstream (`needs_grad`), which prunes most of the work when just
//! a handful of parameters are being optimized.
//!
//! The op set is exactly what a small pre-norm transformer and the attribution
//! methods need — nothing speculative. Each op's backward rule is validated
//! against central finite differences in the tests below.

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
    /// Extra forward values the backward rule wants (e.g. tanh for GELU).
    aux: Option<Vec<Tensor>>,
    op: Op,
}

enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp01(Var),
    Exp(Var),
    Embed { table: Var, ids: Vec<u16> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    CausalSoftmax(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather { x: Var, idx: Vec<(usize, usize)> },
    RowReplace { x: Var, row: usize, v: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, aux: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push_aux(&mut self, value: Tensor, needs_grad: bool, aux: Vec<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, aux: Some(aux), op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable input; gradients will be reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf { trainable: true })
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf { trainable: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, self.ng(a), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, self.ng(a), Op::AddScalar(a))
    }

    /// 2D + broadcast 1D bias.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_bias(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::AddBias(a, b)))
    }

    /// 2D ⊙ broadcast 1D (each row multiplied elementwise by v).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul_row(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::MulRow(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::MatMul(a, b)))
    }

    /// a @ bᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::MatMulNT(a, b)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut tanhs = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for &xi in x.data() {
            let t = (math::SQRT_2_OVER_PI * (xi + 0.044715 * xi * xi * xi)).tanh();
            tanhs.push(t);
            out.push(0.5 * xi * (1.0 + t));
        }
        let shape = x.shape().to_vec();
        let v = Tensor::new(shape.clone(), out).expect("same shape");
        let aux = Tensor::new(shape, tanhs).expect("same shape");
        self.push_aux(v, self.ng(a), vec![aux], Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::sigmoid);
        self.push(v, self.ng(a), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, self.ng(a), Op::Abs(a))
    }

    /// min(1, max(0, x)); zero gradient outside the open interval (0, 1).
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.push(v, self.ng(a), Op::Clamp01(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, self.ng(a), Op::Exp(a))
    }

    /// Gather rows of `table` (n×d) by token id; result is (ids.len()×d).
    pub fn embed(&mut self, table: Var, ids: &[u16]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("embed table must be 2D, got {:?}", t.shape())));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= n {
                return Err(Error::Shape(format!("token id {id} out of range 0..{n}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(v, self.ng(table), Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Row-wise layer norm with learned gain/shift: y = γ ⊙ (x−μ)/√(σ²+ε) + β.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.shape().len() != 2 || gv.len() != xv.cols() || bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let xh = (row[j] - mu) * inv;
                xhat.push(xh);
                out.push(gv.data()[j] * xh + bv.data()[j]);
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        let aux = vec![Tensor::new(vec![m, n], xhat)?, Tensor::vector(inv_std)];
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push_aux(v, needs, aux, Op::LayerNorm { x, gamma, beta }))
    }

    /// Softmax over each row's causal prefix: row i is a distribution over
    /// columns 0..=i, zero beyond. Input must be square (scores).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || x.rows() != x.cols() {
            return Err(Error::Shape(format!("causal_softmax needs square input, got {:?}", x.shape())));
        }
        let n = x.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = x.row(i);
            softmax_into(&row[..=i], &mut out[i * n..i * n + i + 1]);
        }
        let v = Tensor::new(vec![n, n], out)?;
        Ok(self.push(v, self.ng(a), Op::CausalSoftmax(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("softmax_rows needs 2D input, got {:?}", x.shape())));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(x.row(i), &mut out[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, self.ng(a), Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("log_softmax_rows needs 2D input, got {:?}", x.shape())));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, self.ng(a), Op::LogSoftmaxRows(a)))
    }

    /// Pick out individual elements of a rank-2 tensor; result is 1D.
    pub fn gather(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Shape(format!("gather needs 2D input, got {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in &idx {
            if i >= xv.rows() || j >= xv.cols() {
                return Err(Error::Shape(format!(
                    "gather index ({i},{j}) out of bounds for {:?}",
                    xv.shape()
                )));
            }
            out.push(xv.get2(i, j));
        }
        let v = Tensor::vector(out);
        Ok(self.push(v, self.ng(x), Op::Gather { x, idx }))
    }

    /// Copy of `x` with row `row` replaced by the 1D vector `v`.
    pub fn row_replace(&mut self, x: Var, row: usize, v: Var) -> Result<Var> {
        let value = self.value(x).with_row(row, self.value(v).data())?;
        let needs = self.ng(x) || self.ng(v);
        Ok(self.push(value, needs, Op::RowReplace { x, row, v }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let n = xv.cols();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data)?;
        Ok(self.push(v, self.ng(x), Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        Ok(self.push(v, self.ng(x), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let pv = self.value(p);
                if pv.rows() != m {
                    return Err(Error::Shape("concat_cols: row counts differ".into()));
                }
                data.extend_from_slice(pv.row(i));
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, needs, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, self.ng(a), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, self.ng(a), Op::Mean(a))
    }

    /// Reverse sweep from a scalar root. Returns a gradient per trainable leaf
    /// (and transitively per node that needed one on the way down).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = &self.nodes[root.0];
        if !rn.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                rn.value.shape()
            )));
        }
        if !rn.needs_grad {
            return Err(Error::Autodiff(
                "backward root has no trainable leaf upstream".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        grads[id] = Some(g); // keep: this is an output of backward
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g.neg())?;
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.mul(self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.mul(self.value(*a))?)?;
                    }
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, g.scale(*c))?,
                Op::AddScalar(a) => self.acc(&mut grads, *a, g)?,
                Op::AddBias(a, b) => {
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.sum_rows())?;
                    }
                    self.acc(&mut grads, *a, g)?;
                }
                Op::MulRow(a, b) => {
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.mul(self.value(*a))?.sum_rows())?;
                    }
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.mul_row(self.value(*b))?)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.matmul_nt(self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, self.value(*a).matmul_tn(&g)?)?;
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.matmul(self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.matmul_tn(self.value(*a))?)?;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let t = &node.aux.as_ref().expect("gelu saves tanh")[0];
                    let mut dx = Vec::with_capacity(x.len());
                    for ((&gi, &xi), &ti) in g.data().iter().zip(x.data()).zip(t.data()) {
                        dx.push(gi * math::gelu_prime_from_tanh(xi, ti));
                    }
                    self.acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), dx)?)?;
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    let dx = g.mul(&s.map(|si| si * (1.0 - si)))?;
                    self.acc(&mut grads, *a, dx)?;
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let dx = g.mul(&x.map(|xi| {
                        if xi > 0.0 {
                            1.0
                        } else if xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }))?;
                    self.acc(&mut grads, *a, dx)?;
                }
                Op::Clamp01(a) => {
                    let x = self.value(*a);
                    let mut dx = Vec::with_capacity(x.len());
                    for (&gi, &xi) in g.data().iter().zip(x.data()) {
                        dx.push(if xi > 0.0 && xi < 1.0 { gi } else { 0.0 });
                    }
                    self.acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), dx)?)?;
                }
                Op::Exp(a) => {
                    let dx = g.mul(&node.value)?;
                    self.acc(&mut grads, *a, dx)?;
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = vec![0.0; t.len()];
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = g.row(k);
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    self.acc(&mut grads, *table, Tensor::new(t.shape().to_vec(), dt)?)?;
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let aux = node.aux.as_ref().expect("layer_norm saves xhat/inv_std");
                    let (xhat, inv_std) = (&aux[0], &aux[1]);
                    let gv = self.value(*gamma);
                    let (m, n) = (xhat.rows(), xhat.cols());
                    if self.ng(*beta) {
                        self.acc(&mut grads, *beta, g.sum_rows())?;
                    }
                    if self.ng(*gamma) {
                        self.acc(&mut grads, *gamma, g.mul(xhat)?.sum_rows())?;
                    }
                    if self.ng(*x) {
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            let grow = g.row(i);
                            let xrow = xhat.row(i);
                            let inv = inv_std.data()[i];
                            // dxhat = g ⊙ gamma; then the two projection terms
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..n {
                                let dxh = grow[j] * gv.data()[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xrow[j];
                            }
                            mean_dxh /= n as f64;
                            mean_dxh_xh /= n as f64;
                            for j in 0..n {
                                let dxh = grow[j] * gv.data()[j];
                                dx[i * n + j] = inv * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                            }
                        }
                        self.acc(&mut grads, *x, Tensor::new(vec![m, n], dx)?)?;
                    }
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let n = y.rows();
                    let mut dx = vec![0.0; n * n];
                    for i in 0..n {
                        let yrow = &y.row(i)[..=i];
                        let grow = &g.row(i)[..=i];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..=i {
                            dx[i * n + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![n, n], dx)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            dx[i * n + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value; // log-probs
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            dx[i * n + j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::Gather { x, idx } => {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    let n = xv.cols();
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        dx[i * n + j] += g.data()[k];
                    }
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::RowReplace { x, row, v } => {
                    if self.ng(*v) {
                        self.acc(&mut grads, *v, Tensor::vector(g.row(*row).to_vec()))?;
                    }
                    if self.ng(*x) {
                        let zeros = vec![0.0; g.cols()];
                        self.acc(&mut grads, *x, g.with_row(*row, &zeros)?)?;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * n..start * n + g.len()].copy_from_slice(g.data());
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let w = g.cols();
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let src = g.row(i);
                        dx[i * n + start..i * n + start + w].copy_from_slice(src);
                    }
                    self.acc(&mut grads, *x, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut dp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                dp.extend_from_slice(&g.row(i)[off..off + w]);
                            }
                            self.acc(&mut grads, p, Tensor::new(vec![m, w], dp)?)?;
                        }
                        off += w;
                    }
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.acc(&mut grads, *a, Tensor::full(shape, g.item()))?;
                }
                Op::Mean(a) => {
                    let xv = self.value(*a);
                    let shape = xv.shape().to_vec();
                    let c = g.item() / xv.len() as f64;
                    self.acc(&mut grads, *a, Tensor::full(shape, c))?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => *existing = existing.add(&t)?,
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Compare the analytic gradient of a scalar-valued graph against central finite
/// differences, coordinate by coordinate. Returns the worst relative error
/// |analytic − numeric| / max(1e-12, |numeric|).
pub fn grad_check<F>(mut build: F, x0: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x)?;
        let grads = g.backward(loss)?;
        grads
            .get(x)
            .ok_or_else(|| Error::Autodiff("grad_check: no gradient reached the input".into()))?
            .clone()
    };
    let mut eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let base = x0.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval(Tensor::new(x0.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x0.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * step);
        // Guarded relative error: coordinates whose gradient magnitude is
        // below the floor are compared absolutely, because the central
        // difference itself carries ~step² truncation noise and cannot
        // resolve a relative tolerance against a vanishing gradient.
        let denom = analytic.data()[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic.data()[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const FD_STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Weighted sum with fixed random weights turns any tensor into a generic
    /// scalar so every output coordinate influences the loss.
    fn weighted_sum(g: &mut Graph, v: Var, rng: &mut Rng) -> Result<Var> {
        let shape = g.value(v).shape().to_vec();
        let w = g.constant(rand_tensor(rng, shape));
        let prod = g.mul(v, w)?;
        Ok(g.sum(prod))
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = Rng::new(100);
        let x0 = rand_tensor(&mut rng, vec![3, 4]);

        for (oi, op) in ["gelu", "sigmoid", "abs", "exp", "scale", "add_scalar"]
            .iter()
            .enumerate()
        {
            // fixed weight seed so every closure invocation builds the same loss
            let wseed = 200 + oi as u64;
            let err = grad_check(
                |g, x| {
                    let y = match *op {
                        "gelu" => g.gelu(x),
                        "sigmoid" => g.sigmoid(x),
                        "abs" => g.abs(x),
                        "exp" => g.exp(x),
                        "scale" => g.scale(x, -1.7),
                        "add_scalar" => g.add_scalar(x, 0.3),
                        _ => unreachable!(),
                    };
                    weighted_sum(g, y, &mut Rng::new(wseed))
                },
                &x0,
                FD_STEP,
            )
            .unwrap();
            assert!(err < TOL, "{op}: rel err {err:.3e}");
        }
    }

    #[test]
    fn grad_binary_ops() {
        let mut rng = Rng::new(101);
        let x0 = rand_tensor(&mut rng, vec![3, 4]);
        let other = rand_tensor(&mut rng, vec![3, 4]);

        for op in ["add", "sub", "mul"] {
            let other = other.clone();
            let err = grad_check(
                |g, x| {
                    let c = g.constant(other.clone());
                    let y = match op {
                        "add" => g.add(x, c)?,
                        "sub" => g.sub(x, c)?,
                        "mul" => g.mul(x, c)?,
                        _ => unreachable!(),
                    };
                    weighted_sum(g, y, &mut Rng::new(77))
                },
                &x0,
                FD_STEP,
            )
            .unwrap();
            assert!(err < TOL, "{op}: rel err {err:.3e}");
        }
    }

    #[test]
    fn grad_matmul_both_sides() {
        let mut rng = Rng::new(102);
        let a = rand_tensor(&mut rng, vec![3, 5]);
        let b = rand_tensor(&mut rng, vec![5, 4]);

        let err = grad_check(
            |g, x| {
                let c = g.constant(b.clone());
                let y = g.matmul(x, c)?;
                weighted_sum(g, y, &mut Rng::new(5))
            },
            &a,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "matmul lhs: {err:.3e}");

        let err = grad_check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x)?;
                weighted_sum(g, y, &mut Rng::new(6))
            },
            &b,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "matmul rhs: {err:.3e}");

        let bt = rand_tensor(&mut rng, vec![4, 5]);
        let err = grad_check(
            |g, x| {
                let c = g.constant(bt.clone());
                let y = g.matmul_nt(x, c)?;
                weighted_sum(g, y, &mut Rng::new(7))
            },
            &a,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "matmul_nt lhs: {err:.3e}");

        let err = grad_check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul_nt(c, x)?;
                weighted_sum(g, y, &mut Rng::new(8))
            },
            &bt,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "matmul_nt rhs: {err:.3e}");
    }

    #[test]
    fn grad_broadcast_ops() {
        let mut rng = Rng::new(103);
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let v = rand_tensor(&mut rng, vec![3]);

        // bias side of add_bias
        let err = grad_check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.add_bias(c, x)?;
                weighted_sum(g, y, &mut Rng::new(9))
            },
            &v,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "add_bias bias: {err:.3e}");

        // vector side of mul_row (this is the mask path used by the pruning methods)
        let err = grad_check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.mul_row(c, x)?;
                weighted_sum(g, y, &mut Rng::new(10))
            },
            &v,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "mul_row vec: {err:.3e}");

        // matrix side of mul_row
        let err = grad_check(
            |g, x| {
                let c = g.constant(v.clone());
                let y = g.mul_row(x, c)?;
                weighted_sum(g, y, &mut Rng::new(11))
            },
            &a,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "mul_row mat: {err:.3e}");
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let mut rng = Rng::new(104);
        let x = rand_tensor(&mut rng, vec![3, 6]);
        let gamma = rand_tensor(&mut rng, vec![6]);
        let beta = rand_tensor(&mut rng, vec![6]);

        let err = grad_check(
            |g, v| {
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let y = g.layer_norm(v, gm, bt)?;
                weighted_sum(g, y, &mut Rng::new(12))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "layer_norm x: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let xx = g.constant(x.clone());
                let bt = g.constant(beta.clone());
                let y = g.layer_norm(xx, v, bt)?;
                weighted_sum(g, y, &mut Rng::new(13))
            },
            &gamma,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "layer_norm gamma: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let xx = g.constant(x.clone());
                let gm = g.constant(gamma.clone());
                let y = g.layer_norm(xx, gm, v)?;
                weighted_sum(g, y, &mut Rng::new(14))
            },
            &beta,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "layer_norm beta: {err:.3e}");
    }

    #[test]
    fn grad_softmax_family() {
        let mut rng = Rng::new(105);
        let x = rand_tensor(&mut rng, vec![5, 5]);

        for op in ["causal", "rows", "log_rows"] {
            let err = grad_check(
                |g, v| {
                    let y = match op {
                        "causal" => g.causal_softmax(v)?,
                        "rows" => g.softmax_rows(v)?,
                        "log_rows" => g.log_softmax_rows(v)?,
                        _ => unreachable!(),
                    };
                    weighted_sum(g, y, &mut Rng::new(15))
                },
                &x,
                FD_STEP,
            )
            .unwrap();
            assert!(err < TOL, "softmax {op}: rel err {err:.3e}");
        }
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = Rng::new(106);
        let x = rand_tensor(&mut rng, vec![4, 6]);
        let row = rand_tensor(&mut rng, vec![6]);

        let err = grad_check(
            |g, v| {
                let y = g.slice_rows(v, 1, 2)?;
                weighted_sum(g, y, &mut Rng::new(16))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "slice_rows: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let y = g.slice_cols(v, 2, 3)?;
                weighted_sum(g, y, &mut Rng::new(17))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "slice_cols: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let a = g.slice_cols(v, 0, 3)?;
                let b = g.slice_cols(v, 3, 3)?;
                let y = g.concat_cols(&[b, a])?;
                weighted_sum(g, y, &mut Rng::new(18))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "concat_cols: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let y = g.gather(v, vec![(0, 1), (3, 5), (0, 1)])?;
                weighted_sum(g, y, &mut Rng::new(19))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "gather: {err:.3e}");

        // both sides of row_replace
        let err = grad_check(
            |g, v| {
                let r = g.constant(row.clone());
                let y = g.row_replace(v, 2, r)?;
                weighted_sum(g, y, &mut Rng::new(20))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "row_replace base: {err:.3e}");

        let err = grad_check(
            |g, v| {
                let xx = g.constant(x.clone());
                let y = g.row_replace(xx, 2, v)?;
                weighted_sum(g, y, &mut Rng::new(21))
            },
            &row,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "row_replace row: {err:.3e}");
    }

    #[test]
    fn grad_embedding_scatter() {
        let mut rng = Rng::new(107);
        let table = rand_tensor(&mut rng, vec![7, 3]);
        // repeated ids must accumulate
        let err = grad_check(
            |g, v| {
                let y = g.embed(v, &[1, 4, 1, 6, 1])?;
                weighted_sum(g, y, &mut Rng::new(22))
            },
            &table,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "embed: {err:.3e}");
    }

    #[test]
    fn grad_composite_chain() {
        // A deep composite touching most ops at once; the acid test for
        // accumulation across shared nodes.
        let mut rng = Rng::new(108);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let w = rand_tensor(&mut rng, vec![4, 4]);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);

        let err = grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let h = g.matmul(v, wv)?;
                let h = g.gelu(h);
                let n = g.layer_norm(h, gm, bt)?;
                let s = g.causal_softmax(n)?;
                let mixed = g.matmul(s, h)?; // h used twice: via softmax and directly
                let p = g.log_softmax_rows(mixed)?;
                let picked = g.gather(p, vec![(0, 1), (1, 2), (2, 0), (3, 3)])?;
                let m = g.mean(picked);
                Ok(g.scale(m, -1.0))
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < TOL, "composite: rel err {err:.3e}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(109);
        // include large logits to exercise the max-subtraction path
        let data: Vec<f64> = (0..6 * 9).map(|_| rng.normal() * 300.0).collect();
        let x = Tensor::new(vec![6, 9], data).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        for i in 0..6 {
            let sum: f64 = g.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(g.value(s).row(i).iter().all(|&p| p.is_finite()));
        }
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut rng = Rng::new(110);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.causal_softmax(v).unwrap();
        let sv = g.value(s);
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(sv.get2(i, j), 0.0);
                }
            }
            let sum: f64 = sv.row(i)[..=i].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 2], 1.0));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_untrainable_root() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2], 1.0));
        let s = g.sum(x);
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn needs_grad_prunes_constant_subgraphs() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(vec![3], 2.0));
        let x = g.leaf(Tensor::full(vec![3], 1.0));
        let dead = g.scale(c, 5.0); // constant-only branch
        let live = g.mul(x, dead).unwrap();
        let loss = g.sum(live);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(dead).is_none());
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[10.0, 10.0, 10.0]);
    }
}
