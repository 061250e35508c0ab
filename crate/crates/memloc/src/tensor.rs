//! Dense row-major f64 tensors.
//!
//! Values are immutable once built; clones share storage via `Arc`. Only ranks 0–2
//! appear in this codebase (scalars, vectors, matrices), and every accumulation
//! runs in a fixed index order so results are reproducible run-to-run and
//! independent of thread count. The matmul kernels are blocked for instruction-level
//! parallelism but accumulate each output element in strict k-order, i.e. they are
//! bitwise-identical to the textbook triple loop.

use std::sync::Arc;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; len]) }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; len]) }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows / row width for rank-2 tensors ([n] counts as n rows of width 1
    /// only if asked as rank-2; callers check rank first).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|a| a * c)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|a| -a)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|&a| a * a).sum::<f64>().sqrt()
    }

    /// Euclidean norm of each column of a rank-2 tensor.
    pub fn col_norms(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut acc = vec![0.0; n];
        for i in 0..m {
            let row = self.row(i);
            for j in 0..n {
                acc[j] += row[j] * row[j];
            }
        }
        for a in &mut acc {
            *a = a.sqrt();
        }
        Tensor::vector(acc)
    }

    /// Column sums of a rank-2 tensor (reduce over rows).
    pub fn sum_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut acc = vec![0.0; n];
        for i in 0..m {
            let row = self.row(i);
            for j in 0..n {
                acc[j] += row[j];
            }
        }
        Tensor::vector(acc)
    }

    /// 2D + broadcast row vector: out[i][j] = a[i][j] + b[j].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || bias.shape.len() != 1 || self.cols() != bias.len() {
            return Err(Error::Shape(format!(
                "add_bias: {:?} + {:?}",
                self.shape, bias.shape
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let b = bias.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.row(i);
            for j in 0..n {
                out.push(row[j] + b[j]);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// 2D ⊙ broadcast row vector: out[i][j] = a[i][j] * v[j].
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || v.shape.len() != 1 || self.cols() != v.len() {
            return Err(Error::Shape(format!(
                "mul_row: {:?} * {:?}",
                self.shape, v.shape
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let vv = v.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.row(i);
            for j in 0..n {
                out.push(row[j] * vv[j]);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: Arc::new(out) }
    }

    fn check_mm(&self, other: &Tensor, ak: usize, bk: usize, op: &str) -> Result<()> {
        if self.shape.len() != 2 || other.shape.len() != 2 || ak != bk {
            return Err(Error::Shape(format!(
                "{op}: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// a (m×k) @ b (k×n). Accumulates each output in ascending-k order.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        self.check_mm(b, self.shape[1], b.shape[0], "matmul")?;
        let (m, _k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        let bd = b.data();
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// a (m×k) @ bᵀ where b is (n×k). Row-by-row dot products; the j-blocking only
    /// interleaves independent accumulators, the per-output order is still k-ascending.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        self.check_mm(b, self.shape[1], b.shape[1], "matmul_nt")?;
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[0]);
        let mut out = vec![0.0; m * n];
        let bd = b.data();
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut j = 0;
            while j + 4 <= n {
                let b0 = &bd[j * k..(j + 1) * k];
                let b1 = &bd[(j + 1) * k..(j + 2) * k];
                let b2 = &bd[(j + 2) * k..(j + 3) * k];
                let b3 = &bd[(j + 3) * k..(j + 4) * k];
                let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                for p in 0..k {
                    let a = arow[p];
                    s0 += a * b0[p];
                    s1 += a * b1[p];
                    s2 += a * b2[p];
                    s3 += a * b3[p];
                }
                orow[j] = s0;
                orow[j + 1] = s1;
                orow[j + 2] = s2;
                orow[j + 3] = s3;
                j += 4;
            }
            while j < n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                orow[j] = s;
                j += 1;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// aᵀ @ b where a is (k×m), b is (k×n). Accumulates in ascending-k order.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        self.check_mm(b, self.shape[0], b.shape[0], "matmul_tn")?;
        let (k, m, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        let bd = b.data();
        for p in 0..k {
            let arow = self.row(p);
            let brow = &bd[p * n..(p + 1) * n];
            for i in 0..m {
                let av = arow[i];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Replace one row of a rank-2 tensor (copy-on-write).
    pub fn with_row(&self, i: usize, row: &[f64]) -> Result<Tensor> {
        if self.shape.len() != 2 || row.len() != self.cols() || i >= self.rows() {
            return Err(Error::Shape(format!(
                "with_row: row {i} of len {} into {:?}",
                row.len(),
                self.shape
            )));
        }
        let mut data = self.data.as_ref().clone();
        let n = self.cols();
        data[i * n..(i + 1) * n].copy_from_slice(row);
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Owned copy of the underlying data.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }
}
