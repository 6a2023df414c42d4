//! Dense row-major `f64` tensors.
//!
//! Shapes must match exactly for elementwise work; the only implicit
//! broadcast is tensor-by-scalar. Operations that act "along the last axis"
//! treat a tensor of shape `[.., w]` as a stack of lanes of width `w`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor from a non-empty vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    /// Glorot-style uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(&[fan_in, fan_out], -a, a, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Width of the last axis.
    pub fn lane_width(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Number of lanes along the last axis.
    pub fn lanes(&self) -> usize {
        self.numel() / self.lane_width()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.lane_width();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Matrix product of `[p x q]` and `[q x r]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (p, q, r) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let out_row = &mut out[i * r..(i + 1) * r];
            for l in 0..q {
                let a = self.data[i * q + l];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * r..(l + 1) * r];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(p, r, out)
    }

    /// `self * other^T` for `[p x q]` and `[r x q]`, without materializing
    /// the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::dim("matmul_nt", &self.shape, &other.shape));
        }
        let (p, q, r) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let a_row = &self.data[i * q..(i + 1) * q];
            for j in 0..r {
                let b_row = &other.data[j * q..(j + 1) * q];
                out[i * r + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::matrix(p, r, out)
    }

    /// `self^T * other` for `[q x p]` and `[q x r]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::dim("matmul_tn", &self.shape, &other.shape));
        }
        let (q, p, r) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; p * r];
        for l in 0..q {
            let a_row = &self.data[l * p..(l + 1) * p];
            let b_row = &other.data[l * r..(l + 1) * r];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * r..(i + 1) * r].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(p, r, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[2]));
        }
        let (p, q) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = self.data[i * q + j];
            }
        }
        Tensor::matrix(q, p, out)
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax(&self) -> Self {
        self.masked_softmax(None)
    }

    /// Softmax along the last axis. Positions where `mask[j]` is false get
    /// probability zero; a lane with every position masked falls back to the
    /// unmasked softmax.
    pub fn masked_softmax(&self, mask: Option<&[bool]>) -> Self {
        let w = self.lane_width();
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let any_kept = (0..w).any(keep);
        let mut out = self.clone();
        for lane in out.data.chunks_mut(w) {
            let active = |j: usize| !any_kept || keep(j);
            let max = (0..w)
                .filter(|&j| active(j))
                .map(|j| lane[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = if active(j) { (*v - max).exp() } else { 0.0 };
                total += *v;
            }
            for v in lane.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    /// Sums non-overlapping windows of size `k` along the last axis.
    pub fn sum_pool(&self, k: usize) -> Result<Self> {
        let w = self.lane_width();
        if k == 0 || w % k != 0 {
            return Err(Error::Config(format!(
                "sum_pool window {k} does not divide width {w}"
            )));
        }
        let data = self
            .data
            .chunks(k)
            .map(|win| win[1..].iter().fold(win[0], |acc, v| acc + v))
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = w / k;
        Tensor::new(shape, data)
    }

    /// Concatenates lanes along the last axis; all parts must share their
    /// leading extents.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let lanes = first.lanes();
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
        }
        let width: usize = parts.iter().map(|p| p.lane_width()).sum();
        let mut data = Vec::with_capacity(lanes * width);
        for r in 0..lanes {
            for p in parts {
                let w = p.lane_width();
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Tensor::new(shape, data)
    }

    /// Stacks matrices (or row vectors) along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let w = first.lane_width();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.lane_width() != w || p.rank() > 2 {
                return Err(Error::dim("concat_rows", &first.shape, &p.shape));
            }
            rows += p.lanes();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, w, data)
    }

    /// Columns `[start, end)` of every lane.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Self> {
        let w = self.lane_width();
        if start >= end || end > w {
            return Err(Error::dim("slice", &self.shape, &[start, end]));
        }
        let data = self
            .data
            .chunks(w)
            .flat_map(|lane| lane[start..end].iter().copied())
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        Tensor::new(shape, data)
    }
}
