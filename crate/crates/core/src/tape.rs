//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] evaluates eagerly, stores its output and
//! appends a node; node ids are handed out in evaluation order, so the node
//! list is always topologically sorted. [`Tape::backward`] walks it once in
//! reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sketch::{self, SketchMap};
use crate::tensor::Tensor;

/// Lower clamp on `|z|` in the power-normalization derivative.
pub const POWER_NORM_CLAMP: f64 = 1e-12;
/// Norm floor used by [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    MeanLanes(Var),
    SumPool(Var, usize),
    PowerNorm(Var),
    L2Normalize(Var),
    MaskMul(Var, Tensor),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<Option<usize>>),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    CountSketch(Var, Arc<SketchMap>),
    CircConv(Var, Var),
    KlDiv(Var, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Record of a forward evaluation.
///
/// Besides node values the tape keeps the inputs of every kinked operation
/// (ReLU, power normalization) in evaluation order. Gradient checking uses
/// that trace to spot finite-difference probes that straddle a kink.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: Vec<f64>,
    roots: Vec<f64>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(g),
    }
}

fn check_row(op: &'static str, a: &Tensor, row: &Tensor) -> Result<()> {
    if row.numel() != a.lane_width() || row.lanes() != 1 {
        return Err(Error::dim(op, a.shape(), row.shape()));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Inputs seen by kinked operations, in evaluation order.
    pub fn kink_trace(&self) -> &[f64] {
        &self.kinks
    }

    /// Inputs of power normalizations alone, in evaluation order.
    pub fn root_trace(&self) -> &[f64] {
        &self.roots
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Adds a single row (numel equal to the lane width) to every lane of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        check_row("add_row", av, rv)?;
        let w = av.lane_width();
        let mut out = av.clone();
        for lane in out.data_mut().chunks_mut(w) {
            for (o, r) in lane.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    /// Multiplies every lane of `a` elementwise by a single row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        check_row("mul_row", av, rv)?;
        let w = av.lane_width();
        let mut out = av.clone();
        for lane in out.data_mut().chunks_mut(w) {
            for (o, r) in lane.iter_mut().zip(rv.data()) {
                *o *= r;
            }
        }
        Ok(self.push(Op::MulRow(a, row), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.kinks.extend_from_slice(self.nodes[a.0].value.data());
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    /// Softmax along the last axis; see [`Tensor::masked_softmax`] for mask
    /// semantics.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.lane_width() {
                return Err(Error::dim("softmax mask", av.shape(), &[m.len()]));
            }
        }
        let out = av.masked_softmax(mask);
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Mean over lanes: `[L x w] -> [1 x w]`.
    pub fn mean_lanes(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (l, w) = (av.lanes(), av.lane_width());
        let mut data = vec![0.0; w];
        for lane in av.data().chunks(w) {
            for (d, v) in data.iter_mut().zip(lane) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= l as f64;
        }
        let out = Tensor::matrix(1, w, data).expect("non-empty lane");
        self.push(Op::MeanLanes(a), out)
    }

    pub fn sum_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = self.value(a).sum_pool(k)?;
        Ok(self.push(Op::SumPool(a, k), out))
    }

    /// `z -> sign(z) |z|^0.5`, elementwise.
    pub fn power_normalize(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|z| z.signum() * z.abs().sqrt());
        self.kinks.extend_from_slice(self.nodes[a.0].value.data());
        self.roots.extend_from_slice(self.nodes[a.0].value.data());
        self.push(Op::PowerNorm(a), out)
    }

    /// `z -> z / max(||z||, 1e-12)` on every lane.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let w = av.lane_width();
        let mut out = av.clone();
        for lane in out.data_mut().chunks_mut(w) {
            let n = lane_norm(lane).max(L2_EPS);
            for v in lane.iter_mut() {
                *v /= n;
            }
        }
        self.push(Op::L2Normalize(a), out)
    }

    /// Multiplies by a constant mask (dropout with a pre-drawn mask).
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let out = self.value(a).mul(&mask)?;
        Ok(self.push(Op::MaskMul(a, mask), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Row lookup into a `[rows x w]` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || rows.is_empty() {
            return Err(Error::dim("gather_rows", tv.shape(), &[rows.len()]));
        }
        let w = tv.cols();
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            match r {
                Some(r) if *r < tv.rows() => data.extend_from_slice(tv.row(*r)),
                Some(r) => {
                    return Err(Error::Input(format!(
                        "row {r} out of range for table with {} rows",
                        tv.rows()
                    )))
                }
                None => data.extend(std::iter::repeat(0.0).take(w)),
            }
        }
        let out = Tensor::matrix(rows.len(), w, data)?;
        Ok(self.push(Op::GatherRows(table, rows.to_vec()), out))
    }

    /// Columns `[start, end)` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_last(start, end)?;
        Ok(self.push(Op::SliceLast(a, start), out))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_last(&vals)?;
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// Count Sketch of every lane under a fixed (non-learned) map.
    pub fn count_sketch(&mut self, a: Var, map: Arc<SketchMap>) -> Result<Var> {
        let out = sketch::count_sketch(self.value(a), &map)?;
        Ok(self.push(Op::CountSketch(a, map), out))
    }

    /// Lane-wise circular convolution computed through the FFT.
    pub fn circular_convolution(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = sketch::circular_convolution(self.value(a), self.value(b))?;
        Ok(self.push(Op::CircConv(a, b), out))
    }

    /// KL divergence `sum_i t_i (log t_i - log softmax(logits)_i)` for a
    /// single lane of logits against a probability vector.
    pub fn kl_div(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.numel() {
            return Err(Error::dim("kl_div", lv.shape(), target.shape()));
        }
        let total = target.sum();
        if (total - 1.0).abs() > 1e-6 || target.data().iter().any(|&t| t < 0.0) {
            return Err(Error::Input(format!(
                "KL target is not a probability vector (sum {total})"
            )));
        }
        let log_p = log_softmax(lv.data());
        let loss = target
            .data()
            .iter()
            .zip(&log_p)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &lp)| t * (t.ln() - lp))
            .sum::<f64>();
        let target = target.reshape(lv.shape())?;
        Ok(self.push(Op::KlDiv(logits, target), Tensor::scalar(loss)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(val(*b))?);
                accumulate(grads, *b, val(*a).matmul_tn(g)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.neg());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?);
                accumulate(grads, *b, g.mul(val(*a))?);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, lane_sum(g).reshape(val(*row).shape())?);
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let w = g.lane_width();
                let mut ga = g.clone();
                for lane in ga.data_mut().chunks_mut(w) {
                    for (o, r) in lane.iter_mut().zip(rv.data()) {
                        *o *= r;
                    }
                }
                accumulate(grads, *a, ga);
                let gr = lane_sum(&g.mul(val(*a))?);
                accumulate(grads, *row, gr.reshape(rv.shape())?);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::Relu(a) => {
                let ga = g.zip_with(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_with(&node.value, "sigmoid", |g, s| g * s * (1.0 - s))?;
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_with(&node.value, "tanh", |g, t| g * (1.0 - t * t))?;
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let w = s.lane_width();
                let mut ga = g.clone();
                for (gl, sl) in ga.data_mut().chunks_mut(w).zip(s.data().chunks(w)) {
                    let inner: f64 = gl.iter().zip(sl).map(|(g, s)| g * s).sum();
                    for (gv, sv) in gl.iter_mut().zip(sl) {
                        *gv = sv * (*gv - inner);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()?)),
            Op::MeanLanes(a) => {
                let av = val(*a);
                let l = av.lanes() as f64;
                let mut ga = Tensor::zeros(av.shape());
                let w = av.lane_width();
                for lane in ga.data_mut().chunks_mut(w) {
                    for (o, gv) in lane.iter_mut().zip(g.data()) {
                        *o = gv / l;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumPool(a, k) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                for (chunk, gv) in ga.data_mut().chunks_mut(*k).zip(g.data()) {
                    chunk.fill(*gv);
                }
                accumulate(grads, *a, ga);
            }
            Op::PowerNorm(a) => {
                let ga = g.zip_with(val(*a), "power_norm", |g, z| {
                    g * 0.5 * z.abs().max(POWER_NORM_CLAMP).powf(-0.5)
                })?;
                accumulate(grads, *a, ga);
            }
            Op::L2Normalize(a) => {
                let av = val(*a);
                let w = av.lane_width();
                let mut ga = g.clone();
                for ((gl, yl), zl) in ga
                    .data_mut()
                    .chunks_mut(w)
                    .zip(node.value.data().chunks(w))
                    .zip(av.data().chunks(w))
                {
                    let n = lane_norm(zl);
                    if n > L2_EPS {
                        let proj: f64 = gl.iter().zip(yl).map(|(g, y)| g * y).sum();
                        for (gv, yv) in gl.iter_mut().zip(yl) {
                            *gv = (*gv - yv * proj) / n;
                        }
                    } else {
                        for gv in gl.iter_mut() {
                            *gv /= L2_EPS;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MaskMul(a, mask) => accumulate(grads, *a, g.mul(mask)?),
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?),
            Op::GatherRows(table, rows) => {
                let tv = val(*table);
                let w = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        let dst = &mut gt.data_mut()[r * w..(r + 1) * w];
                        for (d, gv) in dst.iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::SliceLast(a, start) => {
                let av = val(*a);
                let (w, gw) = (av.lane_width(), g.lane_width());
                let mut ga = Tensor::zeros(av.shape());
                for (dst, src) in ga.data_mut().chunks_mut(w).zip(g.data().chunks(gw)) {
                    dst[*start..*start + gw].copy_from_slice(src);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatLast(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).lane_width();
                    let piece = g.slice_last(offset, offset + w)?.reshape(val(*p).shape())?;
                    accumulate(grads, *p, piece);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let w = g.lane_width();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let len = pv.numel();
                    let piece = g.data()[offset * w..offset * w + len].to_vec();
                    accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), piece)?);
                    offset += pv.lanes();
                }
            }
            Op::CountSketch(a, map) => {
                accumulate(grads, *a, sketch::count_sketch_adjoint(g, map));
            }
            Op::CircConv(a, b) => {
                accumulate(grads, *a, sketch::circular_correlation(g, val(*b))?);
                accumulate(grads, *b, sketch::circular_correlation(g, val(*a))?);
            }
            Op::KlDiv(logits, target) => {
                let p = val(*logits).softmax();
                let scale = g.item()?;
                accumulate(grads, *logits, p.sub(target)?.scale(scale));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lane_norm(lane: &[f64]) -> f64 {
    lane.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn lane_sum(g: &Tensor) -> Tensor {
    let w = g.lane_width();
    let mut out = vec![0.0; w];
    for lane in g.data().chunks(w) {
        for (o, v) in out.iter_mut().zip(lane) {
            *o += v;
        }
    }
    Tensor::vector(out).expect("non-empty lane")
}

/// Numerically stable `log softmax` of a single lane.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 3.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_squared_norm_is_twice_x() {
        let mut tape = Tape::new();
        let xv = Tensor::matrix(3, 1, vec![0.5, -1.0, 3.0]).unwrap();
        let x = tape.leaf(xv.clone());
        let xt = tape.transpose(x).unwrap();
        let q = tape.matmul(xt, x).unwrap();
        let g = tape.backward(q).unwrap();
        assert_eq!(g.wrt(x), xv.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.leaf(Tensor::zeros(&[3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y), Tensor::zeros(&[3]));
    }

    #[test]
    fn kl_gradient_is_softmax_minus_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
        let t = Tensor::uniform(&[5], 0.0, 1.0, &mut rng);
        let t = t.scale(1.0 / t.sum());
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let loss = tape.kl_div(l, &t).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect = logits.softmax().sub(&t).unwrap();
        assert!(g.wrt(l).max_abs_diff(&expect).unwrap() < 1e-10);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let b = tape.leaf(Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let t = tape.tanh(c);
        let s = tape.softmax(t, None).unwrap();
        let s = tape.mul(s, t).unwrap();
        let loss = tape.sum(s);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for v in [a, b] {
            let (x, y) = (g1.wrt(v), g2.wrt(v));
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
