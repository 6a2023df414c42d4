//! Count Sketch projection and FFT-based circular convolution.

use std::cell::RefCell;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hash and sign maps of one Count Sketch: input coordinate `i` lands in
/// bucket `index[i]` with sign `sign[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchMap {
    pub d: usize,
    pub index: Vec<usize>,
    pub sign: Vec<f64>,
}

impl SketchMap {
    pub fn new(d: usize, index: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("sketch dimension must be >= 1".into()));
        }
        if index.len() != sign.len() {
            return Err(Error::Config(format!(
                "index map covers {} inputs, sign map {}",
                index.len(),
                sign.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= d) {
            return Err(Error::Config(format!(
                "sketch index {bad} out of range for d={d}"
            )));
        }
        if sign.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Config("sketch signs must be +1 or -1".into()));
        }
        Ok(SketchMap { d, index, sign })
    }

    /// Draws uniform bucket indices and Rademacher signs for `n` inputs.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let index = (0..n).map(|_| rng.gen_range(0..d)).collect();
        let sign = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        SketchMap { d, index, sign }
    }

    pub fn input_dim(&self) -> usize {
        self.index.len()
    }
}

/// `sketch[j] = sum_{i : h(i) = j} s(i) v[i]`, applied to every lane.
pub fn count_sketch(v: &Tensor, map: &SketchMap) -> Result<Tensor> {
    let n = v.lane_width();
    if n != map.input_dim() {
        return Err(Error::dim("count_sketch", v.shape(), &[map.input_dim()]));
    }
    let mut shape = v.shape().to_vec();
    *shape.last_mut().unwrap() = map.d;
    let mut out = Tensor::zeros(&shape);
    for (lane, dst) in v.data().chunks(n).zip(out.data_mut().chunks_mut(map.d)) {
        for (i, &x) in lane.iter().enumerate() {
            dst[map.index[i]] += map.sign[i] * x;
        }
    }
    Ok(out)
}

/// Adjoint of [`count_sketch`]: `out[i] = s(i) g[h(i)]`.
pub(crate) fn count_sketch_adjoint(g: &Tensor, map: &SketchMap) -> Tensor {
    let n = map.input_dim();
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = Tensor::zeros(&shape);
    for (lane, dst) in g.data().chunks(map.d).zip(out.data_mut().chunks_mut(n)) {
        for (i, o) in dst.iter_mut().enumerate() {
            *o = map.sign[i] * lane[map.index[i]];
        }
    }
    out
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn spectrum(lane: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = lane.iter().map(|&x| Complex::new(x, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(&mut buf));
    buf
}

fn inverse_real(mut buf: Vec<Complex<f64>>) -> Vec<f64> {
    let n = buf.len();
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n).process(&mut buf));
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

fn lanewise(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    combine: impl Fn(Complex<f64>, Complex<f64>) -> Complex<f64>,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let d = a.lane_width();
    let mut data = Vec::with_capacity(a.numel());
    for (la, lb) in a.data().chunks(d).zip(b.data().chunks(d)) {
        let fa = spectrum(la);
        let fb = spectrum(lb);
        let prod = fa.into_iter().zip(fb).map(|(x, y)| combine(x, y)).collect();
        data.extend(inverse_real(prod));
    }
    if data.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in {op}")));
    }
    Tensor::new(a.shape().to_vec(), data)
}

/// Circular convolution along the last axis, `z[j] = sum_i a[i] b[(j - i) mod d]`,
/// evaluated in the frequency domain.
pub fn circular_convolution(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    lanewise(a, b, "circular_convolution", |x, y| x * y)
}

/// Circular cross-correlation `r[i] = sum_j g[j] b[(j - i) mod d]`, the adjoint
/// of convolution with `b`.
pub fn circular_correlation(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    lanewise(g, b, "circular_correlation", |x, y| x * y.conj())
}
