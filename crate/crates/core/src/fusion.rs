//! Multi-modal fusion operators.
//!
//! All operators take a batch of visual features `x: [B x m]` and textual
//! features `y: [B x n]` (or a single row `[1 x n]` shared across the batch)
//! and produce `[B x out]`. The eager functions at the bottom accept plain
//! vectors and are what the tests and CLI suites call.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::session::{dropout_mask, Session};
use crate::sketch::SketchMap;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Dense third-order weight `W: [o x m x n]` of the unfactorized bilinear
/// model `z_i = x^T W_i y`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearOracleParams {
    pub w: Tensor,
}

impl BilinearOracleParams {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 3 {
            return Err(Error::dim("bilinear weight", w.shape(), &[3]));
        }
        if !w.is_finite() {
            return Err(Error::Input(
                "bilinear weight has non-finite entries".into(),
            ));
        }
        Ok(BilinearOracleParams { w })
    }

    /// Builds `W_i = U_i V_i^T` where `U_i`, `V_i` are the `i`-th groups of
    /// `k` consecutive columns of the MFB projections.
    pub fn from_factors(p: &MfbParams) -> Self {
        let (m, n, k, o) = (p.m, p.n, p.k, p.o);
        let ko = k * o;
        let mut w = Tensor::zeros(&[o, m, n]);
        let data = w.data_mut();
        for i in 0..o {
            for a in 0..m {
                for b in 0..n {
                    let mut s = 0.0;
                    for f in i * k..(i + 1) * k {
                        s += p.u.data()[a * ko + f] * p.v.data()[b * ko + f];
                    }
                    data[(i * m + a) * n + b] = s;
                }
            }
        }
        BilinearOracleParams { w }
    }
}

/// Factorized bilinear pooling parameters: `U~: [m x k*o]`, `V~: [n x k*o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MfbParams {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub o: usize,
    pub u: Tensor,
    pub v: Tensor,
    pub dropout_p: f64,
}

impl MfbParams {
    pub fn new(u: Tensor, v: Tensor, k: usize, dropout_p: f64) -> Result<Self> {
        if u.rank() != 2 || v.rank() != 2 || u.cols() != v.cols() {
            return Err(Error::dim("mfb projections", u.shape(), v.shape()));
        }
        check_dropout(dropout_p)?;
        let width = u.cols();
        if k == 0 || width % k != 0 {
            return Err(Error::Config(format!(
                "projection width {width} not divisible by k={k}"
            )));
        }
        Ok(MfbParams {
            m: u.rows(),
            n: v.rows(),
            k,
            o: width / k,
            u,
            v,
            dropout_p,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        k: usize,
        o: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || o == 0 {
            return Err(Error::Config("mfb needs k >= 1 and o >= 1".into()));
        }
        let u = Tensor::glorot(m, k * o, rng);
        let v = Tensor::glorot(n, k * o, rng);
        Self::new(u, v, k, dropout_p)
    }

    pub fn projection_width(&self) -> usize {
        self.k * self.o
    }
}

/// Low-rank bilinear (Hadamard) pooling parameters: `U: [m x o]`, `V: [n x o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlbParams {
    pub m: usize,
    pub n: usize,
    pub o: usize,
    pub u: Tensor,
    pub v: Tensor,
    pub dropout_p: f64,
}

impl MlbParams {
    pub fn new(u: Tensor, v: Tensor, dropout_p: f64) -> Result<Self> {
        if u.rank() != 2 || v.rank() != 2 || u.cols() != v.cols() {
            return Err(Error::dim("mlb projections", u.shape(), v.shape()));
        }
        check_dropout(dropout_p)?;
        Ok(MlbParams {
            m: u.rows(),
            n: v.rows(),
            o: u.cols(),
            u,
            v,
            dropout_p,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        o: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let u = Tensor::glorot(m, o, rng);
        let v = Tensor::glorot(n, o, rng);
        Self::new(u, v, dropout_p)
    }
}

/// Compact bilinear pooling: two fixed Count Sketches into `d` buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct McbParams {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub hx: Arc<SketchMap>,
    pub hy: Arc<SketchMap>,
    pub rng_seed: u64,
    pub dropout_p: f64,
}

impl McbParams {
    /// Draws both sketch maps once from a ChaCha stream seeded by `seed`.
    pub fn new(m: usize, n: usize, d: usize, seed: u64, dropout_p: f64) -> Result<Self> {
        use rand::SeedableRng;
        if d == 0 {
            return Err(Error::Config("mcb sketch dimension must be >= 1".into()));
        }
        check_dropout(dropout_p)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hx = SketchMap::random(m, d, &mut rng);
        let hy = SketchMap::random(n, d, &mut rng);
        Ok(McbParams {
            m,
            n,
            d,
            hx: Arc::new(hx),
            hy: Arc::new(hy),
            rng_seed: seed,
            dropout_p,
        })
    }
}

/// Linear fusion of the concatenation `[x; y] W + b`, the no-interaction
/// control.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatParams {
    pub m: usize,
    pub n: usize,
    pub o: usize,
    pub wx: Tensor,
    pub wy: Tensor,
    pub b: Tensor,
    pub dropout_p: f64,
}

impl ConcatParams {
    pub fn random<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        o: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_dropout(dropout_p)?;
        // One Glorot draw over the stacked [m + n, o] matrix.
        let w = Tensor::glorot(m + n, o, rng);
        let wx = Tensor::matrix(m, o, w.data()[..m * o].to_vec())?;
        let wy = Tensor::matrix(n, o, w.data()[m * o..].to_vec())?;
        Ok(ConcatParams {
            m,
            n,
            o,
            wx,
            wy,
            b: Tensor::zeros(&[o]),
            dropout_p,
        })
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )))
    }
}

/// Which normalization layers follow the fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormConfig {
    pub power: bool,
    pub l2: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            power: true,
            l2: true,
        }
    }
}

impl NormConfig {
    pub const NONE: NormConfig = NormConfig {
        power: false,
        l2: false,
    };
}

/// Output of a fusion module: the raw fused feature (after pooling, before
/// any normalization) and the module output.
#[derive(Clone, Copy, Debug)]
pub struct FusionOut {
    pub pre_norm: Var,
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Mfb(MfbParams),
    Mlb(MlbParams),
    Mcb(McbParams),
    Concat(ConcatParams),
}

/// Elementwise product where either side may be a single broadcast row.
fn hadamard(s: &mut Session<'_>, a: Var, b: Var) -> Result<Var> {
    let (la, lb) = (s.value(a).lanes(), s.value(b).lanes());
    if s.value(a).shape() == s.value(b).shape() {
        s.tape.mul(a, b)
    } else if lb == 1 {
        s.tape.mul_row(a, b)
    } else if la == 1 {
        s.tape.mul_row(b, a)
    } else {
        Err(Error::dim("fusion", s.value(a).shape(), s.value(b).shape()))
    }
}

fn plus(s: &mut Session<'_>, a: Var, b: Var) -> Result<Var> {
    let (la, lb) = (s.value(a).lanes(), s.value(b).lanes());
    if s.value(a).shape() == s.value(b).shape() {
        s.tape.add(a, b)
    } else if lb == 1 {
        s.tape.add_row(a, b)
    } else if la == 1 {
        s.tape.add_row(b, a)
    } else {
        Err(Error::dim("fusion", s.value(a).shape(), s.value(b).shape()))
    }
}

fn check_inputs(s: &Session<'_>, x: Var, y: Var, m: usize, n: usize) -> Result<()> {
    let (xv, yv) = (s.value(x), s.value(y));
    if xv.rank() != 2 || yv.rank() != 2 || xv.cols() != m || yv.cols() != n {
        return Err(Error::dim("fusion inputs", xv.shape(), yv.shape()));
    }
    Ok(())
}

impl Fusion {
    pub fn name(&self) -> &'static str {
        match self {
            Fusion::Mfb(_) => "mfb",
            Fusion::Mlb(_) => "mlb",
            Fusion::Mcb(_) => "mcb",
            Fusion::Concat(_) => "concat",
        }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        match self {
            Fusion::Mfb(p) => (p.m, p.n),
            Fusion::Mlb(p) => (p.m, p.n),
            Fusion::Mcb(p) => (p.m, p.n),
            Fusion::Concat(p) => (p.m, p.n),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Fusion::Mfb(p) => p.o,
            Fusion::Mlb(p) => p.o,
            Fusion::Mcb(p) => p.d,
            Fusion::Concat(p) => p.o,
        }
    }

    /// Width of the widest fused intermediate (before pooling).
    pub fn intermediate_dim(&self) -> usize {
        match self {
            Fusion::Mfb(p) => p.projection_width(),
            Fusion::Mlb(p) => p.o,
            Fusion::Mcb(p) => p.d,
            Fusion::Concat(p) => p.o,
        }
    }

    pub fn dropout_p(&self) -> f64 {
        match self {
            Fusion::Mfb(p) => p.dropout_p,
            Fusion::Mlb(p) => p.dropout_p,
            Fusion::Mcb(p) => p.dropout_p,
            Fusion::Concat(p) => p.dropout_p,
        }
    }

    pub fn set_dropout(&mut self, p: f64) {
        match self {
            Fusion::Mfb(f) => f.dropout_p = p,
            Fusion::Mlb(f) => f.dropout_p = p,
            Fusion::Mcb(f) => f.dropout_p = p,
            Fusion::Concat(f) => f.dropout_p = p,
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Fusion::Mfb(p) => vec![("u", &p.u), ("v", &p.v)],
            Fusion::Mlb(p) => vec![("u", &p.u), ("v", &p.v)],
            Fusion::Mcb(_) => vec![],
            Fusion::Concat(p) => vec![("wx", &p.wx), ("wy", &p.wy), ("b", &p.b)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Fusion::Mfb(p) => vec![&mut p.u, &mut p.v],
            Fusion::Mlb(p) => vec![&mut p.u, &mut p.v],
            Fusion::Mcb(_) => vec![],
            Fusion::Concat(p) => vec![&mut p.wx, &mut p.wy, &mut p.b],
        }
    }

    /// Fused feature before normalization. Dropout sits right after the
    /// multiplicative (or linear) interaction and before sum pooling.
    pub fn fuse<'m>(&'m self, s: &mut Session<'m>, x: Var, y: Var) -> Result<Var> {
        let (m, n) = self.in_dims();
        check_inputs(s, x, y, m, n)?;
        match self {
            Fusion::Mfb(p) => {
                let (u, v) = (s.param(&p.u), s.param(&p.v));
                let px = s.tape.matmul(x, u)?;
                let py = s.tape.matmul(y, v)?;
                let prod = hadamard(s, px, py)?;
                let dropped = s.dropout(prod, p.dropout_p)?;
                s.tape.sum_pool(dropped, p.k)
            }
            Fusion::Mlb(p) => {
                let (u, v) = (s.param(&p.u), s.param(&p.v));
                let px = s.tape.matmul(x, u)?;
                let py = s.tape.matmul(y, v)?;
                let prod = hadamard(s, px, py)?;
                s.dropout(prod, p.dropout_p)
            }
            Fusion::Mcb(p) => {
                let sx = s.tape.count_sketch(x, p.hx.clone())?;
                let mut sy = s.tape.count_sketch(y, p.hy.clone())?;
                let (lx, ly) = (s.value(sx).lanes(), s.value(sy).lanes());
                if lx != ly {
                    if ly != 1 {
                        return Err(Error::dim("mcb", s.value(sx).shape(), s.value(sy).shape()));
                    }
                    sy = s.tape.concat_rows(&vec![sy; lx])?;
                }
                let conv = s.tape.circular_convolution(sx, sy)?;
                s.dropout(conv, p.dropout_p)
            }
            Fusion::Concat(p) => {
                let (wx, wy, b) = (s.param(&p.wx), s.param(&p.wy), s.param(&p.b));
                let px = s.tape.matmul(x, wx)?;
                let py = s.tape.matmul(y, wy)?;
                let sum = plus(s, px, py)?;
                let lin = s.tape.add_row(sum, b)?;
                s.dropout(lin, p.dropout_p)
            }
        }
    }

    /// Fusion followed by the selected normalization layers.
    pub fn module<'m>(
        &'m self,
        s: &mut Session<'m>,
        x: Var,
        y: Var,
        norms: NormConfig,
    ) -> Result<FusionOut> {
        let pre_norm = self.fuse(s, x, y)?;
        let mut out = pre_norm;
        if norms.power {
            out = s.tape.power_normalize(out);
        }
        if norms.l2 {
            out = s.tape.l2_normalize(out);
        }
        Ok(FusionOut { pre_norm, out })
    }
}

// ---------------------------------------------------------------------------
// Eager entry points.

fn as_rows(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        1 => Ok((t.reshape(&[1, t.numel()])?, true)),
        2 => Ok((t.clone(), false)),
        _ => Err(Error::dim("fusion input", t.shape(), &[2])),
    }
}

fn eager_fusion(
    fusion: &Fusion,
    x: &Tensor,
    y: &Tensor,
    norms: NormConfig,
    seed: u64,
    training: bool,
) -> Result<Tensor> {
    let (xr, flat) = as_rows(x)?;
    let (yr, _) = as_rows(y)?;
    let mut s = Session::new(seed, training);
    let xv = s.input(xr);
    let yv = s.input(yr);
    let out = fusion.module(&mut s, xv, yv, norms)?.out;
    let t = s.value(out).clone();
    if flat && t.lanes() == 1 {
        t.reshape(&[t.numel()])
    } else {
        Ok(t)
    }
}

/// `z_i = x^T W_i y` by an explicit triple loop. Reference oracle.
pub fn naive_bilinear(x: &Tensor, y: &Tensor, p: &BilinearOracleParams) -> Result<Tensor> {
    let (o, m, n) = (p.w.shape()[0], p.w.shape()[1], p.w.shape()[2]);
    if x.numel() != m || y.numel() != n {
        return Err(Error::dim("naive_bilinear", x.shape(), y.shape()));
    }
    let w = p.w.data();
    let mut z = vec![0.0; o];
    for (i, zi) in z.iter_mut().enumerate() {
        for a in 0..m {
            for b in 0..n {
                *zi += x.data()[a] * w[(i * m + a) * n + b] * y.data()[b];
            }
        }
    }
    Tensor::vector(z)
}

fn without_dropout(f: &Fusion) -> Fusion {
    let mut f = f.clone();
    f.set_dropout(0.0);
    f
}

/// `SumPool(U~^T x o V~^T y, k)`, no dropout and no normalization.
pub fn mfb(x: &Tensor, y: &Tensor, p: &MfbParams) -> Result<Tensor> {
    let f = without_dropout(&Fusion::Mfb(p.clone()));
    eager_fusion(&f, x, y, NormConfig::NONE, 0, false)
}

/// `(U^T x) o (V^T y)`.
pub fn mlb(x: &Tensor, y: &Tensor, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let f = Fusion::Mlb(MlbParams::new(u.clone(), v.clone(), 0.0)?);
    eager_fusion(&f, x, y, NormConfig::NONE, 0, false)
}

/// Circular convolution of the two Count Sketches, no normalization.
pub fn mcb(x: &Tensor, y: &Tensor, p: &McbParams) -> Result<Tensor> {
    let f = without_dropout(&Fusion::Mcb(p.clone()));
    eager_fusion(&f, x, y, NormConfig::NONE, 0, false)
}

/// The full MFB block: project, multiply, dropout, sum-pool, then the
/// selected normalizations. `seed` drives the dropout mask.
pub fn mfb_module(
    x: &Tensor,
    y: &Tensor,
    p: &MfbParams,
    norms: NormConfig,
    seed: u64,
    training: bool,
) -> Result<Tensor> {
    eager_fusion(&Fusion::Mfb(p.clone()), x, y, norms, seed, training)
}

pub fn power_normalize(z: &Tensor) -> Tensor {
    z.map(|v| v.signum() * v.abs().sqrt())
}

pub fn l2_normalize(z: &Tensor) -> Tensor {
    let mut s = Session::eval();
    let v = s.input(z.clone());
    let out = s.tape.l2_normalize(v);
    s.value(out).clone()
}

pub fn sum_pool(v: &Tensor, k: usize) -> Result<Tensor> {
    v.sum_pool(k)
}

pub fn dropout<R: Rng + ?Sized>(v: &Tensor, p: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    match dropout_mask(v.shape(), p, training, rng)? {
        Some(mask) => v.mul(&mask),
        None => Ok(v.clone()),
    }
}
