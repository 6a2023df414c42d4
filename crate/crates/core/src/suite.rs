//! Registered gradient checks and the fusion equivalence suites.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{image_attention, question_attention, AttentionHead};
use crate::error::{Error, Result};
use crate::fusion::{
    self, BilinearOracleParams, ConcatParams, Fusion, McbParams, MfbParams, MlbParams, NormConfig,
};
use crate::gradcheck::{grad_check, grad_check_fn, Evaluation, GradCheckConfig, GradCheckReport};
use crate::lstm::LstmLayer;
use crate::model::{Arch, CoAttModel, FusionKind, ModelConfig};
use crate::session::Session;
use crate::sketch::SketchMap;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Reduces `v` to a scalar through fixed random weights, so every output
/// coordinate contributes a distinct amount to the loss.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(tape.value(v).shape(), -1.0, 1.0, &mut rng);
    let w = tape.leaf(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type UnaryOp = fn(&mut Tape, &[Var]) -> Result<Var>;

fn elementwise_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let a = rand_t(&[3, 4], rng);
    let b = rand_t(&[3, 4], rng);
    let row = rand_t(&[1, 4], rng);
    let cases: Vec<(&'static str, Vec<Tensor>, UnaryOp)> = vec![
        ("matmul", vec![a.clone(), rand_t(&[4, 2], rng)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![a.clone(), row.clone()], |t, v| {
            t.add_row(v[0], v[1])
        }),
        ("mul_row", vec![a.clone(), row.clone()], |t, v| {
            t.mul_row(v[0], v[1])
        }),
        ("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -2.5))),
        ("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![a.clone()], |t, v| Ok(t.tanh(v[0]))),
        ("softmax", vec![a.clone()], |t, v| t.softmax(v[0], None)),
        ("masked_softmax", vec![a.clone()], |t, v| {
            t.softmax(v[0], Some(&[true, false, true, true]))
        }),
        ("mean_lanes", vec![a.clone()], |t, v| Ok(t.mean_lanes(v[0]))),
        ("sum_pool", vec![rand_t(&[2, 6], rng)], |t, v| {
            t.sum_pool(v[0], 3)
        }),
        (
            "power_normalize",
            vec![away_from_zero(&[2, 5], rng)],
            |t, v| Ok(t.power_normalize(v[0])),
        ),
        ("l2_normalize", vec![a.clone()], |t, v| {
            Ok(t.l2_normalize(v[0]))
        }),
        ("transpose", vec![a.clone()], |t, v| t.transpose(v[0])),
        ("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6])),
        ("gather_rows", vec![a.clone()], |t, v| {
            t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])
        }),
        ("slice_last", vec![a.clone()], |t, v| {
            t.slice_last(v[0], 1, 3)
        }),
        (
            "concat_last",
            vec![a.clone(), rand_t(&[3, 2], rng)],
            |t, v| t.concat_last(&[v[0], v[1]]),
        ),
        ("concat_rows", vec![a.clone(), row.clone()], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        (
            "circular_convolution",
            vec![rand_t(&[2, 7], rng), rand_t(&[2, 7], rng)],
            |t, v| t.circular_convolution(v[0], v[1]),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, point, op)) in cases.into_iter().enumerate() {
        let report = grad_check_fn(&point, cfg, |t, v| {
            let y = op(t, v)?;
            weighted_sum(t, y, i as u64)
        })?;
        out.push(OpCheck { name, report });
    }

    let mask = fusion::dropout(&Tensor::full(&[3, 4], 1.0), 0.5, rng, true)?;
    let report = grad_check_fn(&[a.clone()], cfg, |t, v| {
        let y = t.mask_mul(v[0], mask.clone())?;
        weighted_sum(t, y, 100)
    })?;
    out.push(OpCheck {
        name: "dropout",
        report,
    });

    let map = Arc::new(SketchMap::random(4, 6, rng));
    let report = grad_check_fn(&[a.clone()], cfg, |t, v| {
        let y = t.count_sketch(v[0], map.clone())?;
        weighted_sum(t, y, 101)
    })?;
    out.push(OpCheck {
        name: "count_sketch",
        report,
    });

    let target = Tensor::vector(vec![0.1, 0.6, 0.3, 0.0])?;
    let report = grad_check_fn(&[rand_t(&[1, 4], rng)], cfg, |t, v| t.kl_div(v[0], &target))?;
    out.push(OpCheck {
        name: "kl_div",
        report,
    });
    Ok(out)
}

/// Gradient check of a fusion module with respect to both inputs and every
/// parameter of `f`.
fn fusion_check(
    f: &Fusion,
    norms: NormConfig,
    x: &Tensor,
    y: &Tensor,
    cfg: &GradCheckConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut point = vec![x.clone(), y.clone()];
    point.extend(f.named_params().into_iter().map(|(_, t)| t.clone()));
    grad_check(&point, cfg, |pt| {
        let mut local = f.clone();
        for (dst, src) in local.params_mut().into_iter().zip(&pt[2..]) {
            *dst = src.clone();
        }
        let mut s = Session::new(seed, false);
        let xv = s.input(pt[0].clone());
        let yv = s.input(pt[1].clone());
        let out = local.module(&mut s, xv, yv, norms)?.out;
        let mut wrt = vec![xv, yv];
        for (_, t) in local.named_params() {
            wrt.push(s.param(t));
        }
        let loss = weighted_sum(&mut s.tape, out, seed)?;
        Ok(Evaluation {
            tape: std::mem::take(&mut s.tape),
            loss,
            wrt,
        })
    })
}

fn fusion_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let (m, n) = (4, 3);
    let x = rand_t(&[2, m], rng);
    let y = rand_t(&[2, n], rng);
    let mfb = Fusion::Mfb(MfbParams::random(m, n, 2, 3, 0.0, rng)?);
    let mlb = Fusion::Mlb(MlbParams::random(m, n, 3, 0.0, rng)?);
    let mcb = Fusion::Mcb(McbParams::new(m, n, 7, rng.gen(), 0.0)?);
    let concat = Fusion::Concat(ConcatParams::random(m, n, 3, 0.0, rng)?);
    let mut out = Vec::new();
    for (name, f) in [
        ("mfb", &mfb),
        ("mlb", &mlb),
        ("mcb", &mcb),
        ("concat", &concat),
    ] {
        let report = fusion_check(f, NormConfig::NONE, &x, &y, cfg, 7)?;
        out.push(OpCheck { name, report });
    }
    let report = fusion_check(&mfb, NormConfig::default(), &x, &y, cfg, 8)?;
    out.push(OpCheck {
        name: "mfb_module",
        report,
    });
    Ok(out)
}

fn lstm_check(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let layer = LstmLayer::random(3, 2, rng);
    let xs = rand_t(&[3, 3], rng);
    let point = vec![xs, layer.w_ih.clone(), layer.w_hh.clone(), layer.b.clone()];
    let report = grad_check(&point, cfg, |pt| {
        let local = LstmLayer {
            w_ih: pt[1].clone(),
            w_hh: pt[2].clone(),
            b: pt[3].clone(),
        };
        let mut s = Session::eval();
        let x = s.input(pt[0].clone());
        let h = local.forward(&mut s, x)?;
        let wrt = vec![
            x,
            s.param(&local.w_ih),
            s.param(&local.w_hh),
            s.param(&local.b),
        ];
        let loss = weighted_sum(&mut s.tape, h, 3)?;
        Ok(Evaluation {
            tape: std::mem::take(&mut s.tape),
            loss,
            wrt,
        })
    })?;
    Ok(OpCheck {
        name: "lstm",
        report,
    })
}

fn head_point(head: &AttentionHead) -> Vec<Tensor> {
    head.named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect()
}

fn with_head(head: &AttentionHead, pt: &[Tensor]) -> AttentionHead {
    let mut h = head.clone();
    for (dst, src) in h.params_mut().into_iter().zip(pt) {
        *dst = src.clone();
    }
    h
}

fn attention_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let words = rand_t(&[4, 3], rng);
    let q_head = AttentionHead::random(3, 3, 2, rng)?;
    let mut point = vec![words];
    point.extend(head_point(&q_head));
    let mask = [true, true, true, false];
    let q_report = grad_check(&point, cfg, |pt| {
        let head = with_head(&q_head, &pt[1..]);
        let mut s = Session::eval();
        let w = s.input(pt[0].clone());
        let att = question_attention(&mut s, w, Some(&mask), &head)?;
        let mut wrt = vec![w];
        for (_, t) in head.named_params() {
            wrt.push(s.param(t));
        }
        let loss = weighted_sum(&mut s.tape, att.feature, 4)?;
        Ok(Evaluation {
            tape: std::mem::take(&mut s.tape),
            loss,
            wrt,
        })
    })?;

    let grid = rand_t(&[4, 3], rng);
    let question = rand_t(&[1, 2], rng);
    let fuse = Fusion::Mfb(MfbParams::random(3, 2, 2, 3, 0.0, rng)?);
    let i_head = AttentionHead::random(3, 3, 2, rng)?;
    let mut point = vec![grid, question];
    point.extend(head_point(&i_head));
    let i_report = grad_check(&point, cfg, |pt| {
        let head = with_head(&i_head, &pt[2..]);
        let mut s = Session::eval();
        let g = s.input(pt[0].clone());
        let q = s.input(pt[1].clone());
        let att = image_attention(&mut s, g, q, &fuse, NormConfig::default(), &head)?;
        let mut wrt = vec![g, q];
        for (_, t) in head.named_params() {
            wrt.push(s.param(t));
        }
        let loss = weighted_sum(&mut s.tape, att.feature, 5)?;
        Ok(Evaluation {
            tape: std::mem::take(&mut s.tape),
            loss,
            wrt,
        })
    })?;
    Ok(vec![
        OpCheck {
            name: "question_attention",
            report: q_report,
        },
        OpCheck {
            name: "image_attention",
            report: i_report,
        },
    ])
}

/// Tiny network dimensions for gradient checking: G=4 cells, T=3 tokens,
/// N=3 answers.
pub fn gradcheck_model_config(arch: Arch, fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        arch,
        fusion,
        k: 2,
        o: 3,
        mcb_d: 5,
        vocab: 5,
        embed: 3,
        hidden: 2,
        grid_dim: 3,
        answers: 3,
        glimpses: 2,
        att_hidden: 3,
        norms: NormConfig::default(),
        dropout_lstm: 0.0,
        dropout_fusion: 0.0,
        mcb_seed: 3,
    }
}

/// Checks the KL loss of a whole network with respect to every parameter.
pub fn network_check(
    model: &CoAttModel,
    grid: &Tensor,
    tokens: &[usize],
    target: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let point: Vec<Tensor> = model.params().into_iter().cloned().collect();
    grad_check(&point, cfg, |pt| {
        let mut local = model.clone();
        local.set_params(pt)?;
        let mut s = Session::eval();
        let (loss, _) = local.loss(&mut s, grid, tokens, target)?;
        let wrt = local.params().into_iter().map(|t| s.param(t)).collect();
        Ok(Evaluation {
            tape: std::mem::take(&mut s.tape),
            loss,
            wrt,
        })
    })
}

fn network_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    let grid = rand_t(&[4, 3], rng);
    let tokens = [3, 1, 0];
    let target = Tensor::vector(vec![0.2, 0.7, 0.1])?;
    let mut out = Vec::new();
    for (name, arch) in [
        ("baseline_network", Arch::Baseline),
        ("coatt_network", Arch::CoAttention),
    ] {
        let model = CoAttModel::new(gradcheck_model_config(arch, FusionKind::Mfb), rng)?;
        let report = network_check(&model, &grid, &tokens, &target, cfg)?;
        out.push(OpCheck { name, report });
    }
    Ok(out)
}

/// Every registered gradient check, in a fixed order.
pub fn gradient_suite(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = elementwise_checks(cfg, &mut rng)?;
    out.extend(fusion_checks(cfg, &mut rng)?);
    out.push(lstm_check(cfg, &mut rng)?);
    out.extend(attention_checks(cfg, &mut rng)?);
    out.extend(network_checks(cfg, &mut rng)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceFailure {
    pub suite: &'static str,
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub max_factorization_diff: f64,
    pub failures: Vec<EquivalenceFailure>,
}

impl EquivalenceReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Seed of instance `i` of an equivalence run started from `base`.
pub fn instance_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// Optional corruption applied to the factorized weights before comparison,
/// used to exercise the failure path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub seed: u64,
    pub delta: f64,
}

/// MFB against the explicit bilinear form built from its own factors.
pub fn factorization_instance(seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=4);
    let o = rng.gen_range(1..=4);
    let p = MfbParams::random(m, n, k, o, 0.0, &mut rng)?;
    let oracle = BilinearOracleParams::from_factors(&p);
    let x = rand_t(&[m], &mut rng);
    let y = rand_t(&[n], &mut rng);
    let mut tested = p.clone();
    if let Some(f) = fault.filter(|f| f.seed == seed) {
        tested.u.data_mut()[0] += f.delta;
    }
    let z = fusion::mfb(&x, &y, &tested)?;
    let zhat = fusion::naive_bilinear(&x, &y, &oracle)?;
    z.max_abs_diff(&zhat)
}

/// Whether MLB and MFB with `k = 1` agree bit for bit on one instance.
pub fn specialization_instance(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=8);
    let o = rng.gen_range(1..=8);
    let p = MfbParams::random(m, n, 1, o, 0.0, &mut rng)?;
    let x = rand_t(&[m], &mut rng);
    let y = rand_t(&[n], &mut rng);
    let a = fusion::mlb(&x, &y, &p.u, &p.v)?;
    let b = fusion::mfb(&x, &y, &p)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .all(|(u, v)| u.to_bits() == v.to_bits()))
}

pub fn equivalence_suite(
    instances: usize,
    base_seed: u64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<EquivalenceReport> {
    if instances == 0 {
        return Err(Error::Config(
            "equivalence suite needs at least one instance".into(),
        ));
    }
    let mut failures = Vec::new();
    let mut max_diff = 0.0f64;
    for i in 0..instances {
        let seed = instance_seed(base_seed, i);
        let diff = factorization_instance(seed, fault)?;
        max_diff = max_diff.max(diff);
        if !(diff < tol) {
            failures.push(EquivalenceFailure {
                suite: "factorization",
                seed,
                detail: format!("max abs diff {diff:e}"),
            });
        }
        if !specialization_instance(seed)? {
            failures.push(EquivalenceFailure {
                suite: "mlb_specialization",
                seed,
                detail: "mlb differs from mfb(k=1)".into(),
            });
        }
    }
    Ok(EquivalenceReport {
        instances,
        max_factorization_diff: max_diff,
        failures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SketchEstimate {
    pub exact: f64,
    pub mean: f64,
}

impl SketchEstimate {
    pub fn rel_err(&self) -> f64 {
        (self.mean - self.exact).abs() / self.exact.abs()
    }
}

/// Monte Carlo mean of `<CS(x), CS(y)>` over `draws` independent hash
/// pairs, for `pairs` random vector pairs of width `n`. Each `y` is `x` plus
/// independent noise, which keeps `<x, y>` well away from zero.
pub fn sketch_unbiasedness(
    pairs: usize,
    n: usize,
    d: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<SketchEstimate>> {
    if pairs == 0 || draws == 0 || n == 0 || d == 0 {
        return Err(Error::Config("sketch study needs positive sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let x = rand_t(&[n], &mut rng);
        let noise = rand_t(&[n], &mut rng);
        let y = x.add(&noise.scale(0.5))?;
        let mut total = 0.0;
        for _ in 0..draws {
            let map = SketchMap::random(n, d, &mut rng);
            let sx = crate::sketch::count_sketch(&x, &map)?;
            let sy = crate::sketch::count_sketch(&y, &map)?;
            total += sx.dot(&sy)?;
        }
        out.push(SketchEstimate {
            exact: x.dot(&y)?,
            mean: total / draws as f64,
        });
    }
    Ok(out)
}
