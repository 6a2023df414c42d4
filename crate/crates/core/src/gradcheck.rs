//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Probes that move a ReLU or power-norm input lying within this
    /// distance of its kink (or across it) are excluded from the check.
    pub kink_zone: f64,
    /// Probes that move a power-norm input by more than this fraction of
    /// its magnitude are excluded too: the square root's curvature makes the
    /// central difference unreliable there.
    pub root_resolution: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tol: 1e-4,
            kink_zone: 1e-3,
            root_resolution: 1e-2,
        }
    }
}

/// One forward evaluation: the tape, its scalar loss, and the leaves that
/// correspond (in order) to the tensors of the evaluation point.
pub struct Evaluation {
    pub tape: Tape,
    pub loss: Var,
    pub wrt: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per point tensor.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    pub excluded: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `|g - g_hat| / max(|g|, |g_hat|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_value(ev: &Evaluation, param: usize, coord: usize) -> Result<f64> {
    let v = ev.tape.value(ev.loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss while probing param {param} coordinate {coord}"
        )));
    }
    Ok(v)
}

fn near_kink(base: &[f64], plus: &[f64], minus: &[f64], zone: f64) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    base.iter().zip(plus).zip(minus).any(|((&b, &p), &m)| {
        let moved = p != b || m != b;
        let crossed = (b > 0.0) != (p > 0.0) || (b > 0.0) != (m > 0.0);
        moved && (crossed || b.abs().min(p.abs()).min(m.abs()) < zone)
    })
}

fn coarse_root_probe(base: &[f64], plus: &[f64], minus: &[f64], resolution: f64) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    base.iter()
        .zip(plus)
        .zip(minus)
        .any(|((&b, &p), &m)| (p - b).abs().max((m - b).abs()) > resolution * b.abs())
}

/// Compares the tape gradient of `f` at `point` with the central difference
/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn grad_check<F>(point: &[Tensor], cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Evaluation>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let base = f(point)?;
    if base.wrt.len() != point.len() {
        return Err(Error::Contract(format!(
            "evaluation exposes {} leaves for {} point tensors",
            base.wrt.len(),
            point.len()
        )));
    }
    loss_value(&base, 0, 0)?;
    let grads = base.tape.backward(base.loss)?;
    let analytic: Vec<Tensor> = base.wrt.iter().map(|&v| grads.wrt(v)).collect();
    for (i, g) in analytic.iter().enumerate() {
        if let Some(c) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at param {i} coordinate {c}"
            )));
        }
    }

    let mut probe = point.to_vec();
    let mut per_param = vec![0.0; point.len()];
    let mut worst: Option<WorstCoordinate> = None;
    let (mut checked, mut excluded) = (0, 0);
    for p in 0..point.len() {
        for c in 0..point[p].numel() {
            let x0 = point[p].data()[c];
            probe[p].data_mut()[c] = x0 + cfg.step;
            let plus = f(&probe)?;
            probe[p].data_mut()[c] = x0 - cfg.step;
            let minus = f(&probe)?;
            probe[p].data_mut()[c] = x0;

            let (fp, fm) = (loss_value(&plus, p, c)?, loss_value(&minus, p, c)?);
            if near_kink(
                base.tape.kink_trace(),
                plus.tape.kink_trace(),
                minus.tape.kink_trace(),
                cfg.kink_zone,
            ) || coarse_root_probe(
                base.tape.root_trace(),
                plus.tape.root_trace(),
                minus.tape.root_trace(),
                cfg.root_resolution,
            ) {
                excluded += 1;
                continue;
            }
            checked += 1;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[p].data()[c];
            let rel_err = relative_error(a, numeric);
            per_param[p] = f64::max(per_param[p], rel_err);
            if worst.as_ref().map_or(true, |w| rel_err > w.rel_err) {
                worst = Some(WorstCoordinate {
                    param: p,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        worst,
        checked,
        excluded,
        tol: cfg.tol,
        pass: max_rel_err <= cfg.tol && checked > 0,
    })
}

/// Convenience wrapper: builds a fresh tape with one leaf per point tensor
/// and hands the leaves to `f`, which returns the scalar loss node.
pub fn grad_check_fn<F>(point: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check(point, cfg, |pt| {
        let mut tape = Tape::new();
        let wrt: Vec<Var> = pt.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &wrt)?;
        Ok(Evaluation { tape, loss, wrt })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let r = grad_check_fn(&[x], &GradCheckConfig::default(), |tape, _| {
            Ok(tape.leaf(Tensor::scalar(3.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn half_squared_norm_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);
        let cfg = GradCheckConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let r = grad_check_fn(&[x], &cfg, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 0.5))
        })
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu(x) at a point far from the kink, then a deliberately broken
        // function: the tape sees x, the value depends on x^2 via a constant.
        let x = Tensor::vector(vec![0.7]).unwrap();
        let r = grad_check(&[x], &GradCheckConfig::default(), |pt| {
            let mut tape = Tape::new();
            let v = tape.leaf(pt[0].clone());
            let c = tape.leaf(Tensor::scalar(pt[0].data()[0].powi(2)));
            let s = tape.add(v, c)?;
            Ok(Evaluation {
                tape,
                loss: s,
                wrt: vec![v],
            })
        })
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst.unwrap().param, 0);
    }

    #[test]
    fn relu_kink_probe_is_excluded() {
        let x = Tensor::vector(vec![1e-4, 1.0]).unwrap();
        let r = grad_check_fn(&[x], &GradCheckConfig::default(), |tape, v| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 1);
        assert!(r.pass);
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let err = grad_check(&[x], &GradCheckConfig::default(), |pt| {
            let mut tape = Tape::new();
            let v = tape.leaf(pt[0].clone());
            let bad = if pt[0].data()[1] != 0.0 {
                f64::NAN
            } else {
                0.0
            };
            let c = tape.leaf(Tensor::vector(vec![0.0, bad]).unwrap());
            let s = tape.add(v, c)?;
            let loss = tape.sum(s);
            Ok(Evaluation {
                tape,
                loss,
                wrt: vec![v],
            })
        })
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
