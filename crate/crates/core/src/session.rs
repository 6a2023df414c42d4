//! Per-evaluation context: a tape, the model parameters bound to it, and
//! the RNG that draws dropout masks.

use std::collections::HashMap;
use std::marker::PhantomData;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub struct Session<'m> {
    pub tape: Tape,
    bound: HashMap<*const Tensor, Var>,
    rng: ChaCha8Rng,
    training: bool,
    _params: PhantomData<&'m Tensor>,
}

impl<'m> Session<'m> {
    pub fn new(seed: u64, training: bool) -> Self {
        Session {
            tape: Tape::new(),
            bound: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training,
            _params: PhantomData,
        }
    }

    /// Inference-mode session; dropout is the identity.
    pub fn eval() -> Self {
        Self::new(0, false)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Leaf for a model parameter. Binding the same tensor twice returns the
    /// same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, t: &'m Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.tape.leaf(t.clone());
        self.bound.insert(key, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout: in training mode every element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, v: Var, p: f64) -> Result<Var> {
        let shape = self.tape.value(v).shape().to_vec();
        match dropout_mask(&shape, p, self.training, &mut self.rng)? {
            Some(mask) => self.tape.mask_mul(v, mask),
            None => Ok(v),
        }
    }

    /// Gradients for `params`, in order; zeros for parameters the loss
    /// never touched.
    pub fn param_grads(&self, grads: &Gradients, params: &[&'m Tensor]) -> Vec<Tensor> {
        params
            .iter()
            .map(|&p| match self.bound.get(&(p as *const Tensor)) {
                Some(&v) => grads.wrt(v),
                None => Tensor::zeros(p.shape()),
            })
            .collect()
    }
}

/// Draws an inverted-dropout mask, or `None` when dropout is inactive.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.gen::<f64>() < p { 0.0 } else { keep };
    }
    Ok(Some(mask))
}
