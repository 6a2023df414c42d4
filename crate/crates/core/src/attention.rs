//! Question and image attention.
//!
//! An [`AttentionHead`] maps each position feature through
//! `linear -> ReLU -> linear` to `g` logits, normalizes every glimpse with a
//! softmax over positions, and returns the concatenation of the `g`
//! attention-weighted sums of the position features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{Fusion, NormConfig};
use crate::session::Session;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub glimpses: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Attended feature `[1 x g*d]` and the weights `[g x P]` that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub feature: Var,
    pub weights: Var,
}

impl AttentionHead {
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        glimpses: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if glimpses == 0 || hidden_dim == 0 || in_dim == 0 {
            return Err(Error::Config(
                "attention head needs positive in/hidden/glimpse sizes".into(),
            ));
        }
        Ok(AttentionHead {
            in_dim,
            hidden_dim,
            glimpses,
            w1: Tensor::glorot(in_dim, hidden_dim, rng),
            b1: Tensor::zeros(&[hidden_dim]),
            w2: Tensor::glorot(hidden_dim, glimpses, rng),
            b2: Tensor::zeros(&[glimpses]),
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Attention weights `[g x P]` from position inputs `[P x in_dim]`.
    pub fn weights<'m>(
        &'m self,
        s: &mut Session<'m>,
        inputs: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = s.value(inputs).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim("attention head", &shape, &[self.in_dim]));
        }
        let (w1, b1, w2, b2) = (
            s.param(&self.w1),
            s.param(&self.b1),
            s.param(&self.w2),
            s.param(&self.b2),
        );
        let hidden = s.tape.matmul(inputs, w1)?;
        let hidden = s.tape.add_row(hidden, b1)?;
        let hidden = s.tape.relu(hidden);
        let logits = s.tape.matmul(hidden, w2)?;
        let logits = s.tape.add_row(logits, b2)?;
        let per_glimpse = s.tape.transpose(logits)?;
        s.tape.softmax(per_glimpse, mask)
    }
}

/// Concatenated glimpses `[1 x g*d]` of `weights [g x P] . features [P x d]`.
fn pool(s: &mut Session<'_>, weights: Var, features: Var) -> Result<Var> {
    let pooled = s.tape.matmul(weights, features)?;
    let n = s.value(pooled).numel();
    s.tape.reshape(pooled, &[1, n])
}

/// Attends over words `[T x dq]` using the words alone.
pub fn question_attention<'m>(
    s: &mut Session<'m>,
    words: Var,
    mask: Option<&[bool]>,
    head: &'m AttentionHead,
) -> Result<Attended> {
    let weights = head.weights(s, words, mask)?;
    let feature = pool(s, weights, words)?;
    Ok(Attended { feature, weights })
}

/// Fuses every grid cell `[G x dv]` with the question feature `[1 x dq]`,
/// scores the fused cells with `head` and pools the raw grid features.
pub fn image_attention<'m>(
    s: &mut Session<'m>,
    grid: Var,
    question: Var,
    fuse: &'m Fusion,
    norms: NormConfig,
    head: &'m AttentionHead,
) -> Result<Attended> {
    let fused = fuse.module(s, grid, question, norms)?.out;
    let weights = head.weights(s, fused, None)?;
    let feature = pool(s, weights, grid)?;
    Ok(Attended { feature, weights })
}

/// Eager question attention on `[T x dq]` word features, no padding mask.
pub fn question_attention_eval(words: &Tensor, head: &AttentionHead) -> Result<Tensor> {
    let mut s = Session::eval();
    let w = s.input(words.clone());
    let out = question_attention(&mut s, w, None, head)?;
    let f = s.value(out.feature);
    f.reshape(&[f.numel()])
}

/// Eager image attention on `[G x dv]` grid features and a `[dq]` question.
pub fn image_attention_eval(
    grid: &Tensor,
    question: &Tensor,
    fuse: &Fusion,
    norms: NormConfig,
    head: &AttentionHead,
) -> Result<Tensor> {
    let mut s = Session::eval();
    let g = s.input(grid.clone());
    let q = s.input(question.reshape(&[1, question.numel()])?);
    let out = image_attention(&mut s, g, q, fuse, norms, head)?;
    let f = s.value(out.feature);
    f.reshape(&[f.numel()])
}
