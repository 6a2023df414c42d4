//! The VQA networks: the no-attention baseline (LSTM question feature fused
//! with a pooled image feature) and the co-attention network (question
//! attention, question-conditioned image attention, final fusion).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{image_attention, question_attention, AttentionHead};
use crate::error::{Error, Result};
use crate::fusion::{ConcatParams, Fusion, McbParams, MfbParams, MlbParams, NormConfig};
use crate::lstm::QuestionEncoder;
use crate::session::Session;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Baseline,
    CoAttention,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arch::Baseline),
            "coatt" => Ok(Arch::CoAttention),
            _ => Err(Error::Config(format!(
                "unknown arch `{s}` (baseline|coatt)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Baseline => "baseline",
            Arch::CoAttention => "coatt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Mfb,
    Mlb,
    Mcb,
    Concat,
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfb" => Ok(FusionKind::Mfb),
            "mlb" => Ok(FusionKind::Mlb),
            "mcb" => Ok(FusionKind::Mcb),
            "concat" => Ok(FusionKind::Concat),
            _ => Err(Error::Config(format!(
                "unknown fusion `{s}` (mfb|mlb|mcb|concat)"
            ))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Mfb => "mfb",
            FusionKind::Mlb => "mlb",
            FusionKind::Mcb => "mcb",
            FusionKind::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub fusion: FusionKind,
    /// MFB factor count.
    pub k: usize,
    /// Fused output width for MFB, MLB and the concat control.
    pub o: usize,
    /// MCB sketch width.
    pub mcb_d: usize,
    pub vocab: usize,
    pub embed: usize,
    /// LSTM hidden units per layer.
    pub hidden: usize,
    /// Width of one grid-cell (image) feature.
    pub grid_dim: usize,
    /// Number of answer classes.
    pub answers: usize,
    pub glimpses: usize,
    pub att_hidden: usize,
    pub norms: NormConfig,
    pub dropout_lstm: f64,
    pub dropout_fusion: f64,
    /// Seed for the fixed MCB sketch maps.
    pub mcb_seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale co-attention MFB network.
    fn default() -> Self {
        ModelConfig {
            arch: Arch::CoAttention,
            fusion: FusionKind::Mfb,
            k: 5,
            o: 32,
            mcb_d: 160,
            vocab: 64,
            embed: 32,
            hidden: 64,
            grid_dim: 16,
            answers: 8,
            glimpses: 2,
            att_hidden: 32,
            norms: NormConfig::default(),
            dropout_lstm: 0.3,
            dropout_fusion: 0.1,
            mcb_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-scale shapes: 1024-unit LSTMs, 2048-D image features,
    /// MFB with k=5, o=1000 and 3000 answers. For shape checks only.
    pub fn full_scale(arch: Arch, vocab: usize) -> Self {
        ModelConfig {
            arch,
            fusion: FusionKind::Mfb,
            k: 5,
            o: 1000,
            mcb_d: 16000,
            vocab,
            embed: 300,
            hidden: 1024,
            grid_dim: 2048,
            answers: 3000,
            glimpses: 2,
            att_hidden: 512,
            norms: NormConfig::default(),
            dropout_lstm: 0.3,
            dropout_fusion: 0.1,
            mcb_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("o", self.o),
            ("mcb_d", self.mcb_d),
            ("vocab", self.vocab),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("grid_dim", self.grid_dim),
            ("glimpses", self.glimpses),
            ("att_hidden", self.att_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.answers < 2 {
            return Err(Error::Config("need at least 2 answer classes".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config(
                "vocabulary must hold pad plus one word".into(),
            ));
        }
        for p in [self.dropout_lstm, self.dropout_fusion] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn build_fusion<R: Rng + ?Sized>(
        &self,
        m: usize,
        n: usize,
        salt: u64,
        rng: &mut R,
    ) -> Result<Fusion> {
        let p = self.dropout_fusion;
        Ok(match self.fusion {
            FusionKind::Mfb => Fusion::Mfb(MfbParams::random(m, n, self.k, self.o, p, rng)?),
            FusionKind::Mlb => Fusion::Mlb(MlbParams::random(m, n, self.o, p, rng)?),
            FusionKind::Mcb => Fusion::Mcb(McbParams::new(
                m,
                n,
                self.mcb_d,
                self.mcb_seed.wrapping_add(salt),
                p,
            )?),
            FusionKind::Concat => Fusion::Concat(ConcatParams::random(m, n, self.o, p, rng)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoAttModel {
    pub config: ModelConfig,
    pub encoder: QuestionEncoder,
    pub q_att: Option<AttentionHead>,
    pub fuse_att: Option<Fusion>,
    pub i_att: Option<AttentionHead>,
    pub fuse_final: Fusion,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[1 x N]`
    pub logits: Var,
    /// Final fusion output before power/l2 normalization, `[1 x o]`.
    pub probe: Var,
    pub question_weights: Option<Var>,
    pub image_weights: Option<Var>,
}

/// How the co-attention forward obtains its question and image features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    /// Last-word question feature and mean-pooled grid, attention heads
    /// unused.
    Bypass,
}

impl CoAttModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = QuestionEncoder::random(c.vocab, c.embed, c.hidden, c.dropout_lstm, rng);
        let dq = encoder.feature_dim();
        let (q_att, fuse_att, i_att, final_dims) = match c.arch {
            Arch::Baseline => (None, None, None, (c.grid_dim, dq)),
            Arch::CoAttention => {
                let g = c.glimpses;
                let q_att = AttentionHead::random(dq, c.att_hidden, g, rng)?;
                let fuse_att = c.build_fusion(c.grid_dim, g * dq, 1, rng)?;
                let i_att = AttentionHead::random(fuse_att.out_dim(), c.att_hidden, g, rng)?;
                (
                    Some(q_att),
                    Some(fuse_att),
                    Some(i_att),
                    (g * c.grid_dim, g * dq),
                )
            }
        };
        let fuse_final = c.build_fusion(final_dims.0, final_dims.1, 2, rng)?;
        let classifier_w = Tensor::glorot(fuse_final.out_dim(), c.answers, rng);
        Ok(CoAttModel {
            encoder,
            q_att,
            fuse_att,
            i_att,
            fuse_final,
            classifier_w,
            classifier_b: Tensor::zeros(&[c.answers]),
            config,
        })
    }

    /// Replaces the LSTM and fusion dropout probabilities.
    pub fn set_dropout(&mut self, lstm: f64, fusion: f64) -> Result<()> {
        for p in [lstm, fusion] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        self.config.dropout_lstm = lstm;
        self.config.dropout_fusion = fusion;
        self.encoder.dropout_p = lstm;
        for f in self
            .fuse_att
            .iter_mut()
            .chain(std::iter::once(&mut self.fuse_final))
        {
            f.set_dropout(fusion);
        }
        Ok(())
    }

    pub fn answers(&self) -> usize {
        self.config.answers
    }

    /// Every learnable tensor with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        if let Some(h) = &self.q_att {
            out.extend(
                h.named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("q_att.{n}"), t)),
            );
        }
        if let Some(f) = &self.fuse_att {
            out.extend(
                f.named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("fuse_att.{n}"), t)),
            );
        }
        if let Some(h) = &self.i_att {
            out.extend(
                h.named_params()
                    .into_iter()
                    .map(|(n, t)| (format!("i_att.{n}"), t)),
            );
        }
        out.extend(
            self.fuse_final
                .named_params()
                .into_iter()
                .map(|(n, t)| (format!("fuse_final.{n}"), t)),
        );
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable views in the same order as [`CoAttModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        if let Some(h) = &mut self.q_att {
            out.extend(h.params_mut());
        }
        if let Some(f) = &mut self.fuse_att {
            out.extend(f.params_mut());
        }
        if let Some(h) = &mut self.i_att {
            out.extend(h.params_mut());
        }
        out.extend(self.fuse_final.params_mut());
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Overwrites parameters in order; shapes must match.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim("set_params", slot.shape(), v.shape()));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    /// Loads parameters by name (as written by the model file format).
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != named.len() {
            return Err(Error::Input(format!(
                "model has {} tensors, file has {}",
                names.len(),
                named.len()
            )));
        }
        let mut ordered = Vec::with_capacity(names.len());
        for name in &names {
            let t = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            ordered.push(t);
        }
        self.set_params(&ordered)
    }

    fn classify<'m>(&'m self, s: &mut Session<'m>, fused: Var) -> Result<Var> {
        let w = s.param(&self.classifier_w);
        let b = s.param(&self.classifier_b);
        let logits = s.tape.matmul(fused, w)?;
        s.tape.add_row(logits, b)
    }

    /// Attention-free network: last-word question feature fused with a single
    /// image feature vector.
    pub fn forward_baseline<'m>(
        &'m self,
        s: &mut Session<'m>,
        image: &Tensor,
        tokens: &[usize],
    ) -> Result<Forward> {
        let (m, _) = self.fuse_final.in_dims();
        if image.numel() != m {
            return Err(Error::dim("baseline image feature", image.shape(), &[m]));
        }
        let q = self.encoder.encode(s, tokens)?;
        let x = s.input(image.reshape(&[1, m])?);
        let fused = self.fuse_final.module(s, x, q.last, self.config.norms)?;
        let logits = self.classify(s, fused.out)?;
        Ok(Forward {
            logits,
            probe: fused.pre_norm,
            question_weights: None,
            image_weights: None,
        })
    }

    /// Co-attention network over grid features `[G x dv]`.
    pub fn forward_coatt<'m>(
        &'m self,
        s: &mut Session<'m>,
        grid: &Tensor,
        tokens: &[usize],
        mode: AttentionMode,
    ) -> Result<Forward> {
        if grid.rank() != 2 || grid.cols() != self.config.grid_dim {
            return Err(Error::dim(
                "grid features",
                grid.shape(),
                &[self.config.grid_dim],
            ));
        }
        let norms = self.config.norms;
        let q = self.encoder.encode(s, tokens)?;
        let g = s.input(grid.clone());
        let (img, ques, qw, iw) = match mode {
            AttentionMode::Bypass => {
                let img = s.tape.mean_lanes(g);
                (img, q.last, None, None)
            }
            AttentionMode::Full => {
                let (Some(q_head), Some(fuse_att), Some(i_head)) =
                    (&self.q_att, &self.fuse_att, &self.i_att)
                else {
                    return Err(Error::Config(
                        "co-attention forward on a model built without attention".into(),
                    ));
                };
                let qa = question_attention(s, q.words, Some(&q.mask), q_head)?;
                let ia = image_attention(s, g, qa.feature, fuse_att, norms, i_head)?;
                (ia.feature, qa.feature, Some(qa.weights), Some(ia.weights))
            }
        };
        let fused = self.fuse_final.module(s, img, ques, norms)?;
        let logits = self.classify(s, fused.out)?;
        Ok(Forward {
            logits,
            probe: fused.pre_norm,
            question_weights: qw,
            image_weights: iw,
        })
    }

    /// Dispatches on the configured architecture. The baseline sees the
    /// mean-pooled grid.
    pub fn forward<'m>(
        &'m self,
        s: &mut Session<'m>,
        grid: &Tensor,
        tokens: &[usize],
    ) -> Result<Forward> {
        match self.config.arch {
            Arch::CoAttention => self.forward_coatt(s, grid, tokens, AttentionMode::Full),
            Arch::Baseline => self.forward_baseline(s, &mean_rows(grid)?, tokens),
        }
    }

    /// KL-divergence loss of one sample plus the forward handles.
    pub fn loss<'m>(
        &'m self,
        s: &mut Session<'m>,
        grid: &Tensor,
        tokens: &[usize],
        target: &Tensor,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward(s, grid, tokens)?;
        let loss = s.tape.kl_div(fwd.logits, target)?;
        Ok((loss, fwd))
    }
}

/// Mean over rows of a `[G x d]` matrix, as a `[d]` vector.
pub fn mean_rows(grid: &Tensor) -> Result<Tensor> {
    if grid.rank() != 2 {
        return Err(Error::dim("mean_rows", grid.shape(), &[2]));
    }
    let mut s = Session::eval();
    let g = s.input(grid.clone());
    let m = s.tape.mean_lanes(g);
    s.value(m).reshape(&[grid.cols()])
}

fn eager_logits(
    model: &CoAttModel,
    seed: u64,
    training: bool,
    run: impl for<'m> FnOnce(&'m CoAttModel, &mut Session<'m>) -> Result<Forward>,
) -> Result<Tensor> {
    let mut s = Session::new(seed, training);
    let fwd = run(model, &mut s)?;
    let l = s.value(fwd.logits);
    l.reshape(&[l.numel()])
}

/// Logits `[N]` of the co-attention network.
pub fn coatt_forward(
    grid: &Tensor,
    tokens: &[usize],
    model: &CoAttModel,
    seed: u64,
    training: bool,
) -> Result<Tensor> {
    eager_logits(model, seed, training, |m, s| {
        m.forward_coatt(s, grid, tokens, AttentionMode::Full)
    })
}

/// Logits `[N]` of the baseline network on one image feature vector.
pub fn baseline_forward(
    image: &Tensor,
    tokens: &[usize],
    model: &CoAttModel,
    seed: u64,
    training: bool,
) -> Result<Tensor> {
    eager_logits(model, seed, training, |m, s| {
        m.forward_baseline(s, image, tokens)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            k: 2,
            o: 3,
            mcb_d: 8,
            vocab: 7,
            embed: 3,
            hidden: 3,
            grid_dim: 4,
            answers: 3,
            glimpses: 2,
            att_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CoAttModel::new(small(Arch::CoAttention), &mut rng).unwrap();
        let grid = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let a = coatt_forward(&grid, &[1, 2, 0], &model, 5, false).unwrap();
        let b = coatt_forward(&grid, &[1, 2, 0], &model, 99, false).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.shape(), &[3]);
    }

    #[test]
    fn zero_image_gives_classifier_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = CoAttModel::new(small(Arch::Baseline), &mut rng).unwrap();
        model.classifier_b = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let logits = baseline_forward(&Tensor::zeros(&[4]), &[3, 1], &model, 0, false).unwrap();
        assert_eq!(logits, model.classifier_b);
    }

    #[test]
    fn param_names_and_mut_views_align() {
        for arch in [Arch::Baseline, Arch::CoAttention] {
            for fusion in [
                FusionKind::Mfb,
                FusionKind::Mlb,
                FusionKind::Mcb,
                FusionKind::Concat,
            ] {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let mut model = CoAttModel::new(
                    ModelConfig {
                        fusion,
                        ..small(arch)
                    },
                    &mut rng,
                )
                .unwrap();
                let shapes: Vec<Vec<usize>> =
                    model.params().iter().map(|t| t.shape().to_vec()).collect();
                let mut_shapes: Vec<Vec<usize>> = model
                    .params_mut()
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect();
                assert_eq!(shapes, mut_shapes);
            }
        }
    }

    #[test]
    fn set_params_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = CoAttModel::new(small(Arch::Baseline), &mut rng).unwrap();
        let mut values: Vec<Tensor> = model.params().into_iter().cloned().collect();
        values[0] = Tensor::zeros(&[1]);
        assert!(model.set_params(&values).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            answers: 1,
            ..small(Arch::Baseline)
        };
        assert!(matches!(
            CoAttModel::new(cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
