//! Loss, optimizer, schedule, synthetic data, the training loop and the
//! neuron-percentile tracker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::CoAttModel;
use crate::session::Session;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_interval: usize,
    pub decay_rate: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout_lstm: f64,
    pub dropout_mfb: f64,
    /// Iterations between percentile records.
    pub log_interval: usize,
    /// Index of the tracked neuron in the final fusion's pre-norm output.
    pub probe_neuron: usize,
}

/// Mini-batch size used without attention.
pub const BATCH_BASELINE: usize = 200;
/// Mini-batch size used with co-attention.
pub const BATCH_COATT: usize = 64;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.0007,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            decay_interval: 40_000,
            decay_rate: 0.5,
            max_iters: 100_000,
            batch_size: BATCH_COATT,
            seed: 0,
            dropout_lstm: 0.3,
            dropout_mfb: 0.1,
            log_interval: 10,
            probe_neuron: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr {} must be >= 0",
                self.base_lr
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate {} outside (0, 1]",
                self.decay_rate
            )));
        }
        if self.decay_interval == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "decay_interval, batch_size and log_interval must be positive".into(),
            ));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        for p in [self.dropout_lstm, self.dropout_mfb] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `base_lr * decay_rate^floor(iter / decay_interval)`
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_rate.powi((iter / cfg.decay_interval) as i32)
}

// ---------------------------------------------------------------------------
// Loss

/// KL divergence between a soft target and `softmax(logits)`.
pub fn kl_div_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    let mut s = Session::eval();
    let l = s.input(logits.clone());
    let loss = s.tape.kl_div(l, target)?;
    s.value(loss).item()
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    names: Vec<String>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            names: (0..params.len()).map(|i| format!("#{i}")).collect(),
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = names;
        self
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || g.shape() != state.m[i].shape() {
            return Err(Error::dim("adam", params[i].shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                state.names[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / c1;
            let v_hat = vj / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Number of filler word ids in the synthetic vocabulary.
pub const FILLER_WORDS: usize = 16;
/// Simulated annotators per question.
pub const ANNOTATORS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Grid cells per image (G).
    pub grid: usize,
    /// Question length including padding (T).
    pub seq_len: usize,
    /// Cell feature width; the first `colors` entries carry the color, the
    /// rest a fixed per-cell tag.
    pub feat_dim: usize,
    pub colors: usize,
    /// Answer classes (N >= colors).
    pub answers: usize,
    pub annotator_noise: f64,
    /// Half-width of the uniform noise added to the color one-hot.
    pub feature_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            grid: 16,
            seq_len: 8,
            feat_dim: 16,
            colors: 8,
            answers: 8,
            annotator_noise: 0.1,
            feature_noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    /// Token ids: 0 pad, `1..=G` keys, then the filler words.
    pub fn vocab_size(&self) -> usize {
        1 + self.grid + FILLER_WORDS
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.seq_len < 2 {
            return Err(Error::Config(
                "synthetic task needs G >= 2 and T >= 2".into(),
            ));
        }
        if self.colors < 2 || self.colors > self.answers {
            return Err(Error::Config(format!(
                "need 2 <= colors ({}) <= answers ({})",
                self.colors, self.answers
            )));
        }
        if self.feat_dim <= self.colors {
            return Err(Error::Config(format!(
                "feat_dim {} leaves no room for cell tags beyond {} colors",
                self.feat_dim, self.colors
            )));
        }
        if !(0.0..=1.0).contains(&self.annotator_noise) || self.feature_noise < 0.0 {
            return Err(Error::Config("noise levels out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub grid_feats: Tensor,
    pub tokens: Vec<usize>,
    pub soft_target: Tensor,
    pub hard_answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Which grid cell each key token asks about.
    pub key_to_cell: Vec<usize>,
    /// Fixed tag features `[G x (feat_dim - colors)]`.
    pub cell_tags: Tensor,
    pub samples: Vec<SyntheticSample>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Key-lookup task: each cell shows a noisy one-hot color plus a fixed tag;
/// the question names a key that a fixed random table maps to one cell, and
/// the answer is that cell's color. Which cell matters depends on the
/// question, so the answer needs a question-image interaction.
pub fn make_synthetic_dataset(
    spec: &SyntheticSpec,
    num_samples: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.grid;
    let tag_dim = spec.feat_dim - spec.colors;
    let mut key_to_cell: Vec<usize> = (0..g).collect();
    key_to_cell.shuffle(&mut rng);
    let cell_tags = Tensor::uniform(&[g, tag_dim], -1.0, 1.0, &mut rng);

    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let colors: Vec<usize> = (0..g).map(|_| rng.gen_range(0..spec.colors)).collect();
        let mut grid = Tensor::zeros(&[g, spec.feat_dim]);
        for (cell, &c) in colors.iter().enumerate() {
            let row = &mut grid.data_mut()[cell * spec.feat_dim..(cell + 1) * spec.feat_dim];
            for (j, v) in row[..spec.colors].iter_mut().enumerate() {
                let noise = if spec.feature_noise > 0.0 {
                    rng.gen_range(-spec.feature_noise..spec.feature_noise)
                } else {
                    0.0
                };
                *v = if j == c { 1.0 } else { 0.0 } + noise;
            }
            row[spec.colors..].copy_from_slice(cell_tags.row(cell));
        }

        let key = rng.gen_range(0..g);
        let len = rng.gen_range(2..=spec.seq_len);
        let key_pos = rng.gen_range(0..len);
        let mut tokens = vec![crate::lstm::PAD; spec.seq_len];
        for (pos, tok) in tokens.iter_mut().enumerate().take(len) {
            *tok = if pos == key_pos {
                1 + key
            } else {
                1 + g + rng.gen_range(0..FILLER_WORDS)
            };
        }

        let truth = colors[key_to_cell[key]];
        let mut counts = vec![0usize; spec.answers];
        for _ in 0..ANNOTATORS {
            let said = if rng.gen::<f64>() < spec.annotator_noise {
                rng.gen_range(0..spec.colors)
            } else {
                truth
            };
            counts[said] += 1;
        }
        let soft: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 / ANNOTATORS as f64)
            .collect();
        let hard_answer = argmax(&soft);
        samples.push(SyntheticSample {
            grid_feats: grid,
            tokens,
            soft_target: Tensor::vector(soft)?,
            hard_answer,
        });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        key_to_cell,
        cell_tags,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Percentiles

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PercentileLog {
    pub iter: usize,
    pub p15: f64,
    pub p50: f64,
    pub p85: f64,
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl PercentileLog {
    pub fn from_values(iter: usize, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("no values to summarize".into()));
        }
        Ok(PercentileLog {
            iter,
            p15: percentile(values, 15.0),
            p50: percentile(values, 50.0),
            p85: percentile(values, 85.0),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PercentileSummary {
    /// `max(p50) - min(p50)` over the window.
    pub p50_range: f64,
    /// Mean of `p85 - p15` over the window.
    pub mean_spread: f64,
    /// Largest `|p50 - p50_first|` within the window.
    pub max_p50_drift: f64,
    pub window_len: usize,
}

/// Spread statistics over the trailing `window` fraction (0, 1] of a log.
pub fn percentile_summary(logs: &[PercentileLog], window: f64) -> Result<PercentileSummary> {
    if logs.is_empty() {
        return Err(Error::Input("empty percentile log".into()));
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Input(format!(
            "window fraction {window} outside (0, 1]"
        )));
    }
    let len = ((logs.len() as f64 * window).ceil() as usize).clamp(1, logs.len());
    let tail = &logs[logs.len() - len..];
    let p50s = tail.iter().map(|l| l.p50);
    let max = p50s.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = p50s.clone().fold(f64::INFINITY, f64::min);
    let first = tail[0].p50;
    Ok(PercentileSummary {
        p50_range: max - min,
        mean_spread: tail.iter().map(|l| l.p85 - l.p15).sum::<f64>() / len as f64,
        max_p50_drift: p50s.map(|p| (p - first).abs()).fold(0.0, f64::max),
        window_len: len,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub losses: Vec<IterLog>,
    /// `(epoch, accuracy)` on the evaluation split after every epoch.
    pub accuracy: Vec<(usize, f64)>,
    pub percentiles: Vec<PercentileLog>,
    pub final_accuracy: f64,
}

/// Progress notifications from [`train_loop`].
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Iteration(&'a IterLog),
    Epoch { epoch: usize, accuracy: f64 },
}

/// Fraction of samples whose argmax logit equals the hard answer.
pub fn accuracy(model: &CoAttModel, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for sample in samples {
        let mut s = Session::eval();
        let fwd = model.forward(&mut s, &sample.grid_feats, &sample.tokens)?;
        if argmax(s.value(fwd.logits).data()) == sample.hard_answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn sample_seed(seed: u64, iter: usize, slot: usize) -> u64 {
    // splitmix64 finalizer over the (seed, iter, slot) triple
    let mut z = seed
        .wrapping_add((iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((slot as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch Adam training with the step schedule. Samples in a batch are
/// processed in order and their gradients summed in that order, so a run
/// is a pure function of `(model, data, cfg)`.
pub fn train_loop(
    model: &mut CoAttModel,
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    cfg: &TrainConfig,
    callback: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    model.set_dropout(cfg.dropout_lstm, cfg.dropout_mfb)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(&model.params()).with_names(names);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.min(train.len());
    let iters_per_epoch = train.len().div_ceil(batch);

    let mut history = History::default();
    let mut cursor = train.len();
    for iter in 0..cfg.max_iters {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == train.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let (loss, grads, probes) = {
            let params = model.params();
            let mut total: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut loss_sum = 0.0;
            let mut probes = Vec::with_capacity(batch);
            for (slot, &idx) in picked.iter().enumerate() {
                let sample = &train[idx];
                let mut s = Session::new(sample_seed(cfg.seed, iter, slot), true);
                let (loss, fwd) = model.loss(
                    &mut s,
                    &sample.grid_feats,
                    &sample.tokens,
                    &sample.soft_target,
                )?;
                let lv = s.value(loss).item()?;
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        iter,
                        msg: format!("loss is {lv}"),
                    });
                }
                loss_sum += lv;
                let probe = s.value(fwd.probe);
                probes.push(probe.data()[cfg.probe_neuron.min(probe.numel() - 1)]);
                let g = s.tape.backward(loss)?;
                for (acc, g) in total.iter_mut().zip(s.param_grads(&g, &params)) {
                    acc.add_assign(&g)?;
                }
            }
            let inv = 1.0 / batch as f64;
            let grads: Vec<Tensor> = total.into_iter().map(|t| t.scale(inv)).collect();
            (loss_sum * inv, grads, probes)
        };

        let lr = lr_at(iter, cfg);
        {
            let mut params = model.params_mut();
            adam_step(
                &mut params,
                &grads,
                &mut adam,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
            .map_err(|e| Error::Diverged {
                iter,
                msg: e.to_string(),
            })?;
        }

        let log = IterLog { iter, loss, lr };
        callback(TrainEvent::Iteration(&log));
        history.losses.push(log);
        if iter % cfg.log_interval == 0 {
            history
                .percentiles
                .push(PercentileLog::from_values(iter, &probes)?);
        }
        if (iter + 1) % iters_per_epoch == 0 {
            let epoch = (iter + 1) / iters_per_epoch;
            let acc = accuracy(model, eval)?;
            callback(TrainEvent::Epoch {
                epoch,
                accuracy: acc,
            });
            history.accuracy.push((epoch, acc));
        }
    }
    history.final_accuracy = match history.accuracy.last() {
        Some(&(epoch, acc)) if epoch * iters_per_epoch == cfg.max_iters => acc,
        _ => accuracy(model, eval)?,
    };
    Ok(history)
}
