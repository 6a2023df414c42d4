//! `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mfb_core::bench::{BenchDims, Operator};
use mfb_core::fusion::NormConfig;
use mfb_core::gradcheck::GradCheckConfig;
use mfb_core::model::{Arch, FusionKind, ModelConfig};
use mfb_core::training::{SyntheticSpec, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    None,
    Norms,
    Fusions,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Sweep::None),
            "norms" => Ok(Sweep::Norms),
            "fusions" => Ok(Sweep::Fusions),
            other => Err(format!("unknown sweep {other:?} (none | norms | fusions)")),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::None => "none",
            Sweep::Norms => "norms",
            Sweep::Fusions => "fusions",
        })
    }
}

/// Bench grid written as `op:m:n:...` entries separated by `;`. MFB takes
/// `m:n:k:o`, MLB `m:n:o` and MCB `m:n:d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchGrid(pub Vec<BenchDims>);

impl FromStr for BenchGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for entry in s.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            let mut parts = entry.split(':');
            let op: Operator = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e: mfb_core::Error| e.to_string())?;
            let nums = parts
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|e| format!("{entry:?}: {e}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let dims = match (op, nums.as_slice()) {
                (Operator::Mfb, &[m, n, k, o]) => BenchDims::mfb(m, n, k, o),
                (Operator::Mlb, &[m, n, o]) => BenchDims::mlb(m, n, o),
                (Operator::Mcb, &[m, n, d]) => BenchDims::mcb(m, n, d),
                _ => return Err(format!("bad bench grid entry {entry:?}")),
            };
            out.push(dims);
        }
        Ok(BenchGrid(out))
    }
}

impl fmt::Display for BenchGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let entries: Vec<String> = self
            .0
            .iter()
            .map(|d| match d.operator {
                Operator::Mfb => format!("mfb:{}:{}:{}:{}", d.m, d.n, d.k, d.o),
                Operator::Mlb => format!("mlb:{}:{}:{}", d.m, d.n, d.o),
                Operator::Mcb => format!("mcb:{}:{}:{}", d.m, d.n, d.d),
            })
            .collect();
        f.write_str(&entries.join(";"))
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of a run. Each field is one config key of the same
        /// name.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            CliError::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    })*
                    other => return Err(CliError::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Canonical text: every key, in declaration order.
            pub fn emit(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0;
    /// `baseline` or `coatt`.
    arch: Arch = Arch::CoAttention;
    /// `mfb`, `mlb`, `mcb` or `concat`.
    fusion: FusionKind = FusionKind::Mfb;
    /// `none`, `norms` (four normalization ablations) or `fusions` (MFB,
    /// MLB, MCB).
    sweep: Sweep = Sweep::None;
    power_norm: bool = true;
    l2_norm: bool = true;
    k: usize = 5;
    o: usize = 32;
    mcb_d: usize = 160;
    glimpses: usize = 2;
    embed: usize = 32;
    hidden: usize = 32;
    att_hidden: usize = 32;
    mcb_seed: u64 = 0;
    grid: usize = 16;
    seq_len: usize = 8;
    feat_dim: usize = 16;
    colors: usize = 8;
    answers: usize = 8;
    annotator_noise: f64 = 0.1;
    feature_noise: f64 = 0.1;
    train_samples: usize = 2000;
    eval_samples: usize = 500;
    iters: usize = 400;
    batch: usize = 32;
    lr: f64 = 0.003;
    decay_interval: usize = 100_000;
    decay_rate: f64 = 0.5;
    beta1: f64 = 0.9;
    beta2: f64 = 0.99;
    adam_eps: f64 = 1e-8;
    dropout_lstm: f64 = 0.3;
    dropout_fusion: f64 = 0.1;
    log_interval: usize = 10;
    probe_neuron: usize = 0;
    /// Trailing fraction of the percentile log summarized after training.
    percentile_window: f64 = 0.5;
    step: f64 = 1e-3;
    tol: f64 = 1e-4;
    kink_zone: f64 = 1e-3;
    root_resolution: f64 = 1e-2;
    instances: usize = 100;
    equivalence_tol: f64 = 1e-10;
    /// Instance whose weights get corrupted; only used when
    /// `fault_delta` is non-zero.
    fault_seed: u64 = 0;
    fault_delta: f64 = 0.0;
    bench_grid: BenchGrid = BenchGrid(mfb_core::bench::default_grid());
    /// When false the bench reports counts only.
    bench_timing: bool = true;
    bench_batch: usize = 16;
    bench_repetitions: usize = 20;
    bench_warmup: usize = 5;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn norms(&self) -> NormConfig {
        NormConfig {
            power: self.power_norm,
            l2: self.l2_norm,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            grid: self.grid,
            seq_len: self.seq_len,
            feat_dim: self.feat_dim,
            colors: self.colors,
            answers: self.answers,
            annotator_noise: self.annotator_noise,
            feature_noise: self.feature_noise,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            fusion: self.fusion,
            k: self.k,
            o: self.o,
            mcb_d: self.mcb_d,
            vocab: self.synthetic_spec().vocab_size(),
            embed: self.embed,
            hidden: self.hidden,
            grid_dim: self.feat_dim,
            answers: self.answers,
            glimpses: self.glimpses,
            att_hidden: self.att_hidden,
            norms: self.norms(),
            dropout_lstm: self.dropout_lstm,
            dropout_fusion: self.dropout_fusion,
            mcb_seed: self.mcb_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            decay_interval: self.decay_interval,
            decay_rate: self.decay_rate,
            max_iters: self.iters,
            batch_size: self.batch,
            seed: self.seed,
            dropout_lstm: self.dropout_lstm,
            dropout_mfb: self.dropout_fusion,
            log_interval: self.log_interval,
            probe_neuron: self.probe_neuron,
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            step: self.step,
            tol: self.tol,
            kink_zone: self.kink_zone,
            root_resolution: self.root_resolution,
        }
    }
}
