//! Command implementations behind the `mfb` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mfb_core::bench::{self, Timing};
use mfb_core::io::save_model;
use mfb_core::model::{CoAttModel, FusionKind};
use mfb_core::suite::{self, Fault};
use mfb_core::training::{
    make_synthetic_dataset, percentile_summary, train_loop, History, PercentileSummary,
};

pub use config::{RunConfig, Sweep};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{0}")]
    Core(mfb_core::Error),
}

impl From<mfb_core::Error> for CliError {
    fn from(e: mfb_core::Error) -> Self {
        match e {
            mfb_core::Error::Config(msg) => CliError::Config(msg),
            mfb_core::Error::Numeric(msg) => CliError::Numeric(msg),
            mfb_core::Error::Diverged { iter, msg } => {
                CliError::Numeric(format!("training diverged at iteration {iter}: {msg}"))
            }
            other => CliError::Core(other),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

/// Result of a suite command: whether everything passed and the lines worth
/// showing the user.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub messages: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            EXIT_OK
        } else {
            EXIT_FAILURE
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    ensure_dir(out)?;
    let gc = cfg.gradcheck_config();
    if !(gc.step > 0.0) || !(gc.tol >= 0.0) {
        return Err(CliError::Config(
            "gradcheck needs step > 0 and tol >= 0".into(),
        ));
    }
    let checks = suite::gradient_suite(&gc, cfg.seed)?;
    let rows: Vec<(&str, f64, bool)> = checks
        .iter()
        .map(|c| (c.name, c.report.max_rel_err, c.report.pass))
        .collect();
    write_rows(
        &out.join("gradcheck.csv"),
        &["op", "max_rel_err", "pass"],
        &rows,
    )?;
    let messages = checks
        .iter()
        .filter(|c| !c.report.pass)
        .map(|c| match &c.report.worst {
            Some(w) => format!(
                "FAIL {}: max_rel_err {:.3e} at param {} coordinate {} (analytic {:e}, numeric {:e})",
                c.name, c.report.max_rel_err, w.param, w.coord, w.analytic, w.numeric
            ),
            None => format!("FAIL {}: no coordinate could be checked", c.name),
        })
        .collect::<Vec<_>>();
    Ok(Outcome {
        pass: messages.is_empty(),
        messages,
    })
}

pub fn cmd_equivalence(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    ensure_dir(out)?;
    let fault = (cfg.fault_delta != 0.0).then_some(Fault {
        seed: cfg.fault_seed,
        delta: cfg.fault_delta,
    });
    let r = suite::equivalence_suite(cfg.instances, cfg.seed, cfg.equivalence_tol, fault)?;
    let rows: Vec<(&str, u64, &str)> = r
        .failures
        .iter()
        .map(|f| (f.suite, f.seed, f.detail.as_str()))
        .collect();
    write_rows(
        &out.join("equivalence_failures.csv"),
        &["suite", "seed", "detail"],
        &rows,
    )?;
    let mut messages = vec![format!(
        "{} instances, max factorization diff {:e}",
        r.instances, r.max_factorization_diff
    )];
    messages.extend(r.failures.iter().map(|f| {
        format!(
            "FAIL {} at instance seed {} ({}); rerun with seed = {} and instances = 1",
            f.suite, f.seed, f.detail, f.seed
        )
    }));
    Ok(Outcome {
        pass: r.pass(),
        messages,
    })
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub dir: PathBuf,
    pub final_accuracy: f64,
    pub percentiles: PercentileSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub runs: Vec<RunSummary>,
}

/// Labels and configurations of the runs a config asks for.
pub fn planned_runs(cfg: &RunConfig) -> Vec<(String, String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        c.sweep = Sweep::None;
        f(&mut c);
        c
    };
    match cfg.sweep {
        Sweep::None => vec![(
            cfg.fusion.to_string().to_uppercase(),
            ".".into(),
            with(&|_| {}),
        )],
        Sweep::Norms => vec![
            (
                "MFB".into(),
                "mfb".into(),
                with(&|c| {
                    c.fusion = FusionKind::Mfb;
                    c.power_norm = true;
                    c.l2_norm = true;
                }),
            ),
            (
                "w/o power norm.".into(),
                "no_power".into(),
                with(&|c| {
                    c.fusion = FusionKind::Mfb;
                    c.power_norm = false;
                    c.l2_norm = true;
                }),
            ),
            (
                "w/o ℓ2 norm.".into(),
                "no_l2".into(),
                with(&|c| {
                    c.fusion = FusionKind::Mfb;
                    c.power_norm = true;
                    c.l2_norm = false;
                }),
            ),
            (
                "w/o power and ℓ2 norms.".into(),
                "no_norms".into(),
                with(&|c| {
                    c.fusion = FusionKind::Mfb;
                    c.power_norm = false;
                    c.l2_norm = false;
                }),
            ),
        ],
        Sweep::Fusions => [FusionKind::Mfb, FusionKind::Mlb, FusionKind::Mcb]
            .into_iter()
            .map(|f| {
                (
                    f.to_string().to_uppercase(),
                    f.to_string(),
                    with(&|c| c.fusion = f),
                )
            })
            .collect(),
    }
}

fn train_one(cfg: &RunConfig, dir: &Path) -> Result<(History, PercentileSummary), CliError> {
    ensure_dir(dir)?;
    let spec = cfg.synthetic_spec();
    if cfg.train_samples == 0 || cfg.eval_samples == 0 {
        return Err(CliError::Config(
            "train_samples and eval_samples must be positive".into(),
        ));
    }
    let ds = make_synthetic_dataset(&spec, cfg.train_samples + cfg.eval_samples, cfg.seed)?;
    let (train, eval) = ds.samples.split_at(cfg.train_samples);
    let mut model = CoAttModel::new(cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let history = train_loop(&mut model, train, eval, &cfg.train_config(), &mut |_| {})?;

    let metrics: Vec<_> = history
        .losses
        .iter()
        .map(|l| (l.iter, l.loss, l.lr))
        .collect();
    write_rows(&dir.join("metrics.csv"), &["iter", "loss", "lr"], &metrics)?;
    write_rows(
        &dir.join("accuracy.csv"),
        &["epoch", "accuracy"],
        &history.accuracy,
    )?;
    let pct: Vec<_> = history
        .percentiles
        .iter()
        .map(|p| (p.iter, p.p15, p.p50, p.p85))
        .collect();
    write_rows(
        &dir.join("percentiles.csv"),
        &["iter", "p15", "p50", "p85"],
        &pct,
    )?;
    let model_path = dir.join("model.bin");
    save_model(&model_path, &model).map_err(|e| io_err(&model_path, e))?;
    let conf_path = dir.join("config.txt");
    fs::write(&conf_path, cfg.emit()).map_err(|e| io_err(&conf_path, e))?;
    let summary = percentile_summary(&history.percentiles, cfg.percentile_window)?;
    Ok((history, summary))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport, CliError> {
    ensure_dir(out)?;
    let mut runs = Vec::new();
    for (label, sub, run_cfg) in planned_runs(cfg) {
        let dir = out.join(&sub);
        let (history, summary) = train_one(&run_cfg, &dir)?;
        runs.push(RunSummary {
            label,
            dir,
            final_accuracy: history.final_accuracy,
            percentiles: summary,
        });
    }
    let rows: Vec<_> = runs
        .iter()
        .map(|r| {
            (
                r.label.as_str(),
                r.dir
                    .strip_prefix(out)
                    .unwrap_or(&r.dir)
                    .display()
                    .to_string(),
                r.final_accuracy,
                r.percentiles.p50_range,
                r.percentiles.mean_spread,
                r.percentiles.max_p50_drift,
            )
        })
        .collect();
    write_rows(
        &out.join("runs.csv"),
        &[
            "label",
            "dir",
            "final_accuracy",
            "p50_range",
            "mean_spread",
            "max_p50_drift",
        ],
        &rows,
    )?;
    Ok(TrainReport { runs })
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<bench::BenchResult>, CliError> {
    ensure_dir(out)?;
    let grid = &cfg.bench_grid.0;
    if grid.is_empty() {
        return Err(CliError::Config("bench grid is empty".into()));
    }
    for d in grid {
        d.validate()?;
    }
    let rows = if cfg.bench_timing {
        let t = Timing {
            batch: cfg.bench_batch,
            repetitions: cfg.bench_repetitions,
            warmup: cfg.bench_warmup,
            seed: cfg.seed,
        };
        grid.iter()
            .map(|&d| bench::throughput(d, &t))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        bench::param_report(grid)
    };
    let path = out.join("bench.csv");
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    bench::write_csv(&mut w, &rows)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_plan_expected_labels() {
        let mut cfg = RunConfig::default();
        let labels = |c: &RunConfig| planned_runs(c).into_iter().map(|r| r.0).collect::<Vec<_>>();
        assert_eq!(labels(&cfg), ["MFB"]);
        cfg.sweep = Sweep::Norms;
        assert_eq!(
            labels(&cfg),
            [
                "MFB",
                "w/o power norm.",
                "w/o ℓ2 norm.",
                "w/o power and ℓ2 norms."
            ]
        );
        cfg.sweep = Sweep::Fusions;
        assert_eq!(labels(&cfg), ["MFB", "MLB", "MCB"]);
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(
            CliError::from(mfb_core::Error::Config("x".into())).exit_code(),
            EXIT_CONFIG
        );
        let div = mfb_core::Error::Diverged {
            iter: 7,
            msg: "nan".into(),
        };
        let e = CliError::from(div);
        assert_eq!(e.exit_code(), EXIT_NUMERIC);
        assert!(e.to_string().contains("iteration 7"));
    }
}
