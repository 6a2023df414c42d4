use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mfb_cli::{cmd_gradcheck, cmd_train, RunConfig, Sweep};
use mfb_core::bench::{build_fusion, param_report, BenchDims, Operator};
use mfb_core::model::FusionKind;
use mfb_core::suite::{factorization_instance, sketch_unbiasedness, specialization_instance};

const MFB_MIN_ACCURACY: f64 = 0.90;
const CONTROL_MAX_ACCURACY: f64 = 0.70;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn pilot() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("pilot.conf")).expect("pilot.conf")
}

fn a1() -> Verdict {
    let worst = (0..100u64)
        .map(|s| factorization_instance(s, None).unwrap())
        .fold(0.0, f64::max);
    verdict(
        worst < 1e-10,
        format!("100 instances, max |mfb - bilinear| = {worst:.2e}"),
    )
}

fn a2() -> Verdict {
    let same = (0..100u64)
        .filter(|&s| specialization_instance(s).unwrap())
        .count();
    verdict(same == 100, format!("{same}/100 instances bitwise equal"))
}

fn a3(out: &Path) -> Verdict {
    let o = cmd_gradcheck(&RunConfig::default(), out).unwrap();
    let rows = fs::read_to_string(out.join("gradcheck.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    let mut detail = format!("{rows} ops at tol 1e-4");
    if !o.pass {
        detail = format!("{detail}; {}", o.messages.join("; "));
    }
    verdict(o.pass, detail)
}

fn a4() -> Verdict {
    let est = sketch_unbiasedness(10, 64, 32, 2000, 0).unwrap();
    let worst = est.iter().map(|e| e.rel_err()).fold(0.0, f64::max);
    verdict(
        worst < 0.02,
        format!(
            "10 pairs, 2000 draws, worst relative error {:.3}%",
            100.0 * worst
        ),
    )
}

fn a5(out: &Path) -> Verdict {
    let mut mfb = Vec::new();
    let mut control = Vec::new();
    for seed in SEEDS {
        for (fusion, acc) in [
            (FusionKind::Mfb, &mut mfb),
            (FusionKind::Concat, &mut control),
        ] {
            let cfg = RunConfig {
                seed,
                fusion,
                ..pilot()
            };
            let r = cmd_train(&cfg, &out.join(format!("{fusion}_{seed}"))).unwrap();
            acc.push(r.runs[0].final_accuracy);
        }
    }
    let pass = mfb.iter().all(|&a| a >= MFB_MIN_ACCURACY)
        && control.iter().all(|&a| a <= CONTROL_MAX_ACCURACY);
    verdict(pass, format!("MFB+CoAtt {mfb:.3?} (>= {MFB_MIN_ACCURACY}), concat control {control:.3?} (<= {CONTROL_MAX_ACCURACY})"))
}

fn a6(out: &Path) -> Verdict {
    let spread = |l2: bool| {
        let cfg = RunConfig {
            seed: 1,
            l2_norm: l2,
            ..pilot()
        };
        let r = cmd_train(&cfg, &out.join(format!("l2_{l2}"))).unwrap();
        r.runs[0].percentiles.mean_spread
    };
    let (full, no_l2) = (spread(true), spread(false));
    verdict(
        full <= no_l2,
        format!("mean p85-p15 spread: power+l2 {full:.4}, no l2 {no_l2:.4}"),
    )
}

fn a7(out: &Path) -> Verdict {
    let tiny = RunConfig::parse(
        "grid = 4\nseq_len = 4\nhidden = 6\nembed = 6\natt_hidden = 6\no = 6\nk = 2\nmcb_d = 12\n\
         train_samples = 16\neval_samples = 4\niters = 2\nbatch = 4\nlog_interval = 1",
    )
    .unwrap();
    let labels = |sweep| {
        let r = cmd_train(
            &RunConfig {
                sweep,
                ..tiny.clone()
            },
            &out.join(sweep.to_string()),
        )
        .unwrap();
        let all_written = r
            .runs
            .iter()
            .all(|run| run.dir.join("metrics.csv").exists());
        (
            r.runs.into_iter().map(|run| run.label).collect::<Vec<_>>(),
            all_written,
        )
    };
    let (norms, w1) = labels(Sweep::Norms);
    let (fusions, w2) = labels(Sweep::Fusions);
    let pass = w1
        && w2
        && norms
            == [
                "MFB",
                "w/o power norm.",
                "w/o ℓ2 norm.",
                "w/o power and ℓ2 norms.",
            ]
        && fusions == ["MFB", "MLB", "MCB"];
    verdict(pass, format!("{norms:?} / {fusions:?}"))
}

fn a8() -> Verdict {
    let mut grid = vec![
        BenchDims::mfb(2048, 2048, 5, 1000),
        BenchDims::mlb(2048, 2048, 1000),
        BenchDims::mcb(2048, 2048, 16000),
    ];
    for k in 1..=3 {
        grid.push(BenchDims::mfb(7, 3, k, 4));
        grid.push(BenchDims::mlb(7, 3, k));
    }
    let report = param_report(&grid);
    let counted = grid.iter().zip(&report).all(|(d, r)| {
        let f = build_fusion(*d, 0).unwrap();
        f.named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .sum::<usize>()
            == r.projection_param_count
    });
    let closed = report.iter().all(|r| match r.operator {
        Operator::Mfb => r.projection_param_count == (r.m + r.n) * r.k * r.o,
        Operator::Mlb => r.projection_param_count == (r.m + r.n) * r.o,
        Operator::Mcb => r.projection_param_count == 0,
    });
    let (mfb, mcb) = (&report[0], &report[2]);
    let pass = counted
        && closed
        && mfb.intermediate_dim == 5000
        && mfb.intermediate_dim < mcb.intermediate_dim;
    verdict(
        pass,
        format!(
            "MFB params {} inter {}, MLB params {}, MCB inter {}",
            mfb.projection_param_count,
            mfb.intermediate_dim,
            report[1].projection_param_count,
            mcb.intermediate_dim
        ),
    )
}

fn a9(out: &Path) -> Verdict {
    let cfg = RunConfig {
        iters: 30,
        train_samples: 200,
        eval_samples: 50,
        hidden: 12,
        seed: 5,
        ..pilot()
    };
    cmd_train(&cfg, &out.join("first")).unwrap();
    cmd_train(&cfg, &out.join("second")).unwrap();
    let files = [
        "model.bin",
        "metrics.csv",
        "accuracy.csv",
        "percentiles.csv",
    ];
    let same: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            fs::read(out.join("first").join(f)).unwrap()
                == fs::read(out.join("second").join(f)).unwrap()
        })
        .collect();
    verdict(
        same.len() == files.len(),
        format!("identical across runs: {same:?}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    type Check<'a> = (&'static str, Duration, Box<dyn Fn() -> Verdict + 'a>);
    let checks: Vec<Check> = vec![
        (
            "A1 factorization equivalence",
            Duration::from_secs(5),
            Box::new(a1),
        ),
        (
            "A2 MLB specialization",
            Duration::from_secs(5),
            Box::new(a2),
        ),
        (
            "A3 gradient suite",
            Duration::from_secs(120),
            Box::new(|| a3(&root.join("a3"))),
        ),
        (
            "A4 sketch unbiasedness",
            Duration::from_secs(30),
            Box::new(a4),
        ),
        (
            "A5 synthetic-task separation",
            Duration::from_secs(600),
            Box::new(|| a5(&root.join("a5"))),
        ),
        (
            "A6 normalization stability",
            Duration::from_secs(600),
            Box::new(|| a6(&root.join("a6"))),
        ),
        (
            "A7 ablation harness",
            Duration::from_secs(600),
            Box::new(|| a7(&root.join("a7"))),
        ),
        (
            "A8 capacity structure",
            Duration::from_secs(600),
            Box::new(a8),
        ),
        (
            "A9 determinism",
            Duration::from_secs(600),
            Box::new(|| a9(&root.join("a9"))),
        ),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= budget;
        failed += usize::from(!pass);
        println!(
            "{} {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
