use mfb_core::gradcheck::GradCheckConfig;
use mfb_core::model::{Arch, AttentionMode, CoAttModel, FusionKind, ModelConfig};
use mfb_core::session::Session;
use mfb_core::suite::{gradcheck_model_config, gradient_suite, network_check};
use mfb_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_registered_operator_passes() {
    let cfg = GradCheckConfig::default();
    let checks = gradient_suite(&cfg, 0).unwrap();
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:22} max_rel_err={:.3e} checked={} excluded={}",
            c.name, c.report.max_rel_err, c.report.checked, c.report.excluded
        );
        if !c.report.pass {
            failed.push((c.name, c.report.worst.clone()));
        }
    }
    assert!(failed.is_empty(), "failing ops: {failed:?}");
    for name in [
        "mfb",
        "mlb",
        "mcb",
        "concat",
        "mfb_module",
        "lstm",
        "baseline_network",
        "coatt_network",
    ] {
        assert!(
            checks.iter().any(|c| c.name == name),
            "{name} not registered"
        );
    }
}

#[test]
fn co_attention_passes_for_every_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let target = Tensor::vector(vec![0.5, 0.25, 0.25]).unwrap();
    let cfg = GradCheckConfig {
        step: 3e-4,
        ..GradCheckConfig::default()
    };
    for fusion in [FusionKind::Mlb, FusionKind::Mcb, FusionKind::Concat] {
        let model =
            CoAttModel::new(gradcheck_model_config(Arch::CoAttention, fusion), &mut rng).unwrap();
        let r = network_check(&model, &grid, &[2, 4, 1], &target, &cfg).unwrap();
        assert!(r.pass, "{fusion}: {:?}", r.worst);
        assert!(
            r.checked > 40,
            "{fusion}: only {} coordinates checked",
            r.checked
        );
    }
}

#[test]
fn zero_tolerance_fails() {
    let cfg = GradCheckConfig {
        tol: 0.0,
        ..GradCheckConfig::default()
    };
    let checks = gradient_suite(&cfg, 0).unwrap();
    assert!(checks.iter().any(|c| !c.report.pass));
}

#[test]
fn single_glimpse_bypass_reduces_to_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = ModelConfig {
        glimpses: 1,
        ..gradcheck_model_config(Arch::CoAttention, FusionKind::Mfb)
    };
    let coatt = CoAttModel::new(cfg.clone(), &mut rng).unwrap();
    let mut base = CoAttModel::new(
        ModelConfig {
            arch: Arch::Baseline,
            ..cfg
        },
        &mut rng,
    )
    .unwrap();
    base.encoder = coatt.encoder.clone();
    base.fuse_final = coatt.fuse_final.clone();
    base.classifier_w = coatt.classifier_w.clone();
    base.classifier_b = coatt.classifier_b.clone();

    let image = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
    let tokens = [4, 2, 0];
    let mut s = Session::eval();
    let a = coatt
        .forward_coatt(&mut s, &image, &tokens, AttentionMode::Bypass)
        .unwrap();
    let a = s.value(a.logits).clone();
    let mut s = Session::eval();
    let b = base
        .forward_baseline(&mut s, &image.reshape(&[3]).unwrap(), &tokens)
        .unwrap();
    let b = s.value(b.logits).clone();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}
