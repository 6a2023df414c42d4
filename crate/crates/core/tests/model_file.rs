use mfb_core::io::{load_model, read_tensors, save_model, write_tensors};
use mfb_core::model::{coatt_forward, Arch, CoAttModel, FusionKind, ModelConfig};
use mfb_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tensors_round_trip_bit_exact() {
    let specials = Tensor::vector(vec![
        0.0,
        -0.0,
        f64::MIN_POSITIVE,
        1e308,
        -1.0 / 3.0,
        f64::NAN,
    ])
    .unwrap();
    let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &[("s".into(), &specials), ("layer.m".into(), &m)]).unwrap();
    let back = read_tensors(&mut buf.as_slice()).unwrap();
    assert_eq!(back[0].0, "s");
    assert_eq!(back[1].0, "layer.m");
    assert_eq!(back[1].1.shape(), &[2, 3]);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back[0].1), bits(&specials));
    assert_eq!(bits(&back[1].1), bits(&m));
}

#[test]
fn model_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    for fusion in [
        FusionKind::Mfb,
        FusionKind::Mlb,
        FusionKind::Mcb,
        FusionKind::Concat,
    ] {
        let cfg = ModelConfig {
            fusion,
            hidden: 8,
            embed: 6,
            o: 6,
            k: 2,
            mcb_d: 12,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CoAttModel::new(cfg.clone(), &mut rng).unwrap();
        let path = dir.path().join(format!("{fusion}.bin"));
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path, cfg).unwrap();
        assert_eq!(loaded, model);
        let grid = Tensor::uniform(&[4, 16], -1.0, 1.0, &mut rng);
        let a = coatt_forward(&grid, &[3, 9, 0], &model, 0, false).unwrap();
        let b = coatt_forward(&grid, &[3, 9, 0], &loaded, 0, false).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn loading_into_wrong_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        hidden: 8,
        embed: 6,
        ..ModelConfig::default()
    };
    let model = CoAttModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let path = dir.path().join("m.bin");
    save_model(&path, &model).unwrap();
    assert!(load_model(
        &path,
        ModelConfig {
            arch: Arch::Baseline,
            ..cfg.clone()
        }
    )
    .is_err());
    assert!(load_model(&path, ModelConfig { hidden: 9, ..cfg }).is_err());
}
