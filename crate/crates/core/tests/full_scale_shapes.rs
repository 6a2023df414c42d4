use mfb_core::fusion::{Fusion, MfbParams, MlbParams};
use mfb_core::model::{Arch, ModelConfig};
use mfb_core::Tensor;

#[test]
fn full_scale_fusion_shapes() {
    let u = Tensor::zeros(&[2048, 5000]);
    let v = Tensor::zeros(&[2048, 5000]);
    let mfb = Fusion::Mfb(MfbParams::new(u, v, 5, 0.1).unwrap());
    assert_eq!(mfb.intermediate_dim(), 5000);
    assert_eq!(mfb.out_dim(), 1000);

    let mlb = Fusion::Mlb(
        MlbParams::new(
            Tensor::zeros(&[2048, 1000]),
            Tensor::zeros(&[2048, 1000]),
            0.1,
        )
        .unwrap(),
    );
    assert_eq!(mlb.out_dim(), 1000);
}

#[test]
fn full_scale_configs_validate() {
    for arch in [Arch::Baseline, Arch::CoAttention] {
        let cfg = ModelConfig::full_scale(arch, 20000);
        cfg.validate().unwrap();
        assert_eq!(cfg.answers, 3000);
        assert_eq!((cfg.k, cfg.o, cfg.mcb_d), (5, 1000, 16000));
        assert_eq!((cfg.hidden, cfg.grid_dim), (1024, 2048));
    }
}

#[test]
fn mfb_accepts_a_full_feature_grid() {
    let p = MfbParams::new(
        Tensor::full(&[6, 10], 0.1),
        Tensor::full(&[4, 10], 0.2),
        5,
        0.0,
    )
    .unwrap();
    let grid = Tensor::full(&[196, 6], 1.0);
    let q = Tensor::full(&[1, 4], 1.0);
    let z = mfb_core::fusion::mfb(&grid, &q, &p).unwrap();
    assert_eq!(z.shape(), &[196, 2]);
}
