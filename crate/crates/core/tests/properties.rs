use approx::assert_relative_eq;
use mfb_core::attention::{question_attention_eval, AttentionHead};
use mfb_core::fusion::{self, MfbParams};
use mfb_core::sketch::{circular_convolution, count_sketch, SketchMap};
use mfb_core::suite::sketch_unbiasedness;
use mfb_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mfb_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MfbParams::random(5, 4, 3, 2, 0.0, &mut rng).unwrap();
        let (x1, x2) = (rand_t(&[5], &mut rng), rand_t(&[5], &mut rng));
        let y = rand_t(&[4], &mut rng);
        let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = fusion::mfb(&mixed, &y, &p).unwrap();
        let rhs = fusion::mfb(&x1, &y, &p).unwrap().scale(a)
            .add(&fusion::mfb(&x2, &y, &p).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        let swapped = fusion::mfb(&x1, &y.scale(a), &p).unwrap();
        let scaled = fusion::mfb(&x1, &y, &p).unwrap().scale(a);
        prop_assert!(swapped.max_abs_diff(&scaled).unwrap() < 1e-10);
    }

    #[test]
    fn l2_normalize_is_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_t(&[3, 7], &mut rng);
        let once = fusion::l2_normalize(&z);
        let twice = fusion::l2_normalize(&once);
        prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-12);
        for r in 0..3 {
            let n: f64 = once.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_normalize_keeps_sign_and_squares_back(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_t(&[9], &mut rng);
        let p = fusion::power_normalize(&z);
        for (a, b) in z.data().iter().zip(p.data()) {
            prop_assert_eq!(a.signum(), b.signum());
            prop_assert!((b * b.abs() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn question_attention_is_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = AttentionHead::random(3, 4, 2, &mut rng).unwrap();
        let words = rand_t(&[5, 3], &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let permuted = Tensor::from_rows(
            &perm.iter().map(|&i| words.row(i).to_vec()).collect::<Vec<_>>(),
        ).unwrap();
        let a = question_attention_eval(&words, &head).unwrap();
        let b = question_attention_eval(&permuted, &head).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn attended_feature_lies_in_convex_hull(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = AttentionHead::random(3, 4, 2, &mut rng).unwrap();
        let words = rand_t(&[6, 3], &mut rng);
        let f = question_attention_eval(&words, &head).unwrap();
        for (i, &v) in f.data().iter().enumerate() {
            let c = i % 3;
            let col = (0..6).map(|r| words.at(r, c));
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn count_sketch_is_linear(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = SketchMap::random(10, 4, &mut rng);
        let (x, y) = (rand_t(&[10], &mut rng), rand_t(&[10], &mut rng));
        let lhs = count_sketch(&x.scale(a).add(&y).unwrap(), &map).unwrap();
        let rhs = count_sketch(&x, &map).unwrap().scale(a).add(&count_sketch(&y, &map).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn circular_convolution_commutes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rand_t(&[2, 9], &mut rng), rand_t(&[2, 9], &mut rng));
        let ab = circular_convolution(&a, &b).unwrap();
        let ba = circular_convolution(&b, &a).unwrap();
        prop_assert!(ab.max_abs_diff(&ba).unwrap() < 1e-12);
    }
}

#[test]
fn sketch_inner_product_is_unbiased() {
    let estimates = sketch_unbiasedness(10, 64, 32, 2000, 11).unwrap();
    for e in &estimates {
        assert!(e.rel_err() < 0.02, "{e:?}");
    }
}

#[test]
fn sum_pool_of_ones_counts_window() {
    let v = Tensor::full(&[2, 12], 1.0);
    let p = fusion::sum_pool(&v, 4).unwrap();
    for &x in p.data() {
        assert_relative_eq!(x, 4.0);
    }
}
