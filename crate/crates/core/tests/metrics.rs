use ndarray::{Array2, Array3};
use proptest::prelude::*;
use scalessl_core::config::{DecoderStyle, EncoderArch};
use scalessl_core::evalkit::{
    build_stitch_plan, dice_score, hausdorff, stitch_predict, threshold_probs, EvalError, PatchModel,
};
use scalessl_core::nets::{DecoderSpec, Encoder, EncoderSpec, SegmentationModel};
use scalessl_core::RngStream;
use scalessl_oracles as oracle;

fn random_mask(rng: &mut RngStream, shape: (usize, usize), p: f64) -> Array2<bool> {
    Array2::from_shape_fn(shape, |_| rng.bernoulli(p))
}

#[test]
fn dice_and_hausdorff_match_brute_force() {
    let mut rng = RngStream::new(21, "metric-oracle");
    for i in 0..100 {
        let p = [0.002, 0.02, 0.1, 0.4][i % 4];
        let a = random_mask(&mut rng, (32, 32), p);
        let b = random_mask(&mut rng, (32, 32), p);
        assert_eq!(dice_score(&a, &b).unwrap(), oracle::dice(&a, &b));
        let hd = hausdorff(&a, &b, 200.0).unwrap();
        assert!((hd - oracle::hausdorff(&a, &b, 200.0)).abs() < 1e-9);
    }
}

#[test]
fn large_masks_use_the_same_distance() {
    let mut rng = RngStream::new(22, "metric-large");
    for _ in 0..5 {
        let a = random_mask(&mut rng, (96, 96), 0.05);
        let b = random_mask(&mut rng, (96, 96), 0.05);
        assert!((hausdorff(&a, &b, 200.0).unwrap() - oracle::hausdorff(&a, &b, 200.0)).abs() < 1e-9);
    }
}

#[test]
fn hausdorff_triangle_inequality() {
    let mut rng = RngStream::new(23, "triangle");
    for _ in 0..100 {
        let m: Vec<Array2<bool>> = (0..3)
            .map(|_| {
                let mut x = random_mask(&mut rng, (16, 16), 0.1);
                x[[rng.index(16), rng.index(16)]] = true;
                x
            })
            .collect();
        let d = |i: usize, j: usize| hausdorff(&m[i], &m[j], 200.0).unwrap();
        assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-9);
    }
}

fn model(patch: usize, classes: usize, seed: u64) -> SegmentationModel {
    let mut rng = RngStream::new(seed, "stitch-model");
    let enc = Encoder::new(
        EncoderSpec::new(EncoderArch::ToyCnn, (patch, patch), 16, vec![1, 2, 2]).unwrap(),
        &mut rng,
    )
    .unwrap();
    let style = if classes > 1 {
        DecoderStyle::DeeplabAspp
    } else {
        DecoderStyle::PlainUpsample
    };
    SegmentationModel::new(enc, DecoderSpec::new(style, classes, (patch, patch)).unwrap(), &mut rng).unwrap()
}

#[test]
fn stitching_matches_overlap_average_oracle() {
    let mut rng = RngStream::new(24, "stitch-oracle");
    for trial in 0..20 {
        let patch = 8 + 4 * rng.index(4);
        let (ih, iw) = (patch + rng.index(30), patch + rng.index(30));
        let s = 1 + rng.index(patch - 1);
        let classes = if trial % 4 == 3 { 3 } else { 1 };
        let m = model(patch, classes, trial);
        let image = Array2::from_shape_fn((ih, iw), |_| rng.normal() as f32);
        let plan = build_stitch_plan((ih, iw), patch, patch, s).unwrap();
        let got = stitch_predict(&image, &m, &plan).unwrap();
        let want: Array3<f64> = oracle::stitch(&image, patch, patch, s, classes, |p| {
            m.predict_patches(std::slice::from_ref(p)).remove(0)
        });
        let diff = got
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "trial {trial}: {diff}");
    }
}

#[test]
fn stride_not_below_window_is_rejected() {
    for (h, s) in [(8, 8), (12, 16)] {
        assert!(matches!(
            build_stitch_plan((40, 40), h, h, s),
            Err(EvalError::Stride { .. })
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_symmetry_and_range(bits in proptest::collection::vec(any::<(bool, bool)>(), 64)) {
        let a = Array2::from_shape_fn((8, 8), |(r, c)| bits[r * 8 + c].0);
        let b = Array2::from_shape_fn((8, 8), |(r, c)| bits[r * 8 + c].1);
        let d = dice_score(&a, &b).unwrap();
        prop_assert_eq!(d, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        if a.iter().any(|&v| v) {
            prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn hausdorff_symmetry_and_identity(bits in proptest::collection::vec(any::<(bool, bool)>(), 100)) {
        let a = Array2::from_shape_fn((10, 10), |(r, c)| bits[r * 10 + c].0);
        let b = Array2::from_shape_fn((10, 10), |(r, c)| bits[r * 10 + c].1);
        let d = hausdorff(&a, &b, 200.0).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, hausdorff(&b, &a, 200.0).unwrap());
        prop_assert_eq!(hausdorff(&a, &a, 200.0).unwrap(), 0.0);
        if a.iter().any(|&v| v) && b.iter().any(|&v| v) && a != b {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn small_probability_shifts_keep_the_mask(vals in proptest::collection::vec(0.0f32..1.0, 36), t in -1.0f32..1.0) {
        let probs = Array3::from_shape_vec((1, 6, 6), vals).unwrap();
        let margin = probs.iter().map(|p| (p - 0.5).abs()).fold(f32::INFINITY, f32::min);
        prop_assume!(margin > 1e-4);
        let shifted = probs.mapv(|p| p + 0.99 * t * margin);
        prop_assert_eq!(threshold_probs(&probs), threshold_probs(&shifted));
    }
}
