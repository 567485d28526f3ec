use ndarray::Array2;
use proptest::prelude::*;
use scalessl_core::types::valid_center_range;
use scalessl_core::views::{crop, sample_window_proximal, sample_window_random};
use scalessl_core::RngStream;
use scalessl_oracles as oracle;

#[test]
fn proximity_draws_are_strictly_within_delta_and_in_bounds() {
    let mut rng = RngStream::new(3, "prox");
    let shape = (96, 80);
    for i in 0..10_000 {
        let size = [8, 12, 24, 48][i % 4];
        let delta = [size as f64, 0.5 * size as f64, 3.7][i % 3];
        let a = sample_window_random(shape, (size, size), &mut rng).unwrap();
        let b = sample_window_proximal(&a, shape, (size, size), delta, &mut rng).unwrap();
        assert!(a.center_dist2(&b).sqrt() < delta);
        assert!(b.check_in_bounds(shape).is_ok() && a.check_in_bounds(shape).is_ok());
    }
}

#[test]
fn random_centers_are_uniform() {
    let shape = (64, 48);
    let size = (16, 12);
    let (ulo, uhi) = valid_center_range(shape.0, size.0).unwrap();
    let (vlo, vhi) = valid_center_range(shape.1, size.1).unwrap();
    let (nu, nv) = (uhi - ulo + 1, vhi - vlo + 1);
    let mut counts = vec![0u64; nu * nv];
    let mut rng = RngStream::new(5, "uniform");
    for _ in 0..100_000 {
        let w = sample_window_random(shape, size, &mut rng).unwrap();
        counts[(w.center_u - ulo) * nv + (w.center_v - vlo)] += 1;
    }
    let (_, p) = oracle::chi_square_uniform(&counts);
    assert!(p > 0.001, "p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn crops_never_leave_the_image(ih in 8usize..64, iw in 8usize..64, fh in 0.0f64..1.0, fw in 0.0f64..1.0, seed in 0u64..10_000) {
        let h = 4 + ((ih - 4) as f64 * fh) as usize;
        let w = 4 + ((iw - 4) as f64 * fw) as usize;
        let img = Array2::from_shape_fn((ih, iw), |(r, c)| (r * iw + c) as f32);
        let mut rng = RngStream::new(seed, "crop");
        let win = sample_window_random((ih, iw), (h, w), &mut rng).unwrap();
        let patch = crop(&img, &win).unwrap();
        prop_assert_eq!(patch.dim(), (h, w));
        let (t, l) = (win.top(), win.left());
        prop_assert!(win.bottom() <= ih && win.right() <= iw);
        prop_assert_eq!(patch[[0, 0]], img[[t, l]]);
        prop_assert_eq!(patch[[h - 1, w - 1]], img[[t + h - 1, l + w - 1]]);
    }

    #[test]
    fn proximal_pairs_respect_delta(seed in 0u64..10_000, delta in 0.5f64..40.0, size in 4usize..32) {
        let shape = (64, 64);
        let mut rng = RngStream::new(seed, "pp");
        let a = sample_window_random(shape, (size, size), &mut rng).unwrap();
        let b = sample_window_proximal(&a, shape, (size, size), delta, &mut rng).unwrap();
        prop_assert!(a.center_dist2(&b).sqrt() < delta);
        prop_assert!(b.check_in_bounds(shape).is_ok());
    }
}
