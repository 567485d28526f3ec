use ndarray::Array2;
use proptest::prelude::*;
use scalessl_core::objectives::{byol_loss, ntxent_loss, vicreg_loss, EmbeddingBatch, VicregParams};
use scalessl_core::RngStream;
use scalessl_oracles as oracle;

fn random_batch(rng: &mut RngStream, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.normal())
}

#[test]
fn ntxent_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(11, "ntxent-fd");
    for _ in 0..20 {
        let z = random_batch(&mut rng, 16, 16);
        let (_, g) = ntxent_loss(&EmbeddingBatch::new(z.clone()).unwrap(), 0.5).unwrap();
        let fd = oracle::fd_gradient(&z, 1e-5, |x| {
            ntxent_loss(&EmbeddingBatch::new(x.clone()).unwrap(), 0.5)
                .unwrap()
                .0
                .total
        });
        assert!(oracle::max_rel_err(&g, &fd, 1e-3) < 1e-4);
    }
}

#[test]
fn ntxent_value_matches_reference() {
    let mut rng = RngStream::new(12, "ntxent-ref");
    for _ in 0..20 {
        let z = random_batch(&mut rng, 16, 16);
        let (rep, _) = ntxent_loss(&EmbeddingBatch::new(z.clone()).unwrap(), 0.5).unwrap();
        assert!((rep.total - oracle::ntxent(&z, 0.5)).abs() < 1e-10);
    }
}

#[test]
fn byol_gradient_and_stop_gradient() {
    let mut rng = RngStream::new(13, "byol-fd");
    for _ in 0..20 {
        let p = random_batch(&mut rng, 8, 16);
        let t = random_batch(&mut rng, 8, 16);
        let (rep, g) = byol_loss(&p, &t).unwrap();
        assert!((rep.total - oracle::byol(&p, &t)).abs() < 1e-12);
        let fd = oracle::fd_gradient(&p, 1e-5, |x| byol_loss(x, &t).unwrap().0.total);
        assert!(oracle::max_rel_err(&g, &fd, 1e-3) < 1e-4);
    }
}

#[test]
fn vicreg_gradient_and_components() {
    let mut rng = RngStream::new(14, "vicreg-fd");
    let params = VicregParams::default();
    for _ in 0..20 {
        let z1 = random_batch(&mut rng, 8, 16).mapv(|v| 0.6 * v);
        let z2 = random_batch(&mut rng, 8, 16).mapv(|v| 0.6 * v);
        let (rep, g1, g2) = vicreg_loss(&z1, &z2, &params).unwrap();
        let r = oracle::vicreg(&z1, &z2, params.gamma, params.eps);
        assert!((rep.components["invariance"] - r.invariance).abs() < 1e-10);
        assert!((rep.components["variance"] - r.variance).abs() < 1e-10);
        assert!((rep.components["covariance"] - r.covariance).abs() < 1e-10);
        let recombined = params.lambda * rep.components["invariance"]
            + params.mu * rep.components["variance"]
            + params.nu * rep.components["covariance"];
        assert!((recombined - rep.total).abs() < 1e-12);
        let fd1 = oracle::fd_gradient(&z1, 1e-5, |x| vicreg_loss(x, &z2, &params).unwrap().0.total);
        let fd2 = oracle::fd_gradient(&z2, 1e-5, |x| vicreg_loss(&z1, x, &params).unwrap().0.total);
        assert!(oracle::max_rel_err(&g1, &fd1, 1e-3) < 1e-4);
        assert!(oracle::max_rel_err(&g2, &fd2, 1e-3) < 1e-4);
    }
}

fn embedding(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-3.0f64..3.0, n * d)
        .prop_filter("rows must be non-zero", move |v| {
            v.chunks(d).all(|r| r.iter().any(|x| x.abs() > 1e-3))
        })
        .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
}

fn permute_pairs(z: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = z.clone();
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(2 * dst).assign(&z.row(2 * src));
        out.row_mut(2 * dst + 1).assign(&z.row(2 * src + 1));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntxent_is_scale_invariant(z in embedding(8, 5), c in 0.01f64..100.0) {
        let a = ntxent_loss(&EmbeddingBatch::new(z.clone()).unwrap(), 0.5).unwrap().0.total;
        let b = ntxent_loss(&EmbeddingBatch::new(z.mapv(|v| v * c)).unwrap(), 0.5).unwrap().0.total;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn losses_are_pair_permutation_invariant(z in embedding(8, 5), seed in 0u64..1000) {
        let mut perm: Vec<usize> = (0..4).collect();
        RngStream::new(seed, "perm").shuffle(&mut perm);
        let zp = permute_pairs(&z, &perm);
        let a = ntxent_loss(&EmbeddingBatch::new(z.clone()).unwrap(), 0.5).unwrap().0.total;
        let b = ntxent_loss(&EmbeddingBatch::new(zp.clone()).unwrap(), 0.5).unwrap().0.total;
        prop_assert!((a - b).abs() < 1e-9);

        let split = |m: &Array2<f64>, k: usize| Array2::from_shape_fn((4, 5), |(i, j)| m[[2 * i + k, j]]);
        let p = VicregParams::default();
        let v1 = vicreg_loss(&split(&z, 0), &split(&z, 1), &p).unwrap().0.total;
        let v2 = vicreg_loss(&split(&zp, 0), &split(&zp, 1), &p).unwrap().0.total;
        prop_assert!((v1 - v2).abs() < 1e-9);
        let b1 = byol_loss(&split(&z, 0), &split(&z, 1)).unwrap().0.total;
        let b2 = byol_loss(&split(&zp, 0), &split(&zp, 1)).unwrap().0.total;
        prop_assert!((b1 - b2).abs() < 1e-9);
    }
}
