use ndarray::Array2;
use scalessl_core::config::{DecoderStyle, EncoderArch, ObjectiveParams};
use scalessl_core::nets::{
    copy_params, logits_to_probs, DecoderSpec, Encoder, EncoderSpec, HeadSpec, Layer, SegmentationModel, SslModel,
    Tensor,
};
use scalessl_core::objectives::{ssl_batch_loss, SslOperands};
use scalessl_core::train::soft_dice;
use scalessl_core::{RngStream, SslMethod};

const PATCH: usize = 16;

fn encoder(rng: &mut RngStream) -> Encoder {
    Encoder::new(
        EncoderSpec::new(EncoderArch::ToyCnn, (PATCH, PATCH), 16, vec![1, 2, 2]).unwrap(),
        rng,
    )
    .unwrap()
}

fn batch(rng: &mut RngStream, n: usize) -> Tensor {
    let imgs: Vec<Array2<f32>> = (0..n)
        .map(|_| Array2::from_shape_fn((PATCH, PATCH), |_| rng.normal() as f32))
        .collect();
    Tensor::from_images(&imgs)
}

fn dice_of(model: &mut SegmentationModel, x: &Tensor, target: &[f32]) -> f64 {
    let probs = logits_to_probs(&model.forward_train(x, false));
    soft_dice(probs.data(), target, 1.0).0
}

/// Picks `k` entries with non-negligible analytic gradient across the encoder.
fn probe_sites(grads: &[Vec<f32>], k: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let max = grads.iter().flatten().fold(0.0f32, |m, g| m.max(g.abs()));
    let mut sites: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, g)| {
            g.iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 0.05 * max)
                .map(move |(i, _)| (p, i))
        })
        .collect();
    rng.shuffle(&mut sites);
    sites.truncate(k);
    assert_eq!(sites.len(), k);
    sites
}

fn check(fd: f64, analytic: f64) {
    assert!(analytic != 0.0);
    assert!(
        (fd - analytic).abs() <= 0.1 * analytic.abs() + 1e-5,
        "fd {fd} vs analytic {analytic}"
    );
}

#[test]
fn dice_gradient_reaches_encoder_parameters() {
    let mut rng = RngStream::new(31, "e2e-seg");
    let enc = encoder(&mut rng);
    let mut model = SegmentationModel::new(
        enc,
        DecoderSpec::new(DecoderStyle::PlainUpsample, 1, (PATCH, PATCH)).unwrap(),
        &mut rng,
    )
    .unwrap();
    let x = batch(&mut rng, 3);
    let target: Vec<f32> = (0..3 * PATCH * PATCH).map(|_| f32::from(rng.bernoulli(0.3))).collect();

    let probs = logits_to_probs(&model.forward_train(&x, false));
    let (_, dp) = soft_dice(probs.data(), &target, 1.0);
    let dz: Vec<f32> = probs.data().iter().zip(&dp).map(|(&p, &g)| g * p * (1.0 - p)).collect();
    for p in model.encoder.params_mut() {
        p.zero_grad();
    }
    model.backward(&Tensor::from_vec(probs.shape(), dz), false);
    let grads: Vec<Vec<f32>> = model.encoder.params().iter().map(|p| p.grad.clone()).collect();

    let h = 1e-3f32;
    for (pi, i) in probe_sites(&grads, 6, &mut rng) {
        let orig = model.encoder.params()[pi].value[i];
        model.encoder.params_mut()[pi].value[i] = orig + h;
        let up = dice_of(&mut model, &x, &target);
        model.encoder.params_mut()[pi].value[i] = orig - h;
        let down = dice_of(&mut model, &x, &target);
        model.encoder.params_mut()[pi].value[i] = orig;
        check((up - down) / (2.0 * h as f64), grads[pi][i] as f64);
    }
}

fn ntxent_of(model: &mut SslModel, x: &Tensor, params: &ObjectiveParams) -> (f64, Tensor) {
    let fwd = model.forward_train(x);
    let [n, d, _, _] = fwd.online.shape();
    let rows = |lo: usize| Array2::from_shape_fn((n / 2, d), |(r, c)| fwd.online.data()[(lo + r) * d + c] as f64);
    let ops = SslOperands::Contrastive {
        z1: rows(0),
        z2: rows(n / 2),
    };
    let (rep, g) = ssl_batch_loss(SslMethod::Simclr, &ops, params).unwrap();
    let flat: Vec<f32> = g.d1.iter().chain(g.d2.iter()).map(|&v| v as f32).collect();
    (rep.total, Tensor::from_vec(fwd.online.shape(), flat))
}

#[test]
fn contrastive_gradient_reaches_encoder_through_projector() {
    let mut rng = RngStream::new(32, "e2e-ssl");
    let enc = encoder(&mut rng);
    let mut model = SslModel::new(enc, HeadSpec::projector(16, 8).unwrap(), None, &mut rng).unwrap();
    let x = batch(&mut rng, 8);
    let params = ObjectiveParams::default();
    let (_, dz) = ntxent_of(&mut model, &x, &params);
    for p in model.online_params_mut() {
        p.zero_grad();
    }
    model.backward(&dz);
    let grads: Vec<Vec<f32>> = model.encoder.params().iter().map(|p| p.grad.clone()).collect();

    let h = 1e-3f32;
    for (pi, i) in probe_sites(&grads, 6, &mut rng) {
        let orig = model.encoder.params()[pi].value[i];
        model.encoder.params_mut()[pi].value[i] = orig + h;
        let up = ntxent_of(&mut model, &x, &params).0;
        model.encoder.params_mut()[pi].value[i] = orig - h;
        let down = ntxent_of(&mut model, &x, &params).0;
        model.encoder.params_mut()[pi].value[i] = orig;
        check((up - down) / (2.0 * h as f64), grads[pi][i] as f64);
    }
}

#[test]
fn segmentation_path_has_no_projector() {
    let mut rng = RngStream::new(33, "bypass");
    let ssl = SslModel::new(encoder(&mut rng), HeadSpec::projector(16, 8).unwrap(), None, &mut rng).unwrap();
    let proj_names: Vec<String> = ssl.projector.params().iter().map(|p| p.name.clone()).collect();
    let mut enc = encoder(&mut rng.derive("fresh"));
    copy_params(&mut enc, &ssl.encoder).unwrap();
    let seg = SegmentationModel::new(
        enc,
        DecoderSpec::new(DecoderStyle::PlainUpsample, 1, (PATCH, PATCH)).unwrap(),
        &mut rng,
    )
    .unwrap();
    let seg_params: Vec<String> = seg
        .encoder
        .params()
        .iter()
        .chain(seg.decoder.params().iter())
        .map(|p| p.name.clone())
        .collect();
    assert!(proj_names.iter().all(|n| !seg_params.contains(n)));
    assert_eq!(seg.encoder.params().len(), ssl.encoder.params().len());
}
