//! Forward/backward time of the toy encoder on 96x96 images and raw GEMM rate.

use std::time::Instant;

use scalessl_core::config::EncoderArch;
use scalessl_core::nets::{Encoder, EncoderSpec, Layer, Tensor};
use scalessl_core::RngStream;

fn main() {
    let mut rng = RngStream::new(0, "b");
    let spec = EncoderSpec::new(EncoderArch::ToyCnn, (96, 96), 64, vec![1, 2, 2]).unwrap();
    let mut enc = Encoder::new(spec, &mut rng).unwrap();
    let x = Tensor::from_vec(
        [32, 1, 96, 96],
        (0..32 * 96 * 96).map(|i| ((i % 97) as f32) / 97.0).collect(),
    );
    let t = Instant::now();
    let y = enc.forward_train(&x);
    let f = t.elapsed().as_secs_f64();
    let t = Instant::now();
    enc.backward(&y);
    let b = t.elapsed().as_secs_f64();
    println!(
        "fwd {f:.3}s bwd {b:.3}s per 32 images; per image {:.1} ms",
        (f + b) * 1000.0 / 32.0
    );
    let (m, k, n) = (16, 144, 9216);
    let a = vec![0.5f32; m * k];
    let bb = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    for _ in 0..50 {
        scalessl_core::nets::tensor::gemm(false, false, m, k, n, 1.0, &a, &bb, 0.0, &mut c);
    }
    let s = t.elapsed().as_secs_f64();
    println!("gemm {:.1} GFLOP/s", 50.0 * 2.0 * (m * k * n) as f64 / s / 1e9);
}
