mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segcodec::rat::{dpsconv_backward, DpsKernels};
use segcodec::tensor::Tensor;

#[test]
fn dpsconv_matches_the_naive_loop_on_random_cases() {
    let err = dpsconv_vs_naive(20, 2024);
    assert!(err < 1e-6, "max abs err {err}");
}

#[test]
fn dpsconv_handles_kernels_wider_than_the_map() {
    assert!(dpsconv_vs_naive(60, 3) < 1e-6);
}

#[test]
fn dpsconv_backward_is_the_adjoint_of_the_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
    for (h, w) in [(2, 5), (4, 4), (6, 3), (1, 1)] {
        let (c, k) = (3, 3);
        let x = rand_t(&mut rng, &[c, h, w]);
        let kern = DpsKernels::new(rand_t(&mut rng, &[c, k * k, h, w])).unwrap();
        let go = rand_t(&mut rng, &[c, h, w]);
        let (gx, gk) = dpsconv_backward(&go, &x, &kern).unwrap();
        // <go, dps(x, K)> is bilinear, so its derivative along d in x (or K)
        // is <go, dps(d, K)> (or <go, dps(x, d)>)
        let dx = rand_t(&mut rng, &[c, h, w]);
        assert!((dot(&gx, &dx) - dot(&go, &naive_dpsconv(&dx, &kern))).abs() < 1e-10);
        let dk = DpsKernels::new(rand_t(&mut rng, &[c, k * k, h, w])).unwrap();
        assert!((dot(gk.tensor(), dk.tensor()) - dot(&go, &naive_dpsconv(&x, &dk))).abs() < 1e-10);
    }
}

#[test]
fn constant_kernels_reduce_to_depthwise_convolution() {
    let err = constant_kernels_vs_depthwise(5);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn pooling_matches_per_region_loops() {
    assert!(pooling_vs_loops(10, 8) < 1e-12);
}

#[test]
fn expansion_matches_per_pixel_lookup() {
    assert!(expansion_vs_lookup(10, 9) < 1e-12);
}
