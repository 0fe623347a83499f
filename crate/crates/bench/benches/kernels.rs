//! Micro-benchmarks of the numeric kernels on hot-path shapes: the fused
//! 3×3 convolution (forward and both backward passes), separable Gaussian
//! blurs, edge detection, set distance, and the through-plane structural
//! penalty with its gradient.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use cycden_core::kernels::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, gaussian_blur2,
    gaussian_blur3, sobel_magnitude, ConvShape,
};
use cycden_core::losses::plane_ssim_loss_grad;
use cycden_core::metrics::{canny_edges, hausdorff_distance, CannyConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0))
}

fn random_stack(nz: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((nz, h, w), |_| rng.gen_range(0.0..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let mut r = rng();
    let s = ConvShape {
        in_c: 24,
        h: 64,
        w: 64,
        out_c: 24,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let x = random_vec(s.in_c * s.h * s.w, &mut r);
    let w = random_vec(s.n_weights(), &mut r);
    let b = random_vec(s.out_c, &mut r);
    let (oh, ow) = s.out_hw();
    let mut y = vec![0.0; s.out_c * oh * ow];
    c.bench_function("conv3x3_forward_24c_64x64", |bench| {
        bench.iter(|| conv2d_forward(&s, black_box(&x), &w, &b, &mut y))
    });

    let dy = random_vec(y.len(), &mut r);
    let mut dx = vec![0.0; x.len()];
    c.bench_function("conv3x3_backward_input_24c_64x64", |bench| {
        bench.iter(|| conv2d_backward_input(&s, &w, black_box(&dy), &mut dx))
    });

    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; b.len()];
    c.bench_function("conv3x3_backward_params_24c_64x64", |bench| {
        bench.iter(|| conv2d_backward_params(&s, &x, black_box(&dy), &mut dw, &mut db))
    });
}

fn bench_blur_and_edges(c: &mut Criterion) {
    let mut r = rng();
    let vol = random_stack(32, 64, 64, &mut r);
    c.bench_function("gaussian_blur3_32x64x64", |bench| {
        bench.iter(|| gaussian_blur3(black_box(&vol), 1.2))
    });

    let img = gaussian_blur2(&random_image(128, 128, &mut r), 2.0);
    c.bench_function("sobel_magnitude_128x128", |bench| {
        bench.iter(|| sobel_magnitude(black_box(&img)))
    });

    let cfg = CannyConfig::default();
    c.bench_function("canny_edges_128x128", |bench| {
        bench.iter(|| canny_edges(black_box(&img), &cfg).unwrap())
    });

    let shifted = {
        let mut s = img.clone();
        for y in 0..s.nrows() {
            for x in 1..s.ncols() {
                s[(y, x)] = img[(y, x - 1)];
            }
        }
        s
    };
    let a = canny_edges(&img, &cfg).unwrap();
    let b = canny_edges(&shifted, &cfg).unwrap();
    c.bench_function("hausdorff_128x128_edge_sets", |bench| {
        bench.iter(|| hausdorff_distance(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_plane_ssim(c: &mut Criterion) {
    let mut r = rng();
    let x = random_stack(12, 64, 64, &mut r);
    let y = random_stack(12, 64, 64, &mut r);
    c.bench_function("plane_ssim_loss_grad_12x64x64_win11", |bench| {
        bench.iter(|| plane_ssim_loss_grad(black_box(&x), &y, 11).unwrap())
    });
}

criterion_group!(benches, bench_conv, bench_blur_and_edges, bench_plane_ssim);
criterion_main!(benches);
