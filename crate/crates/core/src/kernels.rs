//! Low-level stencil kernels: 2-D convolution, separable Gaussian filtering,
//! Sobel gradients.
//!
//! Everything here works on plain `f64` slices in channel-major `(c, h, w)`
//! layout so the inner loops stay branch-free and auto-vectorize. The 3×3
//! stride-1 same-padding case — the only shape the denoising networks use in
//! their hot path — gets a fused row-stencil implementation; other shapes fall
//! back to a straightforward loop nest, which is fine for the strided
//! discriminator layers working on small maps.
//!
//! Convolutions are *correlations* in the usual deep-learning convention (no
//! kernel flip). The backward-input pass reuses the forward stencil with a
//! flipped, channel-transposed weight buffer.

use ndarray::{Array2, Array3};

/// Geometry of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn n_weights(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn is_fast_path(&self) -> bool {
        self.k == 3 && self.stride == 1 && self.pad == 1
    }
}

/// `out = bias ⊕ x ⋆ w`; `out` is overwritten.
///
/// `x` is `(in_c, h, w)`, `w` is `(out_c, in_c, k, k)` row-major, `out` is
/// `(out_c, oh, ow)`.
pub fn conv2d_forward(s: &ConvShape, x: &[f64], wgt: &[f64], bias: &[f64], out: &mut [f64]) {
    let (oh, ow) = s.out_hw();
    debug_assert_eq!(x.len(), s.in_c * s.h * s.w);
    debug_assert_eq!(wgt.len(), s.n_weights());
    debug_assert_eq!(bias.len(), s.out_c);
    debug_assert_eq!(out.len(), s.out_c * oh * ow);
    for co in 0..s.out_c {
        out[co * oh * ow..(co + 1) * oh * ow].fill(bias[co]);
    }
    if s.is_fast_path() {
        conv3x3_accumulate(s.in_c, s.out_c, s.h, s.w, x, wgt, out);
    } else {
        conv_generic_accumulate(s, x, wgt, out);
    }
}

/// `dx += dy ⋆ flip(w)` — gradient of [`conv2d_forward`] w.r.t. its input.
///
/// `dx` must be pre-zeroed (or hold a gradient to accumulate into).
pub fn conv2d_backward_input(s: &ConvShape, wgt: &[f64], dy: &[f64], dx: &mut [f64]) {
    let (oh, ow) = s.out_hw();
    debug_assert_eq!(dy.len(), s.out_c * oh * ow);
    debug_assert_eq!(dx.len(), s.in_c * s.h * s.w);
    if s.is_fast_path() {
        // Full correlation of dy with the spatially flipped, channel-transposed
        // kernel is again a 3×3 same-padding stencil.
        let mut wt = vec![0f64; s.n_weights()];
        for co in 0..s.out_c {
            for ci in 0..s.in_c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        wt[((ci * s.out_c + co) * 3 + (2 - ky)) * 3 + (2 - kx)] =
                            wgt[((co * s.in_c + ci) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        conv3x3_accumulate(s.out_c, s.in_c, s.h, s.w, dy, &wt, dx);
    } else {
        for co in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[(co * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..s.in_c {
                        for ky in 0..s.k {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..s.k {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                dx[(ci * s.h + iy as usize) * s.w + ix as usize] +=
                                    wgt[((co * s.in_c + ci) * s.k + ky) * s.k + kx] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dw += x ⋆ dy`, `db += Σ dy` — parameter gradients of [`conv2d_forward`].
pub fn conv2d_backward_params(
    s: &ConvShape,
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (oh, ow) = s.out_hw();
    for co in 0..s.out_c {
        let mut acc = 0.0;
        for v in &dy[co * oh * ow..(co + 1) * oh * ow] {
            acc += v;
        }
        db[co] += acc;
    }
    if s.is_fast_path() {
        for co in 0..s.out_c {
            let dyc = &dy[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..s.in_c {
                let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                let mut w9 = [0f64; 9];
                for oy in 0..oh {
                    let dyrow = &dyc[oy * ow..(oy + 1) * ow];
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * s.w..(iy as usize + 1) * s.w];
                        // tap kx reads x at ox+kx-1; keep both slices in range
                        w9[ky * 3] += dot(&dyrow[1..], &xrow[..ow - 1]);
                        w9[ky * 3 + 1] += dot(dyrow, xrow);
                        w9[ky * 3 + 2] += dot(&dyrow[..ow - 1], &xrow[1..]);
                    }
                }
                for t in 0..9 {
                    dw[(co * s.in_c + ci) * 9 + t] += w9[t];
                }
            }
        }
    } else {
        for co in 0..s.out_c {
            for ci in 0..s.in_c {
                for ky in 0..s.k {
                    for kx in 0..s.k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += dy[(co * oh + oy) * ow + ox]
                                    * x[(ci * s.h + iy as usize) * s.w + ix as usize];
                            }
                        }
                        dw[((co * s.in_c + ci) * s.k + ky) * s.k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Fused 3×3 stride-1 same-padding stencil, accumulating into `out`.
fn conv3x3_accumulate(
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    x: &[f64],
    wgt: &[f64],
    out: &mut [f64],
) {
    debug_assert!(w >= 2);
    for co in 0..out_c {
        let oc = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..in_c {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            let wk = &wgt[(co * in_c + ci) * 9..(co * in_c + ci) * 9 + 9];
            for oy in 0..h {
                let orow = &mut oc[oy * w..(oy + 1) * w];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                    let inner = &mut orow[1..w - 1];
                    for ((d, (a, b)), c) in inner
                        .iter_mut()
                        .zip(xrow[..w - 2].iter().zip(&xrow[1..w - 1]))
                        .zip(&xrow[2..w])
                    {
                        *d += w0 * a + w1 * b + w2 * c;
                    }
                    orow[0] += w1 * xrow[0] + w2 * xrow[1];
                    orow[w - 1] += w0 * xrow[w - 2] + w1 * xrow[w - 1];
                }
            }
        }
    }
}

fn conv_generic_accumulate(s: &ConvShape, x: &[f64], wgt: &[f64], out: &mut [f64]) {
    let (oh, ow) = s.out_hw();
    for co in 0..s.out_c {
        for ci in 0..s.in_c {
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let wv = wgt[((co * s.in_c + ci) * s.k + ky) * s.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            out[(co * oh + oy) * ow + ox] +=
                                wv * x[(ci * s.h + iy as usize) * s.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Normalized 1-D Gaussian taps, `2·radius + 1` of them.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "gaussian sigma must be positive");
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of a 3-D field with replicate boundaries.
///
/// Replicate handling keeps the filter an exact average: blurring a constant
/// field returns it bit-for-bit up to rounding, so a smoothed phantom keeps
/// its plateau values away from structure boundaries.
pub fn gaussian_blur3(vol: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel_1d(sigma, radius);
    let mut out = vol.clone();
    for axis in 0..3 {
        out = blur_axis_replicate(&out, axis, &k, radius);
    }
    out
}

/// Separable Gaussian blur of a 2-D image with replicate boundaries.
pub fn gaussian_blur2(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel_1d(sigma, radius);
    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x + j) as isize - radius as isize;
                let sx = sx.clamp(0, w as isize - 1) as usize;
                acc += kv * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = (y + j) as isize - radius as isize;
                let sy = sy.clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn blur_axis_replicate(vol: &Array3<f64>, axis: usize, k: &[f64], radius: usize) -> Array3<f64> {
    let mut out = vol.clone();
    let n = vol.shape()[axis];
    let mut scratch = vec![0f64; n];
    for (lane_in, mut lane_out) in vol
        .lanes(ndarray::Axis(axis))
        .into_iter()
        .zip(out.lanes_mut(ndarray::Axis(axis)))
    {
        for (i, s) in scratch.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let si = (i + j) as isize - radius as isize;
                let si = si.clamp(0, n as isize - 1) as usize;
                acc += kv * lane_in[si];
            }
            *s = acc;
        }
        for (o, s) in lane_out.iter_mut().zip(&scratch) {
            *o = *s;
        }
    }
    out
}

/// Sobel gradient components `(gy, gx)` with replicate borders.
pub fn sobel_gradients(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[[y, x]]
    };
    let mut gy = Array2::zeros((h, w));
    let mut gx = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (a, b, c) = (at(y - 1, x - 1), at(y - 1, x), at(y - 1, x + 1));
            let (d, f) = (at(y, x - 1), at(y, x + 1));
            let (g, hh, i) = (at(y + 1, x - 1), at(y + 1, x), at(y + 1, x + 1));
            gx[[y as usize, x as usize]] = (c + 2.0 * f + i) - (a + 2.0 * d + g);
            gy[[y as usize, x as usize]] = (g + 2.0 * hh + i) - (a + 2.0 * b + c);
        }
    }
    (gy, gx)
}

/// Sobel gradient magnitude with replicate borders.
pub fn sobel_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let (gy, gx) = sobel_gradients(img);
    let mut m = gy;
    m.zip_mut_with(&gx, |a, b| *a = (*a * *a + *b * *b).sqrt());
    m
}

/// Valid-region separable filtering: rows then columns with the same taps.
///
/// Output shape is `(h - L + 1, w - L + 1)` for `L` taps.
pub fn filter_valid_sep(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let l = k.len();
    let (h, w) = img.dim();
    assert!(h >= l && w >= l, "image {h}x{w} smaller than filter {l}");
    let (oh, ow) = (h - l + 1, w - l + 1);
    let mut tmp = Array2::zeros((h, ow));
    for y in 0..h {
        let row = img.row(y);
        let row = row.as_slice().expect("row is contiguous");
        for ox in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[ox + j];
            }
            tmp[[y, ox]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[[oy + j, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid_sep`]: scatters an output-shaped gradient back
/// onto the input grid, accumulating into `dimg`.
pub fn filter_valid_sep_adjoint(dout: &Array2<f64>, k: &[f64], dimg: &mut Array2<f64>) {
    let l = k.len();
    let (oh, ow) = dout.dim();
    let (h, w) = dimg.dim();
    assert_eq!(h, oh + l - 1);
    assert_eq!(w, ow + l - 1);
    let mut dtmp = Array2::<f64>::zeros((h, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let g = dout[[oy, ox]];
            if g == 0.0 {
                continue;
            }
            for (j, kv) in k.iter().enumerate() {
                dtmp[[oy + j, ox]] += kv * g;
            }
        }
    }
    for y in 0..h {
        for ox in 0..ow {
            let g = dtmp[[y, ox]];
            if g == 0.0 {
                continue;
            }
            for (j, kv) in k.iter().enumerate() {
                dimg[[y, ox + j]] += kv * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Textbook quadruple loop used as the oracle for every conv variant.
    fn conv_naive(s: &ConvShape, x: &[f64], wgt: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = s.out_hw();
        let mut out = vec![0f64; s.out_c * oh * ow];
        for co in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..s.in_c {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy < 0 || iy >= s.h as isize || ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += wgt[((co * s.in_c + ci) * s.k + ky) * s.k + kx]
                                    * x[(ci * s.h + iy as usize) * s.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0),
                "index {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn fast_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let s = ConvShape {
            in_c: 3,
            h: 13,
            w: 9,
            out_c: 4,
            k: 3,
            stride: 1,
            pad: 1,
        };
        let x = rand_vec(&mut rng, s.in_c * s.h * s.w);
        let wgt = rand_vec(&mut rng, s.n_weights());
        let bias = rand_vec(&mut rng, s.out_c);
        let (oh, ow) = s.out_hw();
        let mut out = vec![0f64; s.out_c * oh * ow];
        conv2d_forward(&s, &x, &wgt, &bias, &mut out);
        assert_close(&out, &conv_naive(&s, &x, &wgt, &bias), 1e-12);
    }

    #[test]
    fn strided_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for (stride, pad, k) in [(2, 1, 3), (2, 1, 4), (1, 0, 3), (3, 2, 5)] {
            let s = ConvShape {
                in_c: 2,
                h: 11,
                w: 12,
                out_c: 3,
                k,
                stride,
                pad,
            };
            let x = rand_vec(&mut rng, s.in_c * s.h * s.w);
            let wgt = rand_vec(&mut rng, s.n_weights());
            let bias = rand_vec(&mut rng, s.out_c);
            let (oh, ow) = s.out_hw();
            let mut out = vec![0f64; s.out_c * oh * ow];
            conv2d_forward(&s, &x, &wgt, &bias, &mut out);
            assert_close(&out, &conv_naive(&s, &x, &wgt, &bias), 1e-12);
        }
    }

    /// ⟨conv(x), dy⟩ must equal ⟨x, conv_backward_input(dy)⟩ for the linear
    /// (bias-free) part — catches any forward/backward mismatch.
    #[test]
    fn backward_input_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for (stride, pad, k, h, w) in [(1, 1, 3, 10, 7), (2, 1, 3, 9, 11), (2, 1, 4, 12, 12)] {
            let s = ConvShape {
                in_c: 3,
                h,
                w,
                out_c: 2,
                k,
                stride,
                pad,
            };
            let x = rand_vec(&mut rng, s.in_c * s.h * s.w);
            let wgt = rand_vec(&mut rng, s.n_weights());
            let bias = vec![0f64; s.out_c];
            let (oh, ow) = s.out_hw();
            let mut y = vec![0f64; s.out_c * oh * ow];
            conv2d_forward(&s, &x, &wgt, &bias, &mut y);
            let dy = rand_vec(&mut rng, y.len());
            let mut dx = vec![0f64; x.len()];
            conv2d_backward_input(&s, &wgt, &dy, &mut dx);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn backward_params_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for (stride, pad, k, h, w) in [(1, 1, 3, 8, 8), (2, 1, 3, 8, 9)] {
            let s = ConvShape {
                in_c: 2,
                h,
                w,
                out_c: 2,
                k,
                stride,
                pad,
            };
            let x = rand_vec(&mut rng, s.in_c * s.h * s.w);
            let mut wgt = rand_vec(&mut rng, s.n_weights());
            let mut bias = rand_vec(&mut rng, s.out_c);
            let (oh, ow) = s.out_hw();
            let dy = rand_vec(&mut rng, s.out_c * oh * ow);
            // loss = <conv(x), dy>
            let eval = |wgt: &[f64], bias: &[f64]| -> f64 {
                let mut y = vec![0f64; s.out_c * oh * ow];
                conv2d_forward(&s, x.as_slice(), wgt, bias, &mut y);
                y.iter().zip(&dy).map(|(a, b)| a * b).sum()
            };
            let mut dw = vec![0f64; wgt.len()];
            let mut db = vec![0f64; bias.len()];
            conv2d_backward_params(&s, &x, &dy, &mut dw, &mut db);
            let hstep = 1e-6;
            for i in (0..wgt.len()).step_by(5) {
                let keep = wgt[i];
                wgt[i] = keep + hstep;
                let up = eval(&wgt, &bias);
                wgt[i] = keep - hstep;
                let dn = eval(&wgt, &bias);
                wgt[i] = keep;
                let fd = (up - dn) / (2.0 * hstep);
                assert!((fd - dw[i]).abs() <= 1e-5 * fd.abs().max(1.0), "dw[{i}]");
            }
            for i in 0..bias.len() {
                let keep = bias[i];
                bias[i] = keep + hstep;
                let up = eval(&wgt, &bias);
                bias[i] = keep - hstep;
                let dn = eval(&wgt, &bias);
                bias[i] = keep;
                let fd = (up - dn) / (2.0 * hstep);
                assert!((fd - db[i]).abs() <= 1e-5 * fd.abs().max(1.0), "db[{i}]");
            }
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel_1d(1.5, 5);
        assert_eq!(k.len(), 11);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert_eq!(k[i], k[10 - i]);
        }
        assert!(k[5] > k[4]);
    }

    #[test]
    fn blur_preserves_constant_fields() {
        let v = Array3::from_elem((6, 7, 8), 3.25f64);
        let b = gaussian_blur3(&v, 1.2);
        for x in b.iter() {
            assert!((x - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_reduces_variance_but_keeps_mean_of_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Array3::from_shape_simple_fn((12, 12, 12), || rng.gen_range(0.0..1.0));
        let b = gaussian_blur3(&v, 1.0);
        let var = |a: &Array3<f64>| {
            let m = a.mean().unwrap();
            a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / a.len() as f64
        };
        assert!(var(&b) < 0.5 * var(&v));
    }

    #[test]
    fn sobel_on_linear_ramp_gives_constant_gradient() {
        // I(y, x) = 2x: horizontal Sobel response is 8·2 = 16 in the interior
        // and on edges too, thanks to replicate borders.
        let img = Array2::from_shape_fn((6, 7), |(_, x)| 2.0 * x as f64);
        let (gy, gx) = sobel_gradients(&img);
        for y in 0..6 {
            for x in 1..6 {
                assert!((gx[[y, x]] - 16.0).abs() < 1e-12, "gx at {y},{x}");
                assert!(gy[[y, x]].abs() < 1e-12);
            }
        }
        let m = sobel_magnitude(&img);
        assert!((m[[3, 3]] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn valid_filter_matches_direct_window_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Array2::from_shape_simple_fn((9, 13), || rng.gen_range(-1.0..1.0));
        let k = gaussian_kernel_1d(1.5, 2);
        let out = filter_valid_sep(&img, &k);
        assert_eq!(out.dim(), (5, 9));
        for oy in 0..5 {
            for ox in 0..9 {
                let mut acc = 0.0;
                for j in 0..5 {
                    for i in 0..5 {
                        acc += k[j] * k[i] * img[[oy + j, ox + i]];
                    }
                }
                assert!((out[[oy, ox]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn valid_filter_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Array2::from_shape_simple_fn((12, 15), || rng.gen_range(-1.0..1.0));
        let k = gaussian_kernel_1d(1.5, 3);
        let out = filter_valid_sep(&img, &k);
        let dout = Array2::from_shape_simple_fn(out.dim(), || rng.gen_range(-1.0..1.0));
        let mut dimg = Array2::zeros(img.dim());
        filter_valid_sep_adjoint(&dout, &k, &mut dimg);
        let lhs: f64 = out.iter().zip(dout.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(dimg.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
