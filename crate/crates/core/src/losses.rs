//! Training objectives and their dynamic weighting.
//!
//! The generator side optimizes a weighted sum of up to five terms — the
//! least-squares adversarial loss, the bidirectional cycle-reconstruction
//! MAE, the identity MSE on full-dose inputs, the paired supervised MSE, and
//! a through-plane SSIM penalty on resliced sagittal/coronal planes. The two
//! discriminators train on their own least-squares objectives against the
//! frozen generator outputs.
//!
//! Term weights are re-balanced once per epoch from that epoch's mean term
//! values: each enabled term gets weight proportional to the reciprocal of
//! its magnitude,
//!
//! ```text
//! λ_i = (1 / (L_i + ε)) / Σ_j (1 / (L_j + ε)),   ε = 1e-8
//! ```
//!
//! so cheap terms are amplified and expensive ones damped, keeping all terms
//! in play without hand-tuned coefficients. Weights start uniform in the
//! first epoch.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::ssim::{ssim_mean_grad, DEFAULT_SIGMA};

/// Stabilizer inside the inverse-magnitude weighting.
pub const WEIGHT_EPSILON: f64 = 1e-8;

fn check_pair(context: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context,
            a: vec![a.dim().0, a.dim().1],
            b: vec![b.dim().0, b.dim().1],
        });
    }
    Ok(())
}

/// Mean absolute error between two slices.
pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_pair("MAE pair", a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared error between two slices.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_pair("MSE pair", a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Least-squares generator loss: both translated slices should look real.
///
/// `score_fake_low` is the low-dose critic on the re-noised full slice,
/// `score_fake_full` the full-dose critic on the denoised low slice.
pub fn gen_gan_loss(score_fake_low: f64, score_fake_full: f64) -> f64 {
    (score_fake_low - 1.0).powi(2) + (score_fake_full - 1.0).powi(2)
}

/// Least-squares loss of the low-dose critic: fakes → 0, real lows → 1.
pub fn disc_low_loss(score_fake_low: f64, score_real_low: f64) -> f64 {
    score_fake_low.powi(2) + (score_real_low - 1.0).powi(2)
}

/// Least-squares loss of the full-dose critic: real fulls → 1, fakes → 0.
pub fn disc_full_loss(score_real_full: f64, score_fake_full: f64) -> f64 {
    (score_real_full - 1.0).powi(2) + score_fake_full.powi(2)
}

/// Bidirectional cycle-reconstruction error (MAE both ways).
pub fn cycle_loss(
    rec_full: &Array2<f64>,
    full: &Array2<f64>,
    rec_low: &Array2<f64>,
    low: &Array2<f64>,
) -> Result<f64> {
    Ok(mae(rec_full, full)? + mae(rec_low, low)?)
}

/// Identity regularizer: denoising an already-clean slice should be a no-op.
pub fn identity_loss(denoised_full: &Array2<f64>, full: &Array2<f64>) -> Result<f64> {
    mse(denoised_full, full)
}

/// Paired supervision in both directions.
pub fn supervised_loss(
    fake_low: &Array2<f64>,
    low: &Array2<f64>,
    fake_full: &Array2<f64>,
    full: &Array2<f64>,
) -> Result<f64> {
    Ok(mse(fake_low, low)? + mse(fake_full, full)?)
}

fn check_stacks(a: &Array3<f64>, b: &Array3<f64>, win: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "reslice SSIM stacks",
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let (nz, ny, nx) = a.dim();
    if nz < 3 {
        return Err(Error::InvalidArgument(format!(
            "reslice SSIM needs at least 3 slices, got {nz}"
        )));
    }
    if nz < win || ny < win || nx < win {
        return Err(Error::InvalidArgument(format!(
            "stack {nz}x{ny}x{nx} cannot host a {win}-wide SSIM window in the reslice planes"
        )));
    }
    Ok(())
}

/// Through-plane structural penalty between a denoised stack and its
/// full-dose reference:
///
/// `(1 − mean sagittal SSIM) + (1 − mean coronal SSIM)`
///
/// where sagittal planes are `(z, y)` images (one per x) and coronal planes
/// `(z, x)` images (one per y). Zero iff both stacks agree structurally
/// through-plane; at most 4 for anti-correlated content.
pub fn plane_ssim_loss(denoised: &Array3<f64>, reference: &Array3<f64>, win: usize) -> Result<f64> {
    Ok(plane_ssim_loss_impl(denoised, reference, win, false)?.0)
}

/// [`plane_ssim_loss`] plus its gradient with respect to `denoised`.
pub fn plane_ssim_loss_grad(
    denoised: &Array3<f64>,
    reference: &Array3<f64>,
    win: usize,
) -> Result<(f64, Array3<f64>)> {
    let (loss, grad) = plane_ssim_loss_impl(denoised, reference, win, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn plane_ssim_loss_impl(
    denoised: &Array3<f64>,
    reference: &Array3<f64>,
    win: usize,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    check_stacks(denoised, reference, win)?;
    let (nz, ny, nx) = denoised.dim();
    let mut grad = want_grad.then(|| Array3::<f64>::zeros((nz, ny, nx)));

    let mut run = |axis: usize, n_planes: usize| -> Result<f64> {
        let mut total = 0.0;
        for p in 0..n_planes {
            let a = denoised.index_axis(ndarray::Axis(axis), p).to_owned();
            let b = reference.index_axis(ndarray::Axis(axis), p).to_owned();
            let (s, g) = ssim_mean_grad(&a, &b, win, DEFAULT_SIGMA, want_grad)?;
            total += s;
            if let (Some(gr), Some(g)) = (grad.as_mut(), g) {
                // loss term is 1 − mean_p(mssim): each plane contributes
                // −1/n_planes times its mssim gradient
                let scale = -1.0 / n_planes as f64;
                let mut view = gr.index_axis_mut(ndarray::Axis(axis), p);
                view.zip_mut_with(&g, |dst, &gv| *dst += scale * gv);
            }
        }
        Ok(total / n_planes as f64)
    };

    // sagittal planes: fix x (axis 2); coronal planes: fix y (axis 1)
    let mean_sag = run(2, nx)?;
    let mean_cor = run(1, ny)?;
    let loss = (1.0 - mean_sag) + (1.0 - mean_cor);
    Ok((loss, grad))
}

/// Mean SSIM over the sagittal or coronal reslices of a stack (no loss
/// wrapping); exposed for through-plane coherence analysis.
pub fn mean_reslice_ssim(
    a: &Array3<f64>,
    b: &Array3<f64>,
    sagittal: bool,
    win: usize,
) -> Result<f64> {
    check_stacks(a, b, win)?;
    let axis = if sagittal { 2 } else { 1 };
    let n = a.shape()[axis];
    let mut total = 0.0;
    for p in 0..n {
        let ap = a.index_axis(ndarray::Axis(axis), p).to_owned();
        let bp = b.index_axis(ndarray::Axis(axis), p).to_owned();
        total += ssim_mean_grad(&ap, &bp, win, DEFAULT_SIGMA, false)?.0;
    }
    Ok(total / n as f64)
}

/// Re-balances enabled term weights from their epoch-mean magnitudes.
///
/// Returns weights summing to one, each strictly inside `(0, 1)` when two or
/// more terms are enabled, ordered inversely to the loss magnitudes.
pub fn update_weights(epoch_mean_losses: &[f64]) -> Result<Vec<f64>> {
    update_weights_eps(epoch_mean_losses, WEIGHT_EPSILON)
}

/// [`update_weights`] with an explicit stabilizer.
///
/// `eps` bounds the dominance of a vanishing term: a zero loss can outweigh
/// a loss of magnitude `L` by at most `(L + eps) / eps`. The tiny default
/// keeps the weights essentially proportional to `1/L`; training loops pick
/// a larger value so that one term collapsing to zero (the identity penalty
/// does this on clean references) cannot absorb the whole weight budget.
pub fn update_weights_eps(epoch_mean_losses: &[f64], eps: f64) -> Result<Vec<f64>> {
    if epoch_mean_losses.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot weight an empty loss set".into(),
        ));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "weight stabilizer {eps} must be a positive real"
        )));
    }
    for (i, l) in epoch_mean_losses.iter().enumerate() {
        if !l.is_finite() || *l < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss {i} is {l}; weights need finite non-negative losses"
            )));
        }
    }
    let inv: Vec<f64> = epoch_mean_losses.iter().map(|l| 1.0 / (l + eps)).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// Uniform weights over `n` enabled terms — the first-epoch state.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
