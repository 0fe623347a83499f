//! Structural-similarity core shared by the metric and the reslice loss.
//!
//! Classic single-scale SSIM on a unit data range: an 11×11 Gaussian window
//! (σ = 1.5) by default, stability constants `C1 = (0.01)²`, `C2 = (0.03)²`,
//! and *valid*-region windowing — statistics are only taken where the window
//! fits entirely inside the image, so borders never dilute the score.
//!
//! The same routine optionally returns the analytic gradient of the mean
//! SSIM with respect to the first image, which the reslice loss backprops
//! through. Writing `S = (A1·A2)/(B1·B2)` with the filtered moments as
//! independent variables, the chain rule gives per-window weights on the
//! mean `μa`, raw second moment `Sa`, and cross moment `Sab`; scattering
//! each weight map back through the (self-adjoint) Gaussian window and
//! combining yields the pixel gradient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernels::{filter_valid_sep, filter_valid_sep_adjoint, gaussian_kernel_1d};

/// Stability constants for a data range of 1.
pub(crate) const C1: f64 = 0.01 * 0.01;
pub(crate) const C2: f64 = 0.03 * 0.03;

/// Default window: 11 taps, σ = 1.5.
pub(crate) const DEFAULT_WIN: usize = 11;
pub(crate) const DEFAULT_SIGMA: f64 = 1.5;

fn window_kernel(win: usize, sigma: f64) -> Result<Vec<f64>> {
    if win < 3 || win % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "SSIM window {win} must be odd and at least 3"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "SSIM sigma {sigma} must be positive"
        )));
    }
    Ok(gaussian_kernel_1d(sigma, (win - 1) / 2))
}

/// Mean SSIM of `a` against reference `b`, plus `∂mean/∂a` when requested.
pub(crate) fn ssim_mean_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    win: usize,
    sigma: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "SSIM image pair",
            a: vec![a.dim().0, a.dim().1],
            b: vec![b.dim().0, b.dim().1],
        });
    }
    let (h, w) = a.dim();
    if h < win || w < win {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than SSIM window {win}"
        )));
    }
    let k = window_kernel(win, sigma)?;

    let mu_a = filter_valid_sep(a, &k);
    let mu_b = filter_valid_sep(b, &k);
    let s_aa = filter_valid_sep(&(a * a), &k);
    let s_bb = filter_valid_sep(&(b * b), &k);
    let s_ab = filter_valid_sep(&(a * b), &k);

    let dim = mu_a.dim();
    let n_pix = (dim.0 * dim.1) as f64;
    let mut sum = 0.0;
    // per-window weights for the gradient scatter
    let mut w_mu = want_grad.then(|| Array2::<f64>::zeros(dim));
    let mut w_sa = want_grad.then(|| Array2::<f64>::zeros(dim));
    let mut w_sab = want_grad.then(|| Array2::<f64>::zeros(dim));

    for oy in 0..dim.0 {
        for ox in 0..dim.1 {
            let (ma, mb) = (mu_a[[oy, ox]], mu_b[[oy, ox]]);
            let var_a = s_aa[[oy, ox]] - ma * ma;
            let var_b = s_bb[[oy, ox]] - mb * mb;
            let cov = s_ab[[oy, ox]] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = var_a + var_b + C2;
            let q = 1.0 / (b1 * b2);
            let s = (a1 * a2) * q;
            sum += s;
            if want_grad {
                // S as a function of (μa, Sa, Sab); b-moments constant
                let ds_dmu = 2.0 * mb * (a2 - a1) * q - 2.0 * ma * s * (b2 - b1) / (b1 * b2);
                let ds_dsa = -s / b2;
                let ds_dsab = 2.0 * a1 * q;
                w_mu.as_mut().unwrap()[[oy, ox]] = ds_dmu / n_pix;
                w_sa.as_mut().unwrap()[[oy, ox]] = ds_dsa / n_pix;
                w_sab.as_mut().unwrap()[[oy, ox]] = ds_dsab / n_pix;
            }
        }
    }
    let mssim = sum / n_pix;
    if !want_grad {
        return Ok((mssim, None));
    }

    // d mean/d a = Wᵀ[w_mu] + 2a ∘ Wᵀ[w_sa] + b ∘ Wᵀ[w_sab]
    let mut g_mu = Array2::<f64>::zeros((h, w));
    filter_valid_sep_adjoint(w_mu.as_ref().unwrap(), &k, &mut g_mu);
    let mut g_sa = Array2::<f64>::zeros((h, w));
    filter_valid_sep_adjoint(w_sa.as_ref().unwrap(), &k, &mut g_sa);
    let mut g_sab = Array2::<f64>::zeros((h, w));
    filter_valid_sep_adjoint(w_sab.as_ref().unwrap(), &k, &mut g_sab);

    let mut grad = g_mu;
    ndarray::Zip::from(&mut grad)
        .and(&g_sa)
        .and(&g_sab)
        .and(a)
        .and(b)
        .for_each(|g, &gsa, &gsab, &av, &bv| {
            *g += 2.0 * av * gsa + bv * gsab;
        });
    Ok((mssim, Some(grad)))
}
