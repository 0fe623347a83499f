//! Quantitative image-quality metrics and per-case evaluation.
//!
//! Scalar metrics operate on whole volumes against a reference:
//! peak signal-to-noise ratio, mean structural similarity over axial
//! slices, normalized root-mean-square error, and an edge-preservation
//! index (ratio of summed Sobel magnitudes). Structure-aware metrics use
//! the phantom geometry when it is known: contrast-to-noise ratio over
//! lesion/background voxel sets, and the Hausdorff distance between
//! Canny edge maps of a representative slice.
//!
//! `evaluate_case` bundles all of the above into one record; metrics that
//! need unavailable inputs (no lesion description, no detectable edges)
//! come back as `None` rather than failing the whole case.

pub mod canny;
pub mod hausdorff;

use crate::error::{Error, Result};
use crate::kernels::sobel_magnitude;
use crate::phantom::PhantomSpec;
use crate::ssim;
use crate::volume::Volume;

pub use canny::{canny_edges, CannyConfig, EdgeSet};
pub use hausdorff::hausdorff_distance;

fn check_same_shape(a: &Volume, b: &Volume, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical volumes give `+inf`.
pub fn psnr(x: &Volume, reference: &Volume, data_range: f64) -> Result<f64> {
    check_same_shape(x, reference, "psnr")?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "psnr data range {data_range} must be positive"
        )));
    }
    let n = x.n_voxels() as f64;
    let mut se = 0.0f64;
    for (a, b) in x.data.iter().zip(reference.data.iter()) {
        let d = *a as f64 - *b as f64;
        se += d * d;
    }
    let mse = se / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((data_range * data_range) / mse).log10())
}

/// Mean structural similarity over axial slices (valid-region Gaussian
/// window); identical volumes score exactly 1.
pub fn ssim_index(x: &Volume, reference: &Volume, win: usize) -> Result<f64> {
    check_same_shape(x, reference, "ssim")?;
    let [nz, _, _] = x.shape();
    let mut total = 0.0f64;
    for z in 0..nz {
        let a = x.slice_f64(z);
        let b = reference.slice_f64(z);
        let (s, _) = ssim::ssim_mean_grad(&a, &b, win, ssim::DEFAULT_SIGMA, false)?;
        total += s;
    }
    Ok(total / nz as f64)
}

/// Normalized RMSE: `‖x − ref‖₂ / ‖ref‖₂`; errors on an all-zero reference.
pub fn nrmse(x: &Volume, reference: &Volume) -> Result<f64> {
    check_same_shape(x, reference, "nrmse")?;
    let mut err2 = 0.0f64;
    let mut ref2 = 0.0f64;
    for (a, b) in x.data.iter().zip(reference.data.iter()) {
        let (a, b) = (*a as f64, *b as f64);
        err2 += (a - b) * (a - b);
        ref2 += b * b;
    }
    if ref2 == 0.0 {
        return Err(Error::InvalidArgument(
            "nrmse undefined for an all-zero reference".into(),
        ));
    }
    Ok((err2 / ref2).sqrt())
}

/// Edge-preservation index: total Sobel gradient magnitude of `x` over
/// that of the reference, accumulated across axial slices. Smoothing an
/// image pushes the index below one; identical inputs give exactly one.
pub fn epi(x: &Volume, reference: &Volume) -> Result<f64> {
    check_same_shape(x, reference, "epi")?;
    let [nz, _, _] = x.shape();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for z in 0..nz {
        num += sobel_magnitude(&x.slice_f64(z)).sum();
        den += sobel_magnitude(&reference.slice_f64(z)).sum();
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "edge-preservation index undefined for an edge-free reference".into(),
        ));
    }
    Ok(num / den)
}

/// Lesion and local-background voxel sets for one tumor.
#[derive(Debug, Clone)]
pub struct RoiPair {
    pub target: Vec<(usize, usize, usize)>,
    pub background: Vec<(usize, usize, usize)>,
}

/// Builds ROI pairs from known geometry: the lesion core (inside 0.6 of the
/// tumor radius) against a surrounding shell 1.4r..1.4r+3 voxels that stays
/// well inside the deep background (clear of the cortical ribbon) and clear
/// of every other lesion.
pub fn segment_rois(spec: &PhantomSpec) -> Vec<RoiPair> {
    let center = spec.center();
    let (nz, ny, nx) = (spec.shape[0], spec.shape[1], spec.shape[2]);
    let rho_limit = spec.cortex_inner * 0.95;
    let mut out = Vec::with_capacity(spec.tumors.len());
    for (i, t) in spec.tumors.iter().enumerate() {
        let r_in = 0.6 * t.radius;
        let shell_lo = 1.4 * t.radius;
        let shell_hi = shell_lo + 3.0;
        let mut target = Vec::new();
        let mut background = Vec::new();
        // only scan the bounding box of the outer shell
        let lo = |c: f64| ((c - shell_hi).floor().max(0.0)) as usize;
        let hi = |c: f64, n: usize| ((c + shell_hi).ceil() as usize + 1).min(n);
        for z in lo(t.center[0])..hi(t.center[0], nz) {
            for y in lo(t.center[1])..hi(t.center[1], ny) {
                for x in lo(t.center[2])..hi(t.center[2], nx) {
                    let dz = z as f64 - t.center[0];
                    let dy = y as f64 - t.center[1];
                    let dx = x as f64 - t.center[2];
                    let d = (dz * dz + dy * dy + dx * dx).sqrt();
                    if d <= r_in {
                        target.push((z, y, x));
                    } else if d >= shell_lo && d <= shell_hi {
                        let uz = (z as f64 - center[0]) / spec.head_semiaxes[0];
                        let uy = (y as f64 - center[1]) / spec.head_semiaxes[1];
                        let ux = (x as f64 - center[2]) / spec.head_semiaxes[2];
                        let rho = (uz * uz + uy * uy + ux * ux).sqrt();
                        if rho >= rho_limit {
                            continue;
                        }
                        let near_other = spec.tumors.iter().enumerate().any(|(j, o)| {
                            if j == i {
                                return false;
                            }
                            let dz = z as f64 - o.center[0];
                            let dy = y as f64 - o.center[1];
                            let dx = x as f64 - o.center[2];
                            (dz * dz + dy * dy + dx * dx).sqrt() <= 1.4 * o.radius
                        });
                        if !near_other {
                            background.push((z, y, x));
                        }
                    }
                }
            }
        }
        out.push(RoiPair { target, background });
    }
    out
}

/// Contrast-to-noise ratio `|μ_target − μ_background| / σ_background` with
/// the population standard deviation; degenerate ROIs are an error.
pub fn cnr(vol: &Volume, roi: &RoiPair) -> Result<f64> {
    if roi.target.is_empty() || roi.background.is_empty() {
        return Err(Error::InvalidArgument(
            "contrast-to-noise ratio needs non-empty target and background".into(),
        ));
    }
    let fetch = |pts: &[(usize, usize, usize)]| -> Vec<f64> {
        pts.iter()
            .map(|&(z, y, x)| vol.data[[z, y, x]] as f64)
            .collect()
    };
    let tv = fetch(&roi.target);
    let bv = fetch(&roi.background);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mu_t = mean(&tv);
    let mu_b = mean(&bv);
    let var_b = bv.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / bv.len() as f64;
    let sd_b = var_b.sqrt();
    if sd_b == 0.0 {
        return Err(Error::InvalidArgument(
            "contrast-to-noise ratio undefined for a noise-free background".into(),
        ));
    }
    Ok((mu_t - mu_b).abs() / sd_b)
}

/// Knobs for `evaluate_case`.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub ssim_win: usize,
    pub canny: CannyConfig,
    /// Axial slice used for edge comparison; `None` picks the central one.
    pub edge_slice: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ssim_win: ssim::DEFAULT_WIN,
            canny: CannyConfig::default(),
            edge_slice: None,
        }
    }
}

/// All metrics for one volume/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub epi: f64,
    /// Mean over lesions; `None` when geometry is unknown or has none.
    pub cnr: Option<f64>,
    /// `None` when either slice has no detectable edges.
    pub hausdorff: Option<f64>,
}

/// Evaluates one case. Inputs are expected on a common normalized scale
/// with unit data range; `spec` supplies lesion geometry when available.
pub fn evaluate_case(
    x: &Volume,
    reference: &Volume,
    spec: Option<&PhantomSpec>,
    cfg: &EvalConfig,
) -> Result<CaseMetrics> {
    check_same_shape(x, reference, "evaluate")?;
    let psnr_v = psnr(x, reference, 1.0)?;
    let ssim_v = ssim_index(x, reference, cfg.ssim_win)?;
    let nrmse_v = nrmse(x, reference)?;
    let epi_v = epi(x, reference)?;

    let cnr_v = match spec {
        Some(s) if !s.tumors.is_empty() => {
            let rois = segment_rois(s);
            let mut vals = Vec::with_capacity(rois.len());
            for roi in &rois {
                vals.push(cnr(x, roi)?);
            }
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
        _ => None,
    };

    let [nz, _, _] = x.shape();
    let z = cfg.edge_slice.unwrap_or(nz / 2);
    if z >= nz {
        return Err(Error::InvalidArgument(format!(
            "edge slice {z} out of range for {nz} slices"
        )));
    }
    let ex = canny_edges(&x.slice_f64(z), &cfg.canny)?;
    let er = canny_edges(&reference.slice_f64(z), &cfg.canny)?;
    let hausdorff_v = if ex.is_empty() || er.is_empty() {
        None
    } else {
        Some(hausdorff_distance(&ex, &er)?)
    };

    Ok(CaseMetrics {
        psnr: psnr_v,
        ssim: ssim_v,
        nrmse: nrmse_v,
        epi: epi_v,
        cnr: cnr_v,
        hausdorff: hausdorff_v,
    })
}
