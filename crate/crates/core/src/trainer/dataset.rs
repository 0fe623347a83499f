//! Paired training cases and the slice-window sampling schedule.
//!
//! A case is one low/full dose volume pair brought onto the full-dose
//! volume's min–max scale. Batches are *windows of contiguous axial
//! slices* — the through-plane structural penalty needs a coherent z-stack,
//! so a batch is never a grab-bag of slices from different positions.
//! Each epoch visits every window of every case once, in an order drawn
//! from a generator seeded by `(seed, epoch)` alone; schedules are
//! therefore reproducible without carrying generator state across epochs,
//! which keeps checkpoint resume exact.
//!
//! Spatial crops (one rectangle shared by all slices of a window) are
//! drawn against the head's support bounding box so that training windows
//! mostly contain anatomy instead of empty air.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::SliceContext;
use crate::volume::{min_max_normalize, normalize_with, IntensityScale, Volume};

/// Margin in voxels added around the support box when drawing crops.
const CROP_MARGIN: usize = 4;
/// Normalized intensity below which a voxel counts as empty air.
const SUPPORT_THRESHOLD: f64 = 0.02;

/// One normalized low/full pair ready for training.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub name: String,
    /// Full-dose volume on its own min–max scale.
    pub full: Array3<f64>,
    /// Low-dose volume on the *full-dose* scale, clamped to `[0, 1]`.
    pub low: Array3<f64>,
    pub scale: IntensityScale,
    /// Inclusive `(y, x)` bounds of the non-air support, over all slices.
    support: ((usize, usize), (usize, usize)),
}

impl TrainCase {
    /// Normalizes a pair onto the full-dose scale. Shapes must match.
    pub fn from_volumes(name: &str, full: &Volume, low: &Volume) -> Result<TrainCase> {
        if full.shape() != low.shape() {
            return Err(Error::ShapeMismatch {
                context: "pairing dose levels",
                a: full.shape().to_vec(),
                b: low.shape().to_vec(),
            });
        }
        let (full_n, scale) = min_max_normalize(full)?;
        let low_n = normalize_with(low, &scale, true)?;
        let full_a = full_n.to_f64();
        let low_a = low_n.to_f64();
        let support = support_bounds(&full_a);
        Ok(TrainCase {
            name: name.to_string(),
            full: full_a,
            low: low_a,
            scale,
            support,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.full.dim()
    }
}

/// Tight `(y, x)` bounding box of above-threshold voxels; the whole plane
/// when the volume is empty.
fn support_bounds(v: &Array3<f64>) -> ((usize, usize), (usize, usize)) {
    let (_, ny, nx) = v.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (ny, 0usize, nx, 0usize);
    for ((_, y, x), &val) in v.indexed_iter() {
        if val > SUPPORT_THRESHOLD {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if y0 > y1 {
        ((0, ny - 1), (0, nx - 1))
    } else {
        ((y0, y1), (x0, x1))
    }
}

/// One training window: a contiguous slice range of one case plus the
/// spatial crop shared by all its slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub case_idx: usize,
    pub z0: usize,
    pub y0: usize,
    pub x0: usize,
}

fn window_starts(nz: usize, batch: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * batch).take_while(|s| s + batch <= nz).collect();
    let last = nz - batch;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Draws one crop origin along one axis, preferring the padded support
/// range but always staying inside the image.
fn crop_origin<R: Rng>(rng: &mut R, lo_sup: usize, hi_sup: usize, n: usize, crop: usize) -> usize {
    let max_origin = n - crop;
    let lo = lo_sup.saturating_sub(CROP_MARGIN).min(max_origin);
    let hi = (hi_sup + CROP_MARGIN).min(n - 1).saturating_sub(crop - 1).max(lo).min(max_origin);
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Builds the shuffled window schedule for one epoch. Deterministic in
/// `(seed, epoch)`; every case must have at least `batch` slices, and
/// crops (when enabled) must fit every case.
pub fn epoch_schedule(
    cases: &[TrainCase],
    batch: usize,
    crop: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<WindowSpec>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let mut windows: Vec<(usize, usize)> = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let (nz, ny, nx) = case.shape();
        if nz < batch {
            return Err(Error::InvalidArgument(format!(
                "case {} has {nz} slices, fewer than the window length {batch}",
                case.name
            )));
        }
        if crop > 0 && (crop > ny || crop > nx) {
            return Err(Error::InvalidArgument(format!(
                "case {} planes {ny}x{nx} cannot host a {crop} crop",
                case.name
            )));
        }
        for z0 in window_starts(nz, batch) {
            windows.push((ci, z0));
        }
    }
    // decorrelate epochs while keeping the schedule a pure function of
    // (seed, epoch)
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    windows.shuffle(&mut rng);
    let specs = windows
        .into_iter()
        .map(|(ci, z0)| {
            let case = &cases[ci];
            let (_, ny, nx) = case.shape();
            let ((sy0, sy1), (sx0, sx1)) = case.support;
            let (y0, x0) = if crop == 0 {
                (0, 0)
            } else {
                (
                    crop_origin(&mut rng, sy0, sy1, ny, crop),
                    crop_origin(&mut rng, sx0, sx1, nx, crop),
                )
            };
            WindowSpec {
                case_idx: ci,
                z0,
                y0,
                x0,
            }
        })
        .collect();
    Ok(specs)
}

/// Fully materialized window: cropped stacks plus per-slice contexts whose
/// neighbors come from the cropped *volume* (not just the window), so only
/// true volume boundaries are edge-replicated.
pub struct WindowBatch {
    /// Full-dose window stack, `(batch, crop_h, crop_w)`.
    pub full: Array3<f64>,
    /// Low-dose window stack, same shape.
    pub low: Array3<f64>,
    pub full_ctx: Vec<SliceContext>,
    pub low_ctx: Vec<SliceContext>,
}

/// Extracts one window from a case.
pub fn load_window(
    case: &TrainCase,
    w: &WindowSpec,
    batch: usize,
    crop: usize,
    k: usize,
) -> Result<WindowBatch> {
    let (nz, ny, nx) = case.shape();
    let (ch, cw) = if crop == 0 { (ny, nx) } else { (crop, crop) };
    if w.z0 + batch > nz || w.y0 + ch > ny || w.x0 + cw > nx {
        return Err(Error::InvalidArgument(format!(
            "window {w:?} does not fit case {} of shape {nz}x{ny}x{nx}",
            case.name
        )));
    }
    let full_vol = case
        .full
        .slice(s![.., w.y0..w.y0 + ch, w.x0..w.x0 + cw])
        .to_owned();
    let low_vol = case
        .low
        .slice(s![.., w.y0..w.y0 + ch, w.x0..w.x0 + cw])
        .to_owned();
    let mut full_ctx = Vec::with_capacity(batch);
    let mut low_ctx = Vec::with_capacity(batch);
    for z in w.z0..w.z0 + batch {
        full_ctx.push(SliceContext::from_stack(&full_vol, z, k)?);
        low_ctx.push(SliceContext::from_stack(&low_vol, z, k)?);
    }
    let full = full_vol.slice(s![w.z0..w.z0 + batch, .., ..]).to_owned();
    let low = low_vol.slice(s![w.z0..w.z0 + batch, .., ..]).to_owned();
    Ok(WindowBatch {
        full,
        low,
        full_ctx,
        low_ctx,
    })
}
