//! Canny edge extraction on single slices.
//!
//! The classic pipeline: Gaussian smoothing, Sobel gradients, non-maximum
//! suppression along the quantized gradient direction, then double
//! thresholding with hysteresis. Thresholds are specified as *fractions of
//! the maximum gradient magnitude*, which makes the detector invariant to
//! positive rescaling of the input — the same slice at a different
//! normalization yields the same edge set.
//!
//! Non-maximum suppression breaks plateau ties asymmetrically (strictly
//! greater than the preceding neighbor, at least equal to the following
//! one), so an ideal two-pixel-wide blurred step keeps exactly one crest
//! pixel per row instead of zero or two.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernels::{gaussian_blur2, sobel_gradients};

/// Detector parameters; fractions refer to the max gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    pub sigma: f64,
    pub low_frac: f64,
    pub high_frac: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            sigma: 1.0,
            low_frac: 0.1,
            high_frac: 0.2,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "canny sigma {} must be positive",
                self.sigma
            )));
        }
        if !(0.0 < self.low_frac && self.low_frac <= self.high_frac && self.high_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "canny thresholds {}/{} must satisfy 0 < low <= high < 1",
                self.low_frac, self.high_frac
            )));
        }
        Ok(())
    }
}

/// Edge pixels of one slice, sorted by `(y, x)` for canonical comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub shape: (usize, usize),
    pub points: Vec<(usize, usize)>,
}

impl EdgeSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Runs the detector on one slice. A gradient-free (constant) image yields
/// an empty edge set rather than an error.
pub fn canny_edges(img: &Array2<f64>, cfg: &CannyConfig) -> Result<EdgeSet> {
    cfg.validate()?;
    let (h, w) = img.dim();
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} too small for edge detection"
        )));
    }
    let smooth = gaussian_blur2(img, cfg.sigma);
    let (gy, gx) = sobel_gradients(&smooth);
    let mut mag = Array2::<f64>::zeros((h, w));
    let mut gmax = 0.0f64;
    for ((m, a), b) in mag.iter_mut().zip(gy.iter()).zip(gx.iter()) {
        *m = (a * a + b * b).sqrt();
        gmax = gmax.max(*m);
    }
    if gmax == 0.0 {
        return Ok(EdgeSet {
            shape: (h, w),
            points: Vec::new(),
        });
    }

    // non-maximum suppression along the quantized gradient direction
    let mut crest = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g = mag[[y, x]];
            if g == 0.0 {
                continue;
            }
            // sector from the gradient angle: 0 → E/W, 1 → NE/SW, 2 → N/S,
            // 3 → NW/SE (image coordinates, y growing downward)
            let angle = gy[[y, x]].atan2(gx[[y, x]]);
            let sector = (((angle + std::f64::consts::PI) / (std::f64::consts::PI / 4.0))
                .round() as usize)
                % 4;
            let (dy, dx) = match sector {
                0 => (0isize, 1isize),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let before = (y as isize - dy, x as isize - dx);
            let after = (y as isize + dy, x as isize + dx);
            let sample = |(sy, sx): (isize, isize)| -> f64 {
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    // outside the image there is no competitor
                    f64::NEG_INFINITY
                } else {
                    mag[[sy as usize, sx as usize]]
                }
            };
            if g > sample(before) && g >= sample(after) {
                crest[[y, x]] = 1;
            }
        }
    }

    let t_low = cfg.low_frac * gmax;
    let t_high = cfg.high_frac * gmax;
    // 0 = out, 1 = weak candidate, 2 = strong seed
    let mut class = Array2::<u8>::zeros((h, w));
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if crest[[y, x]] == 1 {
                let g = mag[[y, x]];
                if g >= t_high {
                    class[[y, x]] = 2;
                    stack.push((y, x));
                } else if g >= t_low {
                    class[[y, x]] = 1;
                }
            }
        }
    }
    // hysteresis: weak candidates joined 8-connected to a strong seed survive
    let mut keep = Array2::<u8>::zeros((h, w));
    while let Some((y, x)) = stack.pop() {
        if keep[[y, x]] == 1 {
            continue;
        }
        keep[[y, x]] = 1;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if keep[[ny, nx]] == 0 && class[[ny, nx]] >= 1 {
                    stack.push((ny, nx));
                }
            }
        }
    }

    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if keep[[y, x]] == 1 {
                points.push((y, x));
            }
        }
    }
    Ok(EdgeSet {
        shape: (h, w),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(h: usize, w: usize, at: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(_, x)| if x < at { lo } else { hi })
    }

    #[test]
    fn vertical_step_yields_one_crest_column() {
        let img = step_image(12, 20, 8, 0.1, 0.9);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        assert!(!e.is_empty());
        let xs: std::collections::BTreeSet<usize> = e.points.iter().map(|p| p.1).collect();
        assert_eq!(xs.len(), 1, "edge must be one pixel wide, got {xs:?}");
        let x = *xs.iter().next().unwrap();
        assert!(x == 7 || x == 8, "crest at column {x}");
        // one point per row
        assert_eq!(e.len(), 12);
    }

    #[test]
    fn detection_is_invariant_to_positive_rescaling() {
        let img = step_image(10, 16, 6, 0.2, 0.7);
        let cfg = CannyConfig::default();
        let a = canny_edges(&img, &cfg).unwrap();
        let b = canny_edges(&img.mapv(|v| v * 37.5), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Array2::from_elem((10, 10), 0.4);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        assert!(e.is_empty());
    }

    #[test]
    fn horizontal_step_is_found_too() {
        let img = Array2::from_shape_fn((20, 12), |(y, _)| if y < 10 { 0.0 } else { 1.0 });
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        let ys: std::collections::BTreeSet<usize> = e.points.iter().map(|p| p.0).collect();
        assert_eq!(ys.len(), 1);
        let y = *ys.iter().next().unwrap();
        assert!(y == 9 || y == 10);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let img = step_image(8, 8, 4, 0.0, 1.0);
        for cfg in [
            CannyConfig {
                sigma: 0.0,
                ..Default::default()
            },
            CannyConfig {
                low_frac: 0.3,
                high_frac: 0.2,
                sigma: 1.0,
            },
            CannyConfig {
                low_frac: 0.0,
                ..Default::default()
            },
        ] {
            assert!(canny_edges(&img, &cfg).is_err(), "{cfg:?}");
        }
    }
}
