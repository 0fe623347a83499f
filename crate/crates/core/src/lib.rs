//! Cycle-constrained adversarial denoising for low-dose emission volumes.
//!
//! The crate covers the full research loop on synthetic data:
//!
//! * [`phantom`] — ellipsoidal brain phantoms and Poisson low-dose simulation;
//! * [`volume`] — the `CDNVOL1` volume container and normalization;
//! * [`nn`] / [`nets`] — a small `f64` CNN stack with hand-written backprop,
//!   hosting the shared noise predictor, the slice-consistency network and the
//!   two least-squares discriminators;
//! * [`losses`] — adversarial, cycle, identity, supervised and reslice-SSIM
//!   objectives plus the inverse-magnitude dynamic weighting between them;
//! * [`trainer`] — dataset assembly, the alternating optimization loop,
//!   checkpoints, and whole-volume inference;
//! * [`metrics`] — PSNR/SSIM/NRMSE, contrast-to-noise, edge preservation,
//!   Canny edge maps and Hausdorff distance, wrapped into per-case reports.
//!
//! Everything is deterministic given the seeds recorded in configs and
//! metadata: two runs from the same config produce bit-identical artifacts.

pub mod error;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod phantom;
mod ssim;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use phantom::{DoseFraction, PhantomSpec, TumorSpec};
pub use volume::{IntensityScale, Volume};
