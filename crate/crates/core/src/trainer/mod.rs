//! The adversarial training loop.
//!
//! One step over a slice window runs, per slice, five applications of the
//! shared noise predictor:
//!
//! * `fake_full = extract(low)` — the denoised estimate,
//! * `fake_low = add(full)` — the re-noised estimate,
//! * `rec_low = add(fake_full)` and `rec_full = extract(fake_low)` — the
//!   two cycle reconstructions (each hop reuses its origin slice's
//!   neighbor context),
//! * `extract(full)` — the identity check on already-clean input,
//!
//! scores the two translated slices with the domain critics, and combines
//! the enabled loss terms under the current weights. Gradients flow back
//! through every application (including through the critics into the
//! generator, never the reverse) and the generator parameters take one
//! Adam step. The critics then train on the same window — real slices
//! against the detached fakes — with their own optimizer.
//!
//! Term weights re-balance once per epoch, inversely proportional to the
//! epoch-mean magnitude of each enabled term (uniform in the first epoch),
//! so no term is left behind as others shrink.
//!
//! Epoch schedules are pure functions of `(seed, epoch)` and optimizer
//! state lives in checkpoints, which makes an interrupted-and-resumed run
//! bit-identical to an uninterrupted one.

pub mod checkpoint;
pub mod dataset;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::nets::{ContextApp, Direction, ModelConfig, ModelGrads, ModelParams, SliceContext};
use crate::nn::Adam;
use crate::ssim;
use crate::volume::Volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, OptimState};
pub use dataset::{epoch_schedule, load_window, TrainCase, WindowBatch, WindowSpec};

/// Generator loss terms, in log order.
pub const N_LOSS_TERMS: usize = 5;
const TERM_NAMES: [&str; N_LOSS_TERMS] = ["gan", "cyc", "identity", "sup", "ssim_planes"];

const T_GAN: usize = 0;
const T_CYC: usize = 1;
const T_ID: usize = 2;
const T_SUP: usize = 3;
const T_SSIM: usize = 4;

/// Which generator terms participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub gan: bool,
    pub cycle: bool,
    pub identity: bool,
    pub supervised: bool,
    pub ssim_planes: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            gan: true,
            cycle: true,
            identity: true,
            supervised: true,
            ssim_planes: true,
        }
    }
}

impl LossToggles {
    pub fn mask(&self) -> [bool; N_LOSS_TERMS] {
        [
            self.gan,
            self.cycle,
            self.identity,
            self.supervised,
            self.ssim_planes,
        ]
    }

    pub fn enabled_count(&self) -> usize {
        self.mask().iter().filter(|&&m| m).count()
    }
}

/// Everything that defines a run; serializes to/from TOML and rides along
/// in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub losses: LossToggles,
    pub epochs: usize,
    /// Contiguous slices per window; also the z-extent of the through-plane
    /// structural penalty.
    pub batch_size: usize,
    /// Square spatial crop applied per window; 0 trains on full planes.
    pub crop: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Stabilizer in the inverse-magnitude re-weighting; bounds how much
    /// weight a term whose loss collapses to zero can take (the identity
    /// penalty does collapse on clean references).
    pub weight_epsilon: f64,
    /// Epochs trained on the paired and through-plane terms alone before the
    /// full objective engages; 0 starts with every enabled term. The
    /// adversarial, cycle, and identity terms are all minimized by leaving
    /// images untouched, and a zero-initialized predictor starts exactly
    /// there, so a cold start stalls at the identity; a short stretch of
    /// plain residual training moves it into denoising territory first.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub ssim_win: usize,
    /// Central slices scored per validation case each epoch; 0 disables.
    pub val_slices: usize,
    /// Save a rolling checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            losses: LossToggles::default(),
            epochs: 100,
            batch_size: 12,
            crop: 0,
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_epsilon: 0.05,
            warmup_epochs: 8,
            seed: 0,
            ssim_win: 11,
            val_slices: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.losses.enabled_count() == 0 {
            return Err(Error::InvalidArgument(
                "at least one generator loss term must be enabled".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.losses.ssim_planes {
            let need = self.ssim_win.max(3);
            if self.batch_size < need {
                return Err(Error::InvalidArgument(format!(
                    "through-plane penalty needs windows of at least {need} slices, batch size is {}",
                    self.batch_size
                )));
            }
            if self.crop > 0 && self.crop < self.ssim_win {
                return Err(Error::InvalidArgument(format!(
                    "crop {} is smaller than the {}-wide structural window",
                    self.crop, self.ssim_win
                )));
            }
        }
        if self.ssim_win < 3 || self.ssim_win % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "structural window {} must be odd and at least 3",
                self.ssim_win
            )));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 <= v && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {v} must lie in [0, 1)"
                )));
            }
        }
        if !(self.weight_epsilon > 0.0) || !self.weight_epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight_epsilon = {} must be a positive real",
                self.weight_epsilon
            )));
        }
        Ok(())
    }

    /// Generator terms that train during `epoch` (1-based). Warm-up epochs
    /// keep only the paired and through-plane terms; if neither is enabled
    /// the warm-up is moot and every enabled term trains from the start.
    pub fn active_mask(&self, epoch: usize) -> [bool; N_LOSS_TERMS] {
        let mask = self.losses.mask();
        if epoch > self.warmup_epochs {
            return mask;
        }
        let mut warm = [false; N_LOSS_TERMS];
        warm[T_SUP] = mask[T_SUP];
        warm[T_SSIM] = mask[T_SSIM];
        if warm.iter().any(|&m| m) {
            warm
        } else {
            mask
        }
    }
}

/// Epoch-mean losses and the weights that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Generator term means in log order; disabled terms report 0.
    pub terms: [f64; N_LOSS_TERMS],
    /// Low-dose critic loss mean.
    pub disc_low: f64,
    /// Full-dose critic loss mean.
    pub disc_full: f64,
    /// Weights in force during this epoch; disabled terms report 0.
    pub lambdas: [f64; N_LOSS_TERMS],
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,gan,cyc,identity,sup,ssim_planes,disc_O,disc_U,lambda_G,lambda_C,lambda_I,lambda_P,lambda_S";

    /// One CSV row; float formatting is Rust's shortest round-trip form, so
    /// equal records always render to equal bytes.
    pub fn csv_line(&self) -> String {
        let t = &self.terms;
        let l = &self.lambdas;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            t[0],
            t[1],
            t[2],
            t[3],
            t[4],
            self.disc_low,
            self.disc_full,
            l[0],
            l[1],
            l[2],
            l[3],
            l[4]
        )
    }
}

/// Held-out quality probe for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl ValRecord {
    pub const CSV_HEADER: &'static str = "epoch,psnr,ssim";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.psnr, self.ssim)
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn new<P: AsRef<Path>>(dir: P) -> Result<RunOutputs> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(RunOutputs {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }

    pub fn val_log(&self) -> PathBuf {
        self.dir.join("val_log.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "{header}")?;
        }
        writeln!(f, "{line}")?;
        Ok(())
    }
}

struct StepLosses {
    terms: [f64; N_LOSS_TERMS],
    disc_low: f64,
    disc_full: f64,
}

/// The training loop's full in-memory state.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    optim: OptimState,
    lambdas: [f64; N_LOSS_TERMS],
    next_epoch: usize,
    records: Vec<EpochRecord>,
    val_records: Vec<ValRecord>,
}

impl Trainer {
    /// Fresh state: parameters drawn from the config seed, uniform weights.
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(config.model.clone(), &mut rng)?;
        let optim = OptimState {
            predictor: Adam::new(
                config.lr_g,
                config.beta1,
                config.beta2,
                params.predictor.n_params(),
            ),
            consistency: params
                .consistency
                .as_ref()
                .map(|n| Adam::new(config.lr_g, config.beta1, config.beta2, n.n_params())),
            fusion: params
                .fusion
                .as_ref()
                .map(|n| Adam::new(config.lr_g, config.beta1, config.beta2, n.n_params())),
            disc_full: Adam::new(
                config.lr_d,
                config.beta1,
                config.beta2,
                params.disc_full.n_params(),
            ),
            disc_low: Adam::new(
                config.lr_d,
                config.beta1,
                config.beta2,
                params.disc_low.n_params(),
            ),
        };
        let lambdas = uniform_lambdas(config.active_mask(1));
        Ok(Trainer {
            config,
            params,
            optim,
            lambdas,
            next_epoch: 1,
            records: Vec::new(),
            val_records: Vec::new(),
        })
    }

    /// Continues a saved run exactly where it stopped.
    pub fn from_checkpoint(path: &Path) -> Result<Trainer> {
        let state = load_checkpoint(path)?;
        Ok(Trainer {
            config: state.config,
            params: state.params,
            optim: state.optim,
            lambdas: state.lambdas,
            next_epoch: state.next_epoch,
            records: Vec::new(),
            val_records: Vec::new(),
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn val_records(&self) -> &[ValRecord] {
        &self.val_records
    }

    /// Extends a finished run; rejects shrinking below completed epochs.
    pub fn set_total_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs + 1 < self.next_epoch {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink a run already {} epochs in to {epochs}",
                self.next_epoch - 1
            )));
        }
        self.config.epochs = epochs;
        Ok(())
    }

    /// Runs every remaining epoch; `on_epoch` fires after each one.
    pub fn run(
        &mut self,
        cases: &[TrainCase],
        val_cases: &[TrainCase],
        out: Option<&RunOutputs>,
        mut on_epoch: Option<&mut dyn FnMut(&EpochRecord, Option<&ValRecord>)>,
    ) -> Result<()> {
        while self.next_epoch <= self.config.epochs {
            let record = self.run_one_epoch(cases)?;
            let val = if self.config.val_slices > 0 && !val_cases.is_empty() {
                Some(self.validate(val_cases, record.epoch)?)
            } else {
                None
            };
            if let Some(out) = out {
                RunOutputs::append_line(&out.loss_log(), EpochRecord::CSV_HEADER, &record.csv_line())?;
                if let Some(v) = &val {
                    RunOutputs::append_line(&out.val_log(), ValRecord::CSV_HEADER, &v.csv_line())?;
                }
                let every = self.config.checkpoint_every;
                let done = record.epoch == self.config.epochs;
                if done || (every > 0 && record.epoch % every == 0) {
                    save_checkpoint(&out.checkpoint(), &self.checkpoint_state())?;
                }
            }
            if let Some(cb) = on_epoch.as_deref_mut() {
                cb(&record, val.as_ref());
            }
            self.records.push(record);
            if let Some(v) = val {
                self.val_records.push(v);
            }
        }
        Ok(())
    }

    /// One pass over every window of every case.
    pub fn run_one_epoch(&mut self, cases: &[TrainCase]) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        let cfg = &self.config;
        let schedule = epoch_schedule(cases, cfg.batch_size, cfg.crop, cfg.seed, epoch)?;
        let mask = cfg.active_mask(epoch);

        let mut term_sums = [0.0f64; N_LOSS_TERMS];
        let mut dl_sum = 0.0f64;
        let mut df_sum = 0.0f64;
        for (step, w) in schedule.iter().enumerate() {
            let batch = load_window(
                &cases[w.case_idx],
                w,
                self.config.batch_size,
                self.config.crop,
                self.config.model.neighbor_k,
            )?;
            let losses = self.train_step(&batch)?;
            for (t, v) in losses.terms.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        term: TERM_NAMES[t],
                    });
                }
                term_sums[t] += v;
            }
            if !losses.disc_low.is_finite() || !losses.disc_full.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    term: "critic",
                });
            }
            dl_sum += losses.disc_low;
            df_sum += losses.disc_full;
        }

        let n = schedule.len() as f64;
        let mut terms = [0.0; N_LOSS_TERMS];
        for t in 0..N_LOSS_TERMS {
            terms[t] = term_sums[t] / n;
        }
        let record = EpochRecord {
            epoch,
            terms,
            disc_low: dl_sum / n,
            disc_full: df_sum / n,
            lambdas: self.lambdas,
        };

        // re-balance for the next epoch from this epoch's mean magnitudes;
        // when the active set changes (end of warm-up) there are no matching
        // means yet, so the new set starts uniform like epoch one
        let next_mask = self.config.active_mask(epoch + 1);
        self.lambdas = if next_mask == mask {
            let active: Vec<f64> = (0..N_LOSS_TERMS)
                .filter(|&t| mask[t])
                .map(|t| terms[t])
                .collect();
            let fresh = losses::update_weights_eps(&active, self.config.weight_epsilon)?;
            let mut li = 0;
            let mut lambdas = [0.0; N_LOSS_TERMS];
            for (t, lam) in lambdas.iter_mut().enumerate() {
                if mask[t] {
                    *lam = fresh[li];
                    li += 1;
                }
            }
            lambdas
        } else {
            uniform_lambdas(next_mask)
        };
        self.next_epoch = epoch + 1;
        Ok(record)
    }

    /// Scores the central validation slices: PSNR and in-plane structural
    /// similarity of the denoised estimate against the clean reference.
    pub fn validate(&self, val_cases: &[TrainCase], epoch: usize) -> Result<ValRecord> {
        let k = self.config.model.neighbor_k;
        let win = self.config.ssim_win;
        let mut jobs: Vec<(&TrainCase, usize)> = Vec::new();
        for case in val_cases {
            let (nz, _, _) = case.shape();
            let n = self.config.val_slices.min(nz);
            let z0 = (nz - n) / 2;
            for z in z0..z0 + n {
                jobs.push((case, z));
            }
        }
        let scored: Vec<(f64, f64)> = jobs
            .par_iter()
            .map(|(case, z)| -> Result<(f64, f64)> {
                let ctx = SliceContext::from_stack(&case.low, *z, k)?;
                let den = self.params.denoise_slice(&ctx)?;
                let clean = case.full.index_axis(Axis(0), *z).to_owned();
                let n = den.len() as f64;
                let mse = den
                    .iter()
                    .zip(clean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / n;
                let psnr = if mse == 0.0 {
                    f64::INFINITY
                } else {
                    10.0 * (1.0 / mse).log10()
                };
                let (s, _) = ssim::ssim_mean_grad(&den, &clean, win, ssim::DEFAULT_SIGMA, false)?;
                Ok((psnr, s))
            })
            .collect::<Result<_>>()?;
        let n = scored.len() as f64;
        Ok(ValRecord {
            epoch,
            psnr: scored.iter().map(|s| s.0).sum::<f64>() / n,
            ssim: scored.iter().map(|s| s.1).sum::<f64>() / n,
        })
    }

    pub fn checkpoint_state(&self) -> CheckpointState {
        CheckpointState {
            config: self.config.clone(),
            next_epoch: self.next_epoch,
            lambdas: self.lambdas,
            params: self.params.clone(),
            optim: OptimState {
                predictor: self.optim.predictor.clone(),
                consistency: self.optim.consistency.clone(),
                fusion: self.optim.fusion.clone(),
                disc_full: self.optim.disc_full.clone(),
                disc_low: self.optim.disc_low.clone(),
            },
        }
    }

    /// One optimization step over a window: generator first, then critics.
    fn train_step(&mut self, batch: &WindowBatch) -> Result<StepLosses> {
        let mask = self.config.active_mask(self.next_epoch);
        let lam = self.lambdas;
        let b = batch.full_ctx.len();
        let (bz, h, w) = batch.full.dim();
        debug_assert_eq!(b, bz);
        let n_pix = (h * w) as f64;

        // the denoised slice is always needed; the re-noised one only by
        // the adversarial, cycle, and paired terms
        let need_fl = mask[T_GAN] || mask[T_CYC] || mask[T_SUP];

        struct SliceWork {
            ctx_o: Option<ContextApp>,
            ctx_u: Option<ContextApp>,
            app_ff: crate::nets::PredictorApp,
            app_fl: Option<crate::nets::PredictorApp>,
            app_rl: Option<crate::nets::PredictorApp>,
            app_rf: Option<crate::nets::PredictorApp>,
            app_id: Option<crate::nets::PredictorApp>,
            disc_ff: Option<crate::nets::DiscApp>,
            disc_fl: Option<crate::nets::DiscApp>,
        }

        // ---- forward ----
        let mut work: Vec<SliceWork> = Vec::with_capacity(b);
        let mut terms = [0.0f64; N_LOSS_TERMS];
        for i in 0..b {
            let o = &batch.low_ctx[i];
            let u = &batch.full_ctx[i];
            let ctx_o = self.params.context_app(o)?;
            let ctx_u = self.params.context_app(u)?;
            let map_o = ctx_o.as_ref().map(|a| &a.map);
            let map_u = ctx_u.as_ref().map(|a| &a.map);

            let app_ff = self
                .params
                .predictor_app(&o.target, map_o, Direction::Extract)?;
            let app_fl = if need_fl {
                Some(self.params.predictor_app(&u.target, map_u, Direction::Add)?)
            } else {
                None
            };
            let app_rl = if mask[T_CYC] {
                Some(
                    self.params
                        .predictor_app(&app_ff.out, map_o, Direction::Add)?,
                )
            } else {
                None
            };
            let app_rf = if mask[T_CYC] {
                let fl = app_fl.as_ref().expect("cycle implies re-noised slice");
                Some(
                    self.params
                        .predictor_app(&fl.out, map_u, Direction::Extract)?,
                )
            } else {
                None
            };
            let app_id = if mask[T_ID] {
                Some(
                    self.params
                        .predictor_app(&u.target, map_u, Direction::Extract)?,
                )
            } else {
                None
            };
            let (disc_ff, disc_fl) = if mask[T_GAN] {
                let fl = app_fl.as_ref().expect("adversarial term implies both fakes");
                (
                    Some(self.params.disc_app(&self.params.disc_full, &app_ff.out)?),
                    Some(self.params.disc_app(&self.params.disc_low, &fl.out)?),
                )
            } else {
                (None, None)
            };

            if mask[T_GAN] {
                terms[T_GAN] += losses::gen_gan_loss(
                    disc_fl.as_ref().unwrap().score,
                    disc_ff.as_ref().unwrap().score,
                ) / b as f64;
            }
            if mask[T_CYC] {
                terms[T_CYC] += losses::cycle_loss(
                    &app_rf.as_ref().unwrap().out,
                    &u.target,
                    &app_rl.as_ref().unwrap().out,
                    &o.target,
                )? / b as f64;
            }
            if mask[T_ID] {
                terms[T_ID] +=
                    losses::identity_loss(&app_id.as_ref().unwrap().out, &u.target)? / b as f64;
            }
            if mask[T_SUP] {
                terms[T_SUP] += losses::supervised_loss(
                    &app_fl.as_ref().unwrap().out,
                    &o.target,
                    &app_ff.out,
                    &u.target,
                )? / b as f64;
            }
            work.push(SliceWork {
                ctx_o,
                ctx_u,
                app_ff,
                app_fl,
                app_rl,
                app_rf,
                app_id,
                disc_ff,
                disc_fl,
            });
        }

        // through-plane structural penalty couples the whole window
        let mut ssim_grad: Option<Array3<f64>> = None;
        if mask[T_SSIM] {
            let mut fake_stack = Array3::<f64>::zeros((b, h, w));
            for (i, sw) in work.iter().enumerate() {
                fake_stack
                    .index_axis_mut(Axis(0), i)
                    .assign(&sw.app_ff.out);
            }
            let (loss, grad) =
                losses::plane_ssim_loss_grad(&fake_stack, &batch.full, self.config.ssim_win)?;
            terms[T_SSIM] = loss;
            ssim_grad = Some(grad);
        }

        // ---- generator backward ----
        let mut grads = ModelGrads::zeros_like(&self.params);
        for (i, sw) in work.iter().enumerate() {
            let o = &batch.low_ctx[i];
            let u = &batch.full_ctx[i];
            let mut d_ctx_o = sw.ctx_o.as_ref().map(|_| Array2::<f64>::zeros((h, w)));
            let mut d_ctx_u = sw.ctx_u.as_ref().map(|_| Array2::<f64>::zeros((h, w)));
            let mut d_ff = Array2::<f64>::zeros((h, w));
            let mut d_fl = Array2::<f64>::zeros((h, w));

            if mask[T_CYC] {
                // reconstruction hops first: their input gradients feed the
                // first-hop outputs
                let scale = lam[T_CYC] / (b as f64 * n_pix);
                let rl = sw.app_rl.as_ref().unwrap();
                let d_rl =
                    Array2::from_shape_fn((h, w), |p| scale * sgn0(rl.out[p] - o.target[p]));
                d_ff += &self
                    .params
                    .predictor_backward(rl, &d_rl, &mut grads, d_ctx_o.as_mut());
                let rf = sw.app_rf.as_ref().unwrap();
                let d_rf =
                    Array2::from_shape_fn((h, w), |p| scale * sgn0(rf.out[p] - u.target[p]));
                d_fl += &self
                    .params
                    .predictor_backward(rf, &d_rf, &mut grads, d_ctx_u.as_mut());
            }
            if mask[T_ID] {
                let scale = 2.0 * lam[T_ID] / (b as f64 * n_pix);
                let id = sw.app_id.as_ref().unwrap();
                let d_id = Array2::from_shape_fn((h, w), |p| scale * (id.out[p] - u.target[p]));
                // gradient w.r.t. the clean input slice is data, discarded
                let _ = self
                    .params
                    .predictor_backward(id, &d_id, &mut grads, d_ctx_u.as_mut());
            }
            if mask[T_GAN] {
                // generator learns through frozen critics: their parameter
                // gradients from this pass are simply never applied
                let dff = sw.disc_ff.as_ref().unwrap();
                let d_score = 2.0 * lam[T_GAN] * (dff.score - 1.0) / b as f64;
                let dx = self
                    .params
                    .disc_backward(&self.params.disc_full, dff, d_score, &mut grads.disc_full, true)
                    .expect("need_dx requested");
                d_ff += &dx;
                let dfl = sw.disc_fl.as_ref().unwrap();
                let d_score = 2.0 * lam[T_GAN] * (dfl.score - 1.0) / b as f64;
                let dx = self
                    .params
                    .disc_backward(&self.params.disc_low, dfl, d_score, &mut grads.disc_low, true)
                    .expect("need_dx requested");
                d_fl += &dx;
            }
            if mask[T_SUP] {
                let scale = 2.0 * lam[T_SUP] / (b as f64 * n_pix);
                let fl = sw.app_fl.as_ref().unwrap();
                ndarray::Zip::from(&mut d_fl)
                    .and(&fl.out)
                    .and(&o.target)
                    .for_each(|d, &a, &t| *d += scale * (a - t));
                ndarray::Zip::from(&mut d_ff)
                    .and(&sw.app_ff.out)
                    .and(&u.target)
                    .for_each(|d, &a, &t| *d += scale * (a - t));
            }
            if let Some(g) = &ssim_grad {
                let gi = g.index_axis(Axis(0), i);
                d_ff.zip_mut_with(&gi, |d, &gv| *d += lam[T_SSIM] * gv);
            }

            let _ = self
                .params
                .predictor_backward(&sw.app_ff, &d_ff, &mut grads, d_ctx_o.as_mut());
            if let Some(fl) = &sw.app_fl {
                let _ = self
                    .params
                    .predictor_backward(fl, &d_fl, &mut grads, d_ctx_u.as_mut());
            }
            if let (Some(app), Some(d)) = (&sw.ctx_o, &d_ctx_o) {
                self.params.context_backward(app, d, &mut grads);
            }
            if let (Some(app), Some(d)) = (&sw.ctx_u, &d_ctx_u) {
                self.params.context_backward(app, d, &mut grads);
            }
        }

        self.optim
            .predictor
            .step(&mut self.params.predictor.params, &grads.predictor);
        if let (Some(adam), Some(net)) =
            (self.optim.consistency.as_mut(), self.params.consistency.as_mut())
        {
            adam.step(&mut net.params, &grads.consistency);
        }
        if let (Some(adam), Some(net)) = (self.optim.fusion.as_mut(), self.params.fusion.as_mut()) {
            adam.step(&mut net.params, &grads.fusion);
        }

        // ---- critic step ----
        let mut disc_low_loss = 0.0f64;
        let mut disc_full_loss = 0.0f64;
        if mask[T_GAN] {
            let mut dgrads = ModelGrads::zeros_like(&self.params);
            for (i, sw) in work.iter().enumerate() {
                let o = &batch.low_ctx[i];
                let u = &batch.full_ctx[i];
                // the stored fakes are detached values; the critics re-score
                // real slices fresh (their own weights haven't moved yet)
                let real_f = self.params.disc_app(&self.params.disc_full, &u.target)?;
                let fake_f = sw.disc_ff.as_ref().unwrap();
                disc_full_loss += losses::disc_full_loss(real_f.score, fake_f.score) / b as f64;
                let _ = self.params.disc_backward(
                    &self.params.disc_full,
                    &real_f,
                    2.0 * (real_f.score - 1.0) / b as f64,
                    &mut dgrads.disc_full,
                    false,
                );
                let _ = self.params.disc_backward(
                    &self.params.disc_full,
                    fake_f,
                    2.0 * fake_f.score / b as f64,
                    &mut dgrads.disc_full,
                    false,
                );

                let real_l = self.params.disc_app(&self.params.disc_low, &o.target)?;
                let fake_l = sw.disc_fl.as_ref().unwrap();
                disc_low_loss += losses::disc_low_loss(fake_l.score, real_l.score) / b as f64;
                let _ = self.params.disc_backward(
                    &self.params.disc_low,
                    &real_l,
                    2.0 * (real_l.score - 1.0) / b as f64,
                    &mut dgrads.disc_low,
                    false,
                );
                let _ = self.params.disc_backward(
                    &self.params.disc_low,
                    fake_l,
                    2.0 * fake_l.score / b as f64,
                    &mut dgrads.disc_low,
                    false,
                );
            }
            self.optim
                .disc_full
                .step(&mut self.params.disc_full.params, &dgrads.disc_full);
            self.optim
                .disc_low
                .step(&mut self.params.disc_low.params, &dgrads.disc_low);
        }

        Ok(StepLosses {
            terms,
            disc_low: disc_low_loss,
            disc_full: disc_full_loss,
        })
    }
}

/// Subgradient of `|v|` that is zero at zero — an exact reconstruction
/// must not emit a phantom cycle gradient.
fn sgn0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform weights over the masked terms, zeros elsewhere.
fn uniform_lambdas(mask: [bool; N_LOSS_TERMS]) -> [f64; N_LOSS_TERMS] {
    let n = mask.iter().filter(|&&m| m).count();
    let mut lam = [0.0; N_LOSS_TERMS];
    if n == 0 {
        return lam;
    }
    let uniform = losses::uniform_weights(n);
    let mut li = 0;
    for (t, l) in lam.iter_mut().enumerate() {
        if mask[t] {
            *l = uniform[li];
            li += 1;
        }
    }
    lam
}

/// Denoises a whole normalized volume slice by slice, each slice with its
/// in-volume neighbors.
pub fn denoise_volume(params: &ModelParams, low: &Volume) -> Result<Volume> {
    let stack = low.to_f64();
    let k = params.config.neighbor_k;
    let [nz, ny, nx] = low.shape();
    let slices: Vec<Array2<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| -> Result<Array2<f64>> {
            let ctx = SliceContext::from_stack(&stack, z, k)?;
            params.denoise_slice(&ctx)
        })
        .collect::<Result<_>>()?;
    let mut out = Array3::<f32>::zeros((nz, ny, nx));
    for (z, s) in slices.iter().enumerate() {
        out.index_axis_mut(Axis(0), z).assign(&s.mapv(|v| v as f32));
    }
    let mut meta = low.meta.clone();
    meta.insert("kind".to_string(), "denoised".to_string());
    Volume::new(out, low.spacing, meta)
}

/// The ablation grid: each variant is a pure config transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    WithoutSupervised,
    OnlySupervised,
    WithoutNeighbors,
    NetworkFuse,
    WithoutSsim,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 6] {
        [
            AblationVariant::Full,
            AblationVariant::WithoutSupervised,
            AblationVariant::OnlySupervised,
            AblationVariant::WithoutNeighbors,
            AblationVariant::NetworkFuse,
            AblationVariant::WithoutSsim,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutSupervised => "no_sup",
            AblationVariant::OnlySupervised => "only_sup",
            AblationVariant::WithoutNeighbors => "no_neighbors",
            AblationVariant::NetworkFuse => "net_fuse",
            AblationVariant::WithoutSsim => "no_ssim",
        }
    }

    pub fn parse(label: &str) -> Result<AblationVariant> {
        AblationVariant::all()
            .into_iter()
            .find(|v| v.label() == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant {label}")))
    }

    /// Applies the variant to a base configuration.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WithoutSupervised => cfg.losses.supervised = false,
            AblationVariant::OnlySupervised => {
                cfg.losses = LossToggles {
                    gan: false,
                    cycle: false,
                    identity: false,
                    supervised: true,
                    ssim_planes: false,
                };
            }
            AblationVariant::WithoutNeighbors => cfg.model.neighbor_k = 0,
            AblationVariant::NetworkFuse => cfg.model.fuse_mode = crate::nets::FuseMode::Network,
            AblationVariant::WithoutSsim => cfg.losses.ssim_planes = false,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            predictor_depth: 3,
            predictor_width: 6,
            consistency_width: 4,
            disc_base_width: 6,
            disc_layers: 2,
            neighbor_k: 1,
            ..Default::default()
        }
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            model: toy_model(),
            epochs,
            batch_size: 6,
            crop: 0,
            ssim_win: 5,
            seed: 21,
            val_slices: 1,
            warmup_epochs: 0,
            ..Default::default()
        }
    }

    fn toy_cases(n: usize, nz: usize, hw: usize, seed: u64) -> Vec<TrainCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let clean = Array3::from_shape_fn((nz, hw, hw), |(z, y, x)| {
                    let cy = (y as f64 - hw as f64 / 2.0) / (hw as f64 / 2.5);
                    let cx = (x as f64 - hw as f64 / 2.0) / (hw as f64 / 2.5);
                    let cz = (z as f64 - nz as f64 / 2.0) / (nz as f64 / 1.8);
                    if cy * cy + cx * cx + cz * cz < 1.0 {
                        0.7
                    } else {
                        0.05
                    }
                });
                let noisy = clean.mapv(|v| (v + rng.gen_range(-0.15f64..0.15)).clamp(0.0, 1.0));
                let to_vol = |a: &Array3<f64>| {
                    Volume::new(a.mapv(|v| v as f32), [1.0; 3], BTreeMap::new()).unwrap()
                };
                TrainCase::from_volumes(&format!("toy{i}"), &to_vol(&clean), &to_vol(&noisy))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn supervised_only_training_reduces_the_loss() {
        let mut cfg = AblationVariant::OnlySupervised.apply(&toy_config(8));
        cfg.lr_g = 2e-3;
        let cases = toy_cases(2, 12, 20, 1);
        let mut tr = Trainer::new(cfg).unwrap();
        tr.run(&cases, &[], None, None).unwrap();
        let first = tr.records().first().unwrap().terms[T_SUP];
        let last = tr.records().last().unwrap().terms[T_SUP];
        assert!(
            last < 0.6 * first,
            "supervised loss should fall clearly: {first} → {last}"
        );
    }

    #[test]
    fn zero_learning_rate_freezes_all_parameters() {
        let mut cfg = toy_config(1);
        cfg.lr_g = 0.0;
        cfg.lr_d = 0.0;
        let cases = toy_cases(1, 12, 16, 2);
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.checkpoint_state();
        tr.run(&cases, &[], None, None).unwrap();
        assert_eq!(tr.params.predictor.params, before.params.predictor.params);
        assert_eq!(
            tr.params.consistency.as_ref().unwrap().params,
            before.params.consistency.as_ref().unwrap().params
        );
        assert_eq!(tr.params.disc_full.params, before.params.disc_full.params);
        assert_eq!(tr.params.disc_low.params, before.params.disc_low.params);
    }

    #[test]
    fn generator_and_critic_updates_do_not_cross() {
        // with the critic frozen (lr_d = 0) the generator still moves, and
        // vice versa — the two phases touch disjoint parameter sets
        let cases = toy_cases(1, 12, 16, 3);

        let mut cfg = toy_config(1);
        cfg.lr_d = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.checkpoint_state();
        tr.run(&cases, &[], None, None).unwrap();
        assert_ne!(tr.params.predictor.params, before.params.predictor.params);
        assert_eq!(tr.params.disc_full.params, before.params.disc_full.params);
        assert_eq!(tr.params.disc_low.params, before.params.disc_low.params);

        let mut cfg = toy_config(1);
        cfg.lr_g = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.checkpoint_state();
        tr.run(&cases, &[], None, None).unwrap();
        assert_eq!(tr.params.predictor.params, before.params.predictor.params);
        assert_ne!(tr.params.disc_full.params, before.params.disc_full.params);
        assert_ne!(tr.params.disc_low.params, before.params.disc_low.params);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let cases = toy_cases(2, 12, 16, 4);
        let run = || {
            let mut tr = Trainer::new(toy_config(2)).unwrap();
            tr.run(&cases, &[], None, None).unwrap();
            (
                tr.records().to_vec(),
                tr.params.predictor.params.clone(),
            )
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn resumed_run_matches_straight_run_exactly() {
        let cases = toy_cases(1, 12, 16, 5);
        let val = toy_cases(1, 12, 16, 6);
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();

        // straight: 4 epochs in one go
        let out_a = RunOutputs::new(dir_a.path()).unwrap();
        let mut tr = Trainer::new(toy_config(4)).unwrap();
        tr.run(&cases, &val, Some(&out_a), None).unwrap();
        let straight_params = tr.params.predictor.params.clone();

        // split: 2 epochs, checkpoint, resume for 2 more
        let out_b = RunOutputs::new(dir_b.path()).unwrap();
        let mut cfg = toy_config(4);
        cfg.epochs = 2;
        let mut tr1 = Trainer::new(cfg).unwrap();
        tr1.run(&cases, &val, Some(&out_b), None).unwrap();
        let mut tr2 = Trainer::from_checkpoint(&out_b.checkpoint()).unwrap();
        tr2.set_total_epochs(4).unwrap();
        tr2.run(&cases, &val, Some(&out_b), None).unwrap();

        assert_eq!(straight_params, tr2.params.predictor.params);
        let log_a = fs::read_to_string(out_a.loss_log()).unwrap();
        let log_b = fs::read_to_string(out_b.loss_log()).unwrap();
        assert_eq!(log_a, log_b, "loss logs must match byte for byte");
        let val_a = fs::read_to_string(out_a.val_log()).unwrap();
        let val_b = fs::read_to_string(out_b.val_log()).unwrap();
        assert_eq!(val_a, val_b);
    }

    #[test]
    fn loss_log_lines_have_the_documented_shape() {
        let cases = toy_cases(1, 12, 16, 7);
        let dir = tempdir().unwrap();
        let out = RunOutputs::new(dir.path()).unwrap();
        let mut tr = Trainer::new(toy_config(1)).unwrap();
        tr.run(&cases, &[], Some(&out), None).unwrap();
        let log = fs::read_to_string(out.loss_log()).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next().unwrap(), EpochRecord::CSV_HEADER);
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], "1");
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
    }

    #[test]
    fn ablation_variants_only_touch_their_knob() {
        let base = toy_config(3);
        for v in AblationVariant::all() {
            let cfg = v.apply(&base);
            cfg.validate().unwrap();
            assert_eq!(AblationVariant::parse(v.label()).unwrap(), v);
            match v {
                AblationVariant::Full => assert_eq!(cfg, base),
                AblationVariant::WithoutSupervised => {
                    assert!(!cfg.losses.supervised);
                    assert!(cfg.losses.gan && cfg.losses.cycle);
                }
                AblationVariant::OnlySupervised => {
                    assert_eq!(cfg.losses.enabled_count(), 1);
                    assert!(cfg.losses.supervised);
                }
                AblationVariant::WithoutNeighbors => assert_eq!(cfg.model.neighbor_k, 0),
                AblationVariant::NetworkFuse => {
                    assert_eq!(cfg.model.fuse_mode, crate::nets::FuseMode::Network)
                }
                AblationVariant::WithoutSsim => assert!(!cfg.losses.ssim_planes),
            }
        }
    }

    #[test]
    fn training_without_neighbors_works() {
        let cfg = AblationVariant::WithoutNeighbors.apply(&toy_config(1));
        let cases = toy_cases(1, 12, 16, 8);
        let mut tr = Trainer::new(cfg).unwrap();
        assert!(tr.params.consistency.is_none());
        tr.run(&cases, &[], None, None).unwrap();
    }

    #[test]
    fn epoch_weights_rebalance_toward_small_terms() {
        let cases = toy_cases(1, 12, 16, 9);
        let mut tr = Trainer::new(toy_config(2)).unwrap();
        tr.run(&cases, &[], None, None).unwrap();
        let r0 = &tr.records()[0];
        let r1 = &tr.records()[1];
        // first epoch: uniform over the five enabled terms
        for l in r0.lambdas {
            assert!((l - 0.2).abs() < 1e-12);
        }
        // second epoch: weights ordered inversely to first-epoch losses
        let sum: f64 = r1.lambdas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for a in 0..N_LOSS_TERMS {
            for bi in 0..N_LOSS_TERMS {
                if r0.terms[a] < r0.terms[bi] {
                    assert!(
                        r1.lambdas[a] > r1.lambdas[bi],
                        "smaller loss must earn larger weight"
                    );
                }
            }
        }
    }

    #[test]
    fn warmup_epochs_train_only_the_paired_terms() {
        let cases = toy_cases(1, 12, 16, 9);
        let mut cfg = toy_config(3);
        cfg.warmup_epochs = 2;
        let mut tr = Trainer::new(cfg).unwrap();
        tr.run(&cases, &[], None, None).unwrap();

        let warm = &tr.records()[0];
        for t in [T_GAN, T_CYC, T_ID] {
            assert_eq!(warm.terms[t], 0.0, "idle term must not be evaluated");
            assert_eq!(warm.lambdas[t], 0.0, "idle term must carry no weight");
        }
        assert!((warm.lambdas[T_SUP] - 0.5).abs() < 1e-12);
        assert!((warm.lambdas[T_SSIM] - 0.5).abs() < 1e-12);
        assert_eq!(warm.disc_low, 0.0, "critics rest during the warm-up");

        // second warm-up epoch re-balances over the two active terms
        let w2 = &tr.records()[1];
        assert!(w2.lambdas[T_SUP] > 0.0 && w2.lambdas[T_SSIM] > 0.0);
        assert!((w2.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        // first full epoch starts uniform over all five, critics wake up
        let full = &tr.records()[2];
        for l in full.lambdas {
            assert!((l - 0.2).abs() < 1e-12);
        }
        for v in full.terms {
            assert!(v > 0.0);
        }
        assert!(full.disc_low > 0.0 && full.disc_full > 0.0);
    }

    #[test]
    fn denoised_volume_keeps_shape_and_tags_itself() {
        let cases = toy_cases(1, 12, 16, 10);
        let tr = Trainer::new(toy_config(1)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "phantom-low".to_string());
        let low = Volume::new(
            cases[0].low.mapv(|v| v as f32),
            [2.0, 2.0, 2.0],
            meta,
        )
        .unwrap();
        let den = denoise_volume(&tr.params, &low).unwrap();
        assert_eq!(den.shape(), low.shape());
        assert_eq!(den.spacing, [2.0, 2.0, 2.0]);
        assert_eq!(den.meta.get("kind").unwrap(), "denoised");
        // freshly initialized model is the identity map
        assert_eq!(den.data, low.data);
    }
}
