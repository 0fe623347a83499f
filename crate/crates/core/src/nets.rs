//! Model components of the cycle-constrained denoiser.
//!
//! One *noise predictor* serves both directions of the cycle: it sees a fused
//! target slice plus a constant direction channel and emits a noise map `n`.
//! Denoising computes `clamp(x − n, 0, 1)`, re-noising `clamp(x + n, 0, 1)`;
//! the two maps share every parameter and differ only through the direction
//! channel. A small *consistency network* summarizes the `2k` neighboring
//! slices of the target into a context map that is fused into the predictor
//! input — either by plain addition or through a learnable 1-output 3×3
//! fusion conv initialized to reproduce the addition exactly. Two
//! least-squares discriminators score slices as belonging to the full-dose
//! or low-dose domain; their scalar score is the mean over the patch
//! response map.
//!
//! The predictor and consistency networks end in zero-initialized layers, so
//! a freshly built model is exactly the identity in both directions — the
//! residual formulation starts from "predict no noise".
//!
//! Besides the inference entry points, this module exposes cached forward
//! passes ([`ModelParams::denoise_app`] and friends) whose backward halves
//! accumulate into a [`ModelGrads`]; the trainer composes them into the full
//! multi-term objective.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, BlockSpec, FwdCache, NetSpec, Network, Tensor};

/// Which way the shared predictor is being applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Remove predicted noise: `clamp(x − n)`.
    Extract,
    /// Inject predicted noise: `clamp(x + n)`.
    Add,
}

impl Direction {
    fn channel_value(self) -> f64 {
        match self {
            Direction::Extract => 0.0,
            Direction::Add => 1.0,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Extract => -1.0,
            Direction::Add => 1.0,
        }
    }
}

/// How the neighbor context map joins the target slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// `fused = target + context`.
    ElementwiseAdd,
    /// Learnable 3×3 conv over `[target, context]`, initialized to add.
    Network,
}

/// Architecture hyperparameters of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Conv blocks in the noise predictor (first and last included).
    pub predictor_depth: usize,
    pub predictor_width: usize,
    pub consistency_width: usize,
    pub disc_base_width: usize,
    /// Conv layers in each discriminator; all but the last are stride-2.
    pub disc_layers: usize,
    /// Neighbor slices on each side feeding the consistency network.
    pub neighbor_k: usize,
    pub fuse_mode: FuseMode,
    /// Whether the predictor receives the direction channel.
    pub direction_channel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            predictor_depth: 8,
            predictor_width: 32,
            consistency_width: 16,
            disc_base_width: 32,
            disc_layers: 4,
            neighbor_k: 1,
            fuse_mode: FuseMode::ElementwiseAdd,
            direction_channel: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.predictor_depth < 2 {
            return Err(Error::InvalidArgument(
                "predictor needs at least 2 blocks".into(),
            ));
        }
        if self.disc_layers < 2 {
            return Err(Error::InvalidArgument(
                "discriminators need at least 2 layers".into(),
            ));
        }
        if self.predictor_width == 0
            || self.disc_base_width == 0
            || (self.neighbor_k > 0 && self.consistency_width == 0)
        {
            return Err(Error::InvalidArgument("zero network width".into()));
        }
        if self.neighbor_k > 8 {
            return Err(Error::InvalidArgument(format!(
                "neighbor_k = {} is unreasonably large",
                self.neighbor_k
            )));
        }
        Ok(())
    }

    fn predictor_in_channels(&self) -> usize {
        if self.direction_channel {
            2
        } else {
            1
        }
    }
}

/// A target slice with its `2k` neighbors, ready for the model.
///
/// Neighbors are ordered bottom-up: `z−k … z−1, z+1 … z+k`, with out-of-stack
/// indices replaced by the nearest edge slice. All values are expected in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SliceContext {
    pub target: Array2<f64>,
    pub neighbors: Vec<Array2<f64>>,
    pub z_index: usize,
}

impl SliceContext {
    pub fn new(target: Array2<f64>, neighbors: Vec<Array2<f64>>, z_index: usize) -> Result<Self> {
        if neighbors.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} neighbors: need k below and k above",
                neighbors.len()
            )));
        }
        for n in &neighbors {
            if n.dim() != target.dim() {
                return Err(Error::ShapeMismatch {
                    context: "slice context neighbors",
                    a: vec![target.dim().0, target.dim().1],
                    b: vec![n.dim().0, n.dim().1],
                });
            }
        }
        for v in target.iter().chain(neighbors.iter().flat_map(|n| n.iter())) {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(
                    "slice context holds non-finite values".into(),
                ));
            }
        }
        Ok(SliceContext {
            target,
            neighbors,
            z_index,
        })
    }

    /// Builds the context for slice `z` of a normalized `(nz, ny, nx)` stack.
    pub fn from_stack(stack: &Array3<f64>, z: usize, k: usize) -> Result<Self> {
        let nz = stack.shape()[0];
        if z >= nz {
            return Err(Error::InvalidArgument(format!(
                "slice {z} outside stack of {nz}"
            )));
        }
        let plane = |zi: isize| -> Array2<f64> {
            let zi = zi.clamp(0, nz as isize - 1) as usize;
            stack.index_axis(ndarray::Axis(0), zi).to_owned()
        };
        let mut neighbors = Vec::with_capacity(2 * k);
        for d in (1..=k).rev() {
            neighbors.push(plane(z as isize - d as isize));
        }
        for d in 1..=k {
            neighbors.push(plane(z as isize + d as isize));
        }
        SliceContext::new(plane(z as isize), neighbors, z)
    }

    pub fn k(&self) -> usize {
        self.neighbors.len() / 2
    }
}

/// All learnable state: shared predictor, consistency net, optional fusion
/// conv, and the two domain discriminators.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub predictor: Network,
    /// Present iff `neighbor_k > 0`.
    pub consistency: Option<Network>,
    /// Present iff `fuse_mode == Network`.
    pub fusion: Option<Network>,
    /// Scores membership in the full-dose domain.
    pub disc_full: Network,
    /// Scores membership in the low-dose domain.
    pub disc_low: Network,
}

/// Flat gradient buffers mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub predictor: Vec<f64>,
    pub consistency: Vec<f64>,
    pub fusion: Vec<f64>,
    pub disc_full: Vec<f64>,
    pub disc_low: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(m: &ModelParams) -> ModelGrads {
        ModelGrads {
            predictor: vec![0.0; m.predictor.n_params()],
            consistency: vec![0.0; m.consistency.as_ref().map_or(0, |n| n.n_params())],
            fusion: vec![0.0; m.fusion.as_ref().map_or(0, |n| n.n_params())],
            disc_full: vec![0.0; m.disc_full.n_params()],
            disc_low: vec![0.0; m.disc_low.n_params()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for buf in [
            &mut self.predictor,
            &mut self.consistency,
            &mut self.fusion,
            &mut self.disc_full,
            &mut self.disc_low,
        ] {
            for g in buf.iter_mut() {
                *g *= s;
            }
        }
    }
}

fn predictor_spec(cfg: &ModelConfig) -> NetSpec {
    let w = cfg.predictor_width;
    let mut blocks = vec![BlockSpec::same3(
        cfg.predictor_in_channels(),
        w,
        false,
        Act::Relu,
    )];
    for _ in 0..cfg.predictor_depth.saturating_sub(2) {
        blocks.push(BlockSpec::same3(w, w, true, Act::Relu));
    }
    blocks.push(BlockSpec::same3(w, 1, false, Act::Linear));
    NetSpec { blocks }
}

fn consistency_spec(cfg: &ModelConfig) -> NetSpec {
    let w = cfg.consistency_width;
    NetSpec {
        blocks: vec![
            BlockSpec::same3(2 * cfg.neighbor_k, w, false, Act::Relu),
            BlockSpec::same3(w, w, true, Act::Relu),
            BlockSpec::same3(w, 1, false, Act::Linear),
        ],
    }
}

fn disc_spec(cfg: &ModelConfig) -> NetSpec {
    let mut blocks = Vec::new();
    let mut in_c = 1;
    for i in 0..cfg.disc_layers - 1 {
        let out_c = cfg.disc_base_width * (1 << i.min(2));
        blocks.push(BlockSpec {
            in_c,
            out_c,
            k: 3,
            stride: 2,
            pad: 1,
            norm: i > 0,
            act: Act::Leaky(0.2),
        });
        in_c = out_c;
    }
    blocks.push(BlockSpec::same3(in_c, 1, false, Act::Linear));
    NetSpec { blocks }
}

impl ModelParams {
    /// Initializes all networks from `rng`; deterministic per seed.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<ModelParams> {
        config.validate()?;
        let predictor = Network::new(predictor_spec(&config), rng, true)?;
        let consistency = if config.neighbor_k > 0 {
            Some(Network::new(consistency_spec(&config), rng, true)?)
        } else {
            None
        };
        let fusion = if config.fuse_mode == FuseMode::Network {
            let spec = NetSpec {
                blocks: vec![BlockSpec::same3(2, 1, false, Act::Linear)],
            };
            let mut net = Network::new(spec, rng, true)?;
            // identity init: centre tap of both input channels is 1, so the
            // fusion conv starts as exact elementwise addition
            net.params[4] = 1.0; // (out 0, in 0, ky 1, kx 1)
            net.params[13] = 1.0; // (out 0, in 1, ky 1, kx 1)
            Some(net)
        } else {
            None
        };
        let disc_full = Network::new(disc_spec(&config), rng, false)?;
        let disc_low = Network::new(disc_spec(&config), rng, false)?;
        Ok(ModelParams {
            config,
            predictor,
            consistency,
            fusion,
            disc_full,
            disc_low,
        })
    }

    /// Context map from the neighbors, or `None` when `neighbor_k == 0`.
    pub fn compute_context(&self, ctx: &SliceContext) -> Result<Option<Array2<f64>>> {
        Ok(self.context_app(ctx)?.map(|app| app.map))
    }

    /// Cached variant of [`ModelParams::compute_context`].
    pub fn context_app(&self, ctx: &SliceContext) -> Result<Option<ContextApp>> {
        let net = match &self.consistency {
            None => return Ok(None),
            Some(n) => n,
        };
        if ctx.k() != self.config.neighbor_k {
            return Err(Error::InvalidArgument(format!(
                "context has k = {}, model expects {}",
                ctx.k(),
                self.config.neighbor_k
            )));
        }
        let refs: Vec<&Array2<f64>> = ctx.neighbors.iter().collect();
        let input = Tensor::from_channels(&refs)?;
        let cache = net.forward_cached(input);
        let map = cache.out.channel(0);
        Ok(Some(ContextApp { cache, map }))
    }

    /// Applies the predictor in `direction` over an already-fused input; the
    /// plain entry point used by tests and analysis tools.
    pub fn predict_noise(
        &self,
        target: &Array2<f64>,
        context: Option<&Array2<f64>>,
        direction: Direction,
    ) -> Result<Array2<f64>> {
        Ok(self.predictor_app(target, context, direction)?.noise)
    }

    /// Denoise one slice: `clamp(target − n, 0, 1)`.
    pub fn denoise_slice(&self, ctx: &SliceContext) -> Result<Array2<f64>> {
        let map = self.compute_context(ctx)?;
        Ok(self
            .predictor_app(&ctx.target, map.as_ref(), Direction::Extract)?
            .out)
    }

    /// Re-noise one slice: `clamp(target + n, 0, 1)`.
    pub fn add_noise_slice(&self, ctx: &SliceContext) -> Result<Array2<f64>> {
        let map = self.compute_context(ctx)?;
        Ok(self
            .predictor_app(&ctx.target, map.as_ref(), Direction::Add)?
            .out)
    }

    /// Mean patch score of the full-dose discriminator.
    pub fn discriminate_full(&self, img: &Array2<f64>) -> Result<f64> {
        Ok(self.disc_app(&self.disc_full, img)?.score)
    }

    /// Mean patch score of the low-dose discriminator.
    pub fn discriminate_low(&self, img: &Array2<f64>) -> Result<f64> {
        Ok(self.disc_app(&self.disc_low, img)?.score)
    }

    /// Cached predictor application; `context = None` skips fusion entirely.
    pub fn predictor_app(
        &self,
        target: &Array2<f64>,
        context: Option<&Array2<f64>>,
        direction: Direction,
    ) -> Result<PredictorApp> {
        let (fused, fuse_cache) = match context {
            None => (target.clone(), None),
            Some(ctx) => {
                if ctx.dim() != target.dim() {
                    return Err(Error::ShapeMismatch {
                        context: "fusing neighbor context",
                        a: vec![target.dim().0, target.dim().1],
                        b: vec![ctx.dim().0, ctx.dim().1],
                    });
                }
                match (&self.config.fuse_mode, &self.fusion) {
                    (FuseMode::ElementwiseAdd, _) => (target + ctx, None),
                    (FuseMode::Network, Some(net)) => {
                        let input = Tensor::from_channels(&[target, ctx])?;
                        let cache = net.forward_cached(input);
                        (cache.out.channel(0), Some(cache))
                    }
                    (FuseMode::Network, None) => {
                        return Err(Error::InvalidArgument(
                            "fuse mode is network but no fusion net".into(),
                        ))
                    }
                }
            }
        };
        let input = if self.config.direction_channel {
            let (h, w) = fused.dim();
            let dir = Array2::from_elem((h, w), direction.channel_value());
            Tensor::from_channels(&[&fused, &dir])?
        } else {
            Tensor::from_channels(&[&fused])?
        };
        let cache = self.predictor.forward_cached(input);
        let noise = cache.out.channel(0);
        let pre = match direction {
            Direction::Extract => target - &noise,
            Direction::Add => target + &noise,
        };
        let out = pre.mapv(|v| v.clamp(0.0, 1.0));
        Ok(PredictorApp {
            cache,
            fuse_cache,
            direction,
            noise,
            pre,
            out,
        })
    }

    /// Cached discriminator application on one slice.
    pub fn disc_app(&self, net: &Network, img: &Array2<f64>) -> Result<DiscApp> {
        let input = Tensor::from_channels(&[img])?;
        let cache = net.forward_cached(input);
        let n = cache.out.data.len() as f64;
        let score = cache.out.data.iter().sum::<f64>() / n;
        Ok(DiscApp { cache, score })
    }

    /// Backward through a cached predictor application.
    ///
    /// `d_out` is the loss gradient at the clamped output. Gradients flow
    /// into the predictor (and fusion) parameter buffers, into the returned
    /// target-slice gradient, and — when a context was fused — into `d_ctx`.
    /// Clamped-off voxels transmit exactly zero gradient.
    pub fn predictor_backward(
        &self,
        app: &PredictorApp,
        d_out: &Array2<f64>,
        grads: &mut ModelGrads,
        mut d_ctx: Option<&mut Array2<f64>>,
    ) -> Array2<f64> {
        let (h, w) = d_out.dim();
        // clamp: gradient passes only strictly inside (0, 1)
        let mut d_pre = Array2::<f64>::zeros((h, w));
        ndarray::Zip::from(&mut d_pre)
            .and(d_out)
            .and(&app.pre)
            .for_each(|d, &g, &p| {
                if p > 0.0 && p < 1.0 {
                    *d = g;
                }
            });
        // out = target ± noise
        let sign = app.direction.sign();
        let mut d_target = d_pre.clone();
        let d_noise = d_pre.mapv(|v| v * sign);

        let dy = Tensor::from_channels(&[&d_noise]).expect("noise grad shape");
        let d_input = self
            .predictor
            .backward(&app.cache, dy, &mut grads.predictor, true)
            .expect("need_dx requested");
        let d_fused = d_input.channel(0);
        // direction channel (if any) is a constant input: gradient discarded

        match (&app.fuse_cache, &self.fusion) {
            (None, _) => {
                // either no context (d_fused goes straight to the target), or
                // elementwise fusion (target and context share it)
                if let Some(dc) = d_ctx.as_deref_mut() {
                    *dc += &d_fused;
                }
                d_target += &d_fused;
            }
            (Some(fc), Some(fnet)) => {
                let dy = Tensor::from_channels(&[&d_fused]).expect("fused grad shape");
                let d_in = fnet
                    .backward(fc, dy, &mut grads.fusion, true)
                    .expect("need_dx requested");
                d_target += &d_in.channel(0);
                if let Some(dc) = d_ctx.as_deref_mut() {
                    *dc += &d_in.channel(1);
                }
            }
            (Some(_), None) => unreachable!("fusion cache without fusion net"),
        }
        d_target
    }

    /// Backward through a cached context application.
    pub fn context_backward(&self, app: &ContextApp, d_map: &Array2<f64>, grads: &mut ModelGrads) {
        let net = self
            .consistency
            .as_ref()
            .expect("context app implies consistency net");
        let dy = Tensor::from_channels(&[d_map]).expect("context grad shape");
        net.backward(&app.cache, dy, &mut grads.consistency, false);
    }

    /// Backward through a cached discriminator application.
    ///
    /// `d_score` is the gradient at the scalar mean score. Parameter
    /// gradients land in `dnet`; the input-slice gradient is returned when
    /// requested (needed when the generator learns through the critic).
    pub fn disc_backward(
        &self,
        net: &Network,
        app: &DiscApp,
        d_score: f64,
        dnet: &mut [f64],
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let out = &app.cache.out;
        let n = out.data.len() as f64;
        let dmap = Tensor {
            c: out.c,
            h: out.h,
            w: out.w,
            data: vec![d_score / n; out.data.len()],
        };
        net.backward(&app.cache, dmap, dnet, need_dx)
            .map(|t| t.channel(0))
    }
}

/// Cached state of one predictor application.
pub struct PredictorApp {
    cache: FwdCache,
    fuse_cache: Option<FwdCache>,
    pub direction: Direction,
    /// Raw predicted noise map.
    pub noise: Array2<f64>,
    /// `target ± noise` before clamping (backward needs the clamp mask).
    pub pre: Array2<f64>,
    /// Final clamped slice.
    pub out: Array2<f64>,
}

/// Cached state of one consistency-network application.
pub struct ContextApp {
    cache: FwdCache,
    pub map: Array2<f64>,
}

/// Cached state of one discriminator application.
pub struct DiscApp {
    cache: FwdCache,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            predictor_depth: 3,
            predictor_width: 6,
            consistency_width: 4,
            disc_base_width: 4,
            disc_layers: 2,
            neighbor_k: 1,
            ..ModelConfig::default()
        }
    }

    fn random_stack(seed: u64, nz: usize, n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((nz, n, n), || rng.gen_range(0.05..0.95))
    }

    #[test]
    fn fresh_model_is_the_identity_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(small_config(), &mut rng).unwrap();
        let stack = random_stack(2, 5, 12);
        let ctx = SliceContext::from_stack(&stack, 2, 1).unwrap();
        let den = model.denoise_slice(&ctx).unwrap();
        let ren = model.add_noise_slice(&ctx).unwrap();
        for ((d, r), t) in den.iter().zip(ren.iter()).zip(ctx.target.iter()) {
            assert_eq!(d, t, "denoise must start as identity");
            assert_eq!(r, t, "re-noise must start as identity");
        }
    }

    #[test]
    fn outputs_always_stay_inside_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ModelParams::init(small_config(), &mut rng).unwrap();
        // blow up the weights so the raw residual leaves [0, 1] wildly
        for p in model.predictor.params.iter_mut() {
            *p += rng.gen_range(-2.0..2.0);
        }
        let stack = random_stack(4, 5, 10);
        let ctx = SliceContext::from_stack(&stack, 0, 1).unwrap();
        for img in [
            model.denoise_slice(&ctx).unwrap(),
            model.add_noise_slice(&ctx).unwrap(),
        ] {
            let mx = img.iter().cloned().fold(f64::MIN, f64::max);
            let mn = img.iter().cloned().fold(f64::MAX, f64::min);
            assert!(mn >= 0.0 && mx <= 1.0, "range [{mn}, {mx}]");
            assert!(mx > mn, "clamping should not collapse the image");
        }
    }

    #[test]
    fn both_directions_share_one_parameter_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ModelParams::init(small_config(), &mut rng).unwrap();
        let stack = random_stack(6, 5, 10);
        let ctx = SliceContext::from_stack(&stack, 2, 1).unwrap();
        let d0 = model.denoise_slice(&ctx).unwrap();
        let r0 = model.add_noise_slice(&ctx).unwrap();
        // nudge the one predictor: both directions must react
        for p in model.predictor.params.iter_mut() {
            *p += 0.05;
        }
        let d1 = model.denoise_slice(&ctx).unwrap();
        let r1 = model.add_noise_slice(&ctx).unwrap();
        assert_ne!(d0, d1);
        assert_ne!(r0, r1);
    }

    #[test]
    fn direction_channel_distinguishes_the_two_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ModelParams::init(small_config(), &mut rng).unwrap();
        for p in model.predictor.params.iter_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        let stack = random_stack(8, 5, 10);
        let ctx = SliceContext::from_stack(&stack, 2, 1).unwrap();
        let map = model.compute_context(&ctx).unwrap();
        let n_ex = model
            .predict_noise(&ctx.target, map.as_ref(), Direction::Extract)
            .unwrap();
        let n_add = model
            .predict_noise(&ctx.target, map.as_ref(), Direction::Add)
            .unwrap();
        assert_ne!(n_ex, n_add, "direction channel must condition the output");
    }

    #[test]
    fn consistency_and_fusion_start_neutral() {
        let mut cfg = small_config();
        cfg.fuse_mode = FuseMode::Network;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelParams::init(cfg, &mut rng).unwrap();
        let stack = random_stack(10, 5, 10);
        let ctx = SliceContext::from_stack(&stack, 1, 1).unwrap();
        let map = model.compute_context(&ctx).unwrap().unwrap();
        assert!(map.iter().all(|&v| v == 0.0), "context starts at zero");
        // identity-initialized fusion conv reproduces addition exactly
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_simple_fn((9, 9), || rng2.gen_range(-1.0..1.0));
        let b = Array2::from_shape_simple_fn((9, 9), || rng2.gen_range(-1.0..1.0));
        let fnet = model.fusion.as_ref().unwrap();
        let fused = fnet
            .forward(&Tensor::from_channels(&[&a, &b]).unwrap())
            .channel(0);
        for ((f, x), y) in fused.iter().zip(a.iter()).zip(b.iter()) {
            assert!((f - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_replication_at_stack_edges() {
        let stack = random_stack(12, 4, 6);
        let ctx = SliceContext::from_stack(&stack, 0, 2).unwrap();
        assert_eq!(ctx.neighbors.len(), 4);
        // below-neighbors of slice 0 replicate slice 0
        assert_eq!(ctx.neighbors[0], ctx.target);
        assert_eq!(ctx.neighbors[1], ctx.target);
        let top = SliceContext::from_stack(&stack, 3, 1).unwrap();
        assert_eq!(top.neighbors[1], top.target);
    }

    #[test]
    fn context_requires_matching_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = ModelParams::init(small_config(), &mut rng).unwrap();
        let stack = random_stack(14, 5, 8);
        let ctx = SliceContext::from_stack(&stack, 2, 2).unwrap();
        assert!(model.compute_context(&ctx).is_err());
    }

    #[test]
    fn no_neighbors_disables_the_consistency_path() {
        let mut cfg = small_config();
        cfg.neighbor_k = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = ModelParams::init(cfg, &mut rng).unwrap();
        assert!(model.consistency.is_none());
        let stack = random_stack(16, 3, 8);
        let ctx = SliceContext::from_stack(&stack, 1, 0).unwrap();
        assert!(model.compute_context(&ctx).unwrap().is_none());
        model.denoise_slice(&ctx).unwrap();
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let b = ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        assert_eq!(a.predictor.params, b.predictor.params);
        assert_eq!(a.disc_full.params, b.disc_full.params);
        let c = ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
        assert_ne!(a.predictor.params, c.predictor.params);
    }

    /// End-to-end parameter gradient of a slice-level L2 probe, checked by
    /// central differences through predictor, fusion and consistency nets.
    #[test]
    fn full_application_gradients_match_finite_differences() {
        let mut cfg = small_config();
        cfg.fuse_mode = FuseMode::Network;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut model = ModelParams::init(cfg, &mut rng).unwrap();
        // move params off the zero-init so every path is live, but keep the
        // output inside (0, 1) so the clamp does not null the check
        for p in model.predictor.params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        for p in model.consistency.as_mut().unwrap().params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        let stack = random_stack(20, 5, 8);
        let ctx = SliceContext::from_stack(&stack, 2, 1).unwrap();
        let target_ref = random_stack(21, 1, 8).index_axis_move(ndarray::Axis(0), 0);

        let loss = |model: &ModelParams| -> f64 {
            let out = model.denoise_slice(&ctx).unwrap();
            out.iter()
                .zip(target_ref.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / out.len() as f64
        };

        // analytic gradients
        let capp = model.context_app(&ctx).unwrap().unwrap();
        let papp = model
            .predictor_app(&ctx.target, Some(&capp.map), Direction::Extract)
            .unwrap();
        let n = papp.out.len() as f64;
        let d_out = ndarray::Zip::from(&papp.out)
            .and(&target_ref)
            .map_collect(|&o, &t| 2.0 * (o - t) / n);
        let mut grads = ModelGrads::zeros_like(&model);
        let mut d_ctx = Array2::<f64>::zeros(ctx.target.dim());
        model.predictor_backward(&papp, &d_out, &mut grads, Some(&mut d_ctx));
        model.context_backward(&capp, &d_ctx, &mut grads);

        for (name, idx) in [("predictor", 0usize), ("consistency", 1), ("fusion", 2)] {
            let (mut params, analytic) = match idx {
                0 => (model.predictor.params.clone(), grads.predictor.clone()),
                1 => (
                    model.consistency.as_ref().unwrap().params.clone(),
                    grads.consistency.clone(),
                ),
                _ => (
                    model.fusion.as_ref().unwrap().params.clone(),
                    grads.fusion.clone(),
                ),
            };
            let fd = finite_diff_grad(&mut params, 1e-5, |p| {
                let mut m = model.clone();
                match idx {
                    0 => m.predictor.params.copy_from_slice(p),
                    1 => m.consistency.as_mut().unwrap().params.copy_from_slice(p),
                    _ => m.fusion.as_mut().unwrap().params.copy_from_slice(p),
                }
                loss(&m)
            });
            let mut live = 0;
            for i in 0..fd.len() {
                let scale = fd[i].abs().max(analytic[i].abs());
                if scale > 1e-7 {
                    live += 1;
                    assert!(
                        (fd[i] - analytic[i]).abs() / scale < 1e-4,
                        "{name}[{i}]: analytic {} vs fd {}",
                        analytic[i],
                        fd[i]
                    );
                }
            }
            assert!(live > 0, "{name}: gradient is everywhere dead");
        }
    }

    #[test]
    fn disc_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = ModelParams::init(small_config(), &mut rng).unwrap();
        let img = random_stack(24, 1, 9).index_axis_move(ndarray::Axis(0), 0);
        // loss = (score − 1)²
        let app = model.disc_app(&model.disc_full, &img).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        model.disc_backward(
            &model.disc_full,
            &app,
            2.0 * (app.score - 1.0),
            &mut grads.disc_full,
            false,
        );
        let mut params = model.disc_full.params.clone();
        let fd = finite_diff_grad(&mut params, 1e-5, |p| {
            let mut m = model.clone();
            m.disc_full.params.copy_from_slice(p);
            let s = m.discriminate_full(&img).unwrap();
            (s - 1.0) * (s - 1.0)
        });
        for i in 0..fd.len() {
            let scale = fd[i].abs().max(grads.disc_full[i].abs());
            if scale > 1e-7 {
                assert!(
                    (fd[i] - grads.disc_full[i]).abs() / scale < 1e-4,
                    "disc param {i}"
                );
            }
        }
    }
}
