//! Deterministic latent sampler around a "concept painter" denoiser.
//!
//! The denoiser is a small U-shaped stack of self/cross attention blocks at
//! three resolutions. Concept tokens carry their palette color in their value
//! vectors, and the noise prediction is built so the posterior mean `x̂0`
//! takes the attention-weighted color of the concepts each pixel attends to.
//! Control over *where* tokens are attended therefore shows up directly as
//! *where* colors are painted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    cac_cross_attention_with, compose_average_outputs, cross_attention_baseline, gaussian,
    self_attention, substring_cac_attention_with, AttentionLayerParams, AttentionRecord,
    CacOptions, SubstringCombine,
};
use crate::error::{contract, Error, Result};
use crate::layout::{
    assemble_concat_mask, assemble_substring_mask, build_mask_pyramid, ConcatMask, LayerDims,
    LayerId, MaskPyramid, SceneSpec,
};
use crate::numerics::{resize, resize_mask, Grid, Matrix, ResizeMode, RgbImage};
use crate::par::Exec;
use crate::text::{
    concat_prompts_with, embed, find_substring_span, ConcatenatedPrompt, SpecialTokenLambda,
    TokenizedPrompt, Vocabulary, INDICATOR_DIM, RESERVED_DIMS,
};

// --- latents -------------------------------------------------------------

/// `C' x H' x W'` latent, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == channels * height * width,
            "latent data has {} values, expected {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        contract!(data.iter().all(|v| v.is_finite()), "latent must be finite");
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Standard normal entries drawn from a ChaCha8 stream seeded with `seed`.
    pub fn gaussian(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    pub fn plane(&self, c: usize) -> Grid {
        let n = self.height * self.width;
        Grid::from_vec(
            self.height,
            self.width,
            self.data[c * n..(c + 1) * n].to_vec(),
        )
        .expect("plane shape")
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        assert_eq!(
            self.dims(),
            other.dims(),
            "max_abs_diff on mismatched latents"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> LatentGrid {
        LatentGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }
}

// --- schedules -----------------------------------------------------------

/// Linear β schedule of the training process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000,
        }
    }
}

impl NoiseSchedule {
    /// `ᾱ_τ` for `τ = 0..train_steps`.
    pub fn alpha_bars(&self) -> Vec<f64> {
        let n = self.train_steps;
        let mut acc = 1.0;
        (0..n)
            .map(|i| {
                let frac = if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.0
                };
                let beta = self.beta_start + (self.beta_end - self.beta_start) * frac;
                acc *= 1.0 - beta;
                acc
            })
            .collect()
    }
}

/// `ᾱ` at each of the `T` sampling steps, with `ᾱ(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    alpha_bar: Vec<f64>,
}

impl DdimSchedule {
    pub fn new(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        contract!(steps >= 1, "at least one sampling step is required");
        contract!(
            steps <= schedule.train_steps,
            "{} sampling steps exceed {} training steps",
            steps,
            schedule.train_steps
        );
        contract!(
            0.0 < schedule.beta_start
                && schedule.beta_start <= schedule.beta_end
                && schedule.beta_end < 1.0,
            "beta range must satisfy 0 < start <= end < 1"
        );
        let train = schedule.alpha_bars();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let tau = t * schedule.train_steps / steps - 1;
            alpha_bar.push(train[tau]);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `z_{t-1}` from `z_t` and `ε̂`. With `eta = 0` the update is
    /// deterministic; otherwise `noise` supplies the fresh Gaussian term.
    pub fn step(
        &self,
        z: &LatentGrid,
        eps: &LatentGrid,
        t: usize,
        eta: f64,
        noise: Option<&LatentGrid>,
    ) -> LatentGrid {
        let a_t = self.alpha_bar[t];
        let a_prev = self.alpha_bar[t - 1];
        let sigma = if eta > 0.0 {
            eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt()
        } else {
            0.0
        };
        let (sa_t, s1a_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let sa_prev = a_prev.sqrt();
        let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let mut out = z.zip_map(eps, |zv, e| {
            let x0 = (zv - s1a_t * e) / sa_t;
            sa_prev * x0 + dir * e
        });
        if let (true, Some(n)) = (sigma > 0.0, noise) {
            for (o, nv) in out.data.iter_mut().zip(&n.data) {
                *o += sigma * nv;
            }
        }
        out
    }
}

/// Attention conditioning used on ordinary (non region-wise) steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Plain cross attention over the concatenated prompt, no masks, λ ≡ 1.
    Baseline,
    #[default]
    Cac,
    Substring,
    AvgOutputs,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "cac" => Ok(Self::Cac),
            "substring" => Ok(Self::Substring),
            "avg_outputs" => Ok(Self::AvgOutputs),
            other => Err(Error::schema(
                "mode",
                format!("unknown mode {other:?} (baseline | cac | substring | avg_outputs)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Region-wise denoising with latent blending.
    Md,
    /// Single denoiser call with the configured attention mode.
    Cac,
}

/// Number of region-wise steps: `⌈ρT⌉`.
pub fn md_step_count(steps: usize, md_ratio: f64) -> usize {
    // the epsilon keeps ratios like 0.4 * 50 from rounding up to 21
    ((md_ratio * steps as f64 - 1e-9).ceil().max(0.0) as usize).min(steps)
}

/// The highest-noise `⌈ρT⌉` steps are region-wise.
pub fn schedule_control(t: usize, steps: usize, md_ratio: f64) -> StepKind {
    if t > steps - md_step_count(steps, md_ratio) {
        StepKind::Md
    } else {
        StepKind::Cac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RecordPolicy {
    #[default]
    Off,
    /// Keep records of every `stride`-th ordinary step, counted from `t = T`.
    Every { stride: usize },
}

impl RecordPolicy {
    fn wants(&self, t: usize, steps: usize) -> bool {
        match *self {
            RecordPolicy::Off => false,
            RecordPolicy::Every { stride } => stride > 0 && (steps - t).is_multiple_of(stride),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub md_ratio: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub lambda_caption: f64,
    pub lambda_region: f64,
    pub mode: AttentionMode,
    /// 0 gives deterministic DDIM; 1 gives DDPM-like ancestral noise.
    pub eta: f64,
    pub special_lambda: SpecialTokenLambda,
    pub substring_combine: SubstringCombine,
    pub renormalize: bool,
    /// Region branches of MD steps also use controlled attention over
    /// `caption ⊕ region` with the region mask.
    pub md_branch_cac: bool,
    pub mask_resize: ResizeMode,
    pub record: RecordPolicy,
    pub exec: Exec,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            md_ratio: 0.4,
            seed: 0,
            schedule: NoiseSchedule::default(),
            lambda_caption: 1.0,
            lambda_region: 10.0,
            mode: AttentionMode::Cac,
            eta: 0.0,
            special_lambda: SpecialTokenLambda::Caption,
            substring_combine: SubstringCombine::Replace,
            renormalize: false,
            md_branch_cac: false,
            mask_resize: ResizeMode::Nearest,
            record: RecordPolicy::Off,
            exec: Exec::Parallel,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.steps >= 1, "steps must be at least 1");
        contract!(
            (0.0..=1.0).contains(&self.md_ratio),
            "md_ratio {} outside [0, 1]",
            self.md_ratio
        );
        contract!(
            (0.0..=1.0).contains(&self.eta),
            "eta {} outside [0, 1]",
            self.eta
        );
        contract!(
            self.lambda_caption > 0.0 && self.lambda_region > 0.0,
            "lambdas must be positive"
        );
        Ok(())
    }
}

// --- denoiser ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Gain of the color block of the query projection.
    pub query_gain: f64,
    /// Gain of the color block of the key projection.
    pub key_gain: f64,
    pub cross_residual: f64,
    pub self_residual: f64,
    /// Softens the color readout where little concept attention arrives.
    pub kappa: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_h: 32,
            latent_w: 32,
            model_dim: 16,
            heads: 2,
            head_dim: 8,
            query_gain: 2.5,
            key_gain: 2.5,
            cross_residual: 0.1,
            self_residual: 0.1,
            kappa: 0.1,
            seed: 0xd1ff_0001,
        }
    }
}

/// Conditioning of one denoiser call, prepared once per sampling run.
#[derive(Debug, Clone)]
pub enum Conditioning {
    Plain {
        embeds: Matrix,
    },
    Cac {
        prompt: ConcatenatedPrompt,
        embeds: Matrix,
        /// One mask per cross-attention layer, in layer order.
        masks: Vec<ConcatMask>,
        opts: CacOptions,
    },
    Substring {
        caption_embed: Matrix,
        /// Per layer, one span mask per region.
        masks: Vec<Vec<ConcatMask>>,
        combine: SubstringCombine,
    },
    Average {
        caption_embed: Matrix,
        region_embeds: Vec<Matrix>,
    },
}

/// U-shaped stack: `[SA, CA]` at full, half and quarter resolution on the
/// way down, then `CA` at half and full resolution on the way up with skip
/// connections. Cross-attention layers are numbered `0..5` in call order.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    cross: Vec<AttentionLayerParams>,
    selfs: Vec<AttentionLayerParams>,
}

impl ToyDenoiser {
    pub fn new(cfg: DenoiserConfig, embed_dim: usize) -> Result<Self> {
        let c = cfg.model_dim;
        contract!(
            cfg.latent_channels >= 3,
            "the painter needs three color channels"
        );
        contract!(
            cfg.latent_h.is_multiple_of(4)
                && cfg.latent_w.is_multiple_of(4)
                && cfg.latent_h >= 4
                && cfg.latent_w >= 4,
            "latent dims {}x{} must be positive multiples of 4",
            cfg.latent_h,
            cfg.latent_w
        );
        contract!(
            c >= cfg.latent_channels + 5,
            "model_dim {} too small for {} latent channels",
            c,
            cfg.latent_channels
        );
        contract!(
            cfg.head_dim > RESERVED_DIMS && cfg.heads >= 1,
            "head_dim must exceed {}",
            RESERVED_DIMS
        );
        contract!(embed_dim > RESERVED_DIMS, "embedding too narrow");
        contract!(cfg.kappa > 0.0, "kappa must be positive");

        let (h, w) = (cfg.latent_h, cfg.latent_w);
        let level = |k: usize| (h >> k, w >> k);
        let cross_levels = [0usize, 1, 2, 1, 0];
        let cross = cross_levels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let (lh, lw) = level(k);
                let dims = LayerDims {
                    id: LayerId(i),
                    height: lh,
                    width: lw,
                };
                painter_params(&cfg, dims, embed_dim, cfg.seed.wrapping_add(100 + i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let selfs = (0..3)
            .map(|k| {
                let (lh, lw) = level(k);
                let dims = LayerDims {
                    id: LayerId(100 + k),
                    height: lh,
                    width: lw,
                };
                AttentionLayerParams::seeded(
                    dims,
                    cfg.heads,
                    cfg.head_dim,
                    cfg.head_dim,
                    c,
                    c,
                    cfg.seed.wrapping_add(200 + k as u64),
                )
            })
            .collect();
        Ok(Self { cfg, cross, selfs })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Perceptive dims of every cross-attention layer, for mask pyramids.
    pub fn cross_layers(&self) -> Vec<LayerDims> {
        self.cross.iter().map(|p| p.dims).collect()
    }

    pub fn cross_params(&self) -> &[AttentionLayerParams] {
        &self.cross
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (
            self.cfg.latent_channels,
            self.cfg.latent_h,
            self.cfg.latent_w,
        )
    }

    fn attend(
        &self,
        i: usize,
        x: &Matrix,
        cond: &Conditioning,
    ) -> Result<(Matrix, AttentionRecord)> {
        let p = &self.cross[i];
        match cond {
            Conditioning::Plain { embeds } => cross_attention_baseline(x, embeds, p),
            Conditioning::Cac {
                prompt,
                embeds,
                masks,
                opts,
            } => cac_cross_attention_with(x, prompt, embeds, &masks[i], p, *opts),
            Conditioning::Substring {
                caption_embed,
                masks,
                combine,
            } => substring_cac_attention_with(x, caption_embed, &masks[i], p, *combine),
            Conditioning::Average {
                caption_embed,
                region_embeds,
            } => compose_average_outputs(x, caption_embed, region_embeds, p),
        }
    }

    fn lift(&self, z: &LatentGrid, alpha_bar: f64) -> Matrix {
        let (cl, h, w) = z.dims();
        let mut x = Matrix::zeros(h * w, self.cfg.model_dim);
        let noise = (1.0 - alpha_bar).sqrt();
        for r in 0..h {
            let py = std::f64::consts::PI * (r as f64 + 0.5) / h as f64;
            for col in 0..w {
                let px = std::f64::consts::PI * (col as f64 + 0.5) / w as f64;
                let row = x.row_mut(r * w + col);
                for (c, v) in row.iter_mut().enumerate().take(cl) {
                    *v = z.get(c, r, col);
                }
                row[cl..cl + 5].copy_from_slice(&[px.sin(), px.cos(), py.sin(), py.cos(), noise]);
            }
        }
        x
    }

    fn block(
        &self,
        i: usize,
        x: &mut Matrix,
        cond: &Conditioning,
        records: &mut Option<&mut Vec<AttentionRecord>>,
        step: usize,
    ) -> Result<Matrix> {
        let (out, mut rec) = self.attend(i, x, cond)?;
        x.add_assign(&out.scale(self.cfg.cross_residual))?;
        if let Some(sink) = records.as_deref_mut() {
            rec.step = step;
            sink.push(rec);
        }
        Ok(out)
    }

    fn self_block(&self, k: usize, x: &mut Matrix) -> Result<()> {
        let out = self_attention(x, &self.selfs[k])?;
        x.add_assign(&out.scale(self.cfg.self_residual))
    }

    /// `ε̂(z_t)` given `ᾱ_t`. Attention maps of every cross-attention layer
    /// are appended to `records` when given.
    pub fn predict_eps(
        &self,
        z: &LatentGrid,
        alpha_bar: f64,
        cond: &Conditioning,
        mut records: Option<&mut Vec<AttentionRecord>>,
        step: usize,
    ) -> Result<LatentGrid> {
        let (cl, h, w) = self.latent_dims();
        contract!(
            z.dims() == (cl, h, w),
            "latent is {:?}, denoiser expects {:?}",
            z.dims(),
            (cl, h, w)
        );
        contract!(
            alpha_bar > 0.0 && alpha_bar < 1.0,
            "alpha_bar {alpha_bar} outside (0, 1)"
        );

        let mut x0 = self.lift(z, alpha_bar);
        self.self_block(0, &mut x0)?;
        let read_a = self.block(0, &mut x0, cond, &mut records, step)?;

        let mut x1 = pool_rows(&x0, h, w);
        self.self_block(1, &mut x1)?;
        self.block(1, &mut x1, cond, &mut records, step)?;

        let mut x2 = pool_rows(&x1, h / 2, w / 2);
        self.self_block(2, &mut x2)?;
        self.block(2, &mut x2, cond, &mut records, step)?;

        let mut u1 = upsample_rows(&x2, h / 4, w / 4);
        u1.add_assign(&x1)?;
        self.block(3, &mut u1, cond, &mut records, step)?;

        let mut u0 = upsample_rows(&u1, h / 2, w / 2);
        u0.add_assign(&x0)?;
        let read_b = self.block(4, &mut u0, cond, &mut records, step)?;

        // painter readout from the two full-resolution blocks
        let (sa, s1a) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        let mut eps = LatentGrid::zeros(cl, h, w);
        for r in 0..h {
            for col in 0..w {
                let j = r * w + col;
                let (ra, rb) = (read_a.row(j), read_b.row(j));
                let ind = 0.5 * (ra[INDICATOR_DIM] + rb[INDICATOR_DIM]);
                let denom = ind.max(0.0) + self.cfg.kappa;
                for c in 0..cl {
                    let x_hat = if c < 3 {
                        0.5 * (ra[c] + rb[c]) / denom
                    } else {
                        0.0
                    };
                    eps.set(c, r, col, (z.get(c, r, col) - sa * x_hat) / s1a);
                }
            }
        }
        Ok(eps)
    }
}

/// Cross-attention projections wired so that concept tokens carry their
/// palette code and indicator through `l_V`/`l_O` into the first four model
/// channels, and queries of colored pixels align with keys of matching
/// concepts. Remaining coordinates are seeded Gaussians.
fn painter_params(
    cfg: &DenoiserConfig,
    dims: LayerDims,
    embed_dim: usize,
    seed: u64,
) -> Result<AttentionLayerParams> {
    let (c, nh, d) = (cfg.model_dim, cfg.heads, cfg.head_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = embed_dim - RESERVED_DIMS;

    let mut w_q = gaussian(&mut rng, c, nh * d);
    let mut w_k = Matrix::zeros(embed_dim, nh * d);
    let rand_k = gaussian(&mut rng, free, nh * d);
    let mut w_v = Matrix::zeros(embed_dim, nh * d);
    let rand_v = gaussian(&mut rng, free, nh * d);
    let mut w_o = Matrix::zeros(nh * d, c);
    let rand_o = gaussian(&mut rng, nh * (d - RESERVED_DIMS), c - RESERVED_DIMS);

    for head in 0..nh {
        let base = head * d;
        for k in 0..3 {
            for row in 0..c {
                w_q.set(row, base + k, if row == k { cfg.query_gain } else { 0.0 });
            }
            w_k.set(k, base + k, cfg.key_gain);
        }
        for col in base + 3..base + d {
            for row in 0..free {
                w_k.set(RESERVED_DIMS + row, col, rand_k.get(row, col));
            }
        }
        for k in 0..RESERVED_DIMS {
            w_v.set(k, base + k, 1.0);
            w_o.set(base + k, k, 1.0 / nh as f64);
        }
        for col in base + RESERVED_DIMS..base + d {
            for row in 0..free {
                w_v.set(RESERVED_DIMS + row, col, rand_v.get(row, col));
            }
            let orow = head * (d - RESERVED_DIMS) + (col - base - RESERVED_DIMS);
            for oc in RESERVED_DIMS..c {
                w_o.set(col, oc, rand_o.get(orow, oc - RESERVED_DIMS));
            }
        }
    }
    AttentionLayerParams::new(dims, nh, d, d, c, embed_dim, w_q, w_k, w_v, w_o)
}

/// 2x2 mean pooling of a `(h·w) x C` pixel-row matrix.
fn pool_rows(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (oh, ow, c) = (h / 2, w / 2, x.cols());
    let mut out = Matrix::zeros(oh * ow, c);
    for r in 0..oh {
        for col in 0..ow {
            let dst = out.row_mut(r * ow + col);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = x.row((2 * r + dr) * w + 2 * col + dc);
                for k in 0..c {
                    dst[k] += src[k];
                }
            }
            dst.iter_mut().for_each(|v| *v *= 0.25);
        }
    }
    out
}

/// Nearest 2x upsampling of a `(h·w) x C` pixel-row matrix.
fn upsample_rows(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Matrix::zeros(oh * ow, x.cols());
    for r in 0..oh {
        for col in 0..ow {
            out.row_mut(r * ow + col)
                .copy_from_slice(x.row((r / 2) * w + col / 2));
        }
    }
    out
}

// --- decoder -------------------------------------------------------------

/// `rgb = offset + W z`, bilinear upsampling, clamp to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `3 x C'`
    pub weights: Matrix,
    pub offset: [f64; 3],
}

impl Decoder {
    /// Color channels map through `0.5 + 0.5 z`, inverting the palette
    /// code `2c - 1`; further channels are ignored.
    pub fn painter(latent_channels: usize) -> Self {
        let mut weights = Matrix::zeros(3, latent_channels);
        for k in 0..3.min(latent_channels) {
            weights.set(k, k, 0.5);
        }
        Self {
            weights,
            offset: [0.5; 3],
        }
    }

    /// Lipschitz constant of the linear part in the ∞-norm.
    pub fn lipschitz(&self) -> f64 {
        (0..3)
            .map(|k| self.weights.row(k).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn decode(&self, z: &LatentGrid, height: usize, width: usize) -> Result<RgbImage> {
        let (cl, h, w) = z.dims();
        contract!(
            cl == self.weights.cols(),
            "decoder expects {} channels, latent has {}",
            self.weights.cols(),
            cl
        );
        let planes = (0..3)
            .map(|k| {
                let mut g = Grid::filled(h, w, self.offset[k]);
                for c in 0..cl {
                    let wk = self.weights.get(k, c);
                    if wk != 0.0 {
                        for (dst, src) in g.data_mut().iter_mut().zip(z.plane(c).data()) {
                            *dst += wk * src;
                        }
                    }
                }
                let up = resize(&g, height, width, ResizeMode::Bilinear)?;
                Ok(up.map(|v| v.clamp(0.0, 1.0)))
            })
            .collect::<Result<Vec<_>>>()?;
        let [r, g, b]: [Grid; 3] = planes.try_into().expect("three planes");
        RgbImage::from_planes([r, g, b])
    }
}

// --- pipeline ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: RgbImage,
    pub latent: LatentGrid,
    pub records: Vec<AttentionRecord>,
    /// Concatenated prompt the ordinary steps attended over.
    pub prompt: ConcatenatedPrompt,
    pub pyramids: Vec<MaskPyramid>,
}

/// A region-wise branch: its conditioning and latent-resolution weight.
#[derive(Debug, Clone)]
struct Branch {
    cond: Conditioning,
    weight: Grid,
}

/// Everything a sampling run needs, derived once from scene and config.
struct Plan {
    schedule: DdimSchedule,
    prompt: ConcatenatedPrompt,
    pyramids: Vec<MaskPyramid>,
    main: Conditioning,
    branches: Vec<Branch>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    vocab: Vocabulary,
    denoiser: ToyDenoiser,
    decoder: Decoder,
}

impl Pipeline {
    pub fn new(vocab: Vocabulary, cfg: DenoiserConfig) -> Result<Self> {
        let denoiser = ToyDenoiser::new(cfg, vocab.embed_dim())?;
        let decoder = Decoder::painter(denoiser.cfg.latent_channels);
        Ok(Self {
            vocab,
            denoiser,
            decoder,
        })
    }

    pub fn toy() -> Self {
        Self::new(Vocabulary::toy(), DenoiserConfig::default()).expect("default config is valid")
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn concat_prompt(
        &self,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
    ) -> Result<ConcatenatedPrompt> {
        let regions: Vec<TokenizedPrompt> =
            scene.regions.iter().map(|r| r.prompt.clone()).collect();
        let total = scene.caption.len() + regions.iter().map(|r| r.len()).sum::<usize>();
        concat_prompts_with(
            &scene.caption,
            &regions,
            total,
            cfg.lambda_caption,
            cfg.lambda_region,
            cfg.special_lambda,
            &self.vocab,
        )
    }

    pub fn pyramids(&self, scene: &SceneSpec, cfg: &SamplerConfig) -> Result<Vec<MaskPyramid>> {
        let layers = self.denoiser.cross_layers();
        scene
            .regions
            .iter()
            .map(|r| build_mask_pyramid(&r.mask, &layers, cfg.mask_resize))
            .collect()
    }

    fn cac_conditioning(
        &self,
        prompt: &ConcatenatedPrompt,
        pyramids: &[MaskPyramid],
        cfg: &SamplerConfig,
    ) -> Result<Conditioning> {
        let embeds = crate::text::embed_tokens(prompt.unpadded(), &self.vocab);
        let masks = self
            .denoiser
            .cross_layers()
            .into_iter()
            .map(|l| assemble_concat_mask(pyramids, prompt, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning::Cac {
            prompt: prompt.clone(),
            embeds,
            masks,
            opts: CacOptions {
                renormalize: cfg.renormalize,
            },
        })
    }

    /// Conditioning of an ordinary step in `mode`.
    pub fn conditioning(
        &self,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
        mode: AttentionMode,
    ) -> Result<Conditioning> {
        let prompt = self.concat_prompt(scene, cfg)?;
        let pyramids = self.pyramids(scene, cfg)?;
        self.conditioning_from(scene, cfg, mode, &prompt, &pyramids)
    }

    fn conditioning_from(
        &self,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
        mode: AttentionMode,
        prompt: &ConcatenatedPrompt,
        pyramids: &[MaskPyramid],
    ) -> Result<Conditioning> {
        match mode {
            AttentionMode::Baseline => Ok(Conditioning::Plain {
                embeds: crate::text::embed_tokens(prompt.unpadded(), &self.vocab),
            }),
            AttentionMode::Cac => self.cac_conditioning(prompt, pyramids, cfg),
            AttentionMode::Substring => {
                let n0 = scene.caption.len();
                let spans = scene
                    .regions
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        find_substring_span(&scene.caption, &r.prompt).ok_or_else(|| {
                            Error::schema(
                                format!("regions[{i}].prompt"),
                                format!(
                                    "{:?} is not a substring of the caption",
                                    r.prompt.text(&self.vocab)
                                ),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let masks = self
                    .denoiser
                    .cross_layers()
                    .into_iter()
                    .map(|l| {
                        spans
                            .iter()
                            .zip(pyramids)
                            .map(|(s, p)| assemble_substring_mask(p, *s, n0, l.id))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioning::Substring {
                    caption_embed: embed(&scene.caption, &self.vocab),
                    masks,
                    combine: cfg.substring_combine,
                })
            }
            AttentionMode::AvgOutputs => Ok(Conditioning::Average {
                caption_embed: embed(&scene.caption, &self.vocab),
                region_embeds: scene
                    .regions
                    .iter()
                    .map(|r| embed(&r.prompt, &self.vocab))
                    .collect(),
            }),
        }
    }

    fn branches(
        &self,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
        pyramids: &[MaskPyramid],
    ) -> Result<Vec<Branch>> {
        let (_, lh, lw) = self.denoiser.latent_dims();
        let mut out = Vec::with_capacity(scene.regions.len() + 1);
        let mut cover = Grid::zeros(lh, lw);
        for (region, pyramid) in scene.regions.iter().zip(pyramids) {
            let weight = resize_mask(&region.mask, lh, lw, cfg.mask_resize)?;
            for (c, v) in cover.data_mut().iter_mut().zip(weight.data()) {
                *c = c.max(*v);
            }
            let cond = if cfg.md_branch_cac {
                let prompt = concat_prompts_with(
                    &scene.caption,
                    std::slice::from_ref(&region.prompt),
                    scene.caption.len() + region.prompt.len(),
                    cfg.lambda_caption,
                    cfg.lambda_region,
                    cfg.special_lambda,
                    &self.vocab,
                )?;
                self.cac_conditioning(&prompt, std::slice::from_ref(pyramid), cfg)?
            } else {
                Conditioning::Plain {
                    embeds: embed(&region.prompt, &self.vocab),
                }
            };
            out.push(Branch { cond, weight });
        }
        let rest = cover.map(|c| (1.0 - c).max(0.0));
        if rest.count_positive() > 0 {
            out.push(Branch {
                cond: Conditioning::Plain {
                    embeds: embed(&scene.caption, &self.vocab),
                },
                weight: rest,
            });
        }
        Ok(out)
    }

    fn plan(&self, scene: &SceneSpec, cfg: &SamplerConfig, mode: AttentionMode) -> Result<Plan> {
        cfg.validate()?;
        let schedule = DdimSchedule::new(&cfg.schedule, cfg.steps)?;
        let prompt = self.concat_prompt(scene, cfg)?;
        let pyramids = self.pyramids(scene, cfg)?;
        let main = self.conditioning_from(scene, cfg, mode, &prompt, &pyramids)?;
        let branches = if scene.regions.is_empty() {
            Vec::new()
        } else {
            self.branches(scene, cfg, &pyramids)?
        };
        Ok(Plan {
            schedule,
            prompt,
            pyramids,
            main,
            branches,
        })
    }

    fn step_noise(&self, cfg: &SamplerConfig, t: usize) -> Option<LatentGrid> {
        (cfg.eta > 0.0).then(|| {
            let (c, h, w) = self.denoiser.latent_dims();
            LatentGrid::gaussian(
                c,
                h,
                w,
                cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )
        })
    }

    fn single_step(
        &self,
        z: &LatentGrid,
        t: usize,
        schedule: &DdimSchedule,
        cond: &Conditioning,
        cfg: &SamplerConfig,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<LatentGrid> {
        contract!(
            t >= 1 && t <= schedule.steps(),
            "step {t} outside [1, {}]",
            schedule.steps()
        );
        let eps = self
            .denoiser
            .predict_eps(z, schedule.alpha_bar(t), cond, records, t)?;
        let noise = self.step_noise(cfg, t);
        Ok(schedule.step(z, &eps, t, cfg.eta, noise.as_ref()))
    }

    fn blended_step(
        &self,
        z: &LatentGrid,
        t: usize,
        schedule: &DdimSchedule,
        branches: &[Branch],
        cfg: &SamplerConfig,
    ) -> Result<LatentGrid> {
        let outs = cfg
            .exec
            .map(branches, |b| {
                self.single_step(z, t, schedule, &b.cond, cfg, None)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<&Grid> = branches.iter().map(|b| &b.weight).collect();
        blend(&outs, &weights)
    }

    /// One ordinary step with the attention `mode`.
    pub fn denoise_step(
        &self,
        z_t: &LatentGrid,
        t: usize,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
        mode: AttentionMode,
    ) -> Result<LatentGrid> {
        cfg.validate()?;
        let schedule = DdimSchedule::new(&cfg.schedule, cfg.steps)?;
        let cond = self.conditioning(scene, cfg, mode)?;
        self.single_step(z_t, t, &schedule, &cond, cfg, None)
    }

    /// One region-wise step: each region (plus the caption on uncovered
    /// pixels) is denoised on its own and the results are mask-averaged.
    pub fn md_region_step(
        &self,
        z_t: &LatentGrid,
        t: usize,
        scene: &SceneSpec,
        cfg: &SamplerConfig,
    ) -> Result<LatentGrid> {
        if scene.regions.is_empty() {
            return self.denoise_step(z_t, t, scene, cfg, cfg.mode);
        }
        cfg.validate()?;
        let schedule = DdimSchedule::new(&cfg.schedule, cfg.steps)?;
        let pyramids = self.pyramids(scene, cfg)?;
        let branches = self.branches(scene, cfg, &pyramids)?;
        self.blended_step(z_t, t, &schedule, &branches, cfg)
    }

    pub fn initial_latent(&self, seed: u64) -> LatentGrid {
        let (c, h, w) = self.denoiser.latent_dims();
        LatentGrid::gaussian(c, h, w, seed)
    }

    /// Full `T`-step run from seeded noise to a decoded image.
    pub fn sample(&self, scene: &SceneSpec, cfg: &SamplerConfig) -> Result<SampleOutput> {
        let plan = self.plan(scene, cfg, cfg.mode)?;
        let mut z = self.initial_latent(cfg.seed);
        let mut records = Vec::new();
        for t in (1..=cfg.steps).rev() {
            let kind = schedule_control(t, cfg.steps, cfg.md_ratio);
            log::trace!("step {t}/{}: {kind:?}", cfg.steps);
            z = if kind == StepKind::Md && !plan.branches.is_empty() {
                self.blended_step(&z, t, &plan.schedule, &plan.branches, cfg)?
            } else {
                let sink = cfg.record.wants(t, cfg.steps).then_some(&mut records);
                self.single_step(&z, t, &plan.schedule, &plan.main, cfg, sink)?
            };
        }
        let image = self.decoder.decode(&z, scene.image_h, scene.image_w)?;
        Ok(SampleOutput {
            image,
            latent: z,
            records,
            prompt: plan.prompt,
            pyramids: plan.pyramids,
        })
    }

    /// Independent runs, concurrently under [`Exec::Parallel`]. Results keep
    /// job order.
    pub fn sample_batch(
        &self,
        jobs: &[(SceneSpec, SamplerConfig)],
        exec: Exec,
    ) -> Vec<Result<SampleOutput>> {
        exec.map(jobs, |(scene, cfg)| self.sample(scene, cfg))
    }
}

/// `Σ w_i z_i / Σ w_i` per pixel, summed in branch order.
pub fn blend(latents: &[LatentGrid], weights: &[&Grid]) -> Result<LatentGrid> {
    contract!(
        !latents.is_empty() && latents.len() == weights.len(),
        "{} latents for {} weights",
        latents.len(),
        weights.len()
    );
    let (c, h, w) = latents[0].dims();
    contract!(
        latents.iter().all(|l| l.dims() == (c, h, w)) && weights.iter().all(|g| g.dims() == (h, w)),
        "blend inputs disagree in size"
    );
    let mut out = LatentGrid::zeros(c, h, w);
    for r in 0..h {
        for col in 0..w {
            let total: f64 = weights.iter().map(|g| g.get(r, col)).sum();
            contract!(total > 0.0, "no branch covers latent pixel ({r}, {col})");
            for ch in 0..c {
                let num: f64 = latents
                    .iter()
                    .zip(weights)
                    .map(|(l, g)| g.get(r, col) * l.get(ch, r, col))
                    .sum();
                out.set(ch, r, col, num / total);
            }
        }
    }
    Ok(out)
}
