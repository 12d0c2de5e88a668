use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cacgen_core::diffusion::{AttentionMode, DenoiserConfig, Pipeline, SamplerConfig};
use cacgen_core::layout::SceneSpec;
use cacgen_core::par::Exec;
use cacgen_core::text::{SpecialTokenLambda, Vocabulary};
use clap::Args;

#[derive(Debug, Clone, Copy)]
pub struct Threads {
    pub exec: Exec,
}

impl Threads {
    pub fn configure(threads: Option<usize>) -> Result<Self> {
        if threads == Some(0) {
            bail!("CACGEN_THREADS / --threads must be at least 1");
        }
        #[cfg(feature = "parallel")]
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
        }
        let exec = if threads == Some(1) || !Exec::available() {
            Exec::Sequential
        } else {
            Exec::Parallel
        };
        log::debug!("execution: {exec:?}");
        Ok(Self { exec })
    }
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: cacgen_core::Error| e.to_string())
}

fn parse_special(s: &str) -> Result<SpecialTokenLambda, String> {
    match s {
        "caption" => Ok(SpecialTokenLambda::Caption),
        "region" => Ok(SpecialTokenLambda::Region),
        _ => Err(format!("expected caption or region, got {s:?}")),
    }
}

/// Sampler and denoiser flags shared by every command that samples.
#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Sampling steps T.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Fraction of the highest-noise steps run region-wise.
    #[arg(long, default_value_t = 0.4)]
    pub md_ratio: f64,
    /// Caption token weight (defaults to the scene file's value).
    #[arg(long)]
    pub lambda_caption: Option<f64>,
    /// Region token weight (defaults to the scene file's value).
    #[arg(long)]
    pub lambda_region: Option<f64>,
    /// baseline | cac | substring | avg_outputs
    #[arg(long, default_value = "cac", value_parser = parse_mode)]
    pub mode: AttentionMode,
    /// 0 = deterministic DDIM, 1 = ancestral noise.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Weight of region BOS/EOS tokens: caption | region.
    #[arg(long, default_value = "caption", value_parser = parse_special)]
    pub special_lambda: SpecialTokenLambda,
    /// Renormalize controlled attention rows.
    #[arg(long)]
    pub renormalize: bool,
    /// Region branches of MD steps also use attention control.
    #[arg(long)]
    pub md_branch_cac: bool,
    /// Latent height and width (multiple of 4).
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    /// Vocabulary JSON; the built-in toy vocabulary otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

impl SamplingArgs {
    pub fn sampler(&self, scene: Option<&SceneSpec>, seed: u64, exec: Exec) -> SamplerConfig {
        let d = SamplerConfig::default();
        SamplerConfig {
            steps: self.steps,
            md_ratio: self.md_ratio,
            seed,
            lambda_caption: self
                .lambda_caption
                .or(scene.map(|s| s.lambda_caption))
                .unwrap_or(d.lambda_caption),
            lambda_region: self
                .lambda_region
                .or(scene.map(|s| s.lambda_region))
                .unwrap_or(d.lambda_region),
            mode: self.mode,
            eta: self.eta,
            special_lambda: self.special_lambda,
            renormalize: self.renormalize,
            md_branch_cac: self.md_branch_cac,
            exec,
            ..d
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_h: self.latent,
            latent_w: self.latent,
            ..DenoiserConfig::default()
        }
    }
}

pub fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => Ok(Vocabulary::load(p)?),
        None => Ok(Vocabulary::toy()),
    }
}

pub fn pipeline(vocab: Vocabulary, cfg: DenoiserConfig) -> Result<Pipeline> {
    Pipeline::new(vocab, cfg).context("building the denoiser")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
