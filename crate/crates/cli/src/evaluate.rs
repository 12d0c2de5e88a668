use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cacgen_core::benchmark::{
    box_palette, box_scenes, color_palette, composition_scenes, run_benchmark,
};
use cacgen_core::diffusion::AttentionMode;
use cacgen_core::eval::{attention_mass_in_mask, evaluate_batch, DetectorConfig, MetricsReport};
use cacgen_core::io::{
    read_json, read_png, read_records, write_json, write_png, EmittedFile, GroundTruthFile,
    GroundTruthImage, RunManifest,
};
use cacgen_core::layout::parse_scene;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::options::{create_dir, load_vocab, pipeline, SamplingArgs, Threads};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory containing manifest.json.
    pub run_dir: PathBuf,
    /// Ground-truth JSON (as written by `generate` or `benchmark`).
    pub gt: PathBuf,
    /// Report path (defaults to <run_dir>/metrics.json).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// The part of any manifest that evaluation relies on.
#[derive(Debug, Deserialize)]
struct ManifestFiles {
    files: Vec<EmittedFile>,
}

pub fn run(args: &EvalArgs, threads: Threads) -> Result<()> {
    let manifest_path = args.run_dir.join("manifest.json");
    let listed: ManifestFiles = read_json(&manifest_path)?;
    let gt: GroundTruthFile = read_json(&args.gt)?;
    if gt.images.is_empty() {
        bail!("{}: empty batch (no images)", args.gt.display());
    }
    let palette = gt.palette()?;
    let mut images = Vec::new();
    let mut truths = Vec::new();
    let mut reference = Vec::new();
    for entry in &gt.images {
        if !listed.files.iter().any(|f| f.path == entry.image) {
            bail!(
                "{} is not listed in {}",
                entry.image.display(),
                manifest_path.display()
            );
        }
        images.push(read_png(&args.run_dir.join(&entry.image))?);
        truths.push(entry.truth.clone());
        if let Some(r) = &entry.reference {
            reference.push(read_png(&args.run_dir.join(r))?);
        }
    }
    let mut report = evaluate_batch(
        &images,
        &truths,
        &reference,
        &palette,
        gt.detector,
        threads.exec,
    )?;
    report.attn_mass_in = attention_mass(&args.run_dir, &manifest_path, &listed)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run_dir.join("metrics.json"));
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Localization diagnostic over dumped attention records, when the run has
/// any and was a `generate` run over a concatenated prompt.
fn attention_mass(
    run_dir: &Path,
    manifest_path: &Path,
    listed: &ManifestFiles,
) -> Result<Option<f64>> {
    let recs: Vec<&EmittedFile> = listed
        .files
        .iter()
        .filter(|f| f.kind == "records")
        .collect();
    if recs.is_empty() {
        return Ok(None);
    }
    let manifest: RunManifest = read_json(manifest_path)?;
    if manifest.config.mode == AttentionMode::Substring {
        return Ok(None);
    }
    let vocab = load_vocab(manifest.vocab.as_deref())?;
    let scene = parse_scene(&manifest.scene, &vocab)
        .with_context(|| format!("reading scene {}", manifest.scene.display()))?;
    if scene.regions.is_empty() {
        return Ok(None);
    }
    let p = pipeline(vocab, manifest.denoiser.clone())?;
    let prompt = p.concat_prompt(&scene, &manifest.config)?;
    let pyramids = p.pyramids(&scene, &manifest.config)?;
    let mut records = Vec::new();
    for f in recs {
        records.extend(read_records(&run_dir.join(&f.path))?);
    }
    Ok(Some(attention_mass_in_mask(&records, &prompt, &pyramids)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    /// 2–4 boxed concepts per scene, scored by detection metrics.
    Boxes,
    /// Two colored objects left/right, scored by composition category.
    Composition,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "boxes")]
    pub kind: BenchKind,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed of the scene generator.
    #[arg(long, default_value_t = 11)]
    pub scene_seed: u64,
    /// Base sampling seed; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, short, default_value = "bench")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct BenchmarkManifest<'a> {
    benchmark: BenchKind,
    scenes: usize,
    size: usize,
    scene_seed: u64,
    config: &'a cacgen_core::diffusion::SamplerConfig,
    denoiser: &'a cacgen_core::diffusion::DenoiserConfig,
    files: Vec<EmittedFile>,
}

pub fn benchmark(args: &BenchmarkArgs, threads: Threads) -> Result<()> {
    if args.scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let vocab = load_vocab(args.sampling.vocab.as_deref())?;
    let (scenes, palette) = match args.kind {
        BenchKind::Boxes => (
            box_scenes(args.scenes, args.size, args.scene_seed, &vocab)?,
            box_palette(&vocab)?,
        ),
        BenchKind::Composition => (
            composition_scenes(args.scenes, args.size, args.scene_seed, &vocab)?,
            color_palette(&vocab)?,
        ),
    };
    let denoiser = args.sampling.denoiser();
    let p = pipeline(vocab, denoiser.clone())?;
    let cfg = args.sampling.sampler(None, args.seed, threads.exec);
    let detector = DetectorConfig::default();
    log::info!(
        "{:?} benchmark: {} scenes, mode {:?}",
        args.kind,
        scenes.len(),
        cfg.mode
    );
    let (report, images): (MetricsReport, _) =
        run_benchmark(&p, &scenes, &cfg, &palette, detector, threads.exec)?;

    create_dir(&args.out)?;
    let mut gt = GroundTruthFile::from_palette(&palette, detector);
    let mut files = Vec::new();
    for (i, (img, s)) in images.iter().zip(&scenes).enumerate() {
        let name = PathBuf::from(format!("img_{i:03}.png"));
        let refname = PathBuf::from(format!("ref_{i:03}.png"));
        write_png(&args.out.join(&name), img)?;
        write_png(&args.out.join(&refname), &s.reference)?;
        let seed = cfg.seed.wrapping_add(i as u64);
        files.push(EmittedFile {
            path: name.clone(),
            kind: "image".into(),
            seed,
        });
        files.push(EmittedFile {
            path: refname.clone(),
            kind: "reference".into(),
            seed,
        });
        gt.images.push(GroundTruthImage {
            image: name,
            reference: Some(refname),
            truth: s.truth.clone(),
        });
    }
    write_json(&args.out.join("gt.json"), &gt)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    let manifest = BenchmarkManifest {
        benchmark: args.kind,
        scenes: args.scenes,
        size: args.size,
        scene_seed: args.scene_seed,
        config: &cfg,
        denoiser: &denoiser,
        files,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
