use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cacgen_core::benchmark::truth_for_scene;
use cacgen_core::diffusion::{AttentionMode, RecordPolicy, SampleOutput};
use cacgen_core::eval::DetectorConfig;
use cacgen_core::io::{
    read_json, write_heatmap, write_json, write_png, write_ppm, write_records, EmittedFile,
    GroundTruthFile, GroundTruthImage, OutputOptions, RunManifest,
};
use cacgen_core::layout::{find_layer, parse_scene, SceneSpec};
use cacgen_core::text::find_substring_span;
use clap::Args;

use crate::options::{create_dir, load_vocab, pipeline, SamplingArgs, Threads};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene JSON file.
    pub scene: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Seed of a single run.
    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    pub seed: u64,
    /// Comma-separated seeds, one image each.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
    /// Also write binary PPM copies.
    #[arg(long)]
    pub ppm: bool,
    /// Write per-layer attention heatmaps of region tokens.
    #[arg(long)]
    pub heatmaps: bool,
    /// Dump raw attention records per seed.
    #[arg(long)]
    pub records: bool,
    /// Record every N-th ordinary step.
    #[arg(long, default_value_t = 10)]
    pub record_stride: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.json of an earlier `generate` run.
    pub manifest: PathBuf,
    /// Output directory (defaults to the manifest's).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Fail unless every replayed file matches the original byte for byte.
    #[arg(long)]
    pub check: bool,
}

pub fn run(args: &GenerateArgs, threads: Threads) -> Result<()> {
    let vocab = load_vocab(args.sampling.vocab.as_deref())?;
    let scene = parse_scene(&args.scene, &vocab)
        .with_context(|| format!("reading scene {}", args.scene.display()))?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![args.seed]);
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let outputs = OutputOptions {
        ppm: args.ppm,
        heatmaps: args.heatmaps,
        records: args.records,
        record_stride: args.record_stride,
    };
    if (outputs.heatmaps || outputs.records) && outputs.record_stride == 0 {
        bail!("--record-stride must be at least 1");
    }
    let manifest = RunManifest {
        scene: fs::canonicalize(&args.scene).unwrap_or_else(|_| args.scene.clone()),
        vocab: args
            .sampling
            .vocab
            .as_ref()
            .map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone())),
        config: args.sampling.sampler(Some(&scene), seeds[0], threads.exec),
        denoiser: args.sampling.denoiser(),
        seeds,
        out_dir: args.out.clone(),
        outputs,
        files: Vec::new(),
    };
    execute(manifest, &scene, threads)?;
    Ok(())
}

pub fn replay(args: &ReplayArgs, threads: Threads) -> Result<()> {
    let original: RunManifest = read_json(&args.manifest)?;
    let vocab = load_vocab(original.vocab.as_deref())?;
    let scene = parse_scene(&original.scene, &vocab)
        .with_context(|| format!("reading scene {}", original.scene.display()))?;
    let out = args.out.clone().unwrap_or_else(|| original.out_dir.clone());
    let source_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let fresh = RunManifest {
        out_dir: out.clone(),
        files: Vec::new(),
        ..original.clone()
    };
    let replayed = execute(fresh, &scene, threads)?;
    if args.check {
        if replayed.files != original.files {
            bail!("replay emitted a different file set");
        }
        for f in &original.files {
            let a = fs::read(source_dir.join(&f.path))
                .with_context(|| format!("reading original {}", f.path.display()))?;
            let b = fs::read(out.join(&f.path))?;
            if a != b {
                bail!("{} differs from the original run", f.path.display());
            }
        }
        log::info!("replay matches all {} files", original.files.len());
    }
    Ok(())
}

/// Token columns worth a heatmap: region content tokens (caption spans in
/// substring mode), or the caption content when there are no regions.
fn heatmap_tokens(out: &SampleOutput, scene: &SceneSpec, mode: AttentionMode) -> Vec<usize> {
    let segs = out.prompt.segments();
    if scene.regions.is_empty() {
        return segs[0].content().collect();
    }
    if mode == AttentionMode::Substring {
        return scene
            .regions
            .iter()
            .filter_map(|r| find_substring_span(&scene.caption, &r.prompt))
            .flat_map(|(s, l)| s..s + l)
            .collect();
    }
    segs[1..].iter().flat_map(|s| s.content()).collect()
}

/// Samples every seed and writes images, optional artifacts, ground truth
/// and the manifest.
fn execute(mut manifest: RunManifest, scene: &SceneSpec, threads: Threads) -> Result<RunManifest> {
    let vocab = load_vocab(manifest.vocab.as_deref())?;
    let p = pipeline(vocab.clone(), manifest.denoiser.clone())?;
    let out_dir = manifest.out_dir.clone();
    create_dir(&out_dir)?;
    let opts = manifest.outputs;
    let mut base = manifest.config.clone();
    base.record = if opts.heatmaps || opts.records {
        RecordPolicy::Every {
            stride: opts.record_stride,
        }
    } else {
        RecordPolicy::Off
    };
    let jobs: Vec<_> = manifest
        .seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            // seeds already run concurrently
            c.exec = cacgen_core::par::Exec::Sequential;
            (scene.clone(), c)
        })
        .collect();
    log::info!(
        "sampling {} seed(s), {} steps, mode {:?}, md ratio {}",
        jobs.len(),
        base.steps,
        base.mode,
        base.md_ratio
    );
    let results = p.sample_batch(&jobs, threads.exec);

    let (palette, truth, reference) = truth_for_scene(scene, &vocab);
    let mut gt = GroundTruthFile::from_palette(&palette, DetectorConfig::default());
    let mut files = Vec::new();
    let mut emit = |path: PathBuf, kind: &str, seed: u64| {
        files.push(EmittedFile {
            path,
            kind: kind.to_string(),
            seed,
        })
    };
    write_png(&out_dir.join("reference.png"), &reference)?;
    emit("reference.png".into(), "reference", 0);

    for (&seed, res) in manifest.seeds.iter().zip(results) {
        let out = res.with_context(|| format!("sampling seed {seed}"))?;
        let name = PathBuf::from(format!("seed_{seed}.png"));
        write_png(&out_dir.join(&name), &out.image)?;
        emit(name.clone(), "image", seed);
        gt.images.push(GroundTruthImage {
            image: name,
            reference: Some("reference.png".into()),
            truth: truth.clone(),
        });
        if opts.ppm {
            let ppm = PathBuf::from(format!("seed_{seed}.ppm"));
            write_ppm(&out_dir.join(&ppm), &out.image)?;
            emit(ppm, "ppm", seed);
        }
        if opts.records {
            let rec = PathBuf::from(format!("seed_{seed}_records.bin"));
            write_records(&out_dir.join(&rec), &out.records)?;
            emit(rec, "records", seed);
        }
        if opts.heatmaps {
            let sub = PathBuf::from("heatmaps").join(format!("seed_{seed}"));
            create_dir(&out_dir.join(&sub))?;
            let layers = p.denoiser().cross_layers();
            for r in &out.records {
                let dims = find_layer(&layers, r.layer)
                    .with_context(|| format!("record of unknown layer {:?}", r.layer))?;
                for k in heatmap_tokens(&out, scene, base.mode) {
                    let f = sub.join(format!("l{}_t{}_tok{}.png", r.layer.0, r.step, k));
                    write_heatmap(
                        &out_dir.join(&f),
                        r,
                        dims.height,
                        dims.width,
                        k,
                        scene.image_h,
                        scene.image_w,
                    )?;
                    emit(f, "heatmap", seed);
                }
            }
        }
    }
    write_json(&out_dir.join("gt.json"), &gt)?;
    emit("gt.json".into(), "ground_truth", 0);
    manifest.files = files;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    log::info!(
        "wrote {} files to {}",
        manifest.files.len(),
        out_dir.display()
    );
    Ok(manifest)
}
