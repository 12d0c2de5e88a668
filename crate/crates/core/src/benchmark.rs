//! Synthetic benchmarks: boxed-concept scenes scored by detection metrics,
//! and two-object left/right scenes scored by composition category.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{AttentionMode, Pipeline, SamplerConfig};
use crate::error::Result;
use crate::eval::{
    evaluate_batch, CompositionSpec, Detection, DetectorConfig, ImageTruth, MetricsReport,
};
use crate::layout::{two_object_layout, LabelGrid, SceneSpec, TWO_OBJECT_MARGIN};
use crate::numerics::{Grid, RgbImage};
use crate::par::Exec;
use crate::text::{
    tokenize, toy_color_words, Palette, Vocabulary, TOY_OBJECT_CONCEPTS, TOY_PLAIN_OBJECTS,
};

/// Background of ground-truth renders.
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

const CAPTIONS: &[&str] = &[
    "a photo of a sunny garden",
    "a picture of a quiet street",
    "a view of a small room",
    "a photo of a landscape",
    "a picture of a big kitchen",
    "a scene on a sunny day",
];

/// A generated scene with its ground truth.
#[derive(Debug, Clone)]
pub struct BenchScene {
    pub scene: SceneSpec,
    pub truth: ImageTruth,
    /// Ideal render: region colors on a gray background.
    pub reference: RgbImage,
}

/// Tight pixel box of a mask's positive pixels, half-open.
pub fn mask_bbox(mask: &Grid) -> Option<[f64; 4]> {
    let (h, w) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) > 0.0 {
                any = true;
                x0 = x0.min(c);
                x1 = x1.max(c);
                y0 = y0.min(r);
                y1 = y1.max(r);
            }
        }
    }
    any.then(|| [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64])
}

/// Ground truth of a scene whose regions each name one palette concept.
/// `concept_of(i)` gives region `i`'s palette key.
pub fn scene_truth(
    scene: &SceneSpec,
    palette: &Palette,
    concept_of: &[String],
) -> (ImageTruth, RgbImage) {
    let keys: Vec<&String> = palette.keys().collect();
    let mut reference = RgbImage::filled(scene.image_h, scene.image_w, BACKGROUND);
    let mut labels = LabelGrid::filled(scene.image_h, scene.image_w, 0);
    let mut boxes = Vec::new();
    for (region, concept) in scene.regions.iter().zip(concept_of) {
        let color = palette[concept].0;
        let class = keys
            .iter()
            .position(|k| *k == concept)
            .expect("concept in palette") as u32
            + 1;
        for r in 0..scene.image_h {
            for c in 0..scene.image_w {
                if region.mask.get(r, c) > 0.0 {
                    reference.set(r, c, color);
                    labels.set(r, c, class);
                }
            }
        }
        if let Some(b) = mask_bbox(&region.mask) {
            boxes.push(Detection::new(b, concept.clone(), 1.0));
        }
    }
    (
        ImageTruth {
            boxes,
            labels: Some(labels),
            composition: None,
        },
        reference,
    )
}

/// Ground truth for an arbitrary scene: each region is labeled with the
/// last concept token of its prompt (regions without one are skipped), and
/// concepts sharing a color collapse onto the first name seen so the
/// detector palette is unambiguous.
pub fn truth_for_scene(scene: &SceneSpec, vocab: &Vocabulary) -> (Palette, ImageTruth, RgbImage) {
    let mut palette = Palette::new();
    let mut kept = scene.clone();
    kept.regions.clear();
    let mut names = Vec::new();
    for region in &scene.regions {
        let Some(tok) = region
            .prompt
            .content()
            .iter()
            .rev()
            .find(|t| vocab.concept_color(**t).is_some())
        else {
            continue;
        };
        let color = vocab.concept_color(*tok).expect("concept");
        let name = palette
            .iter()
            .find(|(_, c)| **c == color)
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| vocab.word(*tok).to_string());
        palette.insert(name.clone(), color);
        kept.regions.push(region.clone());
        names.push(name);
    }
    let (truth, reference) = scene_truth(&kept, &palette, &names);
    (palette, truth, reference)
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// `n` scenes with 2–4 distinct boxed concepts each, boxes separated by a
/// small gap. Every region prompt is a single concept noun.
pub fn box_scenes(
    n: usize,
    image_size: usize,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<BenchScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = box_palette(vocab)?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.random_range(2..=4usize);
        let mut concepts: Vec<(&str, &str)> = TOY_OBJECT_CONCEPTS.to_vec();
        concepts.shuffle(&mut rng);
        let mut boxes: Vec<[f64; 4]> = Vec::new();
        let mut tries = 0;
        while boxes.len() < k && tries < 200 {
            tries += 1;
            let bw = rng.random_range(0.25..0.45);
            let bh = rng.random_range(0.25..0.45);
            let x0 = rng.random_range(0.02..(0.98 - bw));
            let y0 = rng.random_range(0.02..(0.98 - bh));
            let b = [x0, y0, x0 + bw, y0 + bh];
            if boxes.iter().all(|o| !overlaps(o, &b, 0.04)) {
                boxes.push(b);
            }
        }
        if boxes.len() < 2 {
            continue;
        }
        let caption = CAPTIONS[rng.random_range(0..CAPTIONS.len())];
        let mut scene = SceneSpec::new(tokenize(caption, vocab)?, image_size, image_size);
        let mut names = Vec::new();
        for (b, (noun, _)) in boxes.iter().zip(&concepts) {
            scene = scene.with_box(tokenize(noun, vocab)?, *b)?;
            names.push(noun.to_string());
        }
        let (truth, reference) = scene_truth(&scene, &palette, &names);
        out.push(BenchScene {
            scene,
            truth,
            reference,
        });
    }
    Ok(out)
}

/// Object-concept nouns keyed to their colors.
pub fn box_palette(vocab: &Vocabulary) -> Result<Palette> {
    vocab.sub_palette(TOY_OBJECT_CONCEPTS.iter().map(|(n, _)| *n))
}

/// Color words only: the composition detector recognizes colors.
pub fn color_palette(vocab: &Vocabulary) -> Result<Palette> {
    vocab.sub_palette(toy_color_words())
}

/// `n` "a <c1> <o1> and a <c2> <o2>" scenes with the objects in fixed
/// left/right boxes (margins scaled from a 512x512 canvas).
pub fn composition_scenes(
    n: usize,
    image_size: usize,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<BenchScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = color_palette(vocab)?;
    let colors: Vec<&str> = toy_color_words().collect();
    let (left, right) = two_object_layout(512, 512, TWO_OBJECT_MARGIN)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick: Vec<&str> = colors.choose_multiple(&mut rng, 2).cloned().collect();
        let objs: Vec<&str> = TOY_PLAIN_OBJECTS
            .choose_multiple(&mut rng, 2)
            .cloned()
            .collect();
        let caption = format!("a {} {} and a {} {}", pick[0], objs[0], pick[1], objs[1]);
        let scene = SceneSpec::new(tokenize(&caption, vocab)?, image_size, image_size)
            .with_box(tokenize(&format!("{} {}", pick[0], objs[0]), vocab)?, left)?
            .with_box(tokenize(&format!("{} {}", pick[1], objs[1]), vocab)?, right)?;
        let names = [pick[0].to_string(), pick[1].to_string()];
        let (mut truth, reference) = scene_truth(&scene, &palette, &names);
        truth.composition = Some(CompositionSpec {
            left: (pick[0].into(), objs[0].into()),
            right: (pick[1].into(), objs[1].into()),
        });
        out.push(BenchScene {
            scene,
            truth,
            reference,
        });
    }
    Ok(out)
}

/// Samples every scene (seed = base seed + index) and scores the batch.
pub fn run_benchmark(
    pipeline: &Pipeline,
    scenes: &[BenchScene],
    cfg: &SamplerConfig,
    palette: &Palette,
    detector: DetectorConfig,
    exec: Exec,
) -> Result<(MetricsReport, Vec<RgbImage>)> {
    let jobs: Vec<(SceneSpec, SamplerConfig)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            c.exec = Exec::Sequential;
            (s.scene.clone(), c)
        })
        .collect();
    let images = pipeline
        .sample_batch(&jobs, exec)
        .into_iter()
        .map(|r| r.map(|o| o.image))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<ImageTruth> = scenes.iter().map(|s| s.truth.clone()).collect();
    let reference: Vec<RgbImage> = scenes.iter().map(|s| s.reference.clone()).collect();
    let report = evaluate_batch(&images, &truths, &reference, palette, detector, exec)?;
    Ok((report, images))
}

/// One row of a ρ sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub md_ratio: f64,
    pub cac: bool,
    pub map50: f64,
    pub kid: Option<f64>,
}

/// Sorted, deduplicated ratios; errors outside `[0, 1]`.
pub fn normalize_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    let mut v = ratios.to_vec();
    if let Some(bad) = v.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(crate::Error::schema(
            "ratios",
            format!("{bad} outside [0, 1]"),
        ));
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    Ok(v)
}

/// Sweeps `ρ` with and without attention control. The arm without control
/// attends to the concatenated prompt with no masks.
pub fn ablation_sweep(
    pipeline: &Pipeline,
    scenes: &[BenchScene],
    base: &SamplerConfig,
    ratios: &[f64],
    palette: &Palette,
    detector: DetectorConfig,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for rho in normalize_ratios(ratios)? {
        for (cac, mode) in [(true, AttentionMode::Cac), (false, AttentionMode::Baseline)] {
            let cfg = SamplerConfig {
                md_ratio: rho,
                mode,
                ..base.clone()
            };
            let (report, _) = run_benchmark(pipeline, scenes, &cfg, palette, detector, exec)?;
            rows.push(AblationRow {
                md_ratio: rho,
                cac,
                map50: report.map50,
                kid: report.kid,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{detection_metrics, evaluate_batch};

    #[test]
    fn box_scenes_are_valid_and_reproducible() {
        let v = Vocabulary::toy();
        let a = box_scenes(12, 64, 1, &v).unwrap();
        let b = box_scenes(12, 64, 1, &v).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scene, y.scene);
            let k = x.scene.regions.len();
            assert!((2..=4).contains(&k));
            assert_eq!(x.truth.boxes.len(), k);
        }
    }

    #[test]
    fn reference_renders_score_perfectly() {
        let v = Vocabulary::toy();
        let scenes = box_scenes(6, 64, 3, &v).unwrap();
        let pal = box_palette(&v).unwrap();
        let imgs: Vec<_> = scenes.iter().map(|s| s.reference.clone()).collect();
        let truths: Vec<_> = scenes.iter().map(|s| s.truth.clone()).collect();
        let r = evaluate_batch(
            &imgs,
            &truths,
            &imgs,
            &pal,
            DetectorConfig::default(),
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(
            (r.precision, r.recall, r.map50, r.map50_95),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(r.miou, Some(1.0));
        let d = detection_metrics(&scenes[0].truth.boxes, &scenes[0].truth.boxes, &[0.5]).unwrap();
        assert_eq!(d.map50, 1.0);
    }

    #[test]
    fn composition_references_are_correct() {
        let v = Vocabulary::toy();
        let scenes = composition_scenes(5, 64, 2, &v).unwrap();
        let pal = color_palette(&v).unwrap();
        let imgs: Vec<_> = scenes.iter().map(|s| s.reference.clone()).collect();
        let truths: Vec<_> = scenes.iter().map(|s| s.truth.clone()).collect();
        let r = evaluate_batch(
            &imgs,
            &truths,
            &imgs,
            &pal,
            DetectorConfig::default(),
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(r.composition_counts.unwrap().correct, 5);
    }

    #[test]
    fn scene_truth_collapses_same_colored_concepts() {
        let v = Vocabulary::toy();
        let scene = SceneSpec::new(tokenize("a red apple", &v).unwrap(), 32, 32)
            .with_box(tokenize("red", &v).unwrap(), [0.0, 0.0, 0.4, 0.4])
            .unwrap()
            .with_box(tokenize("apple", &v).unwrap(), [0.5, 0.5, 1.0, 1.0])
            .unwrap()
            .with_box(tokenize("a dog", &v).unwrap(), [0.5, 0.0, 1.0, 0.4])
            .unwrap();
        let (pal, truth, _) = truth_for_scene(&scene, &v);
        assert_eq!(pal.keys().collect::<Vec<_>>(), vec!["red"]);
        assert_eq!(truth.boxes.len(), 2);
        assert!(truth.boxes.iter().all(|b| b.concept == "red"));
    }

    #[test]
    fn ratios_dedup_and_validate() {
        assert_eq!(
            normalize_ratios(&[1.0, 0.0, 0.5, 0.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert!(normalize_ratios(&[1.5]).is_err());
    }
}
