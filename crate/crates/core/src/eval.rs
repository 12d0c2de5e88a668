//! Evaluation: an oracle color detector, detection and segmentation metrics,
//! KID over toy patch features, two-object composition categories and an
//! attention-localization diagnostic.
//!
//! At toy scale a concept *is* its palette color, so nearest-palette pixel
//! classification is an exact recognizer; the metric definitions themselves
//! are the standard ones.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{contract, Error, Result};
use crate::layout::{LabelGrid, MaskPyramid};
use crate::numerics::RgbImage;
use crate::par::Exec;
use crate::text::{ConcatenatedPrompt, Palette, Rgb};

/// Pixels farther than this (Euclidean RGB) from every palette color are
/// background.
pub const DEFAULT_COLOR_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_BLOB: usize = 8;

/// Box in pixel coordinates `[x0, y0, x1, y1]`, half-open on the far side.
pub type PixelBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: PixelBox,
    pub concept: String,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: PixelBox, concept: impl Into<String>, score: f64) -> Self {
        Self {
            bbox,
            concept: concept.into(),
            score,
        }
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.bbox[0] + self.bbox[2])
    }

    pub fn area(&self) -> f64 {
        box_area(&self.bbox)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub min_blob: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_COLOR_THRESHOLD,
            min_blob: DEFAULT_MIN_BLOB,
        }
    }
}

/// Per-pixel nearest palette entry (index in palette order) within
/// `threshold`, with its distance.
pub fn classify_pixels(
    image: &RgbImage,
    palette: &Palette,
    threshold: f64,
) -> Vec<Option<(usize, f64)>> {
    let colors: Vec<&Rgb> = palette.values().collect();
    let (h, w) = image.dims();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let px = Rgb(image.get(r, c));
            let best = colors
                .iter()
                .enumerate()
                .map(|(i, col)| (i, px.dist(col)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            out.push(best.filter(|(_, d)| *d <= threshold));
        }
    }
    out
}

pub fn detect_concepts(image: &RgbImage, palette: &Palette, min_blob: usize) -> Vec<Detection> {
    detect_concepts_with(
        image,
        palette,
        DetectorConfig {
            min_blob,
            ..DetectorConfig::default()
        },
    )
}

/// 4-connected components of same-concept pixels with at least
/// `min_blob` pixels, in raster order of their first pixel.
pub fn detect_concepts_with(
    image: &RgbImage,
    palette: &Palette,
    cfg: DetectorConfig,
) -> Vec<Detection> {
    if palette.is_empty() {
        return Vec::new();
    }
    let names: Vec<&String> = palette.keys().collect();
    let (h, w) = image.dims();
    let labels = classify_pixels(image, palette, cfg.threshold);
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..h * w {
        let Some((class, _)) = labels[start] else {
            continue;
        };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut count, mut conf) = (0usize, 0.0);
        while let Some(j) = stack.pop() {
            let (r, c) = (j / w, j % w);
            x0 = x0.min(c);
            x1 = x1.max(c);
            y0 = y0.min(r);
            y1 = y1.max(r);
            count += 1;
            conf += 1.0 - labels[j].map_or(0.0, |(_, d)| d) / cfg.threshold;
            let mut visit = |n: usize| {
                if !seen[n] && labels[n].map(|(k, _)| k) == Some(class) {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(j - w);
            }
            if r + 1 < h {
                visit(j + w);
            }
            if c > 0 {
                visit(j - 1);
            }
            if c + 1 < w {
                visit(j + 1);
            }
        }
        if count >= cfg.min_blob.max(1) {
            out.push(Detection {
                bbox: [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64],
                concept: names[class].clone(),
                score: (conf / count as f64).clamp(0.0, 1.0),
            });
        }
    }
    out
}

/// Label raster with class `i + 1` for the `i`-th palette entry and 0 for
/// background.
pub fn label_image(image: &RgbImage, palette: &Palette, threshold: f64) -> LabelGrid {
    let (h, w) = image.dims();
    let data = classify_pixels(image, palette, threshold)
        .into_iter()
        .map(|p| p.map_or(0, |(i, _)| i as u32 + 1))
        .collect();
    LabelGrid::new(h, w, data).expect("label raster shape")
}

fn box_area(b: &PixelBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = box_area(a) + box_area(b) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

pub fn detection_metrics(
    preds: &[Detection],
    gts: &[Detection],
    iou_thresholds: &[f64],
) -> Result<DetectionMetrics> {
    detection_metrics_batch(&[(preds.to_vec(), gts.to_vec())], iou_thresholds)
}

struct Matched {
    tp: usize,
    /// Per class, whether each ranked prediction is a true positive.
    ranked: BTreeMap<String, Vec<bool>>,
    gts_per_class: BTreeMap<String, usize>,
}

fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.bbox
            .iter()
            .zip(&b.bbox)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn match_at(images: &[(Vec<Detection>, Vec<Detection>)], thr: f64) -> Matched {
    let mut gts_per_class: BTreeMap<String, usize> = BTreeMap::new();
    for (_, gts) in images {
        for g in gts {
            *gts_per_class.entry(g.concept.clone()).or_default() += 1;
        }
    }
    // (class) -> list of (image, detection)
    let mut by_class: BTreeMap<&str, Vec<(usize, &Detection)>> = BTreeMap::new();
    for (i, (preds, _)) in images.iter().enumerate() {
        for p in preds {
            by_class.entry(&p.concept).or_default().push((i, p));
        }
    }
    let mut tp = 0;
    let mut ranked = BTreeMap::new();
    for (class, mut preds) in by_class {
        preds.sort_by(|a, b| rank_order(a.1, b.1).then(a.0.cmp(&b.0)));
        let mut used: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
        let mut flags = Vec::with_capacity(preds.len());
        for (img, p) in preds {
            let gts = &images[img].1;
            let best = gts
                .iter()
                .enumerate()
                .filter(|(k, g)| g.concept == class && !used[img][*k])
                .map(|(k, g)| (k, iou(&p.bbox, &g.bbox)))
                .filter(|(_, v)| *v >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((k, _)) = best {
                used[img][k] = true;
                tp += 1;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        ranked.insert(class.to_string(), flags);
    }
    Matched {
        tp,
        ranked,
        gts_per_class,
    }
}

/// 11-point interpolated AP of one ranked list.
fn ap11(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut pr = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        pr.push((tp as f64 / (i + 1) as f64, tp as f64 / n_gt as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            pr.iter()
                .filter(|(_, rec)| *rec >= r - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

fn mean_ap(m: &Matched) -> f64 {
    if m.gts_per_class.is_empty() {
        return 0.0;
    }
    let total: f64 = m
        .gts_per_class
        .iter()
        .map(|(c, &n)| m.ranked.get(c).map_or(0.0, |f| ap11(f, n)))
        .sum();
    total / m.gts_per_class.len() as f64
}

/// Metrics pooled over images: matching is per image, ranking per class
/// across the whole batch. AP is averaged over classes present in the
/// ground truth.
pub fn detection_metrics_batch(
    images: &[(Vec<Detection>, Vec<Detection>)],
    iou_thresholds: &[f64],
) -> Result<DetectionMetrics> {
    contract!(
        iou_thresholds.iter().all(|t| *t > 0.0 && *t <= 1.0),
        "IoU thresholds must lie in (0, 1]"
    );
    let n_pred: usize = images.iter().map(|(p, _)| p.len()).sum();
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let at50 = match_at(images, 0.5);
    let precision = if n_pred == 0 {
        0.0
    } else {
        at50.tp as f64 / n_pred as f64
    };
    let recall = if n_gt == 0 {
        0.0
    } else {
        at50.tp as f64 / n_gt as f64
    };
    let map50 = mean_ap(&at50);
    let map50_95 = if iou_thresholds.is_empty() {
        0.0
    } else {
        iou_thresholds
            .iter()
            .map(|&t| mean_ap(&match_at(images, t)))
            .sum::<f64>()
            / iou_thresholds.len() as f64
    };
    Ok(DetectionMetrics {
        precision,
        recall,
        map50,
        map50_95,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub macc: f64,
    pub aacc: f64,
}

/// Per-class IoU and accuracy averaged over the classes present in `gt`.
pub fn segmentation_metrics(pred: &LabelGrid, gt: &LabelGrid) -> Result<SegmentationMetrics> {
    segmentation_metrics_batch(&[(pred.clone(), gt.clone())])
}

/// Pixel counts pooled over all pairs before averaging.
pub fn segmentation_metrics_batch(pairs: &[(LabelGrid, LabelGrid)]) -> Result<SegmentationMetrics> {
    contract!(
        !pairs.is_empty(),
        "segmentation metrics over an empty batch"
    );
    // class -> (intersection, pred count, gt count)
    let mut counts: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for (pred, gt) in pairs {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Eval(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            counts.entry(p).or_default().1 += 1;
            let e = counts.entry(g).or_default();
            e.2 += 1;
            if p == g {
                e.0 += 1;
                correct += 1;
            }
            total += 1;
        }
    }
    let present: Vec<_> = counts.values().filter(|c| c.2 > 0).collect();
    let k = present.len() as f64;
    let miou = present
        .iter()
        .map(|&&(i, p, g)| i as f64 / (p + g - i) as f64)
        .sum::<f64>()
        / k;
    let macc = present
        .iter()
        .map(|&&(i, _, g)| i as f64 / g as f64)
        .sum::<f64>()
        / k;
    Ok(SegmentationMetrics {
        miou,
        macc,
        aacc: correct as f64 / total as f64,
    })
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v.into_iter().sum()
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD under `k(x, y) = (xᵀy / dim + 1)³`.
///
/// Kernel values are summed in sorted order, which makes the estimate
/// exactly symmetric and invariant to sample order.
pub fn kid(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.len() < 2 || feats_b.len() < 2 {
        return Err(Error::Eval(format!(
            "KID needs at least two samples per set (got {} and {})",
            feats_a.len(),
            feats_b.len()
        )));
    }
    let dim = feats_a[0].len();
    contract!(
        dim > 0 && feats_a.iter().chain(feats_b).all(|f| f.len() == dim),
        "KID features must share one positive dimension"
    );
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut v = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    v.push(poly_kernel(&s[i], &s[j]));
                }
            }
        }
        sorted_sum(v) / (n * (n - 1)) as f64
    };
    let mut cross = Vec::with_capacity(feats_a.len() * feats_b.len());
    for a in feats_a {
        for b in feats_b {
            cross.push(poly_kernel(a, b));
        }
    }
    let kxy = sorted_sum(cross) / (feats_a.len() * feats_b.len()) as f64;
    Ok(within(feats_a) + within(feats_b) - 2.0 * kxy)
}

/// 4x4 area-averaged color patches, flattened channel-minor (48 values).
pub fn kid_features(image: &RgbImage) -> Vec<f64> {
    const G: usize = 4;
    let (h, w) = image.dims();
    let mut sums = vec![0.0; G * G * 3];
    let mut counts = [0usize; G * G];
    for r in 0..h {
        let gr = r * G / h;
        for c in 0..w {
            let cell = gr * G + c * G / w;
            counts[cell] += 1;
            for (k, v) in image.get(r, c).into_iter().enumerate() {
                sums[cell * 3 + k] += v;
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for k in 0..3 {
            sums[cell * 3 + k] /= n.max(1) as f64;
        }
    }
    sums
}

// --- composition ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MissingObject,
    WrongColor,
    Correct,
}

/// `(color, object)` pairs placed left and right of the vertical midline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub left: (String, String),
    pub right: (String, String),
}

/// An object counts as present when some detection is centered in its
/// half; its color is that of the largest such detection.
pub fn composition_categorize(
    image: &RgbImage,
    spec: &CompositionSpec,
    palette: &Palette,
    cfg: DetectorConfig,
) -> Result<Category> {
    for (color, _) in [&spec.left, &spec.right] {
        if !palette.contains_key(color) {
            return Err(Error::Eval(format!(
                "color {color:?} is not in the palette"
            )));
        }
    }
    let dets = detect_concepts_with(image, palette, cfg);
    let mid = image.width() as f64 / 2.0;
    let largest = |left: bool| {
        dets.iter()
            .filter(|d| (d.center_x() < mid) == left)
            .max_by(|a, b| a.area().total_cmp(&b.area()))
    };
    let (l, r) = (largest(true), largest(false));
    Ok(match (l, r) {
        (Some(l), Some(r)) => {
            if l.concept == spec.left.0 && r.concept == spec.right.0 {
                Category::Correct
            } else {
                Category::WrongColor
            }
        }
        _ => Category::MissingObject,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompositionCounts {
    pub missing_object: usize,
    pub wrong_color: usize,
    pub correct: usize,
}

impl CompositionCounts {
    pub fn add(&mut self, c: Category) {
        match c {
            Category::MissingObject => self.missing_object += 1,
            Category::WrongColor => self.wrong_color += 1,
            Category::Correct => self.correct += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.missing_object + self.wrong_color + self.correct
    }

    pub fn correct_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.correct as f64 / self.total() as f64
        }
    }
}

// --- attention diagnostic -----------------------------------------------

/// Share of region-content attention that lands inside the region's mask,
/// averaged over records (every layer and step). Soft masks weight pixels
/// by their mask value.
pub fn attention_mass_in_mask(
    records: &[AttentionRecord],
    prompt: &ConcatenatedPrompt,
    pyramids: &[MaskPyramid],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("no attention records".into()));
    }
    contract!(
        pyramids.len() == prompt.region_count(),
        "{} pyramids for {} regions",
        pyramids.len(),
        prompt.region_count()
    );
    let n = prompt.total_len();
    let mut ratios = Vec::with_capacity(records.len());
    for rec in records {
        contract!(
            rec.tokens == n,
            "record has {} tokens, prompt has {}",
            rec.tokens,
            n
        );
        let (mut inside, mut total) = (0.0, 0.0);
        for (seg, pyr) in prompt.segments()[1..].iter().zip(pyramids) {
            let mask = pyr
                .level(rec.layer)
                .ok_or_else(|| Error::Eval(format!("no mask level for layer {:?}", rec.layer)))?;
            contract!(
                mask.len() == rec.pixels,
                "mask/record pixel mismatch at {:?}",
                rec.layer
            );
            for h in 0..rec.heads {
                for k in seg.content() {
                    for (j, &b) in mask.data().iter().enumerate() {
                        let m = rec.get(h, j, k);
                        inside += m * b;
                        total += m;
                    }
                }
            }
        }
        if total > 0.0 {
            ratios.push(inside / total);
        }
    }
    if ratios.is_empty() {
        return Err(Error::Eval("region tokens received no attention".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

// --- batch report --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub aacc: Option<f64>,
    pub kid: Option<f64>,
    pub composition_counts: Option<CompositionCounts>,
    pub attn_mass_in: Option<f64>,
}

/// Ground truth of one generated image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageTruth {
    pub boxes: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<CompositionSpec>,
}

/// Scores a batch of generated images against their ground truth;
/// `reference` images, when at least two, feed KID.
pub fn evaluate_batch(
    images: &[RgbImage],
    truths: &[ImageTruth],
    reference: &[RgbImage],
    palette: &Palette,
    cfg: DetectorConfig,
    exec: Exec,
) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Eval("empty batch".into()));
    }
    contract!(
        images.len() == truths.len(),
        "{} images for {} ground-truth entries",
        images.len(),
        truths.len()
    );
    let idx: Vec<usize> = (0..images.len()).collect();
    let dets = exec.map(&idx, |&i| detect_concepts_with(&images[i], palette, cfg));
    let pairs: Vec<_> = dets
        .into_iter()
        .zip(truths)
        .map(|(d, t)| (d, t.boxes.clone()))
        .collect();
    let det = detection_metrics_batch(&pairs, &coco_thresholds())?;

    let seg_pairs: Vec<_> = images
        .iter()
        .zip(truths)
        .filter_map(|(img, t)| {
            t.labels
                .as_ref()
                .map(|gt| (label_image(img, palette, cfg.threshold), gt.clone()))
        })
        .collect();
    let seg = if seg_pairs.is_empty() {
        None
    } else {
        Some(segmentation_metrics_batch(&seg_pairs)?)
    };

    let mut counts: Option<CompositionCounts> = None;
    for (img, t) in images.iter().zip(truths) {
        if let Some(spec) = &t.composition {
            counts
                .get_or_insert_with(Default::default)
                .add(composition_categorize(img, spec, palette, cfg)?);
        }
    }

    let kid_value = if images.len() >= 2 && reference.len() >= 2 {
        let fa: Vec<_> = images.iter().map(kid_features).collect();
        let fb: Vec<_> = reference.iter().map(kid_features).collect();
        Some(kid(&fa, &fb)?)
    } else {
        None
    };

    Ok(MetricsReport {
        images: images.len(),
        precision: det.precision,
        recall: det.recall,
        map50: det.map50,
        map50_95: det.map50_95,
        miou: seg.map(|s| s.miou),
        macc: seg.map(|s| s.macc),
        aacc: seg.map(|s| s.aacc),
        kid: kid_value,
        composition_counts: counts,
        attn_mass_in: None,
    })
}
