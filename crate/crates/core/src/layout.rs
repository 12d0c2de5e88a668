//! Scene specifications, mask rasterization, per-layer mask pyramids and the
//! concatenated broadcast masks consumed by controlled cross attention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{resize_mask, Grid, Matrix, ResizeMode};
use crate::text::{tokenize, ConcatenatedPrompt, TokenizedPrompt, Vocabulary};

/// Classes covering less than this fraction of a label map are dropped.
pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.05;

/// Margin, in pixels of a 512x512 canvas, of the two-object left/right layout.
pub const TWO_OBJECT_MARGIN: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub usize);

/// Perceptive dimensions of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub id: LayerId,
    pub height: usize,
    pub width: usize,
}

impl LayerDims {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// Normalized `[x0, y0, x1, y1]`.
    Box([f64; 4]),
    LabelMap {
        class_id: u32,
    },
    MaskPng(PathBuf),
}

/// A localized prompt and its spatial mask at scene resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub prompt: TokenizedPrompt,
    pub mask: Grid,
    pub source: RegionSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub caption: TokenizedPrompt,
    pub regions: Vec<Region>,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub lambda_caption: f64,
    pub lambda_region: f64,
}

impl SceneSpec {
    pub fn new(caption: TokenizedPrompt, image_h: usize, image_w: usize) -> Self {
        Self {
            caption,
            regions: Vec::new(),
            image_h,
            image_w,
            channels: 3,
            lambda_caption: 1.0,
            lambda_region: 10.0,
        }
    }

    /// Adds a box region; fails when the box covers no pixel center.
    pub fn with_box(mut self, prompt: TokenizedPrompt, bbox: [f64; 4]) -> Result<Self> {
        let mask = rasterize_box(bbox, self.image_h, self.image_w)?;
        self.regions.push(Region {
            prompt,
            mask,
            source: RegionSource::Box(bbox),
        });
        Ok(self)
    }
}

/// Pixel `(r, c)` is inside iff its center lies in the closed box.
pub fn rasterize_box(bbox: [f64; 4], h: usize, w: usize) -> Result<Grid> {
    let [x0, y0, x1, y1] = bbox;
    if !(x0 < x1 && y0 < y1) {
        return Err(Error::InvalidBox(
            bbox,
            "expected x0 < x1 and y0 < y1".into(),
        ));
    }
    if bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidBox(
            bbox,
            "coordinates must lie in [0, 1]".into(),
        ));
    }
    contract!(h >= 1 && w >= 1, "raster dims must be positive");
    let mut g = Grid::zeros(h, w);
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy < y0 || cy > y1 {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx >= x0 && cx <= x1 {
                g.set(r, c, 1.0);
            }
        }
    }
    if g.count_positive() == 0 {
        return Err(Error::InvalidBox(
            bbox,
            format!("covers no pixel center at {h}x{w}"),
        ));
    }
    Ok(g)
}

/// Integer class-id raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        contract!(
            data.len() == height * width,
            "label data length {} != {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u32) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u32) {
        self.data[r * self.width + c] = v;
    }
}

/// One region per class present in `labels`; classes below
/// `min_area_fraction` of the image are dropped.
pub fn load_labelmap(
    labels: &LabelGrid,
    class_names: &[String],
    vocab: &Vocabulary,
    min_area_fraction: f64,
) -> Result<Vec<Region>> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in &labels.data {
        if id as usize >= class_names.len() {
            return Err(Error::schema(
                "labels",
                format!("class id {id} has no name ({} classes)", class_names.len()),
            ));
        }
        *counts.entry(id).or_default() += 1;
    }
    let total = labels.data.len() as f64;
    let mut regions = Vec::new();
    for (id, count) in counts {
        if (count as f64) / total < min_area_fraction {
            continue;
        }
        let prompt = tokenize(&class_names[id as usize], vocab)?;
        let data = labels
            .data
            .iter()
            .map(|&l| if l == id { 1.0 } else { 0.0 })
            .collect();
        regions.push(Region {
            prompt,
            mask: Grid::from_vec(labels.height, labels.width, data)?,
            source: RegionSource::LabelMap { class_id: id },
        });
    }
    Ok(regions)
}

/// A region mask resampled to every attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    levels: BTreeMap<LayerId, Grid>,
}

impl MaskPyramid {
    pub fn level(&self, layer: LayerId) -> Option<&Grid> {
        self.levels.get(&layer)
    }

    pub fn levels(&self) -> impl Iterator<Item = (LayerId, &Grid)> {
        self.levels.iter().map(|(k, v)| (*k, v))
    }
}

pub fn build_mask_pyramid(
    mask: &Grid,
    layers: &[LayerDims],
    mode: ResizeMode,
) -> Result<MaskPyramid> {
    let mut levels = BTreeMap::new();
    for l in layers {
        contract!(
            l.height >= 1 && l.width >= 1,
            "layer {:?} has empty dims",
            l.id
        );
        levels.insert(l.id, resize_mask(mask, l.height, l.width, mode)?);
    }
    Ok(MaskPyramid { levels })
}

/// Flattened `(H·W) x N` mask of one layer, identical across heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatMask {
    pub layer: LayerId,
    pub matrix: Matrix,
    /// Caption token span this mask covers, for the substring form.
    pub span: Option<(usize, usize)>,
}

/// Caption columns and every region BOS/EOS are all-ones; region content
/// columns carry the flattened region mask. Padding never enters attention,
/// so there are exactly `Σ n_i` columns.
pub fn assemble_concat_mask(
    pyramids: &[MaskPyramid],
    prompt: &ConcatenatedPrompt,
    layer: LayerDims,
) -> Result<ConcatMask> {
    contract!(
        pyramids.len() == prompt.region_count(),
        "{} pyramids for {} region segments",
        pyramids.len(),
        prompt.region_count()
    );
    let mut m = Matrix::filled(layer.pixels(), prompt.total_len(), 1.0);
    for (i, (seg, pyr)) in prompt.segments()[1..].iter().zip(pyramids).enumerate() {
        let level = pyr.level(layer.id).ok_or_else(|| {
            Error::Contract(format!("pyramid {i} has no level for layer {:?}", layer.id))
        })?;
        contract!(
            level.dims() == (layer.height, layer.width),
            "pyramid {i} level is {:?}, layer expects {}x{}",
            level.dims(),
            layer.height,
            layer.width
        );
        for col in seg.content() {
            for (j, &b) in level.data().iter().enumerate() {
                m.set(j, col, b);
            }
        }
    }
    Ok(ConcatMask {
        layer: layer.id,
        matrix: m,
        span: None,
    })
}

/// Mask over the caption's own `n_0` columns with the region mask broadcast
/// to `span = (start, len)` and zeros elsewhere.
pub fn assemble_substring_mask(
    pyramid: &MaskPyramid,
    span: (usize, usize),
    caption_len: usize,
    layer: LayerId,
) -> Result<ConcatMask> {
    let (start, len) = span;
    contract!(
        len >= 1 && start + len <= caption_len,
        "span {:?} outside caption of length {}",
        span,
        caption_len
    );
    let level = pyramid
        .level(layer)
        .ok_or_else(|| Error::Contract(format!("pyramid has no level for layer {layer:?}")))?;
    let mut m = Matrix::zeros(level.len(), caption_len);
    for (j, &b) in level.data().iter().enumerate() {
        for col in start..start + len {
            m.set(j, col, b);
        }
    }
    Ok(ConcatMask {
        layer,
        matrix: m,
        span: Some(span),
    })
}

/// Dims of `id` among `layers`.
pub fn find_layer(layers: &[LayerDims], id: LayerId) -> Option<LayerDims> {
    layers.iter().find(|l| l.id == id).copied()
}

/// Left/right boxes in pixel coordinates `[x0, y0, x1, y1]`, each leaving
/// `margin` pixels to the border and to the vertical midline.
pub fn two_object_layout_px(h: f64, w: f64, margin: f64) -> Result<([f64; 4], [f64; 4])> {
    if !(w / 2.0 - 2.0 * margin > 0.0 && h - 2.0 * margin > 0.0 && margin >= 0.0) {
        return Err(Error::InvalidBox(
            [margin, margin, w / 2.0 - margin, h - margin],
            format!("margin {margin} does not fit a {h}x{w} canvas"),
        ));
    }
    let left = [margin, margin, w / 2.0 - margin, h - margin];
    let right = [w / 2.0 + margin, margin, w - margin, h - margin];
    Ok((left, right))
}

/// Same layout, normalized to `[0, 1]`.
pub fn two_object_layout(h: usize, w: usize, margin: f64) -> Result<([f64; 4], [f64; 4])> {
    let (hf, wf) = (h as f64, w as f64);
    let (l, r) = two_object_layout_px(hf, wf, margin)?;
    let norm = |b: [f64; 4]| [b[0] / wf, b[1] / hf, b[2] / wf, b[3] / hf];
    Ok((norm(l), norm(r)))
}

// --- scene files ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFile {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r#box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMapFile {
    /// 8-bit single-channel PNG of class ids.
    pub png: PathBuf,
    /// Sidecar JSON `{"classes": ["road", "sky", ...]}`.
    pub classes: PathBuf,
    #[serde(default = "default_min_area")]
    pub min_area_fraction: f64,
}

fn default_min_area() -> f64 {
    DEFAULT_MIN_AREA_FRACTION
}

fn default_lambda_caption() -> f64 {
    1.0
}

fn default_lambda_region() -> f64 {
    10.0
}

/// On-disk scene schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub caption: String,
    pub size: [usize; 2],
    #[serde(default)]
    pub regions: Vec<RegionFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labelmap: Option<LabelMapFile>,
    #[serde(default = "default_lambda_caption")]
    pub lambda_caption: f64,
    #[serde(default = "default_lambda_region")]
    pub lambda_region: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        cause: e,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads an 8-bit grayscale PNG as raw byte values.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        cause: e,
    })?;
    let g = img.to_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}

pub fn load_labelmap_files(
    png: &Path,
    classes: &Path,
    vocab: &Vocabulary,
    min_area_fraction: f64,
) -> Result<(LabelGrid, Vec<Region>)> {
    let (h, w, raw) = read_gray_png(png)?;
    let labels = LabelGrid::new(h, w, raw.into_iter().map(u32::from).collect())?;
    let table: ClassTable = read_json(classes)?;
    let regions = load_labelmap(&labels, &table.classes, vocab, min_area_fraction)?;
    Ok((labels, regions))
}

pub fn parse_scene(path: &Path, vocab: &Vocabulary) -> Result<SceneSpec> {
    let file: SceneFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    scene_from_file(&file, base, vocab)
}

pub fn scene_from_file(file: &SceneFile, base: &Path, vocab: &Vocabulary) -> Result<SceneSpec> {
    let [h, w] = file.size;
    if h == 0 || w == 0 {
        return Err(Error::schema("size", "dimensions must be positive"));
    }
    if file.lambda_caption.is_nan() || file.lambda_caption <= 0.0 {
        return Err(Error::schema("lambda_caption", "must be positive"));
    }
    if file.lambda_region.is_nan() || file.lambda_region <= 0.0 {
        return Err(Error::schema("lambda_region", "must be positive"));
    }
    let caption =
        tokenize(&file.caption, vocab).map_err(|e| Error::schema("caption", e.to_string()))?;
    let mut scene = SceneSpec::new(caption, h, w);
    scene.lambda_caption = file.lambda_caption;
    scene.lambda_region = file.lambda_region;

    for (i, r) in file.regions.iter().enumerate() {
        let field = |f: &str| format!("regions[{i}].{f}");
        let prompt = tokenize(&r.prompt, vocab)
            .map_err(|e| Error::schema(field("prompt"), e.to_string()))?;
        let (mask, source) = match (&r.r#box, &r.mask_png) {
            (Some(b), None) => (
                rasterize_box(*b, h, w).map_err(|e| Error::schema(field("box"), e.to_string()))?,
                RegionSource::Box(*b),
            ),
            (None, Some(p)) => {
                let full = resolve(base, p);
                let (mh, mw, raw) = read_gray_png(&full)?;
                let g = Grid::from_vec(mh, mw, raw.iter().map(|v| *v as f64 / 255.0).collect())?;
                let g = resize_mask(&g, h, w, ResizeMode::Nearest)?;
                if g.count_positive() == 0 {
                    return Err(Error::schema(
                        field("mask_png"),
                        "mask has no positive pixel",
                    ));
                }
                (g, RegionSource::MaskPng(p.clone()))
            }
            _ => {
                return Err(Error::schema(
                    format!("regions[{i}]"),
                    "exactly one of \"box\" or \"mask_png\" is required",
                ))
            }
        };
        scene.regions.push(Region {
            prompt,
            mask,
            source,
        });
    }

    if let Some(lm) = &file.labelmap {
        let (_, regions) = load_labelmap_files(
            &resolve(base, &lm.png),
            &resolve(base, &lm.classes),
            vocab,
            lm.min_area_fraction,
        )?;
        for mut r in regions {
            if r.mask.dims() != (h, w) {
                r.mask = resize_mask(&r.mask, h, w, ResizeMode::Nearest)?;
            }
            scene.regions.push(r);
        }
    }
    Ok(scene)
}

/// Nearest-neighbor resampling of a label raster.
pub fn resize_labels(labels: &LabelGrid, h: usize, w: usize) -> LabelGrid {
    let mut out = LabelGrid::filled(h, w, 0);
    for r in 0..h {
        let sr = ((2 * r + 1) * labels.height / (2 * h)).min(labels.height - 1);
        for c in 0..w {
            let sc = ((2 * c + 1) * labels.width / (2 * w)).min(labels.width - 1);
            out.set(r, c, labels.get(sr, sc));
        }
    }
    out
}
