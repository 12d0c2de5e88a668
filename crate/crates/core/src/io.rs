//! Image, heatmap, attention-record and manifest I/O.
//!
//! PNG output is 8-bit RGB with fixed encoder settings, so equal images
//! always produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::diffusion::{DenoiserConfig, SamplerConfig};
use crate::error::{contract, Error, Result};
use crate::eval::{DetectorConfig, ImageTruth};
use crate::layout::LayerId;
use crate::numerics::{resize, Grid, ResizeMode, RgbImage};
use crate::text::{Palette, Rgb};

fn encode(
    path: &Path,
    raw: &[u8],
    w: usize,
    h: usize,
    color: ExtendedColorType,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Default, FilterType::Adaptive)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            cause: e,
        })?;
    Ok(buf)
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    encode(
        Path::new("<memory>"),
        &image.to_rgb8(),
        image.width(),
        image.height(),
        ExtendedColorType::Rgb8,
    )
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let bytes = encode(
        path,
        &image.to_rgb8(),
        image.width(),
        image.height(),
        ExtendedColorType::Rgb8,
    )?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary `P6` PPM.
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    out
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            cause: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [Grid::zeros(h, w), Grid::zeros(h, w), Grid::zeros(h, w)];
    for (i, px) in img.pixels().enumerate() {
        for (k, p) in planes.iter_mut().enumerate() {
            p.data_mut()[i] = px.0[k] as f64 / 255.0;
        }
    }
    RgbImage::from_planes(planes)
}

/// Head-averaged attention to `token`, scaled to the column maximum and
/// upsampled (nearest) to `out_h x out_w`, as an 8-bit grayscale PNG.
pub fn write_heatmap(
    path: &Path,
    record: &AttentionRecord,
    height: usize,
    width: usize,
    token: usize,
    out_h: usize,
    out_w: usize,
) -> Result<()> {
    contract!(
        height * width == record.pixels,
        "heatmap dims {}x{} do not match {} record pixels",
        height,
        width,
        record.pixels
    );
    contract!(
        token < record.tokens,
        "token {} outside {} record tokens",
        token,
        record.tokens
    );
    let mean = record.mean_over_heads();
    let col: Vec<f64> = (0..record.pixels).map(|j| mean.get(j, token)).collect();
    let max = col.iter().cloned().fold(0.0, f64::max);
    let scaled = col
        .iter()
        .map(|v| if max > 0.0 { v / max } else { 0.0 })
        .collect();
    let grid = resize(
        &Grid::from_vec(height, width, scaled)?,
        out_h,
        out_w,
        ResizeMode::Nearest,
    )?;
    let raw: Vec<u8> = grid
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let bytes = encode(path, &raw, out_w, out_h, ExtendedColorType::L8)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian dump: per record the `u32` header `layer, step, heads,
/// pixels, tokens`, then `heads·pixels·tokens` `f64` values, head-major.
pub fn encode_records(records: &[AttentionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        for v in [r.layer.0, r.step, r.heads, r.pixels, r.tokens] {
            out.extend((v as u32).to_le_bytes());
        }
        for v in &r.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<AttentionRecord>> {
    let mut cur = Cursor::new(bytes);
    let mut out = Vec::new();
    let truncated = || Error::Eval("truncated attention record dump".into());
    while (cur.position() as usize) < bytes.len() {
        let mut hdr = [0u32; 5];
        for v in hdr.iter_mut() {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| truncated())?;
            *v = u32::from_le_bytes(b);
        }
        let [layer, step, heads, pixels, tokens] = hdr.map(|v| v as usize);
        let n = heads * pixels * tokens;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b).map_err(|_| truncated())?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(AttentionRecord {
            layer: LayerId(layer),
            step,
            heads,
            pixels,
            tokens,
            data,
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_records(records))
        .map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    decode_records(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        cause: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        cause: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmittedFile {
    /// Relative to the manifest's output directory.
    pub path: PathBuf,
    pub kind: String,
    pub seed: u64,
}

/// Everything needed to rerun a `generate` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scene: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    pub config: SamplerConfig,
    pub denoiser: DenoiserConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub outputs: OutputOptions,
    pub files: Vec<EmittedFile>,
}

/// Optional artifacts of a `generate` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputOptions {
    pub ppm: bool,
    pub heatmaps: bool,
    pub records: bool,
    /// Every `record_stride`-th ordinary step is recorded.
    pub record_stride: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            ppm: false,
            heatmaps: false,
            records: false,
            record_stride: 10,
        }
    }
}

/// Ground truth consumed by batch evaluation. Paths are relative to the
/// run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub palette: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    pub detector: DetectorConfig,
    pub images: Vec<GroundTruthImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    pub truth: ImageTruth,
}

impl GroundTruthFile {
    pub fn from_palette(palette: &Palette, detector: DetectorConfig) -> Self {
        Self {
            palette: palette.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
            detector,
            images: Vec::new(),
        }
    }

    pub fn palette(&self) -> Result<Palette> {
        let mut out = Palette::new();
        for (k, v) in &self.palette {
            if v.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::schema(
                    format!("palette.{k}"),
                    "color outside [0, 1]",
                ));
            }
            out.insert(k.clone(), Rgb(*v));
        }
        if out.is_empty() {
            return Err(Error::schema("palette", "must not be empty"));
        }
        Ok(out)
    }
}
