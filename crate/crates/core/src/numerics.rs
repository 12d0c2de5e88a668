//! Dense row-major kernels: matrix product, row softmax, elementwise product
//! and grid resampling. Everything is `f64` and summation order is fixed, so
//! results are bit-reproducible across runs.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == rows * cols,
            "matrix data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        contract!(
            data.iter().all(|v| v.is_finite()),
            "matrix contains non-finite values"
        );
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + block.cols]
                .copy_from_slice(block.row(r));
        }
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn hconcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        contract!(
            blocks.iter().all(|b| b.rows == rows),
            "hconcat: row counts differ"
        );
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            out.set_col_block(at, b);
            at += b.cols;
        }
        Ok(out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vconcat(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        contract!(
            blocks.iter().all(|b| b.cols == cols),
            "vconcat: column counts differ"
        );
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.data.len()).sum());
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        contract!(
            self.shape() == other.shape(),
            "add: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        contract!(
            self.shape() == other.shape(),
            "add_assign: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product. `c[i][j]` accumulates `a[i][k] * b[k][j]` for
/// ascending `k`, which makes the result independent of loop blocking.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    contract!(
        a.cols == b.rows,
        "matmul: {}x{} times {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    contract!(
        a.cols == b.cols,
        "matmul_transposed: {}x{} times ({}x{})ᵀ",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let br = b.row(j);
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `scale * logits` with per-row max subtraction.
pub fn softmax_rows(logits: &Matrix, scale: f64) -> Matrix {
    assert!(scale > 0.0, "softmax scale must be positive");
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) * scale).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    contract!(
        a.shape() == b.shape(),
        "hadamard: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Single-channel 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == height * width,
            "grid data length {} != {}x{}",
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

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        Self {
            height: rows.len(),
            width,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.count_positive() as f64 / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Keeps binary masks binary.
    #[default]
    Nearest,
    Bilinear,
}

#[inline]
fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    // half-pixel centers: src = floor((dst + 0.5) * src_len / dst_len)
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

#[inline]
fn bilinear_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, x - lo as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact when a == b, so constant grids stay constant
    a + (b - a) * t
}

/// Resamples any grid (unbounded values) with half-pixel-center alignment.
pub fn resize(grid: &Grid, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<Grid> {
    contract!(
        target_h >= 1 && target_w >= 1,
        "resize target must be at least 1x1, got {}x{}",
        target_h,
        target_w
    );
    contract!(!grid.is_empty(), "resize of an empty grid");
    let (sh, sw) = grid.dims();
    let mut out = Grid::zeros(target_h, target_w);
    match mode {
        ResizeMode::Nearest => {
            let cols: Vec<usize> = (0..target_w)
                .map(|c| nearest_index(c, sw, target_w))
                .collect();
            for r in 0..target_h {
                let sr = nearest_index(r, sh, target_h);
                for (c, &sc) in cols.iter().enumerate() {
                    out.data[r * target_w + c] = grid.data[sr * sw + sc];
                }
            }
        }
        ResizeMode::Bilinear => {
            let cols: Vec<_> = (0..target_w)
                .map(|c| bilinear_coord(c, sw, target_w))
                .collect();
            for r in 0..target_h {
                let (r0, r1, tr) = bilinear_coord(r, sh, target_h);
                for (c, &(c0, c1, tc)) in cols.iter().enumerate() {
                    let top = lerp(grid.get(r0, c0), grid.get(r0, c1), tc);
                    let bot = lerp(grid.get(r1, c0), grid.get(r1, c1), tc);
                    out.data[r * target_w + c] = lerp(top, bot, tr);
                }
            }
        }
    }
    Ok(out)
}

/// Resamples a mask in `[0, 1]`; output is clamped to `[0, 1]`.
pub fn resize_mask(
    mask: &Grid,
    target_h: usize,
    target_w: usize,
    mode: ResizeMode,
) -> Result<Grid> {
    let out = resize(mask, target_h, target_w, mode)?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// 2x2 mean pooling; dims must be even.
pub fn avg_pool2(grid: &Grid) -> Result<Grid> {
    let (h, w) = grid.dims();
    contract!(
        h % 2 == 0 && w % 2 == 0,
        "avg_pool2 needs even dims, got {}x{}",
        h,
        w
    );
    let mut out = Grid::zeros(h / 2, w / 2);
    for r in 0..h / 2 {
        for c in 0..w / 2 {
            let s = grid.get(2 * r, 2 * c)
                + grid.get(2 * r, 2 * c + 1)
                + grid.get(2 * r + 1, 2 * c)
                + grid.get(2 * r + 1, 2 * c + 1);
            out.set(r, c, s * 0.25);
        }
    }
    Ok(out)
}

/// Three-plane RGB image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    planes: [Grid; 3],
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self {
            planes: rgb.map(|v| Grid::filled(height, width, v)),
        }
    }

    pub fn from_planes(planes: [Grid; 3]) -> Result<Self> {
        let d = planes[0].dims();
        contract!(
            planes.iter().all(|p| p.dims() == d),
            "RGB planes disagree in size"
        );
        Ok(Self { planes })
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn plane(&self, c: usize) -> &Grid {
        &self.planes[c]
    }

    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        [
            self.planes[0].get(r, c),
            self.planes[1].get(r, c),
            self.planes[2].get(r, c),
        ]
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        for (p, v) in self.planes.iter_mut().zip(rgb) {
            p.set(r, c, v);
        }
    }

    /// Paints the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f64; 3]) {
        for r in y0..y1.min(self.height()) {
            for c in x0..x1.min(self.width()) {
                self.set(r, c, rgb);
            }
        }
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let mut out = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                for v in self.get(r, c) {
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &RgbImage) -> f64 {
        assert_eq!(
            self.dims(),
            other.dims(),
            "max_abs_diff on mismatched images"
        );
        self.planes
            .iter()
            .zip(&other.planes)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
