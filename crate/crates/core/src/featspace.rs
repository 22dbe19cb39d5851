//! Grayscale images, feature maps and the hand-built feature extractors that
//! stand in for intermediate CNN responses.
//!
//! Feature maps are stored channel-major (`data[(ch * rows + r) * cols + c]`)
//! and flatten to vectors in that same order, which is the layout the
//! convolutional adaptation families index into.

use crate::detect::BBox;
use crate::error::{check_dim, Error, Result};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        check_dim(height * width, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Uniform image; `value` is clamped into `[0, 1]`.
    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value.clamp(0.0, 1.0); height * width])
    }

    /// Builds an image from `f(row, col)`, clamping each value into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub(crate) fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value.clamp(0.0, 1.0);
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Snap every pixel to the nearest 8-bit level (round half up), which is
    /// exactly what a PGM write/read cycle does.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| quantize_u8(p) as f64 / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Sample the axis-aligned region `(x, y, w, h)` (pixel units, may extend
    /// past the border) onto an `out_h x out_w` grid with bilinear
    /// interpolation and border replication.
    pub fn resample(
        &self,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "resample region must have positive size, got {w}x{h}"
            )));
        }
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let mut pixels = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let fy = y + (i as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            let y0 = y0 as isize;
            for j in 0..out_w {
                let fx = x + (j as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let x0 = x0 as isize;
                let top = self.get_clamped(y0, x0) * (1.0 - tx) + self.get_clamped(y0, x0 + 1) * tx;
                let bottom =
                    self.get_clamped(y0 + 1, x0) * (1.0 - tx) + self.get_clamped(y0 + 1, x0 + 1) * tx;
                pixels.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
        Self::new(out_h, out_w, pixels)
    }

    /// Central-difference gradients `(gx, gy)` with replicated borders.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut gx = Vec::with_capacity(self.pixels.len());
        let mut gy = Vec::with_capacity(self.pixels.len());
        for r in 0..h {
            for c in 0..w {
                gx.push(0.5 * (self.get_clamped(r, c + 1) - self.get_clamped(r, c - 1)));
                gy.push(0.5 * (self.get_clamped(r + 1, c) - self.get_clamped(r - 1, c)));
            }
        }
        (gx, gy)
    }
}

/// Round-half-up 8-bit quantization of a value in `[0, 1]`.
pub fn quantize_u8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Luma conversion `0.299 r + 0.587 g + 0.114 b`.
pub fn to_grayscale(height: usize, width: usize, r: &[f64], g: &[f64], b: &[f64]) -> Result<GrayImage> {
    let n = height * width;
    for ch in [r, g, b] {
        check_dim(n, ch.len())?;
    }
    let pixels = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(height, width, pixels)
}

/// Channel-major `channels x rows x cols` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(channels * rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature map contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.rows + r) * self.cols + c]
    }

    #[inline]
    fn get_mut(&mut self, ch: usize, r: usize, c: usize) -> &mut f64 {
        &mut self.data[(ch * self.rows + r) * self.cols + c]
    }

    /// Inverse of [`flatten`] given the recorded shape.
    pub fn unflatten(shape: (usize, usize, usize), v: &FeatureVector) -> Result<Self> {
        Self::new(shape.0, shape.1, shape.2, v.data.clone())
    }
}

/// Flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    data: Vec<f64>,
}

impl FeatureVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("feature vector must have dim >= 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature vector contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Per-cell partition along one axis: equal floor-divided cells, the last one
/// absorbing the remainder.
fn cell_bounds(len: usize, cells: usize, idx: usize) -> (usize, usize) {
    let step = len / cells;
    let start = idx * step;
    let end = if idx + 1 == cells { len } else { start + step };
    (start, end)
}

/// Three-channel grid descriptor: per-cell mean intensity, mean `|gx|` and
/// mean `|gy|`.
pub fn extract_grid(img: &GrayImage, rows: usize, cols: usize) -> Result<FeatureMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid rows and cols must be positive".into()));
    }
    if rows > img.height() || cols > img.width() {
        return Err(Error::InvalidArgument(format!(
            "grid {rows}x{cols} exceeds image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (gx, gy) = img.gradients();
    let w = img.width();
    let mut out = FeatureMap::zeros(3, rows, cols);
    for cr in 0..rows {
        let (r0, r1) = cell_bounds(img.height(), rows, cr);
        for cc in 0..cols {
            let (c0, c1) = cell_bounds(w, cols, cc);
            let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for r in r0..r1 {
                for c in c0..c1 {
                    let i = r * w + c;
                    s += img.pixels[i];
                    sx += gx[i].abs();
                    sy += gy[i].abs();
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            *out.get_mut(0, cr, cc) = s / n;
            *out.get_mut(1, cr, cc) = sx / n;
            *out.get_mut(2, cr, cc) = sy / n;
        }
    }
    Ok(out)
}

/// Epsilon of the per-cell HOG normalization `v / sqrt(|v|^2 + eps^2)`.
pub const HOG_EPS: f64 = 1e-6;

/// Unsigned-orientation HOG with per-cell L2 normalization.
///
/// Bin `k` is centred on `k * 180 / n_orient` degrees and each pixel's
/// gradient magnitude is split linearly between the two nearest bins
/// (circularly). Pixels beyond the last whole cell are ignored.
pub fn extract_hog(img: &GrayImage, cell_px: usize, n_orient: usize) -> Result<FeatureMap> {
    if cell_px < 2 || n_orient < 2 {
        return Err(Error::InvalidArgument(format!(
            "hog requires cell_px >= 2 and n_orient >= 2, got {cell_px} and {n_orient}"
        )));
    }
    if img.height() < cell_px || img.width() < cell_px {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than one {cell_px}px cell",
            img.height(),
            img.width()
        )));
    }
    let rows = img.height() / cell_px;
    let cols = img.width() / cell_px;
    let (gx, gy) = img.gradients();
    let w = img.width();
    let bin_width = 180.0 / n_orient as f64;
    let mut out = FeatureMap::zeros(n_orient, rows, cols);
    for r in 0..rows * cell_px {
        let cr = r / cell_px;
        for c in 0..cols * cell_px {
            let i = r * w + c;
            let mag = gx[i].hypot(gy[i]);
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let t = angle / bin_width;
            let lo = t.floor();
            let frac = t - lo;
            let lo = (lo as usize) % n_orient;
            let hi = (lo + 1) % n_orient;
            let cc = c / cell_px;
            *out.get_mut(lo, cr, cc) += mag * (1.0 - frac);
            *out.get_mut(hi, cr, cc) += mag * frac;
        }
    }
    for cr in 0..rows {
        for cc in 0..cols {
            let sq: f64 = (0..n_orient).map(|k| out.get(k, cr, cc).powi(2)).sum();
            let scale = 1.0 / (sq + HOG_EPS * HOG_EPS).sqrt();
            for k in 0..n_orient {
                *out.get_mut(k, cr, cc) *= scale;
            }
        }
    }
    Ok(out)
}

/// Per-channel max pooling over `k x k` windows.
pub fn max_pool(m: &FeatureMap, k: usize, stride: usize) -> Result<FeatureMap> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool size and stride must be positive".into()));
    }
    if k > m.rows || k > m.cols {
        return Err(Error::InvalidArgument(format!(
            "pool size {k} exceeds map {}x{}",
            m.rows, m.cols
        )));
    }
    let rows = (m.rows - k) / stride + 1;
    let cols = (m.cols - k) / stride + 1;
    let mut out = FeatureMap::zeros(m.channels, rows, cols);
    for ch in 0..m.channels {
        for r in 0..rows {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                for dr in 0..k {
                    for dc in 0..k {
                        best = best.max(m.get(ch, r * stride + dr, c * stride + dc));
                    }
                }
                *out.get_mut(ch, r, c) = best;
            }
        }
    }
    Ok(out)
}

pub fn flatten(m: &FeatureMap) -> FeatureVector {
    FeatureVector::from_vec_unchecked(m.data.clone())
}

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub fn l2_normalize(v: &FeatureVector) -> FeatureVector {
    let n = v.norm();
    if n > ZERO_NORM {
        FeatureVector::from_vec_unchecked(v.data.iter().map(|x| x / n).collect())
    } else {
        FeatureVector::from_vec_unchecked(vec![0.0; v.dim()])
    }
}

/// Which hand-built descriptor the canonical pipeline computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extractor {
    Grid { rows: usize, cols: usize },
    Hog { cell_px: usize, n_orient: usize },
}

/// The canonical crop-to-vector pipeline shared by gallery exemplars,
/// training pairs, proposals and calibration patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub extractor: Extractor,
    /// Side of the square the crop is resampled to.
    pub canonical_size: usize,
    /// Max-pool window; 0 disables pooling.
    pub pool_k: usize,
    pub pool_stride: usize,
    /// Context padding added on every side of a box, as a fraction of its
    /// width (horizontally) and height (vertically).
    pub context: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            extractor: Extractor::Hog {
                cell_px: 8,
                n_orient: 9,
            },
            canonical_size: 64,
            pool_k: 2,
            pool_stride: 2,
            context: 0.125,
        }
    }
}

impl FeatureConfig {
    /// Shape of the feature map after extraction and pooling.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let probe = GrayImage::filled(self.canonical_size, self.canonical_size, 0.5)?;
        Ok(self.map(&probe)?.shape())
    }

    pub fn dim(&self) -> Result<usize> {
        let (c, r, w) = self.output_shape()?;
        Ok(c * r * w)
    }

    /// Extract and pool an already-canonical image.
    pub fn map(&self, canonical: &GrayImage) -> Result<FeatureMap> {
        let m = match self.extractor {
            Extractor::Grid { rows, cols } => extract_grid(canonical, rows, cols)?,
            Extractor::Hog { cell_px, n_orient } => extract_hog(canonical, cell_px, n_orient)?,
        };
        if self.pool_k == 0 {
            Ok(m)
        } else {
            max_pool(&m, self.pool_k, self.pool_stride)
        }
    }

    /// Crop `bbox` (plus context), resample to the canonical square, extract,
    /// pool and flatten.
    pub fn crop_features(&self, img: &GrayImage, bbox: &BBox) -> Result<FeatureVector> {
        let (w, h) = (bbox.w as f64, bbox.h as f64);
        let crop = img.resample(
            bbox.x as f64 - self.context * w,
            bbox.y as f64 - self.context * h,
            w * (1.0 + 2.0 * self.context),
            h * (1.0 + 2.0 * self.context),
            self.canonical_size,
            self.canonical_size,
        )?;
        Ok(flatten(&self.map(&crop)?))
    }
}
