//! Per-exemplar affine score calibration.
//!
//! Each exemplar's raw similarity is rescaled as `c_i * s + d_i`, with `c_i`
//! and `d_i` chosen so that the mean score over a large set of random patches
//! maps to -1 and a high percentile maps to 0. [`fold`] bakes the result into
//! a [`FoldedGallery`].

use rand::Rng;

use crate::detect::BBox;
use crate::error::{check_dim, Error, Result};
use crate::featspace::{norm, FeatureConfig, FeatureVector, GrayImage, ZERO_NORM};
use crate::seed;
use crate::simkit::{score_folded_batch, score_gallery, FoldedGallery, Gallery, Similarity, INVALID_SCORE};

pub const DEFAULT_PERCENTILE: f64 = 99.99;
pub const DEFAULT_FIT_EPS: f64 = 1e-9;
pub const DEFAULT_PATCH_COUNT: usize = 10_000;
/// Aspect jitter range for random patches (width over height).
pub const PATCH_ASPECT_RANGE: (f64, f64) = (0.75, 1.33);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreStats {
    pub mean: Vec<f64>,
    pub percentile: Vec<f64>,
    pub level: f64,
    pub n_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams {
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CalibrationParams {
    /// `c = 1, d = 0` for every exemplar.
    pub fn identity(n: usize) -> Self {
        Self {
            c: vec![1.0; n],
            d: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Draw `n` random boxes: a random image, a side of `[min_frac, max_frac]`
/// times its shorter side, aspect jitter, uniform position. Each box is
/// returned with the index of the image it lies in.
pub fn sample_patch_boxes(
    images: &[GrayImage],
    n: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
) -> Result<Vec<(usize, BBox)>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to sample patches from".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 patches".into()));
    }
    if !(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "patch fractions must satisfy 0 < {min_frac} <= {max_frac} <= 1"
        )));
    }
    let mut rng = seed::rng(seed, seed::stream::PATCHES, 0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.gen_range(0..images.len());
        let img = &images[idx];
        let (iw, ih) = (img.width() as f64, img.height() as f64);
        let frac = if max_frac > min_frac {
            rng.gen_range(min_frac..=max_frac)
        } else {
            min_frac
        };
        let aspect: f64 = rng.gen_range(PATCH_ASPECT_RANGE.0..=PATCH_ASPECT_RANGE.1);
        let side = frac * iw.min(ih);
        let w = (side * aspect.sqrt()).round().clamp(1.0, iw) as i32;
        let h = (side / aspect.sqrt()).round().clamp(1.0, ih) as i32;
        let x = rng.gen_range(0..=img.width() as i32 - w);
        let y = rng.gen_range(0..=img.height() as i32 - h);
        out.push((idx, BBox::new(x, y, w, h)?));
    }
    Ok(out)
}

/// Random patches passed through the canonical feature pipeline.
pub fn sample_random_patches(
    images: &[GrayImage],
    n: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
    features: &FeatureConfig,
) -> Result<Vec<FeatureVector>> {
    sample_patch_boxes(images, n, min_frac, max_frac, seed)?
        .into_iter()
        .map(|(i, b)| features.crop_features(&images[i], &b))
        .collect()
}

/// Linear-interpolation percentile of ascending-sorted samples.
pub fn percentile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cosine scores of every patch against every exemplar, exemplar-major.
fn cosine_table(g: &Gallery, patches: &[FeatureVector]) -> Result<Vec<Vec<f64>>> {
    // Unit rows with c = 1, d = 0; zero-norm rows stay zero so they score 0
    // like the cosine zero-norm guard.
    let mut weight = Vec::with_capacity(g.len() * g.dim());
    for y in g.features() {
        let n = y.norm();
        if n < ZERO_NORM {
            weight.extend(std::iter::repeat(0.0).take(g.dim()));
        } else {
            weight.extend(y.as_slice().iter().map(|v| v / n));
        }
    }
    let unit = FoldedGallery::from_parts(
        g.dim(),
        weight,
        vec![0.0; g.len()],
        g.meta().to_vec(),
        vec![true; g.len()],
    );
    let by_patch = score_folded_batch(&unit, patches)?;
    let mut by_exemplar = vec![Vec::with_capacity(patches.len()); g.len()];
    for row in by_patch {
        for (i, s) in row.into_iter().enumerate() {
            by_exemplar[i].push(s);
        }
    }
    Ok(by_exemplar)
}

pub fn compute_stats(
    g: &Gallery,
    patches: &[FeatureVector],
    kind: Similarity,
    level: f64,
) -> Result<PatchScoreStats> {
    if patches.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 patches".into()));
    }
    if !(level > 0.0 && level < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile level {level} outside (0, 100)")));
    }
    for p in patches {
        check_dim(g.dim(), p.dim())?;
    }
    let table = if kind == Similarity::Cosine {
        cosine_table(g, patches)?
    } else {
        let mut t = vec![Vec::with_capacity(patches.len()); g.len()];
        for p in patches {
            for (i, s) in score_gallery(g, p, kind)?.into_iter().enumerate() {
                t[i].push(s);
            }
        }
        t
    };
    let mut mean = Vec::with_capacity(g.len());
    let mut percentile = Vec::with_capacity(g.len());
    for mut scores in table {
        mean.push(scores.iter().sum::<f64>() / scores.len() as f64);
        scores.sort_by(f64::total_cmp);
        percentile.push(percentile_sorted(&scores, level));
    }
    Ok(PatchScoreStats {
        mean,
        percentile,
        level,
        n_patches: patches.len(),
    })
}

pub fn fit_calibration(stats: &PatchScoreStats, eps: f64) -> CalibrationParams {
    let n = stats.mean.len();
    let mut out = CalibrationParams {
        c: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for (&mu, &q) in stats.mean.iter().zip(&stats.percentile) {
        let spread = q - mu;
        if spread > eps && spread.is_finite() {
            out.c.push(1.0 / spread);
            out.d.push(-q / spread);
            out.valid.push(true);
        } else {
            out.c.push(0.0);
            out.d.push(INVALID_SCORE);
            out.valid.push(false);
        }
    }
    out
}

pub fn apply_calibration(params: &CalibrationParams, raw: &[f64]) -> Result<Vec<f64>> {
    check_dim(params.len(), raw.len())?;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if params.valid[i] {
                params.c[i] * s + params.d[i]
            } else {
                INVALID_SCORE
            }
        })
        .collect())
}

/// Fold calibration into the scoring matrix. Zero-norm exemplars are marked
/// invalid.
pub fn fold(g: &Gallery, params: &CalibrationParams) -> Result<FoldedGallery> {
    check_dim(g.len(), params.len())?;
    let dim = g.dim();
    let mut weight = Vec::with_capacity(g.len() * dim);
    let mut bias = Vec::with_capacity(g.len());
    let mut valid = Vec::with_capacity(g.len());
    for (i, y) in g.features().iter().enumerate() {
        let n = norm(y.as_slice());
        if params.valid[i] && n >= ZERO_NORM {
            let scale = params.c[i] / n;
            weight.extend(y.as_slice().iter().map(|v| v * scale));
            bias.push(params.d[i]);
            valid.push(true);
        } else {
            weight.extend(std::iter::repeat(0.0).take(dim));
            bias.push(INVALID_SCORE);
            valid.push(false);
        }
    }
    Ok(FoldedGallery::from_parts(dim, weight, bias, g.meta().to_vec(), valid))
}
