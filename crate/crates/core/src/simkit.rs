//! Similarity functions and dense gallery scoring.
//!
//! All similarities are oriented so that higher means more similar. The
//! [`FoldedGallery`] holds unit-normalized exemplar rows pre-multiplied by the
//! calibration scale, so calibrated cosine scoring of a query is a single
//! matrix-vector product plus bias.

use std::collections::HashSet;

use crate::error::{check_dim, Error, Result};
use crate::featspace::{dot, l2_normalize, norm, FeatureVector, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Similarity {
    L2,
    Dot,
    Cosine,
    SquaredCosine,
}

impl Similarity {
    pub const ALL: [Similarity; 4] = [
        Similarity::L2,
        Similarity::Dot,
        Similarity::Cosine,
        Similarity::SquaredCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Similarity::L2 => "l2",
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
            Similarity::SquaredCosine => "squared_cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Cosine with the zero-norm guard: 0 when either side is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn sim_eval(kind: Similarity, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(sim_raw(kind, a.as_slice(), b.as_slice()))
}

fn sim_raw(kind: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Similarity::L2 => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Similarity::Dot => dot(a, b),
        Similarity::Cosine => cosine(a, b),
        Similarity::SquaredCosine => -(1.0 - cosine(a, b)).powi(2),
    }
}

/// Metadata attached to one rendered exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMeta {
    pub exemplar_id: u32,
    pub model_id: u32,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance_index: u8,
    /// Width over height of the exemplar's tight silhouette box.
    pub aspect_ratio: f64,
}

impl ExemplarMeta {
    pub fn new(
        exemplar_id: u32,
        model_id: u32,
        azimuth: f64,
        elevation: f64,
        distance_index: u8,
        aspect_ratio: f64,
    ) -> Result<Self> {
        let m = Self {
            exemplar_id,
            model_id,
            azimuth,
            elevation,
            distance_index,
            aspect_ratio,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.aspect_ratio > 0.0 && self.aspect_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "exemplar {} has non-positive aspect ratio {}",
                self.exemplar_id, self.aspect_ratio
            )));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(Error::InvalidArgument(format!(
                "exemplar {} azimuth {} outside [0, 360)",
                self.exemplar_id, self.azimuth
            )));
        }
        Ok(())
    }
}

/// Stacked exemplar features with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    dim: usize,
    meta: Vec<ExemplarMeta>,
    features: Vec<FeatureVector>,
    ids: HashSet<u32>,
}

impl Gallery {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            meta: Vec::new(),
            features: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn push(&mut self, meta: ExemplarMeta, feature: FeatureVector) -> Result<()> {
        check_dim(self.dim, feature.dim())?;
        meta.validate()?;
        if !self.ids.insert(meta.exemplar_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate exemplar id {}",
                meta.exemplar_id
            )));
        }
        self.meta.push(meta);
        self.features.push(feature);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[ExemplarMeta] {
        &self.meta
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ExemplarMeta, &FeatureVector)> {
        self.meta.iter().zip(&self.features)
    }

    /// New gallery holding the entries at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Gallery::new(self.dim);
        for &i in indices {
            out.push(self.meta[i].clone(), self.features[i].clone())?;
        }
        Ok(out)
    }
}

pub fn score_gallery(g: &Gallery, v: &FeatureVector, kind: Similarity) -> Result<Vec<f64>> {
    check_dim(g.dim(), v.dim())?;
    Ok(g
        .features
        .iter()
        .map(|y| sim_raw(kind, v.as_slice(), y.as_slice()))
        .collect())
}

/// Calibrated gallery laid out as a scoring matrix: row `i` is
/// `c_i * y_i / |y_i|`, bias `i` is `d_i`. Invalid rows are zero with bias
/// `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedGallery {
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    meta: Vec<ExemplarMeta>,
    valid: Vec<bool>,
}

/// Score assigned to invalid exemplars.
pub const INVALID_SCORE: f64 = f64::NEG_INFINITY;

impl FoldedGallery {
    pub(crate) fn from_parts(
        dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        meta: Vec<ExemplarMeta>,
        valid: Vec<bool>,
    ) -> Self {
        debug_assert_eq!(weight.len(), dim * meta.len());
        debug_assert_eq!(bias.len(), meta.len());
        debug_assert_eq!(valid.len(), meta.len());
        Self {
            dim,
            weight,
            bias,
            meta,
            valid,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[ExemplarMeta] {
        &self.meta
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weight[i * self.dim..(i + 1) * self.dim]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub fn score_folded(fg: &FoldedGallery, v: &FeatureVector) -> Result<Vec<f64>> {
    check_dim(fg.dim, v.dim())?;
    let q = l2_normalize(v);
    Ok((0..fg.len())
        .map(|i| dot(fg.row(i), q.as_slice()) + fg.bias[i])
        .collect())
}

/// Score many queries at once; row `j` of the result holds the scores of
/// `queries[j]`. Same values as [`score_folded`] up to summation order.
pub fn score_folded_batch(fg: &FoldedGallery, queries: &[FeatureVector]) -> Result<Vec<Vec<f64>>> {
    let (m, n, k) = (queries.len(), fg.len(), fg.dim);
    let mut q = Vec::with_capacity(m * k);
    for v in queries {
        check_dim(k, v.dim())?;
        q.extend_from_slice(l2_normalize(v).as_slice());
    }
    if m == 0 || n == 0 {
        return Ok(vec![Vec::new(); m]);
    }
    let mut out = vec![0.0; m * n];
    // out (m x n) = q (m x k) * weight^T (k x n)
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            q.as_ptr(),
            k as isize,
            1,
            fg.weight.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out
        .chunks_exact(n)
        .map(|row| row.iter().zip(&fg.bias).map(|(s, b)| s + b).collect())
        .collect())
}

/// The `k` largest scores as `(index, score)`, descending, ties by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

/// Index of the best score, ties to the lowest index. `None` when empty.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    top_k(scores, 1).first().map(|&(i, _)| i)
}
