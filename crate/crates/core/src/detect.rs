//! Exemplar detection over window proposals.
//!
//! Every proposal is cropped, featurized, adapted and scored against the
//! folded gallery in one matrix product. `(proposal, exemplar)` pairs whose
//! aspect ratios disagree are discarded, and the rest are ranked and pruned
//! with greedy non-maximum suppression.

use std::path::PathBuf;

use crate::adapt::{adapt_forward, AdaptationModel};
use crate::error::{check_dim, Error, Result};
use crate::featspace::{FeatureConfig, FeatureVector, GrayImage};
use crate::simkit::{score_folded_batch, ExemplarMeta, FoldedGallery};

/// Axis-aligned box in integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BBox {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Result<Self> {
        if w <= 0 || h <= 0 {
            return Err(Error::InvalidArgument(format!("box {w}x{h} must have positive size")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w as f64 / self.h as f64
    }

    pub fn area(&self) -> i64 {
        self.w as i64 * self.h as i64
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    /// Whether the box lies fully inside a `width x height` image.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0 && self.y >= 0 && self.right() <= width as i32 && self.bottom() <= height as i32
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0) as i64;
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0) as i64;
    let inter = iw * ih;
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub exemplar_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsMode {
    /// One suppression pass across all exemplars.
    Joint,
    /// Suppression only among detections of the same exemplar.
    PerExemplar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindowParams {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub stride_frac: f64,
}

impl Default for SlidingWindowParams {
    fn default() -> Self {
        Self {
            scales: geometric(0.35, 1.2, 6),
            aspect_ratios: geometric(0.4, 1.2, 12),
            stride_frac: 0.2,
        }
    }
}

/// `n` values `start * ratio^k`.
pub fn geometric(start: f64, ratio: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| start * ratio.powi(k as i32)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalSource {
    SlidingWindow(SlidingWindowParams),
    /// `image_id x y w h` lines, loaded by the caller.
    ExternalFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub features: FeatureConfig,
    pub ar_threshold: f64,
    pub nms_iou: f64,
    pub nms_mode: NmsMode,
    pub max_per_image: usize,
    pub proposals: ProposalSource,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            ar_threshold: 0.9,
            nms_iou: 0.3,
            nms_mode: NmsMode::Joint,
            max_per_image: 100,
            proposals: ProposalSource::SlidingWindow(SlidingWindowParams::default()),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ar_threshold > 0.0 && self.ar_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "aspect-ratio threshold {} outside (0, 1]",
                self.ar_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms iou {} outside [0, 1)", self.nms_iou)));
        }
        Ok(())
    }
}

/// Enumerates windows scale-major, then aspect ratio, then row, then column.
pub fn sliding_window_proposals(
    img_w: usize,
    img_h: usize,
    scales: &[f64],
    aspect_ratios: &[f64],
    stride_frac: f64,
) -> Vec<BBox> {
    let short = img_w.min(img_h) as f64;
    let mut out = Vec::new();
    for &scale in scales {
        for &ar in aspect_ratios {
            let h = scale * short / ar.sqrt();
            let w = (ar * h).round() as i32;
            let h = h.round() as i32;
            if w <= 0 || h <= 0 || w > img_w as i32 || h > img_h as i32 {
                continue;
            }
            let sx = ((stride_frac * w as f64).round() as i32).max(1);
            let sy = ((stride_frac * h as f64).round() as i32).max(1);
            let mut y = 0;
            while y + h <= img_h as i32 {
                let mut x = 0;
                while x + w <= img_w as i32 {
                    out.push(BBox { x, y, w, h });
                    x += sx;
                }
                y += sy;
            }
        }
    }
    out
}

/// Keep a `(proposal, exemplar)` pair iff `min(a, b) / max(a, b) >= tau`.
#[inline]
pub fn aspect_gate(proposal_ar: f64, exemplar_ar: f64, tau: f64) -> bool {
    proposal_ar.min(exemplar_ar) / proposal_ar.max(exemplar_ar) >= tau
}

/// Descending score, then ascending exemplar id, then input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].exemplar_id.cmp(&dets[b].exemplar_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS across all exemplars.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_limited(dets, iou_thresh, usize::MAX)
}

/// Greedy NMS that stops once `limit` detections have been accepted. The
/// result equals the first `limit` entries of [`nms`].
pub fn nms_limited(dets: &[Detection], iou_thresh: f64, limit: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        if kept.len() >= limit {
            break;
        }
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Greedy NMS run independently per exemplar; output merged by rank.
pub fn nms_per_exemplar(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        let d = &dets[i];
        if kept
            .iter()
            .filter(|k| k.exemplar_id == d.exemplar_id)
            .all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d.clone());
        }
    }
    kept
}

/// One scored `(proposal, exemplar)` pair that passed the aspect gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub proposal: usize,
    pub exemplar: usize,
    pub score: f64,
}

const SCORE_CHUNK: usize = 256;

/// Adapted canonical features for each proposal box.
pub fn proposal_features(
    img: &GrayImage,
    proposals: &[BBox],
    model: &AdaptationModel,
    features: &FeatureConfig,
) -> Result<Vec<FeatureVector>> {
    proposals
        .iter()
        .map(|b| adapt_forward(model, &features.crop_features(img, b)?))
        .collect()
}

/// Scores every proposal against the gallery and hands each raw score row
/// to `visit`.
fn scan_scores(
    img: &GrayImage,
    proposals: &[BBox],
    model: &AdaptationModel,
    fg: &FoldedGallery,
    features: &FeatureConfig,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    check_dim(fg.dim(), model.out_dim())?;
    if fg.is_empty() || proposals.is_empty() {
        return Ok(());
    }
    for (chunk_idx, chunk) in proposals.chunks(SCORE_CHUNK).enumerate() {
        let feats = proposal_features(img, chunk, model, features)?;
        let scores = score_folded_batch(fg, &feats)?;
        for (j, row) in scores.iter().enumerate() {
            visit(chunk_idx * SCORE_CHUNK + j, row);
        }
    }
    Ok(())
}

fn gated<'a>(
    row: &'a [f64],
    meta: &'a [ExemplarMeta],
    proposal_ar: f64,
    tau: f64,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    row.iter().enumerate().filter_map(move |(e, &s)| {
        (s.is_finite() && aspect_gate(proposal_ar, meta[e].aspect_ratio, tau)).then_some((e, s))
    })
}

/// All gated, finite `(proposal, exemplar, score)` triples.
pub fn collect_candidates(
    img: &GrayImage,
    proposals: &[BBox],
    model: &AdaptationModel,
    fg: &FoldedGallery,
    cfg: &DetectConfig,
) -> Result<Vec<Candidate>> {
    let meta = fg.meta();
    let mut out = Vec::new();
    scan_scores(img, proposals, model, fg, &cfg.features, |p, row| {
        let par = proposals[p].aspect_ratio();
        out.extend(gated(row, meta, par, cfg.ar_threshold).map(|(e, score)| Candidate {
            proposal: p,
            exemplar: e,
            score,
        }));
    })?;
    Ok(out)
}

/// Full per-image pipeline on explicit proposals.
pub fn detect_with_proposals(
    img: &GrayImage,
    proposals: &[BBox],
    model: &AdaptationModel,
    fg: &FoldedGallery,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut out = detect_multi_threshold(img, proposals, model, fg, cfg, &[cfg.ar_threshold])?;
    Ok(out.pop().unwrap_or_default())
}

/// Runs the pipeline once per gate threshold in `taus`, sharing feature
/// extraction and scoring; `cfg.ar_threshold` is ignored.
pub fn detect_multi_threshold(
    img: &GrayImage,
    proposals: &[BBox],
    model: &AdaptationModel,
    fg: &FoldedGallery,
    cfg: &DetectConfig,
    taus: &[f64],
) -> Result<Vec<Vec<Detection>>> {
    for &tau in taus {
        DetectConfig {
            ar_threshold: tau,
            ..cfg.clone()
        }
        .validate()?;
    }
    let meta = fg.meta();
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); taus.len()];
    scan_scores(img, proposals, model, fg, &cfg.features, |p, row| {
        let par = proposals[p].aspect_ratio();
        for (t, &tau) in taus.iter().enumerate() {
            let it = gated(row, meta, par, tau);
            match cfg.nms_mode {
                NmsMode::Joint => {
                    // Under joint NMS with iou threshold < 1, only the best
                    // exemplar of a proposal can survive (the others overlap it
                    // with iou 1 and rank below it), so reduce per proposal.
                    let mut best: Option<(usize, f64)> = None;
                    for (e, s) in it {
                        let better = match best {
                            None => true,
                            Some((be, bs)) => {
                                s > bs || (s == bs && meta[e].exemplar_id < meta[be].exemplar_id)
                            }
                        };
                        if better {
                            best = Some((e, s));
                        }
                    }
                    if let Some((e, score)) = best {
                        dets[t].push(Detection {
                            bbox: proposals[p],
                            exemplar_id: meta[e].exemplar_id,
                            score,
                        });
                    }
                }
                NmsMode::PerExemplar => {
                    dets[t].extend(it.map(|(e, score)| Detection {
                        bbox: proposals[p],
                        exemplar_id: meta[e].exemplar_id,
                        score,
                    }));
                }
            }
        }
    })?;
    Ok(dets
        .into_iter()
        .map(|d| match cfg.nms_mode {
            NmsMode::Joint => nms_limited(&d, cfg.nms_iou, cfg.max_per_image),
            NmsMode::PerExemplar => {
                let mut out = nms_per_exemplar(&d, cfg.nms_iou);
                out.truncate(cfg.max_per_image);
                out
            }
        })
        .collect())
}

/// Sliding windows for `img` under `cfg`; errors for external proposals.
pub fn proposals_for(img: &GrayImage, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    match &cfg.proposals {
        ProposalSource::SlidingWindow(sw) => Ok(sliding_window_proposals(
            img.width(),
            img.height(),
            &sw.scales,
            &sw.aspect_ratios,
            sw.stride_frac,
        )),
        ProposalSource::ExternalFile(path) => Err(Error::InvalidArgument(format!(
            "proposals from {} must be loaded and passed to detect_with_proposals",
            path.display()
        ))),
    }
}

/// Enumerates the configured sliding windows and runs the pipeline.
pub fn detect_image(
    img: &GrayImage,
    model: &AdaptationModel,
    fg: &FoldedGallery,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let proposals = proposals_for(img, cfg)?;
    detect_with_proposals(img, &proposals, model, fg, cfg)
}
