//! Evaluation protocols and the seeded synthetic benchmark.
//!
//! Detection metrics follow the VOC conventions: detections are matched
//! greedily in score order at an IoU threshold (0.5 by default) and AP is the
//! area under the monotonized precision/recall curve. Pose error is the
//! circular azimuth difference between a true positive's exemplar and its
//! ground truth.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::adapt::{adapt_forward, init_model, train, AdaptationModel, LossCurve, Shape3, TrainConfig, TransformFamily};
use crate::calib::{self, CalibrationParams};
use crate::detect::{detect_multi_threshold, iou, proposals_for, BBox, DetectConfig, Detection};
use crate::error::{check_dim, Error, Result};
use crate::featspace::{Extractor, FeatureConfig, FeatureVector, GrayImage};
use crate::seed;
use crate::simkit::{argmax, score_gallery, ExemplarMeta, FoldedGallery, Gallery, Similarity};
use crate::synthgen::{
    gen_test_scenes, gen_training_pairs, make_model_library, render_view,
    silhouette_bbox, view_grid, view_subset, ProcModel, SceneConfig, SynthScene, ViewParams,
};
use crate::TrainingPair;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_POSE_RECALL: f64 = 0.25;
pub const POSE_BIN_DEG: f64 = 10.0;
pub const POSE_BINS: usize = 18;
pub const POSE_TOLERANCE_DEG: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub model_id: u32,
    pub azimuth: f64,
}

/// Ground truth objects per image, indexed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub images: Vec<Vec<GtObject>>,
}

impl GroundTruth {
    pub fn from_scenes(scenes: &[SynthScene]) -> Self {
        Self {
            images: scenes
                .iter()
                .map(|s| {
                    s.annotations
                        .iter()
                        .map(|a| GtObject {
                            bbox: a.bbox,
                            model_id: a.model_id,
                            azimuth: a.view.azimuth,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn n_objects(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }
}

/// A detection tagged with the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image_id: usize,
    pub det: Detection,
}

/// Outcome of one detection under VOC matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchLabel {
    /// Index into the detection list given to [`match_detections`].
    pub det_index: usize,
    pub tp: bool,
    /// Matched object index within its image (true positives only).
    pub gt_index: Option<usize>,
}

/// Indices of `dets` by descending score, stable on ties.
fn score_order(dets: &[ImageDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score));
    order
}

/// Greedy VOC matching; labels come back in descending score order.
///
/// Each detection takes the still-unmatched object of its image with the
/// highest IoU at or above `iou_thresh` (lowest index on ties). Detections on
/// images outside the ground truth are false positives.
pub fn match_detections(dets: &[ImageDetection], gt: &GroundTruth, iou_thresh: f64) -> Vec<MatchLabel> {
    let mut taken: Vec<Vec<bool>> = gt.images.iter().map(|g| vec![false; g.len()]).collect();
    score_order(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            if let Some(objs) = gt.images.get(d.image_id) {
                for (j, o) in objs.iter().enumerate() {
                    if taken[d.image_id][j] {
                        continue;
                    }
                    let v = iou(&d.det.bbox, &o.bbox);
                    if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
            }
            if let Some((j, _)) = best {
                taken[d.image_id][j] = true;
            }
            MatchLabel {
                det_index: i,
                tp: best.is_some(),
                gt_index: best.map(|(j, _)| j),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    #[default]
    AllPoints,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection in score order.
    pub points: Vec<(f64, f64)>,
    pub n_detections: usize,
    pub n_gt: usize,
}

pub fn pr_curve(labels: &[bool], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::InvalidArgument("precision/recall needs at least one object".into()));
    }
    let mut tp = 0usize;
    let points = labels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            tp += l as usize;
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    Ok(PrCurve {
        points,
        n_detections: labels.len(),
        n_gt,
    })
}

/// AP of a TP/FP sequence given in descending score order.
pub fn average_precision(labels: &[bool], n_gt: usize, mode: ApMode) -> Result<f64> {
    let curve = pr_curve(labels, n_gt)?;
    Ok(match mode {
        ApMode::AllPoints => {
            let mut rec = vec![0.0];
            let mut prec = vec![0.0];
            for &(r, p) in &curve.points {
                rec.push(r);
                prec.push(p);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (1..rec.len())
                .filter(|&i| rec[i] != rec[i - 1])
                .map(|i| (rec[i] - rec[i - 1]) * prec[i])
                .sum()
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .points
                        .iter()
                        .filter(|(r, _)| *r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Circular distance between two angles in degrees, in `[0, 180]`.
pub fn circ_diff(a1: f64, a2: f64) -> f64 {
    let d = (a1 - a2).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseReport {
    /// Counts of azimuth error in 10-degree bins; 180 falls in the last bin.
    pub histogram: [usize; POSE_BINS],
    /// Errors of the true positives used, in score order.
    pub errors: Vec<f64>,
    /// Share of errors within 20 degrees; 0 when there are none.
    pub fraction_within_20: f64,
}

/// Azimuth error of the true positives in the shortest score-ordered prefix
/// reaching `recall_target` (every detection if the target is unreachable).
pub fn pose_error_at_recall(
    dets: &[ImageDetection],
    gt: &GroundTruth,
    exemplars: &[ExemplarMeta],
    recall_target: f64,
) -> Result<PoseReport> {
    let n_gt = gt.n_objects();
    if n_gt == 0 {
        return Err(Error::InvalidArgument("pose evaluation needs at least one object".into()));
    }
    let azimuth: HashMap<u32, f64> = exemplars.iter().map(|m| (m.exemplar_id, m.azimuth)).collect();
    let mut histogram = [0usize; POSE_BINS];
    let mut errors = Vec::new();
    let mut tp = 0usize;
    for m in match_detections(dets, gt, DEFAULT_MATCH_IOU) {
        if tp as f64 / n_gt as f64 >= recall_target {
            break;
        }
        let Some(j) = m.gt_index else { continue };
        tp += 1;
        let d = &dets[m.det_index];
        let az = *azimuth.get(&d.det.exemplar_id).ok_or_else(|| {
            Error::InvalidArgument(format!("detection references unknown exemplar {}", d.det.exemplar_id))
        })?;
        let e = circ_diff(az, gt.images[d.image_id][j].azimuth);
        histogram[((e / POSE_BIN_DEG) as usize).min(POSE_BINS - 1)] += 1;
        errors.push(e);
    }
    let within = errors.iter().filter(|&&e| e <= POSE_TOLERANCE_DEG).count();
    let fraction_within_20 = if errors.is_empty() {
        0.0
    } else {
        within as f64 / errors.len() as f64
    };
    Ok(PoseReport {
        histogram,
        errors,
        fraction_within_20,
    })
}

/// Top-1 model-identity accuracy of adapted queries against `g`.
pub fn retrieval_accuracy(
    queries: &[(FeatureVector, u32)],
    g: &Gallery,
    kind: Similarity,
    model: &AdaptationModel,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("retrieval needs at least one query".into()));
    }
    if g.is_empty() {
        return Err(Error::InvalidArgument("retrieval needs a non-empty gallery".into()));
    }
    check_dim(g.dim(), model.out_dim())?;
    let mut hits = 0usize;
    for (q, model_id) in queries {
        let scores = score_gallery(g, &adapt_forward(model, q)?, kind)?;
        let best = argmax(&scores).ok_or_else(|| Error::Numerical("no finite retrieval score".into()))?;
        hits += (g.meta()[best].model_id == *model_id) as usize;
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Formats `v` with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // A carry can add a digit, e.g. 9.999995 -> 10.00000.
        let s = if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 6
            && decimals > 0
        {
            format!("{v:.prec$}", prec = decimals - 1)
        } else {
            s
        };
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Numeric table with labelled rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.corner.clone();
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (label, vals) in &self.rows {
            s.push_str(label);
            for v in vals {
                let _ = write!(s, ",{}", sig6(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == col)?;
        self.rows.iter().find(|(l, _)| l == row).map(|(_, v)| v[c])
    }
}

/// Parameters of the seeded synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_models: usize,
    /// Elevation and distance indices of the gallery views (all azimuths).
    pub gallery_elevations: Vec<usize>,
    pub gallery_distances: Vec<usize>,
    pub render_size: usize,
    pub n_pairs: usize,
    pub n_scenes: usize,
    pub scene: SceneConfig,
    /// Scenes that calibration patches are drawn from.
    pub n_calibration_images: usize,
    pub calibration_patches: usize,
    pub patch_min_frac: f64,
    pub patch_max_frac: f64,
    pub percentile: f64,
    pub fit_eps: f64,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_models: 8,
            gallery_elevations: vec![1, 3],
            gallery_distances: vec![1],
            render_size: 64,
            n_pairs: 4000,
            n_scenes: 60,
            scene: SceneConfig::default(),
            n_calibration_images: 60,
            calibration_patches: 40_000,
            patch_min_frac: 0.3,
            patch_max_frac: 1.0,
            percentile: calib::DEFAULT_PERCENTILE,
            fit_eps: calib::DEFAULT_FIT_EPS,
            hidden_dim: 144,
            train: TrainConfig::default(),
            detect: DetectConfig {
                features: FeatureConfig {
                    extractor: Extractor::Hog {
                        cell_px: 4,
                        n_orient: 9,
                    },
                    canonical_size: 32,
                    ..FeatureConfig::default()
                },
                ..DetectConfig::default()
            },
        }
    }
}

/// Everything derived from a [`BenchmarkConfig`].
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub cfg: BenchmarkConfig,
    pub models: Vec<ProcModel>,
    pub views: Vec<ViewParams>,
    pub gallery: Gallery,
    pub pairs: Vec<TrainingPair>,
    pub scenes: Vec<SynthScene>,
    pub gt: GroundTruth,
    pub calibration_images: Vec<GrayImage>,
}

/// Scene images from their own seed stream; calibration patches are cut
/// from these, so the patch statistics include partial objects.
pub fn calibration_scenes(models: &[ProcModel], views: &[ViewParams], cfg: &BenchmarkConfig) -> Result<Vec<GrayImage>> {
    let s = seed::mix(cfg.seed, seed::stream::PATCHES, 0);
    Ok(gen_test_scenes(models, views, cfg.n_calibration_images, &cfg.scene, s)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

/// Clean-render gallery over every `(model, view)`, model-major.
pub fn build_gallery(
    models: &[ProcModel],
    views: &[ViewParams],
    render_size: usize,
    features: &crate::featspace::FeatureConfig,
) -> Result<Gallery> {
    let mut g = Gallery::new(features.dim()?);
    for m in models {
        for v in views {
            let render = render_view(m, v, render_size)?.quantized();
            let bbox = silhouette_bbox(&render)
                .ok_or_else(|| Error::Numerical(format!("model {} renders blank", m.model_id)))?;
            let meta = ExemplarMeta::new(
                g.len() as u32,
                m.model_id,
                v.azimuth,
                v.elevation,
                v.distance_index,
                bbox.aspect_ratio(),
            )?;
            g.push(meta, features.crop_features(&render, &bbox)?)?;
        }
    }
    Ok(g)
}

impl Benchmark {
    pub fn build(cfg: &BenchmarkConfig) -> Result<Self> {
        cfg.train.validate()?;
        cfg.detect.validate()?;
        let features = &cfg.detect.features;
        let models = make_model_library(cfg.seed, cfg.n_models)?;
        let views = view_subset(&cfg.gallery_elevations, &cfg.gallery_distances)?;
        let gallery = build_gallery(&models, &views, cfg.render_size, features)?;
        let pairs = gen_training_pairs(&models, &view_grid(), cfg.n_pairs, features, cfg.render_size, cfg.seed)?;
        let scenes = gen_test_scenes(&models, &views, cfg.n_scenes, &cfg.scene, cfg.seed)?;
        let calibration_images = calibration_scenes(&models, &views, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            gt: GroundTruth::from_scenes(&scenes),
            models,
            views,
            gallery,
            pairs,
            scenes,
            calibration_images,
        })
    }

    pub fn feature_shape(&self) -> Result<Shape3> {
        Ok(self.cfg.detect.features.output_shape()?.into())
    }

    /// Trains `family` on the benchmark pairs from the seeded initialization.
    pub fn train_family(&self, family: TransformFamily) -> Result<(AdaptationModel, LossCurve)> {
        let dim = self.gallery.dim();
        let m0 = init_model(family, self.feature_shape()?, dim, self.cfg.hidden_dim, self.cfg.train.seed)?;
        train(&m0, &self.pairs, &self.cfg.train)
    }

    /// Queries cropped from the scene images at the annotated boxes.
    pub fn scene_queries(&self) -> Result<Vec<(FeatureVector, u32)>> {
        let mut out = Vec::new();
        for s in &self.scenes {
            for a in &s.annotations {
                out.push((self.cfg.detect.features.crop_features(&s.image, &a.bbox)?, a.model_id));
            }
        }
        Ok(out)
    }

    /// Calibration parameters for `g` from random background patches seen
    /// through `model`.
    pub fn calibrate(&self, g: &Gallery, model: &AdaptationModel) -> Result<CalibrationParams> {
        let patches = calib::sample_random_patches(
            &self.calibration_images,
            self.cfg.calibration_patches,
            self.cfg.patch_min_frac,
            self.cfg.patch_max_frac,
            seed::mix(self.cfg.seed, seed::stream::PATCHES, u64::MAX),
            &self.cfg.detect.features,
        )?
        .iter()
        .map(|p| adapt_forward(model, p))
        .collect::<Result<Vec<_>>>()?;
        let stats = calib::compute_stats(g, &patches, Similarity::Cosine, self.cfg.percentile)?;
        Ok(calib::fit_calibration(&stats, self.cfg.fit_eps))
    }

    /// Folded `g`, calibrated through `model` or with identity parameters.
    pub fn folded(&self, g: &Gallery, model: &AdaptationModel, calibrate: bool) -> Result<FoldedGallery> {
        let params = if calibrate {
            self.calibrate(g, model)?
        } else {
            CalibrationParams::identity(g.len())
        };
        calib::fold(g, &params)
    }

    /// Detections on every scene, one list per threshold in `taus`.
    pub fn detect_all(
        &self,
        model: &AdaptationModel,
        fg: &FoldedGallery,
        taus: &[f64],
    ) -> Result<Vec<Vec<ImageDetection>>> {
        let mut out = vec![Vec::new(); taus.len()];
        for (image_id, s) in self.scenes.iter().enumerate() {
            let proposals = proposals_for(&s.image, &self.cfg.detect)?;
            let per_tau = detect_multi_threshold(&s.image, &proposals, model, fg, &self.cfg.detect, taus)?;
            for (t, dets) in per_tau.into_iter().enumerate() {
                out[t].extend(dets.into_iter().map(|det| ImageDetection { image_id, det }));
            }
        }
        Ok(out)
    }

    /// AllPoints AP at the default match threshold.
    pub fn ap(&self, dets: &[ImageDetection]) -> Result<f64> {
        detection_ap(dets, &self.gt, ApMode::AllPoints)
    }

    /// AP for each threshold in `taus`.
    pub fn ap_per_threshold(&self, model: &AdaptationModel, fg: &FoldedGallery, taus: &[f64]) -> Result<Vec<f64>> {
        self.detect_all(model, fg, taus)?
            .iter()
            .map(|d| self.ap(d))
            .collect()
    }
}

/// Matches and scores detections against `gt` at IoU 0.5.
pub fn detection_ap(dets: &[ImageDetection], gt: &GroundTruth, mode: ApMode) -> Result<f64> {
    let labels: Vec<bool> = match_detections(dets, gt, DEFAULT_MATCH_IOU).iter().map(|m| m.tp).collect();
    average_precision(&labels, gt.n_objects(), mode)
}

fn tau_label(t: f64) -> String {
    format!("tau_{}", sig6(t))
}

/// AP of each family (rows) at each aspect threshold (columns), with
/// calibrated galleries. Identity is never trained.
pub fn ablate_families(bench: &Benchmark, families: &[TransformFamily], ar_thresholds: &[f64]) -> Result<Table> {
    if families.is_empty() || ar_thresholds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs families and thresholds".into()));
    }
    let mut rows = Vec::new();
    for &f in families {
        let (model, _) = bench.train_family(f)?;
        let fg = bench.folded(&bench.gallery, &model, true)?;
        rows.push((f.name().to_string(), bench.ap_per_threshold(&model, &fg, ar_thresholds)?));
    }
    Ok(Table {
        corner: "family".into(),
        columns: ar_thresholds.iter().map(|&t| tau_label(t)).collect(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsampleMode {
    RandomViews,
    WholeModels,
}

impl SubsampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SubsampleMode::RandomViews => "random_views",
            SubsampleMode::WholeModels => "whole_models",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SubsampleMode::RandomViews, SubsampleMode::WholeModels]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Gallery indices kept for `count` exemplars (RandomViews) or `count`
/// models (WholeModels); ascending, seeded.
pub fn subsample_indices(g: &Gallery, count: usize, mode: SubsampleMode, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed, seed::stream::SUBSAMPLE, count as u64);
    let mut keep = match mode {
        SubsampleMode::RandomViews => {
            if count == 0 || count > g.len() {
                return Err(Error::InvalidArgument(format!(
                    "view count {count} outside 1..={}",
                    g.len()
                )));
            }
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(count);
            idx
        }
        SubsampleMode::WholeModels => {
            let mut ids: Vec<u32> = g.meta().iter().map(|m| m.model_id).collect();
            ids.sort_unstable();
            ids.dedup();
            if count == 0 || count > ids.len() {
                return Err(Error::InvalidArgument(format!(
                    "model count {count} outside 1..={}",
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            ids.truncate(count);
            (0..g.len()).filter(|&i| ids.contains(&g.meta()[i].model_id)).collect()
        }
    };
    keep.sort_unstable();
    Ok(keep)
}

/// AP against subsampled galleries, one row per count, at the configured
/// aspect threshold.
pub fn ablate_gallery_size(
    bench: &Benchmark,
    model: &AdaptationModel,
    counts: &[usize],
    mode: SubsampleMode,
) -> Result<Table> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one count".into()));
    }
    let tau = bench.cfg.detect.ar_threshold;
    let mut rows = Vec::new();
    for &n in counts {
        let g = bench.gallery.subset(&subsample_indices(&bench.gallery, n, mode, bench.cfg.seed)?)?;
        let fg = bench.folded(&g, model, true)?;
        rows.push((n.to_string(), bench.ap_per_threshold(model, &fg, &[tau])?));
    }
    Ok(Table {
        corner: format!("{}_count", mode.name()),
        columns: vec!["ap".into()],
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: i32, y: i32, w: i32, h: i32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn idet(image_id: usize, bbox: BBox, exemplar_id: u32, score: f64) -> ImageDetection {
        ImageDetection {
            image_id,
            det: Detection {
                bbox,
                exemplar_id,
                score,
            },
        }
    }

    fn gt_one(bbox: BBox) -> GroundTruth {
        GroundTruth {
            images: vec![vec![GtObject {
                bbox,
                model_id: 0,
                azimuth: 0.0,
            }]],
        }
    }

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector::new(v).unwrap()
    }

    #[test]
    fn matching_examples() {
        let g = gt_one(b(10, 10, 20, 20));
        let one = match_detections(&[idet(0, b(10, 10, 20, 20), 0, 1.0)], &g, 0.5);
        assert!(one[0].tp);
        let two = match_detections(
            &[idet(0, b(10, 10, 20, 20), 0, 1.0), idet(0, b(10, 10, 20, 20), 1, 1.0)],
            &g,
            0.5,
        );
        assert_eq!(two.iter().map(|m| m.tp).collect::<Vec<_>>(), vec![true, false]);
        // Lower score first in the input still ranks second.
        let order = match_detections(
            &[idet(0, b(10, 10, 20, 20), 0, 0.5), idet(0, b(11, 10, 20, 20), 1, 0.9)],
            &g,
            0.5,
        );
        assert_eq!((order[0].det_index, order[0].tp, order[1].tp), (1, true, false));
        let foreign = match_detections(&[idet(3, b(10, 10, 20, 20), 0, 1.0)], &g, 0.5);
        assert!(!foreign[0].tp);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1, ApMode::AllPoints).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true], 1, ApMode::AllPoints).unwrap(), 0.5);
        assert_eq!(average_precision(&[], 3, ApMode::AllPoints).unwrap(), 0.0);
        assert_eq!(average_precision(&[true], 1, ApMode::ElevenPoint).unwrap(), 1.0);
        assert!(average_precision(&[true], 0, ApMode::AllPoints).is_err());
        // [TP, FP, TP], 2 objects: envelope 1 on (0, 0.5], 2/3 on (0.5, 1].
        let ap = average_precision(&[true, false, true], 2, ApMode::AllPoints).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let ap11 = average_precision(&[true, false, true], 2, ApMode::ElevenPoint).unwrap();
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn circ_diff_examples() {
        assert_eq!(circ_diff(350.0, 10.0), 20.0);
        assert_eq!(circ_diff(123.0, 123.0), 0.0);
        assert_eq!(circ_diff(0.0, 180.0), 180.0);
        assert_eq!(circ_diff(-90.0, 630.0), 0.0);
    }

    fn meta(id: u32, model: u32, az: f64) -> ExemplarMeta {
        ExemplarMeta::new(id, model, az, 0.0, 0, 1.0).unwrap()
    }

    #[test]
    fn pose_examples() {
        let gt = GroundTruth {
            images: vec![vec![
                GtObject {
                    bbox: b(0, 0, 10, 10),
                    model_id: 0,
                    azimuth: 30.0,
                },
                GtObject {
                    bbox: b(50, 0, 10, 10),
                    model_id: 0,
                    azimuth: 90.0,
                },
            ]],
        };
        let ex = [meta(0, 0, 30.0), meta(1, 0, 90.0), meta(2, 0, 270.0)];
        let dets = [idet(0, b(0, 0, 10, 10), 0, 2.0), idet(0, b(50, 0, 10, 10), 1, 1.0)];
        let r = pose_error_at_recall(&dets, &gt, &ex, 1.0).unwrap();
        assert_eq!((r.errors.len(), r.fraction_within_20), (2, 1.0));
        assert_eq!(r.histogram[0], 2);
        // Recall 0.25 is reached after the first detection.
        assert_eq!(pose_error_at_recall(&dets, &gt, &ex, 0.25).unwrap().errors.len(), 1);
        let none = pose_error_at_recall(&[], &gt, &ex, 0.25).unwrap();
        assert_eq!((none.histogram, none.fraction_within_20), ([0; POSE_BINS], 0.0));
        let wrong = [idet(0, b(0, 0, 10, 10), 2, 1.0)];
        let r = pose_error_at_recall(&wrong, &gt, &ex, 0.25).unwrap();
        assert_eq!((r.errors[0], r.histogram[POSE_BINS - 1], r.fraction_within_20), (120.0, 0, 0.0));
        assert_eq!(r.histogram[12], 1);
        assert!(pose_error_at_recall(&[idet(0, b(0, 0, 10, 10), 9, 1.0)], &gt, &ex, 0.25).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let mut g = Gallery::new(3);
        let feats = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        for (i, f) in feats.iter().enumerate() {
            g.push(meta(i as u32, i as u32, 0.0), fv(f.clone())).unwrap();
        }
        let id = AdaptationModel::identity(3);
        let exact: Vec<_> = feats.iter().enumerate().map(|(i, f)| (fv(f.clone()), i as u32)).collect();
        assert_eq!(retrieval_accuracy(&exact, &g, Similarity::Cosine, &id).unwrap(), 1.0);
        let single = g.subset(&[1]).unwrap();
        let any = vec![(fv(vec![0.3, -2.0, 5.0]), 1)];
        assert_eq!(retrieval_accuracy(&any, &single, Similarity::Dot, &id).unwrap(), 1.0);
        assert!(retrieval_accuracy(&[], &g, Similarity::Cosine, &id).is_err());
        assert!(retrieval_accuracy(&exact, &g, Similarity::Cosine, &AdaptationModel::identity(4)).is_err());
    }

    #[test]
    fn retrieval_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 6;
        let mut g = Gallery::new(dim);
        for i in 0..20 {
            let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            g.push(meta(i, i % 5, 0.0), fv(f)).unwrap();
        }
        let queries: Vec<_> = (0..50)
            .map(|_| {
                let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (fv(f), rng.gen_range(0..5u32))
            })
            .collect();
        let id = AdaptationModel::identity(dim);
        for kind in Similarity::ALL {
            let mut hits = 0;
            for (q, m) in &queries {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for (i, y) in g.features().iter().enumerate() {
                    let s = crate::simkit::sim_eval(kind, q, y).unwrap();
                    if s > best.0 {
                        best = (s, i);
                    }
                }
                hits += (g.meta()[best.1].model_id == *m) as usize;
            }
            let expect = hits as f64 / 50.0;
            assert_eq!(retrieval_accuracy(&queries, &g, kind, &id).unwrap(), expect);
        }
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
        (0..n)
            .map(|_| b(rng.gen_range(0..30), rng.gen_range(0..30), rng.gen_range(4..20), rng.gen_range(4..20)))
            .collect()
    }

    /// Pixel-count IoU.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |o: &BBox, x: i32, y: i32| x >= o.x && x < o.x + o.w && y >= o.y && y < o.y + o.h;
        let (mut i, mut u) = (0, 0);
        for y in -1..60 {
            for x in -1..60 {
                let (p, q) = (inside(a, x, y), inside(b, x, y));
                i += (p && q) as i32;
                u += (p || q) as i32;
            }
        }
        i as f64 / u as f64
    }

    /// Straight transcription of the greedy protocol with a rasterized IoU.
    fn oracle_match(dets: &[ImageDetection], gt: &GroundTruth, thr: f64) -> Vec<(usize, bool)> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && dets[order[j]].det.score > dets[order[j - 1]].det.score {
                order.swap(j, j - 1);
                j -= 1;
            }
        }
        let mut used = std::collections::HashSet::new();
        let mut out = Vec::new();
        for &i in &order {
            let d = &dets[i];
            let mut cand: Vec<(f64, usize)> = gt.images[d.image_id]
                .iter()
                .enumerate()
                .filter(|(j, _)| !used.contains(&(d.image_id, *j)))
                .map(|(j, o)| (raster_iou(&d.det.bbox, &o.bbox), j))
                .filter(|(v, _)| *v >= thr)
                .collect();
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            match cand.first() {
                Some(&(_, j)) => {
                    used.insert((d.image_id, j));
                    out.push((i, true));
                }
                None => out.push((i, false)),
            }
        }
        out
    }

    /// AP as a sum over recall steps of the best precision at any later rank.
    fn oracle_ap(labels: &[bool], n_gt: usize) -> f64 {
        let n = labels.len();
        let mut prec = vec![0.0; n];
        let mut tp = 0;
        for k in 0..n {
            tp += labels[k] as usize;
            prec[k] = tp as f64 / (k + 1) as f64;
        }
        let mut ap = 0.0;
        for k in 0..n {
            if labels[k] {
                let best = prec[k..].iter().cloned().fold(0.0, f64::max);
                ap += best / n_gt as f64;
            }
        }
        ap
    }

    #[test]
    fn matching_and_ap_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let n_images = rng.gen_range(1..3);
            let gt = GroundTruth {
                images: (0..n_images)
                    .map(|_| {
                        let k = rng.gen_range(0..5);
                        random_boxes(&mut rng, k)
                            .into_iter()
                            .map(|bbox| GtObject {
                                bbox,
                                model_id: 0,
                                azimuth: 0.0,
                            })
                            .collect()
                    })
                    .collect(),
            };
            let n_dets = rng.gen_range(0..=8);
            let dets: Vec<_> = random_boxes(&mut rng, n_dets)
                .into_iter()
                .enumerate()
                .map(|(i, bx)| idet(rng.gen_range(0..n_images), bx, i as u32, rng.gen_range(0..4) as f64))
                .collect();
            let got = match_detections(&dets, &gt, 0.5);
            let expect = oracle_match(&dets, &gt, 0.5);
            assert_eq!(got.iter().map(|m| (m.det_index, m.tp)).collect::<Vec<_>>(), expect);
            let mut seen = std::collections::HashSet::new();
            for m in &got {
                if let Some(j) = m.gt_index {
                    assert!(seen.insert((dets[m.det_index].image_id, j)));
                }
            }
            if gt.n_objects() > 0 {
                let labels: Vec<bool> = got.iter().map(|m| m.tp).collect();
                let ap = average_precision(&labels, gt.n_objects(), ApMode::AllPoints).unwrap();
                assert!((ap - oracle_ap(&labels, gt.n_objects())).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    fn oracle_pose(dets: &[ImageDetection], gt: &GroundTruth, ex: &[ExemplarMeta], target: f64) -> (Vec<usize>, f64) {
        let labels = oracle_match(dets, gt, 0.5);
        let n_gt = gt.n_objects() as f64;
        let mut prefix = labels.len();
        let mut tp = 0.0;
        for (k, (_, t)) in labels.iter().enumerate() {
            if *t {
                tp += 1.0;
            }
            if tp / n_gt >= target {
                prefix = k + 1;
                break;
            }
        }
        let mut hist = vec![0; POSE_BINS];
        let mut errs = Vec::new();
        let matches = match_detections(dets, gt, 0.5);
        for m in &matches[..prefix] {
            if let Some(j) = m.gt_index {
                let d = &dets[m.det_index];
                let az = ex.iter().find(|e| e.exemplar_id == d.det.exemplar_id).unwrap().azimuth;
                let g = gt.images[d.image_id][j].azimuth;
                let mut e = (az - g).abs();
                while e >= 360.0 {
                    e -= 360.0;
                }
                if e > 180.0 {
                    e = 360.0 - e;
                }
                let mut bin = 0;
                while bin + 1 < POSE_BINS && (bin + 1) as f64 * 10.0 <= e {
                    bin += 1;
                }
                hist[bin] += 1;
                errs.push(e);
            }
        }
        let frac = if errs.is_empty() {
            0.0
        } else {
            errs.iter().filter(|e| **e <= 20.0).count() as f64 / errs.len() as f64
        };
        (hist, frac)
    }

    #[test]
    fn pose_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let ex: Vec<_> = (0..6).map(|i| meta(i, 0, rng.gen_range(0..36) as f64 * 10.0)).collect();
            let k = rng.gen_range(1..5);
            let gt = GroundTruth {
                images: vec![random_boxes(&mut rng, k)
                    .into_iter()
                    .map(|bbox| GtObject {
                        bbox,
                        model_id: 0,
                        azimuth: rng.gen_range(0..36) as f64 * 10.0,
                    })
                    .collect()],
            };
            let mut dets = Vec::new();
            for o in &gt.images[0] {
                if rng.gen_bool(0.7) {
                    dets.push(idet(0, o.bbox, rng.gen_range(0..6), rng.gen::<f64>()));
                }
            }
            let n_extra = rng.gen_range(0..=4);
            for bx in random_boxes(&mut rng, n_extra) {
                dets.push(idet(0, bx, rng.gen_range(0..6), rng.gen::<f64>()));
            }
            let target = [0.25, 0.5, 1.0][rng.gen_range(0..3)];
            let got = pose_error_at_recall(&dets, &gt, &ex, target).unwrap();
            let (hist, frac) = oracle_pose(&dets, &gt, &ex, target);
            assert_eq!(got.histogram.to_vec(), hist);
            assert_eq!(got.fraction_within_20, frac);
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(12.3456789), "12.3457");
        assert_eq!(sig6(9.9999996), "10");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-0.25), "-0.25");
    }

    #[test]
    fn table_csv() {
        let t = Table {
            corner: "family".into(),
            columns: vec!["tau_0.9".into()],
            rows: vec![("identity".into(), vec![0.25])],
        };
        assert_eq!(t.to_csv(), "family,tau_0.9\nidentity,0.25\n");
        assert_eq!(t.get("identity", "tau_0.9"), Some(0.25));
    }

    #[test]
    fn subsampling_rules() {
        let mut g = Gallery::new(2);
        for i in 0..12 {
            g.push(meta(i, i / 4, 0.0), fv(vec![1.0, i as f64])).unwrap();
        }
        let v = subsample_indices(&g, 5, SubsampleMode::RandomViews, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v, subsample_indices(&g, 5, SubsampleMode::RandomViews, 1).unwrap());
        assert_eq!(subsample_indices(&g, 12, SubsampleMode::RandomViews, 1).unwrap(), (0..12).collect::<Vec<_>>());
        let m = subsample_indices(&g, 2, SubsampleMode::WholeModels, 1).unwrap();
        assert_eq!(m.len(), 8);
        let models: std::collections::HashSet<u32> = m.iter().map(|&i| g.meta()[i].model_id).collect();
        assert_eq!(models.len(), 2);
        for mode in [SubsampleMode::RandomViews, SubsampleMode::WholeModels] {
            assert!(subsample_indices(&g, 0, mode, 1).is_err());
            assert!(subsample_indices(&g, 13, mode, 1).is_err());
        }
    }

    proptest! {
        #[test]
        fn ap_is_rank_only(scores in proptest::collection::vec(-5.0f64..5.0, 1..10), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = GroundTruth { images: vec![random_boxes(&mut rng, 4).into_iter()
                .map(|bbox| GtObject { bbox, model_id: 0, azimuth: 0.0 }).collect()] };
            let boxes = random_boxes(&mut rng, scores.len());
            let dets: Vec<_> = boxes.iter().zip(&scores).enumerate()
                .map(|(i, (bx, s))| idet(0, *bx, i as u32, *s)).collect();
            let warped: Vec<_> = dets.iter()
                .map(|d| ImageDetection { det: Detection { score: (d.det.score * 0.7).exp() + 3.0, ..d.det }, ..*d })
                .collect();
            prop_assert_eq!(detection_ap(&dets, &gt, ApMode::AllPoints).unwrap(),
                detection_ap(&warped, &gt, ApMode::AllPoints).unwrap());
        }

        #[test]
        fn perfect_detector_scores_one(n in 1usize..8) {
            let gt = GroundTruth { images: vec![(0..n)
                .map(|i| GtObject { bbox: b(i as i32 * 20, 0, 10, 10), model_id: 0, azimuth: 0.0 }).collect()] };
            let dets: Vec<_> = gt.images[0].iter().enumerate()
                .map(|(i, o)| idet(0, o.bbox, 0, i as f64)).collect();
            prop_assert_eq!(detection_ap(&dets, &gt, ApMode::AllPoints).unwrap(), 1.0);
        }

        #[test]
        fn circ_diff_metric(a in -720.0f64..720.0, b_ in -720.0f64..720.0, c in -720.0f64..720.0) {
            let d = circ_diff(a, b_);
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert_eq!(d, circ_diff(b_, a));
            prop_assert!(circ_diff(a, c) <= d + circ_diff(b_, c) + 1e-9);
        }
    }
}
