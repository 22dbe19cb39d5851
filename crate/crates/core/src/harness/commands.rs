//! End-to-end commands over an output directory.
//!
//! ```text
//! <out>/synth/models.txt              model library, one model per line
//! <out>/synth/renders/m000_v000.pgm   clean gallery renders (view = grid index)
//! <out>/synth/composites/c00000.pgm   training-pair composites
//! <out>/synth/pairs.bin               training-pair features
//! <out>/synth/calibration/k000.pgm    calibration scenes
//! <out>/synth/scenes/s0000.pgm        test scenes
//! <out>/synth/annotations.txt         scene ground truth
//! <out>/model.xadp, loss.csv          trained adaptation
//! <out>/gallery.xgal                  uncalibrated gallery
//! <out>/calibrated.xgal               calibrated gallery
//! <out>/detections.txt                detections
//! <out>/metrics.csv, pr.csv, pose.csv evaluation
//! <out>/ablate_families.csv, ablate_gallery.csv
//! <out>/<verb>.config.ini             effective configuration per command
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::formats::{
    format_annotations, format_detections, model_from_bytes, model_to_bytes, pairs_from_bytes, pairs_to_bytes,
    parse_annotations, parse_detections, parse_proposals, pgm_from_bytes, pgm_to_bytes, GalleryFile,
};
use crate::adapt::{init_model, train, AdaptationModel};
use crate::calib;
use crate::detect::{detect_with_proposals, BBox, ProposalSource};
use crate::error::{Error, Result};
use crate::evalkit::{
    self, ablate_families, ablate_gallery_size, calibration_scenes, match_detections, pose_error_at_recall, pr_curve, retrieval_accuracy,
    sig6, Benchmark, GroundTruth, GtObject, ImageDetection, POSE_BIN_DEG,
};
use crate::featspace::GrayImage;
use crate::seed;
use crate::simkit::{ExemplarMeta, Gallery, Similarity};
use crate::synthgen::{
    gen_test_scenes, make_model_library, pair_features, silhouette_bbox, training_pair_images,
    view_grid, view_subset, SceneObject,
};

/// File locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn models_txt(&self) -> PathBuf {
        self.synth().join("models.txt")
    }

    pub fn render(&self, model_id: u32, view_index: usize) -> PathBuf {
        self.synth().join("renders").join(format!("m{model_id:03}_v{view_index:03}.pgm"))
    }

    pub fn composite(&self, i: usize) -> PathBuf {
        self.synth().join("composites").join(format!("c{i:05}.pgm"))
    }

    pub fn pairs(&self) -> PathBuf {
        self.synth().join("pairs.bin")
    }

    pub fn calibration_image(&self, i: usize) -> PathBuf {
        self.synth().join("calibration").join(format!("k{i:03}.pgm"))
    }

    pub fn scene(&self, i: usize) -> PathBuf {
        self.synth().join("scenes").join(format!("s{i:04}.pgm"))
    }

    pub fn annotations(&self) -> PathBuf {
        self.synth().join("annotations.txt")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.xadp")
    }

    pub fn loss(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn gallery(&self) -> PathBuf {
        self.root.join("gallery.xgal")
    }

    pub fn calibrated(&self) -> PathBuf {
        self.root.join("calibrated.xgal")
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn pr(&self) -> PathBuf {
        self.root.join("pr.csv")
    }

    pub fn pose(&self) -> PathBuf {
        self.root.join("pose.csv")
    }

    pub fn ablate_families(&self) -> PathBuf {
        self.root.join("ablate_families.csv")
    }

    pub fn ablate_gallery(&self) -> PathBuf {
        self.root.join("ablate_gallery.csv")
    }

    pub fn config_echo(&self, verb: &str) -> PathBuf {
        self.root.join(format!("{verb}.config.ini"))
    }
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8 text"))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    pgm_from_bytes(&read_file(path)?, path)
}

pub fn read_gallery(path: &Path) -> Result<GalleryFile> {
    GalleryFile::from_bytes(&read_file(path)?, path)
}

pub fn read_model(path: &Path) -> Result<AdaptationModel> {
    model_from_bytes(&read_file(path)?, path)
}

fn echo(cfg: &RunConfig, verb: &str) -> Result<Layout> {
    let layout = Layout::new(&cfg.out_dir);
    write_atomic(&layout.config_echo(verb), cfg.to_ini().as_bytes())?;
    Ok(layout)
}

/// Per-image ground truth and scene images from the annotation file.
fn read_ground_truth(path: &Path) -> Result<(GroundTruth, Vec<Vec<SceneObject>>)> {
    let rows = parse_annotations(&read_text(path)?, path)?;
    let n_images = rows.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    let mut objects = vec![Vec::new(); n_images];
    for (i, o) in rows {
        objects[i].push(o);
    }
    let gt = GroundTruth {
        images: objects
            .iter()
            .map(|objs| {
                objs.iter()
                    .map(|o| GtObject {
                        bbox: o.bbox,
                        model_id: o.model_id,
                        azimuth: o.view.azimuth,
                    })
                    .collect()
            })
            .collect(),
    };
    Ok((gt, objects))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let layout = echo(cfg, "synth")?;
    let b = &cfg.bench;
    let features = &b.detect.features;
    let models = make_model_library(b.seed, b.n_models)?;
    let mut lib = String::from("# model_id family n_parts (cx cy cz sx sy sz albedo)*\n");
    for m in &models {
        lib.push_str(&m.describe());
        lib.push('\n');
    }
    write_atomic(&layout.models_txt(), lib.as_bytes())?;

    let views = view_subset(&b.gallery_elevations, &b.gallery_distances)?;
    for m in &models {
        for v in &views {
            let img = crate::synthgen::render_view(m, v, b.render_size)?;
            write_atomic(&layout.render(m.model_id, v.grid_index()), &pgm_to_bytes(&img))?;
        }
    }

    let grid = view_grid();
    let mut pairs = Vec::with_capacity(b.n_pairs);
    for i in 0..b.n_pairs {
        let p = training_pair_images(&models, &grid, b.render_size, b.seed, i)?;
        write_atomic(&layout.composite(i), &pgm_to_bytes(&p.composite))?;
        pairs.push(pair_features(&p, features)?);
    }
    write_atomic(&layout.pairs(), &pairs_to_bytes(&pairs)?)?;

    for (i, img) in calibration_scenes(&models, &views, b)?.iter().enumerate() {
        write_atomic(&layout.calibration_image(i), &pgm_to_bytes(img))?;
    }

    let scenes = gen_test_scenes(&models, &views, b.n_scenes, &b.scene, b.seed)?;
    let mut ann = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        write_atomic(&layout.scene(i), &pgm_to_bytes(&s.image))?;
        ann.push((i, s.annotations.clone()));
    }
    write_atomic(&layout.annotations(), format_annotations(&ann).as_bytes())?;
    let n_objects: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    Ok(format!(
        "synth: {} models, {} renders, {} pairs, {} calibration scenes, {} scenes ({} objects)",
        models.len(),
        models.len() * views.len(),
        pairs.len(),
        b.n_calibration_images,
        scenes.len(),
        n_objects
    ))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let layout = echo(cfg, "train")?;
    let b = &cfg.bench;
    let path = layout.pairs();
    let pairs = pairs_from_bytes(&read_file(&path)?, &path)?;
    let dim = b.detect.features.dim()?;
    if let Some(p) = pairs.first() {
        if p.x.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.x.dim(),
            });
        }
    }
    let shape = b.detect.features.output_shape()?.into();
    let m0 = init_model(cfg.family, shape, dim, b.hidden_dim, b.train.seed)?;
    let (model, curve) = train(&m0, &pairs, &b.train)?;
    write_atomic(&layout.model(), &model_to_bytes(&model)?)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in curve.0.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", e, sig6(*l));
    }
    write_atomic(&layout.loss(), csv.as_bytes())?;
    Ok(format!(
        "train: {} on {} pairs, final loss {}",
        cfg.family.name(),
        pairs.len(),
        curve.0.last().map_or("n/a".into(), |l| sig6(*l))
    ))
}

pub fn cmd_gallery(cfg: &RunConfig) -> Result<String> {
    let layout = echo(cfg, "gallery")?;
    let b = &cfg.bench;
    let features = &b.detect.features;
    let views = view_subset(&b.gallery_elevations, &b.gallery_distances)?;
    let mut g = Gallery::new(features.dim()?);
    for model_id in 0..b.n_models as u32 {
        for v in &views {
            let path = layout.render(model_id, v.grid_index());
            let render = read_pgm(&path)?;
            let bbox = silhouette_bbox(&render).ok_or_else(|| Error::format(&path, "render has no foreground"))?;
            let meta = ExemplarMeta::new(
                g.len() as u32,
                model_id,
                v.azimuth,
                v.elevation,
                v.distance_index,
                bbox.aspect_ratio(),
            )?;
            g.push(meta, features.crop_features(&render, &bbox)?)?;
        }
    }
    let n = g.len();
    write_atomic(&layout.gallery(), &GalleryFile::uncalibrated(g).to_bytes()?)?;
    Ok(format!("gallery: {n} exemplars"))
}

pub fn cmd_calibrate(cfg: &RunConfig, gallery: Option<&Path>, model: Option<&Path>) -> Result<String> {
    let layout = echo(cfg, "calibrate")?;
    let b = &cfg.bench;
    let gf = read_gallery(gallery.unwrap_or(&layout.gallery()))?;
    let model = read_model(model.unwrap_or(&layout.model()))?;
    let images = (0..b.n_calibration_images)
        .map(|i| read_pgm(&layout.calibration_image(i)))
        .collect::<Result<Vec<_>>>()?;
    let patches = calib::sample_random_patches(
        &images,
        b.calibration_patches,
        b.patch_min_frac,
        b.patch_max_frac,
        seed::mix(b.seed, seed::stream::PATCHES, u64::MAX),
        &b.detect.features,
    )?
    .iter()
    .map(|p| crate::adapt::adapt_forward(&model, p))
    .collect::<Result<Vec<_>>>()?;
    let stats = calib::compute_stats(&gf.gallery, &patches, Similarity::Cosine, b.percentile)?;
    let params = calib::fit_calibration(&stats, b.fit_eps);
    let invalid = params.invalid_count();
    if invalid == params.len() && !params.is_empty() {
        return Err(Error::Numerical(format!("calibration degenerate for all {invalid} exemplars")));
    }
    let out = GalleryFile {
        gallery: gf.gallery,
        calibration: params,
        has_calibration: true,
    };
    write_atomic(&layout.calibrated(), &out.to_bytes()?)?;
    Ok(format!(
        "calibrate: {} exemplars, {} degenerate, {} patches",
        out.calibration.len(),
        invalid,
        patches.len()
    ))
}

/// Scene images named by the configuration, in image-id order.
pub fn default_images(cfg: &RunConfig) -> Vec<PathBuf> {
    let layout = Layout::new(&cfg.out_dir);
    (0..cfg.bench.n_scenes).map(|i| layout.scene(i)).collect()
}

pub fn cmd_detect(
    cfg: &RunConfig,
    gallery: Option<&Path>,
    model: Option<&Path>,
    images: &[PathBuf],
) -> Result<String> {
    let layout = echo(cfg, "detect")?;
    let gpath = gallery.map_or_else(|| layout.calibrated(), Path::to_path_buf);
    let gf = read_gallery(&gpath)?;
    let model = read_model(model.unwrap_or(&layout.model()))?;
    let fg = calib::fold(&gf.gallery, &gf.calibration)?;
    let external = match &cfg.bench.detect.proposals {
        ProposalSource::ExternalFile(p) => Some(parse_proposals(&read_text(p)?, p)?),
        ProposalSource::SlidingWindow(_) => None,
    };
    let mut all = Vec::new();
    for (image_id, path) in images.iter().enumerate() {
        let img = read_pgm(path)?;
        let proposals: Vec<BBox> = match &external {
            Some(rows) => rows.iter().filter(|(i, _)| *i == image_id).map(|(_, b)| *b).collect(),
            None => crate::detect::proposals_for(&img, &cfg.bench.detect)?,
        };
        let dets = detect_with_proposals(&img, &proposals, &model, &fg, &cfg.bench.detect).map_err(|e| match e {
            Error::DimMismatch { .. } => Error::format(path, e.to_string()),
            other => other,
        })?;
        all.extend(dets.into_iter().map(|det| ImageDetection { image_id, det }));
    }
    write_atomic(&layout.detections(), format_detections(&all).as_bytes())?;
    Ok(format!("detect: {} images, {} detections", images.len(), all.len()))
}

/// Metrics computed by [`cmd_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub ap: f64,
    pub retrieval_top1: f64,
    pub pose_within_20: f64,
    pub n_detections: usize,
    pub n_gt: usize,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    detections: Option<&Path>,
    annotations: Option<&Path>,
    gallery: Option<&Path>,
    model: Option<&Path>,
) -> Result<(EvalSummary, String)> {
    let layout = echo(cfg, "eval")?;
    let dpath = detections.map_or_else(|| layout.detections(), Path::to_path_buf);
    let apath = annotations.map_or_else(|| layout.annotations(), Path::to_path_buf);
    let dets = parse_detections(&read_text(&dpath)?, &dpath)?;
    let (gt, objects) = read_ground_truth(&apath)?;
    let gf = read_gallery(gallery.unwrap_or(&layout.calibrated()))?;
    let model = read_model(model.unwrap_or(&layout.model()))?;
    let known: std::collections::HashSet<u32> = gf.gallery.meta().iter().map(|m| m.exemplar_id).collect();
    if let Some(d) = dets.iter().find(|d| !known.contains(&d.det.exemplar_id)) {
        return Err(Error::format(
            &dpath,
            format!("detection references unknown exemplar {}", d.det.exemplar_id),
        ));
    }
    let n_gt = gt.n_objects();
    if n_gt == 0 {
        return Err(Error::format(&apath, "no ground-truth objects"));
    }
    let labels: Vec<bool> = match_detections(&dets, &gt, cfg.eval_iou).iter().map(|m| m.tp).collect();
    let ap = evalkit::average_precision(&labels, n_gt, cfg.ap_mode)?;
    let curve = pr_curve(&labels, n_gt)?;
    let pose = pose_error_at_recall(&dets, &gt, gf.gallery.meta(), cfg.pose_recall)?;

    let mut queries = Vec::with_capacity(n_gt);
    for (image_id, objs) in objects.iter().enumerate() {
        if objs.is_empty() {
            continue;
        }
        let img = read_pgm(&layout.scene(image_id))?;
        for o in objs {
            queries.push((cfg.bench.detect.features.crop_features(&img, &o.bbox)?, o.model_id));
        }
    }
    let retrieval_top1 = retrieval_accuracy(&queries, &gf.gallery, Similarity::Cosine, &model)?;

    let summary = EvalSummary {
        ap,
        retrieval_top1,
        pose_within_20: pose.fraction_within_20,
        n_detections: dets.len(),
        n_gt,
    };
    let metrics = format!(
        "metric,value\nap,{}\nretrieval_top1,{}\npose_within_20,{}\nn_detections,{}\nn_gt,{}\n",
        sig6(summary.ap),
        sig6(summary.retrieval_top1),
        sig6(summary.pose_within_20),
        summary.n_detections,
        summary.n_gt
    );
    write_atomic(&layout.metrics(), metrics.as_bytes())?;
    let mut pr = String::from("rank,recall,precision\n");
    for (k, (r, p)) in curve.points.iter().enumerate() {
        let _ = writeln!(pr, "{},{},{}", k + 1, sig6(*r), sig6(*p));
    }
    write_atomic(&layout.pr(), pr.as_bytes())?;
    let mut hist = String::from("bin_start_deg,bin_end_deg,count\n");
    for (i, c) in pose.histogram.iter().enumerate() {
        let lo = i as f64 * POSE_BIN_DEG;
        let _ = writeln!(hist, "{},{},{}", lo, lo + POSE_BIN_DEG, c);
    }
    write_atomic(&layout.pose(), hist.as_bytes())?;
    let line = format!(
        "ap {} retrieval_top1 {} pose_within_20 {}",
        sig6(summary.ap),
        sig6(summary.retrieval_top1),
        sig6(summary.pose_within_20)
    );
    Ok((summary, line))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let layout = echo(cfg, "ablate")?;
    let bench = Benchmark::build(&cfg.bench)?;
    let fam = ablate_families(&bench, &cfg.ablate_families, &cfg.ablate_thresholds)?;
    write_atomic(&layout.ablate_families(), fam.to_csv().as_bytes())?;
    let (model, _) = bench.train_family(cfg.family)?;
    let size = ablate_gallery_size(&bench, &model, &cfg.ablate_counts, cfg.ablate_mode)?;
    write_atomic(&layout.ablate_gallery(), size.to_csv().as_bytes())?;
    Ok(format!(
        "ablate: {} families x {} thresholds, {} gallery sizes",
        fam.rows.len(),
        fam.columns.len(),
        size.rows.len()
    ))
}
