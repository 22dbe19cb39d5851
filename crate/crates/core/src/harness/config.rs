//! Section-keyed `key = value` run configuration.
//!
//! ```text
//! # comment
//! [train]
//! family = affine_relu
//! max_epochs = 30
//! ```
//!
//! Every key has a default (see [`RunConfig::default`]); unknown sections or
//! keys are rejected. [`RunConfig::to_ini`] writes the effective
//! configuration in the same syntax, and parsing it back is lossless.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapt::TransformFamily;
use crate::detect::{NmsMode, ProposalSource, SlidingWindowParams};
use crate::error::{Error, Result};
use crate::evalkit::{ApMode, BenchmarkConfig, SubsampleMode};
use crate::featspace::Extractor;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub bench: BenchmarkConfig,
    /// Family trained by `train` and used by the gallery-size ablation.
    pub family: TransformFamily,
    pub eval_iou: f64,
    pub ap_mode: ApMode,
    pub pose_recall: f64,
    pub ablate_families: Vec<TransformFamily>,
    pub ablate_thresholds: Vec<f64>,
    pub ablate_counts: Vec<usize>,
    pub ablate_mode: SubsampleMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            bench: BenchmarkConfig::default(),
            family: TransformFamily::AffineReLU,
            eval_iou: crate::evalkit::DEFAULT_MATCH_IOU,
            ap_mode: ApMode::AllPoints,
            pose_recall: crate::evalkit::DEFAULT_POSE_RECALL,
            ablate_families: TransformFamily::ALL.to_vec(),
            ablate_thresholds: vec![0.5, 0.6, 0.7, 0.75, 0.8, 0.9],
            ablate_counts: vec![72, 144, 288, 576],
            ablate_mode: SubsampleMode::RandomViews,
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    v.split(',').map(|t| f(t.trim())).collect()
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

fn ap_mode_name(m: ApMode) -> &'static str {
    match m {
        ApMode::AllPoints => "all_points",
        ApMode::ElevenPoint => "eleven_point",
    }
}

fn nms_mode_name(m: NmsMode) -> &'static str {
    match m {
        NmsMode::Joint => "joint",
        NmsMode::PerExemplar => "per_exemplar",
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header '{line}'")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            cfg.set(&section, key.trim(), value.trim())
                .map_err(|msg| err(msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed the pipeline draws from.
    pub fn set_seed(&mut self, seed: u64) {
        self.bench.seed = seed;
        self.bench.train.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.train.validate()?;
        self.bench.detect.validate()?;
        self.bench.detect.features.dim().map_err(|e| Error::Config(e.to_string()))?;
        let b = &self.bench;
        let positive = [
            ("synth.n_models", b.n_models),
            ("synth.n_pairs", b.n_pairs),
            ("synth.objects_per_scene", b.scene.objects_per_scene),
            ("calibration.n_images", b.n_calibration_images),
            ("calibration.patches", b.calibration_patches),
            ("train.hidden_dim", b.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if b.render_size < 32 {
            return Err(Error::Config("synth.render_size must be at least 32".into()));
        }
        if !(b.percentile > 0.0 && b.percentile <= 100.0) {
            return Err(Error::Config(format!("calibration.percentile {} outside (0, 100]", b.percentile)));
        }
        if !(0.0 < b.patch_min_frac && b.patch_min_frac <= b.patch_max_frac && b.patch_max_frac <= 1.0) {
            return Err(Error::Config("calibration patch fractions must satisfy 0 < min <= max <= 1".into()));
        }
        if !(0.0 < b.scene.min_render_frac && b.scene.min_render_frac <= b.scene.max_render_frac) {
            return Err(Error::Config("synth render fractions must satisfy 0 < min <= max".into()));
        }
        if b.scene.width < 32 || b.scene.height < 32 {
            return Err(Error::Config("synth scene size must be at least 32x32".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_iou) || !(0.0..=1.0).contains(&self.pose_recall) {
            return Err(Error::Config("eval.iou and eval.pose_recall must lie in [0, 1]".into()));
        }
        for &t in &self.ablate_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("ablate threshold {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let bad = || format!("invalid value '{v}' for {section}.{key}");
        let f64_ = || v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
        let usize_ = || v.parse::<usize>().map_err(|_| bad());
        let b = &mut self.bench;
        let feat = &mut b.detect.features;
        match (section, key) {
            ("run", "seed") => {
                let s = v.parse::<u64>().map_err(|_| bad())?;
                b.seed = s;
                b.train.seed = s;
            }
            ("run", "out_dir") => self.out_dir = PathBuf::from(v),

            ("features", "extractor") => {
                feat.extractor = match (v, feat.extractor) {
                    ("hog", Extractor::Hog { .. }) | ("grid", Extractor::Grid { .. }) => feat.extractor,
                    ("hog", _) => Extractor::Hog { cell_px: 4, n_orient: 9 },
                    ("grid", _) => Extractor::Grid { rows: 8, cols: 8 },
                    _ => return Err(bad()),
                }
            }
            ("features", "hog_cell") | ("features", "hog_orientations") => {
                let n = usize_()?;
                match &mut feat.extractor {
                    Extractor::Hog { cell_px, n_orient } => {
                        if key == "hog_cell" {
                            *cell_px = n
                        } else {
                            *n_orient = n
                        }
                    }
                    _ => return Err(format!("{section}.{key} requires extractor = hog (set it first)")),
                }
            }
            ("features", "grid_rows") | ("features", "grid_cols") => {
                let n = usize_()?;
                match &mut feat.extractor {
                    Extractor::Grid { rows, cols } => {
                        if key == "grid_rows" {
                            *rows = n
                        } else {
                            *cols = n
                        }
                    }
                    _ => return Err(format!("{section}.{key} requires extractor = grid (set it first)")),
                }
            }
            ("features", "canonical_size") => feat.canonical_size = usize_()?,
            ("features", "pool_k") => feat.pool_k = usize_()?,
            ("features", "pool_stride") => feat.pool_stride = usize_()?,
            ("features", "context") => feat.context = f64_()?,

            ("train", "family") => self.family = TransformFamily::parse(v).ok_or_else(bad)?,
            ("train", "lr0") => b.train.lr0 = f64_()?,
            ("train", "momentum") => b.train.momentum = f64_()?,
            ("train", "weight_decay") => b.train.weight_decay = f64_()?,
            ("train", "batch_size") => b.train.batch_size = usize_()?,
            ("train", "lr_drop_every") => b.train.lr_drop_every = usize_()?,
            ("train", "lr_drop_factor") => b.train.lr_drop_factor = f64_()?,
            ("train", "max_epochs") => b.train.max_epochs = usize_()?,
            ("train", "hidden_dim") => b.hidden_dim = usize_()?,

            ("detect", "ar_threshold") => b.detect.ar_threshold = f64_()?,
            ("detect", "nms_iou") => b.detect.nms_iou = f64_()?,
            ("detect", "nms_mode") => {
                b.detect.nms_mode = match v {
                    "joint" => NmsMode::Joint,
                    "per_exemplar" => NmsMode::PerExemplar,
                    _ => return Err(bad()),
                }
            }
            ("detect", "max_per_image") => b.detect.max_per_image = usize_()?,
            ("detect", "proposals") => {
                b.detect.proposals = if v == "sliding_window" {
                    ProposalSource::SlidingWindow(SlidingWindowParams::default())
                } else {
                    ProposalSource::ExternalFile(PathBuf::from(v))
                }
            }
            ("detect", "window_scales") | ("detect", "window_aspect_ratios") | ("detect", "window_stride") => {
                let ProposalSource::SlidingWindow(sw) = &mut b.detect.proposals else {
                    return Err(format!("{section}.{key} requires proposals = sliding_window"));
                };
                match key {
                    "window_stride" => sw.stride_frac = f64_()?,
                    _ => {
                        let vals = list(v, |t| t.parse::<f64>().ok().filter(|x| *x > 0.0 && x.is_finite()))
                            .filter(|l| !l.is_empty())
                            .ok_or_else(bad)?;
                        if key == "window_scales" {
                            sw.scales = vals
                        } else {
                            sw.aspect_ratios = vals
                        }
                    }
                }
            }

            ("calibration", "percentile") => b.percentile = f64_()?,
            ("calibration", "patches") => b.calibration_patches = usize_()?,
            ("calibration", "fit_eps") => b.fit_eps = f64_()?,
            ("calibration", "patch_min_frac") => b.patch_min_frac = f64_()?,
            ("calibration", "patch_max_frac") => b.patch_max_frac = f64_()?,
            ("calibration", "n_images") => b.n_calibration_images = usize_()?,

            ("synth", "n_models") => b.n_models = usize_()?,
            ("synth", "gallery_elevations") => {
                b.gallery_elevations = list(v, |t| t.parse().ok()).filter(|l| !l.is_empty()).ok_or_else(bad)?
            }
            ("synth", "gallery_distances") => {
                b.gallery_distances = list(v, |t| t.parse().ok()).filter(|l| !l.is_empty()).ok_or_else(bad)?
            }
            ("synth", "render_size") => b.render_size = usize_()?,
            ("synth", "n_pairs") => b.n_pairs = usize_()?,
            ("synth", "n_scenes") => b.n_scenes = usize_()?,
            ("synth", "scene_width") => b.scene.width = usize_()?,
            ("synth", "scene_height") => b.scene.height = usize_()?,
            ("synth", "objects_per_scene") => b.scene.objects_per_scene = usize_()?,
            ("synth", "min_render_frac") => b.scene.min_render_frac = f64_()?,
            ("synth", "max_render_frac") => b.scene.max_render_frac = f64_()?,

            ("eval", "iou") => self.eval_iou = f64_()?,
            ("eval", "ap_mode") => {
                self.ap_mode = match v {
                    "all_points" => ApMode::AllPoints,
                    "eleven_point" => ApMode::ElevenPoint,
                    _ => return Err(bad()),
                }
            }
            ("eval", "pose_recall") => self.pose_recall = f64_()?,

            ("ablate", "families") => {
                self.ablate_families = list(v, TransformFamily::parse).filter(|l| !l.is_empty()).ok_or_else(bad)?
            }
            ("ablate", "ar_thresholds") => {
                self.ablate_thresholds = list(v, |t| t.parse().ok()).filter(|l| !l.is_empty()).ok_or_else(bad)?
            }
            ("ablate", "gallery_counts") => {
                self.ablate_counts = list(v, |t| t.parse().ok()).filter(|l| !l.is_empty()).ok_or_else(bad)?
            }
            ("ablate", "gallery_mode") => self.ablate_mode = SubsampleMode::parse(v).ok_or_else(bad)?,

            _ if section.is_empty() => return Err(format!("key '{key}' outside any section")),
            _ => return Err(format!("unknown key '{key}' in section [{section}]")),
        }
        Ok(())
    }

    /// Effective configuration in the input syntax.
    pub fn to_ini(&self) -> String {
        let b = &self.bench;
        let f = &b.detect.features;
        let mut s = String::new();
        let _ = writeln!(s, "[run]\nseed = {}\nout_dir = {}", b.seed, self.out_dir.display());
        s.push_str("\n[features]\n");
        match f.extractor {
            Extractor::Hog { cell_px, n_orient } => {
                let _ = writeln!(s, "extractor = hog\nhog_cell = {cell_px}\nhog_orientations = {n_orient}");
            }
            Extractor::Grid { rows, cols } => {
                let _ = writeln!(s, "extractor = grid\ngrid_rows = {rows}\ngrid_cols = {cols}");
            }
        }
        let _ = writeln!(
            s,
            "canonical_size = {}\npool_k = {}\npool_stride = {}\ncontext = {}",
            f.canonical_size, f.pool_k, f.pool_stride, f.context
        );
        let t = &b.train;
        let _ = writeln!(
            s,
            "\n[train]\nfamily = {}\nlr0 = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\n\
             lr_drop_every = {}\nlr_drop_factor = {}\nmax_epochs = {}\nhidden_dim = {}",
            self.family.name(),
            t.lr0,
            t.momentum,
            t.weight_decay,
            t.batch_size,
            t.lr_drop_every,
            t.lr_drop_factor,
            t.max_epochs,
            b.hidden_dim
        );
        let d = &b.detect;
        let _ = writeln!(
            s,
            "\n[detect]\nar_threshold = {}\nnms_iou = {}\nnms_mode = {}\nmax_per_image = {}",
            d.ar_threshold,
            d.nms_iou,
            nms_mode_name(d.nms_mode),
            d.max_per_image
        );
        match &d.proposals {
            ProposalSource::SlidingWindow(sw) => {
                let _ = writeln!(
                    s,
                    "proposals = sliding_window\nwindow_scales = {}\nwindow_aspect_ratios = {}\nwindow_stride = {}",
                    join(&sw.scales, |x| x.to_string()),
                    join(&sw.aspect_ratios, |x| x.to_string()),
                    sw.stride_frac
                );
            }
            ProposalSource::ExternalFile(p) => {
                let _ = writeln!(s, "proposals = {}", p.display());
            }
        }
        let _ = writeln!(
            s,
            "\n[calibration]\npercentile = {}\npatches = {}\nfit_eps = {}\npatch_min_frac = {}\n\
             patch_max_frac = {}\nn_images = {}",
            b.percentile, b.calibration_patches, b.fit_eps, b.patch_min_frac, b.patch_max_frac, b.n_calibration_images
        );
        let _ = writeln!(
            s,
            "\n[synth]\nn_models = {}\ngallery_elevations = {}\ngallery_distances = {}\nrender_size = {}\n\
             n_pairs = {}\nn_scenes = {}\nscene_width = {}\nscene_height = {}\nobjects_per_scene = {}\n\
             min_render_frac = {}\nmax_render_frac = {}",
            b.n_models,
            join(&b.gallery_elevations, |x| x.to_string()),
            join(&b.gallery_distances, |x| x.to_string()),
            b.render_size,
            b.n_pairs,
            b.n_scenes,
            b.scene.width,
            b.scene.height,
            b.scene.objects_per_scene,
            b.scene.min_render_frac,
            b.scene.max_render_frac
        );
        let _ = writeln!(
            s,
            "\n[eval]\niou = {}\nap_mode = {}\npose_recall = {}",
            self.eval_iou,
            ap_mode_name(self.ap_mode),
            self.pose_recall
        );
        let _ = writeln!(
            s,
            "\n[ablate]\nfamilies = {}\nar_thresholds = {}\ngallery_counts = {}\ngallery_mode = {}",
            join(&self.ablate_families, |f| f.name().to_string()),
            join(&self.ablate_thresholds, |x| x.to_string()),
            join(&self.ablate_counts, |x| x.to_string()),
            self.ablate_mode.name()
        );
        s
    }
}
