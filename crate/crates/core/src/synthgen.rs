//! Deterministic procedural benchmark data.
//!
//! Models are assemblies of axis-aligned cuboids ("chair", "table", "shelf",
//! "sofa"), rendered by a small perspective rasterizer (painter's algorithm,
//! flat shading) onto a white background. Composites replace the white
//! background with value-noise texture; they play the role of real images in
//! training pairs and test scenes.

use rand::Rng;

use crate::adapt::TrainingPair;
use crate::detect::{iou, BBox};
use crate::error::{Error, Result};
use crate::featspace::{FeatureConfig, GrayImage};
use crate::seed;

pub const N_AZIMUTH: usize = 36;
pub const N_ELEVATION: usize = 7;
pub const N_DISTANCE: usize = 3;
pub const AZIMUTH_STEP: f64 = 360.0 / N_AZIMUTH as f64;
pub const MAX_ELEVATION: f64 = 60.0;
pub const ELEVATION_STEP: f64 = MAX_ELEVATION / (N_ELEVATION - 1) as f64;
/// Camera radius per distance index, in model units (models fit a unit cube).
pub const CAMERA_RADII: [f64; N_DISTANCE] = [2.2, 2.8, 3.6];
/// Focal length as a multiple of the render size.
pub const FOCAL: f64 = 1.0;
/// Render pixels at or above this value count as background.
pub const WHITE_THRESHOLD: f64 = 0.999;
/// Maximum pairwise IoU between objects placed in one scene.
pub const SCENE_MAX_IOU: f64 = 0.2;
pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Chair,
    Table,
    Shelf,
    Sofa,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::Chair,
        ModelFamily::Table,
        ModelFamily::Shelf,
        ModelFamily::Sofa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Chair => "chair",
            ModelFamily::Table => "table",
            ModelFamily::Shelf => "shelf",
            ModelFamily::Sofa => "sofa",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cuboid {
    pub center: [f64; 3],
    /// Full side lengths along x, y (up), z.
    pub size: [f64; 3],
    pub albedo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcModel {
    pub model_id: u32,
    pub family: ModelFamily,
    pub parts: Vec<Cuboid>,
}

impl ProcModel {
    /// One-line text description used in the library listing.
    pub fn describe(&self) -> String {
        let mut s = format!("{} {} {}", self.model_id, self.family.name(), self.parts.len());
        for p in &self.parts {
            s.push_str(&format!(
                " {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                p.center[0], p.center[1], p.center[2], p.size[0], p.size[1], p.size[2], p.albedo
            ));
        }
        s
    }
}

/// Camera pose on the viewing sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance_index: u8,
}

impl ViewParams {
    /// View at grid indices `(azimuth, elevation, distance)`.
    pub fn from_indices(az: usize, el: usize, dist: usize) -> Result<Self> {
        if az >= N_AZIMUTH || el >= N_ELEVATION || dist >= N_DISTANCE {
            return Err(Error::InvalidArgument(format!(
                "view index ({az}, {el}, {dist}) outside the {N_AZIMUTH}x{N_ELEVATION}x{N_DISTANCE} grid"
            )));
        }
        Ok(Self {
            azimuth: az as f64 * AZIMUTH_STEP,
            elevation: el as f64 * ELEVATION_STEP,
            distance_index: dist as u8,
        })
    }

    /// Position of this view in [`view_grid`] order.
    pub fn grid_index(&self) -> usize {
        let az = (self.azimuth.rem_euclid(360.0) / AZIMUTH_STEP).round() as usize % N_AZIMUTH;
        let el = (self.elevation / ELEVATION_STEP).round() as usize;
        (az * N_ELEVATION + el) * N_DISTANCE + self.distance_index as usize
    }
}

/// The full 36 x 7 x 3 grid, azimuth-major, then elevation, then distance.
pub fn view_grid() -> Vec<ViewParams> {
    let mut out = Vec::with_capacity(N_AZIMUTH * N_ELEVATION * N_DISTANCE);
    for az in 0..N_AZIMUTH {
        for el in 0..N_ELEVATION {
            for d in 0..N_DISTANCE {
                out.push(ViewParams::from_indices(az, el, d).unwrap());
            }
        }
    }
    out
}

/// Subset of the grid: every azimuth at the given elevation and distance
/// indices, in grid order.
pub fn view_subset(elevations: &[usize], distances: &[usize]) -> Result<Vec<ViewParams>> {
    let mut out = Vec::new();
    for az in 0..N_AZIMUTH {
        for &el in elevations {
            for &d in distances {
                out.push(ViewParams::from_indices(az, el, d)?);
            }
        }
    }
    Ok(out)
}

fn jitter(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn cuboid(center: [f64; 3], size: [f64; 3], albedo: f64) -> Cuboid {
    Cuboid {
        center,
        size,
        albedo,
    }
}

/// Four legs under a rectangle of half-extents `(hx, hz)` with leg side `t`
/// and height `h`, standing on y = 0.
fn legs(hx: f64, hz: f64, t: f64, h: f64, albedo: f64) -> Vec<Cuboid> {
    let mut out = Vec::new();
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            out.push(cuboid(
                [sx * (hx - t / 2.0), h / 2.0, sz * (hz - t / 2.0)],
                [t, h, t],
                albedo,
            ));
        }
    }
    out
}

fn build_parts(family: ModelFamily, rng: &mut impl Rng) -> Vec<Cuboid> {
    let light = jitter(rng, 0.45, 0.9);
    let dark = jitter(rng, 0.1, 0.45);
    match family {
        ModelFamily::Chair => {
            let (w, d) = (jitter(rng, 0.45, 0.65), jitter(rng, 0.45, 0.65));
            let seat_h = jitter(rng, 0.4, 0.55);
            let t = jitter(rng, 0.04, 0.08);
            let back_h = jitter(rng, 0.35, 0.6);
            let mut p = legs(w / 2.0, d / 2.0, t, seat_h, dark);
            p.push(cuboid([0.0, seat_h + 0.03, 0.0], [w, 0.06, d], light));
            p.push(cuboid(
                [0.0, seat_h + 0.06 + back_h / 2.0, -d / 2.0 + 0.03],
                [w, back_h, 0.06],
                light,
            ));
            p
        }
        ModelFamily::Table => {
            let (w, d) = (jitter(rng, 0.9, 1.3), jitter(rng, 0.45, 0.9));
            let h = jitter(rng, 0.45, 0.8);
            let t = jitter(rng, 0.05, 0.1);
            let mut p = legs(w / 2.0, d / 2.0, t, h, dark);
            p.push(cuboid([0.0, h + 0.03, 0.0], [w, 0.06, d], light));
            p
        }
        ModelFamily::Shelf => {
            let (w, h, d) = (jitter(rng, 0.45, 0.9), 1.0, jitter(rng, 0.25, 0.4));
            let shelves = rng.gen_range(3..=4);
            let side = 0.05;
            let mut p = vec![
                cuboid([-w / 2.0 + side / 2.0, h / 2.0, 0.0], [side, h, d], light),
                cuboid([w / 2.0 - side / 2.0, h / 2.0, 0.0], [side, h, d], light),
                cuboid([0.0, h / 2.0, -d / 2.0 + 0.01], [w, h, 0.02], dark),
            ];
            for k in 0..shelves {
                let y = 0.02 + k as f64 * (h - 0.04) / (shelves - 1) as f64;
                p.push(cuboid([0.0, y, 0.0], [w - 2.0 * side, 0.04, d], light));
            }
            p
        }
        ModelFamily::Sofa => {
            let (w, d) = (jitter(rng, 1.0, 1.4), jitter(rng, 0.45, 0.65));
            let base_h = jitter(rng, 0.25, 0.35);
            let back_h = jitter(rng, 0.25, 0.4);
            let arm = jitter(rng, 0.08, 0.15);
            let arm_h = base_h + jitter(rng, 0.08, 0.18);
            vec![
                cuboid([0.0, base_h / 2.0, 0.0], [w, base_h, d], light),
                cuboid(
                    [0.0, base_h + back_h / 2.0, -d / 2.0 + 0.06],
                    [w, back_h, 0.12],
                    light,
                ),
                cuboid([-w / 2.0 + arm / 2.0, arm_h / 2.0, 0.0], [arm, arm_h, d], dark),
                cuboid([w / 2.0 - arm / 2.0, arm_h / 2.0, 0.0], [arm, arm_h, d], dark),
            ]
        }
    }
}

/// Centre the parts on their bounding box and scale the longest side to 1.
fn normalize_parts(parts: &mut [Cuboid]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in parts.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p.center[k] - p.size[k] / 2.0);
            hi[k] = hi[k].max(p.center[k] + p.size[k] / 2.0);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let mid: Vec<f64> = (0..3).map(|k| 0.5 * (lo[k] + hi[k])).collect();
    for p in parts.iter_mut() {
        for k in 0..3 {
            p.center[k] = (p.center[k] - mid[k]) / extent;
            p.size[k] /= extent;
        }
    }
}

/// `n_models` models cycling through the families, each jittered from
/// `(seed, model_id)`.
pub fn make_model_library(seed: u64, n_models: usize) -> Result<Vec<ProcModel>> {
    if n_models == 0 {
        return Err(Error::InvalidArgument("model library needs at least one model".into()));
    }
    Ok((0..n_models)
        .map(|i| {
            let family = ModelFamily::ALL[i % ModelFamily::ALL.len()];
            let mut rng = seed::rng(seed, seed::stream::MODELS, i as u64);
            let mut parts = build_parts(family, &mut rng);
            normalize_parts(&mut parts);
            ProcModel {
                model_id: i as u32,
                family,
                parts,
            }
        })
        .collect())
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Fixed world-space light direction (towards the light).
pub fn light_dir() -> Vec3 {
    normalize3([0.4, 0.8, 0.45])
}

/// Pinhole camera looking at the origin from a point on the viewing sphere.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    focal: f64,
    half: f64,
}

impl Camera {
    pub fn new(view: &ViewParams, size: usize) -> Self {
        let az = view.azimuth.rem_euclid(360.0).to_radians();
        let el = view.elevation.to_radians();
        let r = CAMERA_RADII[view.distance_index as usize % N_DISTANCE];
        let eye = [r * el.cos() * az.sin(), r * el.sin(), r * el.cos() * az.cos()];
        let forward = normalize3([-eye[0], -eye[1], -eye[2]]);
        let right = normalize3(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        Self {
            eye,
            right,
            up,
            forward,
            focal: FOCAL * size as f64,
            half: size as f64 / 2.0,
        }
    }

    pub fn eye(&self) -> Vec3 {
        self.eye
    }

    /// Continuous pixel coordinates `(col, row)` and depth of a world point.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let d = sub(p, self.eye);
        let (x, y, z) = (dot3(d, self.right), dot3(d, self.up), dot3(d, self.forward));
        (self.half + self.focal * x / z, self.half - self.focal * y / z, z)
    }
}

/// Corners of a cuboid, indexed by bits (x, y, z) -> (bit0, bit1, bit2).
pub fn cuboid_corners(c: &Cuboid) -> [Vec3; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        for k in 0..3 {
            let s = if (i >> k) & 1 == 1 { 0.5 } else { -0.5 };
            corner[k] = c.center[k] + s * c.size[k];
        }
    }
    out
}

/// Faces as corner-index quads (counter-clockwise seen from outside) with
/// outward normals.
const FACES: [([usize; 4], Vec3); 6] = [
    ([0, 4, 6, 2], [-1.0, 0.0, 0.0]),
    ([1, 3, 7, 5], [1.0, 0.0, 0.0]),
    ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
    ([2, 6, 7, 3], [0.0, 1.0, 0.0]),
    ([0, 2, 3, 1], [0.0, 0.0, -1.0]),
    ([4, 5, 7, 6], [0.0, 0.0, 1.0]),
];

struct Face {
    depth: f64,
    pts: [(f64, f64); 4],
    shade: f64,
}

/// Fill a convex polygon, sampling at pixel centres.
fn fill_convex(img: &mut [f64], size: usize, pts: &[(f64, f64); 4], value: f64) {
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let c1 = ((max_x - 0.5).floor() as isize).min(size as isize - 1);
    let r1 = ((max_y - 0.5).floor() as isize).min(size as isize - 1);
    if c1 < 0 || r1 < 0 {
        return;
    }
    // Orientation-agnostic half-plane test.
    let area: f64 = (0..4)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % 4]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if area.abs() < 1e-12 {
        return;
    }
    let sign = area.signum();
    for r in r0..=r1 as usize {
        let py = r as f64 + 0.5;
        for c in c0..=c1 as usize {
            let px = c as f64 + 0.5;
            let inside = (0..4).all(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % 4]);
                sign * ((b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)) >= 0.0
            });
            if inside {
                img[r * size + c] = value;
            }
        }
    }
}

/// Perspective render of `m` on a white `size x size` canvas.
pub fn render_view(m: &ProcModel, v: &ViewParams, size: usize) -> Result<GrayImage> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!("render size {size} below 32")));
    }
    let cam = Camera::new(v, size);
    let light = light_dir();
    let mut faces = Vec::new();
    for part in &m.parts {
        let corners = cuboid_corners(part);
        for (idx, normal) in FACES {
            let mut centre = [0.0; 3];
            for &i in &idx {
                for k in 0..3 {
                    centre[k] += corners[i][k] / 4.0;
                }
            }
            if dot3(normal, sub(cam.eye, centre)) <= 0.0 {
                continue;
            }
            let mut pts = [(0.0, 0.0); 4];
            for (slot, &i) in pts.iter_mut().zip(&idx) {
                let (x, y, _) = cam.project(corners[i]);
                *slot = (x, y);
            }
            let d = sub(centre, cam.eye);
            faces.push(Face {
                depth: dot3(d, d),
                pts,
                shade: part.albedo * (0.4 + 0.6 * dot3(normal, light).max(0.0)),
            });
        }
    }
    // Far to near; ties keep generation order.
    faces.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut px = vec![1.0; size * size];
    for f in &faces {
        fill_convex(&mut px, size, &f.pts, f.shade);
    }
    GrayImage::new(size, size, px)
}

/// Tight box around pixels darker than [`WHITE_THRESHOLD`]; `None` if blank.
pub fn silhouette_bbox(render: &GrayImage) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..render.height() {
        for c in 0..render.width() {
            if render.get(r, c) < WHITE_THRESHOLD {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| BBox {
        x: c0 as i32,
        y: r0 as i32,
        w: (c1 - c0 + 1) as i32,
        h: (r1 - r0 + 1) as i32,
    })
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value-noise octaves as `(lattice spacing in pixels, amplitude)`. Fine,
/// equally weighted octaves give clutter at the scale of object edges.
const NOISE_OCTAVES: [(f64, f64); 3] = [(8.0, 1.0), (4.0, 1.0), (2.0, 1.0)];

/// Value-noise texture plus a few flat rectangles, stretched to [0.1, 0.9].
pub fn make_background(seed: u64, h: usize, w: usize) -> Result<GrayImage> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("background {h}x{w} below 8x8")));
    }
    let mut rng = seed::rng(seed, seed::stream::BACKGROUND, 0);
    let mut acc = vec![0.0; h * w];
    for &(spacing, amp) in &NOISE_OCTAVES {
        let gh = (h as f64 / spacing).ceil() as usize + 2;
        let gw = (w as f64 / spacing).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
        for r in 0..h {
            let fy = r as f64 / spacing;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for c in 0..w {
                let fx = c as f64 / spacing;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |y: usize, x: usize| lattice[y * gw + x];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                acc[r * w + c] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let lo0 = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in acc.iter_mut() {
        *v = (*v - lo0) / (hi0 - lo0).max(1e-12);
    }
    for _ in 0..rng.gen_range(0..=3) {
        let rw = rng.gen_range(w / 8..=w / 2).max(1);
        let rh = rng.gen_range(h / 8..=h / 2).max(1);
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let value: f64 = rng.gen();
        for r in y0..y0 + rh {
            for c in x0..x0 + rw {
                acc[r * w + c] = value;
            }
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let px = acc
        .into_iter()
        .map(|v| {
            if span > 1e-12 {
                0.1 + 0.8 * (v - lo) / span
            } else {
                0.5
            }
        })
        .collect();
    GrayImage::new(h, w, px)
}

/// Replace the white background of `render` with `bg`.
pub fn composite(render: &GrayImage, bg: &GrayImage) -> Result<GrayImage> {
    if render.height() != bg.height() || render.width() != bg.width() {
        return Err(Error::DimMismatch {
            expected: render.height() * render.width(),
            got: bg.height() * bg.width(),
        });
    }
    let px = render
        .pixels()
        .iter()
        .zip(bg.pixels())
        .map(|(&r, &b)| if r >= WHITE_THRESHOLD { b } else { r })
        .collect();
    GrayImage::new(render.height(), render.width(), px)
}

/// Clean render, its composite and the object box, all 8-bit quantized.
#[derive(Debug, Clone)]
pub struct PairImages {
    pub model_id: u32,
    pub view: ViewParams,
    pub render: GrayImage,
    pub composite: GrayImage,
    pub bbox: BBox,
}

/// Images behind training pair `index`.
pub fn training_pair_images(
    models: &[ProcModel],
    views: &[ViewParams],
    render_size: usize,
    seed: u64,
    index: usize,
) -> Result<PairImages> {
    if models.is_empty() || views.is_empty() {
        return Err(Error::InvalidArgument("need models and views for training pairs".into()));
    }
    let mut rng = seed::rng(seed, seed::stream::PAIRS, index as u64);
    let m = &models[rng.gen_range(0..models.len())];
    let v = views[rng.gen_range(0..views.len())];
    let bg_seed: u64 = rng.gen();
    let render = render_view(m, &v, render_size)?.quantized();
    let bg = make_background(bg_seed, render_size, render_size)?.quantized();
    let comp = composite(&render, &bg)?;
    let bbox = silhouette_bbox(&render)
        .ok_or_else(|| Error::Numerical(format!("model {} renders blank", m.model_id)))?;
    Ok(PairImages {
        model_id: m.model_id,
        view: v,
        render,
        composite: comp,
        bbox,
    })
}

/// `n_pairs` (composite, clean render) feature pairs cropped at the object box.
pub fn gen_training_pairs(
    models: &[ProcModel],
    views: &[ViewParams],
    n_pairs: usize,
    features: &FeatureConfig,
    render_size: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    (0..n_pairs)
        .map(|i| pair_features(&training_pair_images(models, views, render_size, seed, i)?, features))
        .collect()
}

/// Features of the composite (x) and the clean render (y) at the object box.
pub fn pair_features(p: &PairImages, features: &FeatureConfig) -> Result<TrainingPair> {
    TrainingPair::new(
        features.crop_features(&p.composite, &p.bbox)?,
        features.crop_features(&p.render, &p.bbox)?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub model_id: u32,
    pub view: ViewParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: GrayImage,
    pub annotations: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub objects_per_scene: usize,
    /// Render size range as fractions of the image height. Renders may be
    /// larger than the image; only their silhouettes have to fit.
    pub min_render_frac: f64,
    pub max_render_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            objects_per_scene: 2,
            min_render_frac: 1.1,
            max_render_frac: 1.8,
        }
    }
}

/// Scenes of pasted renders over generated backgrounds, 8-bit quantized.
pub fn gen_test_scenes(
    models: &[ProcModel],
    views: &[ViewParams],
    n_scenes: usize,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<Vec<SynthScene>> {
    if cfg.objects_per_scene == 0 {
        return Err(Error::InvalidArgument("objects_per_scene must be at least 1".into()));
    }
    if models.is_empty() || views.is_empty() {
        return Err(Error::InvalidArgument("need models and views for scenes".into()));
    }
    (0..n_scenes)
        .map(|i| gen_scene(models, views, cfg, seed, i))
        .collect()
}

fn gen_scene(
    models: &[ProcModel],
    views: &[ViewParams],
    cfg: &SceneConfig,
    seed: u64,
    index: usize,
) -> Result<SynthScene> {
    let mut rng = seed::rng(seed, seed::stream::SCENES, index as u64);
    let bg_seed: u64 = rng.gen();
    let mut image = make_background(bg_seed, cfg.height, cfg.width)?.quantized();
    let mut annotations: Vec<SceneObject> = Vec::new();
    let lo = (cfg.min_render_frac * cfg.height as f64).round().max(32.0) as usize;
    let hi = (cfg.max_render_frac * cfg.height as f64).round().max(lo as f64) as usize;
    let mut attempts = 0;
    while annotations.len() < cfg.objects_per_scene && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let m = &models[rng.gen_range(0..models.len())];
        let v = views[rng.gen_range(0..views.len())];
        let size = rng.gen_range(lo..=hi);
        let ux: f64 = rng.gen();
        let uy: f64 = rng.gen();
        let render = render_view(m, &v, size)?.quantized();
        let Some(sil) = silhouette_bbox(&render) else {
            continue;
        };
        if sil.w as usize > cfg.width || sil.h as usize > cfg.height {
            continue;
        }
        let x = (ux * (cfg.width as i32 - sil.w + 1) as f64).floor() as i32;
        let y = (uy * (cfg.height as i32 - sil.h + 1) as f64).floor() as i32;
        let bbox = BBox { x, y, w: sil.w, h: sil.h };
        if annotations.iter().any(|a| iou(&a.bbox, &bbox) > SCENE_MAX_IOU) {
            continue;
        }
        paste(&mut image, &render, &sil, x, y);
        annotations.push(SceneObject {
            bbox,
            model_id: m.model_id,
            view: v,
        });
    }
    Ok(SynthScene { image, annotations })
}

/// Copy the foreground pixels of `render` inside `sil` to `(x, y)`.
pub fn paste(dst: &mut GrayImage, render: &GrayImage, sil: &BBox, x: i32, y: i32) {
    for r in 0..sil.h {
        for c in 0..sil.w {
            let v = render.get((sil.y + r) as usize, (sil.x + c) as usize);
            if v < WHITE_THRESHOLD {
                dst.set((y + r) as usize, (x + c) as usize, v);
            }
        }
    }
}
