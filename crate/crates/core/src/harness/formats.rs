//! On-disk formats. Binary containers are little-endian with a 5-byte magic.
//!
//! Gallery (`XGAL1`): `u32 n, u32 dim, u8 has_calibration`, then per entry
//! `u32 exemplar_id, u32 model_id, f32 azimuth, f32 elevation,
//! u8 distance_index, f32 aspect_ratio, f32 c, f32 d, u8 valid` followed by
//! `dim` f32 feature values (unnormalized). The header is 14 bytes and each
//! entry `30 + 4 dim` bytes.
//!
//! Model (`XADP1`): `u8 family tag`, five u32 shape descriptors
//! `in_channels, in_rows, in_cols, out_dim, hidden_dim`, then every parameter
//! tensor as f32 in the order of [`AdaptationModel::params`] (weights
//! row-major, then biases; two-layer: layer 1 then layer 2).
//!
//! Pairs (`XPRS1`): `u32 n, u32 dim`, then per pair `dim` f64 of `x` and
//! `dim` f64 of `y`.
//!
//! Text formats are ASCII with LF line endings; `#` starts a comment line.
//! Proposals: `image_id x y w h`. Annotations: `image_id x y w h model_id
//! azimuth elevation dist`. Detections: `image_id exemplar_id score x y w h`
//! with the score printed to 6 decimals.

use std::fmt::Write as _;
use std::path::Path;

use crate::adapt::{AdaptationModel, Shape3, TrainingPair, TransformFamily};
use crate::calib::CalibrationParams;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::evalkit::ImageDetection;
use crate::featspace::{quantize_u8, FeatureVector, GrayImage};
use crate::simkit::{ExemplarMeta, Gallery};
use crate::synthgen::{SceneObject, ViewParams};
use crate::Detection;

pub const GALLERY_MAGIC: &[u8; 5] = b"XGAL1";
pub const MODEL_MAGIC: &[u8; 5] = b"XADP1";
pub const PAIRS_MAGIC: &[u8; 5] = b"XPRS1";
pub const GALLERY_HEADER_BYTES: usize = 14;
pub const GALLERY_ENTRY_BYTES: usize = 30;

/// Expected size of a gallery file with `n` entries of dimension `dim`.
pub fn gallery_file_len(n: usize, dim: usize) -> usize {
    GALLERY_HEADER_BYTES + n * (GALLERY_ENTRY_BYTES + 4 * dim)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 5]) -> Result<()> {
        if self.take(5)? != m {
            return Err(Error::format(
                self.path,
                format!("bad magic, expected {}", String::from_utf8_lossy(m)),
            ));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// A gallery together with its stored calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryFile {
    pub gallery: Gallery,
    pub calibration: CalibrationParams,
    pub has_calibration: bool,
}

impl GalleryFile {
    pub fn uncalibrated(gallery: Gallery) -> Self {
        let calibration = CalibrationParams::identity(gallery.len());
        Self {
            gallery,
            calibration,
            has_calibration: false,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.gallery;
        if self.calibration.len() != g.len() {
            return Err(Error::DimMismatch {
                expected: g.len(),
                got: self.calibration.len(),
            });
        }
        let mut out = Vec::with_capacity(gallery_file_len(g.len(), g.dim()));
        out.extend_from_slice(GALLERY_MAGIC);
        put_u32(&mut out, g.len())?;
        put_u32(&mut out, g.dim())?;
        out.push(self.has_calibration as u8);
        for (i, (m, f)) in g.entries().enumerate() {
            out.extend_from_slice(&m.exemplar_id.to_le_bytes());
            out.extend_from_slice(&m.model_id.to_le_bytes());
            put_f32(&mut out, m.azimuth);
            put_f32(&mut out, m.elevation);
            out.push(m.distance_index);
            put_f32(&mut out, m.aspect_ratio);
            put_f32(&mut out, self.calibration.c[i]);
            put_f32(&mut out, self.calibration.d[i]);
            out.push(self.calibration.valid[i] as u8);
            for &v in f.as_slice() {
                put_f32(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, path);
        r.magic(GALLERY_MAGIC)?;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let has_calibration = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::format(path, format!("calibration flag {v}"))),
        };
        if buf.len() != gallery_file_len(n, dim) {
            return Err(Error::format(
                path,
                format!(
                    "length {} does not match {} entries of dim {} ({} bytes expected)",
                    buf.len(),
                    n,
                    dim,
                    gallery_file_len(n, dim)
                ),
            ));
        }
        if dim == 0 {
            return Err(Error::format(path, "zero feature dimension"));
        }
        let mut gallery = Gallery::new(dim);
        let mut cal = CalibrationParams {
            c: Vec::with_capacity(n),
            d: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
        };
        let bad = |e: Error| Error::format(path, e.to_string());
        for _ in 0..n {
            let exemplar_id = r.u32()?;
            let model_id = r.u32()?;
            let az = r.f32()? as f64;
            let el = r.f32()? as f64;
            let dist = r.u8()?;
            let ar = r.f32()? as f64;
            let meta = ExemplarMeta::new(exemplar_id, model_id, az, el, dist, ar).map_err(bad)?;
            cal.c.push(r.f32()? as f64);
            cal.d.push(r.f32()? as f64);
            cal.valid.push(match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::format(path, format!("valid flag {v}"))),
            });
            let feats = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            gallery.push(meta, FeatureVector::new(feats).map_err(bad)?).map_err(bad)?;
        }
        r.finish()?;
        Ok(Self {
            gallery,
            calibration: cal,
            has_calibration,
        })
    }
}

pub fn model_to_bytes(m: &AdaptationModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(m.family().tag());
    let s = m.in_shape();
    for v in [s.channels, s.rows, s.cols, m.out_dim(), m.hidden_dim()] {
        put_u32(&mut out, v)?;
    }
    for t in m.params() {
        for &v in t {
            put_f32(&mut out, v);
        }
    }
    Ok(out)
}

pub fn model_from_bytes(buf: &[u8], path: &Path) -> Result<AdaptationModel> {
    let mut r = Reader::new(buf, path);
    r.magic(MODEL_MAGIC)?;
    let tag = r.u8()?;
    let family =
        TransformFamily::from_tag(tag).ok_or_else(|| Error::format(path, format!("unknown family tag {tag}")))?;
    let mut d = [0usize; 5];
    for v in d.iter_mut() {
        *v = r.u32()? as usize;
    }
    let shape = Shape3::new(d[0], d[1], d[2]);
    let sizes =
        AdaptationModel::param_sizes(family, shape, d[3], d[4]).map_err(|e| Error::format(path, e.to_string()))?;
    let params = sizes
        .iter()
        .map(|&n| (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    AdaptationModel::from_params(family, shape, d[3], d[4], params).map_err(|e| Error::format(path, e.to_string()))
}

pub fn pairs_to_bytes(pairs: &[TrainingPair]) -> Result<Vec<u8>> {
    let dim = pairs.first().map_or(0, |p| p.x.dim());
    let mut out = Vec::with_capacity(13 + pairs.len() * 16 * dim);
    out.extend_from_slice(PAIRS_MAGIC);
    put_u32(&mut out, pairs.len())?;
    put_u32(&mut out, dim)?;
    for p in pairs {
        if p.x.dim() != dim || p.y.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.x.dim().max(p.y.dim()),
            });
        }
        for v in p.x.as_slice().iter().chain(p.y.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn pairs_from_bytes(buf: &[u8], path: &Path) -> Result<Vec<TrainingPair>> {
    let mut r = Reader::new(buf, path);
    r.magic(PAIRS_MAGIC)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if buf.len() != 13 + n * 16 * dim {
        return Err(Error::format(path, format!("length {} does not match {n} pairs of dim {dim}", buf.len())));
    }
    let bad = |e: Error| Error::format(path, e.to_string());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let y = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(
            TrainingPair::new(FeatureVector::new(x).map_err(bad)?, FeatureVector::new(y).map_err(bad)?)
                .map_err(bad)?,
        );
    }
    r.finish()?;
    Ok(out)
}

/// Binary PGM (P5, maxval 255), pixels rounded half-up.
pub fn pgm_to_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| quantize_u8(p)));
    out
}

pub fn pgm_from_bytes(buf: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("unsupported PGM magic '{}'", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM header field '{s}'")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if buf.len() < pos || buf.len() - pos != w * h {
        return Err(Error::format(path, format!("PGM raster is not {w}x{h} bytes")));
    }
    let px = buf[pos..].iter().map(|&b| b as f64 / maxval as f64).collect();
    GrayImage::new(h, w, px).map_err(|e| Error::format(path, e.to_string()))
}

fn parse_lines<T>(
    text: &str,
    path: &Path,
    n_fields: usize,
    mut f: impl FnMut(&[&str]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != n_fields {
            return Err(err(format!("expected {n_fields} fields, found {}", fields.len())));
        }
        out.push(f(&fields).map_err(err)?);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("invalid {what} '{s}'"))
}

fn bbox_fields(f: &[&str]) -> std::result::Result<BBox, String> {
    BBox::new(field(f[0], "x")?, field(f[1], "y")?, field(f[2], "w")?, field(f[3], "h")?).map_err(|e| e.to_string())
}

pub fn parse_proposals(text: &str, path: &Path) -> Result<Vec<(usize, BBox)>> {
    parse_lines(text, path, 5, |f| Ok((field(f[0], "image_id")?, bbox_fields(&f[1..5])?)))
}

pub fn format_proposals(props: &[(usize, BBox)]) -> String {
    let mut s = String::from("# image_id x y w h\n");
    for (id, b) in props {
        let _ = writeln!(s, "{id} {} {} {} {}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn format_annotations(scenes: &[(usize, Vec<SceneObject>)]) -> String {
    let mut s = String::from("# image_id x y w h model_id azimuth elevation dist\n");
    for (id, objs) in scenes {
        for o in objs {
            let b = o.bbox;
            let _ = writeln!(
                s,
                "{id} {} {} {} {} {} {} {} {}",
                b.x, b.y, b.w, b.h, o.model_id, o.view.azimuth, o.view.elevation, o.view.distance_index
            );
        }
    }
    s
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<(usize, SceneObject)>> {
    parse_lines(text, path, 9, |f| {
        let azimuth: f64 = field(f[6], "azimuth")?;
        let elevation: f64 = field(f[7], "elevation")?;
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err("non-finite angle".into());
        }
        Ok((
            field(f[0], "image_id")?,
            SceneObject {
                bbox: bbox_fields(&f[1..5])?,
                model_id: field(f[5], "model_id")?,
                view: ViewParams {
                    azimuth,
                    elevation,
                    distance_index: field(f[8], "dist")?,
                },
            },
        ))
    })
}

pub fn format_detections(dets: &[ImageDetection]) -> String {
    let mut s = String::from("# image_id exemplar_id score x y w h\n");
    for d in dets {
        let b = d.det.bbox;
        let _ = writeln!(
            s,
            "{} {} {:.6} {} {} {} {}",
            d.image_id, d.det.exemplar_id, d.det.score, b.x, b.y, b.w, b.h
        );
    }
    s
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<ImageDetection>> {
    parse_lines(text, path, 7, |f| {
        let score: f64 = field(f[2], "score")?;
        if score.is_nan() {
            return Err("NaN score".into());
        }
        Ok(ImageDetection {
            image_id: field(f[0], "image_id")?,
            det: Detection {
                exemplar_id: field(f[1], "exemplar_id")?,
                score,
                bbox: bbox_fields(&f[3..7])?,
            },
        })
    })
}
