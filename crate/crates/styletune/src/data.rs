//! Procedural toy domain pair (structure-measurable source/target faces),
//! image-folder ingestion, batch sampling, and the low-frequency structure
//! metric.
//!
//! The target renderer is a deterministic function of the SAME face spec as
//! the source renderer (enlarged eyes, flat two-tone palette, dark outline),
//! so geometric keypoints match by construction and "preserves structure"
//! becomes computable. Loaders are stateless given (spec, seed); every load
//! is deterministic under a fixed RNG state in single-worker mode.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which rendering of a toy face spec to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyStyle {
    Source,
    Target,
}

/// Parameters of one toy face, all in [0,1] canvas units. Sampled from the
/// uniform ranges in [`ToyFaceSpec::sample`]; shapes always stay inside the
/// canvas and the eyes are symmetric about the face axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFaceSpec {
    pub face_cx: f64,
    pub face_cy: f64,
    pub face_rx: f64,
    pub face_ry: f64,
    /// Horizontal eye offset from the face axis.
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub mouth_curve: f64,
    pub palette: usize,
}

const PALETTES: usize = 4;
/// (background, face fill) for the source domain, RGB in [0,1].
const SOURCE_PALETTES: [([f32; 3], [f32; 3]); PALETTES] = [
    ([0.82, 0.87, 0.93], [0.95, 0.80, 0.69]),
    ([0.88, 0.84, 0.78], [0.87, 0.67, 0.53]),
    ([0.80, 0.90, 0.84], [0.98, 0.86, 0.76]),
    ([0.90, 0.82, 0.88], [0.76, 0.57, 0.46]),
];
/// Flat two-tone palette for the target (webtoon-ish) domain.
const TARGET_PALETTES: [([f32; 3], [f32; 3]); PALETTES] = [
    ([1.00, 0.96, 0.86], [1.00, 0.88, 0.77]),
    ([0.93, 0.93, 0.98], [0.99, 0.80, 0.62]),
    ([0.88, 0.97, 0.92], [1.00, 0.92, 0.82]),
    ([0.98, 0.90, 0.94], [0.93, 0.72, 0.57]),
];
const EYE_COLOR: [f32; 3] = [0.10, 0.08, 0.10];
const MOUTH_COLOR: [f32; 3] = [0.55, 0.20, 0.22];
const OUTLINE_COLOR: [f32; 3] = [0.12, 0.10, 0.14];
/// Eye enlargement of the target style.
const TARGET_EYE_SCALE: f64 = 1.6;

impl ToyFaceSpec {
    /// Draw a spec from the documented uniform ranges.
    pub fn sample(rng: &mut impl RngCore) -> Self {
        let mut uni = |lo: f64, hi: f64| {
            let u = (rng.next_u64() >> 11) as f64 / 9007199254740992.0;
            lo + u * (hi - lo)
        };
        let spec = Self {
            face_cx: uni(0.45, 0.55),
            face_cy: uni(0.46, 0.54),
            face_rx: uni(0.24, 0.33),
            face_ry: uni(0.28, 0.38),
            eye_dx: uni(0.09, 0.14),
            eye_y: uni(0.36, 0.46),
            eye_r: uni(0.025, 0.045),
            mouth_y: uni(0.62, 0.72),
            mouth_w: uni(0.08, 0.15),
            mouth_curve: uni(0.015, 0.05),
            palette: (rng.next_u64() % PALETTES as u64) as usize,
        };
        debug_assert!(spec.validate().is_ok());
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let inside = self.face_cx - self.face_rx > 0.02
            && self.face_cx + self.face_rx < 0.98
            && self.face_cy - self.face_ry > 0.02
            && self.face_cy + self.face_ry < 0.98
            && self.eye_r * TARGET_EYE_SCALE < self.face_rx
            && self.palette < PALETTES;
        if inside {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "toy face spec leaves the canvas: {self:?}"
            )))
        }
    }

    /// Eye centers (left, right) in canvas units; identical across styles.
    pub fn eye_centers(&self) -> ((f64, f64), (f64, f64)) {
        (
            (self.face_cx - self.eye_dx, self.eye_y),
            (self.face_cx + self.eye_dx, self.eye_y),
        )
    }
}

fn shade(spec: &ToyFaceSpec, style: ToyStyle, u: f64, v: f64) -> [f32; 3] {
    let (bg, face) = match style {
        ToyStyle::Source => SOURCE_PALETTES[spec.palette],
        ToyStyle::Target => TARGET_PALETTES[spec.palette],
    };
    let eye_r = match style {
        ToyStyle::Source => spec.eye_r,
        ToyStyle::Target => spec.eye_r * TARGET_EYE_SCALE,
    };
    let ((lx, ly), (rx, ry)) = spec.eye_centers();
    let in_eye = |cx: f64, cy: f64| (u - cx).powi(2) + (v - cy).powi(2) <= eye_r * eye_r;
    if in_eye(lx, ly) || in_eye(rx, ry) {
        return EYE_COLOR;
    }
    // mouth: thickened quadratic arc centered on the face axis
    let t = (u - spec.face_cx) / spec.mouth_w;
    if t.abs() <= 1.0 {
        let arc_y = spec.mouth_y + spec.mouth_curve * t * t;
        let thickness = match style {
            ToyStyle::Source => 0.012,
            ToyStyle::Target => 0.02,
        };
        if (v - arc_y).abs() <= thickness {
            return MOUTH_COLOR;
        }
    }
    let ex = (u - spec.face_cx) / spec.face_rx;
    let ey = (v - spec.face_cy) / spec.face_ry;
    let d = (ex * ex + ey * ey).sqrt();
    if style == ToyStyle::Target && (d - 1.0).abs() <= 0.05 {
        return OUTLINE_COLOR;
    }
    if d <= 1.0 {
        return match style {
            ToyStyle::Source => {
                let s = 1.0 - 0.30 * (d * d) as f32;
                [face[0] * s, face[1] * s, face[2] * s]
            }
            ToyStyle::Target => face,
        };
    }
    bg
}

/// Rasterize one face at the given resolution, values in [-1,1], channels
/// RGB. Deterministic; 2x2 supersampling per pixel.
pub fn render_toy(spec: &ToyFaceSpec, style: ToyStyle, resolution: usize) -> Result<Tensor<f32>> {
    spec.validate()?;
    let r = resolution;
    let mut out = Tensor::zeros(&[3, r, r]);
    let data = out.data_mut();
    let step = 1.0 / r as f64;
    for y in 0..r {
        for x in 0..r {
            let mut acc = [0.0f32; 3];
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f64 + dx) * step;
                let v = (y as f64 + dy) * step;
                let c = shade(spec, style, u, v);
                acc[0] += c[0];
                acc[1] += c[1];
                acc[2] += c[2];
            }
            for ch in 0..3 {
                data[ch * r * r + y * r + x] = (acc[ch] / 4.0) * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ToySource,
    ToyTarget,
    Folder,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "toy_source" | "toy-source" => Ok(DatasetKind::ToySource),
            "toy_target" | "toy-target" => Ok(DatasetKind::ToyTarget),
            "folder" => Ok(DatasetKind::Folder),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset kind '{other}' (expected toy_source|toy_target|folder)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub resolution: usize,
    /// Horizontal-flip augmentation during batch sampling.
    #[serde(default)]
    pub flip: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be >= 1".into()));
        }
        if self.kind == DatasetKind::Folder && self.path.is_none() {
            return Err(Error::Config("folder dataset needs a path".into()));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "dataset resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Fully materialized dataset: images in memory at the training resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    images: Vec<Tensor<f32>>,
    /// Ground-truth face specs for toy datasets (empty for folders).
    pub toy_specs: Vec<ToyFaceSpec>,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            DatasetKind::ToySource | DatasetKind::ToyTarget => {
                let style = if spec.kind == DatasetKind::ToySource {
                    ToyStyle::Source
                } else {
                    ToyStyle::Target
                };
                let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
                let toy_specs: Vec<ToyFaceSpec> =
                    (0..spec.count).map(|_| ToyFaceSpec::sample(&mut rng)).collect();
                let images = toy_specs
                    .iter()
                    .map(|s| render_toy(s, style, spec.resolution))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    spec: spec.clone(),
                    images,
                    toy_specs,
                })
            }
            DatasetKind::Folder => {
                let dir = spec.path.as_ref().expect("validated");
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .and_then(|e| e.to_str())
                            .map(|e| e.eq_ignore_ascii_case("png"))
                            .unwrap_or(false)
                    })
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::Config(format!("no PNG files under {}", dir.display())));
                }
                let allowed_skips = files.len() / 100;
                let mut skipped = 0usize;
                let mut images = Vec::new();
                for path in &files {
                    if images.len() >= spec.count {
                        break;
                    }
                    match load_png(path, spec.resolution) {
                        Ok(img) => images.push(img),
                        Err(e) => {
                            skipped += 1;
                            eprintln!("warning: skipping {}: {}", path.display(), e);
                            if skipped > allowed_skips {
                                return Err(Error::Config(format!(
                                    "{skipped} unreadable files exceed the 1% skip budget under {}",
                                    dir.display()
                                )));
                            }
                        }
                    }
                }
                if images.is_empty() {
                    return Err(Error::Config("no decodable images".into()));
                }
                Ok(Self {
                    spec: spec.clone(),
                    images,
                    toy_specs: Vec::new(),
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    /// Sample a batch `[B,3,R,R]` with replacement; optional horizontal flip.
    pub fn batch(&self, batch: usize, rng: &mut ChaCha12Rng) -> Tensor<f32> {
        let r = self.spec.resolution;
        let mut out = Tensor::zeros(&[batch, 3, r, r]);
        let plane = 3 * r * r;
        for b in 0..batch {
            let idx = (rng.next_u64() % self.len() as u64) as usize;
            let flip = self.spec.flip && rng.next_u64() % 2 == 1;
            let src = self.images[idx].data();
            let dst = &mut out.data_mut()[b * plane..(b + 1) * plane];
            if flip {
                for c in 0..3 {
                    for y in 0..r {
                        for x in 0..r {
                            dst[c * r * r + y * r + x] = src[c * r * r + y * r + (r - 1 - x)];
                        }
                    }
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
        out
    }

    /// Manifest JSON: toy datasets list their specs, folders their files.
    pub fn manifest_json(&self) -> serde_json::Value {
        match self.spec.kind {
            DatasetKind::Folder => serde_json::json!({
                "kind": self.spec.kind,
                "resolution": self.spec.resolution,
                "count": self.len(),
            }),
            _ => serde_json::json!({
                "kind": self.spec.kind,
                "resolution": self.spec.resolution,
                "count": self.len(),
                "specs": self.toy_specs,
            }),
        }
    }
}

/// Decode a PNG, center square crop, resize to `resolution`, normalize to
/// [-1,1]. Integer downscales use exact box averaging; everything else uses
/// bilinear sampling at half-pixel centers.
pub fn load_png(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut square = Tensor::zeros(&[3, side, side]);
    {
        let data = square.data_mut();
        for y in 0..side {
            for x in 0..side {
                let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
                for c in 0..3 {
                    data[c * side * side + y * side + x] = p[c] as f32 / 127.5 - 1.0;
                }
            }
        }
    }
    Ok(resize_image(&square, resolution))
}

/// Resize a `[3,S,S]` image to `[3,R,R]`.
pub fn resize_image(img: &Tensor<f32>, resolution: usize) -> Tensor<f32> {
    let side = img.shape()[1];
    if side == resolution {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[3, resolution, resolution]);
    if side % resolution == 0 {
        // exact box average
        let f = side / resolution;
        let norm = 1.0 / (f * f) as f32;
        for c in 0..3 {
            for y in 0..resolution {
                for x in 0..resolution {
                    let mut acc = 0.0f32;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += img.data()[c * side * side + (y * f + dy) * side + (x * f + dx)];
                        }
                    }
                    out.data_mut()[c * resolution * resolution + y * resolution + x] = acc * norm;
                }
            }
        }
    } else {
        let scale = side as f32 / resolution as f32;
        let sample = |c: usize, y: isize, x: isize| {
            let yy = y.clamp(0, side as isize - 1) as usize;
            let xx = x.clamp(0, side as isize - 1) as usize;
            img.data()[c * side * side + yy * side + xx]
        };
        for c in 0..3 {
            for y in 0..resolution {
                for x in 0..resolution {
                    let sy = (y as f32 + 0.5) * scale - 0.5;
                    let sx = (x as f32 + 0.5) * scale - 0.5;
                    let (fy, fx) = (sy.floor(), sx.floor());
                    let (dy, dx) = (sy - fy, sx - fx);
                    let (iy, ix) = (fy as isize, fx as isize);
                    let v = sample(c, iy, ix) * (1.0 - dy) * (1.0 - dx)
                        + sample(c, iy, ix + 1) * (1.0 - dy) * dx
                        + sample(c, iy + 1, ix) * dy * (1.0 - dx)
                        + sample(c, iy + 1, ix + 1) * dy * dx;
                    out.data_mut()[c * resolution * resolution + y * resolution + x] = v;
                }
            }
        }
    }
    out
}

/// Mean per-pixel squared distance of 8x8 box-downsampled Rec.601 luminance
/// between two image batches; lower means more structure-aligned.
pub fn structure_metric(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "structure_metric shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape().len() != 4 || a.shape()[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "structure_metric expects [B,3,H,W], got {:?}",
            a.shape()
        )));
    }
    let (batch, _, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "structure_metric needs extents divisible by 8, got {h}x{w}"
        )));
    }
    let la = luma_down8(a, batch, h, w);
    let lb = luma_down8(b, batch, h, w);
    let mut acc = 0.0f64;
    for (x, y) in la.iter().zip(&lb) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    Ok(acc / la.len() as f64)
}

fn luma_down8(t: &Tensor<f32>, batch: usize, h: usize, w: usize) -> Vec<f32> {
    let (fy, fx) = (h / 8, w / 8);
    let norm = 1.0 / (fy * fx) as f32;
    let hw = h * w;
    let mut out = vec![0.0f32; batch * 64];
    for b in 0..batch {
        let base = b * 3 * hw;
        for oy in 0..8 {
            for ox in 0..8 {
                let mut acc = 0.0f32;
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = (oy * fy + dy) * w + ox * fx + dx;
                        let r = t.data()[base + p];
                        let g = t.data()[base + hw + p];
                        let bl = t.data()[base + 2 * hw + p];
                        acc += 0.299 * r + 0.587 * g + 0.114 * bl;
                    }
                }
                out[b * 64 + oy * 8 + ox] = acc * norm;
            }
        }
    }
    out
}

/// Clamp a `[3,H,W]` tensor in [-1,1] to an 8-bit RGB image.
pub fn to_rgb8(t: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = (t.data()[c * h * w + y * w + x] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}
