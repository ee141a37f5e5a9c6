//! Annotation loading, hand cropping, left-hand mirroring, augmentation and
//! training-target generation.
//!
//! Coordinates are pixel indices: pixel `(row, col)` is the point `x = col, y = row`.
//! Every geometric step is an [`Affine2`] applied identically to the image (by
//! inverse-mapped bilinear sampling) and to the keypoints, and the composed
//! source-to-crop map is kept on the [`Sample`] so predictions can be mapped back.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{
    make_background_heatmap, make_keypoint_heatmap, Heatmaps, Plane, Space, NUM_KEYPOINTS,
};
use crate::tensor::{Shape, Tensor};

/// Normalized value of a black pixel; used to fill regions outside the source image.
pub const FILL: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_ref: PathBuf,
    pub keypoints: Vec<LabeledPoint>,
    pub handedness: Handedness,
    pub head_size: Option<f64>,
    pub hand_box: Option<BoxXywh>,
    pub external_box: Option<BoxXywh>,
}

impl Annotation {
    pub fn needs_mirroring(&self) -> bool {
        self.handedness == Handedness::Left
    }

    fn visible(&self) -> impl Iterator<Item = &LabeledPoint> {
        self.keypoints.iter().filter(|k| k.visible)
    }

    /// Centre of the hand box, or the centroid of the visible keypoints.
    pub fn hand_center(&self) -> Option<(f64, f64)> {
        if let Some(b) = self.hand_box {
            return Some(b.center());
        }
        let n = self.visible().count();
        (n > 0).then(|| {
            let (sx, sy) = self.visible().fold((0.0, 0.0), |(sx, sy), k| (sx + k.x, sy + k.y));
            (sx / n as f64, sy / n as f64)
        })
    }

    /// Side of the tightest square around the hand: hand box if given, else visible keypoints.
    pub fn tight_square_side(&self) -> Option<f64> {
        if let Some(b) = self.hand_box {
            return Some(b.w.max(b.h));
        }
        let mut it = self.visible();
        let first = it.next()?;
        let (mut x0, mut x1, mut y0, mut y1) = (first.x, first.x, first.y, first.y);
        for k in it {
            x0 = x0.min(k.x);
            x1 = x1.max(k.x);
            y0 = y0.min(k.y);
            y1 = y1.max(k.y);
        }
        Some((x1 - x0).max(y1 - y0))
    }

    pub fn to_json_line(&self) -> String {
        let raw = RawAnnotation {
            image: self.image_ref.to_string_lossy().into_owned(),
            hand: match self.handedness {
                Handedness::Left => "left".into(),
                Handedness::Right => "right".into(),
            },
            kp: self
                .keypoints
                .iter()
                .map(|k| vec![k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
                .collect(),
            head: self.head_size,
            r#box: self.hand_box.map(|b| [b.x, b.y, b.w, b.h]),
            ext_box: self.external_box.map(|b| [b.x, b.y, b.w, b.h]),
        };
        serde_json::to_string(&raw).expect("annotation serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    image: String,
    hand: String,
    kp: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r#box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ext_box: Option<[f64; 4]>,
}

/// Parses one JSON annotation object. `record` names it in error messages.
pub fn parse_annotation(line: &str, record: &str) -> Result<Annotation> {
    let err = |message: String| Error::Parse {
        record: record.to_string(),
        message,
    };
    let raw: RawAnnotation = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let record = format!("{record} ({})", raw.image);
    let err = |message: String| Error::Parse {
        record: record.clone(),
        message,
    };
    if raw.kp.len() != NUM_KEYPOINTS {
        return Err(err(format!("expected {NUM_KEYPOINTS} keypoints, got {}", raw.kp.len())));
    }
    let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
    for (i, kp) in raw.kp.iter().enumerate() {
        let [x, y, v] = kp.as_slice() else {
            return Err(err(format!("keypoint {i} must be [x, y, v]")));
        };
        if !x.is_finite() || !y.is_finite() {
            return Err(err(format!("keypoint {i} has non-finite coordinates")));
        }
        keypoints.push(LabeledPoint {
            x: *x,
            y: *y,
            visible: *v > 0.0,
        });
    }
    let handedness = match raw.hand.as_str() {
        "left" => Handedness::Left,
        "right" => Handedness::Right,
        other => return Err(err(format!("hand must be \"left\" or \"right\", got {other:?}"))),
    };
    let to_box = |b: Option<[f64; 4]>, what: &str| -> Result<Option<BoxXywh>> {
        match b {
            None => Ok(None),
            Some([x, y, w, h]) if [x, y, w, h].iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0 => {
                Ok(Some(BoxXywh { x, y, w, h }))
            }
            Some(b) => Err(err(format!("{what} {b:?} must be finite with positive size"))),
        }
    };
    if let Some(h) = raw.head {
        if !(h.is_finite() && h > 0.0) {
            return Err(err(format!("head size {h} must be positive")));
        }
    }
    Ok(Annotation {
        image_ref: PathBuf::from(&raw.image),
        keypoints,
        handedness,
        head_size: raw.head,
        hand_box: to_box(raw.r#box, "box")?,
        external_box: to_box(raw.ext_box, "ext_box")?,
    })
}

/// Reads line-delimited JSON annotations; blank lines are skipped.
pub fn read_annotations(reader: impl BufRead) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_annotation(&line, &format!("line {}", i + 1))?);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let f = std::fs::File::open(path)?;
    read_annotations(std::io::BufReader::new(f))
}

/// `x' = a x + b y + tx`, `y' = c x + d y + ty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine2 { tx, ty, ..Self::IDENTITY }
    }

    pub fn scale(s: f64) -> Self {
        Affine2 { a: s, d: s, ..Self::IDENTITY }
    }

    /// Counter-clockwise in image coordinates is clockwise on screen (y points down).
    pub fn rotate(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Affine2 {
            a: c,
            b: -s,
            c: s,
            d: c,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// `x' = (width - 1) - x`.
    pub fn flip_x(width: usize) -> Self {
        Affine2 {
            a: -1.0,
            tx: width as f64 - 1.0,
            ..Self::IDENTITY
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Affine2) -> Affine2 {
        Affine2 {
            a: next.a * self.a + next.b * self.c,
            b: next.a * self.b + next.b * self.d,
            c: next.c * self.a + next.d * self.c,
            d: next.c * self.b + next.d * self.d,
            tx: next.a * self.tx + next.b * self.ty + next.tx,
            ty: next.c * self.tx + next.d * self.ty + next.ty,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Some(Affine2 {
            a,
            b,
            c,
            d,
            tx: -(a * self.tx + b * self.ty),
            ty: -(c * self.tx + d * self.ty),
        })
    }
}

/// Converts 8-bit RGB to a `(1, h, w, 3)` tensor with `v / 127.5 - 1`.
pub fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 127.5 - 1.0).collect();
    Tensor::new(Shape::new(1, h as usize, w as usize, 3), data).expect("rgb buffer matches dims")
}

/// Inverse of [`image_to_tensor`] (rounded, clamped); batch item 0.
pub fn tensor_to_image(t: &Tensor) -> image::RgbImage {
    let s = t.shape();
    let n = s.height * s.width * 3;
    let buf = t.data()[..n]
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::RgbImage::from_raw(s.width as u32, s.height as u32, buf).expect("buffer matches dims")
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(image_to_tensor(&img))
}

/// Resamples `src` (batch item 0) onto an `out_h x out_w` grid. `src_to_dst` maps
/// source pixel coordinates to output ones; each output pixel is bilinearly sampled
/// at the inverse image of its coordinates, with `fill` outside the source.
pub fn warp(src: &Tensor, src_to_dst: &Affine2, out_h: usize, out_w: usize, fill: f32) -> Result<Tensor> {
    let inv = src_to_dst
        .inverse()
        .ok_or_else(|| Error::config("warp transform is not invertible"))?;
    let s = src.shape();
    let ch = s.channels;
    let mut out = Tensor::filled(Shape::new(1, out_h, out_w, ch), fill);
    let sample = |x: isize, y: isize, c: usize| -> f32 {
        if x < 0 || y < 0 || x as usize >= s.width || y as usize >= s.height {
            fill
        } else {
            src.get(0, y as usize, x as usize, c)
        }
    };
    for v in 0..out_h {
        for u in 0..out_w {
            let (x, y) = inv.apply(u as f64, v as f64);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            if x0 < -1 || y0 < -1 || x0 >= s.width as isize || y0 >= s.height as isize {
                continue;
            }
            for c in 0..ch {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                let bot = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                out.set(0, v, u, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "factor")]
pub enum CropKind {
    /// Side = factor x head size, centred on the hand.
    HeadScaled(f64),
    /// Side = factor x tight hand square.
    HandScaled(f64),
    /// Detector box squared to its longer side, then enlarged.
    ExternalEnlarged(f64),
    /// A `target_size` window centred on the hand, no resizing.
    FixedWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropStrategy {
    pub kind: CropKind,
    pub target_size: usize,
}

impl CropStrategy {
    pub const fn head() -> Self {
        CropStrategy {
            kind: CropKind::HeadScaled(1.2),
            target_size: 224,
        }
    }

    pub const fn hand() -> Self {
        CropStrategy {
            kind: CropKind::HandScaled(2.0),
            target_size: 224,
        }
    }

    pub const fn external() -> Self {
        CropStrategy {
            kind: CropKind::ExternalEnlarged(1.25),
            target_size: 224,
        }
    }

    pub const fn fixed() -> Self {
        CropStrategy {
            kind: CropKind::FixedWindow,
            target_size: 224,
        }
    }

    pub fn with_target_size(self, target_size: usize) -> Self {
        CropStrategy { target_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let f = match self.kind {
            CropKind::HeadScaled(f) | CropKind::HandScaled(f) | CropKind::ExternalEnlarged(f) => f,
            CropKind::FixedWindow => 1.0,
        };
        if !(f > 0.0 && f.is_finite()) || self.target_size == 0 {
            return Err(Error::config(format!("invalid crop strategy {self:?}")));
        }
        Ok(())
    }
}

/// Square crop region in source pixels: `[x0, x0 + side] x [y0, y0 + side]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

pub fn crop_box(ann: &Annotation, strategy: &CropStrategy) -> Result<CropBox> {
    strategy.validate()?;
    let missing = |what: &str| Error::config(format!("{}: crop {:?} needs {what}", ann.image_ref.display(), strategy.kind));
    let center = || ann.hand_center().ok_or_else(|| missing("a hand box or visible keypoints"));
    let ((cx, cy), side) = match strategy.kind {
        CropKind::HeadScaled(f) => (center()?, f * ann.head_size.ok_or_else(|| missing("head size"))?),
        CropKind::HandScaled(f) => {
            let g = ann
                .tight_square_side()
                .ok_or_else(|| missing("a hand box or visible keypoints"))?;
            (center()?, f * g)
        }
        CropKind::ExternalEnlarged(f) => {
            let b = ann.external_box.ok_or_else(|| missing("an external box"))?;
            (b.center(), f * b.w.max(b.h))
        }
        CropKind::FixedWindow => (center()?, strategy.target_size as f64),
    };
    if !(side > 0.0) {
        return Err(Error::config(format!("{}: degenerate crop side {side}", ann.image_ref.display())));
    }
    Ok(CropBox {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        side,
    })
}

/// A cropped, normalized network input with its keypoints in input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub keypoints: Vec<LabeledPoint>,
    /// Source-image pixels to input pixels.
    pub transform: Affine2,
    pub handedness: Handedness,
    pub mirrored: bool,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape().width
    }

    /// Maps input-pixel coordinates back to source-image pixels.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        self.transform
            .inverse()
            .expect("sample transforms are invertible")
            .apply(x, y)
    }

    fn remap(&self, t: &Affine2, image: Tensor) -> Sample {
        Sample {
            image,
            keypoints: self
                .keypoints
                .iter()
                .map(|k| {
                    let (x, y) = t.apply(k.x, k.y);
                    LabeledPoint { x, y, ..*k }
                })
                .collect(),
            transform: self.transform.then(t),
            handedness: self.handedness,
            mirrored: self.mirrored,
        }
    }
}

/// Crops `image` (a normalized source tensor) around the hand and resizes to the
/// strategy's target size.
pub fn crop_hand(image: &Tensor, ann: &Annotation, strategy: &CropStrategy) -> Result<Sample> {
    let cb = crop_box(ann, strategy)?;
    let t = strategy.target_size;
    let s = t as f64 / cb.side;
    let transform = Affine2::translate(-cb.x0, -cb.y0).then(&Affine2::scale(s));
    let img = warp(image, &transform, t, t, FILL)?;
    let identity = Sample {
        image: img.clone(),
        keypoints: ann.keypoints.clone(),
        transform: Affine2::IDENTITY,
        handedness: ann.handedness,
        mirrored: false,
    };
    Ok(identity.remap(&transform, img))
}

/// Horizontal flip of image and keypoints; applying it twice restores the sample.
pub fn mirror_left(sample: &Sample) -> Sample {
    let s = sample.image.shape();
    let mut img = sample.image.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                img.set(0, y, x, c, sample.image.get(0, y, s.width - 1 - x, c));
            }
        }
    }
    let mut out = sample.remap(&Affine2::flip_x(s.width), img);
    out.mirrored = !sample.mirrored;
    out
}

/// Rotation about the crop centre, then translation, after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const ANGLE_RANGE: (f64, f64) = (-30.0, 30.0);
    pub const SHIFT_RANGE: (f64, f64) = (-30.0, 30.0);
    pub const SCALE_RANGE: (f64, f64) = (0.8, 1.5);

    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        let (a0, a1) = Self::ANGLE_RANGE;
        let (t0, t1) = Self::SHIFT_RANGE;
        let (s0, s1) = Self::SCALE_RANGE;
        AugmentParams {
            angle_deg: rng.gen_range(a0..=a1),
            tx: rng.gen_range(t0..=t1),
            ty: rng.gen_range(t0..=t1),
            scale: rng.gen_range(s0..=s1),
        }
    }

    /// The map on input pixels of a `size x size` crop.
    pub fn transform(&self, size: usize) -> Affine2 {
        let c = (size as f64 - 1.0) / 2.0;
        Affine2::translate(-c, -c)
            .then(&Affine2::scale(self.scale))
            .then(&Affine2::rotate(self.angle_deg.to_radians()))
            .then(&Affine2::translate(c + self.tx, c + self.ty))
    }
}

/// Per-sample RNG: stream `index` of the generator seeded by `seed`, so results do
/// not depend on processing order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn augment_with(sample: &Sample, params: &AugmentParams) -> Result<Sample> {
    let n = sample.size();
    let t = params.transform(n);
    let img = warp(&sample.image, &t, n, n, FILL)?;
    Ok(sample.remap(&t, img))
}

/// Random augmentation drawn from `rng`.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Result<(Sample, AugmentParams)> {
    let params = AugmentParams::draw(rng);
    Ok((augment_with(sample, &params)?, params))
}

/// [`augment`] with the RNG of sample 0 under `seed`.
pub fn augment_seeded(sample: &Sample, seed: u64) -> Result<(Sample, AugmentParams)> {
    augment(sample, &mut sample_rng(seed, 0))
}

/// Network input plus raw-space targets: one Gaussian per visible keypoint (zero
/// plane otherwise) on the output grid, and the background plane last.
pub fn make_training_pair(sample: &Sample, sigma: f64, output_grid: (usize, usize)) -> Result<(Tensor, Heatmaps)> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma {sigma} must be > 0")));
    }
    let (gh, gw) = output_grid;
    let sh = gh as f64 / sample.image.shape().height as f64;
    let sw = gw as f64 / sample.image.shape().width as f64;
    let mut planes: Vec<Plane> = sample
        .keypoints
        .iter()
        .map(|k| {
            if k.visible {
                make_keypoint_heatmap((k.x * sw, k.y * sh), output_grid, sigma)
            } else {
                Plane::zeros(gh, gw)
            }
        })
        .collect();
    planes.push(make_background_heatmap(&planes)?);
    Ok((sample.image.clone(), Heatmaps::from_planes(&planes, Space::Raw)?))
}
