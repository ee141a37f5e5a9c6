//! Gaussian target synthesis, the background plane, and keypoint decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spatial_softmax, ProbMap, Shape, Tensor};

pub const NUM_KEYPOINTS: usize = 21;
/// Keypoint planes plus background.
pub const NUM_PLANES: usize = NUM_KEYPOINTS + 1;
pub const BACKGROUND: usize = NUM_KEYPOINTS;

/// Wrist, then thumb, index, middle, ring and little finger, each base to tip.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "wrist", "thumb1", "thumb2", "thumb3", "thumb4", "index1", "index2", "index3", "index4",
    "middle1", "middle2", "middle3", "middle4", "ring1", "ring2", "ring3", "ring4", "little1",
    "little2", "little3", "little4",
];

/// Skeleton edges (parent, child) following [`KEYPOINT_NAMES`].
pub const SKELETON: [(usize, usize); 20] = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
];

/// A single f64 score plane, row-major. Pixel `(row, col)` sits at `x = col, y = row`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Raw,
    Probability,
}

/// 22 planes (21 keypoints, background last) on one grid, stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub height: usize,
    pub width: usize,
    pub space: Space,
    data: Vec<f32>,
}

impl Heatmaps {
    /// Wraps a `(1, h, w, 22)` network output as raw heatmaps.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.batch != 1 || s.channels != NUM_PLANES {
            return Err(Error::config(format!(
                "heatmaps need a 1xHxWx{NUM_PLANES} tensor, got {s}"
            )));
        }
        let mut data = Vec::with_capacity(s.len());
        for c in 0..NUM_PLANES {
            data.extend(t.plane(0, c));
        }
        Ok(Heatmaps {
            height: s.height,
            width: s.width,
            space: Space::Raw,
            data,
        })
    }

    pub fn from_planes(planes: &[Plane], space: Space) -> Result<Self> {
        if planes.len() != NUM_PLANES {
            return Err(Error::config(format!(
                "expected {NUM_PLANES} planes, got {}",
                planes.len()
            )));
        }
        let (h, w) = (planes[0].height, planes[0].width);
        if planes.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::config("heatmap planes have different grids"));
        }
        Ok(Heatmaps {
            height: h,
            width: w,
            space,
            data: planes.iter().flat_map(|p| p.data.iter().map(|&v| v as f32)).collect(),
        })
    }

    pub fn plane(&self, index: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[index * n..(index + 1) * n]
    }

    /// Channels-innermost `(1, h, w, 22)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, self.height, self.width, NUM_PLANES));
        for c in 0..NUM_PLANES {
            for (i, &v) in self.plane(c).iter().enumerate() {
                t.set(0, i / self.width, i % self.width, c, v);
            }
        }
        t
    }

    /// Softmaxes each keypoint plane; the background plane is copied unchanged.
    pub fn to_probability(&self) -> Result<Heatmaps> {
        if self.space == Space::Probability {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.data.len());
        for k in 0..NUM_KEYPOINTS {
            let p = spatial_softmax(self.plane(k), self.height, self.width)?;
            data.extend(p.data.iter().map(|&v| v as f32));
        }
        data.extend_from_slice(self.plane(BACKGROUND));
        Ok(Heatmaps {
            height: self.height,
            width: self.width,
            space: Space::Probability,
            data,
        })
    }
}

/// Gaussian target `exp(-((x - kx)^2 + (y - ky)^2) / (2 sigma^2))` at integer pixel centres.
/// The keypoint may lie outside the grid.
pub fn make_keypoint_heatmap(keypoint: (f64, f64), grid: (usize, usize), sigma: f64) -> Plane {
    let (h, w) = grid;
    let (kx, ky) = keypoint;
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let dy = y as f64 - ky;
        for x in 0..w {
            let dx = x as f64 - kx;
            data.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    Plane {
        height: h,
        width: w,
        data,
    }
}

/// `1 - max_k plane_k` per pixel.
pub fn make_background_heatmap(planes: &[Plane]) -> Result<Plane> {
    let first = planes
        .first()
        .ok_or_else(|| Error::config("background needs at least one keypoint plane"))?;
    let (h, w) = (first.height, first.width);
    if planes.iter().any(|p| p.height != h || p.width != w) {
        return Err(Error::config("keypoint planes have different grids"));
    }
    let data = (0..h * w)
        .map(|i| 1.0 - planes.iter().map(|p| p.data[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(Plane {
        height: h,
        width: w,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub prob: f64,
}

/// Local maxima over the 8-neighbourhood, highest first.
///
/// Equal values are ordered by row-major index: a cell is a peak when it beats every
/// neighbour, or ties with it and comes first. A flat plateau therefore yields only
/// its first cell, and a uniform plane yields `(0, 0)`.
pub fn find_peaks(prob: &ProbMap, max_peaks: usize) -> Vec<Peak> {
    let (h, w) = (prob.height, prob.width);
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = prob.at(r, c);
            let idx = r * w + c;
            let mut is_peak = true;
            'nb: for nr in r.saturating_sub(1)..(r + 2).min(h) {
                for nc in c.saturating_sub(1)..(c + 2).min(w) {
                    let nidx = nr * w + nc;
                    if nidx == idx {
                        continue;
                    }
                    let nv = prob.at(nr, nc);
                    if nv > v || (nv == v && nidx < idx) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push(Peak { row: r, col: c, prob: v });
            }
        }
    }
    // Stable sort keeps row-major order between equal probabilities.
    peaks.sort_by(|a, b| b.prob.total_cmp(&a.prob));
    peaks.truncate(max_peaks);
    peaks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Minimum max-probability for a plane to be decoded by plain argmax.
    pub confidence_threshold: f64,
    pub max_fallback_peaks: usize,
    /// Target Gaussian width in grid pixels.
    pub sigma: f64,
}

pub const DEFAULT_SIGMA: f64 = 1.75;
pub const DEFAULT_FALLBACK_PEAKS: usize = 5;

impl DecodeParams {
    /// Threshold of ten times the uniform probability for an `h x w` grid.
    pub fn for_grid(h: usize, w: usize) -> Self {
        DecodeParams {
            confidence_threshold: 10.0 / (h * w) as f64,
            max_fallback_peaks: DEFAULT_FALLBACK_PEAKS,
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // 0 is accepted too: it turns decoding into plain per-plane argmax.
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return Err(Error::config(format!(
                "confidence threshold {} outside [0, 1)",
                self.confidence_threshold
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma {} must be > 0", self.sigma)));
        }
        if self.max_fallback_peaks == 0 {
            return Err(Error::config("max_fallback_peaks must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Argmax,
    Fallback,
    /// Ground truth rather than a prediction.
    Annotation,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Argmax => "argmax",
            Source::Fallback => "fallback",
            Source::Annotation => "annotation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub source: Source,
    /// False for unannotated or occluded ground-truth points.
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Frame {
    /// Heatmap cells.
    Grid { height: usize, width: usize },
    /// Network input pixels.
    Input { size: usize },
    /// Source image pixels.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub frame: Frame,
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn get(&self, index: usize) -> Option<&Keypoint> {
        self.points.iter().find(|k| k.index == index)
    }

    /// Applies `f` to every position, keeping everything else.
    pub fn map_positions(&self, frame: Frame, f: impl Fn(f64, f64) -> (f64, f64)) -> KeypointSet {
        KeypointSet {
            frame,
            points: self
                .points
                .iter()
                .map(|k| {
                    let (x, y) = f(k.x, k.y);
                    Keypoint { x, y, ..*k }
                })
                .collect(),
        }
    }
}

/// Argmax decoding with nearest-peak fallback for low-confidence planes.
///
/// Planes whose softmax maximum reaches the threshold report their argmax. Each
/// remaining plane picks, among its top peaks, the one with the smallest mean
/// distance to the confident keypoints; with no confident keypoint at all it takes
/// its own global argmax. The background plane is not used.
pub fn decode_keypoints(raw: &Heatmaps, params: &DecodeParams) -> Result<KeypointSet> {
    params.validate()?;
    if raw.space != Space::Raw {
        return Err(Error::usage("decode_keypoints expects raw heatmaps"));
    }
    let (h, w) = (raw.height, raw.width);
    let probs = (0..NUM_KEYPOINTS)
        .map(|k| spatial_softmax(raw.plane(k), h, w))
        .collect::<Result<Vec<_>>>()?;

    let mut slots: Vec<Option<Keypoint>> = vec![None; NUM_KEYPOINTS];
    for (k, p) in probs.iter().enumerate() {
        let (row, col, prob) = p.argmax();
        if prob >= params.confidence_threshold {
            slots[k] = Some(Keypoint {
                index: k,
                x: col as f64,
                y: row as f64,
                confidence: prob,
                source: Source::Argmax,
                visible: true,
            });
        }
    }
    let anchors: Vec<(f64, f64)> = slots.iter().flatten().map(|k| (k.x, k.y)).collect();

    for (k, p) in probs.iter().enumerate() {
        if slots[k].is_some() {
            continue;
        }
        let (row, col, prob) = if anchors.is_empty() {
            p.argmax()
        } else {
            let mut best: Option<(f64, Peak)> = None;
            for peak in find_peaks(p, params.max_fallback_peaks) {
                let (x, y) = (peak.col as f64, peak.row as f64);
                let mean = anchors
                    .iter()
                    .map(|&(ax, ay)| ((x - ax).powi(2) + (y - ay).powi(2)).sqrt())
                    .sum::<f64>()
                    / anchors.len() as f64;
                if best.is_none_or(|(d, _)| mean < d) {
                    best = Some((mean, peak));
                }
            }
            let (_, peak) = best.expect("every plane has at least one peak");
            (peak.row, peak.col, peak.prob)
        };
        slots[k] = Some(Keypoint {
            index: k,
            x: col as f64,
            y: row as f64,
            confidence: prob,
            source: Source::Fallback,
            visible: true,
        });
    }
    Ok(KeypointSet {
        frame: Frame::Grid { height: h, width: w },
        points: slots.into_iter().flatten().collect(),
    })
}
