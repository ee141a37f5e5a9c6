//! End-point error, PCK / PCKh curves, AUC and root alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Frame, KeypointSet};

/// Index of the wrist, the root used for alignment.
pub const ROOT_INDEX: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub index: usize,
    /// Euclidean error in pixels.
    pub error: f64,
    /// 1 for plain PCK, head size for PCKh.
    pub normalizer: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    /// Per ground-truth keypoint; `None` when it is not annotated.
    pub errors: Vec<Option<f64>>,
    pub mean: f64,
    pub median: f64,
}

impl EpeReport {
    pub fn samples(&self, normalizer: f64) -> Vec<ErrorSample> {
        self.errors
            .iter()
            .enumerate()
            .map(|(index, e)| ErrorSample {
                index,
                error: e.unwrap_or(0.0),
                normalizer,
                valid: e.is_some(),
            })
            .collect()
    }
}

/// Average of the two middle values for even counts; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Distances between matching indices. Ground-truth points that are not visible,
/// or that have no prediction, are excluded from mean and median.
pub fn epe(pred: &KeypointSet, gt: &KeypointSet) -> Result<EpeReport> {
    let mut errors = Vec::with_capacity(gt.points.len());
    for g in &gt.points {
        if !g.visible {
            errors.push(None);
            continue;
        }
        let p = pred
            .get(g.index)
            .ok_or_else(|| Error::usage(format!("prediction lacks keypoint {}", g.index)))?;
        let (dx, dy) = (p.x - g.x, p.y - g.y);
        errors.push(Some((dx * dx + dy * dy).sqrt()));
    }
    let valid: Vec<f64> = errors.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(EpeReport {
        mean,
        median: median(&valid),
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

/// Fraction of valid samples with `error / normalizer <= t`, for each threshold.
/// With no valid samples every value is 0.
pub fn pck_curve(samples: &[ErrorSample], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::usage("PCK thresholds must be strictly increasing"));
    }
    if let Some(s) = samples.iter().find(|s| s.valid && !(s.normalizer > 0.0)) {
        return Err(Error::usage(format!(
            "keypoint {} has non-positive normalizer {}",
            s.index, s.normalizer
        )));
    }
    let mut errs: Vec<f64> = samples
        .iter()
        .filter(|s| s.valid)
        .map(|s| s.error / s.normalizer)
        .collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let values = thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                0.0
            } else {
                errs.partition_point(|&e| e <= t) as f64 / n as f64
            }
        })
        .collect();
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

/// Trapezoidal area under the curve divided by the threshold span.
pub fn auc(curve: &PckCurve) -> Result<f64> {
    let t = &curve.thresholds;
    if t.len() < 2 || t.len() != curve.values.len() {
        return Err(Error::usage("AUC needs at least two thresholds with matching values"));
    }
    let area: f64 = t
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(tw, vw)| (tw[1] - tw[0]) * (vw[0] + vw[1]) / 2.0)
        .sum();
    Ok(area / (t[t.len() - 1] - t[0]))
}

/// `lo, lo + step, ..., hi` computed by index to avoid accumulated drift.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && hi >= lo, "invalid threshold grid");
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Threshold presets used by the common evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// 0-30 px.
    Px30,
    /// 0-15 px.
    Px15,
    /// 0-1 head sizes (PCKh).
    HeadNormalized,
}

impl Protocol {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Protocol::Px30 => threshold_grid(0.0, 30.0, 0.5),
            Protocol::Px15 => threshold_grid(0.0, 15.0, 0.5),
            Protocol::HeadNormalized => threshold_grid(0.0, 1.0, 0.01),
        }
    }
}

/// Translates `pred` so that its root coincides with the ground-truth root.
pub fn align_root(pred: &KeypointSet, gt: &KeypointSet, root_index: usize) -> Result<KeypointSet> {
    let p = pred
        .get(root_index)
        .ok_or_else(|| Error::usage(format!("prediction lacks root keypoint {root_index}")))?;
    let g = gt
        .get(root_index)
        .ok_or_else(|| Error::usage(format!("ground truth lacks root keypoint {root_index}")))?;
    let (dx, dy) = (g.x - p.x, g.y - p.y);
    Ok(pred.map_positions(pred.frame, |x, y| (x + dx, y + dy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: f64,
    pub mean_epe: f64,
    pub median_epe: f64,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }

    /// `| label | AUC | mean EPE | median EPE |`, three and two decimals.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "| {label} | {:.3} | {:.2} | {:.2} |",
            self.auc, self.mean_epe, self.median_epe
        )
    }

    pub fn table_header() -> &'static str {
        "| Architecture / training set | AUC ↑ | Mean EPE (px) ↓ | Median EPE (px) ↓ |\n|---|---|---|---|"
    }
}

impl PckCurve {
    /// One `threshold,value` line per point, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Pools errors over many images into one summary and curve.
#[derive(Debug, Default, Clone)]
pub struct Accumulator {
    samples: Vec<ErrorSample>,
}

impl Accumulator {
    pub fn push(&mut self, report: &EpeReport, normalizer: f64) {
        self.samples.extend(report.samples(normalizer));
    }

    pub fn samples(&self) -> &[ErrorSample] {
        &self.samples
    }

    pub fn finish(&self, thresholds: &[f64]) -> Result<(Summary, PckCurve)> {
        let curve = pck_curve(&self.samples, thresholds)?;
        // EPE stays in pixels regardless of the PCK normalizer.
        let errs: Vec<f64> = self.samples.iter().filter(|s| s.valid).map(|s| s.error).collect();
        let mean_epe = if errs.is_empty() {
            f64::NAN
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        Ok((
            Summary {
                auc: auc(&curve)?,
                mean_epe,
                median_epe: median(&errs),
            },
            curve,
        ))
    }
}

/// Builds an annotated keypoint set from `(x, y, visible)` triples.
pub fn keypoints_from_coords(coords: &[(f64, f64, bool)], frame: Frame) -> KeypointSet {
    use crate::heatmap::{Keypoint, Source};
    KeypointSet {
        frame,
        points: coords
            .iter()
            .enumerate()
            .map(|(index, &(x, y, visible))| Keypoint {
                index,
                x,
                y,
                confidence: if visible { 1.0 } else { 0.0 },
                source: Source::Annotation,
                visible,
            })
            .collect(),
    }
}
