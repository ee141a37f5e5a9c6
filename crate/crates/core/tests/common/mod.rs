//! Brute-force reference implementations shared by the integration tests. They
//! follow the textbook definitions directly and accumulate in f64.
#![allow(dead_code)]

use hkp_core::heatmap::Peak;
use hkp_core::metrics::ErrorSample;
use hkp_core::tensor::{Padding, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    Tensor::new(shape, rand_vec(rng, shape.len())).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs()).fold(0.0, f64::max)
}

pub fn inner(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Output size and leading pad for one spatial axis.
fn axis(n: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            (out, total / 2)
        }
        Padding::Valid => ((n - k) / s + 1, 0),
    }
}

/// Direct convolution, kernel `[kh][kw][cin][cout]`.
pub fn naive_conv(
    x: &Tensor,
    kernel: &[f32],
    bias: &[f32],
    (kh, kw, cout): (usize, usize, usize),
    stride: usize,
    padding: Padding,
) -> Tensor {
    let s = x.shape();
    let (oh, pt) = axis(s.height, kh, stride, padding);
    let (ow, pl) = axis(s.width, kw, stride, padding);
    let mut out = Tensor::zeros(Shape::new(s.batch, oh, ow, cout));
    for n in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = f64::from(bias[co]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                continue;
                            }
                            for ci in 0..s.channels {
                                let w = kernel[((ky * kw + kx) * s.channels + ci) * cout + co];
                                acc += f64::from(x.get(n, iy as usize, ix as usize, ci)) * f64::from(w);
                            }
                        }
                    }
                    out.set(n, oy, ox, co, acc as f32);
                }
            }
        }
    }
    out
}

/// Direct depthwise convolution, kernel `[kh][kw][c]`.
pub fn naive_depthwise(
    x: &Tensor,
    kernel: &[f32],
    bias: &[f32],
    (kh, kw): (usize, usize),
    stride: usize,
    padding: Padding,
) -> Tensor {
    let s = x.shape();
    let (oh, pt) = axis(s.height, kh, stride, padding);
    let (ow, pl) = axis(s.width, kw, stride, padding);
    let mut out = Tensor::zeros(Shape::new(s.batch, oh, ow, s.channels));
    for n in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..s.channels {
                    let mut acc = f64::from(bias[c]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                continue;
                            }
                            acc += f64::from(x.get(n, iy as usize, ix as usize, c))
                                * f64::from(kernel[(ky * kw + kx) * s.channels + c]);
                        }
                    }
                    out.set(n, oy, ox, c, acc as f32);
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: every input pixel adds its kernel
/// footprint into the output. Kernel `[kh][kw][cout][cin]`.
pub fn naive_transposed(
    y: &Tensor,
    kernel: &[f32],
    bias: &[f32],
    (kh, kw, cout): (usize, usize, usize),
    stride: usize,
    out_hw: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let s = y.shape();
    let (oh, ow) = out_hw;
    let mut acc = vec![0.0f64; s.batch * oh * ow * cout];
    for n in 0..s.batch {
        for iy in 0..s.height {
            for ix in 0..s.width {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy = (iy * stride + ky) as isize - pad.0 as isize;
                        let ox = (ix * stride + kx) as isize - pad.1 as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for co in 0..cout {
                            for ci in 0..s.channels {
                                let w = kernel[((ky * kw + kx) * cout + co) * s.channels + ci];
                                let o = ((n * oh + oy as usize) * ow + ox as usize) * cout + co;
                                acc[o] += f64::from(y.get(n, iy, ix, ci)) * f64::from(w);
                            }
                        }
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| (v + f64::from(bias[i % cout])) as f32)
        .collect();
    Tensor::new(Shape::new(s.batch, oh, ow, cout), data).unwrap()
}

/// Per-channel affine batch norm in f64.
pub fn naive_batch_norm(x: &Tensor, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Tensor {
    let c = x.shape().channels;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = i % c;
            let sd = (f64::from(var[k]) + f64::from(eps)).sqrt();
            (f64::from(gamma[k]) * (f64::from(v) - f64::from(mean[k])) / sd + f64::from(beta[k])) as f32
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

/// Row-major position of the first maximum of `scores`.
pub fn naive_argmax(scores: &[f32], width: usize) -> (usize, usize) {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (best / width, best % width)
}

/// Local maxima by exhaustive comparison: a cell is a peak when its
/// `(value, -index)` key is the largest in its 3x3 window.
pub fn naive_peaks(p: &[f64], h: usize, w: usize, max_peaks: usize) -> Vec<Peak> {
    let key = |i: usize| (p[i], std::cmp::Reverse(i));
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = (r as usize) * w + c as usize;
            let mut best = true;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = (nr as usize) * w + nc as usize;
                    if key(j).partial_cmp(&key(i)) == Some(std::cmp::Ordering::Greater) {
                        best = false;
                    }
                }
            }
            if best {
                out.push((i, p[i]));
            }
        }
    }
    // Highest first, lower index first among equals.
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out.into_iter()
        .take(max_peaks)
        .map(|(i, prob)| Peak { row: i / w, col: i % w, prob })
        .collect()
}

/// `(mean, median)` of the listed values by explicit loops; NaN when empty.
pub fn naive_mean_median(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mut sorted = values.to_vec();
    // Insertion sort, independent of the library's sort.
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 && sorted[j - 1] > sorted[j] {
            sorted.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    (sum / n as f64, median)
}

pub fn naive_pck(samples: &[ErrorSample], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            let mut valid = 0usize;
            let mut hits = 0usize;
            for s in samples {
                if s.valid {
                    valid += 1;
                    if s.error / s.normalizer <= t {
                        hits += 1;
                    }
                }
            }
            if valid == 0 {
                0.0
            } else {
                hits as f64 / valid as f64
            }
        })
        .collect()
}

/// Trapezoid rule written as a weighted sum of the curve values.
pub fn naive_auc(t: &[f64], v: &[f64]) -> f64 {
    let n = t.len();
    let mut area = 0.0;
    for i in 0..n {
        let left = if i > 0 { t[i] - t[i - 1] } else { 0.0 };
        let right = if i + 1 < n { t[i + 1] - t[i] } else { 0.0 };
        area += v[i] * (left + right) / 2.0;
    }
    area / (t[n - 1] - t[0])
}

/// Midpoint Riemann sum of the piecewise-linear interpolation of `(t, v)`.
pub fn riemann_auc(t: &[f64], v: &[f64], cells: usize) -> f64 {
    let (lo, hi) = (t[0], t[t.len() - 1]);
    let dx = (hi - lo) / cells as f64;
    let mut sum = 0.0;
    let mut seg = 0;
    for i in 0..cells {
        let x = lo + (i as f64 + 0.5) * dx;
        while seg + 2 < t.len() && x > t[seg + 1] {
            seg += 1;
        }
        let f = (x - t[seg]) / (t[seg + 1] - t[seg]);
        sum += v[seg] + f * (v[seg + 1] - v[seg]);
    }
    sum * dx / (hi - lo)
}

/// Twenty sharp planes around (6, 6); plane 9 is almost flat with two equal bumps,
/// one at (7, 8) and one at (22, 20). Returns the stack and the anchor of every
/// plane except 9, in plane order.
pub fn fallback_fixture() -> (hkp_core::Heatmaps, Vec<(usize, usize)>) {
    use hkp_core::{NUM_KEYPOINTS, NUM_PLANES};
    let anchors: Vec<(usize, usize)> = (0..NUM_KEYPOINTS)
        .filter(|&k| k != 9)
        .map(|k| (4 + k % 5, 4 + k / 5))
        .collect();
    let mut t = Tensor::zeros(Shape::new(1, 28, 28, NUM_PLANES));
    t.set(0, 8, 7, 9, 0.5);
    t.set(0, 20, 22, 9, 0.5);
    for (i, &(x, y)) in anchors.iter().enumerate() {
        let c = if i < 9 { i } else { i + 1 };
        t.set(0, y, x, c, 20.0);
    }
    (hkp_core::Heatmaps::from_tensor(&t).unwrap(), anchors)
}

/// Mean Euclidean distance from `(px, py)` to `anchors`.
pub fn mean_anchor_distance(anchors: &[(usize, usize)], (px, py): (f64, f64)) -> f64 {
    anchors
        .iter()
        .map(|&(x, y)| ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt())
        .sum::<f64>()
        / anchors.len() as f64
}
