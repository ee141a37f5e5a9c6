//! Dense NHWC tensors and the layer kernels the network is built from.
//!
//! Every kernel accumulates each output element in f64 in a fixed order and rounds
//! to f32 once, so
//! [`Exec::Parallel`] and [`Exec::Serial`] produce bitwise-identical results; the
//! serial path exists for strict, single-threaded execution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a kernel may schedule its work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Single-threaded; no rayon involvement at all.
    Serial,
    /// Output rows are distributed over the current rayon pool.
    #[default]
    Parallel,
}

/// (batch, height, width, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape {
            batch,
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.height, self.width, self.channels
        )
    }
}

/// Rank-4 f32 tensor, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.batch == 0 || shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(Error::config(format!("tensor dimensions must be >= 1, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1");
        Tensor {
            data: vec![value; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let s = &self.shape;
        ((n * s.height + y) * s.width + x) * s.channels + c
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(n, y, x, c);
        self.data[i] = value;
    }

    /// Copies one channel of one batch item out as a row-major `height * width` plane.
    pub fn plane(&self, n: usize, c: usize) -> Vec<f32> {
        let s = self.shape;
        let mut out = Vec::with_capacity(s.height * s.width);
        for y in 0..s.height {
            for x in 0..s.width {
                out.push(self.get(n, y, x, c));
            }
        }
        out
    }

    /// Elementwise sum; used for residual connections.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "cannot add tensors of shape {} and {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; zero fill, the extra row/column goes bottom/right.
    Same,
    /// No padding; output is `floor((in - k) / stride) + 1`.
    Valid,
}

/// Kernel dimensions. For [`conv2d`] the buffer is laid out `[kh][kw][c_in][c_out]`;
/// for [`transposed_conv2d`] it is `[kh][kw][c_out][c_in]` (in/out of the transposed
/// op), which makes a transposed conv share its buffer with the conv it is the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl KernelShape {
    pub const fn new(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        KernelShape { kh, kw, c_in, c_out }
    }

    pub fn len(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub shape: KernelShape,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(
        shape: KernelShape,
        kernel: Vec<f32>,
        bias: Vec<f32>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let p = ConvParams {
            shape,
            kernel,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(shape: KernelShape, stride: usize, padding: Padding) -> Self {
        ConvParams {
            kernel: vec![0.0; shape.len()],
            bias: vec![0.0; shape.c_out],
            shape,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.kh == 0 || s.kw == 0 || s.c_in == 0 || s.c_out == 0 {
            return Err(Error::config(format!("kernel dimensions must be >= 1, got {s:?}")));
        }
        if self.kernel.len() != s.len() {
            return Err(Error::config(format!(
                "kernel buffer has {} values, shape {s:?} needs {}",
                self.kernel.len(),
                s.len()
            )));
        }
        if self.bias.len() != s.c_out {
            return Err(Error::config(format!(
                "bias length {} != c_out {}",
                self.bias.len(),
                s.c_out
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        Ok(())
    }
}

/// Depthwise kernel, buffer laid out `[kh][kw][channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseParams {
    pub kh: usize,
    pub kw: usize,
    pub channels: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: Padding,
}

impl DepthwiseParams {
    pub fn new(
        (kh, kw, channels): (usize, usize, usize),
        kernel: Vec<f32>,
        bias: Vec<f32>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let p = DepthwiseParams {
            kh,
            kw,
            channels,
            kernel,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros((kh, kw, channels): (usize, usize, usize), stride: usize, padding: Padding) -> Self {
        DepthwiseParams {
            kh,
            kw,
            channels,
            kernel: vec![0.0; kh * kw * channels],
            bias: vec![0.0; channels],
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.channels == 0 {
            return Err(Error::config("depthwise kernel dimensions must be >= 1"));
        }
        if self.kernel.len() != self.kh * self.kw * self.channels {
            return Err(Error::config(format!(
                "depthwise kernel buffer has {} values, expected {}",
                self.kernel.len(),
                self.kh * self.kw * self.channels
            )));
        }
        if self.bias.len() != self.channels {
            return Err(Error::config(format!(
                "depthwise bias length {} != channels {}",
                self.bias.len(),
                self.channels
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        Ok(())
    }
}

/// Inference-mode batch normalization statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        variance: Vec<f32>,
        epsilon: f32,
    ) -> Result<Self> {
        let bn = BatchNormParams {
            gamma,
            beta,
            mean,
            variance,
            epsilon,
        };
        bn.validate()?;
        Ok(bn)
    }

    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.variance.len() != c {
            return Err(Error::config(format!(
                "batch-norm vectors differ in length: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.mean.len(),
                self.variance.len()
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config(format!("batch-norm epsilon {} < 0", self.epsilon)));
        }
        if let Some(v) = self
            .variance
            .iter()
            .find(|&&v| !(v >= 0.0) || f64::from(v) + f64::from(self.epsilon) <= 0.0)
        {
            return Err(Error::config(format!(
                "batch-norm variance {v} with epsilon {} is not positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Per-channel `gamma / sqrt(var + eps)`, in f64.
    fn scales(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.variance)
            .map(|(&g, &v)| f64::from(g) / (f64::from(v) + f64::from(self.epsilon)).sqrt())
            .collect()
    }

    fn folded_bias(&self, bias: &[f32], scales: &[f64]) -> Vec<f32> {
        bias.iter()
            .zip(scales)
            .zip(self.beta.iter().zip(&self.mean))
            .map(|((&b, &s), (&beta, &mean))| {
                (f64::from(beta) + (f64::from(b) - f64::from(mean)) * s) as f32
            })
            .collect()
    }
}

fn out_size(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                return Err(Error::config(format!(
                    "valid padding needs input {input} >= kernel {k}"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}

fn for_each_row<F>(out: &mut [f32], row_len: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    match exec {
        Exec::Serial => out.chunks_mut(row_len).enumerate().for_each(|(r, row)| f(r, row)),
        Exec::Parallel => out
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, row)| f(r, row)),
    }
}

/// `P` pixels by `C` output channels: `sum_ci x_p[ci] * w[ci * w_stride + j]`,
/// each lane summed in input-channel order.
#[inline(always)]
fn tile<const P: usize, const C: usize>(xs: &[&[f32]; P], w: &[f32], w_stride: usize) -> [[f64; C]; P] {
    let mut acc = [[0.0f64; C]; P];
    let cin = xs[0].len();
    for ci in 0..cin {
        let wr = &w[ci * w_stride..ci * w_stride + C];
        let mut wv = [0.0f64; C];
        for j in 0..C {
            wv[j] = f64::from(wr[j]);
        }
        for p in 0..P {
            let x = f64::from(xs[p][ci]);
            for j in 0..C {
                acc[p][j] += x * wv[j];
            }
        }
    }
    acc
}

#[inline(always)]
fn tile_into<const P: usize>(acc: &mut [f64], pixels: &[(usize, usize)], src: &[f32], cin: usize, w: &[f32], cout: usize) {
    let xs: [&[f32]; P] = std::array::from_fn(|p| &src[pixels[p].1..pixels[p].1 + cin]);
    let mut co = 0;
    while co + 8 <= cout {
        let t = tile::<P, 8>(&xs, &w[co..], cout);
        for (p, &(ox, _)) in pixels.iter().enumerate() {
            for j in 0..8 {
                acc[ox * cout + co + j] += t[p][j];
            }
        }
        co += 8;
    }
    while co + 4 <= cout {
        let t = tile::<P, 4>(&xs, &w[co..], cout);
        for (p, &(ox, _)) in pixels.iter().enumerate() {
            for j in 0..4 {
                acc[ox * cout + co + j] += t[p][j];
            }
        }
        co += 4;
    }
    for co in co..cout {
        let t = tile::<P, 1>(&xs, &w[co..], cout);
        for (p, &(ox, _)) in pixels.iter().enumerate() {
            acc[ox * cout + co] += t[p][0];
        }
    }
}

/// Adds one kernel tap's contribution for every `(ox, input offset)` pixel to the
/// row accumulator. `w` is the tap's `[c_in][c_out]` slice.
fn gemm_tap(acc: &mut [f64], pixels: &[(usize, usize)], src: &[f32], cin: usize, w: &[f32], cout: usize) {
    // Wider registers only; no fused multiply-add, so results match the generic path.
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { gemm_tap_avx2(acc, pixels, src, cin, w, cout) };
    }
    gemm_tap_generic(acc, pixels, src, cin, w, cout)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_tap_avx2(acc: &mut [f64], pixels: &[(usize, usize)], src: &[f32], cin: usize, w: &[f32], cout: usize) {
    gemm_tap_generic(acc, pixels, src, cin, w, cout)
}

#[inline(always)]
fn gemm_tap_generic(acc: &mut [f64], pixels: &[(usize, usize)], src: &[f32], cin: usize, w: &[f32], cout: usize) {
    let mut blocks = pixels.chunks_exact(4);
    for b in &mut blocks {
        tile_into::<4>(acc, b, src, cin, w, cout);
    }
    for b in blocks.remainder().chunks(1) {
        tile_into::<1>(acc, b, src, cin, w, cout);
    }
}

/// Adds the bias and rounds each f64 accumulator to f32 once.
#[inline]
fn store(out: &mut [f32], acc: &[f64], bias: &[f32]) {
    for ((o, &a), &b) in out.iter_mut().zip(acc).zip(bias) {
        *o = (a + f64::from(b)) as f32;
    }
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < limit).then_some(i)
}

/// Standard 2D convolution (cross-correlation) with bias.
pub fn conv2d(input: &Tensor, params: &ConvParams, exec: Exec) -> Result<Tensor> {
    params.validate()?;
    let is = input.shape();
    let ks = params.shape;
    if is.channels != ks.c_in {
        return Err(Error::config(format!(
            "conv2d: input has {} channels, kernel expects {}",
            is.channels, ks.c_in
        )));
    }
    let (oh, pad_top) = out_size(is.height, ks.kh, params.stride, params.padding)?;
    let (ow, pad_left) = out_size(is.width, ks.kw, params.stride, params.padding)?;
    let os = Shape::new(is.batch, oh, ow, ks.c_out);
    let mut out = vec![0.0f32; os.len()];
    let (cin, cout, stride) = (ks.c_in, ks.c_out, params.stride);
    let src = input.data();
    let w = &params.kernel;
    let row_len = ow * cout;

    for_each_row(&mut out, row_len, exec, |r, row| {
        let (n, oy) = (r / oh, r % oh);
        let mut acc = vec![0.0f64; row_len];
        let mut pixels = Vec::with_capacity(ow);
        for ky in 0..ks.kh {
            let Some(iy) = tap(oy, ky, stride, pad_top, is.height) else {
                continue;
            };
            for kx in 0..ks.kw {
                pixels.clear();
                pixels.extend((0..ow).filter_map(|ox| {
                    let ix = tap(ox, kx, stride, pad_left, is.width)?;
                    Some((ox, ((n * is.height + iy) * is.width + ix) * cin))
                }));
                let t = ky * ks.kw + kx;
                gemm_tap(&mut acc, &pixels, src, cin, &w[t * cin * cout..(t + 1) * cin * cout], cout);
            }
        }
        for (ox, a) in acc.chunks_exact(cout).enumerate() {
            store(&mut row[ox * cout..(ox + 1) * cout], a, &params.bias);
        }
    });
    Tensor::new(os, out)
}

/// Per-channel spatial convolution: output channel `c` only reads input channel `c`.
pub fn depthwise_conv2d(input: &Tensor, params: &DepthwiseParams, exec: Exec) -> Result<Tensor> {
    params.validate()?;
    let is = input.shape();
    if is.channels != params.channels {
        return Err(Error::config(format!(
            "depthwise_conv2d: input has {} channels, kernel has {}",
            is.channels, params.channels
        )));
    }
    let (oh, pad_top) = out_size(is.height, params.kh, params.stride, params.padding)?;
    let (ow, pad_left) = out_size(is.width, params.kw, params.stride, params.padding)?;
    let c = params.channels;
    let os = Shape::new(is.batch, oh, ow, c);
    let mut out = vec![0.0f32; os.len()];
    let src = input.data();
    let stride = params.stride;

    for_each_row(&mut out, ow * c, exec, |r, row| {
        let (n, oy) = (r / oh, r % oh);
        let mut acc = vec![0.0f64; c];
        for ox in 0..ow {
            acc.fill(0.0);
            for ky in 0..params.kh {
                let Some(iy) = tap(oy, ky, stride, pad_top, is.height) else {
                    continue;
                };
                for kx in 0..params.kw {
                    let Some(ix) = tap(ox, kx, stride, pad_left, is.width) else {
                        continue;
                    };
                    let px = ((n * is.height + iy) * is.width + ix) * c;
                    let k0 = (ky * params.kw + kx) * c;
                    let wk = &params.kernel[k0..k0 + c];
                    for ((a, &x), &wv) in acc.iter_mut().zip(&src[px..px + c]).zip(wk) {
                        *a += f64::from(x) * f64::from(wv);
                    }
                }
            }
            store(&mut row[ox * c..(ox + 1) * c], &acc, &params.bias);
        }
    });
    Tensor::new(os, out)
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same kernel buffer,
/// stride and padding. `params.shape` describes the transposed op (`c_in` = channels
/// of `input`) and the buffer is `[kh][kw][c_out][c_in]`.
///
/// With [`Padding::Same`] the output is exactly `input * stride` (requires `k >= stride`).
pub fn transposed_conv2d(input: &Tensor, params: &ConvParams, exec: Exec) -> Result<Tensor> {
    params.validate()?;
    let is = input.shape();
    let ks = params.shape;
    if is.channels != ks.c_in {
        return Err(Error::config(format!(
            "transposed_conv2d: input has {} channels, kernel expects {}",
            is.channels, ks.c_in
        )));
    }
    let s = params.stride;
    let (oh, ow, pad_top, pad_left) = match params.padding {
        Padding::Same => {
            if ks.kh < s || ks.kw < s {
                return Err(Error::config(format!(
                    "transposed_conv2d: same padding needs kernel >= stride ({}x{} < {s})",
                    ks.kh, ks.kw
                )));
            }
            (is.height * s, is.width * s, (ks.kh - s) / 2, (ks.kw - s) / 2)
        }
        Padding::Valid => ((is.height - 1) * s + ks.kh, (is.width - 1) * s + ks.kw, 0, 0),
    };
    let (cin, cout) = (ks.c_in, ks.c_out);
    let os = Shape::new(is.batch, oh, ow, cout);
    let mut out = vec![0.0f32; os.len()];
    let src = input.data();
    let w = &params.kernel;

    // Per tap, reorder the kernel from [c_out][c_in] to [c_in][c_out] for gemm_tap.
    let taps = ks.kh * ks.kw;
    let mut wt = vec![0.0f32; w.len()];
    for t in 0..taps {
        for co in 0..cout {
            for ci in 0..cin {
                wt[(t * cin + ci) * cout + co] = w[(t * cout + co) * cin + ci];
            }
        }
    }

    // Gather form: out[oy] += in[iy] * w[ky] wherever iy * s + ky - pad == oy.
    let source = |o: usize, k: usize, pad: usize, limit: usize| -> Option<usize> {
        let t = (o + pad).checked_sub(k)?;
        (t % s == 0 && t / s < limit).then_some(t / s)
    };
    let row_len = ow * cout;
    for_each_row(&mut out, row_len, exec, |r, row| {
        let (n, oy) = (r / oh, r % oh);
        let mut acc = vec![0.0f64; row_len];
        let mut pixels = Vec::with_capacity(ow);
        for ky in 0..ks.kh {
            let Some(iy) = source(oy, ky, pad_top, is.height) else {
                continue;
            };
            for kx in 0..ks.kw {
                pixels.clear();
                pixels.extend((0..ow).filter_map(|ox| {
                    let ix = source(ox, kx, pad_left, is.width)?;
                    Some((ox, ((n * is.height + iy) * is.width + ix) * cin))
                }));
                let t = ky * ks.kw + kx;
                gemm_tap(&mut acc, &pixels, src, cin, &wt[t * cin * cout..(t + 1) * cin * cout], cout);
            }
        }
        for (ox, a) in acc.chunks_exact(cout).enumerate() {
            store(&mut row[ox * cout..(ox + 1) * cout], a, &params.bias);
        }
    });
    Tensor::new(os, out)
}

#[inline]
pub fn relu6_scalar(x: f32) -> f32 {
    x.clamp(0.0, 6.0)
}

pub fn relu6(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu6_in_place(&mut out);
    out
}

pub fn relu6_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = relu6_scalar(*v));
}

/// Applies inference-mode batch norm as a separate pass (the unfolded computation).
pub fn batch_norm(input: &Tensor, bn: &BatchNormParams) -> Result<Tensor> {
    bn.validate()?;
    let c = input.shape().channels;
    if bn.channels() != c {
        return Err(Error::config(format!(
            "batch_norm: {} statistics for {} channels",
            bn.channels(),
            c
        )));
    }
    let scales = bn.scales();
    let mut out = input.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            let centred = f64::from(*v) - f64::from(bn.mean[ch]);
            *v = (centred * scales[ch] + f64::from(bn.beta[ch])) as f32;
        }
    }
    Ok(out)
}

fn check_bn(bn: &BatchNormParams, channels: usize, what: &str) -> Result<()> {
    bn.validate()?;
    if bn.channels() != channels {
        return Err(Error::config(format!(
            "{what}: batch norm has {} channels, layer outputs {channels}",
            bn.channels()
        )));
    }
    Ok(())
}

/// Folds `bn` into `conv` so that `conv2d(x, folded) == batch_norm(conv2d(x, conv), bn)`.
pub fn fold_batchnorm(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    conv.validate()?;
    check_bn(bn, conv.shape.c_out, "fold_batchnorm")?;
    let scales = bn.scales();
    let cout = conv.shape.c_out;
    let kernel = conv
        .kernel
        .iter()
        .enumerate()
        .map(|(i, &w)| (f64::from(w) * scales[i % cout]) as f32)
        .collect();
    Ok(ConvParams {
        kernel,
        bias: bn.folded_bias(&conv.bias, &scales),
        ..conv.clone()
    })
}

/// [`fold_batchnorm`] for a depthwise layer.
pub fn fold_batchnorm_depthwise(
    dw: &DepthwiseParams,
    bn: &BatchNormParams,
) -> Result<DepthwiseParams> {
    dw.validate()?;
    check_bn(bn, dw.channels, "fold_batchnorm_depthwise")?;
    let scales = bn.scales();
    let kernel = dw
        .kernel
        .iter()
        .enumerate()
        .map(|(i, &w)| (f64::from(w) * scales[i % dw.channels]) as f32)
        .collect();
    Ok(DepthwiseParams {
        kernel,
        bias: bn.folded_bias(&dw.bias, &scales),
        ..dw.clone()
    })
}

/// [`fold_batchnorm`] for a transposed convolution (`[kh][kw][c_out][c_in]` buffer).
pub fn fold_batchnorm_transposed(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    conv.validate()?;
    check_bn(bn, conv.shape.c_out, "fold_batchnorm_transposed")?;
    let scales = bn.scales();
    let (cout, cin) = (conv.shape.c_out, conv.shape.c_in);
    let kernel = conv
        .kernel
        .iter()
        .enumerate()
        .map(|(i, &w)| (f64::from(w) * scales[(i / cin) % cout]) as f32)
        .collect();
    Ok(ConvParams {
        kernel,
        bias: bn.folded_bias(&conv.bias, &scales),
        ..conv.clone()
    })
}

/// A normalized probability grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// First maximum in row-major order: `(row, col, probability)`.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = 0;
        for (i, &p) in self.data.iter().enumerate() {
            if p > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width, self.data[best])
    }
}

/// Softmax over all cells of one score plane, computed in f64 after subtracting the max.
pub fn spatial_softmax(scores: &[f32], height: usize, width: usize) -> Result<ProbMap> {
    if height == 0 || width == 0 || scores.len() != height * width {
        return Err(Error::config(format!(
            "spatial_softmax: {} scores for a {height}x{width} grid",
            scores.len()
        )));
    }
    let max = scores.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let max = f64::from(max);
    let exps: Vec<f64> = scores.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbMap {
        height,
        width,
        data: exps.into_iter().map(|e| e / sum).collect(),
    })
}
