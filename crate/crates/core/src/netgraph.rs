//! The encoder-decoder hand keypoint network: block table, shape trace, forward
//! pass, and parameter/FLOP accounting.
//!
//! The encoder is MobileNetV2 (width 1.0) truncated after the 320-channel unit,
//! with the subsampling of inverted-residual unit 14 (the first 160-channel unit)
//! disabled. Units are numbered 1..=17 in execution order. The decoder is a short
//! depthwise-separable head with one ×2 transposed-conv upsample, ending in a linear
//! 1×1 conv that emits `K + 1` raw heatmaps (K keypoints plus background).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmaps, NUM_KEYPOINTS, NUM_PLANES};
use crate::tensor::{
    conv2d, depthwise_conv2d, relu6_in_place, transposed_conv2d, ConvParams, DepthwiseParams,
    Exec, KernelShape, Padding, Shape, Tensor,
};

/// The inverted-residual unit whose stride is forced to 1.
pub const STRIDE_REMOVED_UNIT: usize = 14;

/// Parameter count quoted for the original model.
pub const REFERENCE_PARAMS: u64 = 7_980_000;
/// FLOP count quoted for the original model (per frame).
pub const REFERENCE_FLOPS: u64 = 16_300_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    InitialConv,
    InvertedResidual,
    Pointwise,
    DepthwiseSeparable,
    TransposedUpsample,
    HeatmapHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Expansion factor `t`; only meaningful for inverted residuals.
    pub expansion: usize,
    pub out_channels: usize,
    /// Stride of the first repeat; later repeats use stride 1.
    pub stride: usize,
    pub repeat: usize,
}

impl BlockSpec {
    pub const fn new(kind: BlockKind, expansion: usize, out_channels: usize, stride: usize, repeat: usize) -> Self {
        BlockSpec {
            kind,
            expansion,
            out_channels,
            stride,
            repeat,
        }
    }

    const fn ir(t: usize, c: usize, n: usize, s: usize) -> Self {
        Self::new(BlockKind::InvertedResidual, t, c, s, n)
    }

    const fn simple(kind: BlockKind, c: usize, s: usize) -> Self {
        Self::new(kind, 1, c, s, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub num_keypoints: usize,
    pub encoder: Vec<BlockSpec>,
    pub decoder: Vec<BlockSpec>,
    pub block14_stride_removed: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        use BlockKind::*;
        NetworkConfig {
            input_size: 224,
            num_keypoints: NUM_KEYPOINTS,
            encoder: vec![
                BlockSpec::simple(InitialConv, 32, 2),
                BlockSpec::ir(1, 16, 1, 1),
                BlockSpec::ir(6, 24, 2, 2),
                BlockSpec::ir(6, 32, 3, 2),
                BlockSpec::ir(6, 64, 4, 2),
                BlockSpec::ir(6, 96, 3, 1),
                BlockSpec::ir(6, 160, 3, 2),
                BlockSpec::ir(6, 320, 1, 1),
            ],
            decoder: vec![
                BlockSpec::simple(Pointwise, 256, 1),
                BlockSpec::simple(DepthwiseSeparable, 256, 1),
                BlockSpec::simple(TransposedUpsample, 128, 2),
                BlockSpec::simple(DepthwiseSeparable, 128, 1),
                BlockSpec::simple(HeatmapHead, NUM_PLANES, 1),
            ],
            block14_stride_removed: true,
        }
    }
}

impl NetworkConfig {
    pub fn with_input_size(input_size: usize) -> Self {
        NetworkConfig {
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_keypoints != NUM_KEYPOINTS {
            return Err(Error::config(format!(
                "num_keypoints must be {NUM_KEYPOINTS}, got {}",
                self.num_keypoints
            )));
        }
        if self.input_size == 0 {
            return Err(Error::config("input_size must be >= 1"));
        }
        for b in self.encoder.iter().chain(&self.decoder) {
            if b.expansion < 1 || b.repeat < 1 || b.out_channels < 1 || !(1..=2).contains(&b.stride) {
                return Err(Error::config(format!("invalid block spec {b:?}")));
            }
        }
        match self.decoder.last() {
            Some(b) if b.kind == BlockKind::HeatmapHead => {
                if b.out_channels != self.num_keypoints + 1 || b.repeat != 1 {
                    return Err(Error::config(format!(
                        "heatmap head must emit {} channels once, got {} x{}",
                        self.num_keypoints + 1,
                        b.out_channels,
                        b.repeat
                    )));
                }
            }
            _ => return Err(Error::config("decoder must end with a heatmap_head block")),
        }
        let heads = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .filter(|b| b.kind == BlockKind::HeatmapHead)
            .count();
        if heads != 1 {
            return Err(Error::config("exactly one heatmap_head block is allowed"));
        }
        if self.block14_stride_removed {
            let mut unit = 0;
            let mut marked = None;
            for b in self.encoder.iter().filter(|b| b.kind == BlockKind::InvertedResidual) {
                for r in 0..b.repeat {
                    unit += 1;
                    if unit == STRIDE_REMOVED_UNIT {
                        marked = Some(r == 0 && b.stride == 2);
                    }
                }
            }
            match marked {
                Some(true) => {}
                Some(false) => {
                    return Err(Error::config(format!(
                        "inverted-residual unit {STRIDE_REMOVED_UNIT} has no stride to remove"
                    )))
                }
                None => {
                    return Err(Error::config(format!(
                        "encoder has fewer than {STRIDE_REMOVED_UNIT} inverted-residual units"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Spatial size and channel count of an activation (batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu6,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv(ConvParams),
    Depthwise(DepthwiseParams),
    Transposed(ConvParams),
}

impl LayerOp {
    fn stride(&self) -> usize {
        match self {
            LayerOp::Conv(p) | LayerOp::Transposed(p) => p.stride,
            LayerOp::Depthwise(p) => p.stride,
        }
    }

    fn kernel_hw(&self) -> (usize, usize) {
        match self {
            LayerOp::Conv(p) | LayerOp::Transposed(p) => (p.shape.kh, p.shape.kw),
            LayerOp::Depthwise(p) => (p.kh, p.kw),
        }
    }

    /// Shape of the `<layer>.weight` archive entry.
    pub fn weight_dims(&self) -> Vec<usize> {
        match self {
            LayerOp::Conv(p) => vec![p.shape.kh, p.shape.kw, p.shape.c_in, p.shape.c_out],
            LayerOp::Depthwise(p) => vec![p.kh, p.kw, p.channels, 1],
            LayerOp::Transposed(p) => vec![p.shape.kh, p.shape.kw, p.shape.c_out, p.shape.c_in],
        }
    }

    pub fn kernel_len(&self) -> usize {
        match self {
            LayerOp::Conv(p) | LayerOp::Transposed(p) => p.kernel.len(),
            LayerOp::Depthwise(p) => p.kernel.len(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            LayerOp::Conv(p) | LayerOp::Transposed(p) => p.shape.c_out,
            LayerOp::Depthwise(p) => p.channels,
        }
    }

    fn label(&self) -> String {
        let (kh, kw) = self.kernel_hw();
        let s = self.stride();
        match self {
            LayerOp::Conv(_) => format!("conv {kh}x{kw} s{s}"),
            LayerOp::Depthwise(_) => format!("depthwise {kh}x{kw} s{s}"),
            LayerOp::Transposed(_) => format!("transposed {kh}x{kw} s{s}"),
        }
    }

    pub fn apply(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        match self {
            LayerOp::Conv(p) => conv2d(x, p, exec),
            LayerOp::Depthwise(p) => depthwise_conv2d(x, p, exec),
            LayerOp::Transposed(p) => transposed_conv2d(x, p, exec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    /// Followed by batch norm in the trained graph (folded into `op` once bound).
    pub batch_norm: bool,
    /// Carries a `<layer>.bias` entry of its own.
    pub has_bias: bool,
    pub activation: Activation,
    pub input: Dims,
    pub output: Dims,
    pub note: Option<String>,
}

impl Layer {
    /// Pre-folding count: kernel + own bias + batch-norm gamma/beta.
    pub fn parameter_count(&self) -> u64 {
        let c = self.op.out_channels();
        let mut n = self.op.kernel_len();
        if self.has_bias {
            n += c;
        }
        if self.batch_norm {
            n += 2 * c;
        }
        n as u64
    }

    /// One multiply-accumulate = 2 FLOPs; bias, batch norm and activations excluded.
    pub fn flops(&self) -> u64 {
        let (kh, kw) = self.op.kernel_hw();
        let macs = match self.op {
            LayerOp::Conv(_) => self.output.h * self.output.w * kh * kw * self.input.c * self.output.c,
            LayerOp::Depthwise(_) => self.output.h * self.output.w * kh * kw * self.output.c,
            LayerOp::Transposed(_) => self.input.h * self.input.w * kh * kw * self.input.c * self.output.c,
        };
        2 * macs as u64
    }
}

/// A residual unit or a plain group of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<Layer>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub stages: Vec<Stage>,
    pub encoder_output: Dims,
    pub output_grid: (usize, usize),
    /// Set once weights have been bound (and batch norms folded).
    pub bound: bool,
}

fn same_out(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

struct Builder {
    cur: Dims,
    stages: Vec<Stage>,
}

impl Builder {
    fn layer(
        &mut self,
        name: String,
        op: LayerOp,
        batch_norm: bool,
        activation: Activation,
        note: Option<String>,
    ) -> Layer {
        let input = self.cur;
        let s = op.stride();
        let (h, w) = match op {
            LayerOp::Transposed(_) => (input.h * s, input.w * s),
            _ => (same_out(input.h, s), same_out(input.w, s)),
        };
        let output = Dims {
            h,
            w,
            c: op.out_channels(),
        };
        self.cur = output;
        Layer {
            name,
            has_bias: !batch_norm,
            op,
            batch_norm,
            activation,
            input,
            output,
            note,
        }
    }

    fn pointwise(&mut self, name: String, c_out: usize, act: Activation, bn: bool) -> Layer {
        let op = LayerOp::Conv(ConvParams::zeros(
            KernelShape::new(1, 1, self.cur.c, c_out),
            1,
            Padding::Same,
        ));
        self.layer(name, op, bn, act, None)
    }

    fn depthwise(&mut self, name: String, stride: usize, note: Option<String>) -> Layer {
        let op = LayerOp::Depthwise(DepthwiseParams::zeros((3, 3, self.cur.c), stride, Padding::Same));
        self.layer(name, op, true, Activation::Relu6, note)
    }
}

/// Builds the layer list for `config`, with zero weights.
pub fn build_network(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let mut b = Builder {
        cur: Dims {
            h: config.input_size,
            w: config.input_size,
            c: 3,
        },
        stages: Vec::new(),
    };
    let mut unit = 0;
    let mut stem = 0;
    for spec in &config.encoder {
        for r in 0..spec.repeat {
            let stride = if r == 0 { spec.stride } else { 1 };
            let stage = match spec.kind {
                BlockKind::InitialConv => {
                    stem += 1;
                    let name = if stem == 1 { "stem".to_string() } else { format!("stem{stem}") };
                    let op = LayerOp::Conv(ConvParams::zeros(
                        KernelShape::new(3, 3, b.cur.c, spec.out_channels),
                        stride,
                        Padding::Same,
                    ));
                    let l = b.layer(format!("{name}.conv"), op, true, Activation::Relu6, None);
                    Stage {
                        name,
                        layers: vec![l],
                        residual: false,
                    }
                }
                BlockKind::InvertedResidual => {
                    unit += 1;
                    let name = format!("block{unit}");
                    let (stride, note) = if config.block14_stride_removed && unit == STRIDE_REMOVED_UNIT {
                        (1, Some("stride removed".to_string()))
                    } else {
                        (stride, None)
                    };
                    let c_in = b.cur.c;
                    let mut layers = Vec::with_capacity(3);
                    if spec.expansion != 1 {
                        layers.push(b.pointwise(
                            format!("{name}.expand"),
                            c_in * spec.expansion,
                            Activation::Relu6,
                            true,
                        ));
                    }
                    layers.push(b.depthwise(format!("{name}.dw"), stride, note));
                    layers.push(b.pointwise(format!("{name}.project"), spec.out_channels, Activation::Linear, true));
                    Stage {
                        name,
                        layers,
                        residual: stride == 1 && c_in == spec.out_channels,
                    }
                }
                other => {
                    let name = format!("enc{}", b.stages.len() + 1);
                    block_stage(&mut b, other, spec, stride, &name)?
                }
            };
            b.stages.push(stage);
        }
    }
    let encoder_output = b.cur;
    let mut dec = 0;
    for spec in &config.decoder {
        for r in 0..spec.repeat {
            let stride = if r == 0 { spec.stride } else { 1 };
            let name = if spec.kind == BlockKind::HeatmapHead {
                "head".to_string()
            } else {
                dec += 1;
                format!("dec{dec}")
            };
            let stage = block_stage(&mut b, spec.kind, spec, stride, &name)?;
            b.stages.push(stage);
        }
    }
    if b.cur.c != NUM_PLANES {
        return Err(Error::config(format!("network emits {} channels, expected {NUM_PLANES}", b.cur.c)));
    }
    Ok(Network {
        config: config.clone(),
        stages: b.stages,
        encoder_output,
        output_grid: (b.cur.h, b.cur.w),
        bound: false,
    })
}

fn block_stage(b: &mut Builder, kind: BlockKind, spec: &BlockSpec, stride: usize, name: &str) -> Result<Stage> {
    let layers = match kind {
        BlockKind::Pointwise => {
            if stride != 1 {
                return Err(Error::config(format!("{name}: pointwise blocks cannot stride")));
            }
            vec![b.pointwise(format!("{name}.pw"), spec.out_channels, Activation::Relu6, true)]
        }
        BlockKind::DepthwiseSeparable => {
            let dw = b.depthwise(format!("{name}.dw"), stride, None);
            let pw = b.pointwise(format!("{name}.pw"), spec.out_channels, Activation::Relu6, true);
            vec![dw, pw]
        }
        BlockKind::TransposedUpsample => {
            let k = 2 * stride;
            let op = LayerOp::Transposed(ConvParams::zeros(
                KernelShape::new(k, k, b.cur.c, spec.out_channels),
                stride,
                Padding::Same,
            ));
            vec![b.layer(format!("{name}.up"), op, true, Activation::Relu6, None)]
        }
        BlockKind::HeatmapHead => {
            if stride != 1 {
                return Err(Error::config("heatmap head cannot stride"));
            }
            vec![b.pointwise(format!("{name}.conv"), spec.out_channels, Activation::Linear, false)]
        }
        BlockKind::InitialConv | BlockKind::InvertedResidual => {
            return Err(Error::config(format!("{kind:?} blocks belong in the encoder")));
        }
    };
    Ok(Stage {
        name: name.to_string(),
        layers,
        residual: false,
    })
}

/// What a `<layer>.*` archive entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    BnEps,
}

impl EntryRole {
    /// Counted by [`count_parameters`] (running statistics and epsilon are not).
    pub fn is_parameter(self) -> bool {
        matches!(self, EntryRole::Weight | EntryRole::Bias | EntryRole::BnGamma | EntryRole::BnBeta)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntrySpec {
    pub layer: String,
    pub name: String,
    pub dims: Vec<usize>,
    pub role: EntryRole,
}

impl Network {
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.stages.iter().flat_map(|s| s.layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.stages.iter_mut().flat_map(|s| s.layers.iter_mut())
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    /// Every archive entry this network binds, in layer order.
    pub fn weight_entries(&self) -> Vec<EntrySpec> {
        let mut out = Vec::new();
        for l in self.layers() {
            let c = l.op.out_channels();
            let mut push = |suffix: &str, dims: Vec<usize>, role| {
                out.push(EntrySpec {
                    layer: l.name.clone(),
                    name: format!("{}.{suffix}", l.name),
                    dims,
                    role,
                })
            };
            push("weight", l.op.weight_dims(), EntryRole::Weight);
            if l.has_bias {
                push("bias", vec![c], EntryRole::Bias);
            }
            if l.batch_norm {
                push("bn.gamma", vec![c], EntryRole::BnGamma);
                push("bn.beta", vec![c], EntryRole::BnBeta);
                push("bn.mean", vec![c], EntryRole::BnMean);
                push("bn.var", vec![c], EntryRole::BnVar);
                push("bn.eps", vec![1], EntryRole::BnEps);
            }
        }
        out
    }

    /// Raw network output as a tensor of shape `(1, grid_h, grid_w, 22)`.
    pub fn forward_tensor(&self, image: &Tensor, exec: Exec) -> Result<Tensor> {
        let s = self.config.input_size;
        let expect = Shape::new(1, s, s, 3);
        if image.shape() != expect {
            return Err(Error::usage(format!(
                "network expects input {expect}, got {}",
                image.shape()
            )));
        }
        let mut x = image.clone();
        for stage in &self.stages {
            let skip = stage.residual.then(|| x.clone());
            for layer in &stage.layers {
                x = layer.op.apply(&x, exec)?;
                if layer.activation == Activation::Relu6 {
                    relu6_in_place(&mut x);
                }
            }
            if let Some(skip) = skip {
                x = x.add(&skip)?;
            }
        }
        Ok(x)
    }

    /// Raw (pre-softmax) heatmaps for one normalized `(1, S, S, 3)` image.
    pub fn forward(&self, image: &Tensor, exec: Exec) -> Result<Heatmaps> {
        Heatmaps::from_tensor(&self.forward_tensor(image, exec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub per_layer: Vec<LayerCount>,
    pub total: u64,
}

pub fn count_parameters(net: &Network) -> Counts {
    let per_layer: Vec<LayerCount> = net
        .layers()
        .map(|l| LayerCount {
            name: l.name.clone(),
            count: l.parameter_count(),
        })
        .collect();
    let total = per_layer.iter().map(|l| l.count).sum();
    Counts { per_layer, total }
}

/// FLOPs for one frame at `input_size` (which may differ from the build size).
pub fn count_flops(net: &Network, input_size: usize) -> Result<Counts> {
    let traced = if input_size == net.config.input_size {
        None
    } else {
        Some(build_network(&NetworkConfig {
            input_size,
            ..net.config.clone()
        })?)
    };
    let per_layer: Vec<LayerCount> = traced
        .as_ref()
        .unwrap_or(net)
        .layers()
        .map(|l| LayerCount {
            name: l.name.clone(),
            count: l.flops(),
        })
        .collect();
    let total = per_layer.iter().map(|l| l.count).sum();
    Ok(Counts { per_layer, total })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescribeRow {
    pub name: String,
    pub op: String,
    pub input: Dims,
    pub output: Dims,
    pub activation: Activation,
    pub batch_norm: bool,
    pub residual: bool,
    pub params: u64,
    pub flops: u64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub input_size: usize,
    pub encoder_output: Dims,
    pub output: Dims,
    pub rows: Vec<DescribeRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

pub fn describe(net: &Network) -> Description {
    let mut rows = Vec::new();
    for stage in &net.stages {
        let last = stage.layers.len() - 1;
        for (i, l) in stage.layers.iter().enumerate() {
            rows.push(DescribeRow {
                name: l.name.clone(),
                op: l.op.label(),
                input: l.input,
                output: l.output,
                activation: l.activation,
                batch_norm: l.batch_norm,
                residual: stage.residual && i == last,
                params: l.parameter_count(),
                flops: l.flops(),
                note: l.note.clone(),
            });
        }
    }
    let (h, w) = net.output_grid;
    Description {
        input_size: net.config.input_size,
        encoder_output: net.encoder_output,
        output: Dims { h, w, c: NUM_PLANES },
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    }
}

impl Description {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:<20} {:>12} {:>12} {:>10} {:>14}  notes",
            "layer", "op", "in", "out", "params", "flops"
        );
        for r in &self.rows {
            let mut notes = Vec::new();
            if r.batch_norm {
                notes.push("bn".to_string());
            }
            notes.push(match r.activation {
                Activation::Relu6 => "relu6".to_string(),
                Activation::Linear => "linear".to_string(),
            });
            if r.residual {
                notes.push("+residual".to_string());
            }
            if let Some(n) = &r.note {
                notes.push(n.clone());
            }
            let _ = writeln!(
                s,
                "{:<16} {:<20} {:>12} {:>12} {:>10} {:>14}  {}",
                r.name,
                r.op,
                r.input.to_string(),
                r.output.to_string(),
                r.params,
                r.flops,
                notes.join(", ")
            );
        }
        let _ = writeln!(
            s,
            "input {0}x{0}x3 -> encoder {1} -> output {2}",
            self.input_size, self.encoder_output, self.output
        );
        s
    }
}

/// Parameter/FLOP audit against the figures quoted for the original model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_params: u64,
    pub encoder_params: u64,
    pub decoder_params: u64,
    pub reference_params: u64,
    /// `total_params - reference_params`.
    pub param_delta: i64,
    pub flops_112: u64,
    pub flops_224: u64,
    pub reference_flops: u64,
    /// Whether the quoted FLOP figure is within 10% of either computed count.
    pub reference_flops_reconstructible: bool,
}

pub fn budget(net: &Network) -> Result<BudgetReport> {
    let params = count_parameters(net);
    let encoder_stages: usize = net
        .stages
        .iter()
        .take_while(|s| !s.name.starts_with("dec") && s.name != "head")
        .map(|s| s.layers.len())
        .sum();
    let encoder_params: u64 = params.per_layer[..encoder_stages].iter().map(|l| l.count).sum();
    let flops_112 = count_flops(net, 112)?.total;
    let flops_224 = count_flops(net, 224)?.total;
    let near = |v: u64| (v as f64 - REFERENCE_FLOPS as f64).abs() <= 0.1 * REFERENCE_FLOPS as f64;
    Ok(BudgetReport {
        total_params: params.total,
        encoder_params,
        decoder_params: params.total - encoder_params,
        reference_params: REFERENCE_PARAMS,
        param_delta: params.total as i64 - REFERENCE_PARAMS as i64,
        flops_112,
        flops_224,
        reference_flops: REFERENCE_FLOPS,
        reference_flops_reconstructible: near(flops_112) || near(flops_224),
    })
}

impl BudgetReport {
    pub fn to_text(&self) -> String {
        let m = |v: u64| v as f64 / 1e6;
        let mut lines = vec![
            format!(
                "params: {} total ({:.2}M; encoder {}, decoder {})",
                self.total_params,
                m(self.total_params),
                self.encoder_params,
                self.decoder_params
            ),
            format!(
                "params reference: {:.2}M, delta {:+} ({:+.2}M); decoder layout not fully determined, count reported as built",
                m(self.reference_params),
                self.param_delta,
                self.param_delta as f64 / 1e6
            ),
            format!(
                "flops (2 per MAC): {} at 112 ({:.1}M), {} at 224 ({:.1}M)",
                self.flops_112,
                m(self.flops_112),
                self.flops_224,
                m(self.flops_224)
            ),
        ];
        lines.push(if self.reference_flops_reconstructible {
            format!("flops reference: {:.1}M, matches a computed count within 10%", m(self.reference_flops))
        } else {
            format!(
                "flops reference: {:.1}M, NOT reconstructible under the 2-FLOPs-per-MAC convention",
                m(self.reference_flops)
            )
        });
        lines.join("\n") + "\n"
    }
}
