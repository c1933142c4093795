//! RSE-Net: a bottleneck residual encoder with channel squeeze-and-excitation
//! after every residual block, fixed-width "tap" convolutions on the encoder
//! outputs, learned transposed-convolution upsampling of every tap back to
//! input resolution, and a 1x1 fusion head with a sigmoid output.
//!
//! ```text
//! 3xHxW -> stem(7x7/2, maxpool/2) -> stage1 ... stage4      strides 4, 8, 16, 32
//!                                       |          |
//!                                   tap(3x3,k)  tap(3x3,k)
//!                                       |          |
//!                              deconv x2 ... x2  deconv x2 ... x2
//!                                       \___ concat (n_taps * k) ___/
//!                                               1x1 conv -> sigmoid
//! ```

pub mod checkpoint;
mod graph;
pub mod ops;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::InputStack;
use crate::error::{Error, Result};

pub use graph::{backward, forward_traced, ForwardTrace};
pub use ops::{ConvGeom, FeatureMap};

/// Output stride of each encoder stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Bottleneck expansion: a stage of width C uses C/4 inner channels.
pub const BOTTLENECK_EXPANSION: usize = 4;
/// Logits are clipped to this magnitude so that sigmoid outputs stay strictly inside (0, 1) in f64.
pub const LOGIT_CLIP: f64 = 36.0;
/// Largest input stride; spatial dims must be a multiple of it.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPlacement {
    /// One tap on the final (post-SE) output of each of the four stages.
    #[default]
    StageOutputs,
    /// One tap on every residual block's post-SE output.
    EveryBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "three")]
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_block_counts: [usize; 4],
    pub stage_channels: [usize; 4],
    pub se_reduction: usize,
    pub tap_channels: usize,
    #[serde(default = "one")]
    pub head_classes: usize,
    #[serde(default)]
    pub tap_placement: TapPlacement,
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

impl Default for NetworkConfig {
    /// ResNet50 layout with r = 16 and k = 16.
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            stem_channels: 64,
            stage_block_counts: [3, 4, 6, 3],
            stage_channels: [256, 512, 1024, 2048],
            se_reduction: 16,
            tap_channels: 16,
            head_classes: 1,
            tap_placement: TapPlacement::StageOutputs,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale variant: one block per stage, narrow stages, r = 4.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_channels: 3,
            stem_channels: 8,
            stage_block_counts: [1, 1, 1, 1],
            stage_channels: [16, 32, 64, 128],
            se_reduction: 4,
            tap_channels: 16,
            head_classes: 1,
            tap_placement: TapPlacement::StageOutputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_channels != 3 {
            return err(format!("input_channels must be 3, got {}", self.input_channels));
        }
        if self.head_classes != 1 {
            return err(format!("head_classes must be 1, got {}", self.head_classes));
        }
        if self.stem_channels == 0 || self.tap_channels == 0 || self.se_reduction == 0 {
            return err("stem_channels, tap_channels and se_reduction must be positive".into());
        }
        for (i, (&blocks, &ch)) in self
            .stage_block_counts
            .iter()
            .zip(&self.stage_channels)
            .enumerate()
        {
            if blocks == 0 {
                return err(format!("stage {} has no residual blocks", i + 1));
            }
            if ch % self.se_reduction != 0 {
                return err(format!(
                    "stage_channels[{i}] = {ch} is not divisible by se_reduction {}",
                    self.se_reduction
                ));
            }
            if ch % BOTTLENECK_EXPANSION != 0 {
                return err(format!(
                    "stage_channels[{i}] = {ch} is not divisible by the bottleneck expansion {BOTTLENECK_EXPANSION}"
                ));
            }
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_block_counts.iter().sum()
    }
}

/// A real-valued parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        ParamArray {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A convolution layer (ordinary or transposed, depending on its use).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub geom: ConvGeom,
    pub weight: ParamArray,
    pub bias: ParamArray,
}

impl Conv {
    fn init(geom: ConvGeom, rng: &mut ChaCha8Rng) -> Self {
        let k2 = geom.kernel * geom.kernel;
        let fan_in = geom.in_ch * k2;
        Conv {
            geom,
            weight: ParamArray::he_normal(&[geom.out_ch, geom.in_ch, geom.kernel, geom.kernel], fan_in, rng),
            bias: ParamArray::zeros(&[geom.out_ch]),
        }
    }

    /// Transposed convolution; weights are `in x out x k x k` and the fan-in
    /// counts the taps that reach one output pixel.
    fn init_transposed(geom: ConvGeom, rng: &mut ChaCha8Rng) -> Self {
        let per_axis = geom.kernel / geom.stride;
        let fan_in = geom.in_ch * per_axis * per_axis;
        Conv {
            geom,
            weight: ParamArray::he_normal(&[geom.in_ch, geom.out_ch, geom.kernel, geom.kernel], fan_in, rng),
            bias: ParamArray::zeros(&[geom.out_ch]),
        }
    }

    fn zeros_like(&self) -> Self {
        Conv {
            geom: self.geom,
            weight: ParamArray::zeros(&self.weight.shape),
            bias: ParamArray::zeros(&self.bias.shape),
        }
    }
}

/// Channel squeeze-and-excitation: two fully connected layers `C -> C/r -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    pub channels: usize,
    pub hidden: usize,
    /// `hidden x channels`
    pub reduce_weight: ParamArray,
    pub reduce_bias: ParamArray,
    /// `channels x hidden`
    pub expand_weight: ParamArray,
    pub expand_bias: ParamArray,
}

impl SeParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        SeParams {
            channels,
            hidden,
            reduce_weight: ParamArray::zeros(&[hidden, channels]),
            reduce_bias: ParamArray::zeros(&[hidden]),
            expand_weight: ParamArray::zeros(&[channels, hidden]),
            expand_bias: ParamArray::zeros(&[channels]),
        }
    }

    fn init(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        SeParams {
            channels,
            hidden,
            reduce_weight: ParamArray::he_normal(&[hidden, channels], channels, rng),
            reduce_bias: ParamArray::zeros(&[hidden]),
            expand_weight: ParamArray::he_normal(&[channels, hidden], hidden, rng),
            expand_bias: ParamArray::zeros(&[channels]),
        }
    }
}

/// Bottleneck residual block followed by its SE block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub stage: usize,
    pub index_in_stage: usize,
    pub reduce: Conv,
    pub spatial: Conv,
    pub expand: Conv,
    pub shortcut: Option<Conv>,
    pub se: SeParams,
}

/// Specialized k-channel convolution on one encoder output plus its upsampler chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    /// Global index of the residual block whose output feeds this tap.
    pub block: usize,
    pub stride: usize,
    pub conv: Conv,
    pub upsamplers: Vec<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub seed: u64,
    pub stem: Conv,
    pub blocks: Vec<ResidualBlock>,
    pub taps: Vec<Tap>,
    pub head: Conv,
}

/// Sigmoid output of the network for one input stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub exam_id: String,
    pub slice_index: usize,
}

pub fn upsampler_geom(channels: usize) -> ConvGeom {
    ConvGeom {
        in_ch: channels,
        out_ch: channels,
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

fn doubling_steps(stride: usize) -> Result<usize> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::Config(format!("stage stride {stride} is not a power of two")));
    }
    Ok(stride.trailing_zeros() as usize)
}

/// Initializes an RSE-Net: He fan-in normal weights, zero biases.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Conv::init(
        ConvGeom {
            in_ch: config.input_channels,
            out_ch: config.stem_channels,
            kernel: 7,
            stride: 2,
            padding: 3,
        },
        &mut rng,
    );

    let mut blocks = Vec::with_capacity(config.total_blocks());
    let mut in_ch = config.stem_channels;
    for (stage, (&count, &out_ch)) in config
        .stage_block_counts
        .iter()
        .zip(&config.stage_channels)
        .enumerate()
    {
        let mid = out_ch / BOTTLENECK_EXPANSION;
        for j in 0..count {
            let stride = if j == 0 && stage > 0 { 2 } else { 1 };
            let pw = |i, o, s| ConvGeom {
                in_ch: i,
                out_ch: o,
                kernel: 1,
                stride: s,
                padding: 0,
            };
            let reduce = Conv::init(pw(in_ch, mid, 1), &mut rng);
            let spatial = Conv::init(
                ConvGeom {
                    in_ch: mid,
                    out_ch: mid,
                    kernel: 3,
                    stride,
                    padding: 1,
                },
                &mut rng,
            );
            let expand = Conv::init(pw(mid, out_ch, 1), &mut rng);
            let shortcut = (j == 0 && (stride != 1 || in_ch != out_ch))
                .then(|| Conv::init(pw(in_ch, out_ch, stride), &mut rng));
            let se = SeParams::init(out_ch, out_ch / config.se_reduction, &mut rng);
            blocks.push(ResidualBlock {
                stage,
                index_in_stage: j,
                reduce,
                spatial,
                expand,
                shortcut,
                se,
            });
            in_ch = out_ch;
        }
    }

    let tap_sources: Vec<usize> = match config.tap_placement {
        TapPlacement::StageOutputs => {
            let mut last = 0;
            config
                .stage_block_counts
                .iter()
                .map(|&c| {
                    last += c;
                    last - 1
                })
                .collect()
        }
        TapPlacement::EveryBlock => (0..blocks.len()).collect(),
    };
    let k = config.tap_channels;
    let mut taps = Vec::with_capacity(tap_sources.len());
    for block in tap_sources {
        let b = &blocks[block];
        let stride = STAGE_STRIDES[b.stage];
        let conv = Conv::init(
            ConvGeom {
                in_ch: config.stage_channels[b.stage],
                out_ch: k,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            &mut rng,
        );
        let upsamplers = (0..doubling_steps(stride)?)
            .map(|_| Conv::init_transposed(upsampler_geom(k), &mut rng))
            .collect();
        taps.push(Tap {
            block,
            stride,
            conv,
            upsamplers,
        });
    }

    let head = Conv::init(
        ConvGeom {
            in_ch: taps.len() * k,
            out_ch: config.head_classes,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
        &mut rng,
    );

    let mut model = ModelParams {
        config: config.clone(),
        seed,
        stem,
        blocks,
        taps,
        head,
    };
    model.round_to_f32();
    Ok(model)
}

/// Like [`build_network`], then overwrites the encoder (stem and residual
/// blocks) with the matching arrays from a checkpoint-format parameter file.
pub fn build_network_with_encoder(
    config: &NetworkConfig,
    seed: u64,
    encoder: Option<&Path>,
) -> Result<ModelParams> {
    let mut model = build_network(config, seed)?;
    let Some(path) = encoder else {
        return Ok(model);
    };
    let arrays = checkpoint::read_arrays(path)?;
    for (name, slot) in model.params_mut() {
        if !(name.starts_with("stem.") || name.starts_with("stage")) {
            continue;
        }
        let src = arrays.get(&name).ok_or_else(|| {
            Error::Config(format!("encoder file {} lacks parameter {name}", path.display()))
        })?;
        if src.shape != slot.shape {
            return Err(Error::Config(format!(
                "encoder parameter {name} has shape {:?}, expected {:?}",
                src.shape, slot.shape
            )));
        }
        slot.data.clone_from(&src.data);
    }
    Ok(model)
}

impl ModelParams {
    /// Same architecture with every parameter zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            seed: self.seed,
            stem: self.stem.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    stage: b.stage,
                    index_in_stage: b.index_in_stage,
                    reduce: b.reduce.zeros_like(),
                    spatial: b.spatial.zeros_like(),
                    expand: b.expand.zeros_like(),
                    shortcut: b.shortcut.as_ref().map(Conv::zeros_like),
                    se: SeParams::zeros(b.se.channels, b.se.hidden),
                })
                .collect(),
            taps: self
                .taps
                .iter()
                .map(|t| Tap {
                    block: t.block,
                    stride: t.stride,
                    conv: t.conv.zeros_like(),
                    upsamplers: t.upsamplers.iter().map(Conv::zeros_like).collect(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    fn block_prefix(b: &ResidualBlock) -> String {
        format!("stage{}.block{}", b.stage + 1, b.index_in_stage)
    }

    /// Every parameter array with its stable name, in a fixed traversal order.
    pub fn named_params(&self) -> Vec<(String, &ParamArray)> {
        fn push_conv<'a>(out: &mut Vec<(String, &'a ParamArray)>, prefix: String, c: &'a Conv) {
            out.push((format!("{prefix}.weight"), &c.weight));
            out.push((format!("{prefix}.bias"), &c.bias));
        }
        let mut out = Vec::new();
        push_conv(&mut out, "stem".into(), &self.stem);
        for b in &self.blocks {
            let p = Self::block_prefix(b);
            push_conv(&mut out, format!("{p}.reduce"), &b.reduce);
            push_conv(&mut out, format!("{p}.spatial"), &b.spatial);
            push_conv(&mut out, format!("{p}.expand"), &b.expand);
            if let Some(s) = &b.shortcut {
                push_conv(&mut out, format!("{p}.shortcut"), s);
            }
            out.push((format!("{p}.se.reduce.weight"), &b.se.reduce_weight));
            out.push((format!("{p}.se.reduce.bias"), &b.se.reduce_bias));
            out.push((format!("{p}.se.expand.weight"), &b.se.expand_weight));
            out.push((format!("{p}.se.expand.bias"), &b.se.expand_bias));
        }
        for (i, t) in self.taps.iter().enumerate() {
            push_conv(&mut out, format!("tap{i}.conv"), &t.conv);
            for (j, u) in t.upsamplers.iter().enumerate() {
                push_conv(&mut out, format!("tap{i}.up{j}"), u);
            }
        }
        push_conv(&mut out, "head".into(), &self.head);
        out
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint payload precision.
    pub fn round_to_f32(&mut self) {
        for (_, p) in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Mutable counterpart of [`ModelParams::named_params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut ParamArray)> {
        fn push_conv<'a>(out: &mut Vec<(String, &'a mut ParamArray)>, prefix: String, c: &'a mut Conv) {
            out.push((format!("{prefix}.weight"), &mut c.weight));
            out.push((format!("{prefix}.bias"), &mut c.bias));
        }
        let mut out = Vec::new();
        push_conv(&mut out, "stem".into(), &mut self.stem);
        for b in &mut self.blocks {
            let p = Self::block_prefix(b);
            push_conv(&mut out, format!("{p}.reduce"), &mut b.reduce);
            push_conv(&mut out, format!("{p}.spatial"), &mut b.spatial);
            push_conv(&mut out, format!("{p}.expand"), &mut b.expand);
            if let Some(s) = &mut b.shortcut {
                push_conv(&mut out, format!("{p}.shortcut"), s);
            }
            out.push((format!("{p}.se.reduce.weight"), &mut b.se.reduce_weight));
            out.push((format!("{p}.se.reduce.bias"), &mut b.se.reduce_bias));
            out.push((format!("{p}.se.expand.weight"), &mut b.se.expand_weight));
            out.push((format!("{p}.se.expand.bias"), &mut b.se.expand_bias));
        }
        for (i, t) in self.taps.iter_mut().enumerate() {
            push_conv(&mut out, format!("tap{i}.conv"), &mut t.conv);
            for (j, u) in t.upsamplers.iter_mut().enumerate() {
                push_conv(&mut out, format!("tap{i}.up{j}"), u);
            }
        }
        push_conv(&mut out, "head".into(), &mut self.head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn se_block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn upsampler_chain_count(&self) -> usize {
        self.taps.iter().filter(|t| !t.upsamplers.is_empty()).count()
    }
}

/// Squeeze (spatial mean per channel), excite (`sigmoid(W2 relu(W1 z + b1) + b2)`)
/// and rescale each channel by its gate.
pub fn se_block_forward(features: &FeatureMap, params: &SeParams) -> Result<FeatureMap> {
    if features.channels != params.channels {
        return Err(Error::Shape(format!(
            "SE block expects {} channels, got {}",
            params.channels, features.channels
        )));
    }
    Ok(graph::se_forward(features, params).0)
}

/// 3x3 same-padding convolution to `k` channels followed by rectification.
pub fn tap_forward(stage_features: &FeatureMap, conv: &Conv) -> Result<FeatureMap> {
    if stage_features.channels != conv.geom.in_ch {
        return Err(Error::Shape(format!(
            "tap expects {} channels, got {}",
            conv.geom.in_ch, stage_features.channels
        )));
    }
    let mut t = ops::conv2d_forward(stage_features, &conv.weight.data, &conv.bias.data, conv.geom);
    ops::relu_inplace(&mut t);
    Ok(t)
}

/// Chain of `log2(stage_stride)` stride-2 transposed convolutions with
/// rectification between steps (none after the last).
pub fn upsample_to_input(tap: &FeatureMap, stage_stride: usize, upsamplers: &[Conv]) -> Result<FeatureMap> {
    let steps = doubling_steps(stage_stride)?;
    if upsamplers.len() != steps {
        return Err(Error::Config(format!(
            "stride {stage_stride} needs {steps} upsamplers, got {}",
            upsamplers.len()
        )));
    }
    if let Some(u) = upsamplers.iter().find(|u| u.geom.in_ch != tap.channels) {
        return Err(Error::Shape(format!(
            "upsampler expects {} channels, got {}",
            u.geom.in_ch, tap.channels
        )));
    }
    Ok(graph::upsample(tap, upsamplers, None))
}

pub(crate) fn check_input(model: &ModelParams, stack: &InputStack) -> Result<()> {
    let (h, w) = (stack.height, stack.width);
    if stack.channels.len() != model.config.input_channels * h * w {
        return Err(Error::Shape(format!(
            "input holds {} values, expected {} channels of {h}x{w}",
            stack.channels.len(),
            model.config.input_channels
        )));
    }
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Evaluates the network on one 2.5D stack.
pub fn forward(model: &ModelParams, stack: &InputStack) -> Result<ProbabilityMap> {
    check_input(model, stack)?;
    let values = graph::run(model, stack);
    Ok(ProbabilityMap {
        height: stack.height,
        width: stack.width,
        values,
        exam_id: stack.exam_id.clone(),
        slice_index: stack.center_index,
    })
}
