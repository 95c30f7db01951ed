//! Decoder building blocks: the channel-attention skip gate, one decoder
//! stage, and the depth and log-variance heads.
//!
//! Parameter groups are generic over their leaf type `P`. The model keeps a
//! `usize` layout (indices into its parameter store) and maps it to `Var`s
//! once per tape; initialization produces `Tensor` groups.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::{sage_forward, Aggregator};
use crate::graph::{GraphSpec, GridCache};
use crate::tensor::{Tape, Tensor, Var};

/// Squeeze ratio of the attention bottleneck.
pub const ATTENTION_REDUCTION: usize = 16;

/// Clamp bounds on predicted log-variance.
pub const LOG_VAR_BOUND: f64 = 10.0;

/// Depth logits are clamped here so the scaled sigmoid stays strictly inside
/// `(0, max_depth)` in floating point.
pub const DEPTH_LOGIT_BOUND: f64 = 30.0;

/// Hidden width of the attention MLP. Channel counts not divisible by the
/// reduction round the width up.
pub fn attention_hidden(channels: usize) -> usize {
    channels.div_ceil(ATTENTION_REDUCTION).max(1)
}

/// `w1: hidden x C`, `w2: C x hidden` with their biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P = Tensor> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn leaves(&self) -> Vec<&P> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

impl AttentionParams<Tensor> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let hidden = attention_hidden(channels);
        let bound = (6.0 / (channels + hidden) as f64).sqrt();
        AttentionParams {
            w1: Tensor::from_fn(&[hidden, channels], |_| rng.random_range(-bound..bound)),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_fn(&[channels, hidden], |_| rng.random_range(-bound..bound)),
            b2: Tensor::zeros(&[channels]),
        }
    }
}

/// 3x3 convolution kernel `out x in x 3 x 3` and bias `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P = Tensor> {
    pub kernel: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }
}

impl ConvParams<Tensor> {
    /// He-uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_channels * 9) as f64).sqrt();
        ConvParams {
            kernel: Tensor::from_fn(&[out_channels, in_channels, 3, 3], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[out_channels]),
        }
    }
}

/// Linear map of a SAGE layer, `weight: out x 2·in`.
#[derive(Clone, Debug, PartialEq)]
pub struct SageParams<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

impl<P> SageParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SageParams<Q> {
        SageParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Feature transform applied after the skip merge.
#[derive(Clone, Debug, PartialEq)]
pub enum StageTransform<P = Tensor> {
    Sage(SageParams<P>),
    Conv(ConvParams<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<P = Tensor> {
    /// `None` merges by plain concatenation.
    pub attention: Option<AttentionParams<P>>,
    pub transform: StageTransform<P>,
}

impl<P> StageParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> StageParams<Q> {
        StageParams {
            attention: self.attention.as_ref().map(|a| a.map(&mut f)),
            transform: match &self.transform {
                StageTransform::Sage(s) => StageTransform::Sage(s.map(&mut f)),
                StageTransform::Conv(c) => StageTransform::Conv(c.map(&mut f)),
            },
        }
    }
}

/// Depth and optional log-variance convolutions over the last decoder map.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P = Tensor> {
    pub depth: ConvParams<P>,
    pub uncertainty: Option<ConvParams<P>>,
}

impl<P> HeadParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> HeadParams<Q> {
        HeadParams {
            depth: self.depth.map(&mut f),
            uncertainty: self.uncertainty.as_ref().map(|u| u.map(&mut f)),
        }
    }
}

/// Graph construction shared by every GNN site of a forward pass.
pub struct GraphContext<'a> {
    pub spec: GraphSpec,
    pub aggregator: Aggregator,
    pub cache: &'a GridCache,
}

/// Where graph reasoning ran during one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    /// Height of every map a SAGE layer was applied to, in call order.
    pub gnn_heights: Vec<usize>,
    pub sage_calls: usize,
}

impl ForwardTrace {
    /// Resolution denominators (`input_height / map_height`) of the GNN sites.
    pub fn gnn_scales(&self, input_height: usize) -> Vec<usize> {
        self.gnn_heights.iter().map(|&h| input_height / h).collect()
    }
}

/// Applies one SAGE layer with a graph built over `x` and records the call.
pub fn graph_layer(
    tape: &mut Tape,
    x: Var,
    params: &SageParams<Var>,
    graphs: &GraphContext<'_>,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let graph = graphs.spec.build(tape.value(x), graphs.cache)?;
    let out = sage_forward(tape, x, &graph, params.weight, params.bias, graphs.aggregator)?;
    trace.gnn_heights.push(tape.shape(x)[2]);
    trace.sage_calls += 1;
    Ok(out)
}

/// 3x3 convolution with padding 1 followed by relu.
pub fn conv_relu(tape: &mut Tape, x: Var, params: &ConvParams<Var>, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, params.kernel, params.bias, stride, 1)?;
    tape.relu(y)
}

/// `sigmoid(W2 · relu(W1 · GAP(X) + b1) + b2) ⊙ X`, gated per channel.
pub fn channel_attention(tape: &mut Tape, x: Var, params: &AttentionParams<Var>) -> Result<Var> {
    let [b, c, _, _] = tape.value(x).dims4()?;
    let [_, w1_in] = tape.value(params.w1).dims2()?;
    let [w2_out, _] = tape.value(params.w2).dims2()?;
    if w1_in != c || w2_out != c {
        return Err(Error::config(format!(
            "attention parameters sized for {w1_in}/{w2_out} channels, input has {c}"
        )));
    }
    let pooled = tape.global_avg_pool(x)?;
    let squeezed = tape.reshape(pooled, &[b, c])?;
    let hidden = tape.linear(squeezed, params.w1, params.b1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.linear(hidden, params.w2, params.b2)?;
    let gate = tape.sigmoid(logits)?;
    tape.mul_channel(x, gate)
}

/// Decoder stage `l` (1-based): upsample, merge the skip, transform.
///
/// The transform kind is fixed by `params`; the model decides which stages
/// carry SAGE layers.
pub fn decoder_stage(
    tape: &mut Tape,
    g_prev: Var,
    skip: Var,
    stage: usize,
    params: &StageParams<Var>,
    graphs: &GraphContext<'_>,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let d = tape.upsample2x(g_prev)?;
    let [bd, _, hd, wd] = tape.value(d).dims4()?;
    let [bs, _, hs, ws] = tape.value(skip).dims4()?;
    if (bd, hd, wd) != (bs, hs, ws) {
        return Err(Error::usage(format!(
            "decoder stage {stage}: upsampled map is {bd}x{hd}x{wd} but skip is {bs}x{hs}x{ws}"
        )));
    }
    let merged = tape.concat_channels(&[d, skip])?;
    let s = match &params.attention {
        Some(a) => channel_attention(tape, merged, a)?,
        None => merged,
    };
    match &params.transform {
        StageTransform::Sage(p) => graph_layer(tape, s, p, graphs, trace),
        StageTransform::Conv(p) => conv_relu(tape, s, p, 1),
    }
}

/// Full-resolution outputs of the heads, each `B x 1 x H x W`.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub depth: Var,
    /// Log-variance `s = log σ²`; absent when the uncertainty head is off.
    pub log_var: Option<Var>,
}

/// Heads over the 1/4-resolution decoder output, upsampled by `upscale`.
pub fn heads(tape: &mut Tape, g3: Var, params: &HeadParams<Var>, max_depth: f64, upscale: usize) -> Result<Prediction> {
    if !(max_depth > 0.0 && max_depth.is_finite()) {
        return Err(Error::config(format!("max_depth must be positive, got {max_depth}")));
    }
    let z = tape.conv2d(g3, params.depth.kernel, params.depth.bias, 1, 1)?;
    let z = tape.clamp(z, -DEPTH_LOGIT_BOUND, DEPTH_LOGIT_BOUND)?;
    let z = tape.sigmoid(z)?;
    let z = tape.scale(z, max_depth)?;
    let depth = tape.upsample_bilinear(z, upscale)?;
    let log_var = match &params.uncertainty {
        Some(u) => {
            let s = tape.conv2d(g3, u.kernel, u.bias, 1, 1)?;
            let s = tape.clamp(s, -LOG_VAR_BOUND, LOG_VAR_BOUND)?;
            Some(tape.upsample_bilinear(s, upscale)?)
        }
        None => None,
    };
    Ok(Prediction { depth, log_var })
}
