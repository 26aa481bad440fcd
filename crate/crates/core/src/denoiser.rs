//! The x0-prediction network: a 1-D convolutional net over the horizon axis
//! with residual stages, sinusoidal timestep conditioning, and optional
//! self-attention.
//!
//! The horizon is 3 to 6 steps, so there is no down/up-sampling; every stage
//! works at full length and the skip structure lives inside the residual
//! blocks. A residual block is [norm -> SiLU -> conv k3] twice, with the
//! projected timestep embedding added after the first conv and an identity
//! (or 1x1 conv) shortcut. Norms are per-position layer norms over the
//! channel axis. When attention is enabled, each stage ends with one
//! residual self-attention block over the horizon positions.
//!
//! Parameters enumerate in a fixed order under stable dotted names; the
//! initialization draws follow the same order, so a seed pins every weight.

use crate::error::{Error, Result};
use crate::plan::PlanMatrix;
use crate::tensor::{OpKind, Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Epsilon inside every layer norm.
pub const NORM_EPS: f64 = 1e-5;

/// Architecture knobs. Parameter count is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Plan-matrix width C+A+O; both the input and output channel count.
    pub input_width: usize,
    /// Plan length T; forwards reject any other length.
    pub horizon: usize,
    /// Hidden width per residual stage; one stage per entry.
    pub channels: Vec<usize>,
    /// Sinusoidal embedding width; must be even.
    pub time_embed_dim: usize,
    pub attention_enabled: bool,
}

impl DenoiserConfig {
    /// Desk-scale default: three stages of 64/128/256 channels, 64-dim
    /// timestep embedding, attention on.
    pub fn desk_default(input_width: usize, horizon: usize) -> Self {
        DenoiserConfig {
            input_width,
            horizon,
            channels: vec![64, 128, 256],
            time_embed_dim: 64,
            attention_enabled: true,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("denoiser input width must be positive".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config(format!(
                "denoiser horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("denoiser needs at least one stage".into()));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c == 0) {
            return Err(Error::Config(format!("stage width must be positive, got {}", c)));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dim must be even and at least 2 for sin/cos pairing, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position code of step `n`: `[sin(n w_i) | cos(n w_i)]` with
/// frequencies log-spaced from 1 down to 1/10000. `n = 0` gives zeros in the
/// sin half and ones in the cos half.
pub fn sinusoidal_embedding(n: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dim must be even and at least 2 for sin/cos pairing, got {}",
            dim
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half == 1 { 0.0 } else { i as f64 / (half - 1) as f64 };
        let freq = (-(10_000.0f64).ln() * exponent).exp();
        let angle = n as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Linear {
    /// `[in, out]`.
    w: Tensor,
    /// `[out]`.
    b: Tensor,
}

#[derive(Debug, Clone)]
struct Conv {
    /// `[out, in, k]`.
    w: Tensor,
    /// `[out]`.
    b: Tensor,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: Tensor,
    beta: Tensor,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    /// 1x1 conv when the channel count changes, identity otherwise.
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    /// 1x1 conv producing stacked query/key/value channels.
    qkv: Conv,
}

/// Initialization stream: weights `N(0, 1/sqrt(fan_in))`, biases zero,
/// norm scales one. Draw order follows the parameter enumeration order.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn scaled(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::randn(shape, &mut self.rng);
        for v in t.data_mut() {
            *v *= scale;
        }
        t.requires_grad(true)
    }

    fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> Conv {
        Conv {
            w: self.scaled(&[c_out, c_in, k], c_in * k),
            b: Tensor::zeros(&[c_out]).requires_grad(true),
        }
    }

    fn conv_zero(&mut self, c_out: usize, c_in: usize, k: usize) -> Conv {
        Conv {
            w: Tensor::zeros(&[c_out, c_in, k]).requires_grad(true),
            b: Tensor::zeros(&[c_out]).requires_grad(true),
        }
    }

    fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.scaled(&[d_in, d_out], d_in),
            b: Tensor::zeros(&[d_out]).requires_grad(true),
        }
    }

    fn norm(&mut self, c: usize) -> Norm {
        Norm {
            gamma: Tensor::full(&[c], 1.0).requires_grad(true),
            beta: Tensor::zeros(&[c]).requires_grad(true),
        }
    }
}

/// The network. Immutable during inference; training rewrites parameters
/// through [`Denoiser::params_mut`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_mlp: [Linear; 2],
    in_conv: Conv,
    stages: Vec<(ResBlock, Option<AttnBlock>)>,
    out_norm: Norm,
    out_conv: Conv,
}

/// Handles from one recorded forward pass: the output value plus every
/// parameter's tape id, aligned with [`Denoiser::params`] order.
pub struct ForwardRun {
    pub output: ValueId,
    pub param_ids: Vec<ValueId>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.time_embed_dim;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let time_mlp = [init.linear(d, d), init.linear(d, d)];
        let in_conv = init.conv(config.channels[0], config.input_width, 3);
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut c_in = config.channels[0];
        for &c_out in &config.channels {
            let res = ResBlock {
                norm1: init.norm(c_in),
                conv1: init.conv(c_out, c_in, 3),
                time: init.linear(d, c_out),
                norm2: init.norm(c_out),
                conv2: init.conv(c_out, c_out, 3),
                skip: (c_in != c_out).then(|| init.conv(c_out, c_in, 1)),
            };
            let attn = config.attention_enabled.then(|| AttnBlock { qkv: init.conv(3 * c_out, c_out, 1) });
            stages.push((res, attn));
            c_in = c_out;
        }
        let out_norm = init.norm(c_in);
        // zero-init head: the untrained net predicts exactly zero
        let out_conv = init.conv_zero(config.input_width, c_in, 1);
        Ok(Denoiser { config, time_mlp, in_conv, stages, out_norm, out_conv })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Stable (name, tensor) enumeration of every parameter.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.time_mlp.iter().enumerate() {
            out.push((format!("time_mlp.{}.w", i), &l.w));
            out.push((format!("time_mlp.{}.b", i), &l.b));
        }
        out.push(("in_conv.w".into(), &self.in_conv.w));
        out.push(("in_conv.b".into(), &self.in_conv.b));
        for (i, (res, attn)) in self.stages.iter().enumerate() {
            let p = format!("stages.{}", i);
            out.push((format!("{}.res.norm1.gamma", p), &res.norm1.gamma));
            out.push((format!("{}.res.norm1.beta", p), &res.norm1.beta));
            out.push((format!("{}.res.conv1.w", p), &res.conv1.w));
            out.push((format!("{}.res.conv1.b", p), &res.conv1.b));
            out.push((format!("{}.res.time.w", p), &res.time.w));
            out.push((format!("{}.res.time.b", p), &res.time.b));
            out.push((format!("{}.res.norm2.gamma", p), &res.norm2.gamma));
            out.push((format!("{}.res.norm2.beta", p), &res.norm2.beta));
            out.push((format!("{}.res.conv2.w", p), &res.conv2.w));
            out.push((format!("{}.res.conv2.b", p), &res.conv2.b));
            if let Some(skip) = &res.skip {
                out.push((format!("{}.res.skip.w", p), &skip.w));
                out.push((format!("{}.res.skip.b", p), &skip.b));
            }
            if let Some(a) = attn {
                out.push((format!("{}.attn.qkv.w", p), &a.qkv.w));
                out.push((format!("{}.attn.qkv.b", p), &a.qkv.b));
            }
        }
        out.push(("out_norm.gamma".into(), &self.out_norm.gamma));
        out.push(("out_norm.beta".into(), &self.out_norm.beta));
        out.push(("out_conv.w".into(), &self.out_conv.w));
        out.push(("out_conv.b".into(), &self.out_conv.b));
        out
    }

    /// Mutable view in the same order as [`Denoiser::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.time_mlp.iter_mut().enumerate() {
            out.push((format!("time_mlp.{}.w", i), &mut l.w));
            out.push((format!("time_mlp.{}.b", i), &mut l.b));
        }
        out.push(("in_conv.w".into(), &mut self.in_conv.w));
        out.push(("in_conv.b".into(), &mut self.in_conv.b));
        for (i, (res, attn)) in self.stages.iter_mut().enumerate() {
            let p = format!("stages.{}", i);
            out.push((format!("{}.res.norm1.gamma", p), &mut res.norm1.gamma));
            out.push((format!("{}.res.norm1.beta", p), &mut res.norm1.beta));
            out.push((format!("{}.res.conv1.w", p), &mut res.conv1.w));
            out.push((format!("{}.res.conv1.b", p), &mut res.conv1.b));
            out.push((format!("{}.res.time.w", p), &mut res.time.w));
            out.push((format!("{}.res.time.b", p), &mut res.time.b));
            out.push((format!("{}.res.norm2.gamma", p), &mut res.norm2.gamma));
            out.push((format!("{}.res.norm2.beta", p), &mut res.norm2.beta));
            out.push((format!("{}.res.conv2.w", p), &mut res.conv2.w));
            out.push((format!("{}.res.conv2.b", p), &mut res.conv2.b));
            if let Some(skip) = &mut res.skip {
                out.push((format!("{}.res.skip.w", p), &mut skip.w));
                out.push((format!("{}.res.skip.b", p), &mut skip.b));
            }
            if let Some(a) = attn {
                out.push((format!("{}.attn.qkv.w", p), &mut a.qkv.w));
                out.push((format!("{}.attn.qkv.b", p), &mut a.qkv.b));
            }
        }
        out.push(("out_norm.gamma".into(), &mut self.out_norm.gamma));
        out.push(("out_norm.beta".into(), &mut self.out_norm.beta));
        out.push(("out_conv.w".into(), &mut self.out_conv.w));
        out.push(("out_conv.b".into(), &mut self.out_conv.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// The conditioned timestep embedding (sinusoid through the two-layer
    /// projection), evaluated outside any training tape.
    pub fn time_embed(&self, n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let base = sinusoidal_embedding(n, self.config.time_embed_dim)?;
        let id = tape.constant(Tensor::new(&[1, self.config.time_embed_dim], base)?);
        let out = self.time_mlp_forward(&mut tape, id, &mut Vec::new())?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Records the full network on `tape` for a `[B, W, T]` batch at the
    /// given per-example steps. Leafs every parameter and returns the ids.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        steps: &[usize],
    ) -> Result<ForwardRun> {
        let (w, t) = (self.config.input_width, self.config.horizon);
        if x.rank() != 3 || x.shape()[1] != w || x.shape()[2] != t {
            return Err(Error::shape(
                "denoiser",
                format!("expected input [B, {}, {}], got {:?}", w, t, x.shape()),
            ));
        }
        let batch = x.shape()[0];
        if batch == 0 || steps.len() != batch {
            return Err(Error::shape(
                "denoiser",
                format!("batch of {} examples got {} steps", batch, steps.len()),
            ));
        }

        let mut param_ids = Vec::new();
        let d = self.config.time_embed_dim;
        let mut sin = Vec::with_capacity(batch * d);
        for &n in steps {
            sin.extend(sinusoidal_embedding(n, d)?);
        }
        let sin_id = tape.constant(Tensor::new(&[batch, d], sin)?);
        let x_id = tape.constant(x.clone());

        // parameter leafing below follows params() order exactly
        let temb = self.time_mlp_forward(tape, sin_id, &mut param_ids)?;
        let in_conv = leaf_conv(tape, &self.in_conv, &mut param_ids);
        let mut h = conv_apply(tape, &in_conv, x_id)?;
        for (res, attn) in &self.stages {
            h = res_apply(tape, res, h, temb, &mut param_ids)?;
            if let Some(a) = attn {
                h = attn_apply(tape, a, h, &mut param_ids)?;
            }
        }
        let out_norm = leaf_norm(tape, &self.out_norm, &mut param_ids);
        h = norm_apply(tape, &out_norm, h)?;
        h = tape.forward_op(OpKind::Silu, &[h])?;
        let out_conv = leaf_conv(tape, &self.out_conv, &mut param_ids);
        let output = conv_apply(tape, &out_conv, h)?;
        Ok(ForwardRun { output, param_ids })
    }

    /// Denoises one plan matrix at step `n` without recording gradients.
    pub fn predict_x0(&self, x_n: &PlanMatrix, n: usize) -> Result<PlanMatrix> {
        let dims = *x_n.dims();
        if dims.width() != self.config.input_width || dims.horizon != self.config.horizon {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "plan is {}x{} but the network expects {}x{}",
                    dims.horizon,
                    dims.width(),
                    self.config.horizon,
                    self.config.input_width
                ),
            ));
        }
        if n == 0 {
            return Err(Error::Config("denoiser steps start at 1".into()));
        }
        let (w, t) = (dims.width(), dims.horizon);
        // [T, W] row-major -> [1, W, T]
        let mut buf = vec![0.0; w * t];
        for row in 0..t {
            for col in 0..w {
                buf[col * t + row] = x_n.data()[row * w + col];
            }
        }
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, w, t], buf)?;
        let run = self.forward_batch(&mut tape, &x, &[n])?;
        let out = tape.value(run.output).data();
        let mut plan = vec![0.0; t * w];
        for row in 0..t {
            for col in 0..w {
                plan[row * w + col] = out[col * t + row];
            }
        }
        PlanMatrix::from_tensor(&dims, Tensor::new(&[t, w], plan)?)
    }

    fn time_mlp_forward(
        &self,
        tape: &mut Tape,
        sin_id: ValueId,
        param_ids: &mut Vec<ValueId>,
    ) -> Result<ValueId> {
        let l0 = leaf_linear(tape, &self.time_mlp[0], param_ids);
        let l1 = leaf_linear(tape, &self.time_mlp[1], param_ids);
        let h = linear_apply(tape, &l0, sin_id)?;
        let h = tape.forward_op(OpKind::Silu, &[h])?;
        linear_apply(tape, &l1, h)
    }
}

struct ConvIds {
    w: ValueId,
    b: ValueId,
}

struct LinearIds {
    w: ValueId,
    b: ValueId,
}

struct NormIds {
    gamma: ValueId,
    beta: ValueId,
}

fn leaf_conv(tape: &mut Tape, conv: &Conv, param_ids: &mut Vec<ValueId>) -> ConvIds {
    let w = tape.leaf(conv.w.clone());
    let b = tape.leaf(conv.b.clone());
    param_ids.push(w);
    param_ids.push(b);
    ConvIds { w, b }
}

fn leaf_linear(tape: &mut Tape, linear: &Linear, param_ids: &mut Vec<ValueId>) -> LinearIds {
    let w = tape.leaf(linear.w.clone());
    let b = tape.leaf(linear.b.clone());
    param_ids.push(w);
    param_ids.push(b);
    LinearIds { w, b }
}

fn leaf_norm(tape: &mut Tape, norm: &Norm, param_ids: &mut Vec<ValueId>) -> NormIds {
    let gamma = tape.leaf(norm.gamma.clone());
    let beta = tape.leaf(norm.beta.clone());
    param_ids.push(gamma);
    param_ids.push(beta);
    NormIds { gamma, beta }
}

fn conv_apply(tape: &mut Tape, ids: &ConvIds, x: ValueId) -> Result<ValueId> {
    let y = tape.forward_op(OpKind::Conv1d, &[x, ids.w])?;
    tape.forward_op(OpKind::Add, &[y, ids.b])
}

fn linear_apply(tape: &mut Tape, ids: &LinearIds, x: ValueId) -> Result<ValueId> {
    let y = tape.forward_op(OpKind::Matmul, &[x, ids.w])?;
    tape.forward_op(OpKind::Add, &[y, ids.b])
}

/// Channel layer norm at each horizon position: transpose to put channels
/// last, normalize, transpose back.
fn norm_apply(tape: &mut Tape, ids: &NormIds, x: ValueId) -> Result<ValueId> {
    let xt = tape.forward_op(OpKind::TransposeLast, &[x])?;
    let normed = tape.forward_op(OpKind::LayerNorm { eps: NORM_EPS }, &[xt, ids.gamma, ids.beta])?;
    tape.forward_op(OpKind::TransposeLast, &[normed])
}

fn res_apply(
    tape: &mut Tape,
    res: &ResBlock,
    x: ValueId,
    temb: ValueId,
    param_ids: &mut Vec<ValueId>,
) -> Result<ValueId> {
    let norm1 = leaf_norm(tape, &res.norm1, param_ids);
    let conv1 = leaf_conv(tape, &res.conv1, param_ids);
    let time = leaf_linear(tape, &res.time, param_ids);
    let norm2 = leaf_norm(tape, &res.norm2, param_ids);
    let conv2 = leaf_conv(tape, &res.conv2, param_ids);
    let skip = res.skip.as_ref().map(|s| leaf_conv(tape, s, param_ids));

    let mut h = norm_apply(tape, &norm1, x)?;
    h = tape.forward_op(OpKind::Silu, &[h])?;
    h = conv_apply(tape, &conv1, h)?;
    let tproj = linear_apply(tape, &time, temb)?;
    h = tape.forward_op(OpKind::Add, &[h, tproj])?;
    h = norm_apply(tape, &norm2, h)?;
    h = tape.forward_op(OpKind::Silu, &[h])?;
    h = conv_apply(tape, &conv2, h)?;
    let shortcut = match &skip {
        Some(ids) => conv_apply(tape, ids, x)?,
        None => x,
    };
    tape.forward_op(OpKind::Add, &[h, shortcut])
}

fn attn_apply(
    tape: &mut Tape,
    attn: &AttnBlock,
    x: ValueId,
    param_ids: &mut Vec<ValueId>,
) -> Result<ValueId> {
    let qkv_ids = leaf_conv(tape, &attn.qkv, param_ids);
    Ok(attention_forward(tape, x, qkv_ids.w, qkv_ids.b)?.output)
}

/// Output and attention-weight handles of one attention block.
pub struct AttentionRun {
    /// Same shape as the block input.
    pub output: ValueId,
    /// `[B, T, T]`; row t holds position t's weights over key positions.
    pub weights: ValueId,
}

/// Residual self-attention over horizon positions: queries/keys/values from
/// one 1x1 conv (`qkv_w` `[3C, C, 1]`, `qkv_b` `[3C]`), scores scaled by
/// 1/sqrt(C), softmax over key positions, output added back onto the input.
pub fn attention_forward(
    tape: &mut Tape,
    x: ValueId,
    qkv_w: ValueId,
    qkv_b: ValueId,
) -> Result<AttentionRun> {
    let c = tape.value(x).shape()[1];
    let ids = ConvIds { w: qkv_w, b: qkv_b };
    let qkv = conv_apply(tape, &ids, x)?;
    let q = tape.forward_op(OpKind::Slice { axis: 1, start: 0, end: c }, &[qkv])?;
    let k = tape.forward_op(OpKind::Slice { axis: 1, start: c, end: 2 * c }, &[qkv])?;
    let v = tape.forward_op(OpKind::Slice { axis: 1, start: 2 * c, end: 3 * c }, &[qkv])?;
    let qt = tape.forward_op(OpKind::TransposeLast, &[q])?;
    let scores = tape.forward_op(OpKind::Matmul, &[qt, k])?;
    let scaled = tape.forward_op(OpKind::Scale(1.0 / (c as f64).sqrt()), &[scores])?;
    let weights = tape.forward_op(OpKind::Softmax, &[scaled])?;
    let weights_t = tape.forward_op(OpKind::TransposeLast, &[weights])?;
    let out = tape.forward_op(OpKind::Matmul, &[v, weights_t])?;
    let output = tape.forward_op(OpKind::Add, &[x, out])?;
    Ok(AttentionRun { output, weights })
}
