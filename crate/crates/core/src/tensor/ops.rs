//! Op kinds with forward evaluation and reverse-mode gradient rules.
//!
//! Conventions:
//! - rank-3 activations are laid out `[batch, channels, length]`, row-major;
//! - `matmul` accepts `[m,k]x[k,n]` or batched `[b,m,k]x[b,k,n]`;
//! - `conv1d` is stride 1 with zero padding `(k-1)/2`, odd kernels only, so
//!   the length axis is preserved;
//! - reductions (`sum`, `mean`, `mse`, `cross_entropy`) produce rank-0 scalars.
//!
//! Backward rules recompute cheap intermediates (norm statistics, softmax
//! sums) instead of caching them on the tape.

use super::Tensor;
use crate::error::{Error, Result};

/// Operation attached to a tape node.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// Elementwise sum. The rhs may also be a bias broadcast along non-channel
    /// axes: `[b,c,t] + [c]`, `[b,c,t] + [b,c]`, or `[b,d] + [d]`.
    Add,
    /// Elementwise difference, same shapes only.
    Sub,
    /// Hadamard product, same shapes only.
    Mul,
    /// Multiplication by a compile-time-known constant.
    Scale(f64),
    Matmul,
    /// Swap the last two axes (rank >= 2).
    TransposeLast,
    /// `(x [b,cin,t], w [cout,cin,k])` -> `[b,cout,t]`.
    Conv1d,
    /// `(x [b,c,t], gamma [c], beta [c])`; statistics per (batch, group).
    GroupNorm { groups: usize, eps: f64 },
    /// `(x [.., d], gamma [d], beta [d])`; statistics over the last axis.
    LayerNorm { eps: f64 },
    /// Softmax over the last axis.
    Softmax,
    Silu,
    Mish,
    Relu,
    /// `(a, b)` -> scalar mean of squared differences.
    Mse,
    Sum,
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Clamp { lo: f64, hi: f64 },
    /// `(table [v,d])` -> `[indices.len(), d]`, rows gathered by index.
    Embedding { indices: Vec<usize> },
    /// `(logits [b,c])` -> scalar mean negative log-likelihood.
    CrossEntropy { targets: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Matmul => "matmul",
            OpKind::TransposeLast => "transpose_last",
            OpKind::Conv1d => "conv1d",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Silu => "silu",
            OpKind::Mish => "mish",
            OpKind::Relu => "relu",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Embedding { .. } => "embedding",
            OpKind::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// `c[m,n] = alpha * a x b + beta * c`, all row-major. `a_t`/`b_t` treat the
/// stored buffer as the transpose of the logical operand: with `a_t` the
/// buffer holds `[k,m]`, with `b_t` it holds `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` at `axis` into `(outer, shape[axis], inner)`.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(super) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity_err = |want: &str| {
        Err(Error::shape(
            kind_name_static(kind),
            format!("expected {} inputs, got {}", want, inputs.len()),
        ))
    };
    match kind {
        OpKind::Add => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            forward_add(inputs[0], inputs[1])
        }
        OpKind::Sub | OpKind::Mul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    kind_name_static(kind),
                    format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let data = match kind {
                OpKind::Sub => a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                _ => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            };
            Tensor::new(a.shape(), data)
        }
        OpKind::Scale(f) => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|v| f * v).collect())
        }
        OpKind::Matmul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            forward_matmul(inputs[0], inputs[1])
        }
        OpKind::TransposeLast => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            forward_transpose_last(inputs[0])
        }
        OpKind::Conv1d => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            forward_conv1d(inputs[0], inputs[1])
        }
        OpKind::GroupNorm { groups, eps } => {
            if inputs.len() != 3 {
                return arity_err("3");
            }
            forward_group_norm(inputs[0], inputs[1], inputs[2], *groups, *eps)
        }
        OpKind::LayerNorm { eps } => {
            if inputs.len() != 3 {
                return arity_err("3");
            }
            forward_layer_norm(inputs[0], inputs[1], inputs[2], *eps)
        }
        OpKind::Softmax => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            forward_softmax(inputs[0])
        }
        OpKind::Silu | OpKind::Mish | OpKind::Relu => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .map(|&v| match kind {
                    OpKind::Silu => silu(v),
                    OpKind::Mish => v * softplus(v).tanh(),
                    _ => v.max(0.0),
                })
                .collect();
            Tensor::new(x.shape(), data)
        }
        OpKind::Mse => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "mse",
                    format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            if a.numel() == 0 {
                return Err(Error::shape("mse", "empty input".to_string()));
            }
            let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Ok(Tensor::scalar(sum / a.numel() as f64))
        }
        OpKind::Sum => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        OpKind::Mean => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(Error::shape("mean", "empty input".to_string()));
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
        }
        OpKind::Concat { axis } => forward_concat(inputs, *axis),
        OpKind::Slice { axis, start, end } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            forward_slice(inputs[0], *axis, *start, *end)
        }
        OpKind::Clamp { lo, hi } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            // also rejects NaN bounds, which fail every comparison
            if lo.partial_cmp(hi) != Some(std::cmp::Ordering::Less)
                && lo.partial_cmp(hi) != Some(std::cmp::Ordering::Equal)
            {
                return Err(Error::shape("clamp", format!("lo {} > hi {}", lo, hi)));
            }
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|v| v.clamp(*lo, *hi)).collect())
        }
        OpKind::Embedding { indices } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            forward_embedding(inputs[0], indices)
        }
        OpKind::CrossEntropy { targets } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            forward_cross_entropy(inputs[0], targets)
        }
    }
}

fn kind_name_static(kind: &OpKind) -> &'static str {
    kind.name()
}

/// Broadcast pattern of an `add`, resolved once and shared by both passes.
enum AddPattern {
    Same,
    /// rhs is `[c]` against lhs `[b,c,t]`: repeat `inner` times per channel,
    /// cycle through `outer` batches. Also covers `[b,d] + [d]` with inner=1.
    ChannelBias { outer: usize, channels: usize, inner: usize },
    /// rhs is `[b,c]` against lhs `[b,c,t]`.
    PerBatchChannel { rows: usize, inner: usize },
}

fn add_pattern(a: &Tensor, b: &Tensor) -> Result<AddPattern> {
    if a.shape() == b.shape() {
        return Ok(AddPattern::Same);
    }
    match (a.shape(), b.shape()) {
        ([bs, c, t], [c2]) if c == c2 => {
            Ok(AddPattern::ChannelBias { outer: *bs, channels: *c, inner: *t })
        }
        ([bs, d], [d2]) if d == d2 => {
            Ok(AddPattern::ChannelBias { outer: *bs, channels: *d, inner: 1 })
        }
        ([bs, c, t], [b2, c2]) if bs == b2 && c == c2 => {
            Ok(AddPattern::PerBatchChannel { rows: bs * c, inner: *t })
        }
        _ => Err(Error::shape(
            "add",
            format!("cannot broadcast {:?} + {:?}", a.shape(), b.shape()),
        )),
    }
}

fn forward_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let pattern = add_pattern(a, b)?;
    let mut data = a.data().to_vec();
    match pattern {
        AddPattern::Same => {
            for (d, r) in data.iter_mut().zip(b.data()) {
                *d += r;
            }
        }
        AddPattern::ChannelBias { outer, channels, inner } => {
            let rhs = b.data();
            for o in 0..outer {
                for (c, &bias) in rhs.iter().enumerate().take(channels) {
                    let base = (o * channels + c) * inner;
                    for d in &mut data[base..base + inner] {
                        *d += bias;
                    }
                }
            }
        }
        AddPattern::PerBatchChannel { rows, inner } => {
            let rhs = b.data();
            for (r, &bias) in rhs.iter().enumerate().take(rows) {
                let base = r * inner;
                for d in &mut data[base..base + inner] {
                    *d += bias;
                }
            }
        }
    }
    Tensor::new(a.shape(), data)
}

fn forward_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) => {
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            gemm(*m, *k, *n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
            Tensor::new(&[*m, *n], out)
        }
        ([ba, m, k], [bb, k2, n]) => {
            if ba != bb || k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("batched dims incompatible: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; ba * m * n];
            for i in 0..*ba {
                gemm(
                    *m,
                    *k,
                    *n,
                    1.0,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::new(&[*ba, *m, *n], out)
        }
        _ => Err(Error::shape(
            "matmul",
            format!("need [m,k]x[k,n] or [b,m,k]x[b,k,n], got {:?} x {:?}", a.shape(), b.shape()),
        )),
    }
}

fn transpose_last_data(shape: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let (rows, cols) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = data[base + r * cols + c];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(rank - 2, rank - 1);
    (new_shape, out)
}

fn forward_transpose_last(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape(
            "transpose_last",
            format!("need rank >= 2, got {:?}", x.shape()),
        ));
    }
    let (shape, data) = transpose_last_data(x.shape(), x.data());
    Tensor::new(&shape, data)
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    pad: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<ConvDims> {
    let (&[batch, c_in, len], &[c_out, wc_in, kernel]) = match (x.shape(), w.shape()) {
        (xs @ [_, _, _], ws @ [_, _, _]) => {
            (<&[usize; 3]>::try_from(xs).unwrap(), <&[usize; 3]>::try_from(ws).unwrap())
        }
        _ => {
            return Err(Error::shape(
                "conv1d",
                format!("need x [b,cin,t] and w [cout,cin,k], got {:?}, {:?}", x.shape(), w.shape()),
            ))
        }
    };
    if wc_in != c_in {
        return Err(Error::shape(
            "conv1d",
            format!("x has {} input channels but w expects {}", c_in, wc_in),
        ));
    }
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::shape("conv1d", format!("kernel size {} must be odd", kernel)));
    }
    Ok(ConvDims { batch, c_in, len, c_out, kernel, pad: (kernel - 1) / 2 })
}

/// `cols[(ci*k + j), (b*len + t)] = x[b, ci, t + j - pad]`, zero out of range.
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols_w = d.batch * d.len;
    let mut cols = vec![0.0; d.c_in * d.kernel * cols_w];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let x_base = (b * d.c_in + ci) * d.len;
            for j in 0..d.kernel {
                let row = ci * d.kernel + j;
                let dst_base = row * cols_w + b * d.len;
                // valid t range: 0 <= t + j - pad < len
                let t_lo = d.pad.saturating_sub(j);
                let t_hi = (d.len + d.pad - j).min(d.len);
                for t in t_lo..t_hi {
                    cols[dst_base + t] = x[x_base + t + j - d.pad];
                }
            }
        }
    }
    cols
}

fn forward_conv1d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x, w)?;
    let cols = im2col(x.data(), &d);
    let cols_w = d.batch * d.len;
    let mut y_mat = vec![0.0; d.c_out * cols_w];
    gemm(d.c_out, d.c_in * d.kernel, cols_w, 1.0, w.data(), false, &cols, false, 0.0, &mut y_mat);
    // y_mat is [c_out, b*len]; reorder to [b, c_out, len].
    let mut y = vec![0.0; d.batch * d.c_out * d.len];
    for co in 0..d.c_out {
        for b in 0..d.batch {
            let src = co * cols_w + b * d.len;
            let dst = (b * d.c_out + co) * d.len;
            y[dst..dst + d.len].copy_from_slice(&y_mat[src..src + d.len]);
        }
    }
    Tensor::new(&[d.batch, d.c_out, d.len], y)
}

fn norm_block(x: &[f64], eps: f64) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

fn forward_group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let &[batch, channels, len] = match x.shape() {
        s @ [_, _, _] => <&[usize; 3]>::try_from(s).unwrap(),
        _ => return Err(Error::shape("group_norm", format!("need rank-3 x, got {:?}", x.shape()))),
    };
    if groups == 0 || channels % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{} channels not divisible into {} groups", channels, groups),
        ));
    }
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape(
            "group_norm",
            format!(
                "gamma {:?} / beta {:?} must both be [{}]",
                gamma.shape(),
                beta.shape(),
                channels
            ),
        ));
    }
    let per_group = channels / groups;
    let block = per_group * len;
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * per_group) * len;
            let (mean, istd) = norm_block(&x.data()[start..start + block], eps);
            for cg in 0..per_group {
                let c = g * per_group + cg;
                let base = (b * channels + c) * len;
                let (ga, be) = (gamma.data()[c], beta.data()[c]);
                for t in 0..len {
                    out[base + t] = (x.data()[base + t] - mean) * istd * ga + be;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn forward_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("layer_norm", "need rank >= 1".to_string()));
    }
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} must both be [{}]", gamma.shape(), beta.shape(), d),
        ));
    }
    let mut out = vec![0.0; x.numel()];
    for (row_out, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let (mean, istd) = norm_block(row, eps);
        for i in 0..d {
            row_out[i] = (row[i] - mean) * istd * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::new(x.shape(), out)
}

fn forward_softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("softmax", "need rank >= 1".to_string()));
    }
    let d = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for (row_out, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..d {
            let e = (row[i] - max).exp();
            row_out[i] = e;
            sum += e;
        }
        for v in row_out.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape(), out)
}

fn forward_concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::shape("concat", "no inputs".to_string()));
    }
    let rank = inputs[0].rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {} out of range for rank {}", axis, rank)));
    }
    for t in inputs {
        if t.rank() != rank {
            return Err(Error::shape("concat", format!("mixed ranks {} and {}", rank, t.rank())));
        }
        for (ax, (a, b)) in inputs[0].shape().iter().zip(t.shape()).enumerate() {
            if ax != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("shapes {:?} and {:?} differ off-axis", inputs[0].shape(), t.shape()),
                ));
            }
        }
    }
    let axis_total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = inputs[0].shape().to_vec();
    shape[axis] = axis_total;
    let (outer, _, inner) = outer_inner(&shape, axis);
    let mut out = vec![0.0; outer * axis_total * inner];
    let mut offset = 0;
    for t in inputs {
        let t_axis = t.shape()[axis];
        for o in 0..outer {
            let src = o * t_axis * inner;
            let dst = (o * axis_total + offset) * inner;
            out[dst..dst + t_axis * inner].copy_from_slice(&t.data()[src..src + t_axis * inner]);
        }
        offset += t_axis;
    }
    Tensor::new(&shape, out)
}

fn forward_slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("slice", format!("axis {} out of range for rank {}", axis, x.rank())));
    }
    let axis_len = x.shape()[axis];
    if start >= end || end > axis_len {
        return Err(Error::shape(
            "slice",
            format!("range {}..{} invalid for axis of length {}", start, end, axis_len),
        ));
    }
    let (outer, _, inner) = outer_inner(x.shape(), axis);
    let take = end - start;
    let mut out = vec![0.0; outer * take * inner];
    for o in 0..outer {
        let src = (o * axis_len + start) * inner;
        let dst = o * take * inner;
        out[dst..dst + take * inner].copy_from_slice(&x.data()[src..src + take * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = take;
    Tensor::new(&shape, out)
}

fn forward_embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (&[vocab, dim], data) = match table.shape() {
        s @ [_, _] => (<&[usize; 2]>::try_from(s).unwrap(), table.data()),
        _ => return Err(Error::shape("embedding", format!("need rank-2 table, got {:?}", table.shape()))),
    };
    let mut out = vec![0.0; indices.len() * dim];
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= vocab {
            return Err(Error::shape(
                "embedding",
                format!("index {} out of range for table with {} rows", idx, vocab),
            ));
        }
        out[i * dim..(i + 1) * dim].copy_from_slice(&data[idx * dim..(idx + 1) * dim]);
    }
    Tensor::new(&[indices.len(), dim], out)
}

fn forward_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let &[batch, classes] = match logits.shape() {
        s @ [_, _] => <&[usize; 2]>::try_from(s).unwrap(),
        _ => {
            return Err(Error::shape(
                "cross_entropy",
                format!("need rank-2 logits, got {:?}", logits.shape()),
            ))
        }
    };
    if targets.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for batch of {}", targets.len(), batch),
        ));
    }
    let mut total = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {} out of range for {} classes", t, classes),
            ));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        total += row_log_sum_exp(row) - row[t];
    }
    Ok(Tensor::scalar(total / batch as f64))
}

/// Gradient of each input given the upstream gradient of the output. Entries
/// are `None` where `needs` is false. `output` is the forward result.
pub(super) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    upstream: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match kind {
        OpKind::Add => backward_add(inputs, upstream, needs),
        OpKind::Sub => vec![
            needs[0].then(|| upstream.to_vec()),
            needs[1].then(|| upstream.iter().map(|g| -g).collect()),
        ],
        OpKind::Mul => vec![
            needs[0].then(|| upstream.iter().zip(inputs[1].data()).map(|(g, v)| g * v).collect()),
            needs[1].then(|| upstream.iter().zip(inputs[0].data()).map(|(g, v)| g * v).collect()),
        ],
        OpKind::Scale(f) => vec![needs[0].then(|| upstream.iter().map(|g| f * g).collect())],
        OpKind::Matmul => backward_matmul(inputs, upstream, needs),
        OpKind::TransposeLast => vec![needs[0].then(|| {
            // output shape is the transposed one; transposing again restores it
            transpose_last_data(output.shape(), upstream).1
        })],
        OpKind::Conv1d => backward_conv1d(inputs, upstream, needs),
        OpKind::GroupNorm { groups, eps } => backward_group_norm(inputs, upstream, needs, *groups, *eps),
        OpKind::LayerNorm { eps } => backward_layer_norm(inputs, upstream, needs, *eps),
        OpKind::Softmax => vec![needs[0].then(|| {
            let d = *output.shape().last().unwrap();
            let mut dx = vec![0.0; output.numel()];
            for ((dx_row, y_row), g_row) in
                dx.chunks_mut(d).zip(output.data().chunks(d)).zip(upstream.chunks(d))
            {
                let dot: f64 = g_row.iter().zip(y_row.iter()).map(|(g, y)| g * y).sum();
                for i in 0..d {
                    dx_row[i] = y_row[i] * (g_row[i] - dot);
                }
            }
            dx
        })],
        OpKind::Silu => vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(upstream)
                .map(|(&x, g)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect()
        })],
        OpKind::Mish => vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(upstream)
                .map(|(&x, g)| {
                    let t = softplus(x).tanh();
                    g * (t + x * (1.0 - t * t) * sigmoid(x))
                })
                .collect()
        })],
        OpKind::Relu => vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(upstream)
                .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                .collect()
        })],
        OpKind::Mse => {
            let g = upstream[0];
            let scale = 2.0 * g / inputs[0].numel() as f64;
            let diff = |sign: f64| {
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(a, b)| sign * scale * (a - b))
                    .collect::<Vec<f64>>()
            };
            vec![needs[0].then(|| diff(1.0)), needs[1].then(|| diff(-1.0))]
        }
        OpKind::Sum => vec![needs[0].then(|| vec![upstream[0]; inputs[0].numel()])],
        OpKind::Mean => {
            vec![needs[0].then(|| vec![upstream[0] / inputs[0].numel() as f64; inputs[0].numel()])]
        }
        OpKind::Concat { axis } => backward_concat(inputs, output, upstream, needs, *axis),
        OpKind::Slice { axis, start, end } => vec![needs[0].then(|| {
            let x = inputs[0];
            let (outer, axis_len, inner) = outer_inner(x.shape(), *axis);
            let take = end - start;
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * take * inner;
                dx[dst..dst + take * inner].copy_from_slice(&upstream[src..src + take * inner]);
            }
            dx
        })],
        OpKind::Clamp { lo, hi } => vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(upstream)
                .map(|(&x, g)| if x > *lo && x < *hi { *g } else { 0.0 })
                .collect()
        })],
        OpKind::Embedding { indices } => vec![needs[0].then(|| {
            let dim = inputs[0].shape()[1];
            let mut dt = vec![0.0; inputs[0].numel()];
            for (i, &idx) in indices.iter().enumerate() {
                for j in 0..dim {
                    dt[idx * dim + j] += upstream[i * dim + j];
                }
            }
            dt
        })],
        OpKind::CrossEntropy { targets } => vec![needs[0].then(|| {
            let logits = inputs[0];
            let classes = logits.shape()[1];
            let g = upstream[0] / targets.len() as f64;
            let mut dl = vec![0.0; logits.numel()];
            for (b, &t) in targets.iter().enumerate() {
                let row = &logits.data()[b * classes..(b + 1) * classes];
                let lse = row_log_sum_exp(row);
                for c in 0..classes {
                    let p = (row[c] - lse).exp();
                    dl[b * classes + c] = g * (p - if c == t { 1.0 } else { 0.0 });
                }
            }
            dl
        })],
    }
}

fn backward_add(inputs: &[&Tensor], upstream: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let pattern = add_pattern(inputs[0], inputs[1]).expect("validated in forward");
    let da = needs[0].then(|| upstream.to_vec());
    let db = needs[1].then(|| match pattern {
        AddPattern::Same => upstream.to_vec(),
        AddPattern::ChannelBias { outer, channels, inner } => {
            let mut db = vec![0.0; channels];
            for o in 0..outer {
                for (c, slot) in db.iter_mut().enumerate() {
                    let base = (o * channels + c) * inner;
                    *slot += upstream[base..base + inner].iter().sum::<f64>();
                }
            }
            db
        }
        AddPattern::PerBatchChannel { rows, inner } => (0..rows)
            .map(|r| upstream[r * inner..(r + 1) * inner].iter().sum())
            .collect(),
    });
    vec![da, db]
}

fn backward_matmul(inputs: &[&Tensor], upstream: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (a, b) = (inputs[0], inputs[1]);
    match (a.shape(), b.shape()) {
        ([m, k], [_, n]) => {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                // dA = dY x B^T
                gemm(*m, *n, *k, 1.0, upstream, false, b.data(), true, 0.0, &mut da);
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                // dB = A^T x dY
                gemm(*k, *m, *n, 1.0, a.data(), true, upstream, false, 0.0, &mut db);
                db
            });
            vec![da, db]
        }
        ([bs, m, k], [_, _, n]) => {
            let da = needs[0].then(|| {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..*bs {
                    gemm(
                        *m,
                        *n,
                        *k,
                        1.0,
                        &upstream[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..*bs {
                    gemm(
                        *k,
                        *m,
                        *n,
                        1.0,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &upstream[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                db
            });
            vec![da, db]
        }
        _ => unreachable!("validated in forward"),
    }
}

fn backward_conv1d(inputs: &[&Tensor], upstream: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let d = conv_dims(x, w).expect("validated in forward");
    let cols_w = d.batch * d.len;
    // upstream is [b, c_out, len]; regroup as [c_out, b*len] to match im2col.
    let mut dy_mat = vec![0.0; d.c_out * cols_w];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let src = (b * d.c_out + co) * d.len;
            let dst = co * cols_w + b * d.len;
            dy_mat[dst..dst + d.len].copy_from_slice(&upstream[src..src + d.len]);
        }
    }
    let dw = needs[1].then(|| {
        let cols = im2col(x.data(), &d);
        let mut dw = vec![0.0; w.numel()];
        // dW = dY x cols^T
        gemm(d.c_out, cols_w, d.c_in * d.kernel, 1.0, &dy_mat, false, &cols, true, 0.0, &mut dw);
        dw
    });
    let dx = needs[0].then(|| {
        let mut dcols = vec![0.0; d.c_in * d.kernel * cols_w];
        // dcols = W^T x dY
        gemm(
            d.c_in * d.kernel,
            d.c_out,
            cols_w,
            1.0,
            w.data(),
            true,
            &dy_mat,
            false,
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0; x.numel()];
        for b in 0..d.batch {
            for ci in 0..d.c_in {
                let x_base = (b * d.c_in + ci) * d.len;
                for j in 0..d.kernel {
                    let row = ci * d.kernel + j;
                    let src_base = row * cols_w + b * d.len;
                    let t_lo = d.pad.saturating_sub(j);
                    let t_hi = (d.len + d.pad - j).min(d.len);
                    for t in t_lo..t_hi {
                        dx[x_base + t + j - d.pad] += dcols[src_base + t];
                    }
                }
            }
        }
        dx
    });
    vec![dx, dw]
}

/// Shared normalization backward for one block:
/// `dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`.
fn norm_block_backward(
    x: &[f64],
    mean: f64,
    istd: f64,
    dxhat: &[f64],
    dx: &mut [f64],
) {
    let m = x.len() as f64;
    let mut sum_d = 0.0;
    let mut sum_dx = 0.0;
    for (&xi, &di) in x.iter().zip(dxhat) {
        sum_d += di;
        sum_dx += di * (xi - mean) * istd;
    }
    let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
    for ((o, &xi), &di) in dx.iter_mut().zip(x).zip(dxhat) {
        let xhat = (xi - mean) * istd;
        *o += istd * (di - mean_d - xhat * mean_dx);
    }
}

fn backward_group_norm(
    inputs: &[&Tensor],
    upstream: &[f64],
    needs: &[bool],
    groups: usize,
    eps: f64,
) -> Vec<Option<Vec<f64>>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per_group = channels / groups;
    let block = per_group * len;
    let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
    let mut dgamma = needs[1].then(|| vec![0.0; channels]);
    let mut dbeta = needs[2].then(|| vec![0.0; channels]);
    let mut dxhat = vec![0.0; block];
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * per_group) * len;
            let xs = &x.data()[start..start + block];
            let (mean, istd) = norm_block(xs, eps);
            let ups = &upstream[start..start + block];
            for cg in 0..per_group {
                let c = g * per_group + cg;
                let ga = gamma.data()[c];
                for t in 0..len {
                    let i = cg * len + t;
                    dxhat[i] = ups[i] * ga;
                    if let Some(dg) = dgamma.as_deref_mut() {
                        dg[c] += ups[i] * (xs[i] - mean) * istd;
                    }
                    if let Some(db) = dbeta.as_deref_mut() {
                        db[c] += ups[i];
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                norm_block_backward(xs, mean, istd, &dxhat, &mut dx[start..start + block]);
            }
        }
    }
    vec![dx, dgamma, dbeta]
}

fn backward_layer_norm(
    inputs: &[&Tensor],
    upstream: &[f64],
    needs: &[bool],
    eps: f64,
) -> Vec<Option<Vec<f64>>> {
    let (x, gamma) = (inputs[0], inputs[1]);
    let d = *x.shape().last().unwrap();
    let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
    let mut dgamma = needs[1].then(|| vec![0.0; d]);
    let mut dbeta = needs[2].then(|| vec![0.0; d]);
    let mut dxhat = vec![0.0; d];
    let rows = x.numel() / d;
    for r in 0..rows {
        let start = r * d;
        let xs = &x.data()[start..start + d];
        let ups = &upstream[start..start + d];
        let (mean, istd) = norm_block(xs, eps);
        for i in 0..d {
            dxhat[i] = ups[i] * gamma.data()[i];
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[i] += ups[i] * (xs[i] - mean) * istd;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[i] += ups[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            norm_block_backward(xs, mean, istd, &dxhat, &mut dx[start..start + d]);
        }
    }
    vec![dx, dgamma, dbeta]
}

fn backward_concat(
    inputs: &[&Tensor],
    output: &Tensor,
    upstream: &[f64],
    needs: &[bool],
    axis: usize,
) -> Vec<Option<Vec<f64>>> {
    let (outer, axis_total, inner) = outer_inner(output.shape(), axis);
    let mut grads = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for (t, &need) in inputs.iter().zip(needs) {
        let t_axis = t.shape()[axis];
        grads.push(need.then(|| {
            let mut g = vec![0.0; t.numel()];
            for o in 0..outer {
                let src = (o * axis_total + offset) * inner;
                let dst = o * t_axis * inner;
                g[dst..dst + t_axis * inner].copy_from_slice(&upstream[src..src + t_axis * inner]);
            }
            g
        }));
        offset += t_axis;
    }
    grads
}
