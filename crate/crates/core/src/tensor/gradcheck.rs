//! Finite-difference gradient checking for every op.
//!
//! Non-scalar op outputs are scalarized with a mean-squared-error loss
//! against a fixed random target so that every output entry contributes
//! to the checked gradient. Central differences use `h = 1e-5`; inputs
//! for piecewise ops (`relu`, `clamp`) are nudged away from their kinks
//! so the finite-difference quotient stays on one branch.

use super::{OpKind, Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

/// Canonical names accepted by [`grad_check`], one per supported op.
pub fn all_op_kinds() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "scale",
        "matmul",
        "transpose_last",
        "conv1d",
        "group_norm",
        "layer_norm",
        "softmax",
        "silu",
        "mish",
        "relu",
        "mse",
        "sum",
        "mean",
        "concat",
        "slice",
        "clamp",
        "embedding",
        "cross_entropy",
    ]
}

/// Small canonical input shapes for `kind`, used by the per-op sweep tests.
pub fn default_shapes(kind: &str) -> Result<Vec<Vec<usize>>> {
    let shapes: Vec<Vec<usize>> = match kind {
        "add" | "sub" | "mul" => vec![vec![2, 3, 4], vec![2, 3, 4]],
        "scale" | "softmax" | "clamp" => vec![vec![3, 5]],
        "matmul" => vec![vec![3, 4], vec![4, 2]],
        "transpose_last" => vec![vec![2, 3, 4]],
        "conv1d" => vec![vec![2, 3, 5], vec![4, 3, 3]],
        "group_norm" => vec![vec![2, 4, 3], vec![4], vec![4]],
        "layer_norm" => vec![vec![2, 3, 4], vec![4], vec![4]],
        "silu" | "mish" | "relu" => vec![vec![2, 7]],
        "mse" => vec![vec![3, 4], vec![3, 4]],
        "sum" | "mean" => vec![vec![2, 3]],
        "concat" => vec![vec![2, 2, 3], vec![2, 4, 3]],
        "slice" => vec![vec![2, 6, 3]],
        "embedding" => vec![vec![5, 3]],
        "cross_entropy" => vec![vec![4, 6]],
        other => return Err(Error::Config(format!("unknown op kind `{}`", other))),
    };
    Ok(shapes)
}

/// Resolves a kind name plus input shapes into a concrete op. Attributes not
/// implied by the shapes get fixed defaults; index-style attributes (embedding
/// indices, classification targets) are drawn from `rng`.
fn resolve_kind(kind: &str, shapes: &[&[usize]], rng: &mut ChaCha8Rng) -> Result<OpKind> {
    let op = match kind {
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale(1.7),
        "matmul" => OpKind::Matmul,
        "transpose_last" | "transpose" => OpKind::TransposeLast,
        "conv1d" => OpKind::Conv1d,
        "group_norm" => {
            let c = shapes[0].get(1).copied().unwrap_or(1);
            let groups = [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1);
            OpKind::GroupNorm { groups, eps: 1e-5 }
        }
        "layer_norm" => OpKind::LayerNorm { eps: 1e-5 },
        "softmax" | "softmax_mse" => OpKind::Softmax,
        "silu" => OpKind::Silu,
        "mish" => OpKind::Mish,
        "relu" => OpKind::Relu,
        "mse" => OpKind::Mse,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "concat" => OpKind::Concat { axis: if shapes[0].len() > 1 { 1 } else { 0 } },
        "slice" => {
            let rank = shapes[0].len();
            let axis = if rank > 1 { 1 } else { 0 };
            let len = shapes[0][axis];
            let start = len / 4;
            let end = (3 * len / 4).max(start + 1);
            OpKind::Slice { axis, start, end }
        }
        "clamp" => OpKind::Clamp { lo: -1.0, hi: 1.0 },
        "embedding" => {
            let vocab = shapes[0][0];
            // longer than the vocabulary so repeated rows exercise accumulation
            let indices = (0..vocab + 3).map(|_| rng.gen_range(0..vocab)).collect();
            OpKind::Embedding { indices }
        }
        "cross_entropy" => {
            let (batch, classes) = (shapes[0][0], shapes[0][1]);
            let targets = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
            OpKind::CrossEntropy { targets }
        }
        other => return Err(Error::Config(format!("unknown op kind `{}`", other))),
    };
    Ok(op)
}

/// Moves entries off the non-differentiable points of piecewise ops.
fn nudge_kinks(op: &OpKind, data: &mut [f64]) {
    match op {
        OpKind::Relu => {
            for v in data {
                if v.abs() < KINK_MARGIN {
                    *v = if *v >= 0.0 { KINK_MARGIN } else { -KINK_MARGIN };
                }
            }
        }
        OpKind::Clamp { lo, hi } => {
            for v in data {
                for edge in [*lo, *hi] {
                    if (*v - edge).abs() < KINK_MARGIN {
                        *v = if *v >= edge { edge + KINK_MARGIN } else { edge - KINK_MARGIN };
                    }
                }
            }
        }
        _ => {}
    }
}

fn eval_loss(op: &OpKind, inputs: &[Tensor], target: Option<&Tensor>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.forward_op(op.clone(), &ids)?;
    if tape.value(out).is_scalar() {
        return Ok(tape.value(out).item());
    }
    let target = tape.leaf(target.expect("target required for non-scalar output").clone());
    let loss = tape.forward_op(OpKind::Mse, &[out, target])?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients against central finite differences.
///
/// Returns the maximum over all input entries of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check(kind: &str, shapes: &[&[usize]], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = resolve_kind(kind, shapes, &mut rng)?;
    let mut inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, &mut rng)).collect();
    for t in &mut inputs {
        nudge_kinks(&op, t.data_mut());
    }

    // fixed scalarization target, drawn once from the same stream
    let probe = forward_only(&op, &inputs)?;
    let target = if probe.is_scalar() { None } else { Some(Tensor::randn(probe.shape(), &mut rng)) };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<ValueId> =
        inputs.iter().map(|t| tape.leaf(t.clone().requires_grad(true))).collect();
    let out = tape.forward_op(op.clone(), &ids)?;
    let loss = if tape.value(out).is_scalar() {
        out
    } else {
        let tid = tape.constant(target.clone().unwrap());
        tape.forward_op(OpKind::Mse, &[out, tid])?
    };
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).expect("input requires grad");
        for (j, &a_j) in analytic.iter().enumerate().take(input.numel()) {
            let orig = inputs[i].data()[j];
            let mut perturbed = inputs.clone();
            perturbed[i].data_mut()[j] = orig + H;
            let up = eval_loss(&op, &perturbed, target.as_ref())?;
            perturbed[i].data_mut()[j] = orig - H;
            let down = eval_loss(&op, &perturbed, target.as_ref())?;
            let numeric = (up - down) / (2.0 * H);
            let rel = (a_j - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn forward_only(op: &OpKind, inputs: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.forward_op(op.clone(), &ids)?;
    Ok(tape.value(out).clone())
}
