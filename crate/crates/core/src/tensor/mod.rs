//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every differentiable computation is built by pushing ops onto a [`Tape`].
//! Each op records its inputs as [`ValueId`] handles; [`Tape::backward`] walks
//! the tape in reverse and accumulates gradients for every recorded value that
//! requires them. All math is sequential f64 with fixed iteration order, so a
//! given graph produces bit-identical results across runs and platforms.

mod gradcheck;
mod ops;

pub use gradcheck::{all_op_kinds, default_shapes, grad_check};
pub use ops::OpKind;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major dense tensor. Rank 0 (scalar) through rank 3 are used in practice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    /// Standard-normal entries drawn in row-major order from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar payload. Panics if the tensor is not rank 0.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    /// `None` for leaves; otherwise the op that produced this value.
    op: Option<(OpKind, Vec<ValueId>)>,
}

/// Records a computation as a sequence of values, each either a leaf or the
/// result of an op applied to earlier values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value. Gradient flow into it is controlled by the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op: None });
        id
    }

    /// Leaf that never receives gradient, regardless of the tensor's flag.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value.requires_grad(false))
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Applies `kind` to `inputs`, validating shapes, and records the result.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[ValueId]) -> Result<ValueId> {
        for &i in inputs {
            assert!(i.0 < self.nodes.len(), "input ValueId out of range");
        }
        let input_refs: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let mut value = ops::forward(&kind, &input_refs)?;
        value.requires_grad = input_refs.iter().any(|t| t.requires_grad);
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op: Some((kind, inputs.to_vec())) });
        Ok(id)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every value that
    /// participated and requires grad; gradient buffers match value shapes.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            let (kind, inputs) = match &node.op {
                Some(pair) => pair,
                None => continue,
            };
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let input_refs: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = input_refs.iter().map(|t| t.requires_grad).collect();
            let input_grads = ops::backward(kind, &input_refs, &node.value, &upstream, &needs);
            for (slot, grad) in inputs.iter().zip(input_grads) {
                let (input_id, grad) = match grad {
                    Some(g) => (*slot, g),
                    None => continue,
                };
                if !self.nodes[input_id.0].value.requires_grad {
                    continue;
                }
                let buf = grads[input_id.0]
                    .get_or_insert_with(|| vec![0.0; self.nodes[input_id.0].value.numel()]);
                for (b, g) in buf.iter_mut().zip(&grad) {
                    *b += g;
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: one optional gradient buffer per tape slot.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the value at `id`, if one was accumulated.
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }
}
