//! Plan matrices: the structured input/output of the diffusion process.
//!
//! A plan matrix is `[T, C+A+O]` row-major: one row per horizon position,
//! columns partitioned into a task block (C, one-hot, identical in every
//! row), an action block (A, one-hot per row), and an observation block (O,
//! start features in the first row, goal features in the last, zeros in
//! between). Diffusion noise touches only the action columns; the task and
//! observation columns act as conditioning and are re-imposed after every
//! reverse step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Problem dimensions shared across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub horizon: usize,
    pub n_tasks: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
}

impl ProblemDims {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(format!(
                "horizon must be at least 2 (start and goal need distinct positions), got {}",
                self.horizon
            )));
        }
        if self.n_tasks == 0 || self.n_actions == 0 || self.obs_dim == 0 {
            return Err(Error::Config(format!(
                "task/action/observation dims must be positive, got {}/{}/{}",
                self.n_tasks, self.n_actions, self.obs_dim
            )));
        }
        Ok(())
    }

    /// Total feature width `C + A + O`.
    pub fn width(&self) -> usize {
        self.n_tasks + self.n_actions + self.obs_dim
    }

    pub fn task_cols(&self) -> Range<usize> {
        0..self.n_tasks
    }

    pub fn action_cols(&self) -> Range<usize> {
        self.n_tasks..self.n_tasks + self.n_actions
    }

    pub fn obs_cols(&self) -> Range<usize> {
        self.n_tasks + self.n_actions..self.width()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Conditioning values imposed on the non-action blocks during inference.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub task: usize,
    pub o_start: Vec<f64>,
    pub o_goal: Vec<f64>,
}

impl Conditioning {
    pub fn validate(&self, dims: &ProblemDims) -> Result<()> {
        if self.task >= dims.n_tasks {
            return Err(Error::Config(format!(
                "task label {} out of range for {} tasks",
                self.task, dims.n_tasks
            )));
        }
        if self.o_start.len() != dims.obs_dim || self.o_goal.len() != dims.obs_dim {
            return Err(Error::Config(format!(
                "observation dims {}/{} do not match obs_dim {}",
                self.o_start.len(),
                self.o_goal.len(),
                dims.obs_dim
            )));
        }
        Ok(())
    }

    /// Overwrites the task and observation columns of one `[T, W]` buffer,
    /// leaving the action columns untouched.
    pub fn impose(&self, dims: &ProblemDims, data: &mut [f64]) {
        let w = dims.width();
        debug_assert_eq!(data.len(), dims.horizon * w);
        let obs_start = dims.obs_cols().start;
        for t in 0..dims.horizon {
            let row = &mut data[t * w..(t + 1) * w];
            for c in dims.task_cols() {
                row[c] = if c == self.task { 1.0 } else { 0.0 };
            }
            for (o, slot) in row[obs_start..].iter_mut().enumerate() {
                *slot = if t == 0 {
                    self.o_start[o]
                } else if t == dims.horizon - 1 {
                    self.o_goal[o]
                } else {
                    0.0
                };
            }
        }
    }
}

/// A `[T, C+A+O]` matrix over the plan layout described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanMatrix {
    dims: ProblemDims,
    data: Tensor,
}

impl PlanMatrix {
    /// Builds a clean `x0` from labels and boundary observations.
    pub fn assemble(
        dims: &ProblemDims,
        task: usize,
        actions: &[usize],
        o_start: &[f64],
        o_goal: &[f64],
    ) -> Result<Self> {
        dims.validate()?;
        if actions.len() != dims.horizon {
            return Err(Error::Config(format!(
                "expected {} actions, got {}",
                dims.horizon,
                actions.len()
            )));
        }
        for (t, &a) in actions.iter().enumerate() {
            if a >= dims.n_actions {
                return Err(Error::Config(format!(
                    "action label {} at position {} out of range for {} actions",
                    a, t, dims.n_actions
                )));
            }
        }
        let cond = Conditioning {
            task,
            o_start: o_start.to_vec(),
            o_goal: o_goal.to_vec(),
        };
        cond.validate(dims)?;
        let w = dims.width();
        let mut data = vec![0.0; dims.horizon * w];
        cond.impose(dims, &mut data);
        let action_start = dims.action_cols().start;
        for (t, &a) in actions.iter().enumerate() {
            data[t * w + action_start + a] = 1.0;
        }
        Ok(PlanMatrix { dims: *dims, data: Tensor::new(&[dims.horizon, w], data)? })
    }

    /// Wraps an existing `[T, W]` tensor without checking block contents.
    pub fn from_tensor(dims: &ProblemDims, tensor: Tensor) -> Result<Self> {
        dims.validate()?;
        if tensor.shape() != [dims.horizon, dims.width()] {
            return Err(Error::shape(
                "plan_matrix",
                format!(
                    "expected shape [{}, {}], got {:?}",
                    dims.horizon,
                    dims.width(),
                    tensor.shape()
                ),
            ));
        }
        Ok(PlanMatrix { dims: *dims, data: tensor })
    }

    pub fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    /// Copies the action block out as a row-major `[T, A]` buffer.
    pub fn action_block(&self) -> Vec<f64> {
        let w = self.dims.width();
        let cols = self.dims.action_cols();
        let mut out = Vec::with_capacity(self.dims.horizon * self.dims.n_actions);
        for t in 0..self.dims.horizon {
            out.extend_from_slice(&self.data.data()[t * w + cols.start..t * w + cols.end]);
        }
        out
    }

    /// Writes a `[T, A]` buffer into the action block.
    pub fn set_action_block(&mut self, block: &[f64]) {
        let w = self.dims.width();
        let cols = self.dims.action_cols();
        let a = self.dims.n_actions;
        debug_assert_eq!(block.len(), self.dims.horizon * a);
        for t in 0..self.dims.horizon {
            self.data.data_mut()[t * w + cols.start..t * w + cols.end]
                .copy_from_slice(&block[t * a..(t + 1) * a]);
        }
    }

    /// Argmax decode of the action block, lowest index on ties.
    pub fn decode_actions(&self) -> Vec<usize> {
        let w = self.dims.width();
        let cols = self.dims.action_cols();
        (0..self.dims.horizon)
            .map(|t| argmax(&self.data.data()[t * w + cols.start..t * w + cols.end]))
            .collect()
    }

    /// Argmax decode of the task block of the first row.
    pub fn decode_task(&self) -> usize {
        argmax(&self.data.data()[self.dims.task_cols()])
    }
}
