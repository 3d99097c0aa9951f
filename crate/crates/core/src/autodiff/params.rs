use std::collections::HashMap;

use super::tape::StatUpdate;
use super::{AutodiffError, Tensor};
use crate::numeric::KahanSum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// A trainable tensor with its AdamW moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Non-trainable batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Owns every parameter and running-stat buffer of a model, in registration
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<RunningStats>,
    by_name: HashMap<String, ParamId>,
    buffer_names: HashMap<String, BufferId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id);
        let shape = value.shape().to_vec();
        self.params.push(Parameter { name: name.to_string(), value, m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
        Ok(id)
    }

    /// Running mean 0 and variance 1 over `channels`.
    pub fn add_buffer(&mut self, name: &str, channels: usize) -> Result<BufferId, AutodiffError> {
        if self.buffer_names.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_names.insert(name.to_string(), id);
        self.buffers.push(RunningStats { name: name.to_string(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        Ok(id)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[RunningStats] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Commits staged batch statistics:
    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn update_running_stats(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            let b = &mut self.buffers[u.buffer.0];
            for (r, x) in b.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * x;
            }
            for (r, x) in b.var.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * x;
            }
        }
    }
}

/// Elementwise sum of per-tape gradient lists with compensated summation,
/// so the result does not depend on the order of the inputs beyond rounding
/// of the final add.
pub fn merge_gradients(parts: &[Vec<Tensor>]) -> Vec<Tensor> {
    let Some(first) = parts.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(pi, t)| {
            let mut acc = vec![KahanSum::default(); t.len()];
            for part in parts {
                for (a, v) in acc.iter_mut().zip(part[pi].data()) {
                    a.add(*v);
                }
            }
            Tensor::new(t.shape(), acc.iter().map(|a| a.total()).collect()).expect("same shape")
        })
        .collect()
}
