use std::collections::HashMap;

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Non-trainable state carried alongside parameters (batch-norm running
/// statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable parameters plus buffers, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    param_names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.param_names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(DiffError::DuplicateName(name));
        }
        let id = self.params.len();
        self.param_names.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.param_names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(DiffError::DuplicateName(name));
        }
        let id = self.buffers.len();
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    /// Registers a `fan_in x fan_out` weight drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add_param(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.param_names.get(name).copied().map(ParamId)
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).copied().map(BufferId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites a named parameter or buffer, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(&i) = self.param_names.get(name) {
            &mut self.params[i].value
        } else if let Some(&i) = self.buffer_names.get(name) {
            &mut self.buffers[i].value
        } else {
            return Err(DiffError::UnknownName(name.to_string()));
        };
        if slot.shape() != value.shape() {
            return Err(DiffError::Shape {
                op: "assign",
                detail: format!("`{}` is {:?}, got {:?}", name, slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }
}
