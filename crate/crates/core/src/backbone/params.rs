use alloc::string::String;
use alloc::vec::Vec;

use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Parameter order is creation order and is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Tensor>,
    names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: String, t: Tensor) -> ParamId {
        self.params.push(t.with_grad());
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, t: Tensor) -> BufferId {
        self.buffers.push(t);
        self.buffer_names.push(name);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Copies gradients out of a graph after backward; parameters that
    /// received none get zeros.
    pub fn collect_grads(&mut self, g: &Graph, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let grad = g.grad(v).map_or_else(|| alloc::vec![0.0; p.numel()], <[f64]>::to_vec);
            p.set_grad(Some(grad))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }
}

impl ParamStore {
    pub(crate) fn buffers_mut_vec(&mut self) -> &mut Vec<Tensor> {
        &mut self.buffers
    }
}
