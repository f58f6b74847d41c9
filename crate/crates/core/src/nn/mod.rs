//! Minimal neural-network layers with hand-written backward passes.
//!
//! Every layer works on batched tensors (leading batch axis). `forward` is the
//! pure inference path and is safe to call from many threads at once;
//! `forward_train` caches intermediate values for the following `backward`.

pub mod checkpoint;
mod layers;

pub use layers::{
    softmax, softmax_backward, softmax_last_axis, BatchNorm, Conv2d, Dense, Layer, LayerKind, MaxPool2d, Padding, Param,
};

use crate::error::Result;
use crate::tensor::Tensor;

/// Convenience wrapper matching the single-layer forward operation.
pub fn forward_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    layer.forward(input)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward_train(&x)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
