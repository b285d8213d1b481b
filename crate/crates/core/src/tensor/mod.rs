//! Minimal reverse-mode automatic differentiation engine.
//!
//! Values are 64-bit floats in row-major buffers. A [`Graph`] records the
//! forward computation; [`Graph::backward`] propagates gradients to every
//! leaf created with `requires_grad`. Layers are plain parameter holders
//! that push their computation onto a graph per forward pass.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod loss;
#[cfg(test)]
mod tests;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, NodeId};
pub use layers::{BatchNorm, Conv2d, Dense, Layer, LayerSpec, LstmCell, ResidualBlock, Stack};
pub use loss::mse_l1_loss;

use crate::error::{Error, Result};

/// Training vs evaluation mode; batch norm is the only mode-sensitive layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// N-dimensional row-major f64 array with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Row count for a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }
}
