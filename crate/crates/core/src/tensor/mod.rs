//! Dense tensors, the layer graph, gradients and Hessian-vector products.
//!
//! Everything here computes in `f64`. Files store `f32` payloads (see [`io`]).

mod autodiff;
mod conv;
pub mod io;
mod model;

pub use autodiff::{
    default_hvp_eps, grad_flat, hvp, hvp_flat, loss_and_grad, per_sample_sq_grad_mean, ModelLoss,
    Objective, Quadratic,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_dim};
pub use model::{Dataset, Layer, ModelGraph, NamedTensors, ParamSlot};
pub(crate) use model::argmax;

use crate::error::{CimError, Result};

/// Dense row-major array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CimError::dim("data length", numel, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape,
            data: vec![0.0; numel],
        })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Largest absolute entry; 0 for an all-zero tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(CimError::Shape("tensor must have at least one dimension".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(CimError::Shape(format!("dimension {axis} has size 0")));
    }
    Ok(())
}
