//! Forward and backward passes for the layer set of the height regressor:
//! pointwise and depthwise convolutions, ReLU, batch normalization and the
//! residual sum. All convolutions are stride 1 and preserve spatial size.

mod batchnorm;
mod conv;
mod gradcheck;

pub use batchnorm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, BatchNormCache, BatchStats, RunningStats,
    BN_EPS, BN_MOMENTUM,
};
pub use conv::{depthwise_backward, depthwise_forward, pointwise_backward, pointwise_forward, pointwise_param_grads};
pub use gradcheck::{finite_diff_check, layer_suite, relative_error, GradCheckReport, LayerCheck};

use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("batch norm in training mode needs more than one value per channel (got N*H*W = {0})")]
    BatchTooSmall(usize),
    #[error("depthwise kernel size {0} must be odd")]
    EvenKernel(usize),
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    dy.expect_shape("relu backward", x.shape())?;
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *g = if v <= T::zero() { T::zero() } else { *g };
    }
    Ok(dx)
}

pub fn add_residual<T: Real>(x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let mut out = x.clone();
    out.add_assign(skip)?;
    Ok(out)
}

/// The sum passes its gradient unchanged to both operands.
pub fn add_residual_backward<T: Real>(dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (dy.clone(), dy.clone())
}
