//! Graph-free entry points for the differentiable operators.
//!
//! Spatial functions accept a single `C x H x W` image or an `N x C x H x W`
//! batch and return the same rank they were given.

use crate::diffcore::conv::{self, ConvSpec};
use crate::diffcore::kernels::{self, BnState};
use crate::diffcore::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn batched<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        3 => Ok((x.clone().unsqueeze0(), true)),
        4 => Ok((x.clone(), false)),
        _ => Err(shape_err!("expected C x H x W or N x C x H x W, got {:?}", x.shape())),
    }
}

fn unbatched<T: Scalar>(x: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        x.squeeze0()
    } else {
        Ok(x)
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(shape_err!("conv2d called with a transposed layer spec"));
    }
    let (x, sq) = batched(input)?;
    unbatched(conv::forward(&x, spec, weights, Some(bias))?, sq)
}

pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(shape_err!("deconv2d needs a transposed layer spec"));
    }
    let (x, sq) = batched(input)?;
    unbatched(conv::forward(&x, spec, weights, Some(bias))?, sq)
}

pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    Ok(kernels::batchnorm_forward(input, gamma, beta, state, mode == Mode::Train)?.0)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    kernels::relu(input)
}

/// Samples `target` at `p + flow(p)`; channel 0 of `flow` is horizontal.
pub fn bilinear_warp<T: Scalar>(target: &Tensor<T>, flow: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (t, sq) = batched(target)?;
    let (f, _) = batched(flow)?;
    let (y, valid) = kernels::warp_forward(&t, &f)?;
    Ok((unbatched(y, sq)?, unbatched(valid, sq)?))
}

pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    kernels::softmax(input, axis)
}
