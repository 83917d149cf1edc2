//! Forward-only tensor operations. The differentiable versions live on
//! [`crate::autograd::Tape`]; both share the kernels in [`crate::kernels`].

use crate::autograd::Tape;
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Stride-1 2-D convolution of a `[C_in,H,W]` input with a
/// `[C_out,C_in,k,k]` kernel.
pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let w = tape.constant(kernel.clone());
    let y = tape.conv2d(x, w, padding)?;
    Ok(tape.value(y).clone())
}

pub fn fully_connected<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.linear(x, w, Some(b), false)?;
    Ok(tape.value(y).clone())
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|v| v.max(T::zero())).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

pub fn l1_loss<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::inference();
    let p = tape.constant(prediction.clone());
    let t = tape.constant(target.clone());
    let l = tape.l1_loss(p, t)?;
    Ok(tape.value(l).data()[0])
}
