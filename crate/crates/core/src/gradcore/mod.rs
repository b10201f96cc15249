//! Differentiable dense-array substrate: tensors, a reverse-mode tape,
//! named parameters and the SGD step.

pub mod kernels;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use params::{fan_in_uniform, sgd_step, Bound, ParamId, ParamStore, Parameter};
pub use tape::{Activation, Resample, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::Result;

/// Forward-only 2-D convolution on plain tensors.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weights.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, stride, padding, groups)?;
    Ok(tape.value(y).clone())
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.activation(v, kind);
    tape.value(y).clone()
}

pub fn pool_resize<T: Real>(x: &Tensor<T>, mode: Resample, factor: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.pool_resize(v, mode, factor)?;
    Ok(tape.value(y).clone())
}

pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}
