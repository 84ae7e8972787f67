//! Layer builders over a parameter session.
//!
//! Weight names are derived from the layer name, so calling a builder
//! twice with the same name shares the parameters (used by the decoder
//! trunks and by per-slot appearance decoding).

use crate::tensor::Pad;
use crate::tensor::{Init, Scalar, Session, Var};

#[derive(Debug, Clone, Copy)]
pub enum Act {
    None,
    Relu,
    Elu,
}

fn activate<T: Scalar>(x: Var<T>, act: Act) -> Var<T> {
    match act {
        Act::None => x,
        Act::Relu => x.relu(),
        Act::Elu => x.elu(),
    }
}

const KERNEL_INIT: Init = Init::TruncNormal { std: 0.02 };

/// Channel count scaled by the width multiplier, floored at `granule` and
/// rounded to a multiple of it (norm groups need divisibility).
pub fn scaled(base: usize, width_mult: f64, granule: usize) -> usize {
    let raw = (base as f64 * width_mult).round() as usize;
    granule * (raw.div_ceil(granule)).max(1)
}

/// Fully-connected layer on `[B, I]`.
pub fn dense<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    out_dim: usize,
    act: Act,
) -> Var<T> {
    dense_init(s, name, x, out_dim, act, KERNEL_INIT)
}

pub fn dense_init<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    out_dim: usize,
    act: Act,
    init: Init,
) -> Var<T> {
    let in_dim = *x.dims().last().expect("dense on rank-0 input");
    let w = s.weight(&format!("{name}.w"), &[in_dim, out_dim], init);
    let b = s.weight(&format!("{name}.b"), &[out_dim], Init::Zeros);
    activate(x.matmul(&w).add_bias(&b), act)
}

/// `x + act(dense(x))`, width preserved.
pub fn residual_dense<T: Scalar>(s: &mut Session<T>, name: &str, x: &Var<T>, act: Act) -> Var<T> {
    let width = *x.dims().last().unwrap();
    let y = dense(s, name, x, width, act);
    x.add(&y)
}

pub fn layer_norm<T: Scalar>(s: &mut Session<T>, name: &str, x: &Var<T>) -> Var<T> {
    let c = *x.dims().last().unwrap();
    let gamma = s.weight(&format!("{name}.gamma"), &[c], Init::Constant(1.0));
    let beta = s.weight(&format!("{name}.beta"), &[c], Init::Zeros);
    x.layer_norm(&gamma, &beta)
}

pub fn group_norm<T: Scalar>(s: &mut Session<T>, name: &str, x: &Var<T>, groups: usize) -> Var<T> {
    let c = *x.dims().last().unwrap();
    let gamma = s.weight(&format!("{name}.gamma"), &[c], Init::Constant(1.0));
    let beta = s.weight(&format!("{name}.beta"), &[c], Init::Zeros);
    x.group_norm(groups, &gamma, &beta)
}

/// 2-D convolution layer on `[B,H,W,C]`.
pub fn conv2d<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    out_ch: usize,
    k: [usize; 2],
    stride: [usize; 2],
    act: Act,
) -> Var<T> {
    conv2d_init(s, name, x, out_ch, k, stride, act, KERNEL_INIT)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_init<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    out_ch: usize,
    k: [usize; 2],
    stride: [usize; 2],
    act: Act,
    init: Init,
) -> Var<T> {
    let in_ch = *x.dims().last().unwrap();
    let w = s.weight(&format!("{name}.w"), &[k[0], k[1], in_ch, out_ch], init);
    let b = s.weight(&format!("{name}.b"), &[out_ch], Init::Zeros);
    activate(x.conv2d(&w, stride, Pad::Same).add_bias(&b), act)
}

/// `x + act(conv1x1(x))`, width preserved.
pub fn residual_conv1x1<T: Scalar>(s: &mut Session<T>, name: &str, x: &Var<T>, act: Act) -> Var<T> {
    let ch = *x.dims().last().unwrap();
    let y = conv2d(s, name, x, ch, [1, 1], [1, 1], act);
    x.add(&y)
}

/// 3-D convolution layer on `[B,T,H,W,C]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    out_ch: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: Pad,
    act: Act,
) -> Var<T> {
    let in_ch = *x.dims().last().unwrap();
    let w = s.weight(
        &format!("{name}.w"),
        &[k[0], k[1], k[2], in_ch, out_ch],
        KERNEL_INIT,
    );
    let b = s.weight(&format!("{name}.b"), &[out_ch], Init::Zeros);
    activate(x.conv3d(&w, stride, pad).add_bias(&b), act)
}

/// `x + act(conv3d(x, same width, k, stride 1, Same))`.
pub fn residual_conv3d<T: Scalar>(
    s: &mut Session<T>,
    name: &str,
    x: &Var<T>,
    k: [usize; 3],
    act: Act,
) -> Var<T> {
    let ch = *x.dims().last().unwrap();
    let y = conv3d(s, name, x, ch, k, [1, 1, 1], Pad::Same, act);
    x.add(&y)
}
