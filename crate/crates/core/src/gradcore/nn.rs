//! Parameterized layers over the tape.

use rand_chacha::ChaCha8Rng;

use super::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Convolution with "same" zero padding for stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub groups: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(&[cout, cin / groups, k, k], fan_in, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv {
            w,
            b,
            stride,
            groups,
            k,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.w),
            self.b.map(|b| p.var(b)),
            self.stride,
            self.k / 2,
            self.groups,
        )
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count ≤ 8 that divides `channels`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), fan_in_uniform(&[fin, fout], fin, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvNormAct {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, k, stride, 1, false),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}

/// Depthwise 3×3 (optionally strided) → pointwise 1×1 → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub norm: GroupNorm,
}

impl SeparableConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        SeparableConv {
            depthwise: Conv::new(store, rng, &format!("{name}.dw"), cin, cin, 3, stride, cin, false),
            pointwise: Conv::new(store, rng, &format!("{name}.pw"), cin, cout, 1, 1, 1, false),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(tape, p, x)?;
        let y = self.pointwise.forward(tape, p, y)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}
