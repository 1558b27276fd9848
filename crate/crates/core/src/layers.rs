//! Parameterized building blocks on top of the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-initialized kernel with "same" padding; zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.kaiming(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng);
        let bias = store.zeros(format!("{name}.bias"), &[c_out]);
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// All-zero kernel and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let weight = store.zeros(format!("{name}.weight"), &[c_out, c_in, k, k]);
        let bias = store.zeros(format!("{name}.bias"), &[c_out]);
        Conv2d {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.ones(format!("{name}.gamma"), &[channels]),
            beta: store.zeros(format!("{name}.beta"), &[channels]),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.kaiming(format!("{name}.weight"), &[c_out, c_in], c_in, rng),
            bias: store.zeros(format!("{name}.bias"), &[c_out]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Conv, group norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvNormRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), c_out, groups),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}
