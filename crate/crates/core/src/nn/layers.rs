use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamInit};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: init.fan_in_uniform("weight", &[d_in, d_out], d_in),
            bias: Some(init.zeros("bias", &[d_out])),
            d_in,
            d_out,
        }
    }

    /// Fan-in initialized weight and no bias.
    pub fn without_bias<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: init.fan_in_uniform("weight", &[d_in, d_out], d_in),
            bias: None,
            d_in,
            d_out,
        }
    }

    /// Zero weight and bias, so the layer outputs exactly 0.
    pub fn zeroed<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: init.zeros("weight", &[d_in, d_out]),
            bias: Some(init.zeros("bias", &[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in initialized `k×k` convolution.
    pub fn new<T: Scalar, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: init.fan_in_uniform("weight", &[c_out, c_in, k, k], c_in * k * k),
            bias: init.zeros("bias", &[c_out]),
            stride,
            padding,
        }
    }

    pub fn zeroed<T: Scalar, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: init.zeros("weight", &[c_out, c_in, k, k]),
            bias: init.zeros("bias", &[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, c_in: usize, c_out: usize) -> Self {
        ConvTranspose2d {
            weight: init.fan_in_uniform("weight", &[c_in, c_out, 2, 2], c_in * 4),
            bias: init.zeros("bias", &[c_out]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2)
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out * 4 + c_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, channels: usize, k: usize) -> Self {
        DepthwiseConv2d {
            weight: init.fan_in_uniform("weight", &[channels, 1, k, k], k * k),
            bias: init.zeros("bias", &[channels]),
            padding: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.padding)
    }

    pub fn param_count(channels: usize, k: usize) -> usize {
        channels * k * k + channels
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, d: usize) -> Self {
        LayerNorm {
            gamma: init.ones("gamma", &[d]),
            beta: init.zeros("beta", &[d]),
        }
    }

    /// Normalizes each row of an `N×d` token matrix.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::lit(LN_EPS))
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}
