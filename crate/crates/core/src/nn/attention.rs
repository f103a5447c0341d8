//! Gating attention branches and multi-head self-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Linear};
use crate::params::{Bound, ParamInit};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Squeeze-excitation style channel gate:
/// `x ⊙ σ(expand(relu(reduce(mean_hw(x)))))`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
    pub ratio: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!(
                "channel attention ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            reduce: Linear::new(&mut init.scope("reduce"), channels, hidden),
            expand: Linear::zeroed(&mut init.scope("expand"), hidden, channels),
            ratio,
        })
    }

    /// The `C`-vector of gate values in (0, 1).
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        if c != self.reduce.d_in {
            return Err(Error::shape("channel_attention", tape.shape(x), &[self.reduce.d_in]));
        }
        let avg = tape.channel_mean(x)?;
        let row = tape.reshape(avg, &[1, c])?;
        let hidden = self.reduce.forward(tape, p, row)?;
        let hidden = tape.relu(hidden)?;
        let logits = self.expand.forward(tape, p, hidden)?;
        let gate = tape.sigmoid(logits)?;
        tape.reshape(gate, &[c])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let gate = self.gate(tape, p, x)?;
        tape.scale_channels(x, gate)
    }

    pub fn param_count(channels: usize, ratio: usize) -> usize {
        let hidden = channels / ratio;
        Linear::param_count(channels, hidden) + Linear::param_count(hidden, channels)
    }
}

/// Full-resolution gate `x ⊙ σ(conv1×1(x))`.
#[derive(Clone, Copy, Debug)]
pub struct PixelAttention {
    pub proj: Conv2d,
}

impl PixelAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, channels: usize) -> Self {
        PixelAttention {
            proj: Conv2d::zeroed(&mut init.scope("proj"), channels, channels, 1, 1, 0),
        }
    }

    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.proj.forward(tape, p, x)?;
        tape.sigmoid(logits)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let gate = self.gate(tape, p, x)?;
        tape.mul(x, gate)
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(channels, channels, 1)
    }
}

/// Kernel size of the spatial-attention mixing convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Per-position gate from channel-pooled mean and max maps:
/// `x ⊙ σ(conv7×7([mean_c(x); max_c(x)]))`.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttention {
    pub mix: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>) -> Self {
        SpatialAttention {
            mix: Conv2d::zeroed(&mut init.scope("mix"), 2, 1, SPATIAL_KERNEL, 1, SPATIAL_KERNEL / 2),
        }
    }

    /// The `1×H×W` gate map.
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mean = tape.spatial_mean(x)?;
        let max = tape.spatial_max(x)?;
        let pooled = tape.concat(&[mean, max])?;
        let logits = self.mix.forward(tape, p, pooled)?;
        tape.sigmoid(logits)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let gate = self.gate(tape, p, x)?;
        tape.scale_spatial(x, gate)
    }

    pub fn param_count() -> usize {
        Conv2d::param_count(2, 1, SPATIAL_KERNEL)
    }
}

/// Multi-head scaled dot-product attention with separate query, key and
/// value sources. The key projection has no bias.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        Ok(MultiHeadAttention {
            w_q: Linear::new(&mut init.scope("w_q"), d, d),
            w_k: Linear::without_bias(&mut init.scope("w_k"), d, d),
            w_v: Linear::new(&mut init.scope("w_v"), d, d),
            w_o: Linear::new(&mut init.scope("w_o"), d, d),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.d_in
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// Returns the output tokens and the attention node (whose recorded
    /// weights are available through [`Tape::attention_weights`]).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<(Var, Var)> {
        let q = self.w_q.forward(tape, p, q_src)?;
        let k = self.w_k.forward(tape, p, k_src)?;
        let v = self.w_v.forward(tape, p, v_src)?;
        let attn = tape.attention(q, k, v, self.heads)?;
        let out = self.w_o.forward(tape, p, attn)?;
        Ok((out, attn))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, q_src: Var, k_src: Var, v_src: Var) -> Result<Var> {
        self.forward_with_weights(tape, p, q_src, k_src, v_src).map(|(o, _)| o)
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d) - d
    }
}
