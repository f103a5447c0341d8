//! The SMA transformer block:
//!
//! ```text
//! X' = SMA(LN(X)) + X
//! Y  = E-MLP(LN(X')) + X'
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::nn::attention::{ChannelAttention, MultiHeadAttention, PixelAttention, SpatialAttention};
use crate::nn::layers::{Conv2d, DepthwiseConv2d, LayerNorm, Linear};
use crate::params::{Bound, ParamInit};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Where the E-MLP applies its GELU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluPlacement {
    /// After the depth-wise convolution, before projecting back down.
    #[default]
    BeforeDown,
    /// After the down projection.
    AfterDown,
}

/// Hyperparameters of one SMA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub channel_ratio: usize,
    pub emlp_expansion: usize,
    /// Kernel of the E-MLP cross-channel convolution (1 or 3).
    pub emlp_pixel_kernel: usize,
    pub gelu: GeluPlacement,
    /// Side of the square patches that form attention tokens.
    pub patch_size: usize,
    pub use_sma: bool,
    pub use_emlp: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        BlockConfig {
            channels,
            heads,
            channel_ratio: 4,
            emlp_expansion: 2,
            emlp_pixel_kernel: 1,
            gelu: GeluPlacement::BeforeDown,
            patch_size: 1,
            use_sma: true,
            use_emlp: true,
        }
    }

    /// Width of an attention token.
    pub fn token_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::Config("block with zero channels".into()));
        }
        if self.channel_ratio == 0 || c % self.channel_ratio != 0 {
            return Err(Error::Config(format!(
                "channel_ratio {} does not divide {c} channels",
                self.channel_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if self.heads == 0 || self.token_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide token width {}",
                self.heads,
                self.token_dim()
            )));
        }
        if self.emlp_expansion == 0 {
            return Err(Error::Config("emlp_expansion must be at least 1".into()));
        }
        if !matches!(self.emlp_pixel_kernel, 1 | 3) {
            return Err(Error::Config(format!(
                "emlp_pixel_kernel must be 1 or 3, got {}",
                self.emlp_pixel_kernel
            )));
        }
        Ok(())
    }
}

/// Synergistic multi-attention: pixel and channel branches combined by
/// attention, gated spatially, then fused.
#[derive(Clone, Copy, Debug)]
pub struct Sma {
    pub pixel: PixelAttention,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub mhsa: MultiHeadAttention,
    pub fuse: Linear,
    pub patch_size: usize,
}

/// Intermediate values of one SMA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SmaTrace {
    pub pixel: Var,
    pub channel: Var,
    pub combined: Var,
    pub spatial: Var,
    pub attention: Var,
    pub out: Var,
}

impl Sma {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Sma {
            pixel: PixelAttention::new(&mut init.scope("pixel"), c),
            channel: ChannelAttention::new(&mut init.scope("channel"), c, cfg.channel_ratio)?,
            spatial: SpatialAttention::new(&mut init.scope("spatial")),
            mhsa: MultiHeadAttention::new(&mut init.scope("mhsa"), cfg.token_dim(), cfg.heads)?,
            fuse: Linear::new(&mut init.scope("fuse"), c, c),
            patch_size: cfg.patch_size,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.trace(tape, p, x).map(|t| t.out)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<SmaTrace> {
        let [c, h, w] = match *tape.shape(x) {
            [c, h, w] if c == self.fuse.d_in => [c, h, w],
            _ => return Err(Error::shape("sma input", tape.shape(x), &[self.fuse.d_in])),
        };
        let ps = self.patch_size;
        let pixel = self.pixel.forward(tape, p, x).context(|| "sma pixel branch".into())?;
        let channel = self.channel.forward(tape, p, x).context(|| "sma channel branch".into())?;
        let q_src = tape.patchify(pixel, ps)?;
        let kv_src = tape.patchify(channel, ps)?;
        let (mixed, attention) = self
            .mhsa
            .forward_with_weights(tape, p, q_src, kv_src, kv_src)
            .context(|| "sma attention combination".into())?;
        let combined = tape.unpatchify(mixed, [c, h, w], ps)?;
        let spatial = self
            .spatial
            .forward(tape, p, combined)
            .context(|| "sma spatial branch".into())?;
        let sum = tape.add(pixel, channel)?;
        let sum = tape.add(sum, spatial)?;
        let tokens = tape.patchify(sum, 1)?;
        let fused = self.fuse.forward(tape, p, tokens).context(|| "sma fuse".into())?;
        let out = tape.unpatchify(fused, [c, h, w], 1)?;
        Ok(SmaTrace {
            pixel,
            channel,
            combined,
            spatial,
            attention,
            out,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let c = cfg.channels;
        PixelAttention::param_count(c)
            + ChannelAttention::param_count(c, cfg.channel_ratio)
            + SpatialAttention::param_count()
            + MultiHeadAttention::param_count(cfg.token_dim())
            + Linear::param_count(c, c)
    }
}

/// Feed-forward part with local mixing: linear up, pixel-wise conv,
/// depth-wise 3×3 conv, GELU, linear down.
#[derive(Clone, Copy, Debug)]
pub struct Emlp {
    pub up: Linear,
    pub pixel_conv: Conv2d,
    pub depth_conv: DepthwiseConv2d,
    pub down: Linear,
    pub gelu: GeluPlacement,
}

impl Emlp {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        let hidden = c * cfg.emlp_expansion;
        let k = cfg.emlp_pixel_kernel;
        Emlp {
            up: Linear::new(&mut init.scope("up"), c, hidden),
            pixel_conv: Conv2d::new(&mut init.scope("pixel_conv"), hidden, hidden, k, 1, k / 2),
            depth_conv: DepthwiseConv2d::new(&mut init.scope("depth_conv"), hidden, 3),
            down: Linear::new(&mut init.scope("down"), hidden, c),
            gelu: cfg.gelu,
        }
    }

    /// Maps `N×C` tokens of an `h×w` grid to `N×C` tokens.
    pub fn forward_tokens<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let hidden = self.up.d_out;
        let up = self.up.forward(tape, p, tokens)?;
        let maps = tape.unpatchify(up, [hidden, h, w], 1)?;
        let maps = self.pixel_conv.forward(tape, p, maps)?;
        let mut maps = self.depth_conv.forward(tape, p, maps)?;
        if self.gelu == GeluPlacement::BeforeDown {
            maps = tape.gelu(maps)?;
        }
        let t = tape.patchify(maps, 1)?;
        let down = self.down.forward(tape, p, t)?;
        match self.gelu {
            GeluPlacement::BeforeDown => Ok(down),
            GeluPlacement::AfterDown => tape.gelu(down),
        }
    }

    /// Spatial-layout wrapper around [`Emlp::forward_tokens`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let [c, h, w] = match *tape.shape(x) {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::Contract(format!("emlp expects C×H×W, got {:?}", tape.shape(x)))),
        };
        let tokens = tape.patchify(x, 1)?;
        let out = self.forward_tokens(tape, p, tokens, h, w)?;
        tape.unpatchify(out, [c, h, w], 1)
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let c = cfg.channels;
        let hidden = c * cfg.emlp_expansion;
        Linear::param_count(c, hidden)
            + Conv2d::param_count(hidden, hidden, cfg.emlp_pixel_kernel)
            + DepthwiseConv2d::param_count(hidden, 3)
            + Linear::param_count(hidden, c)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SmaBlock {
    pub ln1: LayerNorm,
    pub sma: Sma,
    pub ln2: LayerNorm,
    pub emlp: Emlp,
    pub use_sma: bool,
    pub use_emlp: bool,
}

impl SmaBlock {
    pub fn new<T: Scalar, R: Rng>(init: &mut ParamInit<'_, T, R>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(SmaBlock {
            ln1: LayerNorm::new(&mut init.scope("ln1"), c),
            sma: Sma::new(&mut init.scope("sma"), cfg)?,
            ln2: LayerNorm::new(&mut init.scope("ln2"), c),
            emlp: Emlp::new(&mut init.scope("emlp"), cfg),
            use_sma: cfg.use_sma,
            use_emlp: cfg.use_emlp,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let [c, h, w] = match *tape.shape(x) {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::Contract(format!("SMA block expects C×H×W, got {:?}", tape.shape(x)))),
        };
        let mut x = x;
        if self.use_sma {
            let tokens = tape.patchify(x, 1)?;
            let normed = self.ln1.forward(tape, p, tokens)?;
            let normed = tape.unpatchify(normed, [c, h, w], 1)?;
            let attended = self.sma.forward(tape, p, normed)?;
            x = tape.add(attended, x)?;
        }
        if self.use_emlp {
            let tokens = tape.patchify(x, 1)?;
            let normed = self.ln2.forward(tape, p, tokens)?;
            let mixed = self.emlp.forward_tokens(tape, p, normed, h, w)?;
            let mixed = tape.unpatchify(mixed, [c, h, w], 1)?;
            x = tape.add(mixed, x)?;
        }
        Ok(x)
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        2 * LayerNorm::param_count(cfg.channels) + Sma::param_count(cfg) + Emlp::param_count(cfg)
    }
}
