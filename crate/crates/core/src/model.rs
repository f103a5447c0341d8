//! Residual U-shaped encoder/decoder built from SMA blocks.
//!
//! Encoder level `i` works on `2^i·C × H/2^i × W/2^i` features. Each level
//! runs its SMA blocks, keeps the result as a skip connection, downsamples
//! with a residual convolution block and applies that level's modulator.
//! The decoder mirrors this with transposed-convolution upsampling and
//! skip concatenation, and a 1×1 head produces per-class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::nn::{BlockConfig, Conv2d, ConvTranspose2d, GeluPlacement, SmaBlock};
use crate::params::{Bound, ParamId, ParamInit, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How logits become class probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Softmax across classes; class 0 is background.
    #[default]
    Softmax,
    /// Independent sigmoid per class channel.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub blocks_per_stage: Vec<usize>,
    /// SMA blocks after each decoder fusion; 0 disables them.
    pub decoder_blocks: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Patch side at full resolution; halves at every level down to 1.
    pub patch_size: usize,
    pub emlp_expansion: usize,
    pub emlp_pixel_kernel: usize,
    pub gelu_placement: GeluPlacement,
    pub channel_ratio: usize,
    pub height: usize,
    pub width: usize,
    pub use_sma: bool,
    pub use_emlp: bool,
    pub use_modulator: bool,
    pub output: OutputMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 16,
            stages: 4,
            blocks_per_stage: vec![2, 2, 2, 2],
            decoder_blocks: 1,
            heads: 4,
            num_classes: 3,
            patch_size: 1,
            emlp_expansion: 2,
            emlp_pixel_kernel: 1,
            gelu_placement: GeluPlacement::BeforeDown,
            channel_ratio: 4,
            height: 64,
            width: 64,
            use_sma: true,
            use_emlp: true,
            use_modulator: true,
            output: OutputMode::Softmax,
            init_seed: 0,
        }
    }
}

/// Feature shape at one resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageShape {
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("a model needs at least one stage".into()));
        }
        if self.blocks_per_stage.len() != self.stages {
            return Err(Error::Config(format!(
                "blocks_per_stage lists {} entries for {} stages",
                self.blocks_per_stage.len(),
                self.stages
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "base_channels {} is not divisible by heads {}",
                self.base_channels, self.heads
            )));
        }
        if self.channel_ratio == 0 || self.base_channels % self.channel_ratio != 0 {
            return Err(Error::Config(format!(
                "base_channels {} is not divisible by channel_ratio {}",
                self.base_channels, self.channel_ratio
            )));
        }
        let m = self.required_multiple();
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return Err(Error::Config(format!(
                "input {}×{} must be a positive multiple of {m}",
                self.height, self.width
            )));
        }
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch_size must be a power of two, got {}",
                self.patch_size
            )));
        }
        for level in 0..self.stages {
            let s = self.stage_shape(level);
            let p = self.patch_at(level);
            if s.height % p != 0 || s.width % p != 0 {
                return Err(Error::Config(format!(
                    "patch size {p} does not divide level {level} ({}×{})",
                    s.height, s.width
                )));
            }
            self.block_config(level).validate()?;
        }
        Ok(())
    }

    /// Spatial dimensions must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << self.stages
    }

    /// Shape of the features at `level` (0 = full resolution,
    /// `stages` = bottleneck).
    pub fn stage_shape(&self, level: usize) -> StageShape {
        StageShape {
            level,
            channels: self.base_channels << level,
            height: self.height >> level,
            width: self.width >> level,
        }
    }

    pub fn patch_at(&self, level: usize) -> usize {
        (self.patch_size >> level).max(1)
    }

    pub fn block_config(&self, level: usize) -> BlockConfig {
        BlockConfig {
            channels: self.stage_shape(level).channels,
            heads: self.heads,
            channel_ratio: self.channel_ratio,
            emlp_expansion: self.emlp_expansion,
            emlp_pixel_kernel: self.emlp_pixel_kernel,
            gelu: self.gelu_placement,
            patch_size: self.patch_at(level),
            use_sma: self.use_sma,
            use_emlp: self.use_emlp,
        }
    }
}

/// Residual downsampling: three 3×3 convolutions (the first with stride
/// 2) summed with a strided 1×1 projection.
#[derive(Clone, Copy, Debug)]
pub struct Downsample {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub residual: Conv2d,
}

impl Downsample {
    pub fn new<T: Scalar>(init: &mut ParamInit<'_, T, ChaCha8Rng>, c: usize) -> Self {
        Downsample {
            conv1: Conv2d::new(&mut init.scope("conv1"), c, 2 * c, 3, 2, 1),
            conv2: Conv2d::new(&mut init.scope("conv2"), 2 * c, 2 * c, 3, 1, 1),
            conv3: Conv2d::new(&mut init.scope("conv3"), 2 * c, 2 * c, 3, 1, 1),
            residual: Conv2d::new(&mut init.scope("residual"), c, 2 * c, 1, 2, 0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Config(format!("downsample needs even spatial dims, got {s:?}")));
        }
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let main = self.conv3.forward(tape, p, h)?;
        let residual = self.residual.forward(tape, p, x)?;
        tape.add(main, residual)
    }

    pub fn param_count(c: usize) -> usize {
        Conv2d::param_count(c, 2 * c, 3) + 2 * Conv2d::param_count(2 * c, 2 * c, 3) + Conv2d::param_count(c, 2 * c, 1)
    }
}

/// Learnable position embedding plus channel gate, `(x + P) ⊙ g`.
/// Initialized to the identity (`P = 0`, `g = 1`).
#[derive(Clone, Copy, Debug)]
pub struct Modulator {
    pub position: ParamId,
    pub gate: ParamId,
    pub shape: StageShape,
}

impl Modulator {
    pub fn new<T: Scalar>(init: &mut ParamInit<'_, T, ChaCha8Rng>, shape: StageShape) -> Self {
        Modulator {
            position: init.zeros("position", &shape.dims()),
            gate: init.ones("gate", &[shape.channels]),
            shape,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x) != self.shape.dims() {
            return Err(Error::shape("modulator", tape.shape(x), &self.shape.dims()));
        }
        let shifted = tape.add(x, p.var(self.position))?;
        tape.scale_channels(shifted, p.var(self.gate))
    }

    pub fn param_count(shape: StageShape) -> usize {
        shape.channels * shape.height * shape.width + shape.channels
    }
}

/// Upsample, concatenate `(upsampled, skip)`, fuse with a 3×3 conv + ReLU,
/// then run the level's SMA blocks.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose2d,
    pub fuse: Conv2d,
    pub blocks: Vec<SmaBlock>,
}

impl DecoderStage {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, skip: Var) -> Result<Var> {
        let up = self.up.forward(tape, p, x)?;
        if tape.shape(up) != tape.shape(skip) {
            return Err(Error::shape("decoder skip", tape.shape(up), tape.shape(skip)));
        }
        let cat = tape.concat(&[up, skip])?;
        let fused = self.fuse.forward(tape, p, cat)?;
        let mut h = tape.relu(fused)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<SmaBlock>,
    pub down: Downsample,
}

/// Intermediate features of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Output of the initial projection.
    pub stem: Var,
    /// Encoder outputs after each downsample + modulator, levels 1..=stages.
    pub encoder: Vec<Var>,
    /// Skip features, levels 0..stages.
    pub skips: Vec<Var>,
    /// Decoder outputs, deepest first.
    pub decoder: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SmaFormer<T: Scalar> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    modulators: Vec<Modulator>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl<T: Scalar> SmaFormer<T> {
    /// Builds the layer layout and draws initial parameters from
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let mut init = ParamInit::new(&mut params, &mut rng);
        let c = config.base_channels;
        let stem = Conv2d::new(&mut init.scope("stem"), config.in_channels, c, 3, 1, 1);
        let mut encoder = Vec::with_capacity(config.stages);
        let mut modulators = Vec::with_capacity(config.stages);
        for level in 0..config.stages {
            let shape = config.stage_shape(level);
            let bcfg = config.block_config(level);
            let mut stage = init.scope(&format!("stage{level}"));
            let blocks = (0..config.blocks_per_stage[level])
                .map(|j| SmaBlock::new(&mut stage.scope(&format!("block{j}")), &bcfg))
                .collect::<Result<Vec<_>>>()?;
            let down = Downsample::new(&mut stage.scope("down"), shape.channels);
            modulators.push(Modulator::new(&mut stage.scope("modulator"), config.stage_shape(level + 1)));
            encoder.push(EncoderStage { blocks, down });
        }
        let mut decoder = Vec::with_capacity(config.stages);
        for j in 0..config.stages {
            let level = config.stages - 1 - j;
            let out = config.stage_shape(level).channels;
            let bcfg = config.block_config(level);
            let mut stage = init.scope(&format!("decoder{j}"));
            let up = ConvTranspose2d::new(&mut stage.scope("up"), 2 * out, out);
            let fuse = Conv2d::new(&mut stage.scope("fuse"), 2 * out, out, 3, 1, 1);
            let blocks = (0..config.decoder_blocks)
                .map(|k| SmaBlock::new(&mut stage.scope(&format!("block{k}")), &bcfg))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage { up, fuse, blocks });
        }
        let head = Conv2d::new(&mut init.scope("head"), c, config.num_classes, 1, 1, 0);
        Ok(SmaFormer {
            config,
            params,
            stem,
            encoder,
            modulators,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Scalar>(&self) -> SmaFormer<U> {
        SmaFormer {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            encoder: self.encoder.clone(),
            modulators: self.modulators.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    pub fn modulators(&self) -> &[Modulator] {
        &self.modulators
    }

    /// Turns the modulators on or off without touching parameters.
    pub fn set_use_modulator(&mut self, on: bool) {
        self.config.use_modulator = on;
    }

    /// Conv + ReLU lifting the image to `C` channels.
    pub fn initial_projection(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Var> {
        let want = [self.config.in_channels, self.config.height, self.config.width];
        let s = tape.shape(img);
        if s.len() != 3 || s[0] != want[0] {
            return Err(Error::shape("initial projection", s, &want));
        }
        let m = self.config.required_multiple();
        if s[1] % m != 0 || s[2] % m != 0 {
            return Err(Error::Config(format!(
                "input {}×{} must be a multiple of {m}",
                s[1], s[2]
            )));
        }
        let h = self.stem.forward(tape, p, img)?;
        tape.relu(h)
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Var> {
        self.forward_trace(tape, p, img).map(|t| t.logits)
    }

    pub fn forward_trace(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<ForwardTrace> {
        let want = [self.config.in_channels, self.config.height, self.config.width];
        if tape.shape(img) != want {
            return Err(Error::shape("model input", tape.shape(img), &want));
        }
        let stem = self.initial_projection(tape, p, img)?;
        let mut x = stem;
        let mut skips = Vec::with_capacity(self.config.stages);
        let mut encoder = Vec::with_capacity(self.config.stages);
        for (level, stage) in self.encoder.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                x = block
                    .forward(tape, p, x)
                    .context(|| format!("encoder stage {level} block {j}"))?;
            }
            skips.push(x);
            x = stage
                .down
                .forward(tape, p, x)
                .context(|| format!("encoder stage {level} downsample"))?;
            if self.config.use_modulator {
                x = self.modulators[level]
                    .forward(tape, p, x)
                    .context(|| format!("encoder stage {level} modulator"))?;
            }
            encoder.push(x);
        }
        let mut decoder = Vec::with_capacity(self.config.stages);
        for (j, stage) in self.decoder.iter().enumerate() {
            let skip = skips[self.config.stages - 1 - j];
            x = stage
                .forward(tape, p, x, skip)
                .context(|| format!("decoder stage {j}"))?;
            decoder.push(x);
        }
        let logits = self.head.forward(tape, p, x).context(|| "output head".into())?;
        Ok(ForwardTrace {
            stem,
            encoder,
            skips,
            decoder,
            logits,
        })
    }

    /// Class probabilities laid out `classes × (H·W)`.
    pub fn probabilities(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        let k = self.config.num_classes;
        let probs = match self.config.output {
            OutputMode::Softmax => tape.softmax(logits, 0)?,
            OutputMode::Sigmoid => tape.sigmoid(logits)?,
        };
        tape.reshape(probs, &[k, self.config.height * self.config.width])
    }

    /// BCE-Dice loss of one image against its class-id mask.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Bound, img: Var, mask: &[u8]) -> Result<Var> {
        let logits = self.forward(tape, p, img)?;
        let probs = self.probabilities(tape, logits)?;
        let target = one_hot::<T>(mask, self.config.num_classes, self.config.output)?;
        tape.bce_dice(probs, &target, T::lit(crate::loss::DICE_EPS))
    }

    /// Logits for an image tensor without recording gradients.
    pub fn predict_logits(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let logits = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(logits).clone())
    }
}

/// One-hot targets `classes × pixels` for a class-id mask. In sigmoid mode
/// with a single class, channel 0 marks the foreground (id ≥ 1).
pub fn one_hot<T: Scalar>(mask: &[u8], classes: usize, mode: OutputMode) -> Result<Tensor<T>> {
    let n = mask.len();
    let mut data = vec![T::zero(); classes * n];
    for (j, &m) in mask.iter().enumerate() {
        let class = match (mode, classes) {
            (OutputMode::Sigmoid, 1) => {
                if m == 0 {
                    continue;
                }
                0
            }
            _ => m as usize,
        };
        if class >= classes {
            return Err(Error::Contract(format!(
                "mask class {m} at pixel {j} exceeds {classes} classes"
            )));
        }
        data[class * n + j] = T::one();
    }
    Ok(Tensor::from_parts(vec![classes, n], data))
}

/// Closed-form parameter count of a configuration.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let c = config.base_channels;
    let mut total = Conv2d::param_count(config.in_channels, c, 3);
    for level in 0..config.stages {
        let shape = config.stage_shape(level);
        total += config.blocks_per_stage[level] * SmaBlock::param_count(&config.block_config(level));
        total += Downsample::param_count(shape.channels);
        total += Modulator::param_count(config.stage_shape(level + 1));
    }
    for level in 0..config.stages {
        let out = config.stage_shape(level).channels;
        total += ConvTranspose2d::param_count(2 * out, out);
        total += Conv2d::param_count(2 * out, out, 3);
        total += config.decoder_blocks * SmaBlock::param_count(&config.block_config(level));
    }
    total += Conv2d::param_count(c, config.num_classes, 1);
    Ok(total)
}
