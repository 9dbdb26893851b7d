//! Fully-convolutional UNet blind denoiser with named, probe-able blocks.
//!
//! Blocks run `E1 … Ek, M, Dk … D1`. Every layer is `conv3×3 → layer_norm → ReLU`;
//! encoders after the first and the middle block start with a 2×2 average pool,
//! decoders start by upsampling the lower path and concatenating the matching
//! encoder output. A final convolution without normalization produces the
//! residual `f(x_σ) ≈ x − x_σ`, so the denoised image is `x_σ + f(x_σ)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndnet::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, LabError, Result};
use crate::seed::rng_for;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub encoder_blocks: usize,
    pub layers_per_encoder: usize,
    pub layers_middle: usize,
    pub layers_per_decoder: usize,
    pub kernel_size: usize,
    pub image_size: usize,
}

impl UNetConfig {
    /// 16×16 grayscale, two encoder blocks, 16 base channels.
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            encoder_blocks: 2,
            layers_per_encoder: 2,
            layers_middle: 3,
            layers_per_decoder: 3,
            kernel_size: 3,
            image_size: 16,
        }
    }

    /// The full-size network: 3 encoders of 2 layers, a 3-layer middle block
    /// with 512 channels, 6-layer decoders, RGB 64×64 input.
    pub fn paper_scale() -> Self {
        Self {
            in_channels: 3,
            base_channels: 64,
            encoder_blocks: 3,
            layers_per_encoder: 2,
            layers_middle: 3,
            layers_per_decoder: 6,
            kernel_size: 3,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return config_err("channel counts must be positive");
        }
        if self.encoder_blocks == 0 {
            return config_err("at least one encoder block is required");
        }
        if self.layers_per_encoder == 0 || self.layers_middle == 0 || self.layers_per_decoder == 0 {
            return config_err("every block needs at least one layer");
        }
        if self.kernel_size % 2 == 0 {
            return config_err(format!("kernel size {} must be odd", self.kernel_size));
        }
        let div = 1usize << self.encoder_blocks;
        if self.image_size == 0 || self.image_size % div != 0 {
            return config_err(format!(
                "image size {} is not divisible by 2^{} = {div}",
                self.image_size, self.encoder_blocks
            ));
        }
        Ok(())
    }

    /// Blocks in execution order.
    pub fn blocks(&self) -> Vec<Block> {
        let k = self.encoder_blocks;
        let mut out: Vec<Block> = (1..=k).map(Block::Encoder).collect();
        out.push(Block::Middle);
        out.extend((1..=k).rev().map(Block::Decoder));
        out
    }

    pub fn has_block(&self, block: Block) -> bool {
        match block {
            Block::Encoder(j) | Block::Decoder(j) => (1..=self.encoder_blocks).contains(&j),
            Block::Middle => true,
        }
    }

    pub fn middle_channels(&self) -> usize {
        self.base_channels << self.encoder_blocks
    }

    /// `(input channels, output channels)` of a block.
    pub fn block_channels(&self, block: Block) -> (usize, usize) {
        let b = self.base_channels;
        match block {
            Block::Encoder(1) => (self.in_channels, b),
            Block::Encoder(j) => (b << (j - 2), b << (j - 1)),
            Block::Middle => (b << (self.encoder_blocks - 1), self.middle_channels()),
            Block::Decoder(j) => ((b << j) + (b << (j - 1)), b << (j - 1)),
        }
    }

    /// Spatial extent of the activations inside a block.
    pub fn block_extent(&self, block: Block) -> usize {
        match block {
            Block::Encoder(j) | Block::Decoder(j) => self.image_size >> (j - 1),
            Block::Middle => self.image_size >> self.encoder_blocks,
        }
    }

    fn layers_in(&self, block: Block) -> usize {
        match block {
            Block::Encoder(_) => self.layers_per_encoder,
            Block::Middle => self.layers_middle,
            Block::Decoder(_) => self.layers_per_decoder,
        }
    }

    /// Closed-form parameter count: per hidden layer `cout·cin·k² + 2·cout`
    /// (kernel plus layer-norm affine), plus the output convolution and its bias.
    pub fn parameter_count(&self) -> usize {
        let kk = self.kernel_size * self.kernel_size;
        let mut total = 0;
        for block in self.blocks() {
            let (cin, cout) = self.block_channels(block);
            let first = cout * cin * kk + 2 * cout;
            let rest = cout * cout * kk + 2 * cout;
            total += first + (self.layers_in(block) - 1) * rest;
        }
        total + self.in_channels * self.base_channels * kk + self.in_channels
    }

    /// Operator chain from the input to the middle-block output.
    pub fn stages_to_middle(&self) -> Vec<Stage> {
        let mut stages = Vec::new();
        for j in 1..=self.encoder_blocks {
            if j > 1 {
                stages.push(Stage::Pool2);
            }
            stages.extend(std::iter::repeat_n(Stage::Conv(self.kernel_size), self.layers_per_encoder));
        }
        stages.push(Stage::Pool2);
        stages.extend(std::iter::repeat_n(Stage::Conv(self.kernel_size), self.layers_middle));
        stages
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Encoder(usize),
    Middle,
    Decoder(usize),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Encoder(j) => write!(f, "E{j}"),
            Block::Middle => write!(f, "M"),
            Block::Decoder(j) => write!(f, "D{j}"),
        }
    }
}

impl FromStr for Block {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Invalid(format!("unknown block '{s}'"));
        match s {
            "M" => Ok(Block::Middle),
            _ => {
                let (head, idx) = s.split_at(1.min(s.len()));
                let j: usize = idx.parse().map_err(|_| bad())?;
                if j == 0 {
                    return Err(bad());
                }
                match head {
                    "E" => Ok(Block::Encoder(j)),
                    "D" => Ok(Block::Decoder(j)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    Input,
    Output,
}

/// A histogram/activation tap: the tensor entering a block's first layer, or
/// the tensor leaving its last ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Probe {
    pub block: Block,
    pub position: Position,
}

impl Probe {
    pub fn input(block: Block) -> Self {
        Self {
            block,
            position: Position::Input,
        }
    }

    pub fn output(block: Block) -> Self {
        Self {
            block,
            position: Position::Output,
        }
    }

    /// Where φ is read.
    pub fn middle_output() -> Self {
        Self::output(Block::Middle)
    }

    /// All probes of a config in execution order (input before output).
    pub fn all(config: &UNetConfig) -> Vec<Probe> {
        config
            .blocks()
            .into_iter()
            .flat_map(|b| [Probe::input(b), Probe::output(b)])
            .collect()
    }

    /// Outputs sit behind a ReLU; so does every input except the raw image.
    pub fn is_post_relu(&self) -> bool {
        !(self.position == Position::Input && self.block == Block::Encoder(1))
    }

    pub fn channels(&self, config: &UNetConfig) -> usize {
        let (cin, cout) = config.block_channels(self.block);
        match self.position {
            Position::Input => cin,
            Position::Output => cout,
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pos = match self.position {
            Position::Input => "in",
            Position::Output => "out",
        };
        write!(f, "{}.{pos}", self.block)
    }
}

impl FromStr for Probe {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let Some((block, pos)) = s.split_once('.') else {
            return invalid(format!("probe '{s}' must look like 'M.out'"));
        };
        let position = match pos {
            "in" => Position::Input,
            "out" => Position::Output,
            _ => return invalid(format!("probe position '{pos}' must be 'in' or 'out'")),
        };
        Ok(Self {
            block: block.parse()?,
            position,
        })
    }
}

/// One step of a receptive-field chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// "Same" convolution with an odd square kernel.
    Conv(usize),
    /// 2×2 pooling with stride 2.
    Pool2,
}

/// Side length of the input region seen by one unit at the end of `stages`.
pub fn receptive_field_of(stages: &[Stage]) -> usize {
    let (mut rf, mut jump) = (1usize, 1usize);
    for stage in stages {
        match *stage {
            Stage::Conv(k) => rf += (k - 1) * jump,
            Stage::Pool2 => {
                rf += jump;
                jump *= 2;
            }
        }
    }
    rf
}

/// Receptive field of the middle-block output.
pub fn receptive_field(config: &UNetConfig) -> usize {
    receptive_field_of(&config.stages_to_middle())
}

/// Measures the receptive field by impulse propagation.
///
/// The chain is evaluated with all-ones kernels and no normalization, so every
/// path contributes positively and nothing cancels. A full row (then column)
/// of the input is set to one, and the centre output unit either responds or
/// does not; the responding rows and columns span the receptive field. The
/// canvas doubles until the field no longer touches the border.
pub fn measure_receptive_field(stages: &[Stage]) -> Result<usize> {
    let pools = stages.iter().filter(|s| **s == Stage::Pool2).count();
    let mut size = (1usize << pools).max(4) * 4;
    while size <= 4096 {
        let rows = responding_lines(stages, size, true)?;
        let cols = responding_lines(stages, size, false)?;
        let span = |hits: &[usize]| -> Option<(usize, usize)> { Some((*hits.first()?, *hits.last()?)) };
        let (Some((r0, r1)), Some((c0, c1))) = (span(&rows), span(&cols)) else {
            return invalid("impulse produced no response");
        };
        if r0 > 0 && c0 > 0 && r1 + 1 < size && c1 + 1 < size {
            return Ok((r1 - r0 + 1).max(c1 - c0 + 1));
        }
        size *= 2;
    }
    invalid("receptive field exceeds the 4096-pixel measurement canvas")
}

fn responding_lines(stages: &[Stage], size: usize, by_row: bool) -> Result<Vec<usize>> {
    let mut hits = Vec::new();
    for line in 0..size {
        let image = Tensor::<f64>::from_fn(&[1, 1, size, size], |i| {
            let (y, x) = (i / size, i % size);
            if (if by_row { y } else { x }) == line {
                1.0
            } else {
                0.0
            }
        });
        let mut tape = Tape::<f64>::inference();
        let mut h = tape.constant(image);
        let zero = tape.constant(Tensor::zeros(&[1]));
        for stage in stages {
            h = match *stage {
                Stage::Conv(k) => {
                    let w = tape.constant(Tensor::full(&[1, 1, k, k], 1.0));
                    tape.conv2d(h, w, zero)?
                }
                Stage::Pool2 => tape.avg_pool2(h)?,
            };
        }
        let out = tape.value(h);
        let (_, _, oh, ow) = out.dims4()?;
        if out.data()[(oh / 2) * ow + ow / 2] != 0.0 {
            hits.push(line);
        }
    }
    Ok(hits)
}

/// Anything that maps a noisy batch to a residual `f(x_σ) ≈ x − x_σ`.
pub trait Denoiser {
    /// `x` is `[B,C,H,W]`; the result has the same shape.
    fn residual(&self, x: &Tensor) -> Result<Tensor>;

    fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.add(&self.residual(x)?)?)
    }
}

/// How far to run the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Encoders and middle block only.
    Middle,
    Full,
}

/// Tape variables produced by one pass, indexed like [`UNetConfig::blocks`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub blocks: Vec<Block>,
    pub inputs: Vec<Var>,
    pub outputs: Vec<Var>,
    /// The residual; present for [`Depth::Full`].
    pub residual: Option<Var>,
}

impl Trace {
    pub fn probe(&self, probe: Probe) -> Option<Var> {
        let i = self.blocks.iter().position(|b| *b == probe.block)?;
        match probe.position {
            Position::Input => self.inputs.get(i).copied(),
            Position::Output => self.outputs.get(i).copied(),
        }
    }

    pub fn middle(&self) -> Var {
        self.probe(Probe::middle_output()).expect("every trace reaches the middle block")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSpec {
    block: Block,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    layers: Vec<LayerSpec>,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl UNetModel {
    /// Fan-in scaled uniform kernels (`±√(6/fan_in)` for hidden layers,
    /// `±√(1/fan_in)` for the output convolution), unit gains, zero biases.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = rng_for(seed, "unet.init");
        let kk = model.config.kernel_size * model.config.kernel_size;
        let hidden = model.layers.len();
        for (l, layer) in model.layers.iter().enumerate() {
            let bound = (6.0 / (layer.cin * kk) as f64).sqrt() as f32;
            for v in model.params[3 * l].data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            model.params[3 * l + 1].data_mut().fill(1.0);
        }
        let head_fan_in = model.config.base_channels * kk;
        let bound = (1.0 / head_fan_in as f64).sqrt() as f32;
        for v in model.params[3 * hidden].data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Ok(model)
    }

    /// Same layout as [`build`](Self::build) with every parameter zero.
    pub fn zeroed(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for block in config.blocks() {
            let (cin, cout) = config.block_channels(block);
            for l in 0..config.layers_in(block) {
                let cin = if l == 0 { cin } else { cout };
                layers.push(LayerSpec { block, cin, cout });
                names.push(format!("{block}.{l}.weight"));
                params.push(Tensor::zeros(&[cout, cin, k, k]));
                names.push(format!("{block}.{l}.gain"));
                params.push(Tensor::zeros(&[cout]));
                names.push(format!("{block}.{l}.bias"));
                params.push(Tensor::zeros(&[cout]));
            }
        }
        names.push("out.weight".into());
        params.push(Tensor::zeros(&[config.in_channels, config.base_channels, k, k]));
        names.push("out.bias".into());
        params.push(Tensor::zeros(&[config.in_channels]));
        Ok(Self {
            config,
            layers,
            names,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Number of scalars across all parameter tensors.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match the current layout.
    pub fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            ));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return invalid(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Sets the output convolution to zero, making the residual identically zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        self.params[n - 2].data_mut().fill(0.0);
        self.params[n - 1].data_mut().fill(0.0);
    }

    /// Places every parameter on `tape`, converted to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.cast(), requires_grad)).collect()
    }

    /// Runs the network on `x` (`[B,C,H,W]`) using parameters bound by [`bind`](Self::bind).
    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, depth: Depth) -> Result<Trace> {
        let cfg = &self.config;
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return invalid(format!(
                "input is {c}×{h}×{w}, model expects {}×{}×{}",
                cfg.in_channels, cfg.image_size, cfg.image_size
            ));
        }
        if params.len() != self.params.len() {
            return invalid("parameter binding does not match the model");
        }
        let eps = T::of(LAYER_NORM_EPS);
        let mut zero_bias: HashMap<usize, Var> = HashMap::new();
        let mut layer = 0usize;
        let mut run_block = |tape: &mut Tape<T>, mut h: Var, block: Block| -> Result<Var> {
            while layer < self.layers.len() && self.layers[layer].block == block {
                let cout = self.layers[layer].cout;
                let zb = *zero_bias.entry(cout).or_insert_with(|| tape.constant(Tensor::zeros(&[cout])));
                let p = &params[3 * layer..3 * layer + 3];
                h = tape.conv2d(h, p[0], zb)?;
                h = tape.layer_norm(h, p[1], p[2], eps)?;
                h = tape.relu(h);
                layer += 1;
            }
            Ok(h)
        };

        let mut trace = Trace {
            blocks: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            residual: None,
        };
        let mut skips = Vec::new();
        let mut h = x;
        for j in 1..=cfg.encoder_blocks {
            if j > 1 {
                h = tape.avg_pool2(h)?;
            }
            trace.blocks.push(Block::Encoder(j));
            trace.inputs.push(h);
            h = run_block(tape, h, Block::Encoder(j))?;
            trace.outputs.push(h);
            skips.push(h);
        }
        h = tape.avg_pool2(h)?;
        trace.blocks.push(Block::Middle);
        trace.inputs.push(h);
        h = run_block(tape, h, Block::Middle)?;
        trace.outputs.push(h);
        if depth == Depth::Middle {
            return Ok(trace);
        }
        for j in (1..=cfg.encoder_blocks).rev() {
            let up = tape.upsample_nearest2(h)?;
            h = tape.concat_channels(up, skips[j - 1])?;
            trace.blocks.push(Block::Decoder(j));
            trace.inputs.push(h);
            h = run_block(tape, h, Block::Decoder(j))?;
            trace.outputs.push(h);
        }
        let n = params.len();
        trace.residual = Some(tape.conv2d(h, params[n - 2], params[n - 1])?);
        Ok(trace)
    }

    /// Activation map at `probe` for a batch `[B,C,H,W]`.
    pub fn activations(&self, x: &Tensor, probe: Probe) -> Result<Tensor> {
        if !self.config.has_block(probe.block) {
            return invalid(format!("probe {probe} does not exist in this model"));
        }
        let depth = if matches!(probe.block, Block::Decoder(_)) {
            Depth::Full
        } else {
            Depth::Middle
        };
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.trace(&mut tape, &params, xv, depth)?;
        let var = trace
            .probe(probe)
            .ok_or_else(|| LabError::Invalid(format!("probe {probe} not reached")))?;
        Ok(tape.value(var).clone())
    }

    /// Activation maps at several probes from a single full pass.
    pub fn activations_many(&self, x: &Tensor, probes: &[Probe]) -> Result<Vec<Tensor>> {
        for p in probes {
            if !self.config.has_block(p.block) {
                return invalid(format!("probe {p} does not exist in this model"));
            }
        }
        let depth = if probes.iter().any(|p| matches!(p.block, Block::Decoder(_))) {
            Depth::Full
        } else {
            Depth::Middle
        };
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.trace(&mut tape, &params, xv, depth)?;
        Ok(probes
            .iter()
            .map(|p| tape.value(trace.probe(*p).expect("validated probe")).clone())
            .collect())
    }
}

impl Denoiser for UNetModel {
    fn residual(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.trace(&mut tape, &params, xv, Depth::Full)?;
        Ok(tape.value(trace.residual.expect("full depth")).clone())
    }
}

/// Adds a leading batch axis of one to a `[C,H,W]` image.
pub fn as_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.clone().reshape(&shape)?)
}
