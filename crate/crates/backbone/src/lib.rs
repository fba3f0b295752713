//! Residual-network backbone family used as the feature extractor.
//!
//! The full-width, 224-input, depth-18 instance reproduces the reference
//! stem exactly (7x7 stride-2 pad-3 conv with bias, batchnorm, ReLU,
//! 3x3 stride-2 pad-1 max pool) and ends in global average pooling with no
//! classification head. Depth, input channel count (1 or 2) and a width
//! multiplier scale the same layout down to desk size.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use msas_tensor::{ParamSet, Result, Tape, Tensor, TensorError, Var};

/// Network depth variant; 18 and 34 use basic blocks, 50 uses bottlenecks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    D18,
    D34,
    D50,
}

impl Depth {
    pub fn from_layers(layers: u32) -> Result<Self> {
        match layers {
            18 => Ok(Depth::D18),
            34 => Ok(Depth::D34),
            50 => Ok(Depth::D50),
            other => Err(TensorError::InvalidArg {
                op: "Depth::from_layers",
                detail: format!("unsupported depth {other}, expected 18, 34 or 50"),
            }),
        }
    }

    pub fn layers(self) -> u32 {
        match self {
            Depth::D18 => 18,
            Depth::D34 => 34,
            Depth::D50 => 50,
        }
    }

    fn block_counts(self) -> [usize; 4] {
        match self {
            Depth::D18 => [2, 2, 2, 2],
            Depth::D34 | Depth::D50 => [3, 4, 6, 3],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, Depth::D50)
    }

    /// Output-channel expansion of one block relative to its stage width.
    fn expansion(self) -> usize {
        if self.bottleneck() {
            4
        } else {
            1
        }
    }
}

/// Shape of the backbone: depth, input channels, width scale, input side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: Depth,
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn new(depth: Depth, in_channels: usize, width_multiplier: f64, input_size: usize) -> Result<Self> {
        let cfg = BackboneConfig { depth, in_channels, width_multiplier, input_size };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale default: quarter width, 64-pixel snippets, single channel.
    pub fn desk(depth: Depth, in_channels: usize) -> Result<Self> {
        Self::new(depth, in_channels, 0.25, 64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 2) {
            return Err(TensorError::InvalidArg {
                op: "BackboneConfig",
                detail: format!("in_channels must be 1 or 2, got {}", self.in_channels),
            });
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(TensorError::InvalidArg {
                op: "BackboneConfig",
                detail: format!("width_multiplier must be in (0, 1], got {}", self.width_multiplier),
            });
        }
        let base = self.width_multiplier * 64.0;
        if (base - base.round()).abs() > 1e-9 || base.round() < 4.0 {
            return Err(TensorError::InvalidArg {
                op: "BackboneConfig",
                detail: format!("width_multiplier * 64 must be an integer >= 4, got {base}"),
            });
        }
        if self.input_size < 8 {
            return Err(TensorError::InvalidArg {
                op: "BackboneConfig",
                detail: format!("input_size {} too small for the stem", self.input_size),
            });
        }
        Ok(())
    }

    /// Base channel count of the stem (64 at full width).
    pub fn base_channels(&self) -> usize {
        (self.width_multiplier * 64.0).round() as usize
    }

    /// Width of stage `s` in {0..4} before block expansion.
    fn stage_width(&self, stage: usize) -> usize {
        self.base_channels() << stage
    }

    /// Feature width produced by `forward`: 512*w for 18/34, 2048*w for 50.
    pub fn embed_dim(&self) -> usize {
        self.stage_width(3) * self.depth.expansion()
    }
}

/// All parameters and batchnorm running statistics of one backbone.
///
/// `params` holds the trainable tensors; `stats` holds per-batchnorm
/// running mean/variance buffers (state, not trained). Both use stable
/// dotted names: `stem.conv.w`, `stage1.block0.conv1.w`,
/// `stage2.block0.down.bn.gamma`, ... with stats under `<bn>.mean`/`<bn>.var`.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub stats: ParamSet,
}

/// Result of a gradient-tracking forward pass: the leaf `Var` for every
/// trainable parameter (for optimizer updates) plus the feature output.
pub struct ForwardPass {
    pub vars: BTreeMap<String, Var>,
    pub features: Var,
}

struct Block {
    name: String,
    in_ch: usize,
    mid_ch: usize,
    out_ch: usize,
    stride: usize,
    bottleneck: bool,
}

fn blocks_of(config: &BackboneConfig) -> Vec<Block> {
    let counts = config.depth.block_counts();
    let expansion = config.depth.expansion();
    let mut blocks = Vec::new();
    let mut in_ch = config.base_channels();
    for stage in 0..4 {
        let mid = config.stage_width(stage);
        let out = mid * expansion;
        for index in 0..counts[stage] {
            let stride = if stage > 0 && index == 0 { 2 } else { 1 };
            blocks.push(Block {
                name: format!("stage{}.block{}", stage + 1, index),
                in_ch,
                mid_ch: mid,
                out_ch: out,
                stride,
                bottleneck: config.depth.bottleneck(),
            });
            in_ch = out;
        }
    }
    blocks
}

impl Block {
    fn needs_downsample(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }

    /// Convolutions of this block as (suffix, out, in, kernel, stride).
    fn convs(&self) -> Vec<(String, usize, usize, usize, usize)> {
        if self.bottleneck {
            vec![
                ("conv1".into(), self.mid_ch, self.in_ch, 1, 1),
                ("conv2".into(), self.mid_ch, self.mid_ch, 3, self.stride),
                ("conv3".into(), self.out_ch, self.mid_ch, 1, 1),
            ]
        } else {
            vec![
                ("conv1".into(), self.out_ch, self.in_ch, 3, self.stride),
                ("conv2".into(), self.out_ch, self.out_ch, 3, 1),
            ]
        }
    }
}

fn kaiming_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    let fan_in = in_ch * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data: Vec<f64> = (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![out_ch, in_ch, k, k], data).expect("shape matches data")
}

fn add_bn(params: &mut ParamSet, stats: &mut ParamSet, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
    params.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
    stats.insert(format!("{name}.mean"), Tensor::zeros(vec![channels]));
    stats.insert(format!("{name}.var"), Tensor::full(vec![channels], 1.0));
}

impl BackboneParams {
    /// Deterministic initialization: Kaiming-normal conv weights
    /// (std = sqrt(2 / fan_in)), batchnorm gamma 1 / beta 0, biases 0.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stats = ParamSet::new();

        let c1 = config.base_channels();
        params.insert("stem.conv.w", kaiming_conv(&mut rng, c1, config.in_channels, 7));
        params.insert("stem.conv.b", Tensor::zeros(vec![c1]));
        add_bn(&mut params, &mut stats, "stem.bn", c1);

        for block in blocks_of(&config) {
            for (suffix, out, inc, k, _) in block.convs() {
                params.insert(
                    format!("{}.{suffix}.w", block.name),
                    kaiming_conv(&mut rng, out, inc, k),
                );
                let bn_name = format!("{}.bn{}", block.name, &suffix[4..]);
                add_bn(&mut params, &mut stats, &bn_name, out);
            }
            if block.needs_downsample() {
                params.insert(
                    format!("{}.down.conv.w", block.name),
                    kaiming_conv(&mut rng, block.out_ch, block.in_ch, 1),
                );
                add_bn(&mut params, &mut stats, &format!("{}.down.bn", block.name), block.out_ch);
            }
        }
        Ok(BackboneParams { config, params, stats })
    }

    /// Exact number of trainable parameter elements.
    pub fn parameter_count(&self) -> usize {
        self.params.total_elems()
    }

    /// Training-mode forward: batch statistics, running-stat updates, and
    /// (when `track_grads`) gradient recording for every parameter.
    pub fn forward_train(&mut self, tape: &mut Tape, batch: &Tensor, track_grads: bool) -> Result<ForwardPass> {
        let config = self.config;
        forward_impl(&config, &self.params, Stats::Train(&mut self.stats), tape, batch, track_grads)
    }

    /// Eval-mode forward: running statistics, no state mutation, no grads.
    /// A pure function of (parameters, batch).
    pub fn forward_eval(&self, tape: &mut Tape, batch: &Tensor) -> Result<Var> {
        let config = self.config;
        let pass = forward_impl(&config, &self.params, Stats::Eval(&self.stats), tape, batch, false)?;
        Ok(pass.features)
    }

    /// Eval features as a plain tensor, on a private tape.
    pub fn features_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

enum Stats<'a> {
    Train(&'a mut ParamSet),
    Eval(&'a ParamSet),
}

fn forward_impl(
    config: &BackboneConfig,
    params: &ParamSet,
    mut stats: Stats<'_>,
    tape: &mut Tape,
    batch: &Tensor,
    track_grads: bool,
) -> Result<ForwardPass> {
    let (_, c, h, w) = batch.dims4("backbone forward")?;
    if c != config.in_channels || h != config.input_size || w != config.input_size {
        return Err(TensorError::ShapeMismatch {
            op: "backbone forward",
            detail: format!(
                "batch is {c}x{h}x{w}, config expects {}x{}x{}",
                config.in_channels, config.input_size, config.input_size
            ),
        });
    }

    let mut vars: BTreeMap<String, Var> = BTreeMap::new();
    for (name, tensor) in params.iter() {
        vars.insert(name.clone(), tape.leaf(tensor.clone(), track_grads));
    }
    let training = matches!(stats, Stats::Train(_));

    let mut bn = |tape: &mut Tape, stats: &mut Stats<'_>, vars: &BTreeMap<String, Var>, x: Var, name: &str| -> Result<Var> {
        let gamma = vars[&format!("{name}.gamma")];
        let beta = vars[&format!("{name}.beta")];
        // running buffers are copied out and (in training) written back;
        // they never participate in the tape
        let (mut rm, mut rv) = match stats {
            Stats::Train(s) => {
                (s.require(&format!("{name}.mean"))?.clone(), s.require(&format!("{name}.var"))?.clone())
            }
            Stats::Eval(s) => {
                (s.require(&format!("{name}.mean"))?.clone(), s.require(&format!("{name}.var"))?.clone())
            }
        };
        let out = tape.batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, training)?;
        if let Stats::Train(s) = stats {
            s.insert(format!("{name}.mean"), rm);
            s.insert(format!("{name}.var"), rv);
        }
        Ok(out)
    };

    // stem: conv 7/2/3 -> bn -> relu -> maxpool 3/2/1
    let input = tape.constant(batch.clone());
    let mut x = tape.conv2d(input, vars["stem.conv.w"], Some(vars["stem.conv.b"]), 2, 3)?;
    x = bn(tape, &mut stats, &vars, x, "stem.bn")?;
    x = tape.relu(x)?;
    x = tape.maxpool2d(x, 3, 2, 1)?;

    for block in blocks_of(config) {
        let identity = x;
        let convs = block.convs();
        let last = convs.len() - 1;
        let mut y = x;
        for (i, (suffix, _, _, k, stride)) in convs.iter().enumerate() {
            let padding = if *k == 3 { 1 } else { 0 };
            y = tape.conv2d(y, vars[&format!("{}.{suffix}.w", block.name)], None, *stride, padding)?;
            y = bn(tape, &mut stats, &vars, y, &format!("{}.bn{}", block.name, &suffix[4..]))?;
            if i != last {
                y = tape.relu(y)?;
            }
        }
        let shortcut = if block.needs_downsample() {
            let d = tape.conv2d(identity, vars[&format!("{}.down.conv.w", block.name)], None, block.stride, 0)?;
            bn(tape, &mut stats, &vars, d, &format!("{}.down.bn", block.name))?
        } else {
            identity
        };
        x = tape.add(y, shortcut)?;
        x = tape.relu(x)?;
    }

    x = tape.adaptive_avg_pool2d(x, 1)?;
    let features = tape.flatten(x)?;
    Ok(ForwardPass { vars, features })
}

/// One row of the layer-by-layer architecture summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub layer: String,
    /// C x H x W of the layer output for a single input image.
    pub output_shape: Vec<usize>,
    pub param_count: usize,
}

/// Analytic per-layer output shapes and parameter counts, mirroring the
/// module layout of `build`. Pooling and activation layers own no
/// parameters; batchnorm counts gamma + beta only.
pub fn summary(config: &BackboneConfig) -> Result<Vec<LayerSummary>> {
    config.validate()?;
    let out = |side: usize, k: usize, s: usize, p: usize| (side + 2 * p - k) / s + 1;
    let c1 = config.base_channels();
    let mut rows = Vec::new();
    let mut side = out(config.input_size, 7, 2, 3);
    rows.push(LayerSummary {
        layer: "Conv2d".into(),
        output_shape: vec![c1, side, side],
        param_count: c1 * config.in_channels * 49 + c1,
    });
    rows.push(LayerSummary {
        layer: "BatchNorm2d".into(),
        output_shape: vec![c1, side, side],
        param_count: 2 * c1,
    });
    rows.push(LayerSummary { layer: "ReLU".into(), output_shape: vec![c1, side, side], param_count: 0 });
    side = out(side, 3, 2, 1);
    rows.push(LayerSummary { layer: "MaxPool2d".into(), output_shape: vec![c1, side, side], param_count: 0 });

    for block in blocks_of(config) {
        let mut count = 0;
        for (_, o, i, k, _) in block.convs() {
            count += o * i * k * k + 2 * o; // conv weights + bn gamma/beta
        }
        if block.needs_downsample() {
            count += block.out_ch * block.in_ch + 2 * block.out_ch;
        }
        if block.stride == 2 {
            side = out(side, 3, 2, 1);
        }
        rows.push(LayerSummary {
            layer: format!("BasicBlock[{}]", block.name),
            output_shape: vec![block.out_ch, side, side],
            param_count: count,
        });
    }
    rows.push(LayerSummary {
        layer: "AdaptiveAvgPool2d".into(),
        output_shape: vec![config.embed_dim(), 1, 1],
        param_count: 0,
    });
    Ok(rows)
}
