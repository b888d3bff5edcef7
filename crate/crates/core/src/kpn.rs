//! UNet-style kernel prediction network and the end-to-end derain operator.
//!
//! Encoder level `i` runs two 3x3 conv + ReLU blocks at `base * 2^i` channels,
//! with 2x2 average pooling between levels. The decoder upsamples (nearest),
//! concatenates `[upsampled, skip]`, and runs two more 3x3 conv + ReLU blocks.
//! A 1x1 head emits `K^2` kernel channels per pixel, which drive the
//! pixel-wise dilated filter at every configured dilation before fusion.

use rand::SeedableRng;

use crate::error::{invalid_arg, Result};
use crate::filtering::{
    averaging_fusion, fuse_scales, fuse_scales_backward, normalize_kernels,
    normalize_kernels_backward, pixel_wise_dilated_filter, pixel_wise_dilated_filter_backward,
    DilationFactors, FusionParams, KernelField,
};
use crate::rng::PinnedRng;
use crate::tensor::conv::conv2d_backward_impl;
use crate::tensor::{
    avgpool2x2_backward, avgpool2x2_forward, concat_channels_backward, concat_channels_forward,
    conv2d_forward, relu_backward, relu_forward, upsample_nearest2x_backward,
    upsample_nearest2x_forward, ConvGrads, ConvLayerParams, Tensor,
};

/// Scale applied to the He-initialised head weights so the untrained
/// network starts close to the delta kernel.
pub const HEAD_INIT_SCALE: f64 = 0.0025;

/// Centre-tap logit used for identity start when kernels are softmax-normalised.
pub const NORMALIZED_CENTER_LOGIT: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct KpnConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel_width: usize,
    pub dilations: DilationFactors,
    pub input_channels: usize,
    /// Softmax over each pixel's taps; off by default.
    pub normalize_kernels: bool,
}

impl Default for KpnConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 32,
            kernel_width: 5,
            dilations: DilationFactors::default(),
            input_channels: 3,
            normalize_kernels: false,
        }
    }
}

impl KpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(invalid_arg!("levels must be >= 1"));
        }
        if self.base_channels < 1 {
            return Err(invalid_arg!("base_channels must be >= 1"));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(invalid_arg!(
                "kernel width {} must be odd",
                self.kernel_width
            ));
        }
        if self.input_channels < 1 {
            return Err(invalid_arg!("input_channels must be >= 1"));
        }
        Ok(())
    }

    /// Spatial dims must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn taps(&self) -> usize {
        self.kernel_width * self.kernel_width
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |c_in: usize, c_out: usize, k: usize| c_out * c_in * k * k + c_out;
        let mut total = 0;
        for level in 0..self.levels {
            let c_in = if level == 0 {
                self.input_channels
            } else {
                self.channels_at(level - 1)
            };
            let c = self.channels_at(level);
            total += conv(c_in, c, 3) + conv(c, c, 3);
        }
        for level in 0..self.levels - 1 {
            let c = self.channels_at(level);
            total += conv(self.channels_at(level + 1) + c, c, 3) + conv(c, c, 3);
        }
        total += conv(self.base_channels, self.taps(), 1);
        let img = self.input_channels;
        total += conv(self.dilations.len() * img, img, 3);
        total
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.input_channels {
            return Err(invalid_arg!(
                "image has {c} channels, network expects {}",
                self.input_channels
            ));
        }
        let m = self.required_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(invalid_arg!(
                "image size {h}x{w} must be a non-zero multiple of {m}"
            ));
        }
        Ok(())
    }
}

/// Two 3x3 conv + ReLU layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub first: ConvLayerParams,
    pub second: ConvLayerParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KpnParams {
    pub config: KpnConfig,
    pub encoder: Vec<ConvBlock>,
    /// `decoder[j]` produces level-`j` features; there are `levels - 1` of them.
    pub decoder: Vec<ConvBlock>,
    pub head: ConvLayerParams,
    pub fusion: FusionParams,
}

/// Gradients in the order of [`KpnParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct KpnGrads {
    pub tensors: Vec<Tensor>,
}

impl KpnGrads {
    pub fn scale(&self, c: f64) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| t.scale(c)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn he_conv(
    rng: &mut PinnedRng,
    c_out: usize,
    c_in: usize,
    k: usize,
    scale: f64,
) -> ConvLayerParams {
    let std = (2.0 / (c_in * k * k) as f64).sqrt() * scale;
    ConvLayerParams {
        weight: Tensor::random_normal(&[c_out, c_in, k, k], std, rng),
        bias: Tensor::zeros(&[c_out]),
        stride: 1,
        padding: k / 2,
    }
}

fn head_bias(config: &KpnConfig) -> Tensor {
    let mut bias = Tensor::zeros(&[config.taps()]);
    let centre = config.taps() / 2;
    bias.data_mut()[centre] = if config.normalize_kernels {
        NORMALIZED_CENTER_LOGIT
    } else {
        1.0
    };
    bias
}

impl KpnParams {
    /// Seeded He (fan-in) initialisation with an identity start: the head's
    /// bias selects the delta kernel, its weights are scaled by
    /// [`HEAD_INIT_SCALE`], and the fusion layer averages the scales.
    pub fn init(config: &KpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = PinnedRng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.levels);
        for level in 0..config.levels {
            let c_in = if level == 0 {
                config.input_channels
            } else {
                config.channels_at(level - 1)
            };
            let c = config.channels_at(level);
            encoder.push(ConvBlock {
                first: he_conv(&mut rng, c, c_in, 3, 1.0),
                second: he_conv(&mut rng, c, c, 3, 1.0),
            });
        }
        let mut decoder = Vec::with_capacity(config.levels - 1);
        for level in 0..config.levels - 1 {
            let c = config.channels_at(level);
            decoder.push(ConvBlock {
                first: he_conv(&mut rng, c, config.channels_at(level + 1) + c, 3, 1.0),
                second: he_conv(&mut rng, c, c, 3, 1.0),
            });
        }
        let mut head = he_conv(
            &mut rng,
            config.taps(),
            config.base_channels,
            1,
            HEAD_INIT_SCALE,
        );
        head.bias = head_bias(config);
        let fusion = averaging_fusion(config.dilations.len(), config.input_channels);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
            fusion,
        })
    }

    /// Parameters whose derain output equals the input: zero head weights,
    /// delta-kernel head bias, averaging fusion. Backbone weights are seeded.
    pub fn identity(config: &KpnConfig, seed: u64) -> Result<Self> {
        let mut params = Self::init(config, seed)?;
        params.head.weight = params.head.weight.zeros_like();
        params.head.bias = Tensor::zeros(&[config.taps()]);
        params.head.bias.data_mut()[config.taps() / 2] = 1.0;
        Ok(params)
    }

    /// All trainable tensors in a fixed order: encoder blocks, decoder blocks,
    /// head, fusion; weight before bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn layers(&self) -> Vec<&ConvLayerParams> {
        let mut out = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            out.push(&b.first);
            out.push(&b.second);
        }
        out.push(&self.head);
        out.push(&self.fusion);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayerParams> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut b.first);
            out.push(&mut b.second);
        }
        out.push(&mut self.head);
        out.push(&mut self.fusion);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in [`KpnParams::tensors`] order.
    pub fn from_tensors(config: &KpnConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = Self::identity(config, 0)?;
        let expected: Vec<Vec<usize>> = params
            .tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        if tensors.len() != expected.len() {
            return Err(invalid_arg!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            ));
        }
        for (i, (slot, t)) in params.tensors_mut().into_iter().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(invalid_arg!(
                    "parameter {i}: expected shape {:?}, got {:?}",
                    expected[i],
                    t.shape()
                ));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn zero_grads(&self) -> KpnGrads {
        KpnGrads {
            tensors: self.tensors().iter().map(|t| t.zeros_like()).collect(),
        }
    }
}

struct BlockTape {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
}

fn block_forward(block: &ConvBlock, input: Tensor) -> Result<(Tensor, BlockTape)> {
    let pre1 = conv2d_forward(&input, &block.first)?;
    let act1 = relu_forward(&pre1);
    let pre2 = conv2d_forward(&act1, &block.second)?;
    let out = relu_forward(&pre2);
    Ok((
        out,
        BlockTape {
            input,
            pre1,
            act1,
            pre2,
        },
    ))
}

fn block_backward(
    block: &ConvBlock,
    tape: &BlockTape,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, ConvGrads, ConvGrads)> {
    let g_pre2 = relu_backward(&tape.pre2, grad_out)?;
    let (g_act1, g2) = conv2d_backward_impl(&tape.act1, &block.second, &g_pre2, true)?;
    let g_pre1 = relu_backward(&tape.pre1, &g_act1.expect("requested"))?;
    let (g_in, g1) = conv2d_backward_impl(&tape.input, &block.first, &g_pre1, need_input_grad)?;
    Ok((g_in, g1, g2))
}

/// Intermediate values kept by [`forward_kernels_taped`] for the backward pass.
pub struct KpnTape {
    encoder: Vec<BlockTape>,
    encoder_out_shapes: Vec<Vec<usize>>,
    decoder: Vec<BlockTape>,
    head_input: Tensor,
}

impl KpnTape {
    /// Whether each ReLU pre-activation is positive, in layer order. Two
    /// evaluations with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| b.pre1.data().iter().chain(b.pre2.data()))
            .map(|&v| v > 0.0)
            .collect()
    }
}

/// Kernel field for `image`.
pub fn kpn_forward(params: &KpnParams, image: &Tensor) -> Result<KernelField> {
    forward_kernels_taped(params, image).map(|(k, _)| k)
}

pub fn forward_kernels_taped(params: &KpnParams, image: &Tensor) -> Result<(KernelField, KpnTape)> {
    let config = &params.config;
    config.check_input(image)?;
    let levels = config.levels;

    let mut enc_tapes = Vec::with_capacity(levels);
    let mut enc_outs: Vec<Tensor> = Vec::with_capacity(levels);
    for (level, block) in params.encoder.iter().enumerate() {
        let input = if level == 0 {
            image.clone()
        } else {
            avgpool2x2_forward(&enc_outs[level - 1])?
        };
        let (out, tape) = block_forward(block, input)?;
        enc_tapes.push(tape);
        enc_outs.push(out);
    }
    let encoder_out_shapes = enc_outs.iter().map(|t| t.shape().to_vec()).collect();

    let mut x = enc_outs.pop().expect("levels >= 1");
    let mut dec_tapes: Vec<Option<BlockTape>> = (0..levels - 1).map(|_| None).collect();
    for level in (0..levels - 1).rev() {
        let up = upsample_nearest2x_forward(&x)?;
        let skip = enc_outs.pop().expect("one skip per decoder level");
        let cat = concat_channels_forward(&[&up, &skip])?;
        let (out, tape) = block_forward(&params.decoder[level], cat)?;
        dec_tapes[level] = Some(tape);
        x = out;
    }

    let logits = conv2d_forward(&x, &params.head)?;
    let kernels = if config.normalize_kernels {
        normalize_kernels(&logits, config.kernel_width)?
    } else {
        KernelField::new(logits, config.kernel_width)?
    };
    Ok((
        kernels,
        KpnTape {
            encoder: enc_tapes,
            encoder_out_shapes,
            decoder: dec_tapes.into_iter().map(|t| t.expect("filled")).collect(),
            head_input: x,
        },
    ))
}

/// Backpropagates a kernel-field gradient into parameter gradients.
/// The returned list covers encoder, decoder, head; fusion is the caller's.
fn kpn_backward_from_kernels(
    params: &KpnParams,
    tape: &KpnTape,
    kernels: &KernelField,
    grad_kernels: &Tensor,
) -> Result<Vec<ConvGrads>> {
    let config = &params.config;
    let levels = config.levels;
    let grad_logits = if config.normalize_kernels {
        normalize_kernels_backward(kernels, grad_kernels)?
    } else {
        grad_kernels.clone()
    };
    let (g_x, head_grads) =
        conv2d_backward_impl(&tape.head_input, &params.head, &grad_logits, true)?;
    let mut g_x = g_x.expect("requested");

    let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    let mut dec_grads: Vec<Option<(ConvGrads, ConvGrads)>> =
        (0..levels.saturating_sub(1)).map(|_| None).collect();
    for level in 0..levels - 1 {
        let (g_cat, g1, g2) =
            block_backward(&params.decoder[level], &tape.decoder[level], &g_x, true)?;
        dec_grads[level] = Some((g1, g2));
        let up_channels = config.channels_at(level + 1);
        let parts = concat_channels_backward(
            &g_cat.expect("requested"),
            &[up_channels, config.channels_at(level)],
        )?;
        let mut parts = parts.into_iter();
        let g_up = parts.next().expect("two parts");
        skip_grads[level] = parts.next();
        g_x = upsample_nearest2x_backward(&g_up)?;
    }

    // g_x now holds the gradient of the deepest encoder output
    let mut enc_grads: Vec<Option<(ConvGrads, ConvGrads)>> = (0..levels).map(|_| None).collect();
    let mut g_out = g_x;
    for level in (0..levels).rev() {
        if let Some(skip) = skip_grads[level].take() {
            g_out.add_assign(&skip)?;
        }
        let (g_in, g1, g2) = block_backward(
            &params.encoder[level],
            &tape.encoder[level],
            &g_out,
            level > 0,
        )?;
        enc_grads[level] = Some((g1, g2));
        if level > 0 {
            g_out = avgpool2x2_backward(
                &g_in.expect("requested"),
                &tape.encoder_out_shapes[level - 1],
            )?;
        }
    }

    let mut grads = Vec::new();
    for (g1, g2) in enc_grads
        .into_iter()
        .chain(dec_grads)
        .map(|g| g.expect("filled"))
    {
        grads.push(g1);
        grads.push(g2);
    }
    grads.push(head_grads);
    Ok(grads)
}

/// Everything the derain backward pass needs from the forward pass.
pub struct DerainTape {
    image: Tensor,
    kernels: KernelField,
    kpn: KpnTape,
    scale_outputs: Vec<Tensor>,
}

impl DerainTape {
    pub fn kernels(&self) -> &KernelField {
        &self.kernels
    }

    pub fn scale_outputs(&self) -> &[Tensor] {
        &self.scale_outputs
    }

    pub fn kpn(&self) -> &KpnTape {
        &self.kpn
    }
}

/// Predict kernels, filter at each dilation, fuse. Output is not clamped.
pub fn derain(params: &KpnParams, image: &Tensor) -> Result<Tensor> {
    derain_taped(params, image).map(|(out, _)| out)
}

pub fn derain_taped(params: &KpnParams, image: &Tensor) -> Result<(Tensor, DerainTape)> {
    let (kernels, kpn) = forward_kernels_taped(params, image)?;
    let scale_outputs = params
        .config
        .dilations
        .as_slice()
        .iter()
        .map(|&l| pixel_wise_dilated_filter(image, &kernels, l))
        .collect::<Result<Vec<_>>>()?;
    let out = fuse_scales(&scale_outputs, &params.fusion)?;
    Ok((
        out,
        DerainTape {
            image: image.clone(),
            kernels,
            kpn,
            scale_outputs,
        },
    ))
}

/// Parameter gradients of `<grad_output, derain(params, image)>`.
pub fn derain_backward(
    params: &KpnParams,
    tape: &DerainTape,
    grad_output: &Tensor,
) -> Result<KpnGrads> {
    let expected = tape.image.shape();
    if grad_output.shape() != expected {
        return Err(invalid_arg!(
            "grad_output shape {:?} does not match derain output {:?}",
            grad_output.shape(),
            expected
        ));
    }
    let (scale_grads, fusion_grads) =
        fuse_scales_backward(&tape.scale_outputs, &params.fusion, grad_output)?;
    let mut grad_kernels = Tensor::zeros(tape.kernels.tensor().shape());
    for (&l, g) in params.config.dilations.as_slice().iter().zip(&scale_grads) {
        let (_, gk) = pixel_wise_dilated_filter_backward(&tape.image, &tape.kernels, l, g)?;
        grad_kernels.add_assign(&gk)?;
    }
    let mut layer_grads =
        kpn_backward_from_kernels(params, &tape.kpn, &tape.kernels, &grad_kernels)?;
    layer_grads.push(fusion_grads);
    Ok(KpnGrads {
        tensors: layer_grads
            .into_iter()
            .flat_map(|g| [g.weight, g.bias])
            .collect(),
    })
}

/// Runs the forward pass and returns the exact adjoint for `grad_output`.
pub fn kpn_backward(params: &KpnParams, image: &Tensor, grad_output: &Tensor) -> Result<KpnGrads> {
    let (_, tape) = derain_taped(params, image)?;
    derain_backward(params, &tape, grad_output)
}
