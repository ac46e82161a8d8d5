//! The toy re-id backbone: stem convolution, optional global attention,
//! residual stages with group norm, optional local attention fused after the
//! first stage, global average pooling into the feature vector, the
//! layer-norm neck, and a single classification projection used only by the
//! training loss.
//!
//! The whole graph has a hand-written backward pass; no autodiff. Parameters
//! live in structured layers and export to a flat named list in graph order
//! for checkpoints, the optimizer, and gradient checking.

use crate::attention::{
    fuse, fuse_backward, global_attention_backward, global_attention_forward,
    local_attention_backward, local_attention_forward, ChannelMasks, GACtx, GAParams, LACtx,
    LAParams,
};
use crate::error::{Error, Result};
use crate::losses::{trisoft_loss, LossConfig, LossValue};
use crate::norms::{neck_backward, neck_forward, norm_backward, NeckCtx, NormCtx, NormSpec, NormState};
use crate::rng::SplitMix64;
use crate::tensor::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    ConvKernel, Matrix, Tensor4,
};

/// Stem convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One residual stage: `blocks` basic blocks at `channels` width; the first
/// block applies `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Channels per group for the group norm used throughout the backbone.
    pub norm_group_size: usize,
    pub epsilon: f64,
    /// Must equal the channel count of the last stage.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub attach_ga: bool,
    pub attach_la: bool,
    pub la_reduction: usize,
    pub la_kernel: usize,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Small preset used across the test suite: under 20k parameters.
    pub fn toy(num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            stem: StemSpec { out_channels: 12, kernel: 3, stride: 2 },
            stages: vec![
                StageSpec { blocks: 1, channels: 12, stride: 1 },
                StageSpec { blocks: 1, channels: 24, stride: 1 },
            ],
            norm_group_size: 4,
            epsilon: 1e-5,
            feature_dim: 24,
            num_classes,
            attach_ga: true,
            attach_la: true,
            la_reduction: 4,
            la_kernel: 7,
            leaky_slope: 0.01,
        }
    }

    /// ResNet-18-shaped preset (7x7/2 stem, four stages, stride-1 last
    /// stage). Provided for completeness; never trained in the test suite.
    pub fn resnet18ish(num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            stem: StemSpec { out_channels: 64, kernel: 7, stride: 2 },
            stages: vec![
                StageSpec { blocks: 2, channels: 64, stride: 1 },
                StageSpec { blocks: 2, channels: 128, stride: 2 },
                StageSpec { blocks: 2, channels: 256, stride: 2 },
                StageSpec { blocks: 2, channels: 512, stride: 1 },
            ],
            norm_group_size: 16,
            epsilon: 1e-5,
            feature_dim: 512,
            num_classes,
            attach_ga: true,
            attach_la: true,
            la_reduction: 16,
            la_kernel: 7,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one stage"));
        }
        let last = self.stages.last().expect("non-empty");
        if last.stride != 1 {
            return Err(Error::config(format!(
                "last stage stride must be 1, got {}",
                last.stride
            )));
        }
        if self.feature_dim != last.channels {
            return Err(Error::config(format!(
                "feature_dim {} != last stage channels {}",
                self.feature_dim, last.channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.norm_group_size == 0 {
            return Err(Error::config("norm_group_size must be positive"));
        }
        let mut normed = vec![("stem", self.stem.out_channels)];
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.channels == 0 || stage.stride == 0 {
                return Err(Error::config(format!("stage {i} has a zero field")));
            }
            normed.push(("stage", stage.channels));
        }
        for (what, channels) in normed {
            if channels % self.norm_group_size != 0 {
                return Err(Error::config(format!(
                    "norm_group_size {} does not divide {what} channels {channels}",
                    self.norm_group_size
                )));
            }
        }
        if self.stem.kernel % 2 == 0 {
            return Err(Error::config("stem kernel must be odd"));
        }
        if self.la_reduction == 0 || self.la_kernel % 2 == 0 {
            return Err(Error::config("la_reduction positive and la_kernel odd required"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in (0,1)"));
        }
        Ok(())
    }

    fn norm_spec(&self) -> NormSpec {
        let mut spec = NormSpec::group(self.norm_group_size);
        spec.epsilon = self.epsilon;
        spec
    }
}

/// Per-channel affine of one norm layer.
#[derive(Debug, Clone, PartialEq)]
struct Affine {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Affine {
    fn identity(channels: usize) -> Affine {
        Affine {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Basic residual block: two 3x3 conv+norm units with an identity skip, or
/// a 1x1 projected skip when shape changes.
#[derive(Debug, Clone)]
struct Block {
    conv1: ConvKernel,
    norm1: Affine,
    conv2: ConvKernel,
    norm2: Affine,
    proj: Option<(ConvKernel, Affine)>,
}

impl Block {
    fn init(in_channels: usize, channels: usize, stride: usize, rng: &mut SplitMix64) -> Result<Block> {
        let conv1 = ConvKernel::he_init(channels, in_channels, 3, 3, stride, 1, rng)?;
        let conv2 = ConvKernel::he_init(channels, channels, 3, 3, 1, 1, rng)?;
        let proj = if in_channels != channels || stride != 1 {
            let kernel = ConvKernel::he_init(channels, in_channels, 1, 1, stride, 0, rng)?;
            Some((kernel, Affine::identity(channels)))
        } else {
            None
        };
        Ok(Block {
            conv1,
            norm1: Affine::identity(channels),
            conv2,
            norm2: Affine::identity(channels),
            proj,
        })
    }
}

/// The assembled model: structured parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    stem_conv: ConvKernel,
    ga: Option<GAParams>,
    stem_norm: Affine,
    stages: Vec<Vec<Block>>,
    la: Option<LAParams>,
    neck_gamma: Vec<f64>,
    neck_beta: Vec<f64>,
    /// num_classes x feature_dim, row-major.
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

/// Gradients for every parameter entry, in the same order as
/// [`Model::export_entries`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, values) in &self.entries {
            out.extend_from_slice(values);
        }
        out
    }
}

struct BlockTrace {
    input: Tensor4,
    norm1_ctx: NormCtx,
    norm1_out: Tensor4,
    act1: Tensor4,
    norm2_ctx: NormCtx,
    proj_ctx: Option<NormCtx>,
    pre_act: Tensor4,
}

struct Trace {
    input: Tensor4,
    ga_ctx: Option<GACtx>,
    stem_norm_ctx: NormCtx,
    stem_norm_out: Tensor4,
    stages: Vec<Vec<BlockTrace>>,
    la_ctx: Option<LACtx>,
    la_input: Option<Tensor4>,
    gap_input_shape: (usize, usize, usize, usize),
    features: Matrix,
    neck_ctx: NeckCtx,
    neck_out: Matrix,
}

/// Forward outputs plus the probe activations and (in training mode) the
/// saved trace that [`Model::backward`] consumes.
pub struct ForwardPass {
    pub triplet_features: Matrix,
    pub logits: Matrix,
    /// Named probe points: stem output, each stage output, pooled features.
    pub activations: Vec<(String, Tensor4)>,
    trace: Option<Trace>,
}

/// FNV-1a over a layer name; keys the per-layer init streams.
fn name_stream(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Model {
    /// Deterministic He-style initialization from a seed. Every layer draws
    /// from its own named stream, so toggling GA/LA leaves the shared
    /// layers' initial weights untouched.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let root = SplitMix64::new(seed);
        let stream = |name: &str| root.fork(name_stream(name));
        let stem_conv = ConvKernel::he_init(
            config.stem.out_channels,
            config.input_channels,
            config.stem.kernel,
            config.stem.kernel,
            config.stem.stride,
            (config.stem.kernel - 1) / 2,
            &mut stream("stem.conv"),
        )?;
        let ga = if config.attach_ga {
            let mut params = GAParams::he_init(
                config.stem.out_channels,
                config.stem.out_channels,
                &mut stream("ga"),
            )?;
            params.leaky_slope = config.leaky_slope;
            // zero the gate-producing conv: every gate starts at exactly 0.5,
            // which the following group norm absorbs, so an untrained GA
            // model computes the same function as the base model
            params.conv2.weights.iter_mut().for_each(|w| *w = 0.0);
            params.conv2.bias.iter_mut().for_each(|b| *b = 0.0);
            Some(params)
        } else {
            None
        };
        let stem_norm = Affine::identity(config.stem.out_channels);
        let mut stages = Vec::new();
        let mut in_channels = config.stem.out_channels;
        for (si, stage) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let mut rng = stream(&format!("stage{}.block{}", si + 1, b));
                blocks.push(Block::init(in_channels, stage.channels, stride, &mut rng)?);
                in_channels = stage.channels;
            }
            stages.push(blocks);
        }
        let la = if config.attach_la {
            let mut params = LAParams::he_init(
                config.stages[0].channels,
                config.la_reduction,
                config.la_kernel,
                &mut stream("la"),
            )?;
            // same neutral-gate start for the local branch
            params.channel_w2.iter_mut().for_each(|w| *w = 0.0);
            params.channel_b2.iter_mut().for_each(|b| *b = 0.0);
            params.spatial.weights.iter_mut().for_each(|w| *w = 0.0);
            params.spatial.bias.iter_mut().for_each(|b| *b = 0.0);
            Some(params)
        } else {
            None
        };
        let feature_dim = config.feature_dim;
        let neck_gamma = vec![1.0; feature_dim];
        let neck_beta = vec![0.0; feature_dim];
        let mut head_rng = stream("head");
        let mut head_weight = vec![0.0; config.num_classes * feature_dim];
        for w in &mut head_weight {
            *w = head_rng.normal() * 0.01;
        }
        let head_bias = vec![0.0; config.num_classes];
        Ok(Model {
            config,
            stem_conv,
            ga,
            stem_norm,
            stages,
            la,
            neck_gamma,
            neck_beta,
            head_weight,
            head_bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.export_entries().iter().map(|(_, v)| v.len()).sum()
    }

    fn norm_forward(&self, x: &Tensor4, affine: &Affine) -> Result<(Tensor4, NormCtx)> {
        let mut state = NormState::new(affine.gamma.len());
        state.gamma = affine.gamma.clone();
        state.beta = affine.beta.clone();
        let fwd = crate::norms::normalize_forward(x, &self.config.norm_spec(), &mut state, true)?;
        Ok((fwd.output, fwd.ctx))
    }

    /// Check the spatial chain before any compute.
    fn validate_input(&self, images: &Tensor4) -> Result<()> {
        let (_, c, mut h, mut w) = images.shape();
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let (oh, ow) = self.stem_conv.output_dims(h, w)?;
        h = oh;
        w = ow;
        for stage in &self.stages {
            for block in stage {
                let (oh, ow) = block.conv1.output_dims(h, w)?;
                h = oh;
                w = ow;
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("spatial dims collapsed to zero"));
        }
        Ok(())
    }

    /// Run the graph. `training` keeps the full trace for [`Model::backward`].
    pub fn forward(&self, images: &Tensor4, training: bool) -> Result<ForwardPass> {
        self.validate_input(images)?;
        let mut activations = Vec::new();
        // stem: conv -> (GA) -> group norm -> relu
        let stem_conv_out = conv2d(images, &self.stem_conv)?;
        let (ga_out, ga_ctx) = match &self.ga {
            Some(params) => {
                let fwd = global_attention_forward(&stem_conv_out, params)?;
                (fwd.output, Some(fwd.ctx))
            }
            None => (stem_conv_out.clone(), None),
        };
        let (stem_norm_out, stem_norm_ctx) = self.norm_forward(&ga_out, &self.stem_norm)?;
        let mut x = relu(&stem_norm_out);
        activations.push(("stem".to_string(), x.clone()));
        let mut stage_traces = Vec::new();
        let mut la_ctx = None;
        let mut la_input = None;
        for (si, stage) in self.stages.iter().enumerate() {
            let mut block_traces = Vec::new();
            for block in stage {
                let (out, trace) = self.block_forward(block, &x)?;
                x = out;
                block_traces.push(trace);
            }
            stage_traces.push(block_traces);
            if si == 0 {
                if let Some(la) = &self.la {
                    let f_global = x.clone();
                    let fwd = local_attention_forward(&f_global, la)?;
                    let masks = ChannelMasks::new(f_global.channels());
                    x = fuse(&f_global, &fwd.output, &masks)?;
                    la_ctx = Some(fwd.ctx);
                    la_input = Some(f_global);
                }
            }
            activations.push((format!("stage{}", si + 1), x.clone()));
        }
        let gap_input_shape = x.shape();
        let features = global_avg_pool(&x);
        let (n, c) = (features.rows(), features.cols());
        activations.push((
            "features".to_string(),
            Tensor4::from_vec(n, c, 1, 1, features.data().to_vec())?,
        ));
        let neck = neck_forward(&features, &self.neck_gamma, &self.neck_beta, self.config.epsilon)?;
        let logits = self.head_forward(&neck.output);
        let trace = if training {
            Some(Trace {
                input: images.clone(),
                ga_ctx,
                stem_norm_ctx,
                stem_norm_out,
                stages: stage_traces,
                la_ctx,
                la_input,
                gap_input_shape,
                features: features.clone(),
                neck_ctx: neck.ctx,
                neck_out: neck.output.clone(),
            })
        } else {
            None
        };
        Ok(ForwardPass {
            triplet_features: features,
            logits,
            activations,
            trace,
        })
    }

    fn block_forward(&self, block: &Block, x: &Tensor4) -> Result<(Tensor4, BlockTrace)> {
        let conv1_out = conv2d(x, &block.conv1)?;
        let (norm1_out, norm1_ctx) = self.norm_forward(&conv1_out, &block.norm1)?;
        let act1 = relu(&norm1_out);
        let conv2_out = conv2d(&act1, &block.conv2)?;
        let (norm2_out, norm2_ctx) = self.norm_forward(&conv2_out, &block.norm2)?;
        let (skip, proj_ctx) = match &block.proj {
            Some((kernel, affine)) => {
                let projected = conv2d(x, kernel)?;
                let (normed, ctx) = self.norm_forward(&projected, affine)?;
                (normed, Some(ctx))
            }
            None => (x.clone(), None),
        };
        let pre_act = norm2_out.add(&skip)?;
        let out = relu(&pre_act);
        Ok((
            out,
            BlockTrace {
                input: x.clone(),
                norm1_ctx,
                norm1_out,
                act1,
                norm2_ctx,
                proj_ctx,
                pre_act,
            },
        ))
    }

    fn head_forward(&self, neck_out: &Matrix) -> Matrix {
        let (rows, dim) = (neck_out.rows(), neck_out.cols());
        let classes = self.config.num_classes;
        let mut logits = Matrix::zeros(rows, classes);
        for r in 0..rows {
            let row = neck_out.row(r);
            for k in 0..classes {
                let mut acc = self.head_bias[k];
                for (j, v) in row.iter().enumerate() {
                    acc += self.head_weight[k * dim + j] * v;
                }
                logits.set(r, k, acc);
            }
        }
        logits
    }

    /// Backward through the whole graph given upstream gradients on the
    /// triplet features and the logits. Requires a training-mode pass.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_features: &Matrix,
        grad_logits: &Matrix,
    ) -> Result<ModelGrads> {
        let trace = pass.trace.as_ref().ok_or_else(|| {
            Error::config("backward needs a forward pass run with training=true")
        })?;
        let dim = self.config.feature_dim;
        let classes = self.config.num_classes;
        let rows = trace.features.rows();
        if (grad_features.rows(), grad_features.cols()) != (rows, dim) {
            return Err(Error::shape("grad_features shape mismatch"));
        }
        if (grad_logits.rows(), grad_logits.cols()) != (rows, classes) {
            return Err(Error::shape("grad_logits shape mismatch"));
        }
        // classifier head
        let mut grad_head_w = vec![0.0; self.head_weight.len()];
        let mut grad_head_b = vec![0.0; classes];
        let mut grad_neck_out = Matrix::zeros(rows, dim);
        for r in 0..rows {
            for k in 0..classes {
                let g = grad_logits.get(r, k);
                grad_head_b[k] += g;
                for j in 0..dim {
                    grad_head_w[k * dim + j] += g * trace.neck_out.get(r, j);
                    grad_neck_out.row_mut(r)[j] += g * self.head_weight[k * dim + j];
                }
            }
        }
        // neck
        let (grad_features_from_neck, grad_neck_gamma, grad_neck_beta) =
            neck_backward(&trace.neck_ctx, &grad_neck_out)?;
        let mut grad_feats = grad_features.clone();
        for (a, b) in grad_feats
            .data_mut()
            .iter_mut()
            .zip(grad_features_from_neck.data().iter())
        {
            *a += b;
        }
        // global average pooling
        let mut grad_x = global_avg_pool_backward(trace.gap_input_shape, &grad_feats)?;
        // stages in reverse; local attention sits after stage 1
        let mut stage_grads: Vec<Vec<BlockGrads>> = Vec::new();
        let mut la_grads = None;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            if si == 0 {
                if let (Some(la), Some(ctx), Some(f_global)) =
                    (&self.la, &trace.la_ctx, &trace.la_input)
                {
                    let masks = ChannelMasks::new(f_global.channels());
                    let (grad_global_masked, grad_local) = fuse_backward(&grad_x, &masks)?;
                    let grads = local_attention_backward(ctx, la, &grad_local)?;
                    grad_x = grad_global_masked.add(&grads.input)?;
                    la_grads = Some(grads);
                }
            }
            let mut block_grads = Vec::new();
            for (block, trace) in stage.iter().zip(trace.stages[si].iter()).rev() {
                let (gx, grads) = self.block_backward(block, trace, &grad_x)?;
                grad_x = gx;
                block_grads.push(grads);
            }
            block_grads.reverse();
            stage_grads.push(block_grads);
        }
        stage_grads.reverse();
        // stem: relu -> norm -> (GA) -> conv
        let grad_stem_norm_out = relu_backward(&trace.stem_norm_out, &grad_x)?;
        let stem_norm_grads = norm_backward(&trace.stem_norm_ctx, &grad_stem_norm_out)?;
        let (grad_stem_conv_out, ga_grads) = match (&self.ga, &trace.ga_ctx) {
            (Some(params), Some(ctx)) => {
                let grads = global_attention_backward(ctx, params, &stem_norm_grads.input)?;
                (grads.input.clone(), Some(grads))
            }
            _ => (stem_norm_grads.input.clone(), None),
        };
        let stem_conv_grads = conv2d_backward(&trace.input, &self.stem_conv, &grad_stem_conv_out)?;
        // assemble in export order
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        entries.push(("stem.conv.weight".into(), stem_conv_grads.weights));
        entries.push(("stem.conv.bias".into(), stem_conv_grads.bias));
        if let Some(g) = ga_grads {
            entries.push(("ga.conv1.weight".into(), g.conv1_weights));
            entries.push(("ga.conv1.bias".into(), g.conv1_bias));
            entries.push(("ga.conv2.weight".into(), g.conv2_weights));
            entries.push(("ga.conv2.bias".into(), g.conv2_bias));
        }
        entries.push(("stem.norm.gamma".into(), stem_norm_grads.gamma));
        entries.push(("stem.norm.beta".into(), stem_norm_grads.beta));
        for (si, blocks) in stage_grads.into_iter().enumerate() {
            for (bi, g) in blocks.into_iter().enumerate() {
                let prefix = format!("stage{}.block{}", si + 1, bi);
                entries.push((format!("{prefix}.conv1.weight"), g.conv1_weights));
                entries.push((format!("{prefix}.conv1.bias"), g.conv1_bias));
                entries.push((format!("{prefix}.norm1.gamma"), g.norm1_gamma));
                entries.push((format!("{prefix}.norm1.beta"), g.norm1_beta));
                entries.push((format!("{prefix}.conv2.weight"), g.conv2_weights));
                entries.push((format!("{prefix}.conv2.bias"), g.conv2_bias));
                entries.push((format!("{prefix}.norm2.gamma"), g.norm2_gamma));
                entries.push((format!("{prefix}.norm2.beta"), g.norm2_beta));
                if let Some((pw, pb, pg, pbeta)) = g.proj {
                    entries.push((format!("{prefix}.proj.weight"), pw));
                    entries.push((format!("{prefix}.proj.bias"), pb));
                    entries.push((format!("{prefix}.projnorm.gamma"), pg));
                    entries.push((format!("{prefix}.projnorm.beta"), pbeta));
                }
            }
            if si == 0 {
                if let Some(g) = la_grads.take() {
                    entries.push(("la.channel.w1".into(), g.channel_w1));
                    entries.push(("la.channel.b1".into(), g.channel_b1));
                    entries.push(("la.channel.w2".into(), g.channel_w2));
                    entries.push(("la.channel.b2".into(), g.channel_b2));
                    entries.push(("la.spatial.weight".into(), g.spatial_weights));
                    entries.push(("la.spatial.bias".into(), g.spatial_bias));
                }
            }
        }
        entries.push(("neck.gamma".into(), grad_neck_gamma));
        entries.push(("neck.beta".into(), grad_neck_beta));
        entries.push(("head.weight".into(), grad_head_w));
        entries.push(("head.bias".into(), grad_head_b));
        Ok(ModelGrads { entries })
    }

    fn block_backward(
        &self,
        block: &Block,
        trace: &BlockTrace,
        grad_out: &Tensor4,
    ) -> Result<(Tensor4, BlockGrads)> {
        let grad_sum = relu_backward(&trace.pre_act, grad_out)?;
        // main path
        let norm2_grads = norm_backward(&trace.norm2_ctx, &grad_sum)?;
        let conv2_grads = conv2d_backward(&trace.act1, &block.conv2, &norm2_grads.input)?;
        let grad_norm1_out = relu_backward(&trace.norm1_out, &conv2_grads.input)?;
        let norm1_grads = norm_backward(&trace.norm1_ctx, &grad_norm1_out)?;
        let conv1_grads = conv2d_backward(&trace.input, &block.conv1, &norm1_grads.input)?;
        // skip path
        let (grad_skip, proj) = match (&block.proj, &trace.proj_ctx) {
            (Some((kernel, _)), Some(ctx)) => {
                let norm_grads = norm_backward(ctx, &grad_sum)?;
                let conv_grads = conv2d_backward(&trace.input, kernel, &norm_grads.input)?;
                (
                    conv_grads.input,
                    Some((conv_grads.weights, conv_grads.bias, norm_grads.gamma, norm_grads.beta)),
                )
            }
            _ => (grad_sum.clone(), None),
        };
        let grad_input = conv1_grads.input.add(&grad_skip)?;
        Ok((
            grad_input,
            BlockGrads {
                conv1_weights: conv1_grads.weights,
                conv1_bias: conv1_grads.bias,
                norm1_gamma: norm1_grads.gamma,
                norm1_beta: norm1_grads.beta,
                conv2_weights: conv2_grads.weights,
                conv2_bias: conv2_grads.bias,
                norm2_gamma: norm2_grads.gamma,
                norm2_beta: norm2_grads.beta,
                proj,
            },
        ))
    }

    /// Flat named parameter list in graph order; the checkpoint layout.
    pub fn export_entries(&self) -> Vec<(String, Vec<f64>)> {
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        entries.push(("stem.conv.weight".into(), self.stem_conv.weights.clone()));
        entries.push(("stem.conv.bias".into(), self.stem_conv.bias.clone()));
        if let Some(ga) = &self.ga {
            entries.push(("ga.conv1.weight".into(), ga.conv1.weights.clone()));
            entries.push(("ga.conv1.bias".into(), ga.conv1.bias.clone()));
            entries.push(("ga.conv2.weight".into(), ga.conv2.weights.clone()));
            entries.push(("ga.conv2.bias".into(), ga.conv2.bias.clone()));
        }
        entries.push(("stem.norm.gamma".into(), self.stem_norm.gamma.clone()));
        entries.push(("stem.norm.beta".into(), self.stem_norm.beta.clone()));
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let prefix = format!("stage{}.block{}", si + 1, bi);
                entries.push((format!("{prefix}.conv1.weight"), block.conv1.weights.clone()));
                entries.push((format!("{prefix}.conv1.bias"), block.conv1.bias.clone()));
                entries.push((format!("{prefix}.norm1.gamma"), block.norm1.gamma.clone()));
                entries.push((format!("{prefix}.norm1.beta"), block.norm1.beta.clone()));
                entries.push((format!("{prefix}.conv2.weight"), block.conv2.weights.clone()));
                entries.push((format!("{prefix}.conv2.bias"), block.conv2.bias.clone()));
                entries.push((format!("{prefix}.norm2.gamma"), block.norm2.gamma.clone()));
                entries.push((format!("{prefix}.norm2.beta"), block.norm2.beta.clone()));
                if let Some((kernel, affine)) = &block.proj {
                    entries.push((format!("{prefix}.proj.weight"), kernel.weights.clone()));
                    entries.push((format!("{prefix}.proj.bias"), kernel.bias.clone()));
                    entries.push((format!("{prefix}.projnorm.gamma"), affine.gamma.clone()));
                    entries.push((format!("{prefix}.projnorm.beta"), affine.beta.clone()));
                }
            }
            if si == 0 {
                if let Some(la) = &self.la {
                    entries.push(("la.channel.w1".into(), la.channel_w1.clone()));
                    entries.push(("la.channel.b1".into(), la.channel_b1.clone()));
                    entries.push(("la.channel.w2".into(), la.channel_w2.clone()));
                    entries.push(("la.channel.b2".into(), la.channel_b2.clone()));
                    entries.push(("la.spatial.weight".into(), la.spatial.weights.clone()));
                    entries.push(("la.spatial.bias".into(), la.spatial.bias.clone()));
                }
            }
        }
        entries.push(("neck.gamma".into(), self.neck_gamma.clone()));
        entries.push(("neck.beta".into(), self.neck_beta.clone()));
        entries.push(("head.weight".into(), self.head_weight.clone()));
        entries.push(("head.bias".into(), self.head_bias.clone()));
        entries
    }

    /// Mutable references to every parameter array, in export order.
    fn entries_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let Model {
            config: _,
            stem_conv,
            ga,
            stem_norm,
            stages,
            la,
            neck_gamma,
            neck_beta,
            head_weight,
            head_bias,
        } = self;
        let mut entries: Vec<(String, &mut Vec<f64>)> = Vec::new();
        entries.push(("stem.conv.weight".into(), &mut stem_conv.weights));
        entries.push(("stem.conv.bias".into(), &mut stem_conv.bias));
        if let Some(ga) = ga {
            entries.push(("ga.conv1.weight".into(), &mut ga.conv1.weights));
            entries.push(("ga.conv1.bias".into(), &mut ga.conv1.bias));
            entries.push(("ga.conv2.weight".into(), &mut ga.conv2.weights));
            entries.push(("ga.conv2.bias".into(), &mut ga.conv2.bias));
        }
        entries.push(("stem.norm.gamma".into(), &mut stem_norm.gamma));
        entries.push(("stem.norm.beta".into(), &mut stem_norm.beta));
        let mut la_slot = la.as_mut();
        for (si, stage) in stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let prefix = format!("stage{}.block{}", si + 1, bi);
                entries.push((format!("{prefix}.conv1.weight"), &mut block.conv1.weights));
                entries.push((format!("{prefix}.conv1.bias"), &mut block.conv1.bias));
                entries.push((format!("{prefix}.norm1.gamma"), &mut block.norm1.gamma));
                entries.push((format!("{prefix}.norm1.beta"), &mut block.norm1.beta));
                entries.push((format!("{prefix}.conv2.weight"), &mut block.conv2.weights));
                entries.push((format!("{prefix}.conv2.bias"), &mut block.conv2.bias));
                entries.push((format!("{prefix}.norm2.gamma"), &mut block.norm2.gamma));
                entries.push((format!("{prefix}.norm2.beta"), &mut block.norm2.beta));
                if let Some((kernel, affine)) = &mut block.proj {
                    entries.push((format!("{prefix}.proj.weight"), &mut kernel.weights));
                    entries.push((format!("{prefix}.proj.bias"), &mut kernel.bias));
                    entries.push((format!("{prefix}.projnorm.gamma"), &mut affine.gamma));
                    entries.push((format!("{prefix}.projnorm.beta"), &mut affine.beta));
                }
            }
            if si == 0 {
                if let Some(la) = la_slot.take() {
                    entries.push(("la.channel.w1".into(), &mut la.channel_w1));
                    entries.push(("la.channel.b1".into(), &mut la.channel_b1));
                    entries.push(("la.channel.w2".into(), &mut la.channel_w2));
                    entries.push(("la.channel.b2".into(), &mut la.channel_b2));
                    entries.push(("la.spatial.weight".into(), &mut la.spatial.weights));
                    entries.push(("la.spatial.bias".into(), &mut la.spatial.bias));
                }
            }
        }
        entries.push(("neck.gamma".into(), neck_gamma));
        entries.push(("neck.beta".into(), neck_beta));
        entries.push(("head.weight".into(), head_weight));
        entries.push(("head.bias".into(), head_bias));
        entries
    }

    /// Load a checkpoint produced by [`Model::export_entries`]; names,
    /// order, and lengths must all match this model's architecture.
    pub fn import_entries(&mut self, entries: &[(String, Vec<f64>)]) -> Result<()> {
        let mut own = self.entries_mut();
        if own.len() != entries.len() {
            return Err(Error::config(format!(
                "checkpoint has {} arrays, model needs {}",
                entries.len(),
                own.len()
            )));
        }
        for ((name, values), (own_name, slot)) in entries.iter().zip(own.iter_mut()) {
            if name != own_name {
                return Err(Error::config(format!(
                    "checkpoint array {name} where model expects {own_name}"
                )));
            }
            if values.len() != slot.len() {
                return Err(Error::config(format!(
                    "checkpoint array {name} has {} values, model needs {}",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    /// All parameters as one flat vector, in export order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, values) in self.export_entries() {
            out.extend_from_slice(&values);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut own = self.entries_mut();
        let total: usize = own.iter().map(|(_, v)| v.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!(
                "flat vector has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut cursor = 0;
        for (_, slot) in own.iter_mut() {
            let len = slot.len();
            slot.copy_from_slice(&flat[cursor..cursor + len]);
            cursor += len;
        }
        Ok(())
    }
}

struct BlockGrads {
    conv1_weights: Vec<f64>,
    conv1_bias: Vec<f64>,
    norm1_gamma: Vec<f64>,
    norm1_beta: Vec<f64>,
    conv2_weights: Vec<f64>,
    conv2_bias: Vec<f64>,
    norm2_gamma: Vec<f64>,
    norm2_beta: Vec<f64>,
    proj: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

/// Adam with the usual bias correction; the learning rate arrives per step
/// from the schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        let shapes: Vec<usize> = model.export_entries().iter().map(|(_, v)| v.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&len| vec![0.0; len]).collect(),
            v: shapes.iter().map(|&len| vec![0.0; len]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64) -> Result<()> {
        let mut entries = model.entries_mut();
        if entries.len() != grads.entries.len() || entries.len() != self.m.len() {
            return Err(Error::shape("optimizer/model/gradient entry counts disagree"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((name, slot), (gname, grad))) in
            entries.iter_mut().zip(grads.entries.iter()).enumerate()
        {
            if name != gname || slot.len() != grad.len() {
                return Err(Error::shape(format!(
                    "gradient entry {gname} does not match parameter {name}"
                )));
            }
            for (j, g) in grad.iter().enumerate() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                slot[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimization step: forward, combined loss, backward, Adam update.
/// A non-finite loss aborts with a dump of per-layer activation magnitudes.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    images: &Tensor4,
    identities: &[i64],
    loss_config: &LossConfig,
    lr: f64,
) -> Result<LossValue> {
    let pass = model.forward(images, true)?;
    let loss = trisoft_loss(&pass.triplet_features, &pass.logits, identities, loss_config)?;
    if !loss.total.is_finite() {
        let dump: Vec<String> = pass
            .activations
            .iter()
            .map(|(name, t)| format!("{name}: max|a|={:.3e}", t.max_abs()))
            .collect();
        return Err(Error::non_finite(format!(
            "loss diverged; activation magnitudes: {}",
            dump.join(", ")
        )));
    }
    let grads = model.backward(&pass, &loss.embeddings_grad, &loss.logits_grad)?;
    optimizer.step(model, &grads, lr)?;
    Ok(loss)
}

/// Fraction of near-zero channels per probed layer.
#[derive(Debug, Clone)]
pub struct SparsityReport {
    pub per_layer: Vec<(String, f64)>,
    pub sample_count: usize,
    pub tau: f64,
}

/// Probe the stem output, each stage output, and the pooled features on the
/// first `sample_count` images. A channel counts as zero for an image when
/// the largest activation magnitude over its spatial map is at most `tau`.
pub fn sparsity_probe(
    model: &Model,
    images: &Tensor4,
    tau: f64,
    sample_count: usize,
) -> Result<SparsityReport> {
    let (n, c, h, w) = images.shape();
    if sample_count == 0 || sample_count > n {
        return Err(Error::config(format!(
            "sample_count {sample_count} outside 1..={n}"
        )));
    }
    let subset = Tensor4::from_vec(
        sample_count,
        c,
        h,
        w,
        images.data()[..sample_count * c * h * w].to_vec(),
    )?;
    let pass = model.forward(&subset, false)?;
    let mut per_layer = Vec::new();
    for (name, act) in &pass.activations {
        let (an, ac, ah, aw) = act.shape();
        let mut zero_fraction_sum = 0.0;
        for ni in 0..an {
            let mut zero_channels = 0usize;
            for ci in 0..ac {
                let mut max_abs = 0.0f64;
                for hi in 0..ah {
                    for wi in 0..aw {
                        max_abs = max_abs.max(act.get(ni, ci, hi, wi).abs());
                    }
                }
                if max_abs <= tau {
                    zero_channels += 1;
                }
            }
            zero_fraction_sum += zero_channels as f64 / ac as f64;
        }
        per_layer.push((name.clone(), zero_fraction_sum / an as f64));
    }
    Ok(SparsityReport {
        per_layer,
        sample_count,
        tau,
    })
}
