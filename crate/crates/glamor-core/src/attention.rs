//! Global attention, local attention, and fixed-mask channel fusion.
//!
//! Global attention gates the input elementwise with
//! `sigmoid(conv(leaky_relu(conv(F))))`; no pooling appears anywhere in the
//! module. Local attention applies a per-channel gate computed from pooled
//! channel statistics, then a per-pixel gate from a small convolution over
//! channel-pooled maps. Fusion sums the two feature stacks under
//! complementary binary channel masks: the lower half of the channels comes
//! from the local branch, the upper half from the global branch.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_scalar, ConvKernel,
    Tensor4,
};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
/// Channel-attention bottleneck ratio used when nothing else is configured.
pub const DEFAULT_LA_REDUCTION: usize = 16;
/// Spatial-attention kernel size.
pub const DEFAULT_LA_KERNEL: usize = 7;

/// Two spatial-preserving 3x3 convolutions plus the gate nonlinearities.
#[derive(Debug, Clone)]
pub struct GAParams {
    pub conv1: ConvKernel,
    pub conv2: ConvKernel,
    pub leaky_slope: f64,
}

impl GAParams {
    /// Zero-weight module over `channels` inputs with a `mid` wide middle.
    pub fn zeros(channels: usize, mid: usize) -> Result<Self> {
        let conv1 = ConvKernel::zeros(mid, channels, 3, 3, 1, 1)?;
        let conv2 = ConvKernel::zeros(channels, mid, 3, 3, 1, 1)?;
        GAParams::new(conv1, conv2, DEFAULT_LEAKY_SLOPE)
    }

    pub fn he_init(channels: usize, mid: usize, rng: &mut SplitMix64) -> Result<Self> {
        let conv1 = ConvKernel::he_init(mid, channels, 3, 3, 1, 1, rng)?;
        let conv2 = ConvKernel::he_init(channels, mid, 3, 3, 1, 1, rng)?;
        GAParams::new(conv1, conv2, DEFAULT_LEAKY_SLOPE)
    }

    pub fn new(conv1: ConvKernel, conv2: ConvKernel, leaky_slope: f64) -> Result<Self> {
        if conv1.out_channels != conv2.in_channels {
            return Err(Error::shape(format!(
                "ga conv chain disagrees on middle width: {} vs {}",
                conv1.out_channels, conv2.in_channels
            )));
        }
        if conv1.in_channels != conv2.out_channels {
            return Err(Error::shape(
                "ga conv chain must map back to the input channel count",
            ));
        }
        for (name, k) in [("conv1", &conv1), ("conv2", &conv2)] {
            if k.stride != 1 || k.padding != (k.kh - 1) / 2 || k.kh != k.kw {
                return Err(Error::config(format!(
                    "ga {name} must preserve spatial dims (stride 1, same padding)"
                )));
            }
        }
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::config(format!("leaky slope {leaky_slope} not in (0,1)")));
        }
        Ok(GAParams { conv1, conv2, leaky_slope })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

/// Saved activations for [`global_attention_backward`].
#[derive(Debug, Clone)]
pub struct GACtx {
    input: Tensor4,
    pre_act: Tensor4,
    mid: Tensor4,
    gate: Tensor4,
}

#[derive(Debug, Clone)]
pub struct GAForward {
    pub output: Tensor4,
    pub ctx: GACtx,
}

#[derive(Debug, Clone)]
pub struct GAGrads {
    pub input: Tensor4,
    pub conv1_weights: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub conv2_weights: Vec<f64>,
    pub conv2_bias: Vec<f64>,
}

/// `GA(F) = F * sigmoid(conv2(leaky_relu(conv1(F))))`, same shape as `F`.
pub fn global_attention(f: &Tensor4, params: &GAParams) -> Result<Tensor4> {
    Ok(global_attention_forward(f, params)?.output)
}

pub fn global_attention_forward(f: &Tensor4, params: &GAParams) -> Result<GAForward> {
    let pre_act = conv2d(f, &params.conv1)?;
    let mid = leaky_relu(&pre_act, params.leaky_slope)?;
    let gate = sigmoid(&conv2d(&mid, &params.conv2)?);
    let output = f.mul(&gate)?;
    Ok(GAForward {
        output,
        ctx: GACtx {
            input: f.clone(),
            pre_act,
            mid,
            gate,
        },
    })
}

pub fn global_attention_backward(
    ctx: &GACtx,
    params: &GAParams,
    grad_out: &Tensor4,
) -> Result<GAGrads> {
    if grad_out.shape() != ctx.input.shape() {
        return Err(Error::shape("global_attention_backward upstream shape"));
    }
    // direct path: out = F * gate
    let grad_f_direct = grad_out.mul(&ctx.gate)?;
    let grad_gate = grad_out.mul(&ctx.input)?;
    // through the sigmoid
    let grad_pre_gate = ctx
        .gate
        .zip_map(&grad_gate, |g, up| up * g * (1.0 - g))?;
    let conv2_grads = conv2d_backward(&ctx.mid, &params.conv2, &grad_pre_gate)?;
    let grad_pre_act = leaky_relu_backward(&ctx.pre_act, params.leaky_slope, &conv2_grads.input)?;
    let conv1_grads = conv2d_backward(&ctx.input, &params.conv1, &grad_pre_act)?;
    Ok(GAGrads {
        input: grad_f_direct.add(&conv1_grads.input)?,
        conv1_weights: conv1_grads.weights,
        conv1_bias: conv1_grads.bias,
        conv2_weights: conv2_grads.weights,
        conv2_bias: conv2_grads.bias,
    })
}

/// Channel bottleneck (shared two-layer MLP over avg- and max-pooled
/// descriptors) plus a spatial gate conv over channel-pooled maps.
#[derive(Debug, Clone)]
pub struct LAParams {
    pub channels: usize,
    pub hidden: usize,
    /// hidden x channels
    pub channel_w1: Vec<f64>,
    pub channel_b1: Vec<f64>,
    /// channels x hidden
    pub channel_w2: Vec<f64>,
    pub channel_b2: Vec<f64>,
    /// 2 -> 1 conv over the stacked (mean, max) channel-pooled maps
    pub spatial: ConvKernel,
}

impl LAParams {
    pub fn zeros(channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::config("la channels and reduction must be positive"));
        }
        let hidden = (channels / reduction).max(1);
        let spatial = ConvKernel::zeros(1, 2, spatial_kernel, spatial_kernel, 1, (spatial_kernel - 1) / 2)?;
        Ok(LAParams {
            channels,
            hidden,
            channel_w1: vec![0.0; hidden * channels],
            channel_b1: vec![0.0; hidden],
            channel_w2: vec![0.0; channels * hidden],
            channel_b2: vec![0.0; channels],
            spatial,
        })
    }

    pub fn he_init(
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut p = LAParams::zeros(channels, reduction, spatial_kernel)?;
        let std1 = (2.0 / channels as f64).sqrt();
        for w in &mut p.channel_w1 {
            *w = rng.normal() * std1;
        }
        let std2 = (2.0 / p.hidden as f64).sqrt();
        for w in &mut p.channel_w2 {
            *w = rng.normal() * std2;
        }
        p.spatial = ConvKernel::he_init(1, 2, spatial_kernel, spatial_kernel, 1, (spatial_kernel - 1) / 2, rng)?;
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.channel_w1.len()
            + self.channel_b1.len()
            + self.channel_w2.len()
            + self.channel_b2.len()
            + self.spatial.param_count()
    }
}

/// Saved activations for [`local_attention_backward`].
#[derive(Debug, Clone)]
pub struct LACtx {
    input: Tensor4,
    avg_desc: Vec<f64>,
    max_desc: Vec<f64>,
    max_pos: Vec<usize>,
    z1_avg: Vec<f64>,
    z1_max: Vec<f64>,
    channel_gate: Vec<f64>,
    gated: Tensor4,
    stacked: Tensor4,
    spatial_gate: Tensor4,
    spatial_argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LAForward {
    pub output: Tensor4,
    pub ctx: LACtx,
}

#[derive(Debug, Clone)]
pub struct LAGrads {
    pub input: Tensor4,
    pub channel_w1: Vec<f64>,
    pub channel_b1: Vec<f64>,
    pub channel_w2: Vec<f64>,
    pub channel_b2: Vec<f64>,
    pub spatial_weights: Vec<f64>,
    pub spatial_bias: Vec<f64>,
}

/// Channel gate first, then spatial gate; output shape equals input shape.
pub fn local_attention(f: &Tensor4, params: &LAParams) -> Result<Tensor4> {
    Ok(local_attention_forward(f, params)?.output)
}

pub fn local_attention_forward(f: &Tensor4, params: &LAParams) -> Result<LAForward> {
    let (n, c, h, w) = f.shape();
    if c != params.channels {
        return Err(Error::shape(format!(
            "local attention built for {} channels, input has {c}",
            params.channels
        )));
    }
    let plane = h * w;
    let inv_plane = 1.0 / plane as f64;
    // channel descriptors per sample: spatial mean and spatial max
    let mut avg_desc = vec![0.0; n * c];
    let mut max_desc = vec![0.0; n * c];
    let mut max_pos = vec![0usize; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = f.index(ni, ci, 0, 0);
            let map = &f.data()[base..base + plane];
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0;
            for (i, v) in map.iter().enumerate() {
                sum += v;
                if *v > best {
                    best = *v;
                    best_at = i;
                }
            }
            avg_desc[ni * c + ci] = sum * inv_plane;
            max_desc[ni * c + ci] = best;
            max_pos[ni * c + ci] = best_at;
        }
    }
    // shared bottleneck on both descriptors, summed before the sigmoid
    let hid = params.hidden;
    let mut z1_avg = vec![0.0; n * hid];
    let mut z1_max = vec![0.0; n * hid];
    let mut channel_gate = vec![0.0; n * c];
    for ni in 0..n {
        let desc_a = &avg_desc[ni * c..(ni + 1) * c];
        let desc_m = &max_desc[ni * c..(ni + 1) * c];
        for hi in 0..hid {
            let mut za = params.channel_b1[hi];
            let mut zm = params.channel_b1[hi];
            for ci in 0..c {
                let w1 = params.channel_w1[hi * c + ci];
                za += w1 * desc_a[ci];
                zm += w1 * desc_m[ci];
            }
            z1_avg[ni * hid + hi] = za;
            z1_max[ni * hid + hi] = zm;
        }
        for ci in 0..c {
            let mut z2 = 2.0 * params.channel_b2[ci];
            for hi in 0..hid {
                let w2 = params.channel_w2[ci * hid + hi];
                z2 += w2 * z1_avg[ni * hid + hi].max(0.0);
                z2 += w2 * z1_max[ni * hid + hi].max(0.0);
            }
            channel_gate[ni * c + ci] = sigmoid_scalar(z2);
        }
    }
    let mut gated = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = channel_gate[ni * c + ci];
            let base = f.index(ni, ci, 0, 0);
            for i in 0..plane {
                gated.data_mut()[base + i] = f.data()[base + i] * g;
            }
        }
    }
    // spatial gate from channel-pooled maps: channel 0 = mean, channel 1 = max
    let mut stacked = Tensor4::zeros(n, 2, h, w);
    let mut spatial_argmax = vec![0usize; n * plane];
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for ci in 0..c {
                    let v = gated.get(ni, ci, hi, wi);
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                stacked.set(ni, 0, hi, wi, sum * inv_c);
                stacked.set(ni, 1, hi, wi, best);
                spatial_argmax[ni * plane + hi * w + wi] = best_c;
            }
        }
    }
    let spatial_gate = sigmoid(&conv2d(&stacked, &params.spatial)?);
    let mut output = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    output.set(
                        ni,
                        ci,
                        hi,
                        wi,
                        gated.get(ni, ci, hi, wi) * spatial_gate.get(ni, 0, hi, wi),
                    );
                }
            }
        }
    }
    Ok(LAForward {
        output,
        ctx: LACtx {
            input: f.clone(),
            avg_desc,
            max_desc,
            max_pos,
            z1_avg,
            z1_max,
            channel_gate,
            gated,
            stacked,
            spatial_gate,
            spatial_argmax,
        },
    })
}

pub fn local_attention_backward(
    ctx: &LACtx,
    params: &LAParams,
    grad_out: &Tensor4,
) -> Result<LAGrads> {
    let (n, c, h, w) = ctx.input.shape();
    if grad_out.shape() != ctx.input.shape() {
        return Err(Error::shape("local_attention_backward upstream shape"));
    }
    let plane = h * w;
    let hid = params.hidden;
    let inv_c = 1.0 / c as f64;
    // output = gated * spatial_gate
    let mut grad_gated = Tensor4::zeros(n, c, h, w);
    let mut grad_sgate = Tensor4::zeros(n, 1, h, w);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let sg = ctx.spatial_gate.get(ni, 0, hi, wi);
                let mut acc = 0.0;
                for ci in 0..c {
                    let g = grad_out.get(ni, ci, hi, wi);
                    grad_gated.set(ni, ci, hi, wi, g * sg);
                    acc += g * ctx.gated.get(ni, ci, hi, wi);
                }
                grad_sgate.set(ni, 0, hi, wi, acc);
            }
        }
    }
    // through the spatial sigmoid and conv
    let grad_spre = ctx
        .spatial_gate
        .zip_map(&grad_sgate, |g, up| up * g * (1.0 - g))?;
    let spatial_grads = conv2d_backward(&ctx.stacked, &params.spatial, &grad_spre)?;
    // unstack mean/max pooled map gradients back onto the gated tensor
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let gm = spatial_grads.input.get(ni, 0, hi, wi) * inv_c;
                for ci in 0..c {
                    let idx = grad_gated.index(ni, ci, hi, wi);
                    grad_gated.data_mut()[idx] += gm;
                }
                let gx = spatial_grads.input.get(ni, 1, hi, wi);
                let best_c = ctx.spatial_argmax[ni * plane + hi * w + wi];
                let idx = grad_gated.index(ni, best_c, hi, wi);
                grad_gated.data_mut()[idx] += gx;
            }
        }
    }
    // gated = input * channel_gate
    let mut grad_input = Tensor4::zeros(n, c, h, w);
    let mut grad_cgate = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let g = ctx.channel_gate[ni * c + ci];
            let base = ctx.input.index(ni, ci, 0, 0);
            let mut acc = 0.0;
            for i in 0..plane {
                let up = grad_gated.data()[base + i];
                grad_input.data_mut()[base + i] = up * g;
                acc += up * ctx.input.data()[base + i];
            }
            grad_cgate[ni * c + ci] = acc;
        }
    }
    // through the channel sigmoid and the shared bottleneck (both branches)
    let mut grad_w1 = vec![0.0; params.channel_w1.len()];
    let mut grad_b1 = vec![0.0; params.channel_b1.len()];
    let mut grad_w2 = vec![0.0; params.channel_w2.len()];
    let mut grad_b2 = vec![0.0; params.channel_b2.len()];
    for ni in 0..n {
        let mut gz2 = vec![0.0; c];
        for ci in 0..c {
            let g = ctx.channel_gate[ni * c + ci];
            gz2[ci] = grad_cgate[ni * c + ci] * g * (1.0 - g);
            grad_b2[ci] += 2.0 * gz2[ci];
        }
        let mut ga1_avg = vec![0.0; hid];
        let mut ga1_max = vec![0.0; hid];
        for ci in 0..c {
            for hi in 0..hid {
                let a_avg = ctx.z1_avg[ni * hid + hi].max(0.0);
                let a_max = ctx.z1_max[ni * hid + hi].max(0.0);
                grad_w2[ci * hid + hi] += gz2[ci] * (a_avg + a_max);
                ga1_avg[hi] += gz2[ci] * params.channel_w2[ci * hid + hi];
                ga1_max[hi] += gz2[ci] * params.channel_w2[ci * hid + hi];
            }
        }
        let mut grad_avg_desc = vec![0.0; c];
        let mut grad_max_desc = vec![0.0; c];
        for hi in 0..hid {
            let gz1_avg = if ctx.z1_avg[ni * hid + hi] > 0.0 { ga1_avg[hi] } else { 0.0 };
            let gz1_max = if ctx.z1_max[ni * hid + hi] > 0.0 { ga1_max[hi] } else { 0.0 };
            grad_b1[hi] += gz1_avg + gz1_max;
            for ci in 0..c {
                grad_w1[hi * c + ci] += gz1_avg * ctx.avg_desc[ni * c + ci]
                    + gz1_max * ctx.max_desc[ni * c + ci];
                grad_avg_desc[ci] += gz1_avg * params.channel_w1[hi * c + ci];
                grad_max_desc[ci] += gz1_max * params.channel_w1[hi * c + ci];
            }
        }
        // pooled descriptors back onto the input
        let inv_plane = 1.0 / plane as f64;
        for ci in 0..c {
            let base = ctx.input.index(ni, ci, 0, 0);
            let spread = grad_avg_desc[ci] * inv_plane;
            for i in 0..plane {
                grad_input.data_mut()[base + i] += spread;
            }
            let best = ctx.max_pos[ni * c + ci];
            grad_input.data_mut()[base + best] += grad_max_desc[ci];
        }
    }
    Ok(LAGrads {
        input: grad_input,
        channel_w1: grad_w1,
        channel_b1: grad_b1,
        channel_w2: grad_w2,
        channel_b2: grad_b2,
        spatial_weights: spatial_grads.weights,
        spatial_bias: spatial_grads.bias,
    })
}

/// Complementary binary channel masks: channels below `floor(C/2)` select
/// the local branch, the rest select the global branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMasks {
    pub global_mask: Vec<f64>,
    pub local_mask: Vec<f64>,
}

impl ChannelMasks {
    pub fn new(channels: usize) -> Self {
        let half = channels / 2;
        let global_mask: Vec<f64> = (0..channels).map(|i| if i < half { 0.0 } else { 1.0 }).collect();
        let local_mask: Vec<f64> = global_mask.iter().map(|m| 1.0 - m).collect();
        ChannelMasks { global_mask, local_mask }
    }

    pub fn len(&self) -> usize {
        self.global_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_mask.is_empty()
    }
}

/// `F = M_G * F_G + M_L * F_L` with the masks broadcast over batch and
/// spatial axes.
pub fn fuse(f_global: &Tensor4, f_local: &Tensor4, masks: &ChannelMasks) -> Result<Tensor4> {
    if f_global.shape() != f_local.shape() {
        return Err(Error::shape(format!(
            "fuse inputs {:?} vs {:?}",
            f_global.shape(),
            f_local.shape()
        )));
    }
    let (n, c, h, w) = f_global.shape();
    if masks.len() != c {
        return Err(Error::shape(format!(
            "fuse masks sized {} for {c} channels",
            masks.len()
        )));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let (mg, ml) = (masks.global_mask[ci], masks.local_mask[ci]);
            for hi in 0..h {
                for wi in 0..w {
                    out.set(
                        ni,
                        ci,
                        hi,
                        wi,
                        mg * f_global.get(ni, ci, hi, wi) + ml * f_local.get(ni, ci, hi, wi),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`fuse`] w.r.t. both branches.
pub fn fuse_backward(grad_out: &Tensor4, masks: &ChannelMasks) -> Result<(Tensor4, Tensor4)> {
    let (n, c, h, w) = grad_out.shape();
    if masks.len() != c {
        return Err(Error::shape("fuse_backward mask length"));
    }
    let mut grad_global = Tensor4::zeros(n, c, h, w);
    let mut grad_local = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let g = grad_out.get(ni, ci, hi, wi);
                    grad_global.set(ni, ci, hi, wi, g * masks.global_mask[ci]);
                    grad_local.set(ni, ci, hi, wi, g * masks.local_mask[ci]);
                }
            }
        }
    }
    Ok((grad_global, grad_local))
}
