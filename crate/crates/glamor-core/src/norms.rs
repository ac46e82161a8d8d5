//! The four feature normalizations (L2, batch, group, layer) with analytic
//! backward passes, plus the layer-norm neck that bridges metric-loss
//! features to classifier features.
//!
//! Batch, group, and layer norm all standardize a feature set S as
//! `(x - mean_S) / sqrt(var_S + eps)` followed by a per-channel affine.
//! They differ only in what S is:
//!   batch  -- all pixels sharing a channel index, across the batch
//!   group  -- pixels of one sample across a contiguous block of channels
//!   layer  -- all pixels of one sample (group norm with a single group)
//! L2 rescales each sample to unit Euclidean norm and has no affine.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    Batch,
    Group,
    Layer,
}

/// Which normalization to apply and with what group size / epsilon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Channels per group; only read by the group kind.
    pub group_size: usize,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Channels per group when nothing else is configured.
pub const DEFAULT_GROUP_SIZE: usize = 16;

impl NormSpec {
    pub fn l2() -> Self {
        NormSpec { kind: NormKind::L2, group_size: 1, epsilon: DEFAULT_EPSILON }
    }

    pub fn batch() -> Self {
        NormSpec { kind: NormKind::Batch, group_size: 1, epsilon: DEFAULT_EPSILON }
    }

    pub fn group(group_size: usize) -> Self {
        NormSpec { kind: NormKind::Group, group_size, epsilon: DEFAULT_EPSILON }
    }

    pub fn layer() -> Self {
        NormSpec { kind: NormKind::Layer, group_size: 1, epsilon: DEFAULT_EPSILON }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.kind == NormKind::Group {
            if self.group_size == 0 {
                return Err(Error::config("group_size must be positive"));
            }
            if channels % self.group_size != 0 {
                return Err(Error::config(format!(
                    "group_size {} does not divide channel count {channels}",
                    self.group_size
                )));
            }
        }
        Ok(())
    }

    /// Effective channels per group once the kind is resolved.
    fn channels_per_group(&self, channels: usize) -> usize {
        match self.kind {
            NormKind::Layer => channels,
            NormKind::Group => self.group_size,
            _ => channels,
        }
    }
}

/// Per-channel affine parameters and (for the batch kind) running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Saved forward context consumed by [`norm_backward`].
#[derive(Debug, Clone)]
pub struct NormCtx {
    spec: NormSpec,
    shape: (usize, usize, usize, usize),
    /// Standardized (pre-affine) values; for L2, the unit-normalized sample.
    xhat: Tensor4,
    /// One inverse standard deviation per feature set (L2: inverse norm per sample).
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    /// Batch kind in eval mode reduces to a per-channel affine scale.
    eval_mode: bool,
}

/// Forward output plus the context needed for the analytic backward.
#[derive(Debug, Clone)]
pub struct NormForward {
    pub output: Tensor4,
    pub ctx: NormCtx,
}

/// Gradients returned by [`norm_backward`]. `gamma`/`beta` are empty for the
/// L2 kind, which has no affine parameters.
#[derive(Debug, Clone)]
pub struct NormGrads {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Rescale a vector to unit L2 norm. Vectors with norm below 1e-12 are
/// rejected rather than silently divided.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateInput {
            context: format!("l2_normalize: vector norm {norm} below 1e-12"),
        });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Backward of [`l2_normalize`]: `(g - u (u . g)) / |v|` with `u = v/|v|`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    if v.len() != grad_out.len() {
        return Err(Error::shape("l2_normalize_backward length mismatch"));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateInput {
            context: "l2_normalize_backward: degenerate vector".into(),
        });
    }
    let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let dot: f64 = u.iter().zip(grad_out.iter()).map(|(a, b)| a * b).sum();
    Ok(u.iter()
        .zip(grad_out.iter())
        .map(|(ui, gi)| (gi - ui * dot) / norm)
        .collect())
}

/// Normalize `x` according to `spec`, applying the affine parameters in
/// `state`. Batch kind in training mode updates the running statistics.
pub fn normalize(x: &Tensor4, spec: &NormSpec, state: &mut NormState, training: bool) -> Result<Tensor4> {
    Ok(normalize_forward(x, spec, state, training)?.output)
}

/// As [`normalize`] but also returns the context for [`norm_backward`].
pub fn normalize_forward(
    x: &Tensor4,
    spec: &NormSpec,
    state: &mut NormState,
    training: bool,
) -> Result<NormForward> {
    let (n, c, h, w) = x.shape();
    spec.validate(c)?;
    match spec.kind {
        NormKind::L2 => l2_forward(x, spec),
        NormKind::Batch => {
            if state.gamma.len() != c {
                return Err(Error::shape(format!(
                    "norm state sized for {} channels, input has {c}",
                    state.gamma.len()
                )));
            }
            if training {
                batch_train_forward(x, spec, state)
            } else {
                batch_eval_forward(x, spec, state)
            }
        }
        NormKind::Group | NormKind::Layer => {
            if state.gamma.len() != c {
                return Err(Error::shape(format!(
                    "norm state sized for {} channels, input has {c}",
                    state.gamma.len()
                )));
            }
            group_forward(x, spec, state, spec.channels_per_group(c))
        }
    }
    .map(|mut fwd| {
        fwd.ctx.shape = (n, c, h, w);
        fwd
    })
}

fn l2_forward(x: &Tensor4, spec: &NormSpec) -> Result<NormForward> {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4::zeros(n, c, h, w);
    let mut inv_std = Vec::with_capacity(n);
    for ni in 0..n {
        let sample = x.sample(ni);
        let norm = sample.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateInput {
                context: format!("l2 normalize: sample {ni} has norm {norm}"),
            });
        }
        let inv = 1.0 / norm;
        inv_std.push(inv);
        for (o, v) in out.sample_mut(ni).iter_mut().zip(sample.iter()) {
            *o = v * inv;
        }
    }
    let xhat = out.clone();
    Ok(NormForward {
        output: out,
        ctx: NormCtx {
            spec: *spec,
            shape: (n, c, h, w),
            xhat,
            inv_std,
            gamma: Vec::new(),
            eval_mode: false,
        },
    })
}

/// Shared machinery for group and layer kinds: one feature set per
/// (sample, channel group), statistics over `cpg * h * w` entries.
fn group_forward(
    x: &Tensor4,
    spec: &NormSpec,
    state: &NormState,
    cpg: usize,
) -> Result<NormForward> {
    let (n, c, h, w) = x.shape();
    let groups = c / cpg;
    let set_len = cpg * h * w;
    let mut xhat = Tensor4::zeros(n, c, h, w);
    let mut out = Tensor4::zeros(n, c, h, w);
    let mut inv_std = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for g in 0..groups {
            let start = x.index(ni, g * cpg, 0, 0);
            let block = &x.data()[start..start + set_len];
            let mean = block.iter().sum::<f64>() / set_len as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / set_len as f64;
            let inv = 1.0 / (var + spec.epsilon).sqrt();
            inv_std.push(inv);
            for (offset, v) in block.iter().enumerate() {
                let ch = g * cpg + offset / (h * w);
                let idx = start + offset;
                let normed = (v - mean) * inv;
                xhat.data_mut()[idx] = normed;
                out.data_mut()[idx] = state.gamma[ch] * normed + state.beta[ch];
            }
        }
    }
    Ok(NormForward {
        output: out,
        ctx: NormCtx {
            spec: *spec,
            shape: (n, c, h, w),
            xhat,
            inv_std,
            gamma: state.gamma.clone(),
            eval_mode: false,
        },
    })
}

fn batch_train_forward(x: &Tensor4, spec: &NormSpec, state: &mut NormState) -> Result<NormForward> {
    let (n, c, h, w) = x.shape();
    let set_len = n * h * w;
    let mut xhat = Tensor4::zeros(n, c, h, w);
    let mut out = Tensor4::zeros(n, c, h, w);
    let mut inv_std = Vec::with_capacity(c);
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    sum += x.get(ni, ci, hi, wi);
                }
            }
        }
        let mean = sum / set_len as f64;
        let mut var_sum = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let d = x.get(ni, ci, hi, wi) - mean;
                    var_sum += d * d;
                }
            }
        }
        let var = var_sum / set_len as f64;
        let inv = 1.0 / (var + spec.epsilon).sqrt();
        inv_std.push(inv);
        state.running_mean[ci] = (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean;
        state.running_var[ci] = (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let normed = (x.get(ni, ci, hi, wi) - mean) * inv;
                    xhat.set(ni, ci, hi, wi, normed);
                    out.set(ni, ci, hi, wi, state.gamma[ci] * normed + state.beta[ci]);
                }
            }
        }
    }
    Ok(NormForward {
        output: out,
        ctx: NormCtx {
            spec: *spec,
            shape: (n, c, h, w),
            xhat,
            inv_std,
            gamma: state.gamma.clone(),
            eval_mode: false,
        },
    })
}

fn batch_eval_forward(x: &Tensor4, spec: &NormSpec, state: &NormState) -> Result<NormForward> {
    let (n, c, h, w) = x.shape();
    let mut xhat = Tensor4::zeros(n, c, h, w);
    let mut out = Tensor4::zeros(n, c, h, w);
    let mut inv_std = Vec::with_capacity(c);
    for ci in 0..c {
        if state.running_var[ci] < 0.0 {
            return Err(Error::config(format!(
                "running variance of channel {ci} is negative"
            )));
        }
        let inv = 1.0 / (state.running_var[ci] + spec.epsilon).sqrt();
        inv_std.push(inv);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let normed = (x.get(ni, ci, hi, wi) - state.running_mean[ci]) * inv;
                    xhat.set(ni, ci, hi, wi, normed);
                    out.set(ni, ci, hi, wi, state.gamma[ci] * normed + state.beta[ci]);
                }
            }
        }
    }
    Ok(NormForward {
        output: out,
        ctx: NormCtx {
            spec: *spec,
            shape: (n, c, h, w),
            xhat,
            inv_std,
            gamma: state.gamma.clone(),
            eval_mode: true,
        },
    })
}

/// Exact analytic gradient of the matching [`normalize_forward`] call.
pub fn norm_backward(ctx: &NormCtx, grad_out: &Tensor4) -> Result<NormGrads> {
    let (n, c, h, w) = ctx.shape;
    if grad_out.shape() != ctx.shape {
        return Err(Error::shape(format!(
            "norm_backward upstream shape {:?} != saved {:?}",
            grad_out.shape(),
            ctx.shape
        )));
    }
    match ctx.spec.kind {
        NormKind::L2 => {
            let mut input = Tensor4::zeros(n, c, h, w);
            for ni in 0..n {
                let u = ctx.xhat.sample(ni);
                let g = grad_out.sample(ni);
                let dot: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                let inv = ctx.inv_std[ni];
                for ((o, ui), gi) in input.sample_mut(ni).iter_mut().zip(u.iter()).zip(g.iter()) {
                    *o = (gi - ui * dot) * inv;
                }
            }
            Ok(NormGrads { input, gamma: Vec::new(), beta: Vec::new() })
        }
        NormKind::Batch if ctx.eval_mode => {
            let mut input = Tensor4::zeros(n, c, h, w);
            let mut gamma = vec![0.0; c];
            let mut beta = vec![0.0; c];
            for ci in 0..c {
                let scale = ctx.gamma[ci] * ctx.inv_std[ci];
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let g = grad_out.get(ni, ci, hi, wi);
                            input.set(ni, ci, hi, wi, g * scale);
                            gamma[ci] += g * ctx.xhat.get(ni, ci, hi, wi);
                            beta[ci] += g;
                        }
                    }
                }
            }
            Ok(NormGrads { input, gamma, beta })
        }
        NormKind::Batch => {
            let set_len = (n * h * w) as f64;
            let mut input = Tensor4::zeros(n, c, h, w);
            let mut gamma = vec![0.0; c];
            let mut beta = vec![0.0; c];
            for ci in 0..c {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let g = grad_out.get(ni, ci, hi, wi);
                            let xh = ctx.xhat.get(ni, ci, hi, wi);
                            let dxhat = g * ctx.gamma[ci];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xh;
                            gamma[ci] += g * xh;
                            beta[ci] += g;
                        }
                    }
                }
                let inv = ctx.inv_std[ci];
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let g = grad_out.get(ni, ci, hi, wi);
                            let xh = ctx.xhat.get(ni, ci, hi, wi);
                            let dxhat = g * ctx.gamma[ci];
                            input.set(
                                ni,
                                ci,
                                hi,
                                wi,
                                inv * (dxhat - sum_dxhat / set_len - xh * sum_dxhat_xhat / set_len),
                            );
                        }
                    }
                }
            }
            Ok(NormGrads { input, gamma, beta })
        }
        NormKind::Group | NormKind::Layer => {
            let cpg = ctx.spec.channels_per_group(c);
            let groups = c / cpg;
            let set_len = (cpg * h * w) as f64;
            let mut input = Tensor4::zeros(n, c, h, w);
            let mut gamma = vec![0.0; c];
            let mut beta = vec![0.0; c];
            for ni in 0..n {
                for g in 0..groups {
                    let start = ctx.xhat.index(ni, g * cpg, 0, 0);
                    let len = cpg * h * w;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for offset in 0..len {
                        let ch = g * cpg + offset / (h * w);
                        let gy = grad_out.data()[start + offset];
                        let xh = ctx.xhat.data()[start + offset];
                        let dxhat = gy * ctx.gamma[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xh;
                        gamma[ch] += gy * xh;
                        beta[ch] += gy;
                    }
                    let inv = ctx.inv_std[ni * groups + g];
                    for offset in 0..len {
                        let ch = g * cpg + offset / (h * w);
                        let gy = grad_out.data()[start + offset];
                        let xh = ctx.xhat.data()[start + offset];
                        let dxhat = gy * ctx.gamma[ch];
                        input.data_mut()[start + offset] =
                            inv * (dxhat - sum_dxhat / set_len - xh * sum_dxhat_xhat / set_len);
                    }
                }
            }
            Ok(NormGrads { input, gamma, beta })
        }
    }
}

/// Saved context for [`neck_backward`].
#[derive(Debug, Clone)]
pub struct NeckCtx {
    xhat: Matrix,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NeckForward {
    pub output: Matrix,
    pub ctx: NeckCtx,
}

/// Layer normalization of each feature row with a learnable per-feature
/// affine; converts metric-loss features into classifier features.
pub fn neck_forward(
    features: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    epsilon: f64,
) -> Result<NeckForward> {
    let (rows, cols) = (features.rows(), features.cols());
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::shape(format!(
            "neck affine sized {} / {}, features have {cols} dims",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = features.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let normed = (v - mean) * inv;
            xhat.set(r, j, normed);
            out.set(r, j, gamma[j] * normed + beta[j]);
        }
    }
    Ok(NeckForward {
        output: out,
        ctx: NeckCtx { xhat, inv_std, gamma: gamma.to_vec() },
    })
}

/// Plain neck with identity affine, matching the bare operation contract.
pub fn neck(features: &Matrix) -> Result<Matrix> {
    let cols = features.cols();
    Ok(neck_forward(features, &vec![1.0; cols], &vec![0.0; cols], DEFAULT_EPSILON)?.output)
}

pub fn neck_backward(ctx: &NeckCtx, grad_out: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let (rows, cols) = (ctx.xhat.rows(), ctx.xhat.cols());
    if (grad_out.rows(), grad_out.cols()) != (rows, cols) {
        return Err(Error::shape("neck_backward shape mismatch"));
    }
    let mut input = Matrix::zeros(rows, cols);
    let mut gamma = vec![0.0; cols];
    let mut beta = vec![0.0; cols];
    let m = cols as f64;
    for r in 0..rows {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            let g = grad_out.get(r, j);
            let xh = ctx.xhat.get(r, j);
            let dxhat = g * ctx.gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
            gamma[j] += g * xh;
            beta[j] += g;
        }
        let inv = ctx.inv_std[r];
        for j in 0..cols {
            let g = grad_out.get(r, j);
            let xh = ctx.xhat.get(r, j);
            let dxhat = g * ctx.gamma[j];
            input.set(r, j, inv * (dxhat - sum_dxhat / m - xh * sum_dxhat_xhat / m));
        }
    }
    Ok((input, gamma, beta))
}
