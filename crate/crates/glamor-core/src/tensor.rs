//! Dense tensor core: NCHW activation arrays, feature matrices, direct 2-D
//! convolution with hand-written backward, and elementwise activations.
//!
//! Everything is `f64` and every reduction runs in one documented order
//! (convolution accumulates kh, then kw, then input channel), so results are
//! bit-reproducible across runs.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense 4-axis array in row-major batch -> channel -> height -> width order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "tensor data length {} != {}x{}x{}x{} = {}",
                data.len(),
                n,
                c,
                h,
                w,
                n * c * h * w
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let idx = t.index(ni, ci, hi, wi);
                        t.data[idx] = f(ni, ci, hi, wi);
                    }
                }
            }
        }
        t
    }

    pub fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut SplitMix64) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.normal()).collect();
        Tensor4 { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let idx = self.index(n, c, h, w);
        self.data[idx] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "zip_map {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Tensor4 {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a * b)
    }

    /// View of one sample's `c*h*w` block.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.c * self.h * self.w;
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// Copy one sample out of a larger batch as a 1xCxHxW tensor.
    pub fn slice_sample(&self, n: usize) -> Tensor4 {
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.sample(n).to_vec(),
        }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(samples: &[Tensor4]) -> Result<Tensor4> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::with_capacity(samples.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in samples {
            if (t.c, t.h, t.w) != (c, h, w) {
                return Err(Error::shape(format!(
                    "stack expects uniform CxHxW, got {:?} vs {:?}",
                    (t.c, t.h, t.w),
                    (c, h, w)
                )));
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(format!("tensor {context}")))
        }
    }
}

/// Row-major 2-D matrix used for feature vectors, logits, and distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("ragged rows in matrix"));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(format!("matrix {context}")))
        }
    }
}

/// 2-D convolution weights: `(out_channels, in_channels, kh, kw)` plus one
/// bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
            return Err(Error::config(format!("kernel dims must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            kh,
            kw,
            stride,
            padding,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
        })
    }

    /// He-style fan-in init: weights ~ N(0, sqrt(2 / (in_channels*kh*kw))),
    /// zero biases.
    pub fn he_init(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut k = ConvKernel::zeros(out_channels, in_channels, kh, kw, stride, padding)?;
        let std = (2.0 / (in_channels * kh * kw) as f64).sqrt();
        for w in &mut k.weights {
            *w = rng.normal() * std;
        }
        Ok(k)
    }

    #[inline]
    pub fn weight_index(&self, oc: usize, ic: usize, kh: usize, kw: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kh + kh) * self.kw + kw
    }

    /// `floor((in + 2*padding - k)/stride) + 1` for both spatial axes.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.padding).checked_sub(self.kh).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(self.kw).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "conv output dims non-positive for input {h}x{w}, kernel {}x{} stride {} pad {}",
                self.kh, self.kw, self.stride, self.padding
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients of a convolution w.r.t. its input, weights, and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Direct cross-correlation. The accumulator loops kh, then kw, then input
/// channel; that order is the determinism contract, do not reorder.
pub fn conv2d(input: &Tensor4, kernel: &ConvKernel) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if c != kernel.in_channels {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels, kernel expects {}",
            kernel.in_channels
        )));
    }
    let (oh, ow) = kernel.output_dims(h, w)?;
    let mut out = Tensor4::zeros(n, kernel.out_channels, oh, ow);
    let pad = kernel.padding as isize;
    let in_plane = h * w;
    let in_sample = c * in_plane;
    let out_plane = oh * ow;
    let k_plane = kernel.kh * kernel.kw;
    let k_per_oc = kernel.in_channels * k_plane;
    let data = input.data();
    let weights = &kernel.weights;
    let out_data = out.data_mut();
    for ni in 0..n {
        let in_base = ni * in_sample;
        let out_base_n = ni * kernel.out_channels * out_plane;
        for oc in 0..kernel.out_channels {
            let w_base = oc * k_per_oc;
            let out_base = out_base_n + oc * out_plane;
            let bias = kernel.bias[oc];
            for oy in 0..oh {
                let base_y = (oy * kernel.stride) as isize - pad;
                for ox in 0..ow {
                    let base_x = (ox * kernel.stride) as isize - pad;
                    let mut acc = bias;
                    for ky in 0..kernel.kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * w;
                        for kx in 0..kernel.kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            // stride over input channels without re-deriving
                            // the full index per element
                            let mut w_idx = w_base + ky * kernel.kw + kx;
                            let mut in_idx = row + ix as usize;
                            for _ in 0..kernel.in_channels {
                                acc += weights[w_idx] * data[in_idx];
                                w_idx += k_plane;
                                in_idx += in_plane;
                            }
                        }
                    }
                    out_data[out_base + oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients w.r.t. input, weights, and bias
/// given the upstream gradient of the output.
pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &ConvKernel,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    let (n, c, h, w) = input.shape();
    if c != kernel.in_channels {
        return Err(Error::shape("conv2d_backward channel mismatch"));
    }
    let (oh, ow) = kernel.output_dims(h, w)?;
    if grad_out.shape() != (n, kernel.out_channels, oh, ow) {
        return Err(Error::shape(format!(
            "conv2d_backward grad shape {:?}, expected {:?}",
            grad_out.shape(),
            (n, kernel.out_channels, oh, ow)
        )));
    }
    let mut grad_input = Tensor4::zeros(n, c, h, w);
    let mut grad_weights = vec![0.0; kernel.weights.len()];
    let mut grad_bias = vec![0.0; kernel.bias.len()];
    let pad = kernel.padding as isize;
    let in_plane = h * w;
    let in_sample = c * in_plane;
    let out_plane = oh * ow;
    let k_plane = kernel.kh * kernel.kw;
    let k_per_oc = kernel.in_channels * k_plane;
    let data = input.data();
    let weights = &kernel.weights;
    let gin = grad_input.data_mut();
    for ni in 0..n {
        let in_base = ni * in_sample;
        let out_base_n = ni * kernel.out_channels * out_plane;
        for oc in 0..kernel.out_channels {
            let w_base = oc * k_per_oc;
            let out_base = out_base_n + oc * out_plane;
            for oy in 0..oh {
                let base_y = (oy * kernel.stride) as isize - pad;
                for ox in 0..ow {
                    let g = grad_out.data()[out_base + oy * ow + ox];
                    grad_bias[oc] += g;
                    let base_x = (ox * kernel.stride) as isize - pad;
                    for ky in 0..kernel.kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = in_base + iy as usize * w;
                        for kx in 0..kernel.kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let mut w_idx = w_base + ky * kernel.kw + kx;
                            let mut in_idx = row + ix as usize;
                            for _ in 0..kernel.in_channels {
                                grad_weights[w_idx] += g * data[in_idx];
                                gin[in_idx] += g * weights[w_idx];
                                w_idx += k_plane;
                                in_idx += in_plane;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// `x` for `x >= 0`, `slope * x` otherwise. `slope` must be in `(0, 1)`.
pub fn leaky_relu(x: &Tensor4, slope: f64) -> Result<Tensor4> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::config(format!("leaky_relu slope {slope} not in (0,1)")));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub fn leaky_relu_backward(x: &Tensor4, slope: f64, grad_out: &Tensor4) -> Result<Tensor4> {
    x.zip_map(grad_out, |v, g| if v >= 0.0 { g } else { slope * g })
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Elementwise logistic sigmoid; output strictly inside `(0, 1)`.
pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(sigmoid_scalar)
}

/// Saturated values are nudged to the nearest representable neighbour inside
/// `(0, 1)` so gates never collapse a sign, even for extreme inputs.
#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE).min(1.0_f64.next_down())
}

/// Backward through sigmoid given the forward *output* `y`.
pub fn sigmoid_backward(y: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    y.zip_map(grad_out, |yv, g| g * yv * (1.0 - yv))
}

/// Spatial mean per (sample, channel): NxCxHxW -> NxC.
pub fn global_avg_pool(x: &Tensor4) -> Matrix {
    let (n, c, h, w) = x.shape();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Matrix::zeros(n, c);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    acc += x.get(ni, ci, hi, wi);
                }
            }
            out.set(ni, ci, acc * inv);
        }
    }
    out
}

pub fn global_avg_pool_backward(
    input_shape: (usize, usize, usize, usize),
    grad_out: &Matrix,
) -> Result<Tensor4> {
    let (n, c, h, w) = input_shape;
    if (grad_out.rows(), grad_out.cols()) != (n, c) {
        return Err(Error::shape("global_avg_pool_backward shape"));
    }
    let inv = 1.0 / (h * w) as f64;
    Ok(Tensor4::from_fn(n, c, h, w, |ni, ci, _, _| {
        grad_out.get(ni, ci) * inv
    }))
}
