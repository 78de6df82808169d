//! Layer primitives with analytic forward/backward passes.
//!
//! All layers run in double precision. Each forward returns the output plus
//! whatever cache its backward needs; backwards return gradients explicitly
//! rather than mutating shared state, so callers control accumulation order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Pointwise nonlinearity selector for conv/dense stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Gradient through the nonlinearity given its input and upstream grad.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Activation::Relu => {
                let mut g = grad_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            Activation::Tanh => {
                let mut g = grad_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                    let t = xv.tanh();
                    *gv *= 1.0 - t * t;
                }
                g
            }
        }
    }
}

/// Hyperbolic tangent on a scalar, with derivative helper used by the
/// mixing layer.
pub fn tanh_act(x: f64) -> f64 {
    x.tanh()
}

pub fn tanh_act_grad(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// Overflow-safe softplus `ln(1 + e^x)`.
pub fn softplus_act(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softplus derivative, the logistic sigmoid.
pub fn softplus_act_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Convolution (valid padding)
// ---------------------------------------------------------------------------

/// Cache produced by [`conv2d_valid`], consumed by its backward pass.
pub struct ConvCache {
    cols: Vec<f64>, // (C*Fh*Fw) x (Ho*Wo)
    in_shape: [usize; 3],
    out_hw: [usize; 2],
    f_hw: [usize; 2],
}

fn conv_out_dims(input: &Tensor, kernels: &Tensor) -> Result<([usize; 3], [usize; 4])> {
    let ish = input.shape();
    let ksh = kernels.shape();
    if ish.len() != 3 || ksh.len() != 4 {
        return Err(Error::invalid(format!(
            "conv2d expects CxHxW input and KxCxFhxFw kernels, got {ish:?} and {ksh:?}"
        )));
    }
    let (c, h, w) = (ish[0], ish[1], ish[2]);
    let (k, kc, fh, fw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
    if kc != c {
        return Err(Error::invalid(format!(
            "conv2d channel mismatch: input has {c}, kernels expect {kc}"
        )));
    }
    if fh > h || fw > w {
        return Err(Error::invalid(format!(
            "conv2d filter {fh}x{fw} larger than input {h}x{w}"
        )));
    }
    Ok(([c, h, w], [k, c, fh, fw]))
}

/// Valid (no padding) cross-correlation plus bias.
///
/// input: C x H x W, kernels: K x C x Fh x Fw, bias: K.
/// Output: K x (H-Fh+1) x (W-Fw+1).
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(Tensor, ConvCache)> {
    let ([c, h, w], [k, _, fh, fw]) = conv_out_dims(input, kernels)?;
    if bias.shape() != [k] {
        return Err(Error::invalid(format!(
            "conv2d bias shape {:?} does not match {k} kernels",
            bias.shape()
        )));
    }
    let ho = h - fh + 1;
    let wo = w - fw + 1;
    let patch_len = c * fh * fw;
    let positions = ho * wo;

    // im2col: one column per output position.
    let mut cols = vec![0.0; patch_len * positions];
    let x = input.data();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for fy in 0..fh {
            for fx in 0..fw {
                let row = ((ch * fh + fy) * fw + fx) * positions;
                for oy in 0..ho {
                    let src = (oy + fy) * w + fx;
                    let dst = row + oy * wo;
                    cols[dst..dst + wo].copy_from_slice(&plane[src..src + wo]);
                }
            }
        }
    }

    let mut out = vec![0.0; k * positions];
    for (ki, &b) in bias.data().iter().enumerate() {
        out[ki * positions..(ki + 1) * positions].fill(b);
    }
    matmul_acc(kernels.data(), &cols, &mut out, k, patch_len, positions);

    Ok((
        Tensor::from_vec(&[k, ho, wo], out)?,
        ConvCache {
            cols,
            in_shape: [c, h, w],
            out_hw: [ho, wo],
            f_hw: [fh, fw],
        },
    ))
}

/// Backward for [`conv2d_valid`]. Returns (grad_input, grad_kernels, grad_bias).
pub fn conv2d_valid_backward(
    cache: &ConvCache,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [c, h, w] = cache.in_shape;
    let [ho, wo] = cache.out_hw;
    let [fh, fw] = cache.f_hw;
    let k = kernels.shape()[0];
    let patch_len = c * fh * fw;
    let positions = ho * wo;
    if grad_out.shape() != [k, ho, wo] {
        return Err(Error::invalid(format!(
            "conv2d backward grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [k, ho, wo]
        )));
    }

    let g = grad_out.data();
    let mut grad_bias = Tensor::zeros(&[k]);
    for ki in 0..k {
        grad_bias.data_mut()[ki] = g[ki * positions..(ki + 1) * positions].iter().sum();
    }

    // dL/dW = grad_out (K x P) * cols^T (P x CFF)
    let mut grad_k = Tensor::zeros(kernels.shape());
    matmul_bt_acc(g, &cache.cols, grad_k.data_mut(), k, positions, patch_len);

    // dL/dcols = W^T (CFF x K) * grad_out (K x P), then scatter back (col2im).
    let mut grad_cols = vec![0.0; patch_len * positions];
    matmul_at_acc(kernels.data(), g, &mut grad_cols, patch_len, k, positions);

    let mut grad_in = Tensor::zeros(&[c, h, w]);
    let gi = grad_in.data_mut();
    for ch in 0..c {
        for fy in 0..fh {
            for fx in 0..fw {
                let row = ((ch * fh + fy) * fw + fx) * positions;
                for oy in 0..ho {
                    let dst = ch * h * w + (oy + fy) * w + fx;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        gi[dst + ox] += grad_cols[src + ox];
                    }
                }
            }
        }
    }

    Ok((grad_in, grad_k, grad_bias))
}

// ---------------------------------------------------------------------------
// 2x2 max pooling with floor semantics
// ---------------------------------------------------------------------------

pub struct PoolCache {
    argmax: Vec<usize>, // flat input index per output element
    in_shape: [usize; 3],
}

/// Non-overlapping 2x2 max pool; odd trailing row/column dropped.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let ish = input.shape();
    if ish.len() != 3 {
        return Err(Error::invalid(format!("maxpool2 expects CxHxW, got {ish:?}")));
    }
    let (c, h, w) = (ish[0], ish[1], ish[2]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "maxpool2 needs spatial dims >= 2, got {h}x{w}"
        )));
    }
    let ho = h / 2;
    let wo = w / 2;
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    let mut argmax = vec![0usize; c * ho * wo];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let idx = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, ho, wo], out)?,
        PoolCache {
            argmax,
            in_shape: [c, h, w],
        },
    ))
}

/// Backward for [`maxpool2`]: routes each gradient to its argmax position.
pub fn maxpool2_backward(cache: &PoolCache, grad_out: &Tensor) -> Tensor {
    let [c, h, w] = cache.in_shape;
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    let gi = grad_in.data_mut();
    for (g, &src) in grad_out.data().iter().zip(cache.argmax.iter()) {
        gi[src] += g;
    }
    grad_in
}

// ---------------------------------------------------------------------------
// Dense (fully connected)
// ---------------------------------------------------------------------------

/// Affine map `W x + b`. weights: m x n, input: n, bias: m.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.numel();
    let wsh = weights.shape();
    if wsh.len() != 2 || wsh[1] != n || bias.numel() != wsh[0] {
        return Err(Error::invalid(format!(
            "dense shape mismatch: weights {:?}, input {n}, bias {}",
            wsh,
            bias.numel()
        )));
    }
    let m = wsh[0];
    let mut out = bias.data().to_vec();
    let w = weights.data();
    let x = input.data();
    for i in 0..m {
        out[i] += crate::nn::tensor::dot(&w[i * n..(i + 1) * n], x);
    }
    Tensor::from_vec(&[m], out)
}

/// Backward for [`dense`]. Returns (grad_input, grad_weights, grad_bias).
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = input.numel();
    let m = weights.shape()[0];
    if grad_out.numel() != m {
        return Err(Error::invalid(format!(
            "dense backward grad length {}, expected {m}",
            grad_out.numel()
        )));
    }
    let g = grad_out.data();
    let x = input.data();
    let w = weights.data();

    let mut grad_w = Tensor::zeros(weights.shape());
    let gw = grad_w.data_mut();
    for i in 0..m {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &mut gw[i * n..(i + 1) * n];
        for (rv, &xv) in row.iter_mut().zip(x.iter()) {
            *rv += gi * xv;
        }
    }

    let mut grad_x = Tensor::zeros(&[n]);
    let gx = grad_x.data_mut();
    for i in 0..m {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (xv, &wv) in gx.iter_mut().zip(row.iter()) {
            *xv += gi * wv;
        }
    }

    Ok((grad_x, grad_w, Tensor::from_vec(&[m], g.to_vec())?))
}

// ---------------------------------------------------------------------------
// Spatial dropout
// ---------------------------------------------------------------------------

/// Per-channel mask from one spatial-dropout draw.
pub struct DropoutMask {
    /// Multiplier per channel: 0 for dropped, 1/(1-rate) for kept.
    pub channel_scale: Vec<f64>,
}

impl DropoutMask {
    /// Identity mask (inference mode or rate 0).
    pub fn identity(channels: usize) -> Self {
        DropoutMask {
            channel_scale: vec![1.0; channels],
        }
    }
}

/// Zero whole channels with probability `rate` during training, scaling
/// survivors by 1/(1-rate); identity in inference mode.
pub fn spatial_dropout(
    input: &Tensor,
    rate: f64,
    rng: &mut impl Rng,
    training: bool,
) -> Result<(Tensor, DropoutMask)> {
    let ish = input.shape();
    if ish.len() != 3 {
        return Err(Error::invalid(format!(
            "spatial_dropout expects CxHxW, got {ish:?}"
        )));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let c = ish[0];
    if !training || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::identity(c)));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let channel_scale: Vec<f64> = (0..c)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let plane = ish[1] * ish[2];
    let mut out = input.clone();
    for (ch, &s) in channel_scale.iter().enumerate() {
        if s != 1.0 {
            for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                *v *= s;
            }
        }
    }
    Ok((out, DropoutMask { channel_scale }))
}

/// Backward for [`spatial_dropout`]: same per-channel scaling.
pub fn spatial_dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    let ish = grad_out.shape();
    let plane = ish[1] * ish[2];
    let mut g = grad_out.clone();
    for (ch, &s) in mask.channel_scale.iter().enumerate() {
        if s != 1.0 {
            for v in &mut g.data_mut()[ch * plane..(ch + 1) * plane] {
                *v *= s;
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// L1 loss
// ---------------------------------------------------------------------------

/// Mean absolute error and its subgradient w.r.t. `pred` (0 at ties).
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "l1_loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((&p, &t), g) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut().iter_mut())
    {
        let d = p - t;
        loss += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss / n, grad))
}
