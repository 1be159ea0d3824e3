//! Value-level forward/backward kernels for the non-convolution operations.
//! The [`Tape`](super::Tape) wires these into the autograd graph.

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Gradient passes where x > 0; the subgradient at exactly 0 is 0.
pub(crate) fn relu_backward<E: Element>(x: &Tensor<E>, grad: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > E::zero() {
            grad.data()[i]
        } else {
            E::zero()
        }
    })
}

pub(crate) fn concat_forward<E: Element>(inputs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    let mut axis_total = 0usize;
    for t in inputs {
        if t.rank() != first.rank() {
            return Err(Error::shape("concat rank", first.shape(), t.shape()));
        }
        for d in 0..first.rank() {
            if d != axis && t.shape()[d] != first.shape()[d] {
                return Err(Error::shape("concat off-axis extents", first.shape(), t.shape()));
            }
        }
        axis_total += t.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(&shape, data)
}

pub(crate) fn concat_backward<E: Element>(
    input_shapes: &[Vec<usize>],
    axis: usize,
    grad: &Tensor<E>,
) -> Vec<Tensor<E>> {
    let sizes: Vec<usize> = input_shapes.iter().map(|s| s[axis]).collect();
    grad.split(axis, &sizes).expect("concat backward split")
}

/// Softmax along `axis` with max subtraction for overflow safety.
pub(crate) fn softmax_forward<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let a = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut max = src[base];
            for d in 1..a {
                let v = src[base + d * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for d in 0..a {
                let e = (src[base + d * inner] - max).exp();
                dst[base + d * inner] = e;
                sum = sum + e;
            }
            for d in 0..a {
                dst[base + d * inner] = dst[base + d * inner] / sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_backward<E: Element>(y: &Tensor<E>, axis: usize, grad: &Tensor<E>) -> Tensor<E> {
    let a = y.shape()[axis];
    let outer: usize = y.shape()[..axis].iter().product();
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(y.shape());
    let yv = y.data();
    let g = grad.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut dot = E::zero();
            for d in 0..a {
                dot = dot + g[base + d * inner] * yv[base + d * inner];
            }
            for d in 0..a {
                let k = base + d * inner;
                dst[k] = yv[k] * (g[k] - dot);
            }
        }
    }
    out
}

/// Per-channel batch statistics of a (batch, channels, spatial...) tensor.
pub(crate) fn batch_stats<E: Element>(x: &Tensor<E>) -> (Vec<E>, Vec<E>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let s: usize = x.shape()[2..].iter().product();
    let m = E::from_f64((b * s) as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut acc = E::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            for &v in &x.data()[base..base + s] {
                acc = acc + v;
            }
        }
        mean[ch] = acc / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut acc = E::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            for &v in &x.data()[base..base + s] {
                let d = v - mu;
                acc = acc + d * d;
            }
        }
        var[ch] = acc / m;
    }
    (mean, var)
}

/// Normalize with given per-channel mean and 1/std, then scale and shift.
pub(crate) fn bn_apply<E: Element>(
    x: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Tensor<E> {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let s: usize = x.shape()[2..].iter().product();
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ch in 0..c {
            let (mu, inv) = (mean[ch], inv_std[ch]);
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            let base = (bi * c + ch) * s;
            for k in base..base + s {
                out.data_mut()[k] = (x.data()[k] - mu) * inv * g + be;
            }
        }
    }
    out
}

/// Batch-norm backward through the batch statistics (training mode).
pub(crate) fn bn_train_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    grad: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let s: usize = x.shape()[2..].iter().product();
    let m = E::from_f64((b * s) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mu, inv) = (mean[ch], inv_std[ch]);
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            for k in base..base + s {
                let xhat = (x.data()[k] - mu) * inv;
                sum_dy = sum_dy + grad.data()[k];
                sum_dy_xhat = sum_dy_xhat + grad.data()[k] * xhat;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let g_inv = gamma.data()[ch] * inv;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            for k in base..base + s {
                let xhat = (x.data()[k] - mu) * inv;
                dx.data_mut()[k] = g_inv * (grad.data()[k] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch-norm backward with frozen statistics (inference mode).
pub(crate) fn bn_infer_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    grad: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let s: usize = x.shape()[2..].iter().product();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mu, inv) = (mean[ch], inv_std[ch]);
        let g_inv = gamma.data()[ch] * inv;
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            for k in base..base + s {
                sum_dy = sum_dy + grad.data()[k];
                sum_dy_xhat = sum_dy_xhat + grad.data()[k] * (x.data()[k] - mu) * inv;
                dx.data_mut()[k] = g_inv * grad.data()[k];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
    }
    (dx, dgamma, dbeta)
}

/// Sampling table for one axis of a bilinear resize (align_corners = false).
fn bilinear_table<E: Element>(n_in: usize, factor: usize) -> Vec<(usize, usize, E, E)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, E::from_f64(1.0 - w1), E::from_f64(w1))
        })
        .collect()
}

/// Bilinear upsampling of a (batch, channels, h, w) tensor by an integer factor.
pub(crate) fn upsample2d_forward<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::invalid(format!(
            "upsample expects (batch, channels, h, w), got {:?}",
            x.shape()
        )));
    }
    if factor < 1 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let rows = bilinear_table::<E>(h, factor);
    let cols = bilinear_table::<E>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                let v = src[y0 * w + x0] * wy0 * wx0
                    + src[y0 * w + x1] * wy0 * wx1
                    + src[y1 * w + x0] * wy1 * wx0
                    + src[y1 * w + x1] * wy1 * wx1;
                dst[oy * ow + ox] = v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2d_backward<E: Element>(
    in_shape: &[usize],
    factor: usize,
    grad: &Tensor<E>,
) -> Tensor<E> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let rows = bilinear_table::<E>(h, factor);
    let cols = bilinear_table::<E>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..b * c {
        let g = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    dx
}

/// Concatenation cost volume: for each disparity level d, pair the left
/// features with the right features shifted d pixels to the right, zero
/// filled at the left border.
pub(crate) fn cost_volume_forward<E: Element>(
    left: &Tensor<E>,
    right: &Tensor<E>,
    disp_levels: usize,
) -> Result<Tensor<E>> {
    if left.shape() != right.shape() {
        return Err(Error::shape("cost volume features", left.shape(), right.shape()));
    }
    if left.rank() != 4 {
        return Err(Error::invalid(format!(
            "cost volume expects (batch, channels, h, w) features, got {:?}",
            left.shape()
        )));
    }
    if disp_levels < 1 {
        return Err(Error::invalid("cost volume needs at least one disparity level"));
    }
    let (b, f, h, w) = (left.shape()[0], left.shape()[1], left.shape()[2], left.shape()[3]);
    let mut out = Tensor::zeros(&[b, 2 * f, disp_levels, h, w]);
    let plane = h * w;
    let vol = disp_levels * plane;
    for bi in 0..b {
        for c in 0..f {
            let src = &left.data()[(bi * f + c) * plane..(bi * f + c + 1) * plane];
            for d in 0..disp_levels {
                let base = (bi * 2 * f + c) * vol + d * plane;
                out.data_mut()[base..base + plane].copy_from_slice(src);
            }
        }
        for c in 0..f {
            let src = &right.data()[(bi * f + c) * plane..(bi * f + c + 1) * plane];
            for d in 0..disp_levels {
                let base = (bi * 2 * f + f + c) * vol + d * plane;
                for y in 0..h {
                    let dst = &mut out.data_mut()[base + y * w..base + (y + 1) * w];
                    dst[d.min(w)..].copy_from_slice(&src[y * w..y * w + w - d.min(w)]);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn cost_volume_backward<E: Element>(
    feat_shape: &[usize],
    disp_levels: usize,
    grad: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (b, f, h, w) = (feat_shape[0], feat_shape[1], feat_shape[2], feat_shape[3]);
    let plane = h * w;
    let vol = disp_levels * plane;
    let mut dl = Tensor::zeros(feat_shape);
    let mut dr = Tensor::zeros(feat_shape);
    for bi in 0..b {
        for c in 0..f {
            let dst = &mut dl.data_mut()[(bi * f + c) * plane..(bi * f + c + 1) * plane];
            for d in 0..disp_levels {
                let base = (bi * 2 * f + c) * vol + d * plane;
                for (t, &g) in dst.iter_mut().zip(&grad.data()[base..base + plane]) {
                    *t = *t + g;
                }
            }
        }
        for c in 0..f {
            let dst = &mut dr.data_mut()[(bi * f + c) * plane..(bi * f + c + 1) * plane];
            for d in 0..disp_levels {
                let base = (bi * 2 * f + f + c) * vol + d * plane;
                let shift = d.min(w);
                for y in 0..h {
                    let grow = &grad.data()[base + y * w + shift..base + (y + 1) * w];
                    for (t, &g) in dst[y * w..y * w + w - shift].iter_mut().zip(grow) {
                        *t = *t + g;
                    }
                }
            }
        }
    }
    (dl, dr)
}

/// Reduce `axis` by a fixed weighted sum: out = sum_d weights[d] * x[.., d, ..].
pub(crate) fn weighted_sum_axis_forward<E: Element>(
    x: &Tensor<E>,
    axis: usize,
    weights: &[E],
) -> Result<Tensor<E>> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "weighted sum axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    if weights.len() != x.shape()[axis] {
        return Err(Error::invalid(format!(
            "weighted sum: {} weights for axis extent {}",
            weights.len(),
            x.shape()[axis]
        )));
    }
    let a = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        for d in 0..a {
            let w = weights[d];
            let base = (o * a + d) * inner;
            let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
            for (t, &v) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                *t = *t + v * w;
            }
        }
    }
    Ok(out)
}

pub(crate) fn weighted_sum_axis_backward<E: Element>(
    in_shape: &[usize],
    axis: usize,
    weights: &[E],
    grad: &Tensor<E>,
) -> Tensor<E> {
    let a = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut dx = Tensor::zeros(in_shape);
    for o in 0..outer {
        for d in 0..a {
            let w = weights[d];
            let base = (o * a + d) * inner;
            let g = &grad.data()[o * inner..(o + 1) * inner];
            for (t, &gv) in dx.data_mut()[base..base + inner].iter_mut().zip(g) {
                *t = gv * w;
            }
        }
    }
    dx
}

/// The piecewise loss kernel: x^2 / 3 inside the 3 px critical point, |x| outside.
pub(crate) fn smooth_l1_value<E: Element>(x: E) -> E {
    let three = E::from_f64(3.0);
    if x.abs() < three {
        x * x / three
    } else {
        x.abs()
    }
}

/// Derivative of [`smooth_l1_value`]; at |x| = 3 the outer branch applies.
pub(crate) fn smooth_l1_slope<E: Element>(x: E) -> E {
    let three = E::from_f64(3.0);
    if x.abs() < three {
        E::from_f64(2.0 / 3.0) * x
    } else if x > E::zero() {
        E::one()
    } else {
        -E::one()
    }
}
