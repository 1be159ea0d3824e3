//! Strided n-d convolution and its transpose, forward and backward.
//!
//! Both ranks (2-d and 3-d spatial) run through one rank-3 code path: a 2-d
//! convolution is a 3-d convolution with a singleton depth axis. Each sample
//! is processed as chunked im2col followed by a tiled matrix product; the
//! backward passes recompute the column buffers instead of caching them.
//!
//! Layouts:
//!   input  (batch, in_ch, spatial...),
//!   kernel (out_ch, in_ch, k...)          for convolution,
//!   kernel (in_ch, out_ch, k...)          for transposed convolution,
//! so that a convolution and a transposed convolution sharing one kernel
//! tensor are exact adjoints of each other.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::runtime;

/// Spatial geometry of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    /// Number of spatial axes (2 or 3).
    pub rank: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(rank: usize, stride: usize, pad: usize) -> Result<Self> {
        if rank != 2 && rank != 3 {
            return Err(Error::invalid(format!(
                "spatial rank must be 2 or 3, got {rank}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(ConvGeom { rank, stride, pad })
    }
}

/// Output extent of a strided convolution: floor((n + 2p - k) / s) + 1.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::invalid(format!(
            "non-positive output extent: input {n} with pad {pad} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution: (n - 1) * s - 2p + k + out_pad.
pub fn transpose_output_extent(n: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (n - 1) * stride + k + out_pad - 2 * pad
}

/// Geometry normalized to three spatial axes (leading singleton for rank 2).
#[derive(Clone, Copy, Debug)]
struct Axes3 {
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Axes3 {
    fn new(input_sp: &[usize], kernel_sp: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let lead = 3 - input_sp.len();
        let mut ax = Axes3 {
            input: [1; 3],
            kernel: [1; 3],
            out: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        for d in 0..input_sp.len() {
            ax.input[lead + d] = input_sp[d];
            ax.kernel[lead + d] = kernel_sp[d];
            ax.stride[lead + d] = stride;
            ax.pad[lead + d] = pad;
            ax.out[lead + d] = conv_output_extent(input_sp[d], kernel_sp[d], stride, pad)?;
        }
        Ok(ax)
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }

    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Columns per chunk when chunking over the outermost output axis.
    fn inner_cols(&self) -> usize {
        self.out[1] * self.out[2]
    }
}

/// Rows of the outermost output axis per im2col chunk, aiming for roughly
/// `TARGET_COLS` columns per matrix product.
const TARGET_COLS: usize = 2048;

fn chunk_rows(ax: &Axes3) -> usize {
    (TARGET_COLS / ax.inner_cols().max(1)).clamp(1, ax.out[0])
}

/// Gather the patch matrix for output rows `[o0, o1)` of one sample.
///
/// `cols` receives a (in_ch * ksize) x ((o1 - o0) * inner) row-major matrix;
/// out-of-bounds taps are zero-filled.
fn im2col_chunk<E: Element>(x: &[E], in_ch: usize, ax: &Axes3, o0: usize, o1: usize, cols: &mut [E]) {
    let cc = (o1 - o0) * ax.inner_cols();
    let [i0, i1, i2] = ax.input;
    let [k0, k1, k2] = ax.kernel;
    let [s0, s1, s2] = ax.stride;
    let [p0, p1, p2] = ax.pad;
    let (out1, out2) = (ax.out[1], ax.out[2]);
    let mut row = 0usize;
    for ci in 0..in_ch {
        let x_ci = &x[ci * i0 * i1 * i2..(ci + 1) * i0 * i1 * i2];
        for kd in 0..k0 {
            for kh in 0..k1 {
                for kw in 0..k2 {
                    let dst = &mut cols[row * cc..(row + 1) * cc];
                    row += 1;
                    let mut idx = 0usize;
                    for od in o0..o1 {
                        let id = (od * s0 + kd) as isize - p0 as isize;
                        if id < 0 || id >= i0 as isize {
                            dst[idx..idx + out1 * out2].fill(E::zero());
                            idx += out1 * out2;
                            continue;
                        }
                        let plane = id as usize * i1 * i2;
                        for oh in 0..out1 {
                            let ih = (oh * s1 + kh) as isize - p1 as isize;
                            if ih < 0 || ih >= i1 as isize {
                                dst[idx..idx + out2].fill(E::zero());
                                idx += out2;
                                continue;
                            }
                            let line = plane + ih as usize * i2;
                            // Valid ow range: 0 <= ow*s2 + kw - p2 < i2.
                            let off = kw as isize - p2 as isize;
                            let lo = if off >= 0 {
                                0
                            } else {
                                (((-off) as usize) + s2 - 1) / s2
                            };
                            let hi_excl = if off >= i2 as isize {
                                0
                            } else {
                                (((i2 as isize - 1 - off) as usize) / s2 + 1).min(out2)
                            };
                            let lo = lo.min(hi_excl);
                            dst[idx..idx + lo].fill(E::zero());
                            if s2 == 1 {
                                let src0 = (line as isize + lo as isize + off) as usize;
                                dst[idx + lo..idx + hi_excl]
                                    .copy_from_slice(&x_ci[src0..src0 + hi_excl - lo]);
                            } else {
                                for ow in lo..hi_excl {
                                    let iw = (ow * s2) as isize + off;
                                    dst[idx + ow] = x_ci[line + iw as usize];
                                }
                            }
                            dst[idx + hi_excl..idx + out2].fill(E::zero());
                            idx += out2;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col_chunk`]: `x += col2im(cols)`.
fn col2im_add_chunk<E: Element>(cols: &[E], x: &mut [E], in_ch: usize, ax: &Axes3, o0: usize, o1: usize) {
    let cc = (o1 - o0) * ax.inner_cols();
    let [i0, i1, i2] = ax.input;
    let [k0, k1, k2] = ax.kernel;
    let [s0, s1, s2] = ax.stride;
    let [p0, p1, p2] = ax.pad;
    let (out1, out2) = (ax.out[1], ax.out[2]);
    let mut row = 0usize;
    for ci in 0..in_ch {
        let x_ci = &mut x[ci * i0 * i1 * i2..(ci + 1) * i0 * i1 * i2];
        for kd in 0..k0 {
            for kh in 0..k1 {
                for kw in 0..k2 {
                    let src = &cols[row * cc..(row + 1) * cc];
                    row += 1;
                    let mut idx = 0usize;
                    for od in o0..o1 {
                        let id = (od * s0 + kd) as isize - p0 as isize;
                        if id < 0 || id >= i0 as isize {
                            idx += out1 * out2;
                            continue;
                        }
                        let plane = id as usize * i1 * i2;
                        for oh in 0..out1 {
                            let ih = (oh * s1 + kh) as isize - p1 as isize;
                            if ih < 0 || ih >= i1 as isize {
                                idx += out2;
                                continue;
                            }
                            let line = plane + ih as usize * i2;
                            let off = kw as isize - p2 as isize;
                            let lo = if off >= 0 {
                                0
                            } else {
                                (((-off) as usize) + s2 - 1) / s2
                            };
                            let hi_excl = if off >= i2 as isize {
                                0
                            } else {
                                (((i2 as isize - 1 - off) as usize) / s2 + 1).min(out2)
                            };
                            let lo = lo.min(hi_excl);
                            for ow in lo..hi_excl {
                                let iw = (ow * s2) as isize + off;
                                let t = &mut x_ci[line + iw as usize];
                                *t = *t + src[idx + ow];
                            }
                            idx += out2;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    geom: ConvGeom,
    context: &str,
    w_in_axis: usize,
) -> Result<()> {
    if x.rank() != geom.rank + 2 {
        return Err(Error::invalid(format!(
            "{context}: input must have rank {} (batch, channels, spatial...), got shape {:?}",
            geom.rank + 2,
            x.shape()
        )));
    }
    if w.rank() != geom.rank + 2 {
        return Err(Error::invalid(format!(
            "{context}: kernel must have rank {}, got shape {:?}",
            geom.rank + 2,
            w.shape()
        )));
    }
    if w.shape()[w_in_axis] != x.shape()[1] {
        return Err(Error::shape(
            format!("{context}: kernel channels vs input channels"),
            w.shape(),
            x.shape(),
        ));
    }
    Ok(())
}

/// Forward cross-correlation with optional per-output-channel bias.
pub fn conv_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    geom: ConvGeom,
) -> Result<Tensor<E>> {
    check_conv_shapes(x, w, geom, "convolve", 1)?;
    let batch = x.shape()[0];
    let in_ch = x.shape()[1];
    let out_ch = w.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(Error::shape("convolve: bias vs output channels", b.shape(), &[out_ch]));
        }
    }
    let ax = Axes3::new(&x.shape()[2..], &w.shape()[2..], geom.stride, geom.pad)?;
    let mut out_shape = vec![batch, out_ch];
    out_shape.extend_from_slice(&ax.out[3 - geom.rank..]);
    let mut out = Tensor::zeros(&out_shape);

    let os = ax.out_spatial();
    let rows = in_ch * ax.ksize();
    let step = chunk_rows(&ax);
    let x_len = in_ch * ax.in_spatial();
    let w_data = w.data();

    let per_sample = |x_b: &[E], out_b: &mut [E]| {
        let mut cols = vec![E::zero(); rows * step * ax.inner_cols()];
        let mut o0 = 0usize;
        while o0 < ax.out[0] {
            let o1 = (o0 + step).min(ax.out[0]);
            let cc = (o1 - o0) * ax.inner_cols();
            im2col_chunk(x_b, in_ch, &ax, o0, o1, &mut cols);
            // out_b[:, chunk] = W @ cols
            unsafe {
                E::gemm(
                    out_ch,
                    rows,
                    cc,
                    E::one(),
                    w_data.as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr(),
                    cc as isize,
                    1,
                    E::zero(),
                    out_b.as_mut_ptr().add(o0 * ax.inner_cols()),
                    os as isize,
                    1,
                );
            }
            o0 = o1;
        }
        if let Some(b) = bias {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut out_b[c * os..(c + 1) * os] {
                    *v = *v + bv;
                }
            }
        }
    };

    if runtime::threads() > 1 && batch > 1 {
        x.data()
            .par_chunks(x_len)
            .zip(out.data_mut().par_chunks_mut(out_ch * os))
            .for_each(|(x_b, out_b)| per_sample(x_b, out_b));
    } else {
        for (x_b, out_b) in x.data().chunks(x_len).zip(out.data_mut().chunks_mut(out_ch * os)) {
            per_sample(x_b, out_b);
        }
    }
    Ok(out)
}

/// Gradients of [`conv_forward`] with respect to input, kernel, and bias.
pub fn conv_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    geom: ConvGeom,
    grad_out: &Tensor<E>,
    want_bias: bool,
) -> Result<(Tensor<E>, Tensor<E>, Option<Tensor<E>>)> {
    let batch = x.shape()[0];
    let in_ch = x.shape()[1];
    let out_ch = w.shape()[0];
    let ax = Axes3::new(&x.shape()[2..], &w.shape()[2..], geom.stride, geom.pad)?;
    let os = ax.out_spatial();
    let rows = in_ch * ax.ksize();
    let step = chunk_rows(&ax);
    let x_len = in_ch * ax.in_spatial();
    let w_data = w.data();

    let mut dx = Tensor::zeros(x.shape());

    // Per-sample pass: fills the sample's dx slice in place and returns its
    // kernel/bias gradient contribution; contributions are summed in batch
    // order afterwards so the reduction order is independent of threading.
    let per_sample = |x_b: &[E], go_b: &[E], dx_b: &mut [E]| -> (Vec<E>, Vec<E>) {
        let mut dw_b = vec![E::zero(); out_ch * rows];
        let mut cols = vec![E::zero(); rows * step * ax.inner_cols()];
        let mut o0 = 0usize;
        while o0 < ax.out[0] {
            let o1 = (o0 + step).min(ax.out[0]);
            let cc = (o1 - o0) * ax.inner_cols();
            let go_off = o0 * ax.inner_cols();
            // dW += grad_out[:, chunk] @ cols^T
            im2col_chunk(x_b, in_ch, &ax, o0, o1, &mut cols);
            unsafe {
                E::gemm(
                    out_ch,
                    cc,
                    rows,
                    E::one(),
                    go_b.as_ptr().add(go_off),
                    os as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    cc as isize,
                    E::one(),
                    dw_b.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            // dcols = W^T @ grad_out[:, chunk], scattered back into dx
            unsafe {
                E::gemm(
                    rows,
                    out_ch,
                    cc,
                    E::one(),
                    w_data.as_ptr(),
                    1,
                    rows as isize,
                    go_b.as_ptr().add(go_off),
                    os as isize,
                    1,
                    E::zero(),
                    cols.as_mut_ptr(),
                    cc as isize,
                    1,
                );
            }
            col2im_add_chunk(&cols, dx_b, in_ch, &ax, o0, o1);
            o0 = o1;
        }
        let mut db_b = Vec::new();
        if want_bias {
            db_b = vec![E::zero(); out_ch];
            for c in 0..out_ch {
                let mut acc = E::zero();
                for &g in &go_b[c * os..(c + 1) * os] {
                    acc = acc + g;
                }
                db_b[c] = acc;
            }
        }
        (dw_b, db_b)
    };

    let partials: Vec<(Vec<E>, Vec<E>)> = if runtime::threads() > 1 && batch > 1 {
        x.data()
            .par_chunks(x_len)
            .zip(grad_out.data().par_chunks(out_ch * os))
            .zip(dx.data_mut().par_chunks_mut(x_len))
            .map(|((x_b, go_b), dx_b)| per_sample(x_b, go_b, dx_b))
            .collect()
    } else {
        x.data()
            .chunks(x_len)
            .zip(grad_out.data().chunks(out_ch * os))
            .zip(dx.data_mut().chunks_mut(x_len))
            .map(|((x_b, go_b), dx_b)| per_sample(x_b, go_b, dx_b))
            .collect()
    };

    let mut dw = Tensor::zeros(w.shape());
    let mut db = if want_bias {
        Some(Tensor::zeros(&[out_ch]))
    } else {
        None
    };
    for (dw_b, db_b) in &partials {
        for (a, &b) in dw.data_mut().iter_mut().zip(dw_b.iter()) {
            *a = *a + b;
        }
        if let Some(db) = db.as_mut() {
            for (a, &b) in db.data_mut().iter_mut().zip(db_b.iter()) {
                *a = *a + b;
            }
        }
    }
    Ok((dx, dw, db))
}

fn transpose_axes<E: Element>(
    u: &Tensor<E>,
    w: &Tensor<E>,
    geom: ConvGeom,
    out_pad: usize,
) -> Result<(Axes3, Vec<usize>)> {
    check_conv_shapes(u, w, geom, "transposed convolve", 0)?;
    let k_sp = &w.shape()[2..];
    if k_sp.iter().any(|&k| k != 3) || geom.stride != 2 || geom.pad != 1 || out_pad != 1 {
        return Err(Error::invalid(format!(
            "transposed convolve supports only kernel 3, stride 2, pad 1, output pad 1 \
             (exact x2 upsampling); got kernel {:?}, stride {}, pad {}, output pad {}",
            k_sp, geom.stride, geom.pad, out_pad
        )));
    }
    let big: Vec<usize> = u.shape()[2..]
        .iter()
        .map(|&n| transpose_output_extent(n, 3, geom.stride, geom.pad, out_pad))
        .collect();
    for (&n, &m) in u.shape()[2..].iter().zip(big.iter()) {
        if m != 2 * n {
            return Err(Error::invalid(format!(
                "transposed convolve configuration does not double extent {n} (got {m})"
            )));
        }
    }
    // Geometry of the adjoint convolution: big extents convolve down to u's.
    let ax = Axes3::new(&big, k_sp, geom.stride, geom.pad)?;
    debug_assert_eq!(&ax.out[3 - geom.rank..], &u.shape()[2..]);
    Ok((ax, big))
}

/// Forward transposed convolution (exact x2 spatial upsampling).
pub fn conv_transpose_forward<E: Element>(
    u: &Tensor<E>,
    w: &Tensor<E>,
    geom: ConvGeom,
    out_pad: usize,
) -> Result<Tensor<E>> {
    let (ax, big) = transpose_axes(u, w, geom, out_pad)?;
    let batch = u.shape()[0];
    let cu = u.shape()[1];
    let cv = w.shape()[1];
    let mut out_shape = vec![batch, cv];
    out_shape.extend_from_slice(&big);
    let mut v = Tensor::zeros(&out_shape);

    let us = ax.out_spatial(); // u's spatial size (small side)
    let vs = ax.in_spatial(); // v's spatial size (big side)
    let rows = cv * ax.ksize();
    let step = chunk_rows(&ax);
    let w_data = w.data();

    let per_sample = |u_b: &[E], v_b: &mut [E]| {
        let mut cols = vec![E::zero(); rows * step * ax.inner_cols()];
        let mut o0 = 0usize;
        while o0 < ax.out[0] {
            let o1 = (o0 + step).min(ax.out[0]);
            let cc = (o1 - o0) * ax.inner_cols();
            // cols = W^T @ u[:, chunk]   with W as (cu, cv*K)
            unsafe {
                E::gemm(
                    rows,
                    cu,
                    cc,
                    E::one(),
                    w_data.as_ptr(),
                    1,
                    rows as isize,
                    u_b.as_ptr().add(o0 * ax.inner_cols()),
                    us as isize,
                    1,
                    E::zero(),
                    cols.as_mut_ptr(),
                    cc as isize,
                    1,
                );
            }
            col2im_add_chunk(&cols, v_b, cv, &ax, o0, o1);
            o0 = o1;
        }
    };

    if runtime::threads() > 1 && batch > 1 {
        u.data()
            .par_chunks(cu * us)
            .zip(v.data_mut().par_chunks_mut(cv * vs))
            .for_each(|(u_b, v_b)| per_sample(u_b, v_b));
    } else {
        for (u_b, v_b) in u.data().chunks(cu * us).zip(v.data_mut().chunks_mut(cv * vs)) {
            per_sample(u_b, v_b);
        }
    }
    Ok(v)
}

/// Gradients of [`conv_transpose_forward`] with respect to input and kernel.
pub fn conv_transpose_backward<E: Element>(
    u: &Tensor<E>,
    w: &Tensor<E>,
    geom: ConvGeom,
    out_pad: usize,
    grad_v: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (ax, _) = transpose_axes(u, w, geom, out_pad)?;
    let batch = u.shape()[0];
    let cu = u.shape()[1];
    let cv = w.shape()[1];
    // du is the adjoint's adjoint: a plain convolution of grad_v with w.
    let du = conv_forward(grad_v, w, None, geom)?;

    let us = ax.out_spatial();
    let vs = ax.in_spatial();
    let rows = cv * ax.ksize();
    let step = chunk_rows(&ax);

    let per_sample = |u_b: &[E], gv_b: &[E]| -> Vec<E> {
        let mut dw_b = vec![E::zero(); cu * rows];
        let mut cols = vec![E::zero(); rows * step * ax.inner_cols()];
        let mut o0 = 0usize;
        while o0 < ax.out[0] {
            let o1 = (o0 + step).min(ax.out[0]);
            let cc = (o1 - o0) * ax.inner_cols();
            im2col_chunk(gv_b, cv, &ax, o0, o1, &mut cols);
            // dW += u[:, chunk] @ cols^T   with dW as (cu, cv*K)
            unsafe {
                E::gemm(
                    cu,
                    cc,
                    rows,
                    E::one(),
                    u_b.as_ptr().add(o0 * ax.inner_cols()),
                    us as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    cc as isize,
                    E::one(),
                    dw_b.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            o0 = o1;
        }
        dw_b
    };

    let partials: Vec<Vec<E>> = if runtime::threads() > 1 && batch > 1 {
        u.data()
            .par_chunks(cu * us)
            .zip(grad_v.data().par_chunks(cv * vs))
            .map(|(u_b, gv_b)| per_sample(u_b, gv_b))
            .collect()
    } else {
        u.data()
            .chunks(cu * us)
            .zip(grad_v.data().chunks(cv * vs))
            .map(|(u_b, gv_b)| per_sample(u_b, gv_b))
            .collect()
    };

    let mut dw = Tensor::zeros(w.shape());
    for dw_b in &partials {
        for (a, &b) in dw.data_mut().iter_mut().zip(dw_b.iter()) {
            *a = *a + b;
        }
    }
    Ok((du, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: six nested loops, no tricks.
    pub(crate) fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (b, ci, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        for bi in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let yy = (y * stride + ky) as isize - pad as isize;
                                    let xx = (xo * stride + kx) as isize - pad as isize;
                                    if yy >= 0 && yy < ih as isize && xx >= 0 && xx < iw as isize {
                                        acc += x.at(&[bi, c, yy as usize, xx as usize])
                                            * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn det_tensor(shape: &[usize], scale: f64) -> Tensor<f64> {
        // Deterministic pseudo-random filler for oracle comparisons.
        let mut state = 0x1234_5678_u64;
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * scale
        })
    }

    #[test]
    fn all_ones_kernel_center_and_corner() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_forward(&x, &w, None, ConvGeom::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Center tap covers every element.
        assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
        // Corner tap covers the top-left 2x2 block.
        assert_eq!(y.at(&[0, 0, 0, 0]), 1.0 + 2.0 + 4.0 + 5.0);
        let oracle = naive_conv2d(&x, &w, None, 1, 1);
        assert_eq!(y.data(), oracle.data());
    }

    #[test]
    fn matches_naive_on_random_configs() {
        for &(ci, co, ih, iw, k, s, p, bias) in &[
            (1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 1usize, false),
            (2, 3, 6, 7, 3, 2, 1, true),
            (3, 2, 9, 8, 5, 2, 2, true),
            (1, 4, 4, 4, 1, 1, 0, false),
        ] {
            let x = det_tensor(&[2, ci, ih, iw], 2.0);
            let w = det_tensor(&[co, ci, k, k], 1.0);
            let b = det_tensor(&[co], 0.5);
            let bias_t = if bias { Some(&b) } else { None };
            let y = conv_forward(&x, &w, bias_t, ConvGeom::new(2, s, p).unwrap()).unwrap();
            let oracle = naive_conv2d(&x, &w, bias_t, s, p);
            assert_eq!(y.shape(), oracle.shape());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pointwise_3d_kernel_scales_input() {
        let x = det_tensor(&[1, 1, 2, 3, 4], 1.0);
        let w = Tensor::new(&[1, 1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv_forward(&x, &w, None, ConvGeom::new(3, 1, 0).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        let err = conv_forward(&x, &w, None, ConvGeom::new(2, 1, 1).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 3, 3]") && msg.contains("[1, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn rejects_non_positive_output_extent() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(conv_forward(&x, &w, None, ConvGeom::new(2, 1, 0).unwrap()).is_err());
    }

    #[test]
    fn linearity_of_forward() {
        let g = ConvGeom::new(2, 2, 1).unwrap();
        let w = det_tensor(&[3, 2, 3, 3], 1.0);
        let x = det_tensor(&[1, 2, 6, 6], 1.0);
        let y = det_tensor(&[1, 2, 6, 6], 1.0);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_fn(&[1, 2, 6, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv_forward(&mixed, &w, None, g).unwrap();
        let cx = conv_forward(&x, &w, None, g).unwrap();
        let cy = conv_forward(&y, &w, None, g).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_doubles_extents_and_zeros_map_to_zeros() {
        let u = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = det_tensor(&[2, 3, 3, 3], 1.0);
        let v = conv_transpose_forward(&u, &w, ConvGeom::new(2, 2, 1).unwrap(), 1).unwrap();
        assert_eq!(v.shape(), &[1, 3, 8, 8]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, tconv(y)> with a shared kernel.
        let g = ConvGeom::new(2, 2, 1).unwrap();
        let w = det_tensor(&[3, 2, 3, 3], 1.0); // conv: 2 -> 3 channels
        let x = det_tensor(&[1, 2, 8, 6], 1.0);
        let cx = conv_forward(&x, &w, None, g).unwrap(); // (1,3,4,3)
        let y = det_tensor(cx.shape(), 1.0);
        let ty = conv_transpose_forward(&y, &w, g, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

        // Same identity in 3-d.
        let g3 = ConvGeom::new(3, 2, 1).unwrap();
        let w3 = det_tensor(&[2, 1, 3, 3, 3], 1.0);
        let x3 = det_tensor(&[2, 1, 4, 4, 6], 1.0);
        let cx3 = conv_forward(&x3, &w3, None, g3).unwrap();
        let y3 = det_tensor(cx3.shape(), 1.0);
        let ty3 = conv_transpose_forward(&y3, &w3, g3, 1).unwrap();
        let lhs: f64 = cx3.data().iter().zip(y3.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x3.data().iter().zip(ty3.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn backward_matches_fd_spot_checks() {
        // Loss = weighted sum of conv output; compare a few input/kernel
        // partials against central differences.
        let g = ConvGeom::new(2, 2, 1).unwrap();
        let x = det_tensor(&[1, 2, 6, 6], 1.0);
        let w = det_tensor(&[2, 2, 3, 3], 1.0);
        let b = det_tensor(&[2], 1.0);
        let weights = det_tensor(&[1, 2, 3, 3], 1.0);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv_forward(x, w, Some(b), g).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, c)| a * c).sum()
        };
        let (dx, dw, db) = conv_backward(&x, &w, g, &weights, true).unwrap();
        let h = 1e-6;
        for idx in [0usize, 13, 31, 70] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((dx.data()[idx] - fd).abs() < 1e-6, "dx[{idx}]");
        }
        for idx in [0usize, 9, 20, 35] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((dw.data()[idx] - fd).abs() < 1e-6, "dw[{idx}]");
        }
        let db = db.unwrap();
        for idx in 0..2 {
            let mut bp = b.clone();
            bp.data_mut()[idx] += h;
            let mut bm = b.clone();
            bm.data_mut()[idx] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((db.data()[idx] - fd).abs() < 1e-6, "db[{idx}]");
        }
    }

    #[test]
    fn transpose_backward_matches_fd_spot_checks() {
        let g = ConvGeom::new(3, 2, 1).unwrap();
        let u = det_tensor(&[1, 2, 2, 3, 3], 1.0);
        let w = det_tensor(&[2, 1, 3, 3, 3], 1.0);
        let weights = det_tensor(&[1, 1, 4, 6, 6], 1.0);
        let loss = |u: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let v = conv_transpose_forward(u, w, g, 1).unwrap();
            v.data().iter().zip(weights.data()).map(|(a, c)| a * c).sum()
        };
        let (du, dw) = conv_transpose_backward(&u, &w, g, 1, &weights).unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 17, 35] {
            let mut up = u.clone();
            up.data_mut()[idx] += h;
            let mut um = u.clone();
            um.data_mut()[idx] -= h;
            let fd = (loss(&up, &w) - loss(&um, &w)) / (2.0 * h);
            assert!((du.data()[idx] - fd).abs() < 1e-6, "du[{idx}]");
        }
        for idx in [0usize, 11, 26, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&u, &wp) - loss(&u, &wm)) / (2.0 * h);
            assert!((dw.data()[idx] - fd).abs() < 1e-6, "dw[{idx}]");
        }
    }
}
