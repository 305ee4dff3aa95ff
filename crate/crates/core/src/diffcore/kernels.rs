//! Forward and backward kernels on plain tensors.
//!
//! Every loop runs in a fixed order, so results are bitwise reproducible
//! within one build. Convolutions accumulate in the tensor's own precision,
//! iterating output voxel, then kernel offset (depth, height, width), then
//! input channel, with the output channel innermost.

use crate::error::{contract, Result};

use super::{Real, Tensor};

fn conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<([usize; 4], usize, usize)> {
    let [d, h, wd, ci] = x.dims4()?;
    let (k, wci, co) = match w.shape()[..] {
        [k0, k1, k2, wci, co] if k0 == k1 && k1 == k2 => (k0, wci, co),
        _ => {
            return Err(contract(format!(
                "conv3d kernel must be [k, k, k, c_in, c_out], got {:?} (input {:?})",
                w.shape(),
                x.shape()
            )))
        }
    };
    if k % 2 == 0 {
        return Err(contract(format!(
            "conv3d kernel size must be odd, got kernel {:?}",
            w.shape()
        )));
    }
    if wci != ci {
        return Err(contract(format!(
            "conv3d channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(contract(format!(
                "conv3d bias must be [{co}], got {:?} (kernel {:?})",
                b.shape(),
                w.shape()
            )));
        }
    }
    Ok(([d, h, wd, ci], k, co))
}

/// Visits every (output voxel, input voxel, kernel tap) triple of a
/// same-padded convolution in the canonical order.
#[inline]
fn for_each_tap(dims: [usize; 3], k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = dims;
    let p = (k / 2) as isize;
    for od in 0..d {
        for oh in 0..h {
            for ow in 0..w {
                let out = (od * h + oh) * w + ow;
                for kd in 0..k {
                    let id = od as isize + kd as isize - p;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for kh in 0..k {
                        let ih = oh as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = ow as isize + kw as isize - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let inp = (id as usize * h + ih as usize) * w + iw as usize;
                            let tap = (kd * k + kh) * k + kw;
                            f(out, inp, tap);
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3D convolution (zero border), stride 1.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let ([d, h, wd, ci], k, co) = conv_shapes(x, w, b)?;
    let mut out = vec![T::zero(); d * h * wd * co];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(co) {
            row.copy_from_slice(b.data());
        }
    }
    let xs = x.data();
    let ws = w.data();
    for_each_tap([d, h, wd], k, |o, i, tap| {
        let orow = &mut out[o * co..(o + 1) * co];
        let xin = &xs[i * ci..(i + 1) * ci];
        let wk = &ws[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xin.iter().enumerate() {
            let wrow = &wk[c * co..(c + 1) * co];
            for (acc, &wv) in orow.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
    });
    Tensor::new(vec![d, h, wd, co], out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub struct Conv3dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<Conv3dGrads<T>> {
    let ([d, h, wd, ci], k, co) = conv_shapes(x, w, None)?;
    if gy.shape() != [d, h, wd, co] {
        return Err(contract(format!(
            "conv3d upstream gradient {:?} does not match output [{d}, {h}, {wd}, {co}]",
            gy.shape()
        )));
    }
    let xs = x.data();
    let ws = w.data();
    let gs = gy.data();

    let input = if need_input {
        let mut gx = vec![T::zero(); xs.len()];
        for_each_tap([d, h, wd], k, |o, i, tap| {
            let grow = &gs[o * co..(o + 1) * co];
            let wk = &ws[tap * ci * co..(tap + 1) * ci * co];
            let gxin = &mut gx[i * ci..(i + 1) * ci];
            for (c, acc) in gxin.iter_mut().enumerate() {
                let wrow = &wk[c * co..(c + 1) * co];
                let mut s = T::zero();
                for (&g, &wv) in grow.iter().zip(wrow) {
                    s += g * wv;
                }
                *acc += s;
            }
        });
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };

    let kernel = if need_kernel {
        let mut gw = vec![T::zero(); ws.len()];
        for_each_tap([d, h, wd], k, |o, i, tap| {
            let grow = &gs[o * co..(o + 1) * co];
            let xin = &xs[i * ci..(i + 1) * ci];
            let gwk = &mut gw[tap * ci * co..(tap + 1) * ci * co];
            for (c, &xv) in xin.iter().enumerate() {
                let gwrow = &mut gwk[c * co..(c + 1) * co];
                for (acc, &g) in gwrow.iter_mut().zip(grow) {
                    *acc += xv * g;
                }
            }
        });
        Some(Tensor::new(w.shape().to_vec(), gw)?)
    } else {
        None
    };

    let bias = if need_bias {
        let mut gb = vec![0.0f64; co];
        for row in gs.chunks_exact(co) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g.as_f64();
            }
        }
        Some(Tensor::new(vec![co], gb.into_iter().map(T::of).collect())?)
    } else {
        None
    };

    Ok(Conv3dGrads {
        input,
        kernel,
        bias,
    })
}

/// Generic axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let n = shape.len();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
        return Err(contract(format!(
            "invalid permutation {axes:?} for shape {shape:?}"
        )));
    }
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        // odometer increment over the output index
        for ax in (0..n).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Channels `[start, start + len)` along the last axis.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.channels();
    if len == 0 || start + len > c {
        return Err(contract(format!(
            "channel slice [{start}, {}) out of range for shape {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.numel() / c * len);
    for row in x.data().chunks_exact(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = len;
    Tensor::new(shape, out)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(contract(format!(
            "cannot concatenate channels of {sa:?} and {sb:?}"
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().expect("non-scalar") = ca + cb;
    Tensor::new(shape, out)
}

/// Applies `f(value, channel_param)` with one parameter per last-axis channel.
pub fn per_channel<T: Real>(
    x: &Tensor<T>,
    p: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if p.shape() != [c] {
        return Err(contract(format!(
            "per-channel parameter must be [{c}], got {:?} (input {:?})",
            p.shape(),
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        out.extend(row.iter().zip(p.data()).map(|(&v, &q)| f(v, q)));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-channel sums accumulated in 64-bit.
pub fn channel_sums<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let c = x.channels();
    let mut acc = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc
}
