//! Space-to-channel reshaping.
//!
//! Each 2x2x2 block of voxels becomes one voxel with 8x the channels. Output
//! channel `((sd * 2 + sh) * 2 + sw) * C + c` holds input channel `c` of the
//! sub-voxel at offset `(sd, sh, sw)` within the block, so the first `C`
//! channels of output voxel `(i, j, k)` come from input voxel
//! `(2i, 2j, 2k)`.

use crate::diffcore::{kernels, Graph, Real, Tensor, Var};
use crate::error::{contract, Result};

const SQUEEZE_AXES: [usize; 7] = [0, 2, 4, 1, 3, 5, 6];
const UNSQUEEZE_AXES: [usize; 7] = [0, 3, 1, 4, 2, 5, 6];

fn split_shape(shape: &[usize]) -> Result<([usize; 7], [usize; 4])> {
    let [d, h, w, c] = match shape {
        [d, h, w, c] => [*d, *h, *w, *c],
        s => return Err(contract(format!("squeeze expects [d, h, w, c], got {s:?}"))),
    };
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("squeeze needs even spatial dims, got {shape:?}")));
    }
    Ok((
        [d / 2, 2, h / 2, 2, w / 2, 2, c],
        [d / 2, h / 2, w / 2, 8 * c],
    ))
}

fn merge_shape(shape: &[usize]) -> Result<([usize; 7], [usize; 4])> {
    let [d, h, w, c] = match shape {
        [d, h, w, c] => [*d, *h, *w, *c],
        s => return Err(contract(format!("unsqueeze expects [d, h, w, c], got {s:?}"))),
    };
    if c % 8 != 0 {
        return Err(contract(format!("unsqueeze needs channels divisible by 8, got {shape:?}")));
    }
    Ok(([d, h, w, 2, 2, 2, c / 8], [2 * d, 2 * h, 2 * w, c / 8]))
}

pub fn squeeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (blocks, out) = split_shape(x.shape())?;
    kernels::permute(&x.clone().reshape(&blocks)?, &SQUEEZE_AXES)?.reshape(&out)
}

pub fn unsqueeze<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (blocks, out) = merge_shape(y.shape())?;
    kernels::permute(&y.clone().reshape(&blocks)?, &UNSQUEEZE_AXES)?.reshape(&out)
}

pub(crate) fn squeeze_var<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (blocks, out) = split_shape(g.shape(x))?;
    let r = g.reshape(x, &blocks)?;
    let p = g.permute(r, &SQUEEZE_AXES)?;
    g.reshape(p, &out)
}

pub(crate) fn unsqueeze_var<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let (blocks, out) = merge_shape(g.shape(y))?;
    let r = g.reshape(y, &blocks)?;
    let p = g.permute(r, &UNSQUEEZE_AXES)?;
    g.reshape(p, &out)
}
