use crate::error::{contract, Error, Result};

use super::volume::{Volume, VolumeI16, VolumeU8, Voxel};

/// HU offset of the brain window; `clip(hu + 80, 0, 255)`.
pub const WINDOW_OFFSET: i32 = 80;

/// Maps CT numbers to 8-bit intensities with `clip(v + 80, 0, 255)`.
pub fn window_hu(src: &VolumeI16) -> VolumeU8 {
    src.map(|v| (v as i32 + WINDOW_OFFSET).clamp(0, 255) as u8)
}

/// Intensity-weighted mean index `(d, h, w)`.
pub fn center_of_gravity(v: &VolumeU8) -> Result<[f64; 3]> {
    let [_, dh, dw] = v.dims();
    let mut acc = [0.0f64; 3];
    let mut mass = 0.0f64;
    for (i, &val) in v.data().iter().enumerate() {
        if val == 0 {
            continue;
        }
        let m = val as f64;
        acc[0] += m * (i / (dh * dw)) as f64;
        acc[1] += m * ((i / dw) % dh) as f64;
        acc[2] += m * (i % dw) as f64;
        mass += m;
    }
    if mass == 0.0 {
        return Err(Error::Domain {
            op: "center_of_gravity",
            detail: "volume has no nonzero voxel".into(),
        });
    }
    Ok(acc.map(|a| a / mass))
}

/// Nearest integer, ties toward the lower index.
pub fn round_half_down(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// First index of a `size` window centred on `center` (rounded first).
pub fn crop_origin(center: f64, size: usize) -> i64 {
    round_half_down(center) - ((size as i64 - 1) / 2)
}

/// `size^3` cube centred on the rounded `center`; voxels outside the source
/// are zero. Output voxel `(i, j, k)` is source voxel `origin + (i, j, k)`
/// with `origin = round(center) - (size - 1) / 2` per axis.
pub fn crop_centered<V: Voxel>(v: &Volume<V>, center: [f64; 3], size: usize) -> Result<Volume<V>> {
    if size == 0 {
        return Err(contract("crop size must be >= 1"));
    }
    let origin = center.map(|c| crop_origin(c, size));
    let dims = v.dims();
    let inside = |o: i64, i: usize, n: usize| -> Option<usize> {
        let p = o + i as i64;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    };
    let out = Volume::from_fn([size; 3], |i, j, k| {
        match (inside(origin[0], i, dims[0]), inside(origin[1], j, dims[1]), inside(origin[2], k, dims[2])) {
            (Some(d), Some(h), Some(w)) => v.get(d, h, w),
            _ => V::default(),
        }
    });
    out.with_spacing(v.spacing())
}

/// `k x k x k` mean pooling with round-half-up to the nearest integer.
pub fn downsample(v: &VolumeU8, k: usize) -> Result<VolumeU8> {
    let sums = pooled_sums(v, k)?;
    let n = (k * k * k) as u64;
    let spacing = v.spacing().map(|s| s * k as f64);
    Volume::new(pooled_dims(v.dims(), k), spacing, sums.into_iter().map(|s| ((s + n / 2) / n) as u8).collect())
}

fn pooled_dims(dims: [usize; 3], k: usize) -> [usize; 3] {
    dims.map(|d| d / k)
}

fn pooled_sums(v: &VolumeU8, k: usize) -> Result<Vec<u64>> {
    let dims = v.dims();
    if k == 0 || dims.iter().any(|d| d % k != 0) {
        return Err(contract(format!("volume dims {dims:?} not divisible by downsampling factor {k}")));
    }
    let od = pooled_dims(dims, k);
    let mut sums = vec![0u64; od.iter().product()];
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let o = ((d / k) * od[1] + h / k) * od[2] + w / k;
                sums[o] += v.get(d, h, w) as u64;
            }
        }
    }
    Ok(sums)
}

/// Full preprocessing of one CT volume: window, centre on the intensity
/// centre of gravity, crop to `size^3`, then downsample by `factor`.
pub fn preprocess(src: &VolumeI16, size: usize, factor: usize) -> Result<VolumeU8> {
    let windowed = window_hu(src);
    let cog = center_of_gravity(&windowed)?;
    let cropped = crop_centered(&windowed, cog, size)?;
    downsample(&cropped, factor)
}
