//! Volumes and the `VVOL` file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VVOL"
//! 4       4     version (u32, currently 1)
//! 8       4     dtype (u32: 1 = u8, 2 = i16, 3 = f32)
//! 12      12    dims depth, height, width (3 x u32)
//! 24      24    spacing in mm per axis (3 x f64)
//! 48      ...   voxels, depth-major then height then width
//! ```
//!
//! Everything is little-endian. Volumes are single-channel.

use std::path::Path;

use crate::bytes::{put_u32, to_u32, Reader};
use crate::diffcore::{Real, Tensor};
use crate::error::{contract, Error, Result};

const MAGIC: &[u8; 4] = b"VVOL";
const VERSION: u32 = 1;
/// Upper bound on voxel count accepted from a file header.
const MAX_VOXELS: usize = 1 << 31;

/// Voxel element types storable in a `VVOL` file.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const CODE: u32;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(b: &[u8]) -> Self;
    fn as_f64(self) -> f64;
}

impl Voxel for u8 {
    const CODE: u32 = 1;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Voxel for i16 {
    const CODE: u32 = 2;
    const SIZE: usize = 2;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i16::from_le_bytes([b[0], b[1]])
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Voxel for f32 {
    const CODE: u32 = 3;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Single-channel 3D grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<V> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<V>,
}

pub type VolumeU8 = Volume<u8>;
pub type VolumeI16 = Volume<i16>;
pub type VolumeF32 = Volume<f32>;

impl<V: Voxel> Volume<V> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<V>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(contract(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(contract(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n != data.len() {
            return Err(contract(format!("dims {dims:?} need {n} voxels, got {}", data.len())));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], value: V) -> Self {
        Volume::new(dims, [1.0; 3], vec![value; dims.iter().product()]).expect("valid dims")
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume::new(dims, [1.0; 3], data).expect("valid dims")
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(contract(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> V {
        self.data[self.index(d, h, w)]
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(V) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Voxel volume in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(48 + self.data.len() * V::SIZE);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, V::CODE);
        for d in self.dims {
            put_u32(&mut out, to_u32(d, "volume dim")?);
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let code = r.u32()?;
        if code != V::CODE {
            return Err(Error::Format(format!("voxel type code {code}, expected {}", V::CODE)));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let spacing = [r.f64()?, r.f64()?, r.f64()?];
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| *n <= MAX_VOXELS)
            .ok_or_else(|| Error::DimOverflow(format!("volume dims {dims:?}")))?;
        let raw = r.take(n * V::SIZE)?;
        r.finish()?;
        let data = raw.chunks_exact(V::SIZE).map(V::read_le).collect();
        Volume::new(dims, spacing, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Voxel type code stored in a `VVOL` header, without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<u32> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    r.u32()
}

impl Volume<u8> {
    /// Flow input for an 8-bit volume: bin centres mapped into `[-0.5, 0.5)`.
    pub fn to_model_input<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::new(
            vec![d, h, w, 1],
            self.data.iter().map(|&v| T::of((v as f64 + 0.5) / 256.0 - 0.5)).collect(),
        )
        .expect("matching sizes")
    }
}

impl Volume<f32> {
    pub fn from_tensor<T: Real>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        let [d, h, w, c] = t.dims4()?;
        if c != 1 {
            return Err(contract(format!("volumes are single-channel, tensor has shape {:?}", t.shape())));
        }
        Volume::new([d, h, w], spacing, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::new(vec![d, h, w, 1], self.data.iter().map(|&v| T::of(v as f64)).collect()).expect("matching sizes")
    }

    /// Inverse of [`Volume::to_model_input`]: floor into the 256 bins,
    /// saturating at both ends.
    pub fn model_output_to_u8(&self) -> VolumeU8 {
        self.map(|x| ((x as f64 + 0.5) * 256.0).floor().clamp(0.0, 255.0) as u8)
    }
}
