use std::path::Path;

use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::diffcore::{Real, Tensor};
use crate::error::{contract, Error, Result};

use super::FlowConfig;

/// Per-level latents `z_1 .. z_L`, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> LatentPyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Self {
        LatentPyramid { levels }
    }

    pub fn zeros(config: &FlowConfig) -> Self {
        LatentPyramid {
            levels: config.latent_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.levels.iter().map(Tensor::numel).sum()
    }

    /// Checks the level count and every level shape against `config`.
    pub fn check(&self, config: &FlowConfig) -> Result<()> {
        if self.levels.len() != config.levels {
            return Err(contract(format!(
                "latent pyramid has {} levels, config expects {}",
                self.levels.len(),
                config.levels
            )));
        }
        for (l, (z, want)) in self.levels.iter().zip(config.latent_shapes()).enumerate() {
            if z.shape() != want {
                return Err(contract(format!(
                    "latent level {} has shape {:?}, expected {want:?}",
                    l + 1,
                    z.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        LatentPyramid {
            levels: self.levels.iter().map(|z| z.map(&f)).collect(),
        }
    }

    /// All elements, level by level.
    pub fn flatten(&self) -> Vec<T> {
        self.levels.iter().flat_map(|z| z.data().iter().copied()).collect()
    }

    pub fn cast<U: Real>(&self) -> LatentPyramid<U> {
        LatentPyramid {
            levels: self.levels.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.levels.len() != other.levels.len() {
            return Err(contract("pyramids differ in level count"));
        }
        self.levels
            .iter()
            .zip(&other.levels)
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
    }

    /// `VLAT` file: magic, version u32 = 1, level count u32, then per level
    /// four u32 dims followed by the values as little-endian f32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(b"VLAT");
        put_u32(&mut out, 1);
        put_u32(&mut out, to_u32(self.levels.len(), "level count")?);
        for z in &self.levels {
            for &d in &z.dims4()? {
                put_u32(&mut out, to_u32(d, "latent dim")?);
            }
            put_f32s(&mut out, z.data().iter().map(|v| v.as_f64() as f32));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(b"VLAT")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Version(version));
        }
        let n = r.u32()? as usize;
        let mut levels = Vec::new();
        for _ in 0..n {
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = r.u32()? as usize;
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::DimOverflow(format!("latent dims {dims:?}")))?;
            let vals = r.f32_vec(numel)?;
            levels.push(Tensor::new(dims.to_vec(), vals.into_iter().map(|v| T::of(v as f64)).collect())?);
        }
        r.finish()?;
        Ok(LatentPyramid { levels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
