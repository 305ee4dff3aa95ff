//! Aging forecasts `M = G^-1 . P . G` and their N-step recursion.
//!
//! The recursive path decodes to a volume after every step and re-encodes
//! it for the next one. The telescoped path stays in latent space and
//! applies the predictor `n` times before a single decode. Both paths are
//! computed and their per-step disagreement reported.

use std::path::Path;

use serde::Serialize;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::flow::{Flow, LatentPyramid};
use crate::ingest::VolumeF32;
use crate::temporal::{clip_unit, denormalize_latent, normalize_latent, predict, NormalizationParams, TemporalParams};

/// A trained flow and temporal model used together.
pub struct Twin<'a, T> {
    pub flow: &'a Flow<T>,
    pub temporal: &'a TemporalParams<T>,
    pub norm: NormalizationParams,
}

fn stage<V>(name: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("{name}: {m}")),
        e => e,
    })
}

impl<'a, T: Real> Twin<'a, T> {
    pub fn new(flow: &'a Flow<T>, temporal: &'a TemporalParams<T>) -> Self {
        Twin {
            flow,
            temporal,
            norm: NormalizationParams::default(),
        }
    }

    /// Normalized latents of `x`.
    pub fn encode_normalized(&self, x: &Tensor<T>) -> Result<LatentPyramid<T>> {
        let (z, _) = stage("encode", self.flow.encode(x))?;
        Ok(normalize_latent(&z, &self.norm))
    }

    /// One application of the predictor in normalized space, clipped to
    /// the unit interval.
    pub fn advance(&self, zn: &LatentPyramid<T>) -> Result<LatentPyramid<T>> {
        Ok(clip_unit(&stage("predict", predict(zn, self.temporal))?))
    }

    /// Decodes normalized latents; returns the raw latents too.
    pub fn decode_normalized(&self, zn: &LatentPyramid<T>) -> Result<(LatentPyramid<T>, Tensor<T>)> {
        let z = stage("denormalize", denormalize_latent(zn, &self.norm))?;
        let x = stage("decode", self.flow.decode(&z))?;
        Ok((z, x))
    }

    /// `decode(denormalize(clip(predict(normalize(encode(x))))))`.
    pub fn step(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let zn = self.encode_normalized(x)?;
        Ok(self.decode_normalized(&self.advance(&zn)?)?.1)
    }

    /// Entry 0 is the reconstruction `decode(encode(x))`, entry 1 is
    /// `step(x)` and entry `n + 1` is `step` applied to entry `n`.
    pub fn forecast(&self, x: &Tensor<T>, steps: usize) -> Result<ForecastResult<T>> {
        let (z0, _) = stage("encode", self.flow.encode(x))?;
        let recon = stage("decode", self.flow.decode(&z0))?;
        let mut out = vec![ForecastStep {
            index: 0,
            volume: recon,
            latents: z0.clone(),
            telescoped: None,
            discrepancy: 0.0,
        }];
        let mut telescoped = normalize_latent(&z0, &self.norm);
        let mut current = x.clone();
        for n in 1..=steps {
            let zn = self.advance(&self.encode_normalized(&current)?)?;
            let (latents, volume) = self.decode_normalized(&zn)?;
            telescoped = self.advance(&telescoped)?;
            let (_, tel_volume) = self.decode_normalized(&telescoped)?;
            let discrepancy = volume.max_abs_diff(&tel_volume)?;
            current = volume.clone();
            out.push(ForecastStep {
                index: n,
                volume,
                latents,
                telescoped: Some(tel_volume),
                discrepancy,
            });
        }
        Ok(ForecastResult { steps: out })
    }
}

#[derive(Debug, Clone)]
pub struct ForecastStep<T> {
    pub index: usize,
    /// Recursive-path volume in model space.
    pub volume: Tensor<T>,
    /// Latents decoded to produce `volume`.
    pub latents: LatentPyramid<T>,
    /// Telescoped-path volume; absent for the reconstruction.
    pub telescoped: Option<Tensor<T>>,
    /// Max abs voxel difference between the two paths.
    pub discrepancy: f64,
}

#[derive(Debug, Clone)]
pub struct ForecastResult<T> {
    pub steps: Vec<ForecastStep<T>>,
}

impl<T: Real> ForecastResult<T> {
    pub fn max_discrepancy(&self) -> f64 {
        self.steps.iter().map(|s| s.discrepancy).fold(0.0, f64::max)
    }
}

#[derive(Debug, Serialize)]
struct ManifestRow<'a> {
    step: usize,
    file: &'a str,
    telescoped_max_abs_diff: f64,
}

/// Writes `step_NN.vvol` (f32, model space) per step and `forecast.csv`
/// listing step index, file name and path discrepancy. Returns the file
/// names written.
pub fn write_forecast<T: Real>(result: &ForecastResult<T>, spacing: [f64; 3], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    let mut w = csv::Writer::from_path(dir.join("forecast.csv"))?;
    for s in &result.steps {
        let name = format!("step_{:02}.vvol", s.index);
        VolumeF32::from_tensor(&s.volume, spacing)?.write(&dir.join(&name))?;
        w.serialize(ManifestRow {
            step: s.index,
            file: &name,
            telescoped_max_abs_diff: s.discrepancy,
        })?;
        names.push(name);
    }
    w.flush()?;
    names.push("forecast.csv".to_string());
    Ok(names)
}
