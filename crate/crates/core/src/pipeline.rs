//! Glue between the stages: encoding scan series, building temporal
//! training pairs and scoring forecasts against measured volumes.

use serde::Serialize;

use crate::diffcore::Real;
use crate::error::{contract, Result};
use crate::flow::{Flow, LatentPyramid};
use crate::forecast::Twin;
use crate::ingest::{VolumeF32, VolumeU8};
use crate::quantify::{
    brain_mask, mae_by_year, normalized_volume_curve, segment_ventricles, ComponentPolicy, CurveRow, MaeRow, Thresholds,
};
use crate::temporal::{normalize_latent, NormalizationParams};

/// One subject's scans, one per year starting at year 0.
#[derive(Debug, Clone)]
pub struct Series {
    pub id: String,
    pub volumes: Vec<VolumeU8>,
}

impl From<&crate::phantom::SubjectSeries> for Series {
    fn from(s: &crate::phantom::SubjectSeries) -> Self {
        Series {
            id: s.id.clone(),
            volumes: s.scans.iter().map(|s| s.volume.clone()).collect(),
        }
    }
}

pub fn encode_volume<T: Real>(flow: &Flow<T>, v: &VolumeU8) -> Result<LatentPyramid<T>> {
    Ok(flow.encode(&v.to_model_input())?.0)
}

/// Consecutive-year pairs of normalized latents across all `series`.
pub fn latent_pairs<T: Real>(
    flow: &Flow<T>,
    series: &[Series],
    norm: &NormalizationParams,
) -> Result<Vec<(LatentPyramid<T>, LatentPyramid<T>)>> {
    let encoded = crate::par::map(series, |s| {
        s.volumes
            .iter()
            .map(|v| encode_volume(flow, v).map(|z| normalize_latent(&z, norm)))
            .collect::<Result<Vec<_>>>()
    });
    let mut pairs = Vec::new();
    for z in encoded {
        let z = z?;
        pairs.extend(z.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    }
    Ok(pairs)
}

/// Voxel counts of the ventricle and brain masks.
pub fn measure_voxels(v: &VolumeU8, t: &Thresholds, policy: ComponentPolicy) -> Result<(usize, usize)> {
    let brain = brain_mask(v, t)?;
    let vent = segment_ventricles(v, &brain, t.ventricle, policy)?;
    Ok((vent.count(), brain.count()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastEvaluation {
    pub predicted: Vec<CurveRow>,
    pub measured: Vec<CurveRow>,
    /// Year-0 measurement carried forward.
    pub frozen: Vec<CurveRow>,
    pub mae: Vec<MaeRow>,
    pub frozen_mae: Vec<MaeRow>,
    /// Subjects whose one-step forecast has a larger ventricle than the input.
    pub grew_after_one_step: usize,
    pub max_discrepancy: f64,
}

/// Forecasts `steps` years from each subject's year-0 scan and scores the
/// segmented volumes against the segmentation of the actual later scans.
/// Every curve is normalized by the measured year-0 brain volume.
pub fn evaluate_forecasts<T: Real>(
    twin: &Twin<'_, T>,
    series: &[Series],
    steps: usize,
    t: &Thresholds,
    policy: ComponentPolicy,
) -> Result<ForecastEvaluation> {
    let per_subject = crate::par::map(series, |s| -> Result<_> {
        if s.volumes.len() <= steps {
            return Err(contract(format!(
                "subject {} has {} scans, {steps}-step evaluation needs {}",
                s.id,
                s.volumes.len(),
                steps + 1
            )));
        }
        let (v0, b0) = measure_voxels(&s.volumes[0], t, policy)?;
        let spacing = s.volumes[0].spacing();
        let result = twin.forecast(&s.volumes[0].to_model_input(), steps)?;
        let mut pred = vec![(0, v0 as f64)];
        for step in &result.steps[1..] {
            let u8v = VolumeF32::from_tensor(&step.volume, spacing)?.model_output_to_u8();
            pred.push((step.index, measure_voxels(&u8v, t, policy)?.0 as f64));
        }
        let meas: Vec<(usize, f64)> = (0..=steps)
            .map(|y| measure_voxels(&s.volumes[y], t, policy).map(|m| (y, m.0 as f64)))
            .collect::<Result<_>>()?;
        let froz: Vec<(usize, f64)> = (0..=steps).map(|y| (y, v0 as f64)).collect();
        Ok((
            normalized_volume_curve(&s.id, &pred, b0 as f64)?,
            normalized_volume_curve(&s.id, &meas, b0 as f64)?,
            normalized_volume_curve(&s.id, &froz, b0 as f64)?,
            steps > 0 && pred[1].1 > pred[0].1,
            result.max_discrepancy(),
        ))
    });
    let mut predicted = Vec::new();
    let mut measured = Vec::new();
    let mut frozen = Vec::new();
    let mut grew = 0;
    let mut max_discrepancy: f64 = 0.0;
    for r in per_subject {
        let (p, m, f, g, d) = r?;
        predicted.extend(p);
        measured.extend(m);
        frozen.extend(f);
        grew += g as usize;
        max_discrepancy = max_discrepancy.max(d);
    }
    Ok(ForecastEvaluation {
        mae: mae_by_year(&predicted, &measured)?,
        frozen_mae: mae_by_year(&frozen, &measured)?,
        predicted,
        measured,
        frozen,
        grew_after_one_step: grew,
        max_discrepancy,
    })
}
