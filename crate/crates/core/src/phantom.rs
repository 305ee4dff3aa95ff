//! Synthetic longitudinal head phantoms with analytically known ventricle
//! volumes.
//!
//! A phantom is a spherical skull shell around a spherical brain with a
//! centred ellipsoidal ventricle. The ventricle semi-axes grow by a
//! per-subject factor `g_i` each year, so the analytic ventricle volume at
//! year `t` is `4/3 pi a b c g_i^(3t)`. Voxels are assigned by whether their
//! centre lies inside a structure.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::ingest::{DatasetManifest, Split, VolumeU8};
use crate::seed::{derive_seed, stage_rng};

/// Growth speeds up by `factor` per year after `onset_year`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceleration {
    pub onset_year: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub resolution: usize,
    /// Radii in voxels.
    pub skull_outer: f64,
    pub skull_inner: f64,
    pub skull_intensity: u8,
    pub brain_intensity: u8,
    /// Standard deviation of the Gaussian texture added to brain and
    /// ventricle voxels.
    pub texture_sigma: f64,
    pub ventricle_intensity: u8,
    /// Ventricle semi-axes (depth, height, width) in voxels at year 0.
    pub semi_axes: [f64; 3],
    /// Mean per-year multiplicative semi-axis growth.
    pub growth: f64,
    /// Log-normal jitter of the per-subject growth rate.
    pub growth_jitter: f64,
    /// Log-normal jitter of the per-subject year-0 semi-axes.
    pub shape_jitter: f64,
    pub acceleration: Option<Acceleration>,
    /// Ventricle partial-volume sampling: each voxel's ventricle fraction
    /// is estimated on an `n^3` sub-grid. 1 is plain centre inclusion.
    pub supersample: usize,
}

impl PhantomSpec {
    /// Geometry proportional to `resolution`, ventricle volume growing 8 %
    /// per year.
    pub fn desk(resolution: usize) -> Self {
        let r = resolution as f64;
        PhantomSpec {
            resolution,
            skull_outer: 0.46 * r,
            skull_inner: 0.38 * r,
            skull_intensity: 250,
            brain_intensity: 150,
            texture_sigma: 2.0,
            ventricle_intensity: 30,
            semi_axes: [0.16 * r, 0.13 * r, 0.14 * r],
            growth: 1.08f64.cbrt(),
            growth_jitter: 0.005,
            shape_jitter: 0.05,
            acceleration: None,
            supersample: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution as f64;
        let max_axis = self.semi_axes.iter().cloned().fold(f64::MIN, f64::max);
        if self.resolution == 0 {
            return Err(contract("phantom resolution must be positive"));
        }
        if !(self.skull_outer <= r / 2.0 && self.skull_outer > self.skull_inner && self.skull_inner > max_axis) {
            return Err(contract(format!(
                "phantom radii must satisfy R/2 >= outer > inner > max semi-axis, got {} {} {max_axis}",
                self.skull_outer, self.skull_inner
            )));
        }
        if self.supersample == 0 {
            return Err(contract("supersample must be at least 1"));
        }
        if self.semi_axes.iter().any(|&a| a <= 0.0) {
            return Err(contract("ventricle semi-axes must be positive"));
        }
        if !(self.growth > 0.0 && self.growth_jitter >= 0.0 && self.shape_jitter >= 0.0 && self.texture_sigma >= 0.0) {
            return Err(contract("growth must be positive and jitters non-negative"));
        }
        if !(self.skull_intensity > self.brain_intensity && self.brain_intensity > self.ventricle_intensity) {
            return Err(contract("intensities must order skull > brain > ventricle"));
        }
        if let Some(a) = self.acceleration {
            if a.factor <= 0.0 {
                return Err(contract("acceleration factor must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-subject anatomy drawn from a [`PhantomSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnatomy {
    pub semi_axes: [f64; 3],
    pub growth: f64,
}

impl SubjectAnatomy {
    /// Semi-axis scale factor after `year` years.
    pub fn scale_at(&self, year: usize, acceleration: Option<Acceleration>) -> f64 {
        match acceleration {
            Some(a) if year > a.onset_year => {
                self.growth.powi(a.onset_year as i32) * (self.growth * a.factor).powi((year - a.onset_year) as i32)
            }
            _ => self.growth.powi(year as i32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub year: usize,
    pub volume: VolumeU8,
    /// Closed-form ellipsoid volume in voxels.
    pub ventricle_analytic: f64,
    pub brain_analytic: f64,
    /// Voxels whose centre lies inside the ventricle.
    pub ventricle_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct SubjectSeries {
    pub id: String,
    pub anatomy: SubjectAnatomy,
    pub scans: Vec<Scan>,
}

pub fn ellipsoid_volume(axes: [f64; 3]) -> f64 {
    4.0 / 3.0 * PI * axes[0] * axes[1] * axes[2]
}

pub fn draw_anatomy<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> SubjectAnatomy {
    let shape = Normal::new(0.0, spec.shape_jitter).expect("finite jitter");
    let growth = Normal::new(0.0, spec.growth_jitter).expect("finite jitter");
    let semi_axes = spec.semi_axes.map(|a| a * shape.sample(rng).exp());
    SubjectAnatomy {
        semi_axes,
        growth: spec.growth * growth.sample(rng).exp(),
    }
}

/// Fraction of the voxel centred at `p` inside the ellipsoid, sampled on
/// an `n^3` sub-grid.
fn ellipsoid_fraction(p: [f64; 3], axes: [f64; 3], n: usize) -> f64 {
    let inside = |q: [f64; 3]| (0..3).map(|i| (q[i] / axes[i]).powi(2)).sum::<f64>() <= 1.0;
    if n == 1 {
        return if inside(p) { 1.0 } else { 0.0 };
    }
    let mut hits = 0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let o = |k: usize| (k as f64 + 0.5) / n as f64 - 0.5;
                hits += inside([p[0] + o(a), p[1] + o(b), p[2] + o(c)]) as usize;
            }
        }
    }
    hits as f64 / (n * n * n) as f64
}

/// Renders one scan. Brain voxels blend brain and ventricle intensity by
/// ventricle fraction; texture noise is drawn from `rng`. Also returns the
/// number of voxels whose centre lies in the ventricle.
pub fn render<R: Rng + ?Sized>(spec: &PhantomSpec, axes: [f64; 3], rng: &mut R) -> (VolumeU8, usize) {
    let n = spec.resolution;
    let c = n as f64 / 2.0;
    let noise = Normal::new(0.0, spec.texture_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut ventricle = 0;
    let vol = VolumeU8::from_fn([n, n, n], |d, h, w| {
        let p = [d as f64 + 0.5 - c, h as f64 + 0.5 - c, w as f64 + 0.5 - c];
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r > spec.skull_outer {
            return 0;
        }
        if r > spec.skull_inner {
            return spec.skull_intensity;
        }
        if (0..3).map(|i| (p[i] / axes[i]).powi(2)).sum::<f64>() <= 1.0 {
            ventricle += 1;
        }
        let f = ellipsoid_fraction(p, axes, spec.supersample);
        let base = f * spec.ventricle_intensity as f64 + (1.0 - f) * spec.brain_intensity as f64;
        let t = if spec.texture_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        (base + t).round().clamp(0.0, 255.0) as u8
    });
    (vol, ventricle)
}

/// Scans at years `0..years`, deterministic in `subject_seed`.
pub fn gen_subject(spec: &PhantomSpec, id: &str, subject_seed: u64, years: usize) -> Result<SubjectSeries> {
    spec.validate()?;
    let mut rng = stage_rng(subject_seed, "anatomy");
    let anatomy = draw_anatomy(spec, &mut rng);
    let brain_analytic = 4.0 / 3.0 * PI * spec.skull_inner.powi(3);
    let mut scans = Vec::with_capacity(years);
    for year in 0..years {
        let s = anatomy.scale_at(year, spec.acceleration);
        let axes = anatomy.semi_axes.map(|a| a * s);
        let max_axis = axes.iter().cloned().fold(f64::MIN, f64::max);
        if max_axis >= spec.skull_inner {
            return Err(contract(format!(
                "ventricle of subject {id} escapes the brain at year {year} (semi-axis {max_axis:.2} >= {})",
                spec.skull_inner
            )));
        }
        let mut noise = stage_rng(subject_seed, "texture");
        let (volume, ventricle_voxels) = render(spec, axes, &mut noise);
        scans.push(Scan {
            year,
            volume,
            ventricle_analytic: ellipsoid_volume(axes),
            brain_analytic,
            ventricle_voxels,
        });
    }
    Ok(SubjectSeries {
        id: id.to_string(),
        anatomy,
        scans,
    })
}

/// Ground truth for one generated scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub subject: String,
    pub split: String,
    pub year: usize,
    pub ventricle_analytic: f64,
    pub brain_analytic: f64,
    pub ventricle_voxels: usize,
    pub growth: f64,
}

/// Subject ids `s0000..`; the last `n_test` subjects form the test split.
pub fn subject_id(i: usize) -> String {
    format!("s{i:04}")
}

pub fn scan_file_name(id: &str, year: usize) -> String {
    format!("{id}_y{year:02}.vvol")
}

/// Generates `n_subjects` series in memory.
pub fn gen_series(spec: &PhantomSpec, n_subjects: usize, years: usize, seed: u64) -> Result<Vec<SubjectSeries>> {
    let idx: Vec<usize> = (0..n_subjects).collect();
    crate::par::map(&idx, |&i| {
        gen_subject(spec, &subject_id(i), derive_seed(seed, &format!("subject/{i}")), years)
    })
    .into_iter()
    .collect()
}

/// Writes `manifest.txt`, `truth.csv` and one VVOL file per scan into
/// `out`. The last `n_test` subjects go to the test split.
pub fn gen_dataset(
    spec: &PhantomSpec,
    n_subjects: usize,
    n_test: usize,
    years: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if n_test > n_subjects {
        return Err(contract(format!("{n_test} test subjects requested out of {n_subjects}")));
    }
    if years == 0 {
        return Err(contract("at least one year per subject is required"));
    }
    std::fs::create_dir_all(out)?;
    let series = gen_series(spec, n_subjects, years, seed)?;
    let mut manifest = DatasetManifest::default();
    let mut truth = csv::Writer::from_path(out.join("truth.csv"))?;
    for (i, s) in series.iter().enumerate() {
        let split = if i + n_test >= n_subjects { Split::Test } else { Split::Train };
        for scan in &s.scans {
            let name = scan_file_name(&s.id, scan.year);
            scan.volume.write(&out.join(&name))?;
            manifest.push(&s.id, split, scan.year as f64, name)?;
            truth.serialize(TruthRow {
                subject: s.id.clone(),
                split: split.as_str().to_string(),
                year: scan.year,
                ventricle_analytic: scan.ventricle_analytic,
                brain_analytic: scan.brain_analytic,
                ventricle_voxels: scan.ventricle_voxels,
                growth: s.anatomy.growth,
            })?;
        }
    }
    truth.flush()?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(manifest)
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(spec: &PhantomSpec) -> PhantomSpec {
        PhantomSpec {
            growth: 1.0,
            growth_jitter: 0.0,
            shape_jitter: 0.0,
            ..spec.clone()
        }
    }

    #[test]
    fn no_growth_keeps_volumes() {
        let s = gen_subject(&still(&PhantomSpec::desk(16)), "a", 1, 3).unwrap();
        let v: Vec<f64> = s.scans.iter().map(|s| s.ventricle_analytic).collect();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[1], v[2]);
    }

    #[test]
    fn sphere_volume() {
        assert!((ellipsoid_volume([4.0; 3]) - 268.082573).abs() < 1e-5);
    }

    #[test]
    fn voxel_count_close_to_analytic() {
        let mut spec = still(&PhantomSpec::desk(32));
        for axes in [[4.0, 4.0, 4.0], [6.0, 4.5, 5.0], [4.2, 5.5, 4.0]] {
            spec.semi_axes = axes;
            let s = gen_subject(&spec, "a", 2, 1).unwrap();
            let scan = &s.scans[0];
            let rel = (scan.ventricle_voxels as f64 / scan.ventricle_analytic - 1.0).abs();
            assert!(rel < 0.1, "{axes:?}: {} vs {}", scan.ventricle_voxels, scan.ventricle_analytic);
        }
    }

    #[test]
    fn analytic_volumes_follow_growth_law() {
        let spec = PhantomSpec::desk(32);
        let s = gen_subject(&spec, "a", 9, 4).unwrap();
        let g3 = s.anatomy.growth.powi(3);
        for w in s.scans.windows(2) {
            assert!((w[1].ventricle_analytic / w[0].ventricle_analytic - g3).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_growth_matches_law() {
        let spec = PhantomSpec::desk(16);
        let series = gen_series(&spec, 32, 2, 4).unwrap();
        let mean: f64 = series
            .iter()
            .map(|s| s.scans[1].ventricle_analytic / s.scans[0].ventricle_analytic)
            .sum::<f64>()
            / 32.0;
        assert!((mean / spec.growth.powi(3) - 1.0).abs() < 0.02);
    }

    #[test]
    fn acceleration_changes_late_growth_only() {
        let mut spec = still(&PhantomSpec::desk(32));
        spec.growth = 1.02;
        spec.acceleration = Some(Acceleration {
            onset_year: 2,
            factor: 1.01,
        });
        let s = gen_subject(&spec, "a", 1, 5).unwrap();
        let r: Vec<f64> = s
            .scans
            .windows(2)
            .map(|w| w[1].ventricle_analytic / w[0].ventricle_analytic)
            .collect();
        assert!((r[0] - 1.02f64.powi(3)).abs() < 1e-12);
        assert!((r[1] - 1.02f64.powi(3)).abs() < 1e-12);
        assert!((r[2] - (1.02f64 * 1.01).powi(3)).abs() < 1e-12);
    }

    #[test]
    fn intensities_and_ordering() {
        let spec = PhantomSpec::desk(16);
        let s = gen_subject(&spec, "a", 3, 1).unwrap();
        let v = &s.scans[0].volume;
        let max = *v.data().iter().max().unwrap();
        assert_eq!(max, spec.skull_intensity);
        assert_eq!(v.get(0, 0, 0), 0);
        assert_eq!(v.get(8, 8, 0), 0);
        // the brightest non-skull voxel stays well below the skull
        let brain_max = v.data().iter().filter(|&&x| x < spec.skull_intensity).max().unwrap();
        assert!(*brain_max < 200);
    }

    #[test]
    fn escaping_ventricle_is_rejected() {
        let mut spec = still(&PhantomSpec::desk(16));
        spec.growth = 1.5;
        assert!(gen_subject(&spec, "a", 1, 5).is_err());
        let mut bad = PhantomSpec::desk(16);
        bad.semi_axes = [7.0, 2.0, 2.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let spec = PhantomSpec::desk(8);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = gen_dataset(&spec, 2, 1, 3, 5, a.path()).unwrap();
        gen_dataset(&spec, 2, 1, 3, 5, b.path()).unwrap();
        assert_eq!(m.num_scans(), 6);
        for s in &m.subjects {
            let ages: Vec<f64> = s.scans.iter().map(|s| s.age_years).collect();
            assert_eq!(ages, [0.0, 1.0, 2.0]);
        }
        assert_eq!(m.subjects_in(Split::Train).count(), 1);
        assert_eq!(m.subjects_in(Split::Test).count(), 1);
        for name in ["manifest.txt", "truth.csv", "s0000_y00.vvol", "s0001_y02.vvol"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        m.validate_files::<u8>(a.path()).unwrap();
        assert_eq!(read_truth(&a.path().join("truth.csv")).unwrap().len(), 6);
    }
}
