//! Ventricle segmentation and volume curves.
//!
//! The brain mask is the largest 6-connected component of voxels strictly
//! between the air and skull thresholds, with enclosed holes filled (so the
//! ventricles count towards brain volume). Ventricles are the voxels of the
//! brain mask below the ventricle threshold, filtered by connected
//! component.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::ingest::VolumeU8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Ventricle voxels are darker than this.
    pub ventricle: u8,
    /// Brain voxels are brighter than this.
    pub air: u8,
    /// Brain voxels are darker than this.
    pub skull: u8,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            ventricle: 80,
            air: 40,
            skull: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComponentPolicy {
    /// Components of at least this fraction of the brain volume.
    KeepAll { min_fraction: f64 },
    KeepLargest,
}

impl Default for ComponentPolicy {
    fn default() -> Self {
        ComponentPolicy::KeepAll { min_fraction: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub dims: [usize; 3],
    pub voxels: Vec<bool>,
    pub method: String,
    pub threshold: f64,
}

impl SegmentationMask {
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &SegmentationMask) -> bool {
        self.voxels.iter().zip(&other.voxels).all(|(&a, &b)| !a || b)
    }
}

/// 6-connected components of `mask`. Labels are 1-based in scan order, 0
/// is background; `sizes[k]` is the voxel count of label `k + 1`.
pub fn label_components(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Sets every background voxel not 6-connected to the volume border.
pub fn fill_holes(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let (labels, _) = label_components(&background, dims);
    let mut outside = BTreeSet::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w {
                    let l = labels[(z * h + y) * w + x];
                    if l != 0 {
                        outside.insert(l);
                    }
                }
            }
        }
    }
    mask.iter()
        .zip(&labels)
        .map(|(&m, l)| m || !outside.contains(l))
        .collect()
}

fn largest(labels: &[u32], sizes: &[usize]) -> Option<u32> {
    sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
        .filter(|_| !labels.is_empty())
}

pub fn brain_mask(v: &VolumeU8, t: &Thresholds) -> Result<SegmentationMask> {
    let band: Vec<bool> = v.data().iter().map(|&x| x > t.air && x < t.skull).collect();
    let (labels, sizes) = label_components(&band, v.dims());
    let Some(keep) = largest(&labels, &sizes) else {
        return Err(Error::Domain {
            op: "brain_mask",
            detail: "no voxel inside the brain intensity band".into(),
        });
    };
    let core: Vec<bool> = labels.iter().map(|&l| l == keep).collect();
    Ok(SegmentationMask {
        dims: v.dims(),
        voxels: fill_holes(&core, v.dims()),
        method: "band-largest-fill".into(),
        threshold: t.air as f64,
    })
}

/// Candidate ventricle voxels before the component filter.
pub fn ventricle_candidates(v: &VolumeU8, brain: &SegmentationMask, threshold: u8) -> Vec<bool> {
    v.data()
        .iter()
        .zip(&brain.voxels)
        .map(|(&x, &b)| b && x < threshold)
        .collect()
}

/// An empty result is a mask with zero voxels, not an error.
pub fn segment_ventricles(
    v: &VolumeU8,
    brain: &SegmentationMask,
    threshold: u8,
    policy: ComponentPolicy,
) -> Result<SegmentationMask> {
    if brain.dims != v.dims() {
        return Err(contract(format!("brain mask dims {:?} differ from volume {:?}", brain.dims, v.dims())));
    }
    let brain_count = brain.count();
    if brain_count == 0 {
        return Err(contract("brain mask is empty"));
    }
    let cand = ventricle_candidates(v, brain, threshold);
    let (labels, sizes) = label_components(&cand, v.dims());
    let keep: BTreeSet<u32> = match policy {
        ComponentPolicy::KeepAll { min_fraction } => sizes
            .iter()
            .enumerate()
            .filter(|(_, &s)| s as f64 >= min_fraction * brain_count as f64)
            .map(|(i, _)| i as u32 + 1)
            .collect(),
        ComponentPolicy::KeepLargest => largest(&labels, &sizes).into_iter().collect(),
    };
    let voxels: Vec<bool> = labels.iter().map(|l| *l != 0 && keep.contains(l)).collect();
    if !voxels.iter().any(|&x| x) {
        log::warn!("ventricle segmentation is empty");
    }
    Ok(SegmentationMask {
        dims: v.dims(),
        voxels,
        method: match policy {
            ComponentPolicy::KeepAll { .. } => "threshold-keep-all".into(),
            ComponentPolicy::KeepLargest => "threshold-keep-largest".into(),
        },
        threshold: threshold as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub ventricle_vox: usize,
    pub brain_vox: usize,
    pub ventricle_mm3: f64,
    pub brain_mm3: f64,
}

pub fn measure(v: &VolumeU8, t: &Thresholds, policy: ComponentPolicy) -> Result<Measurement> {
    let brain = brain_mask(v, t)?;
    let vent = segment_ventricles(v, &brain, t.ventricle, policy)?;
    let mm3 = v.voxel_volume_mm3();
    Ok(Measurement {
        ventricle_vox: vent.count(),
        brain_vox: brain.count(),
        ventricle_mm3: vent.count() as f64 * mm3,
        brain_mm3: brain.count() as f64 * mm3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub subject: String,
    pub year: usize,
    pub ventricle_vox: f64,
    pub brain0_vox: f64,
    pub percent: f64,
}

/// `100 * ventricle(t) / brain(0)` for one subject; `ventricle` lists
/// `(year, volume)` and `brain0` is the year-0 brain volume.
pub fn normalized_volume_curve(subject: &str, ventricle: &[(usize, f64)], brain0: f64) -> Result<Vec<CurveRow>> {
    if !(brain0 > 0.0) {
        return Err(contract(format!("subject {subject}: year-0 brain volume is {brain0}")));
    }
    Ok(ventricle
        .iter()
        .map(|&(year, v)| CurveRow {
            subject: subject.to_string(),
            year,
            ventricle_vox: v,
            brain0_vox: brain0,
            percent: 100.0 * v / brain0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub year: usize,
    pub mae_percent: f64,
    pub n_subjects: usize,
}

/// Mean over subjects of `|pred% - gt%|` per year. Both sides must cover
/// the same `(subject, year)` keys.
pub fn mae_by_year(pred: &[CurveRow], gt: &[CurveRow]) -> Result<Vec<MaeRow>> {
    let key = |r: &CurveRow| (r.subject.clone(), r.year);
    let p: BTreeMap<_, f64> = pred.iter().map(|r| (key(r), r.percent)).collect();
    let g: BTreeMap<_, f64> = gt.iter().map(|r| (key(r), r.percent)).collect();
    let missing: Vec<String> = p
        .keys()
        .filter(|k| !g.contains_key(*k))
        .map(|k| format!("{} year {} (no ground truth)", k.0, k.1))
        .chain(
            g.keys()
                .filter(|k| !p.contains_key(*k))
                .map(|k| format!("{} year {} (no prediction)", k.0, k.1)),
        )
        .collect();
    if !missing.is_empty() {
        return Err(contract(format!("curve keys differ: {}", missing.join(", "))));
    }
    let mut by_year: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (k, pv) in &p {
        let e = by_year.entry(k.1).or_default();
        e.0 += (pv - g[k]).abs();
        e.1 += 1;
    }
    Ok(by_year
        .into_iter()
        .map(|(year, (s, n))| MaeRow {
            year,
            mae_percent: s / n as f64,
            n_subjects: n,
        })
        .collect())
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Binary PGM of axial slice `d` of `v`, with `mask` voxels drawn at 255
/// over the volume dimmed to half intensity.
pub fn write_slice_pgm(path: &Path, v: &VolumeU8, mask: Option<&SegmentationMask>, d: usize) -> Result<()> {
    let [depth, h, w] = v.dims();
    if d >= depth {
        return Err(contract(format!("slice {d} outside depth {depth}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let i = v.index(d, y, x);
            let px = match mask {
                Some(m) if m.voxels[i] => 255,
                Some(_) => v.data()[i] / 2,
                None => v.data()[i],
            };
            out.push(px);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(n: usize, r: f64, inside: u8, outside: u8) -> VolumeU8 {
        let c = n as f64 / 2.0;
        VolumeU8::from_fn([n, n, n], |d, h, w| {
            let p = [d as f64 + 0.5 - c, h as f64 + 0.5 - c, w as f64 + 0.5 - c];
            if p.iter().map(|v| v * v).sum::<f64>().sqrt() <= r {
                inside
            } else {
                outside
            }
        })
    }

    #[test]
    fn components_of_known_pattern() {
        // two voxels touching only diagonally are separate under 6-connectivity
        let mut m = vec![false; 27];
        m[0] = true;
        m[1] = true;
        m[4 + 9] = true;
        let (labels, sizes) = label_components(&m, [3, 3, 3]);
        assert_eq!(sizes, [2, 1]);
        assert_eq!(labels[0], labels[1]);
        assert_ne!(labels[0], labels[13]);
    }

    #[test]
    fn fill_holes_fills_enclosed_cavity_only() {
        let n = 7;
        let shell = ball(n, 3.2, 1, 0);
        let mut m: Vec<bool> = shell.data().iter().map(|&x| x == 1).collect();
        let centre = shell.index(3, 3, 3);
        m[centre] = false;
        let filled = fill_holes(&m, [n; 3]);
        assert!(filled[centre]);
        assert!(!filled[0]);
    }

    #[test]
    fn brain_mask_excludes_skull_and_fills_ventricle() {
        let n = 16;
        let v = VolumeU8::from_fn([n; 3], |d, h, w| {
            let p = [d as f64 + 0.5 - 8.0, h as f64 + 0.5 - 8.0, w as f64 + 0.5 - 8.0];
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            match r {
                r if r <= 2.0 => 30,
                r if r <= 5.0 => 150,
                r if r <= 7.0 => 250,
                _ => 0,
            }
        });
        let m = brain_mask(&v, &Thresholds::default()).unwrap();
        for (i, &inside) in m.voxels.iter().enumerate() {
            if v.data()[i] == 250 || v.data()[i] == 0 {
                assert!(!inside);
            } else {
                assert!(inside);
            }
        }
    }

    #[test]
    fn empty_volume_has_no_brain() {
        assert!(brain_mask(&VolumeU8::filled([4, 4, 4], 0), &Thresholds::default()).is_err());
    }

    #[test]
    fn uniform_brain_has_no_ventricle() {
        let v = VolumeU8::filled([6, 6, 6], 150);
        let b = brain_mask(&v, &Thresholds::default()).unwrap();
        let s = segment_ventricles(&v, &b, 80, ComponentPolicy::default()).unwrap();
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn keep_largest_drops_smaller_blob() {
        let mut v = VolumeU8::filled([10, 10, 10], 150);
        for (d, h, w) in [(2, 2, 2), (2, 2, 3), (2, 3, 2), (2, 3, 3), (7, 7, 7)] {
            let i = v.index(d, h, w);
            v.data_mut()[i] = 20;
        }
        let brain = SegmentationMask {
            dims: [10; 3],
            voxels: vec![true; 1000],
            method: "all".into(),
            threshold: 0.0,
        };
        let largest = segment_ventricles(&v, &brain, 80, ComponentPolicy::KeepLargest).unwrap();
        assert_eq!(largest.count(), 4);
        assert!(!largest.voxels[v.index(7, 7, 7)]);
        let all = segment_ventricles(&v, &brain, 80, ComponentPolicy::KeepAll { min_fraction: 0.0 }).unwrap();
        assert_eq!(all.count(), 5);
        assert!(largest.is_subset_of(&brain));
    }

    #[test]
    fn curve_and_mae_examples() {
        let c = normalized_volume_curve("a", &[(0, 50.0), (1, 0.0)], 50.0).unwrap();
        assert_eq!(c[0].percent, 100.0);
        assert_eq!(c[1].percent, 0.0);
        assert!(normalized_volume_curve("a", &[(0, 1.0)], 0.0).is_err());

        let gt: Vec<CurveRow> = ["a", "b"]
            .iter()
            .flat_map(|s| normalized_volume_curve(s, &[(0, 10.0), (1, 11.0), (2, 12.0)], 200.0).unwrap())
            .collect();
        let zero = mae_by_year(&gt, &gt).unwrap();
        assert!(zero.iter().all(|r| r.mae_percent == 0.0 && r.n_subjects == 2));
        let shifted: Vec<CurveRow> = gt
            .iter()
            .map(|r| CurveRow {
                percent: r.percent + 1.5,
                ..r.clone()
            })
            .collect();
        let m = mae_by_year(&shifted, &gt).unwrap();
        assert!(m.iter().all(|r| (r.mae_percent - 1.5).abs() < 1e-12));
        let err = mae_by_year(&shifted[1..], &gt).unwrap_err();
        assert!(err.to_string().contains("a year 0"), "{err}");
    }

    #[test]
    fn raising_threshold_never_shrinks_candidates() {
        let v = VolumeU8::from_fn([6, 6, 6], |d, h, w| ((d * 37 + h * 11 + w * 5) % 256) as u8);
        let brain = SegmentationMask {
            dims: [6; 3],
            voxels: vec![true; 216],
            method: "all".into(),
            threshold: 0.0,
        };
        let mut prev = 0;
        for t in (0..=255).step_by(15) {
            let n = ventricle_candidates(&v, &brain, t).iter().filter(|&&x| x).count();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        write_slice_pgm(&p, &VolumeU8::filled([2, 3, 4], 7), None, 1).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid() -> impl Strategy<Value = ([usize; 3], Vec<bool>)> {
            (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| {
                (Just([d, h, w]), proptest::collection::vec(any::<bool>(), d * h * w))
            })
        }

        proptest! {
            #[test]
            fn components_partition_the_mask((dims, mask) in grid()) {
                let (labels, sizes) = label_components(&mask, dims);
                prop_assert_eq!(sizes.iter().sum::<usize>(), mask.iter().filter(|&&m| m).count());
                for (l, m) in labels.iter().zip(&mask) {
                    prop_assert_eq!(*l > 0, *m);
                }
            }

            #[test]
            fn filling_holes_only_adds_and_is_idempotent((dims, mask) in grid()) {
                let filled = fill_holes(&mask, dims);
                prop_assert!(mask.iter().zip(&filled).all(|(m, f)| !m || *f));
                prop_assert_eq!(fill_holes(&filled, dims), filled);
            }

            #[test]
            fn ventricles_lie_inside_the_brain(vals in proptest::collection::vec(any::<u8>(), 216), t in 1u8..255) {
                let v = VolumeU8::new([6, 6, 6], [1.0; 3], vals).unwrap();
                if let Ok(brain) = brain_mask(&v, &Thresholds::default()) {
                    for policy in [ComponentPolicy::KeepLargest, ComponentPolicy::default()] {
                        let vent = segment_ventricles(&v, &brain, t, policy).unwrap();
                        prop_assert!(vent.is_subset_of(&brain));
                    }
                }
            }
        }
    }
}
