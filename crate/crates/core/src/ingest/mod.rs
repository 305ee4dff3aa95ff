//! Preprocessing of CT volumes and the on-disk volume and manifest formats.

mod manifest;
mod preprocess;
mod volume;

use std::path::Path;

pub use manifest::{DatasetManifest, Scan, Split, SubjectEntry};
pub use preprocess::{
    center_of_gravity, crop_centered, crop_origin, downsample, preprocess, round_half_down, window_hu,
    WINDOW_OFFSET,
};
pub use volume::{peek_dtype, Volume, VolumeF32, VolumeI16, VolumeU8, Voxel};

use crate::error::Result;

/// Preprocesses every `.vvol` CT volume (i16) in `src` into `dst`. A
/// `manifest.txt` in `src` is copied alongside, since file names are kept.
/// Returns the written file names in sorted order.
pub fn ingest_dir(src: &Path, dst: &Path, size: usize, factor: usize) -> Result<Vec<String>> {
    std::fs::create_dir_all(dst)?;
    let mut names: Vec<String> = std::fs::read_dir(src)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".vvol"))
        .collect();
    names.sort();
    for name in &names {
        let ct = VolumeI16::read(&src.join(name))?;
        preprocess(&ct, size, factor)?.write(&dst.join(name))?;
    }
    let manifest = src.join("manifest.txt");
    if manifest.exists() {
        DatasetManifest::read(&manifest)?.write(&dst.join("manifest.txt"))?;
    }
    Ok(names)
}
