//! Generates a small longitudinal phantom dataset and prints the analytic
//! ventricle volumes next to the voxelized counts.
//!
//! cargo run --release --example phantom_dataset [out_dir]

use std::path::PathBuf;

use voxflow::phantom::{gen_dataset, read_truth, PhantomSpec};

fn main() -> voxflow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("voxflow-phantoms"));
    let spec = PhantomSpec::desk(16);
    let manifest = gen_dataset(&spec, 6, 2, 4, 42, &out)?;
    println!("{} scans written to {}", manifest.num_scans(), out.display());
    println!("{:<8} {:<6} {:>4} {:>10} {:>8}", "subject", "split", "year", "analytic", "voxels");
    for row in read_truth(&out.join("truth.csv"))? {
        println!(
            "{:<8} {:<6} {:>4} {:>10.1} {:>8}",
            row.subject, row.split, row.year, row.ventricle_analytic, row.ventricle_voxels
        );
    }
    Ok(())
}
