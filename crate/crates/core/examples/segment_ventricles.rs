//! Segments phantom ventricles and compares the voxel count to the
//! closed-form ellipsoid volume. Writes a mid-slice overlay as PGM.

use voxflow::phantom::{gen_subject, PhantomSpec};
use voxflow::quantify::{brain_mask, segment_ventricles, write_slice_pgm, ComponentPolicy, Thresholds};

fn main() -> voxflow::Result<()> {
    let spec = PhantomSpec::desk(40);
    let t = Thresholds::default();
    let subject = gen_subject(&spec, "demo", 3, 4)?;
    println!("{:>4} {:>10} {:>9} {:>7}", "year", "analytic", "segmented", "error");
    for scan in &subject.scans {
        let brain = brain_mask(&scan.volume, &t)?;
        let vent = segment_ventricles(&scan.volume, &brain, t.ventricle, ComponentPolicy::default())?;
        let err = vent.count() as f64 / scan.ventricle_analytic - 1.0;
        println!("{:>4} {:>10.1} {:>9} {:>6.1}%", scan.year, scan.ventricle_analytic, vent.count(), 100.0 * err);
        if scan.year == 0 {
            let path = std::env::temp_dir().join("voxflow-ventricles.pgm");
            write_slice_pgm(&path, &scan.volume, Some(&vent), 20)?;
            println!("     overlay written to {}", path.display());
        }
    }
    Ok(())
}
