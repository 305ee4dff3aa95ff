//! Windowing, centre-of-gravity cropping and block downsampling of a
//! synthetic CT volume in Hounsfield units.

use voxflow::ingest::{center_of_gravity, preprocess, window_hu, VolumeI16};

fn main() -> voxflow::Result<()> {
    // off-centre head: 1000 HU shell, 35 HU brain, 5 HU ventricle, air outside
    let c = [30.0, 26.0, 34.0];
    let ct = VolumeI16::from_fn([64, 64, 64], |d, h, w| {
        let r = ((d as f64 - c[0]).powi(2) + (h as f64 - c[1]).powi(2) + (w as f64 - c[2]).powi(2)).sqrt();
        match r {
            r if r < 5.0 => 5,
            r if r < 18.0 => 35,
            r if r < 21.0 => 1000,
            _ => -1000,
        }
    });
    let windowed = window_hu(&ct);
    let cog = center_of_gravity(&windowed)?;
    println!("centre of gravity after windowing: {:.2?}", cog);
    let out = preprocess(&ct, 48, 3)?;
    println!("preprocessed dims {:?}, spacing {:?}", out.dims(), out.spacing());
    let mid = out.dims()[0] / 2;
    for h in 0..out.dims()[1] {
        let row: String = (0..out.dims()[2])
            .map(|w| match out.get(mid, h, w) {
                0..=40 => ' ',
                41..=150 => '.',
                151..=220 => 'o',
                _ => '#',
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
