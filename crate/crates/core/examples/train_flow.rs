//! Trains the volumetric flow on phantoms with a progressive bit-depth
//! schedule, saves the checkpoint and checks the reconstruction.
//!
//! cargo run --release --example train_flow

use voxflow::flow::{checkpoint, FlowConfig};
use voxflow::phantom::{gen_series, PhantomSpec};
use voxflow::train::{train_spatial, Stage, TrainSchedule};

fn main() -> voxflow::Result<()> {
    let series = gen_series(&PhantomSpec::desk(16), 16, 2, 7)?;
    let data: Vec<_> = series.iter().flat_map(|s| s.scans.iter().map(|s| s.volume.clone())).collect();
    let schedule = TrainSchedule::scaled(vec![
        Stage { bits: 1, epochs: 3, lr: 1e-3 },
        Stage { bits: 2, epochs: 3, lr: 1e-3 },
        Stage { bits: 8, epochs: 6, lr: 1e-3 },
    ])?;
    let config = FlowConfig::new(16, 2, 2, 32)?;
    println!("{} volumes, {} epochs", data.len(), schedule.total_epochs());
    let trained = train_spatial::<f32>(&data, config, &schedule, 7, |m| {
        println!("epoch {:>2}  {} bit  bpd {:.3}  lr {:.1e}", m.epoch, m.stage_bits, m.bpd, m.lr)
    })?;
    let path = std::env::temp_dir().join("voxflow-example.vflw");
    checkpoint::save(&trained.flow, &path)?;
    println!("saved {}", path.display());

    let z = trained.flow.encode(&data[0].to_model_input())?.0;
    let x = trained.flow.decode(&z)?;
    println!("reconstruction error {:.2e}", x.max_abs_diff(&data[0].to_model_input())?);
    Ok(())
}
