//! Forecasts a held-out subject several years ahead and follows the
//! segmented ventricle volume along the way. Both the recursive and the
//! telescoped latent paths are reported.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxflow::flow::FlowConfig;
use voxflow::ingest::VolumeF32;
use voxflow::forecast::Twin;
use voxflow::phantom::{gen_series, PhantomSpec};
use voxflow::pipeline::{latent_pairs, measure_voxels, Series};
use voxflow::quantify::{ComponentPolicy, Thresholds};
use voxflow::temporal::{
    train_temporal, FinalActivation, NormalizationParams, TemporalConfig, TemporalParams, TemporalTrainOptions,
};
use voxflow::train::{train_spatial, TrainSchedule};

fn main() -> voxflow::Result<()> {
    let spec = PhantomSpec::desk(16);
    let subjects: Vec<Series> = gen_series(&spec, 21, 5, 5)?.iter().map(Series::from).collect();
    let (train, test) = subjects.split_at(20);
    let volumes: Vec<_> = train.iter().flat_map(|s| s.volumes.iter().take(2).cloned()).collect();
    let flow = train_spatial::<f32>(&volumes, FlowConfig::new(16, 2, 2, 32)?, &TrainSchedule::desk(), 5, |_| {})?.flow;
    let pairs = latent_pairs(&flow, train, &NormalizationParams::default())?;
    let config = TemporalConfig::for_flow(flow.config(), FinalActivation::Linear);
    let init = TemporalParams::near_identity(config, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let temporal = train_temporal(&pairs, init, &TemporalTrainOptions::desk(5))?.params;

    let twin = Twin::new(&flow, &temporal);
    let subject = &test[0];
    let t = Thresholds::default();
    let result = twin.forecast(&subject.volumes[0].to_model_input(), 4)?;
    println!("{:>4} {:>10} {:>9} {:>12}", "step", "predicted", "measured", "paths differ");
    for step in &result.steps {
        let v = VolumeF32::from_tensor(&step.volume, subject.volumes[0].spacing())?.model_output_to_u8();
        let predicted = measure_voxels(&v, &t, ComponentPolicy::default())?.0;
        let measured = measure_voxels(&subject.volumes[step.index], &t, ComponentPolicy::default())?.0;
        println!("{:>4} {predicted:>10} {measured:>9} {:>12.1e}", step.index, step.discrepancy);
    }
    Ok(())
}
