//! Encodes phantom series with a briefly trained flow and fits the latent
//! year-to-year predictor, comparing it against predicting no change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxflow::flow::FlowConfig;
use voxflow::phantom::{gen_series, PhantomSpec};
use voxflow::pipeline::{latent_pairs, Series};
use voxflow::temporal::{
    evaluate_levels, identity_levels, pooled, train_temporal, FinalActivation, NormalizationParams, TemporalConfig,
    TemporalParams, TemporalTrainOptions,
};
use voxflow::train::{train_spatial, TrainSchedule};

fn main() -> voxflow::Result<()> {
    let spec = PhantomSpec::desk(16);
    let subjects: Vec<Series> = gen_series(&spec, 24, 5, 11)?.iter().map(Series::from).collect();
    let (train, test) = subjects.split_at(20);
    let volumes: Vec<_> = train.iter().flat_map(|s| s.volumes.iter().take(2).cloned()).collect();
    let flow = train_spatial::<f32>(&volumes, FlowConfig::new(16, 2, 2, 32)?, &TrainSchedule::desk(), 11, |_| {})?.flow;

    let norm = NormalizationParams::default();
    let pairs = latent_pairs(&flow, train, &norm)?;
    let held_out = latent_pairs(&flow, test, &norm)?;
    println!("{} training pairs, {} held-out pairs", pairs.len(), held_out.len());

    let config = TemporalConfig::for_flow(flow.config(), FinalActivation::Linear);
    let init = TemporalParams::near_identity(config, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let trained = train_temporal(&pairs, init, &TemporalTrainOptions::desk(11))?;

    let model = evaluate_levels(&held_out, &trained.params)?;
    let identity = identity_levels(&held_out);
    for (l, (m, i)) in model.iter().zip(&identity).enumerate() {
        println!("level {}: model {m:.3e}  identity {i:.3e}  ratio {:.2}", l + 1, m / i);
    }
    let z = &held_out[0].0;
    println!("pooled ratio {:.2}", pooled(&model, z) / pooled(&identity, z));
    Ok(())
}
