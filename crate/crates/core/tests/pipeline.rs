use voxflow::flow::FlowConfig;
use voxflow::phantom::{gen_series, gen_subject, PhantomSpec};
use voxflow::pipeline::measure_voxels;
use voxflow::quantify::{brain_mask, mae_by_year, normalized_volume_curve, ComponentPolicy, Thresholds};
use voxflow::train::{train_spatial, Stage, TrainSchedule};

fn steady_spec(resolution: usize, yearly_volume_growth: f64) -> PhantomSpec {
    let mut spec = PhantomSpec::desk(resolution);
    spec.growth = (1.0 + yearly_volume_growth).cbrt();
    spec.growth_jitter = 0.0;
    spec
}

#[test]
fn progressive_training_lowers_nll_within_each_stage() {
    let series = gen_series(&PhantomSpec::desk(8), 16, 2, 3).unwrap();
    let data: Vec<_> = series.iter().flat_map(|s| s.scans.iter().map(|c| c.volume.clone())).collect();
    let schedule = TrainSchedule::scaled(vec![
        Stage { bits: 1, epochs: 4, lr: 2e-3 },
        Stage { bits: 8, epochs: 8, lr: 2e-3 },
    ])
    .unwrap();
    let out = train_spatial::<f32>(&data, FlowConfig::new(8, 2, 2, 16).unwrap(), &schedule, 3, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 12);
    for bits in [1, 8] {
        let stage: Vec<_> = out.metrics.iter().filter(|m| m.stage_bits == bits).collect();
        let head: f64 = stage[..2].iter().map(|m| m.nll).sum();
        let tail: f64 = stage[stage.len() - 2..].iter().map(|m| m.nll).sum();
        assert!(tail < head, "{bits}-bit stage: {head} -> {tail}");
    }
}

#[test]
fn brain_mask_matches_inner_skull_sphere() {
    let spec = PhantomSpec::desk(40);
    for seed in 0..5 {
        let s = gen_subject(&spec, "b", seed, 1).unwrap();
        let scan = &s.scans[0];
        let brain = brain_mask(&scan.volume, &Thresholds::default()).unwrap();
        let sphere = 4.0 / 3.0 * std::f64::consts::PI * spec.skull_inner.powi(3);
        assert!((scan.brain_analytic / sphere - 1.0).abs() < 1e-12);
        let rel = brain.count() as f64 / sphere - 1.0;
        assert!(rel.abs() < 0.1, "seed {seed}: {rel}");
    }
}

#[test]
fn segmented_growth_follows_configured_rate() {
    let spec = steady_spec(40, 0.10);
    let t = Thresholds::default();
    for seed in 0..3 {
        let s = gen_subject(&spec, "g", seed, 4).unwrap();
        let vols: Vec<f64> = s
            .scans
            .iter()
            .map(|c| measure_voxels(&c.volume, &t, ComponentPolicy::default()).unwrap().0 as f64)
            .collect();
        // three years of 10 % growth
        let ratio = vols[3] / vols[0];
        assert!((ratio - 1.331).abs() < 0.06, "seed {seed}: {ratio}");
    }
}

#[test]
fn frozen_anatomy_error_matches_growth() {
    let g = 0.08;
    let spec = steady_spec(40, g);
    let t = Thresholds::default();
    let mut measured = Vec::new();
    let mut frozen = Vec::new();
    let mut expected = vec![0.0; 4];
    let n = 6;
    for seed in 0..n {
        let s = gen_subject(&spec, &format!("f{seed}"), seed, 4).unwrap();
        let m: Vec<(usize, usize)> = s
            .scans
            .iter()
            .map(|c| measure_voxels(&c.volume, &t, ComponentPolicy::default()).unwrap())
            .collect();
        let b0 = m[0].1 as f64;
        let meas: Vec<(usize, f64)> = m.iter().enumerate().map(|(y, v)| (y, v.0 as f64)).collect();
        let froz: Vec<(usize, f64)> = (0..4).map(|y| (y, m[0].0 as f64)).collect();
        measured.extend(normalized_volume_curve(&s.id, &meas, b0).unwrap());
        frozen.extend(normalized_volume_curve(&s.id, &froz, b0).unwrap());
        for (y, e) in expected.iter_mut().enumerate() {
            let v0 = s.scans[0].ventricle_analytic;
            *e += 100.0 * v0 * ((1.0 + g).powi(y as i32) - 1.0) / s.scans[0].brain_analytic / n as f64;
        }
    }
    let mae = mae_by_year(&frozen, &measured).unwrap();
    assert_eq!(mae[0].mae_percent, 0.0);
    for w in mae.windows(2) {
        assert!(w[1].mae_percent > w[0].mae_percent);
    }
    for (row, e) in mae.iter().zip(&expected).skip(1) {
        assert!((row.mae_percent / e - 1.0).abs() < 0.25, "year {}: {} vs {e}", row.year, row.mae_percent);
    }
}
