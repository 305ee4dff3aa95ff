//! Self-checks of the numerical core: invertibility, log-determinants
//! against a dense Jacobian, and analytic gradients against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::linalg::Lu;
use crate::diffcore::{Real, Tensor};
use crate::error::Result;
use crate::flow::{Flow, FlowConfig};
use crate::seed::derive_seed;
use crate::temporal::{level_loss_and_grad, FinalActivation, TemporalConfig, TemporalParams};
use crate::train::nll_and_grad;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }
}

pub fn random_volume<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random::<f64>() - 0.5))
}

/// A freshly built model with every parameter moved away from its
/// initialization, so no coupling or actnorm is the identity.
pub fn perturbed_flow(config: FlowConfig, seed: u64) -> Result<Flow<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = Flow::<f64>::new(config, &mut rng)?;
    let names = flow.param_names().to_vec();
    for (p, name) in flow.params_mut().iter_mut().zip(&names) {
        if name.ends_with("invconv.weight") {
            let c = p.shape()[0];
            for i in 0..c {
                p.data_mut()[i * c + i] += 0.3;
            }
            continue;
        }
        for v in p.data_mut() {
            *v += 0.1 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    flow.set_actnorm_initialized(true);
    Ok(flow)
}

/// Largest `|decode(encode(x)) - x|` over `volumes`.
pub fn round_trip_error<T: Real>(flow: &Flow<T>, volumes: &[Tensor<T>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in volumes {
        let (z, _) = flow.encode(x)?;
        worst = worst.max(flow.decode(&z)?.max_abs_diff(x)?);
    }
    Ok(worst)
}

/// `log |det J|` of the encoder at `x` from a central-difference Jacobian.
pub fn dense_jacobian_log_det(flow: &Flow<f64>, x: &Tensor<f64>, h: f64) -> Result<f64> {
    let n = x.numel();
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[j] += h;
        xm.data_mut()[j] -= h;
        let fp = flow.encode(&xp)?.0.flatten();
        let fm = flow.encode(&xm)?.0.flatten();
        for i in 0..n {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(Lu::new(&jac, n).log_abs_det())
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Worst relative error of `d NLL / d theta` against central differences,
/// over every element of small tensors and `samples` elements of larger ones.
pub fn flow_gradient_error(flow: &Flow<f64>, x: &Tensor<f64>, samples: usize, h: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = nll_and_grad(flow, x)?;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let numel = g.numel();
        let idxs: Vec<usize> = if numel <= samples {
            (0..numel).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in idxs {
            let nll_at = |delta: f64| -> Result<f64> {
                let mut f = flow.clone();
                f.params_mut()[pi].data_mut()[i] += delta;
                Ok(-f.log_likelihood(x)?)
            };
            let fd = (nll_at(h)? - nll_at(-h)?) / (2.0 * h);
            worst = worst.max(relative(fd, g.data()[i]));
        }
    }
    Ok(worst)
}

/// Same check for the per-level temporal MSE.
pub fn temporal_gradient_error(
    params: &TemporalParams<f64>,
    level: usize,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let last = params.config.final_activation;
    let layers = &params.levels[level - 1];
    let (_, grads) = level_loss_and_grad(layers, x, y, last)?;
    let mut worst: f64 = 0.0;
    for (li, (gw, gb)) in grads.iter().enumerate() {
        for (which, g) in [(0, gw), (1, gb)] {
            for i in 0..g.numel() {
                let loss_at = |delta: f64| -> Result<f64> {
                    let mut l = layers.to_vec();
                    let t = if which == 0 { &mut l[li].0 } else { &mut l[li].1 };
                    t.data_mut()[i] += delta;
                    Ok(level_loss_and_grad(&l, x, y, last)?.0)
                };
                let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
                worst = worst.max(relative(fd, g.data()[i]));
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    pub resolution: usize,
    pub levels: usize,
    pub depth: usize,
    pub width: usize,
    pub volumes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            resolution: 8,
            levels: 2,
            depth: 2,
            width: 8,
            volumes: 100,
            seed: 0,
        }
    }
}

/// Runs every check; the caller decides what a failure means.
pub fn run_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let cfg = FlowConfig::new(opts.resolution, opts.levels, opts.depth, opts.width)?;
    let flow = perturbed_flow(cfg.clone(), derive_seed(opts.seed, "verify/flow"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "verify/volumes"));
    let vols: Vec<Tensor<f64>> = (0..opts.volumes)
        .map(|_| random_volume(&cfg.input_shape(), &mut rng))
        .collect();
    checks.push(Check::below("round trip f64", round_trip_error(&flow, &vols)?, 1e-8));
    let vols32: Vec<Tensor<f32>> = vols.iter().map(Tensor::cast).collect();
    checks.push(Check::below("round trip f32", round_trip_error(&flow.cast::<f32>(), &vols32)?, 1e-4));

    let small = FlowConfig::new(4, 1, opts.depth, opts.width)?;
    let sflow = perturbed_flow(small.clone(), derive_seed(opts.seed, "verify/small"))?;
    let x: Tensor<f64> = random_volume(&small.input_shape(), &mut rng);
    let logdet = sflow.encode(&x)?.1;
    let dense = dense_jacobian_log_det(&sflow, &x, 1e-5)?;
    checks.push(Check::below("log-determinant vs dense jacobian", (logdet - dense).abs(), 1e-3));
    checks.push(Check::below(
        "flow nll gradient",
        flow_gradient_error(&sflow, &x, 16, 1e-6, derive_seed(opts.seed, "verify/grad"))?,
        1e-4,
    ));

    for fa in [FinalActivation::Relu, FinalActivation::Linear] {
        let tcfg = TemporalConfig::for_flow(&small, fa);
        let params = TemporalParams::random(tcfg, 1.0, &mut rng);
        let shape = small.latent_shape(1);
        let zx = Tensor::from_fn(&shape, |_| 0.5 + 0.1 * (rng.random::<f64>() - 0.5));
        let zy = Tensor::from_fn(&shape, |_| 0.5 + 0.1 * (rng.random::<f64>() - 0.5));
        checks.push(Check::below(
            format!("temporal mse gradient ({fa:?})"),
            temporal_gradient_error(&params, 1, &zx, &zy, 1e-6)?,
            1e-4,
        ));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_models() {
        let checks = run_suite(&VerifyOptions {
            volumes: 4,
            width: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(checks.len(), 6);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn dense_log_det_of_identity_flow_is_coupling_scale() {
        // one zero coupling: half the channels scaled by sigmoid(2)
        let cfg = FlowConfig::new(2, 1, 1, 2).unwrap();
        let mut flow = Flow::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names = flow.param_names().to_vec();
        for (p, name) in flow.params_mut().iter_mut().zip(&names) {
            let shape = p.shape().to_vec();
            *p = if name.ends_with("invconv.weight") {
                Tensor::from_fn(&shape, |i| if i % (shape[0] + 1) == 0 { 1.0 } else { 0.0 })
            } else {
                Tensor::zeros(&shape)
            };
        }
        let x = Tensor::from_fn(&cfg.input_shape(), |i| i as f64 / 16.0 - 0.25);
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        let d = dense_jacobian_log_det(&flow, &x, 1e-5).unwrap();
        assert!((d - 4.0 * s.ln()).abs() < 1e-8, "{d}");
    }
}
