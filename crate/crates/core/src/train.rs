//! Maximum-likelihood training of the flow with a progressive bit-depth
//! curriculum.
//!
//! Stage `n` trains on volumes reduced to `n` bits, dequantized with
//! uniform noise into `[-0.5, 0.5)`. Parameters carry over unchanged
//! between stages. The learning rate ramps linearly from zero over the
//! warmup epochs at the start of training.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor};
use crate::error::{contract, Error, Result};
use crate::flow::{Flow, FlowConfig};
use crate::ingest::VolumeU8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub bits: u32,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    pub warmup_epochs: f64,
}

const FULL_WARMUP: f64 = 100.0;

impl TrainSchedule {
    pub fn new(stages: Vec<Stage>, warmup_epochs: f64) -> Result<Self> {
        let s = TrainSchedule { stages, warmup_epochs };
        s.validate()?;
        Ok(s)
    }

    /// The full eight-stage schedule, 360 epochs in total.
    pub fn full() -> Self {
        let mut stages: Vec<Stage> = [(1, 70), (2, 30), (3, 10), (4, 20), (5, 10), (6, 10), (7, 10)]
            .into_iter()
            .map(|(bits, epochs)| Stage { bits, epochs, lr: 1e-3 })
            .collect();
        stages.push(Stage {
            bits: 8,
            epochs: 200,
            lr: 1e-4,
        });
        TrainSchedule {
            stages,
            warmup_epochs: FULL_WARMUP,
        }
    }

    /// Short curriculum for desk-scale runs: 1-bit and 2-bit for 5 epochs
    /// each, then 10 epochs at 8 bits, all at 1e-3.
    pub fn desk() -> Self {
        Self::scaled(vec![
            Stage { bits: 1, epochs: 5, lr: 1e-3 },
            Stage { bits: 2, epochs: 5, lr: 1e-3 },
            Stage { bits: 8, epochs: 10, lr: 1e-3 },
        ])
        .expect("valid desk schedule")
    }

    /// Stages with the full warmup scaled by total epochs.
    pub fn scaled(stages: Vec<Stage>) -> Result<Self> {
        let total: usize = stages.iter().map(|s| s.epochs).sum();
        let full_total = Self::full().total_epochs() as f64;
        Self::new(stages, FULL_WARMUP * total as f64 / full_total)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(contract("schedule has no stages"));
        }
        let mut prev = 0;
        for s in &self.stages {
            if !(1..=8).contains(&s.bits) {
                return Err(contract(format!("stage bit depth {} outside 1..=8", s.bits)));
            }
            if s.bits <= prev {
                return Err(contract(format!("stage bit depths not strictly increasing ({prev} then {})", s.bits)));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(contract(format!("stage learning rate {} not positive", s.lr)));
            }
            prev = s.bits;
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return Err(contract(format!("warmup {} must be non-negative", self.warmup_epochs)));
        }
        Ok(())
    }

    /// Plain-text form: one `bits epochs lr` line per stage, plus an
    /// optional `warmup <epochs>` line. `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut out = format!("warmup {}\n", self.warmup_epochs);
        for s in &self.stages {
            out.push_str(&format!("{} {} {:e}\n", s.bits, s.epochs, s.lr));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl FromStr for TrainSchedule {
    type Err = Error;

    /// Without a `warmup` line the warmup is scaled from the full schedule's.
    fn from_str(text: &str) -> Result<Self> {
        let mut stages = Vec::new();
        let mut warmup = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("schedule line {}: {raw:?}", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[..] {
                ["warmup", w] => warmup = Some(w.parse::<f64>().map_err(|_| bad())?),
                [b, e, lr] => stages.push(Stage {
                    bits: b.parse().map_err(|_| bad())?,
                    epochs: e.parse().map_err(|_| bad())?,
                    lr: lr.parse().map_err(|_| bad())?,
                }),
                _ => return Err(bad()),
            }
        }
        match warmup {
            Some(w) => TrainSchedule::new(stages, w),
            None => TrainSchedule::scaled(stages),
        }
    }
}

/// Keeps the top `n` bits: `v >> (8 - n)`, values in `0..2^n`.
pub fn quantize_bits(v: &VolumeU8, n: u32) -> Result<VolumeU8> {
    check_bits(n)?;
    Ok(v.map(|x| x >> (8 - n)))
}

fn check_bits(n: u32) -> Result<()> {
    if !(1..=8).contains(&n) {
        return Err(contract(format!("bit depth {n} outside 1..=8")));
    }
    Ok(())
}

/// `x = (v + u) / 2^n - 0.5` with `u` supplied per voxel by `noise`.
pub fn dequantize_with<T: Real>(v: &VolumeU8, n: u32, mut noise: impl FnMut() -> f64) -> Result<Tensor<T>> {
    check_bits(n)?;
    let levels = (1u32 << n) as f64;
    let [d, h, w] = v.dims();
    let mut data = Vec::with_capacity(v.len());
    for &q in v.data() {
        if q as f64 >= levels {
            return Err(contract(format!("value {q} out of range for {n}-bit data")));
        }
        data.push(T::of((q as f64 + noise()) / levels - 0.5));
    }
    Tensor::new(vec![d, h, w, 1], data)
}

/// Uniform dequantization with `u ~ U[0, 1)`.
pub fn dequantize<T: Real, R: Rng + ?Sized>(v: &VolumeU8, n: u32, rng: &mut R) -> Result<Tensor<T>> {
    dequantize_with(v, n, || rng.random::<f64>())
}

/// Bits per dimension of `nll` nats on `n`-bit data scaled into a unit
/// interval.
pub fn bits_per_dim(nll: f64, n: u32, dims: usize) -> f64 {
    nll / (dims as f64 * std::f64::consts::LN_2) + n as f64
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = T::of(p.as_f64() - upd);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based across the whole schedule.
    pub epoch: usize,
    pub stage_bits: u32,
    /// Mean per-volume negative log-likelihood in nats.
    pub nll: f64,
    pub bpd: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|m| m.map_err(Error::from)).collect()
}

#[derive(Debug)]
pub struct Trained<T> {
    pub flow: Flow<T>,
    pub metrics: Vec<EpochMetrics>,
}

/// Training stopped early. `last_good` holds the parameters from before
/// the failing step, if a model was built at all.
#[derive(Debug)]
pub struct TrainAbort<T> {
    pub last_good: Option<Flow<T>>,
    pub metrics: Vec<EpochMetrics>,
    pub epoch: usize,
    pub cause: Error,
}

impl<T> fmt::Display for TrainAbort<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted in epoch {}: {}", self.epoch, self.cause)
    }
}

impl<T: fmt::Debug> std::error::Error for TrainAbort<T> {}

impl<T> From<TrainAbort<T>> for Error {
    fn from(a: TrainAbort<T>) -> Error {
        match a.cause {
            e @ (Error::Contract(_) | Error::Io(_)) => e,
            e => Error::Diverged(format!("epoch {}: {e}", a.epoch)),
        }
    }
}

/// Negative log-likelihood of one dequantized volume and its gradient per
/// parameter (checkpoint order).
pub fn nll_and_grad<T: Real>(flow: &Flow<T>, x: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let mut b = flow.binder();
    let xv = g.input(x.clone());
    let enc = flow.encode_graph(&mut g, &mut b, xv)?;
    let loss = g.scale(enc.log_likelihood, -1.0)?;
    let nll = g.value(loss).item()?.as_f64();
    let grads = g.backward(loss)?;
    let grads = b.collect(&grads, &flow.param_shapes());
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    Ok((nll, grads))
}

/// Fresh model seeded from `seed`, then [`train_flow`].
pub fn train_spatial<T: Real>(
    data: &[VolumeU8],
    config: FlowConfig,
    schedule: &TrainSchedule,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained<T>, TrainAbort<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = Flow::new(config, &mut rng).map_err(|cause| TrainAbort {
        last_good: None,
        metrics: Vec::new(),
        epoch: 0,
        cause,
    })?;
    train_flow(flow, data, schedule, &mut rng, on_epoch)
}

/// Runs every stage of `schedule` over `data` with batch size 1, visiting
/// volumes in a fresh random order each epoch. Actnorm is initialized from
/// the first volume of the first stage unless already initialized.
pub fn train_flow<T: Real, R: Rng>(
    mut flow: Flow<T>,
    data: &[VolumeU8],
    schedule: &TrainSchedule,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained<T>, TrainAbort<T>> {
    let mut metrics = Vec::new();
    let fail = |flow: Flow<T>, metrics: Vec<EpochMetrics>, epoch: usize, cause: Error| TrainAbort {
        last_good: Some(flow),
        metrics,
        epoch,
        cause,
    };
    if let Err(e) = schedule.validate().and_then(|_| check_data(data, flow.config())) {
        return Err(fail(flow, metrics, 0, e));
    }
    let dims = flow.config().dims();
    let steps_per_epoch = data.len();
    let warmup_steps = schedule.warmup_epochs * steps_per_epoch as f64;
    let mut adam = Adam::new(flow.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let mut epoch = 0usize;
    for stage in &schedule.stages {
        let quantized: Vec<VolumeU8> = match data.iter().map(|v| quantize_bits(v, stage.bits)).collect() {
            Ok(q) => q,
            Err(e) => return Err(fail(flow, metrics, epoch, e)),
        };
        for _ in 0..stage.epochs {
            epoch += 1;
            let start = Instant::now();
            order.shuffle(rng);
            let mut total = 0.0;
            let mut lr = 0.0;
            for &i in &order {
                let x = match dequantize::<T, _>(&quantized[i], stage.bits, rng) {
                    Ok(x) => x,
                    Err(e) => return Err(fail(flow, metrics, epoch, e)),
                };
                if !flow.actnorm_initialized() {
                    if let Err(e) = flow.initialize_actnorm(&x) {
                        return Err(fail(flow, metrics, epoch, e));
                    }
                }
                let (nll, grads) = match nll_and_grad(&flow, &x) {
                    Ok(r) if r.0.is_finite() => r,
                    Ok(_) => return Err(fail(flow, metrics, epoch, Error::NonFinite { op: "nll" })),
                    Err(e) => return Err(fail(flow, metrics, epoch, e)),
                };
                step += 1;
                let ramp = if warmup_steps > 0.0 {
                    (step as f64 / warmup_steps).min(1.0)
                } else {
                    1.0
                };
                lr = stage.lr * ramp;
                let before = flow.params().to_vec();
                adam.step(flow.params_mut(), &grads, lr);
                if flow.params().iter().any(|p| !p.all_finite()) {
                    flow.params_mut().clone_from_slice(&before);
                    return Err(fail(flow, metrics, epoch, Error::NonFinite { op: "parameter update" }));
                }
                total += nll;
            }
            let nll = total / steps_per_epoch as f64;
            let m = EpochMetrics {
                epoch,
                stage_bits: stage.bits,
                nll,
                bpd: bits_per_dim(nll, stage.bits, dims),
                lr,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} ({}-bit): nll {:.3} bpd {:.4} lr {:.2e}",
                m.epoch,
                m.stage_bits,
                m.nll,
                m.bpd,
                m.lr
            );
            on_epoch(&m);
            metrics.push(m);
        }
    }
    Ok(Trained { flow, metrics })
}

fn check_data(data: &[VolumeU8], config: &FlowConfig) -> Result<()> {
    if data.is_empty() {
        return Err(contract("training set is empty"));
    }
    let r = config.resolution;
    for (i, v) in data.iter().enumerate() {
        if v.dims() != [r, r, r] {
            return Err(contract(format!("training volume {i} has dims {:?}, expected {r}^3", v.dims())));
        }
    }
    Ok(())
}
