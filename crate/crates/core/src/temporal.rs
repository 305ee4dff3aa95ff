//! Latent-space aging predictor.
//!
//! Latents are first normalized to `clip((z + a) / b, 0, 1)`. Each pyramid
//! level then has its own residual stack of 3x3x3 convolutions whose width
//! equals the level's channel count:
//!
//! ```text
//! P_l(x) = relu(conv_n(... relu(conv_1(x)) ...)) + x
//! ```
//!
//! With the default relu on the last layer the predicted change is never
//! negative; [`FinalActivation::Linear`] drops that last relu.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::diffcore::{kernels, Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::flow::{FlowConfig, LatentPyramid};
use crate::seed::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub a: f64,
    pub b: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        NormalizationParams { a: 24.0, b: 48.0 }
    }
}

impl NormalizationParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(contract(format!("normalization range divisor must be positive, got {b}")));
        }
        Ok(NormalizationParams { a, b })
    }

    pub fn normalize(&self, z: f64) -> f64 {
        ((z + self.a) / self.b).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, zn: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&zn) {
            return Err(contract(format!("normalized latent {zn} outside [0, 1]")));
        }
        Ok(zn * self.b - self.a)
    }
}

pub fn normalize_latent<T: Real>(z: &LatentPyramid<T>, p: &NormalizationParams) -> LatentPyramid<T> {
    z.map(|v| T::of(p.normalize(v.as_f64())))
}

pub fn denormalize_latent<T: Real>(zn: &LatentPyramid<T>, p: &NormalizationParams) -> Result<LatentPyramid<T>> {
    let levels = zn
        .levels
        .iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|&v| p.denormalize(v.as_f64()).map(T::of))
                .collect::<Result<Vec<T>>>()?;
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPyramid::new(levels))
}

/// Elementwise clip into `[0, 1]`.
pub fn clip_unit<T: Real>(z: &LatentPyramid<T>) -> LatentPyramid<T> {
    z.map(|v| v.max(T::zero()).min(T::one()))
}

/// Fraction of elements the normalization saturates.
pub fn saturated_fraction<T: Real>(z: &LatentPyramid<T>, p: &NormalizationParams) -> f64 {
    let n = z.numel();
    let sat = z
        .levels
        .iter()
        .flat_map(|t| t.data())
        .filter(|v| {
            let u = (v.as_f64() + p.a) / p.b;
            !(0.0..=1.0).contains(&u)
        })
        .count();
    sat as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalActivation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub levels: Vec<LevelSpec>,
    pub final_activation: FinalActivation,
}

impl TemporalConfig {
    /// `min(2^(l-1), 4)` layers at level `l`, width equal to the level's
    /// latent channel count.
    pub fn for_flow(flow: &FlowConfig, final_activation: FinalActivation) -> Self {
        Self::from_widths(flow.latent_shapes().iter().map(|s| s[3]), final_activation)
    }

    /// Same law read off the channel counts of an encoded pyramid.
    pub fn for_latents<T: Real>(z: &LatentPyramid<T>, final_activation: FinalActivation) -> Result<Self> {
        let widths = z.levels.iter().map(|t| t.dims4().map(|d| d[3])).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_widths(widths, final_activation))
    }

    fn from_widths(widths: impl IntoIterator<Item = usize>, final_activation: FinalActivation) -> Self {
        let levels = widths
            .into_iter()
            .enumerate()
            .map(|(i, width)| LevelSpec {
                layers: (1usize << i.min(2)).min(4),
                width,
            })
            .collect();
        TemporalConfig {
            levels,
            final_activation,
        }
    }
}

/// Per level, per layer `(kernel [3, 3, 3, c, c], bias [c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams<T> {
    pub config: TemporalConfig,
    pub levels: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> TemporalParams<T> {
    /// All weights zero: the exact identity on every level.
    pub fn zeros(config: TemporalConfig) -> Self {
        let levels = config
            .levels
            .iter()
            .map(|s| {
                (0..s.layers)
                    .map(|_| (Tensor::zeros(&[3, 3, 3, s.width, s.width]), Tensor::zeros(&[s.width])))
                    .collect()
            })
            .collect();
        TemporalParams { config, levels }
    }

    /// Kernels drawn from `N(0, (gain / sqrt(27 c))^2)`, zero biases.
    pub fn random<R: Rng + ?Sized>(config: TemporalConfig, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        for (spec, layers) in p.config.levels.iter().zip(&mut p.levels) {
            let std = gain / ((27 * spec.width) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for (w, _) in layers.iter_mut() {
                *w = Tensor::from_fn(w.shape(), |_| T::of(normal.sample(rng)));
            }
        }
        p
    }

    /// Like [`TemporalParams::random`] but with the last layer of every
    /// level zeroed, so the model starts as the exact identity.
    pub fn near_identity<R: Rng + ?Sized>(config: TemporalConfig, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::random(config, gain, rng);
        for layers in &mut p.levels {
            if let Some((w, _)) = layers.last_mut() {
                *w = Tensor::zeros(w.shape());
            }
        }
        p
    }

    pub fn num_parameters(&self) -> usize {
        self.levels.iter().flatten().map(|(w, b)| w.numel() + b.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> TemporalParams<U> {
        TemporalParams {
            config: self.config.clone(),
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|(w, b)| (w.cast(), b.cast())).collect())
                .collect(),
        }
    }

    fn check_level(&self, z: &Tensor<T>, l: usize) -> Result<()> {
        let spec = self
            .config
            .levels
            .get(l.wrapping_sub(1))
            .ok_or_else(|| contract(format!("temporal model has no level {l}")))?;
        let [_, _, _, c] = z.dims4()?;
        if c != spec.width {
            return Err(contract(format!(
                "level {l}: latent has {c} channels, predictor width is {}",
                spec.width
            )));
        }
        Ok(())
    }
}

/// Graph form of one level's predictor; `params` are `(w, b)` nodes.
pub fn level_graph<T: Real>(g: &mut Graph<T>, x: Var, params: &[(Var, Var)], last: FinalActivation) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in params.iter().enumerate() {
        h = g.conv3d(h, w, Some(b))?;
        if i + 1 < params.len() || last == FinalActivation::Relu {
            h = g.relu(h)?;
        }
    }
    g.add(h, x)
}

/// `P_l(z_l)` for 1-based level `l`, in normalized space.
pub fn predict_level<T: Real>(z: &Tensor<T>, l: usize, params: &TemporalParams<T>) -> Result<Tensor<T>> {
    params.check_level(z, l)?;
    let layers = &params.levels[l - 1];
    let mut h = z.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = kernels::conv3d(&h, w, Some(b))?;
        if i + 1 < layers.len() || params.config.final_activation == FinalActivation::Relu {
            h = h.map(|v| v.max(T::zero()));
        }
    }
    let out = Tensor::new(
        z.shape().to_vec(),
        h.data().iter().zip(z.data()).map(|(&a, &b)| a + b).collect(),
    )?;
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "predict_level" });
    }
    Ok(out)
}

/// Applies each level's predictor. Input and output are normalized;
/// the output is not clipped.
pub fn predict<T: Real>(z: &LatentPyramid<T>, params: &TemporalParams<T>) -> Result<LatentPyramid<T>> {
    if z.len() != params.levels.len() {
        return Err(contract(format!(
            "pyramid has {} levels, temporal model has {}",
            z.len(),
            params.levels.len()
        )));
    }
    let levels = z
        .levels
        .iter()
        .enumerate()
        .map(|(i, t)| predict_level(t, i + 1, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPyramid::new(levels))
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    s / a.numel() as f64
}

/// Mean over pairs of the per-level MSE of `predict(x)` against `y`.
pub fn evaluate_levels<T: Real>(
    pairs: &[(LatentPyramid<T>, LatentPyramid<T>)],
    params: &TemporalParams<T>,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; params.levels.len()];
    for (x, y) in pairs {
        let p = predict(x, params)?;
        for (a, (pl, yl)) in acc.iter_mut().zip(p.levels.iter().zip(&y.levels)) {
            *a += mse(pl, yl);
        }
    }
    Ok(acc.into_iter().map(|a| a / pairs.len().max(1) as f64).collect())
}

/// Same measure for the identity predictor.
pub fn identity_levels<T: Real>(pairs: &[(LatentPyramid<T>, LatentPyramid<T>)]) -> Vec<f64> {
    let Some((first, _)) = pairs.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for (x, y) in pairs {
        for (a, (xl, yl)) in acc.iter_mut().zip(x.levels.iter().zip(&y.levels)) {
            *a += mse(xl, yl);
        }
    }
    acc.into_iter().map(|a| a / pairs.len() as f64).collect()
}

/// Element-weighted mean of per-level values.
pub fn pooled(per_level: &[f64], z: &LatentPyramid<impl Real>) -> f64 {
    let n = z.numel() as f64;
    per_level
        .iter()
        .zip(&z.levels)
        .map(|(m, t)| m * t.numel() as f64 / n)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TemporalTrainOptions {
    pub const FULL_LR: f64 = 10.0;
    pub const DESK_LR: f64 = 0.1;

    pub fn desk(seed: u64) -> Self {
        TemporalTrainOptions {
            lr: Self::DESK_LR,
            epochs: 60,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub epoch: usize,
    pub level: usize,
    /// Mean per-pair MSE over the epoch, measured before each update.
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct TemporalTrained<T> {
    pub params: TemporalParams<T>,
    pub losses: Vec<LevelLoss>,
}

/// MSE of one level's prediction of `y` from `x` and its gradient with
/// respect to every `(kernel, bias)` of that level.
pub fn level_loss_and_grad<T: Real>(
    layers: &[(Tensor<T>, Tensor<T>)],
    x: &Tensor<T>,
    y: &Tensor<T>,
    last: FinalActivation,
) -> Result<(f64, Vec<(Tensor<T>, Tensor<T>)>)> {
    let mut g = Graph::new();
    let vars: Vec<(Var, Var)> = layers
        .iter()
        .map(|(w, b)| (g.param(w.clone()), g.param(b.clone())))
        .collect();
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let out = level_graph(&mut g, xv, &vars, last)?;
    let d = g.sub(out, yv)?;
    let sq = g.mul(d, d)?;
    let loss = g.mean(sq)?;
    let value = g.value(loss).item()?.as_f64();
    let grads = g.backward(loss)?;
    let take = |v: Var, like: &Tensor<T>| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()));
    Ok((
        value,
        vars.iter()
            .zip(layers)
            .map(|(&(wv, bv), (w, b))| (take(wv, w), take(bv, b)))
            .collect(),
    ))
}

/// Plain SGD with batch size 1 on the normalized-latent MSE, each level
/// trained independently with its own shuffling stream.
pub fn train_temporal<T: Real>(
    pairs: &[(LatentPyramid<T>, LatentPyramid<T>)],
    init: TemporalParams<T>,
    opts: &TemporalTrainOptions,
) -> Result<TemporalTrained<T>> {
    if pairs.is_empty() {
        return Err(contract("no training pairs"));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(contract(format!("learning rate {} must be positive", opts.lr)));
    }
    let n_levels = init.levels.len();
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.len() != n_levels || y.len() != n_levels {
            return Err(contract(format!("pair {i} does not have {n_levels} levels")));
        }
        for l in 0..n_levels {
            if x.levels[l].shape() != y.levels[l].shape() {
                return Err(contract(format!("pair {i}: level {} shapes differ", l + 1)));
            }
            init.check_level(&x.levels[l], l + 1)?;
        }
    }
    let mut params = init;
    let last = params.config.final_activation;
    let mut losses = Vec::new();
    for l in 1..=n_levels {
        let mut rng = stage_rng(opts.seed, &format!("temporal/level{l}"));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 1..=opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let (x, y) = (&pairs[i].0.levels[l - 1], &pairs[i].1.levels[l - 1]);
                let (value, grads) = level_loss_and_grad(&params.levels[l - 1], x, y, last)
                    .map_err(|e| diverged(l, epoch, e))?;
                if !value.is_finite() {
                    return Err(diverged(l, epoch, Error::NonFinite { op: "mse" }));
                }
                total += value;
                for ((w, b), (gw, gb)) in params.levels[l - 1].iter_mut().zip(&grads) {
                    for (p, gr) in [(w, gw), (b, gb)] {
                        for (pv, &gg) in p.data_mut().iter_mut().zip(gr.data()) {
                            *pv = T::of(pv.as_f64() - opts.lr * gg.as_f64());
                        }
                        if !p.all_finite() {
                            return Err(diverged(l, epoch, Error::NonFinite { op: "sgd update" }));
                        }
                    }
                }
            }
            let m = total / pairs.len() as f64;
            log::info!("temporal level {l} epoch {epoch}: mse {m:.3e}");
            losses.push(LevelLoss { epoch, level: l, mse: m });
        }
    }
    Ok(TemporalTrained { params, losses })
}

fn diverged(level: usize, epoch: usize, e: Error) -> Error {
    Error::Diverged(format!("temporal level {level}, epoch {epoch}: {e}"))
}

const MAGIC: &[u8; 4] = b"VFTP";
const VERSION: u32 = 1;

/// `VFTP` checkpoint:
///
/// ```text
/// magic "VFTP", version u32 = 1, level count u32,
/// final activation u8 (0 relu, 1 linear),
/// per level: layers u32, width u32,
/// then per level, per layer: kernel [3,3,3,c,c] and bias [c] as f32
/// ```
///
/// Little-endian throughout.
pub fn to_bytes<T: Real>(p: &TemporalParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(p.config.levels.len(), "level count")?);
    out.push(match p.config.final_activation {
        FinalActivation::Relu => 0,
        FinalActivation::Linear => 1,
    });
    for s in &p.config.levels {
        put_u32(&mut out, to_u32(s.layers, "layer count")?);
        put_u32(&mut out, to_u32(s.width, "width")?);
    }
    for (w, b) in p.levels.iter().flatten() {
        put_f32s(&mut out, w.data().iter().map(|v| v.as_f64() as f32));
        put_f32s(&mut out, b.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TemporalParams<T>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let n = r.u32()? as usize;
    let final_activation = match r.u8()? {
        0 => FinalActivation::Relu,
        1 => FinalActivation::Linear,
        c => return Err(Error::Format(format!("unknown final activation code {c}"))),
    };
    let mut levels = Vec::new();
    for _ in 0..n {
        let layers = r.u32()? as usize;
        let width = r.u32()? as usize;
        if width == 0 || width > 1 << 16 {
            return Err(Error::DimOverflow(format!("temporal width {width}")));
        }
        levels.push(LevelSpec { layers, width });
    }
    let config = TemporalConfig {
        levels,
        final_activation,
    };
    let mut p = TemporalParams::<T>::zeros(config);
    for (w, b) in p.levels.iter_mut().flatten() {
        for t in [w, b] {
            let vals = r.f32_vec(t.numel())?;
            for (d, v) in t.data_mut().iter_mut().zip(vals) {
                *d = T::of(v as f64);
            }
        }
    }
    r.finish()?;
    Ok(p)
}

pub fn save<T: Real>(p: &TemporalParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(p)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<TemporalParams<T>> {
    from_bytes(&std::fs::read(path)?)
}
