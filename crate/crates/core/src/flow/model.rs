use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diffcore::linalg::random_orthogonal;
use crate::diffcore::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};

use super::layers::{
    actnorm_forward, actnorm_inverse, coupling_forward, coupling_inverse, invconv_forward,
    invconv_inverse_kernel, ActNorm, CouplingVars,
};
use super::squeeze::{squeeze_var, unsqueeze_var};
use super::{FlowConfig, LatentPyramid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standard deviation of the random normal init of the first two coupling layers.
const COUPLING_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone)]
struct StepLayout {
    an_bias: usize,
    an_logs: usize,
    invconv: usize,
    coupling: [usize; 6],
}

#[derive(Debug, Clone)]
struct LevelLayout {
    steps: Vec<StepLayout>,
    /// Kernel and bias of the split prior; absent on the top level.
    prior: Option<(usize, usize)>,
}

/// Parameter index map. The order of `names` is the checkpoint order.
#[derive(Debug, Clone)]
struct Layout {
    levels: Vec<LevelLayout>,
    top: Option<usize>,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Layout {
    fn build(cfg: &FlowConfig) -> Layout {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let w = cfg.width;
        let mut levels = Vec::new();
        for l in 1..=cfg.levels {
            let c = cfg.step_channels(l);
            let half = c / 2;
            let steps = (1..=cfg.depth)
                .map(|k| {
                    let p = format!("level{l}.step{k}");
                    StepLayout {
                        an_bias: add(format!("{p}.actnorm.bias"), vec![c]),
                        an_logs: add(format!("{p}.actnorm.logs"), vec![c]),
                        invconv: add(format!("{p}.invconv.weight"), vec![c, c]),
                        coupling: [
                            add(format!("{p}.coupling.w1"), vec![3, 3, 3, half, w]),
                            add(format!("{p}.coupling.b1"), vec![w]),
                            add(format!("{p}.coupling.w2"), vec![3, 3, 3, w, w]),
                            add(format!("{p}.coupling.b2"), vec![w]),
                            add(format!("{p}.coupling.w3"), vec![3, 3, 3, w, c]),
                            add(format!("{p}.coupling.b3"), vec![c]),
                        ],
                    }
                })
                .collect();
            let prior = (l < cfg.levels).then(|| {
                (
                    add(format!("level{l}.prior.w"), vec![3, 3, 3, half, c]),
                    add(format!("level{l}.prior.b"), vec![c]),
                )
            });
            levels.push(LevelLayout { steps, prior });
        }
        let top = cfg.learn_top.then(|| {
            let [s, _, _, c] = cfg.latent_shape(cfg.levels);
            add("top.prior".to_string(), vec![s, s, s, 2 * c])
        });
        Layout {
            levels,
            top,
            names,
            shapes,
        }
    }
}

/// `(name, shape)` of every parameter of `config`, in checkpoint order.
pub fn parameter_layout(config: &FlowConfig) -> Vec<(String, Vec<usize>)> {
    let layout = Layout::build(config);
    layout.names.into_iter().zip(layout.shapes).collect()
}

/// Lazily binds parameters as graph leaves, one node per parameter.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    fn new(n: usize) -> Self {
        Binder { vars: vec![None; n] }
    }

    fn get<T: Real>(&mut self, g: &mut Graph<T>, params: &[Tensor<T>], idx: usize) -> Var {
        *self.vars[idx].get_or_insert_with(|| g.param(params[idx].clone()))
    }

    /// Gradient per parameter in checkpoint order; zeros for unused ones.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(shapes)
            .map(|(v, s)| v.and_then(|v| grads.get(v).cloned()).unwrap_or_else(|| Tensor::zeros(s)))
            .collect()
    }
}

/// Nodes produced by [`Flow::encode_graph`].
pub struct Encoded {
    pub latents: Vec<Var>,
    /// Sum of every layer's log-determinant.
    pub logdet: Var,
    /// Gaussian log-density of the latents under the learned priors.
    pub log_prior: Var,
    /// `log_prior + logdet`.
    pub log_likelihood: Var,
}

/// The invertible multiscale generator.
#[derive(Debug, Clone)]
pub struct Flow<T> {
    config: FlowConfig,
    params: Vec<Tensor<T>>,
    layout: Layout,
    actnorm_initialized: bool,
}

impl<T: Real> Flow<T> {
    /// Fresh model: identity actnorm, random rotations, zero-output coupling
    /// and prior networks.
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let mut params: Vec<Tensor<T>> = layout.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let normal = Normal::new(0.0, COUPLING_INIT_STD).expect("valid std");
        for level in &layout.levels {
            for step in &level.steps {
                let c = layout.shapes[step.invconv][0];
                params[step.invconv] = Tensor::from_f64(&[c, c], &random_orthogonal(c, rng))?;
                for idx in [step.coupling[0], step.coupling[2]] {
                    params[idx] = Tensor::from_fn(&layout.shapes[idx], |_| T::of(normal.sample(rng)));
                }
            }
        }
        Ok(Flow {
            config,
            params,
            layout,
            actnorm_initialized: false,
        })
    }

    /// Builds a model around existing parameters (checkpoint order).
    pub fn from_parts(config: FlowConfig, params: Vec<Tensor<T>>, actnorm_initialized: bool) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        if params.len() != layout.shapes.len() {
            return Err(contract(format!(
                "flow expects {} parameter tensors, got {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        for ((p, s), name) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != s.as_slice() {
                return Err(contract(format!("parameter {name} has shape {:?}, expected {s:?}", p.shape())));
            }
        }
        Ok(Flow {
            config,
            params,
            layout,
            actnorm_initialized,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.layout.shapes.iter().map(Vec::as_slice).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn binder(&self) -> Binder {
        Binder::new(self.params.len())
    }

    pub fn cast<U: Real>(&self) -> Flow<U> {
        Flow {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
            actnorm_initialized: self.actnorm_initialized,
        }
    }

    fn coupling_vars(&self, g: &mut Graph<T>, b: &mut Binder, step: &StepLayout) -> CouplingVars {
        let [w1, b1, w2, b2, w3, b3] = step.coupling.map(|i| b.get(g, &self.params, i));
        CouplingVars { w1, b1, w2, b2, w3, b3 }
    }

    fn step_forward(&self, g: &mut Graph<T>, b: &mut Binder, l: usize, k: usize, h: Var) -> Result<(Var, Var)> {
        let step = &self.layout.levels[l - 1].steps[k];
        let bias = b.get(g, &self.params, step.an_bias);
        let logs = b.get(g, &self.params, step.an_logs);
        let (h, ld1) = actnorm_forward(g, h, bias, logs)?;
        let w = b.get(g, &self.params, step.invconv);
        let (h, ld2) = invconv_forward(g, h, w, &format!("level {l} step {}", k + 1))?;
        let cv = self.coupling_vars(g, b, step);
        let (h, ld3) = coupling_forward(g, h, &cv)?;
        let ld = g.add(ld1, ld2)?;
        let ld = g.add(ld, ld3)?;
        Ok((h, ld))
    }

    fn step_inverse(&self, g: &mut Graph<T>, b: &mut Binder, l: usize, k: usize, h: Var) -> Result<Var> {
        let step = &self.layout.levels[l - 1].steps[k];
        let cv = self.coupling_vars(g, b, step);
        let h = coupling_inverse(g, h, &cv)?;
        let kernel = invconv_inverse_kernel(&self.params[step.invconv], &format!("level {l} step {}", k + 1))?;
        let kv = g.input(kernel);
        let h = g.conv3d(h, kv, None)?;
        actnorm_inverse(g, h, &self.params[step.an_bias], &self.params[step.an_logs])
    }

    /// `(mean, log_scale)` of the latent emitted at split level `l`.
    fn split_prior(&self, g: &mut Graph<T>, b: &mut Binder, l: usize, pass: Var) -> Result<(Var, Var)> {
        let (wi, bi) = self.layout.levels[l - 1].prior.expect("split level has a prior");
        let w = b.get(g, &self.params, wi);
        let bias = b.get(g, &self.params, bi);
        let h = g.conv3d(pass, w, Some(bias))?;
        let half = g.shape(h)[3] / 2;
        Ok((g.slice_channels(h, 0, half)?, g.slice_channels(h, half, half)?))
    }

    fn top_prior(&self, g: &mut Graph<T>, b: &mut Binder) -> Result<(Var, Var)> {
        let shape = self.config.latent_shape(self.config.levels);
        match self.layout.top {
            Some(idx) => {
                let t = b.get(g, &self.params, idx);
                let c = shape[3];
                Ok((g.slice_channels(t, 0, c)?, g.slice_channels(t, c, c)?))
            }
            None => {
                let zero = g.input(Tensor::zeros(&shape));
                Ok((zero, zero))
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.config.input_shape();
        if x.shape() != want {
            return Err(contract(format!("flow input has shape {:?}, expected {want:?}", x.shape())));
        }
        Ok(())
    }

    /// Forward pass recorded on `g`.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &mut Binder, x: Var) -> Result<Encoded> {
        let want = self.config.input_shape();
        if g.shape(x) != want {
            return Err(contract(format!("flow input has shape {:?}, expected {want:?}", g.shape(x))));
        }
        let mut h = x;
        let mut logdet = g.input(Tensor::scalar(T::zero()));
        let mut log_prior = g.input(Tensor::scalar(T::zero()));
        let mut latents = Vec::with_capacity(self.config.levels);
        for l in 1..=self.config.levels {
            h = squeeze_var(g, h)?;
            for k in 0..self.config.depth {
                let (next, ld) = self.step_forward(g, b, l, k, h)?;
                h = next;
                logdet = g.add(logdet, ld)?;
            }
            if l < self.config.levels {
                let half = g.shape(h)[3] / 2;
                let pass = g.slice_channels(h, 0, half)?;
                let z = g.slice_channels(h, half, half)?;
                let (mean, logs) = self.split_prior(g, b, l, pass)?;
                let lp = gaussian_log_density(g, z, mean, logs)?;
                log_prior = g.add(log_prior, lp)?;
                latents.push(z);
                h = pass;
            } else {
                let (mean, logs) = self.top_prior(g, b)?;
                let lp = gaussian_log_density(g, h, mean, logs)?;
                log_prior = g.add(log_prior, lp)?;
                latents.push(h);
            }
        }
        let log_likelihood = g.add(log_prior, logdet)?;
        Ok(Encoded {
            latents,
            logdet,
            log_prior,
            log_likelihood,
        })
    }

    /// `z = G(x)` and the total log-determinant of the Jacobian.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(LatentPyramid<T>, f64)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut b = self.binder();
        let xv = g.input(x.clone());
        let enc = self.encode_graph(&mut g, &mut b, xv)?;
        let z = LatentPyramid::new(enc.latents.iter().map(|v| g.value(*v).clone()).collect());
        Ok((z, g.value(enc.logdet).item()?.as_f64()))
    }

    /// Exact `log p(x) = log p(z) + log |det dz/dx|` in nats.
    pub fn log_likelihood(&self, x: &Tensor<T>) -> Result<f64> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut b = self.binder();
        let xv = g.input(x.clone());
        let enc = self.encode_graph(&mut g, &mut b, xv)?;
        let ll = g.value(enc.log_likelihood).item()?.as_f64();
        if !ll.is_finite() {
            return Err(Error::NonFinite { op: "log_likelihood" });
        }
        Ok(ll)
    }

    /// `x = G^-1(z)`.
    pub fn decode(&self, z: &LatentPyramid<T>) -> Result<Tensor<T>> {
        z.check(&self.config)?;
        let mut g = Graph::new();
        let mut b = self.binder();
        let latents: Vec<Var> = z.levels.iter().map(|t| g.input(t.clone())).collect();
        let x = self.decode_graph(&mut g, &mut b, |_, _, _, l| Ok(latents[l - 1]))?;
        Ok(g.value(x).clone())
    }

    /// Top-down inverse pass. `latent(g, binder, passthrough, level)` supplies
    /// `z_l`; the passthrough is `None` on the top level.
    fn decode_graph(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        mut latent: impl FnMut(&mut Graph<T>, &mut Binder, Option<Var>, usize) -> Result<Var>,
    ) -> Result<Var> {
        let levels = self.config.levels;
        let mut h = latent(g, b, None, levels)?;
        for l in (1..=levels).rev() {
            if l < levels {
                let z = latent(g, b, Some(h), l)?;
                h = g.concat_channels(h, z)?;
            }
            for k in (0..self.config.depth).rev() {
                h = self.step_inverse(g, b, l, k, h)?;
            }
            h = unsqueeze_var(g, h)?;
        }
        Ok(h)
    }

    /// Draws `z ~ N(mean, (temperature * sigma)^2)` level by level from the
    /// learned priors and decodes it. Temperature 0 returns the prior modes.
    pub fn sample<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> Result<(LatentPyramid<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let mut b = self.binder();
        let mut drawn: Vec<Option<Tensor<T>>> = vec![None; self.config.levels];
        let x = self.decode_graph(&mut g, &mut b, |g, b, pass, l| {
            let (mean, logs) = match pass {
                None => self.top_prior(g, b)?,
                Some(p) => self.split_prior(g, b, l, p)?,
            };
            let (m, s) = (g.value(mean), g.value(logs));
            let z = Tensor::new(
                m.shape().to_vec(),
                m.data()
                    .iter()
                    .zip(s.data())
                    .map(|(&mu, &ls)| {
                        let eps: f64 = if temperature == 0.0 { 0.0 } else { rng.sample(StandardNormal) };
                        mu + T::of(temperature * eps) * ls.exp()
                    })
                    .collect(),
            )?;
            drawn[l - 1] = Some(z.clone());
            Ok(g.input(z))
        })?;
        let z = LatentPyramid::new(drawn.into_iter().map(|t| t.expect("every level drawn")).collect());
        Ok((z, g.value(x).clone()))
    }

    /// Data-dependent actnorm initialization: walks the forward pass and
    /// sets each actnorm so its output on `x` has zero mean and unit
    /// variance per channel.
    pub fn initialize_actnorm(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut b = self.binder();
        let mut h = g.input(x.clone());
        for l in 1..=self.config.levels {
            h = squeeze_var(&mut g, h)?;
            for k in 0..self.config.depth {
                let an = ActNorm::initialize_from(g.value(h));
                let step = &self.layout.levels[l - 1].steps[k];
                let (bi, li) = (step.an_bias, step.an_logs);
                self.params[bi] = an.bias;
                self.params[li] = an.log_scale;
                h = self.step_forward(&mut g, &mut b, l, k, h)?.0;
            }
            if l < self.config.levels {
                let half = g.shape(h)[3] / 2;
                h = g.slice_channels(h, 0, half)?;
            }
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    /// Marks actnorm as initialized without touching parameters.
    pub fn set_actnorm_initialized(&mut self, v: bool) {
        self.actnorm_initialized = v;
    }
}

/// `sum log N(z; mean, exp(logs)^2)` over all elements.
pub fn gaussian_log_density<T: Real>(g: &mut Graph<T>, z: Var, mean: Var, logs: Var) -> Result<Var> {
    let n = g.value(z).numel() as f64;
    let d = g.sub(z, mean)?;
    let neg = g.scale(logs, -1.0)?;
    let inv_sigma = g.exp(neg)?;
    let q = g.mul(d, inv_sigma)?;
    let q2 = g.mul(q, q)?;
    let quad = g.sum(q2)?;
    let quad = g.scale(quad, -0.5)?;
    let log_sigma = g.sum(logs)?;
    let lp = g.sub(quad, log_sigma)?;
    g.offset(lp, -0.5 * n * LN_2PI)
}
