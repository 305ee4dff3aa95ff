//! Reverse-mode automatic differentiation over a recorded op list.

use crate::error::{contract, Error, Result};

use super::kernels::{self, inverse_axes};
use super::linalg::{transpose, Lu};
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Trainable parameter leaf.
    Param,
    /// Data or constant leaf; gradients are still reported for it.
    Input,
    /// Result of an op.
    Derived,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clip(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    SliceChannels(Var, usize),
    ConcatChannels(Var, Var),
    Conv3d(Var, Var, Option<Var>),
    LogAbsDet(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    origin: Origin,
    needs_grad: bool,
}

/// Topologically ordered tape. Nodes are appended after their inputs, so the
/// reverse of insertion order is a valid backward schedule.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track_inputs: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_inputs: false,
        }
    }

    /// A graph that also propagates gradients to input leaves, used by the
    /// verification harness to differentiate with respect to data.
    pub fn with_input_grads() -> Self {
        Graph {
            nodes: Vec::new(),
            track_inputs: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, origin: Origin) -> Var {
        let needs_grad = origin == Origin::Param || self.track_inputs;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            origin,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Origin::Param)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Origin::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn origin(&self, v: Var) -> Origin {
        self.nodes[v.0].origin
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => unreachable!("leaves are added through param/input"),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddChannel(a, b)
            | Op::MulChannel(a, b)
            | Op::ConcatChannels(a, b) => self.needs(*a) || self.needs(*b),
            Op::Conv3d(x, w, b) => self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b)),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Clip(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SliceChannels(a, _)
            | Op::LogAbsDet(a) => self.needs(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            origin: Origin::Derived,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_with(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_with(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_with(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_with(self.value(a), self.value(b), "div", |x, y| x / y)?;
        self.push(y, Op::Div(a, b), "div")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let y = self.value(a).map(|v| v * k);
        self.push(y, Op::Scale(a, c), "scale")
    }

    /// Addition of a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let y = self.value(a).map(|v| v + k);
        self.push(y, Op::Offset(a), "offset")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| v.exp());
        self.push(y, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let y = x.map(|v| v.ln());
        self.push(y, Op::Log(a), "log")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(a), "relu")
    }

    /// Clamps to `[lo, hi]`; the gradient is zero wherever the input was clipped.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(contract(format!("clip bounds inverted: [{lo}, {hi}]")));
        }
        let (l, h) = (T::of(lo), T::of(hi));
        let y = self.value(a).map(|v| v.max(l).min(h));
        self.push(y, Op::Clip(a, lo, hi), "clip")
    }

    /// Sum of all elements, accumulated in 64-bit from first to last.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.sum_f64() / x.numel() as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(a), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        self.push(y, Op::Reshape(a), "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let y = kernels::permute(self.value(a), axes)?;
        self.push(y, Op::Permute(a, axes.to_vec()), "permute")
    }

    /// `x + b` with one bias per channel (the only broadcast supported).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = kernels::per_channel(self.value(x), self.value(b), |v, q| v + q)?;
        self.push(y, Op::AddChannel(x, b), "add_channel")
    }

    /// `x * s` with one scale per channel.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = kernels::per_channel(self.value(x), self.value(s), |v, q| v * q)?;
        self.push(y, Op::MulChannel(x, s), "mul_channel")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_channels(self.value(x), start, len)?;
        self.push(y, Op::SliceChannels(x, start), "slice_channels")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        self.push(y, Op::ConcatChannels(a, b), "concat_channels")
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(y, Op::Conv3d(x, w, b), "conv3d")
    }

    /// `ln |det W|` of a square matrix; `site` names the layer in errors.
    pub fn log_abs_det(&mut self, w: Var, site: &str) -> Result<Var> {
        let m = self.value(w);
        let n = match m.shape() {
            [r, c] if r == c => *r,
            s => return Err(contract(format!("log_abs_det needs a square matrix, got {s:?} at {site}"))),
        };
        let lu = Lu::new(&m.to_f64_vec(), n);
        let det = lu.det();
        if lu.is_singular() || det.abs() <= 1e-12 {
            return Err(Error::Singular {
                site: site.to_string(),
                det: det.abs(),
            });
        }
        self.push(Tensor::scalar(T::of(lu.log_abs_det())), Op::LogAbsDet(w), "log_abs_det")
    }

    /// Gradients of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip_with(g, bv, "mul'", |g, b| g * b)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip_with(g, av, "mul'", |g, a| g * a)?);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip_with(g, bv, "div'", |g, b| g / b)?);
                }
                if self.needs(*b) {
                    let gy = zip_with(g, y, "div'", |g, y| g * y)?;
                    self.accumulate(grads, *b, zip_with(&gy, bv, "div'", |t, b| -t / b)?);
                }
            }
            Op::Scale(a, c) => {
                let k = T::of(*c);
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, zip_with(g, y, "exp'", |g, y| g * y)?),
            Op::Log(a) => self.accumulate(grads, *a, zip_with(g, val(*a), "log'", |g, x| g / x)?),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip_with(g, y, "sigmoid'", |g, s| g * s * (T::one() - s))?)
            }
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                zip_with(g, val(*a), "relu'", |g, x| if x > T::zero() { g } else { T::zero() })?,
            ),
            Op::Clip(a, lo, hi) => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                self.accumulate(
                    grads,
                    *a,
                    zip_with(g, val(*a), "clip'", |g, x| if x >= l && x <= h { g } else { T::zero() })?,
                )
            }
            Op::Sum(a) => {
                let s = g.item()?;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = T::of(g.item()?.as_f64() / x.numel() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape(), s));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.clone().reshape(val(*a).shape())?),
            Op::Permute(a, axes) => self.accumulate(grads, *a, kernels::permute(g, &inverse_axes(axes))?),
            Op::AddChannel(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let sums = kernels::channel_sums(g);
                    self.accumulate(grads, *b, Tensor::new(vec![sums.len()], sums.into_iter().map(T::of).collect())?);
                }
            }
            Op::MulChannel(x, s) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, kernels::per_channel(g, val(*s), |g, q| g * q)?);
                }
                if self.needs(*s) {
                    let gx = zip_with(g, val(*x), "mul_channel'", |g, x| g * x)?;
                    let sums = kernels::channel_sums(&gx);
                    self.accumulate(grads, *s, Tensor::new(vec![sums.len()], sums.into_iter().map(T::of).collect())?);
                }
            }
            Op::SliceChannels(x, start) => {
                let xv = val(*x);
                let c = xv.channels();
                let len = g.channels();
                let mut full = vec![T::zero(); xv.numel()];
                for (dst, src) in full.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), full)?);
            }
            Op::ConcatChannels(a, b) => {
                let ca = val(*a).channels();
                let cb = val(*b).channels();
                self.accumulate(grads, *a, kernels::slice_channels(g, 0, ca)?);
                self.accumulate(grads, *b, kernels::slice_channels(g, ca, cb)?);
            }
            Op::Conv3d(x, w, b) => {
                let need_b = b.is_some_and(|b| self.needs(b));
                let cg = kernels::conv3d_backward(val(*x), val(*w), g, self.needs(*x), self.needs(*w), need_b)?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = cg.kernel {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::LogAbsDet(w) => {
                let m = val(*w);
                let n = m.shape()[0];
                let inv_t = transpose(&Lu::new(&m.to_f64_vec(), n).inverse(), n);
                let s = g.item()?.as_f64();
                self.accumulate(
                    grads,
                    *w,
                    Tensor::new(vec![n, n], inv_t.into_iter().map(|v| T::of(v * s)).collect())?,
                );
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: gradients of leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Like [`get`](Self::get) but substitutes zeros of the leaf's shape.
    pub fn get_or_zeros(&self, v: Var, graph: &Graph<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [6.0]);
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3], &[380.0, -2.0, 3.0]).unwrap());
        let c = g.clip(x, 0.0, 255.0).unwrap();
        assert_eq!(g.value(c).data(), [255.0, 0.0, 3.0]);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), [380.0, 0.0, 3.0]);
        let v = g.input(Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.mean(v).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(&[1], &[100.0]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.exp(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn clip_gradient_is_zero_outside_range() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[-1.0, 0.5, 2.0]).unwrap());
        let c = g.clip(x, 0.0, 1.0).unwrap();
        let s = g.sum(c).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), [0.0, 1.0, 0.0]);
    }

    /// Builds a scalar from every differentiable op so one finite-difference
    /// sweep covers them all.
    fn composite(params: &[Tensor<f64>]) -> (Graph<f64>, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let (x, w, b, m, cs) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
        let y = g.conv3d(x, w, Some(b)).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.mul_channel(y, cs).unwrap();
        let y = g.add_channel(y, cs).unwrap();
        let sq = g.permute(y, &[3, 0, 2, 1]).unwrap();
        let sq = g.reshape(sq, &[y_numel(&g, y)]).unwrap();
        let e = g.scale(sq, 0.3).unwrap();
        let e = g.exp(e).unwrap();
        let s = g.sigmoid(y).unwrap();
        let l = g.log(s).unwrap();
        let a = g.slice_channels(y, 1, 2).unwrap();
        let bb = g.slice_channels(y, 0, 1).unwrap();
        let cat = g.concat_channels(a, bb).unwrap();
        let prod = g.mul(cat, y).unwrap();
        let q = g.div(prod, s).unwrap();
        let d = g.sub(q, l).unwrap();
        let d = g.clip(d, -1.5, 1.5).unwrap();
        let d = g.offset(d, 0.25).unwrap();
        let ld = g.log_abs_det(m, "test").unwrap();
        let s1 = g.sum(e).unwrap();
        let s2 = g.mean(d).unwrap();
        let t = g.add(s1, s2).unwrap();
        let out = g.add(t, ld).unwrap();
        (g, out, vars)
    }

    fn y_numel(g: &Graph<f64>, y: Var) -> usize {
        g.value(y).numel()
    }

    #[test]
    fn composite_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![
            random(&[3, 2, 4, 2], &mut rng),
            random(&[3, 3, 3, 2, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        params[3].data_mut()[0] += 3.0;
        let (g, out, vars) = composite(&params);
        let grads = g.backward(out).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var, &g);
            for j in 0..params[pi].numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[j] -= h;
                let (gp, op, _) = composite(&plus);
                let (gm, om, _) = composite(&minus);
                let fd = (gp.value(op).item().unwrap() - gm.value(om).item().unwrap()) / (2.0 * h);
                let an = analytic.data()[j];
                let err = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-3);
                // clip and relu kinks are avoided by the random draw; tolerate exact kinks
                assert!(err < 1e-5, "param {pi}[{j}]: analytic {an} vs fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
