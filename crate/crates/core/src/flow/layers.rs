//! The three layers of a flow step, in graph form and as standalone values.
//!
//! Every forward function returns the output together with a scalar
//! log-determinant node. Inverses take parameters as plain tensors because
//! decoding is never differentiated.

use crate::diffcore::linalg::Lu;
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Voxel count `D * H * W` of a `[d, h, w, c]` node.
fn spatial<T: Real>(g: &Graph<T>, x: Var) -> usize {
    let s = g.shape(x);
    s[..s.len() - 1].iter().product()
}

/// `y = s * (x + b)` per channel with `s = exp(logs)`.
pub(crate) fn actnorm_forward<T: Real>(g: &mut Graph<T>, x: Var, bias: Var, logs: Var) -> Result<(Var, Var)> {
    let n = spatial(g, x) as f64;
    let s = g.exp(logs)?;
    let shifted = g.add_channel(x, bias)?;
    let y = g.mul_channel(shifted, s)?;
    let total = g.sum(logs)?;
    let logdet = g.scale(total, n)?;
    Ok((y, logdet))
}

pub(crate) fn actnorm_inverse<T: Real>(g: &mut Graph<T>, y: Var, bias: &Tensor<T>, logs: &Tensor<T>) -> Result<Var> {
    let inv_scale = g.input(logs.map(|v| (-v).exp()));
    let neg_bias = g.input(bias.map(|v| -v));
    let unscaled = g.mul_channel(y, inv_scale)?;
    g.add_channel(unscaled, neg_bias)
}

/// Per-voxel channel mixing `y = W x` as a 1x1x1 convolution.
pub(crate) fn invconv_forward<T: Real>(g: &mut Graph<T>, x: Var, w: Var, site: &str) -> Result<(Var, Var)> {
    let c = g.shape(w)[0];
    let n = spatial(g, x) as f64;
    let wt = g.permute(w, &[1, 0])?;
    let kernel = g.reshape(wt, &[1, 1, 1, c, c])?;
    let y = g.conv3d(x, kernel, None)?;
    let lad = g.log_abs_det(w, site)?;
    let logdet = g.scale(lad, n)?;
    Ok((y, logdet))
}

/// Kernel of the inverse mixing, `W^-1` laid out as `[1, 1, 1, c_in, c_out]`.
pub(crate) fn invconv_inverse_kernel<T: Real>(w: &Tensor<T>, site: &str) -> Result<Tensor<T>> {
    let c = w.shape()[0];
    let lu = Lu::new(&w.to_f64_vec(), c);
    let det = lu.det();
    if lu.is_singular() || det.abs() <= 1e-12 {
        return Err(Error::Singular {
            site: site.to_string(),
            det: det.abs(),
        });
    }
    let inv = lu.inverse();
    // kernel[ci][co] = inv[co][ci]
    Tensor::new(
        vec![1, 1, 1, c, c],
        (0..c * c).map(|i| T::of(inv[(i % c) * c + i / c])).collect(),
    )
}

/// Parameter nodes of one coupling network.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CouplingVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

const SCALE_OFFSET: f64 = 2.0;

/// Returns `(shift, s)` with `s = sigmoid(raw + 2)`.
fn coupling_net<T: Real>(g: &mut Graph<T>, xa: Var, p: &CouplingVars) -> Result<(Var, Var)> {
    let h = g.conv3d(xa, p.w1, Some(p.b1))?;
    let h = g.relu(h)?;
    let h = g.conv3d(h, p.w2, Some(p.b2))?;
    let h = g.relu(h)?;
    let h = g.conv3d(h, p.w3, Some(p.b3))?;
    let half = g.shape(h)[3] / 2;
    let shift = g.slice_channels(h, 0, half)?;
    let raw = g.slice_channels(h, half, half)?;
    let raw = g.offset(raw, SCALE_OFFSET)?;
    let s = g.sigmoid(raw)?;
    Ok((shift, s))
}

fn halves<T: Real>(g: &Graph<T>, x: Var) -> Result<usize> {
    let c = g.shape(x)[3];
    if !c.is_multiple_of(2) {
        return Err(contract(format!("affine coupling needs an even channel count, got {:?}", g.shape(x))));
    }
    Ok(c / 2)
}

/// `y_a = x_a`, `y_b = s * x_b + shift` with `(shift, s)` from `net(x_a)`.
pub(crate) fn coupling_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &CouplingVars) -> Result<(Var, Var)> {
    let half = halves(g, x)?;
    let xa = g.slice_channels(x, 0, half)?;
    let xb = g.slice_channels(x, half, half)?;
    let (shift, s) = coupling_net(g, xa, p)?;
    let scaled = g.mul(s, xb)?;
    let yb = g.add(scaled, shift)?;
    let y = g.concat_channels(xa, yb)?;
    let log_s = g.log(s)?;
    let logdet = g.sum(log_s)?;
    Ok((y, logdet))
}

pub(crate) fn coupling_inverse<T: Real>(g: &mut Graph<T>, y: Var, p: &CouplingVars) -> Result<Var> {
    let half = halves(g, y)?;
    let ya = g.slice_channels(y, 0, half)?;
    let yb = g.slice_channels(y, half, half)?;
    let (shift, s) = coupling_net(g, ya, p)?;
    let centred = g.sub(yb, shift)?;
    let xb = g.div(centred, s)?;
    g.concat_channels(ya, xb)
}

/// Per-channel affine normalization with data-dependent initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm<T> {
    pub bias: Tensor<T>,
    pub log_scale: Tensor<T>,
}

impl<T: Real> ActNorm<T> {
    pub fn identity(channels: usize) -> Self {
        ActNorm {
            bias: Tensor::zeros(&[channels]),
            log_scale: Tensor::zeros(&[channels]),
        }
    }

    /// From explicit scales; a zero scale is not invertible.
    pub fn from_scale(scale: &[f64], bias: &[f64]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(contract("actnorm scale and bias lengths differ"));
        }
        if let Some(c) = scale.iter().position(|s| *s == 0.0) {
            return Err(contract(format!("actnorm scale of channel {c} is zero")));
        }
        let n = scale.len();
        Ok(ActNorm {
            bias: Tensor::from_f64(&[n], bias)?,
            log_scale: Tensor::from_f64(&[n], &scale.iter().map(|s| s.abs().ln()).collect::<Vec<_>>())?,
        })
    }

    /// Sets bias and scale so that `x` maps to zero mean and unit variance
    /// per channel.
    pub fn initialize_from(x: &Tensor<T>) -> Self {
        let c = x.channels();
        let n = (x.numel() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        ActNorm {
            bias: Tensor::from_fn(&[c], |i| T::of(-mean[i])),
            log_scale: Tensor::from_fn(&[c], |i| T::of(-((var[i] / n).sqrt() + 1e-6).ln())),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let b = g.input(self.bias.clone());
        let l = g.input(self.log_scale.clone());
        let (y, ld) = actnorm_forward(&mut g, xv, b, l)?;
        Ok((g.value(y).clone(), g.value(ld).item()?.as_f64()))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let x = actnorm_inverse(&mut g, yv, &self.bias, &self.log_scale)?;
        Ok(g.value(x).clone())
    }
}

/// Invertible 1x1x1 convolution `y = W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvConv<T> {
    /// `[c_out, c_in]` mixing matrix.
    pub weight: Tensor<T>,
}

impl<T: Real> InvConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let w = g.input(self.weight.clone());
        let (y, ld) = invconv_forward(&mut g, xv, w, "invconv")?;
        Ok((g.value(y).clone(), g.value(ld).item()?.as_f64()))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let kernel = invconv_inverse_kernel(&self.weight, "invconv")?;
        crate::diffcore::kernels::conv3d(y, &kernel, None)
    }
}

/// Affine coupling with a three-layer convolutional network.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling<T> {
    /// `[w1, b1, w2, b2, w3, b3]`.
    pub params: [Tensor<T>; 6],
}

impl<T: Real> AffineCoupling<T> {
    /// Zero-initialized final layer: shift 0 and scale `sigmoid(2)` everywhere.
    pub fn zero_init(channels: usize, width: usize, first_layers: impl FnMut(usize) -> T + Clone) -> Self {
        let half = channels / 2;
        AffineCoupling {
            params: [
                Tensor::from_fn(&[3, 3, 3, half, width], first_layers.clone()),
                Tensor::zeros(&[width]),
                Tensor::from_fn(&[3, 3, 3, width, width], first_layers),
                Tensor::zeros(&[width]),
                Tensor::zeros(&[3, 3, 3, width, channels]),
                Tensor::zeros(&[channels]),
            ],
        }
    }

    fn bind(&self, g: &mut Graph<T>) -> CouplingVars {
        let [w1, b1, w2, b2, w3, b3] = self.params.clone().map(|t| g.input(t));
        CouplingVars { w1, b1, w2, b2, w3, b3 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let p = self.bind(&mut g);
        let (y, ld) = coupling_forward(&mut g, xv, &p)?;
        Ok((g.value(y).clone(), g.value(ld).item()?.as_f64()))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let p = self.bind(&mut g);
        let x = coupling_inverse(&mut g, yv, &p)?;
        Ok(g.value(x).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::linalg::random_orthogonal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    /// Dense Jacobian of `f` at `x` by central differences, then its
    /// log|det| via nalgebra.
    fn fd_log_abs_det(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>) -> f64 {
        let n = x.numel();
        let h = 1e-5;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let (yp, ym) = (f(&xp), f(&xm));
            for i in 0..n {
                jac[(i, j)] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn actnorm_identity_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 4, 4, 1], &mut rng, 1.0);
        let (y, ld) = ActNorm::identity(1).forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        let an = ActNorm::<f64>::from_scale(&[2.0], &[0.0]).unwrap();
        let (y, ld) = an.forward(&x).unwrap();
        assert!((ld - 64.0 * 2f64.ln()).abs() < 1e-12);
        assert!(an.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        assert!(ActNorm::<f64>::from_scale(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn actnorm_data_init_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::from_fn(&[4, 4, 4, 3], |i| (rng.random_range(-1.0..1.0) * (1 + i % 3) as f64 + 0.7) as f32);
        let an = ActNorm::initialize_from(&x);
        let (y, _) = an.forward(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).map(|v| *v as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((v - 1.0).abs() < 1e-2, "var {v}");
        }
    }

    #[test]
    fn invconv_identity_swap_and_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 2, 2], &mut rng, 1.0);
        let id = InvConv {
            weight: Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        let (y, ld) = id.forward(&x).unwrap();
        assert_eq!((y, ld), (x.clone(), 0.0));

        let swap = InvConv {
            weight: Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        let (y, ld) = swap.forward(&x).unwrap();
        assert_eq!(ld, 0.0);
        for v in 0..8 {
            assert_eq!(y.data()[2 * v], x.data()[2 * v + 1]);
            assert_eq!(y.data()[2 * v + 1], x.data()[2 * v]);
        }

        let w = InvConv {
            weight: random(&[2, 2], &mut rng, 1.0),
        };
        let (y, ld) = w.forward(&x).unwrap();
        let oracle = fd_log_abs_det(|t| w.forward(t).unwrap().0, &x);
        assert!((ld - oracle).abs() < 1e-6, "{ld} vs {oracle}");
        assert!(w.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn singular_invconv_is_rejected() {
        let w = InvConv {
            weight: Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 2.0, 4.0]).unwrap(),
        };
        let x = Tensor::zeros(&[2, 2, 2, 2]);
        assert!(matches!(w.forward(&x), Err(Error::Singular { .. })));
        assert!(matches!(w.inverse(&x), Err(Error::Singular { .. })));
    }

    #[test]
    fn zero_init_coupling_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 2, 2, 4], &mut rng, 1.0);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let c = AffineCoupling::zero_init(4, 6, move |_| r2.random_range(-0.1..0.1));
        let (y, ld) = c.forward(&x).unwrap();
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((ld - 16.0 * s2.ln()).abs() < 1e-10);
        for v in 0..8 {
            for ch in 0..4 {
                let want = if ch < 2 { x.data()[v * 4 + ch] } else { s2 * x.data()[v * 4 + ch] };
                assert!((y.data()[v * 4 + ch] - want).abs() < 1e-12);
            }
        }
        assert!(c.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        assert!(AffineCoupling::zero_init(3, 2, |_| 0.0f64).forward(&Tensor::zeros(&[2, 2, 2, 3])).is_err());
    }

    #[test]
    fn random_coupling_inverse_and_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 2, 2, 2], &mut rng, 1.0);
        let mut c = AffineCoupling::zero_init(2, 3, |_| 0.0f64);
        for p in c.params.iter_mut() {
            *p = random(p.shape(), &mut rng, 0.5);
        }
        let (y, ld) = c.forward(&x).unwrap();
        assert!(c.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        let oracle = fd_log_abs_det(|t| c.forward(t).unwrap().0, &x);
        assert!((ld - oracle).abs() < 1e-6, "{ld} vs {oracle}");

        let c32 = AffineCoupling {
            params: c.params.clone().map(|t| t.cast::<f32>()),
        };
        let x32 = x.cast::<f32>();
        let (y32, _) = c32.forward(&x32).unwrap();
        assert!(c32.inverse(&y32).unwrap().max_abs_diff(&x32).unwrap() < 1e-4);
    }

    #[test]
    fn orthogonal_invconv_has_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_orthogonal(8, &mut rng);
        let w = InvConv {
            weight: Tensor::<f64>::from_f64(&[8, 8], &q).unwrap(),
        };
        let (_, ld) = w.forward(&Tensor::zeros(&[2, 2, 2, 8])).unwrap();
        assert!(ld.abs() < 1e-9);
    }
}
