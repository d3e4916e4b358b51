//! Conditioned MLP noise predictor `ε_θ(x_t, t, c)`.
//!
//! The input is `concat(x_t, c, emb(t / T))` where `emb` is a sinusoidal
//! embedding. Hidden layers use a smooth activation, the output layer is
//! linear with dimension `d`. All parameters live in one flat vector laid
//! out layer by layer as `W` (row-major, `out × in`) followed by `b`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{check_dim, Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of the denoiser network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub x_dim: usize,
    pub cond_dim: usize,
    /// Width of the sinusoidal time embedding; must be even.
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Diffusion step count `T`, used to normalize `t`.
    pub horizon: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 {
            return Err(Error::invalid("arch", "x_dim must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::invalid("arch", "time_dim must be even"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("arch", "hidden widths must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("arch", "horizon must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.x_dim + self.cond_dim + self.time_dim
    }

    /// `(out, in)` for every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.x_dim, fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Sinusoidal features of `t / horizon` at frequencies `π·2^k`.
pub fn time_embedding(t: usize, horizon: usize, dim: usize) -> Vec<f64> {
    let s = t as f64 / horizon as f64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = PI * libm::ldexp(1.0, k as i32);
        out[k] = libm::sin(w * s);
        out[half + k] = libm::cos(w * s);
    }
    out
}

/// Flat parameter vector plus the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Arch,
    theta: Vec<f64>,
}

/// A gradient with the same layout as [`DenoiserParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        math::norm_sq(&self.0)
    }

    pub fn scaled(&self, k: f64) -> GradVector {
        GradVector(self.0.iter().map(|g| g * k).collect())
    }

    pub fn is_finite(&self) -> bool {
        math::all_finite(&self.0)
    }
}

pub fn init_params<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut theta = Vec::with_capacity(arch.param_count());
    for (out, fan_in) in arch.layer_shapes() {
        let scale = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        theta.extend((0..out * fan_in).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
        theta.extend(core::iter::repeat_n(0.0, out));
    }
    DenoiserParams::new(arch.clone(), theta)
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the network input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Adds `scale · ∇_θ ⟨upstream, output⟩` into `grad`.
    pub fn accumulate(
        &self,
        params: &DenoiserParams,
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        check_dim("backward upstream", params.arch.x_dim, upstream.len())?;
        check_dim("gradient buffer", params.theta.len(), grad.len())?;
        let shapes = params.arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (o, i) in &shapes {
            offsets.push(off);
            off += o * i + o;
        }
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
        for l in (0..shapes.len()).rev() {
            let (out, fan_in) = shapes[l];
            let w_off = offsets[l];
            let b_off = w_off + out * fan_in;
            let a_prev = &self.acts[l];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(a_prev) {
                    *g += dj * a;
                }
                grad[b_off + j] += dj;
            }
            if l > 0 {
                let w = &params.theta[w_off..b_off];
                let mut prev = vec![0.0; fan_in];
                for (j, &dj) in delta.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    for (p, wji) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                        *p += wji * dj;
                    }
                }
                let act = params.arch.activation;
                for (p, a) in prev.iter_mut().zip(a_prev) {
                    *p *= act.derivative_from_output(*a);
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

impl DenoiserParams {
    pub fn new(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_dim("parameter vector", arch.param_count(), theta.len())?;
        if !math::all_finite(&theta) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn input(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        check_dim("denoiser x_t", self.arch.x_dim, x_t.len())?;
        check_dim("denoiser condition", self.arch.cond_dim, c.len())?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x_t);
        input.extend_from_slice(c);
        input.extend(time_embedding(t, self.arch.horizon, self.arch.time_dim));
        Ok(input)
    }

    /// Forward pass keeping the activations needed for [`Trace::accumulate`].
    pub fn trace(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Trace> {
        let shapes = self.arch.layer_shapes();
        let mut acts = Vec::with_capacity(shapes.len());
        acts.push(self.input(x_t, t, c)?);
        let mut off = 0;
        let last = shapes.len() - 1;
        let mut output = Vec::new();
        for (l, &(out, fan_in)) in shapes.iter().enumerate() {
            let w = &self.theta[off..off + out * fan_in];
            let b = &self.theta[off + out * fan_in..off + out * fan_in + out];
            off += out * fan_in + out;
            let a_prev = acts.last().expect("input pushed above");
            let z: Vec<f64> = (0..out)
                .map(|j| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    b[j] + row.iter().zip(a_prev).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            if l == last {
                output = z;
            } else {
                let act = self.arch.activation;
                acts.push(z.into_iter().map(|v| act.apply(v)).collect());
            }
        }
        Ok(Trace { acts, output })
    }

    pub fn forward(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x_t, t, c)?.output)
    }

    /// `∇_θ ⟨upstream, ε_θ(x_t, t, c)⟩`.
    pub fn backward(&self, x_t: &[f64], t: usize, c: &[f64], upstream: &[f64]) -> Result<GradVector> {
        let trace = self.trace(x_t, t, c)?;
        let mut g = GradVector::zeros(self.theta.len());
        trace.accumulate(self, upstream, 1.0, &mut g.0)?;
        Ok(g)
    }
}

impl NoisePredictor for DenoiserParams {
    fn x_dim(&self) -> usize {
        self.arch.x_dim
    }

    fn predict(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        self.forward(x_t, t, c)
    }
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &DenoiserParams, grad: &GradVector, lr: f64) -> Result<DenoiserParams> {
    let mut next = params.clone();
    Sgd::new(0.0).step(&mut next, grad, lr)?;
    Ok(next)
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grad: &GradVector, lr: f64) -> Result<()> {
        check_dim("gradient", params.theta.len(), grad.len())?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning rate", alloc::format!("{lr}")));
        }
        if self.momentum == 0.0 {
            for (p, g) in params.theta.iter_mut().zip(&grad.0) {
                *p -= lr * g;
            }
        } else {
            if self.velocity.len() != grad.len() {
                self.velocity = vec![0.0; grad.len()];
            }
            for ((p, v), g) in params.theta.iter_mut().zip(&mut self.velocity).zip(&grad.0) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::seeded;

    fn arch(hidden: Vec<usize>) -> Arch {
        Arch {
            x_dim: 2,
            cond_dim: 2,
            time_dim: 4,
            hidden,
            activation: Activation::Tanh,
            horizon: 100,
        }
    }

    #[test]
    fn param_count_from_layer_shapes() {
        // (16×8 + 16) + (16×16 + 16) + (2×16 + 2)
        assert_eq!(arch(vec![16, 16]).param_count(), 144 + 272 + 34);
        assert_eq!(arch(vec![]).param_count(), 2 * 8 + 2);
        let p = init_params(&arch(vec![16, 16]), &mut seeded(1)).unwrap();
        assert_eq!(p.len(), 450);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(&arch(vec![5]), &mut seeded(4)).unwrap();
        let b = init_params(&arch(vec![5]), &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        // hidden bias block sits after the 5×8 weight block
        assert!(a.theta()[40..45].iter().all(|v| *v == 0.0));
        assert!(a.theta()[..40].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let ar = arch(vec![3, 3]);
        let p = DenoiserParams::new(ar.clone(), vec![0.0; ar.param_count()]).unwrap();
        assert_eq!(p.forward(&[1.0, 2.0], 5, &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_identity_on_x() {
        let ar = arch(vec![]);
        let mut theta = vec![0.0; ar.param_count()];
        theta[0] = 1.0; // W[0][0]
        theta[8 + 1] = 1.0; // W[1][1]
        let p = DenoiserParams::new(ar, theta).unwrap();
        assert_eq!(p.forward(&[0.25, -3.0], 17, &[9.0, 9.0]).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn linear_layer_gradient_is_input_row() {
        let ar = arch(vec![]);
        let p = init_params(&ar, &mut seeded(2)).unwrap();
        let (x, c, t) = ([0.5, -1.0], [2.0, 0.1], 30);
        let g = p.backward(&x, t, &c, &[0.0, 1.0]).unwrap();
        let mut input = vec![0.5, -1.0, 2.0, 0.1];
        input.extend(time_embedding(t, 100, 4));
        assert!(g.0[..8].iter().all(|v| *v == 0.0));
        assert_eq!(&g.0[8..16], input.as_slice());
        assert_eq!(&g.0[16..], &[0.0, 1.0]);
        let zero = p.backward(&x, t, &c, &[0.0, 0.0]).unwrap();
        assert!(zero.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let p = init_params(&arch(vec![4]), &mut seeded(2)).unwrap();
        assert!(p.forward(&[1.0], 1, &[0.0, 0.0]).is_err());
        assert!(p.forward(&[1.0, 1.0], 1, &[0.0]).is_err());
        assert!(p.backward(&[1.0, 1.0], 1, &[0.0, 0.0], &[1.0]).is_err());
        assert!(DenoiserParams::new(arch(vec![4]), vec![0.0; 3]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let ar = Arch {
            x_dim: 1,
            cond_dim: 0,
            time_dim: 0,
            hidden: vec![],
            activation: Activation::Tanh,
            horizon: 1,
        };
        let p = DenoiserParams::new(ar, vec![1.0, 1.0]).unwrap();
        let g = GradVector(vec![1.0, -1.0]);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().theta(), &[0.5, 1.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let bad = GradVector(vec![f64::NAN, 0.0]);
        assert!(matches!(sgd_step(&p, &bad, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embedding_shape() {
        let e = time_embedding(50, 100, 6);
        assert_eq!(e.len(), 6);
        assert!((e[0] - 1.0).abs() < 1e-15); // sin(π/2)
        assert!(e[3].abs() < 1e-15); // cos(π/2)
    }
}
