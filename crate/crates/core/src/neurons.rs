//! Neuron layers defined by a convex Lagrangian.
//!
//! The activation is the gradient of the Lagrangian and the layer energy is
//! its Legendre dual `<x, x_hat> - L(x)`. A layer may be split into `groups`
//! equal rows (tokens); the Lagrangian then acts on each row independently.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_positive, AmError, Result};
use crate::numeric::{dot, log_sum_exp_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lagrangian {
    /// 1/2 |x|^2, identity activation.
    Quadratic,
    /// (1/beta) sum log cosh(beta x), tanh activation.
    LogCosh { beta: f64 },
    /// D gamma sqrt(var(x) + eps) + sum delta_j x_j, layer-norm activation.
    /// An empty `delta` means zero bias.
    LayerNorm {
        gamma: f64,
        delta: Vec<f64>,
        eps: f64,
    },
    /// (1/beta) log sum exp(beta x), softmax activation.
    Softmax { beta: f64 },
}

impl Lagrangian {
    pub fn layer_norm(gamma: f64) -> Self {
        Lagrangian::LayerNorm {
            gamma,
            delta: Vec::new(),
            eps: 1e-5,
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        match self {
            Lagrangian::Quadratic => Ok(()),
            Lagrangian::LogCosh { beta } | Lagrangian::Softmax { beta } => {
                check_positive(*beta, "beta")
            }
            Lagrangian::LayerNorm { gamma, delta, eps } => {
                // convexity needs gamma > 0
                check_positive(*gamma, "layer-norm gamma")?;
                check_positive(*eps, "layer-norm eps")?;
                if !delta.is_empty() {
                    check_len(width, delta.len())?;
                }
                Ok(())
            }
        }
    }

    fn lagrangian_row(&self, x: &[f64]) -> f64 {
        match self {
            Lagrangian::Quadratic => 0.5 * dot(x, x),
            Lagrangian::LogCosh { beta } => x.iter().map(|&v| log_cosh(beta * v) / beta).sum(),
            Lagrangian::LayerNorm { gamma, delta, eps } => {
                let d = x.len() as f64;
                let (_, var) = mean_var(x);
                let bias = if delta.is_empty() { 0.0 } else { dot(delta, x) };
                d * gamma * (var + eps).sqrt() + bias
            }
            Lagrangian::Softmax { beta } => {
                let z: Vec<f64> = x.iter().map(|v| beta * v).collect();
                log_sum_exp_weights(&z).0 / beta
            }
        }
    }

    fn activation_row(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Lagrangian::Quadratic => out.copy_from_slice(x),
            Lagrangian::LogCosh { beta } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = (beta * v).tanh();
                }
            }
            Lagrangian::LayerNorm { gamma, delta, eps } => {
                let (mean, var) = mean_var(x);
                let s = (var + eps).sqrt();
                for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
                    *o = gamma * (v - mean) / s + if delta.is_empty() { 0.0 } else { delta[j] };
                }
            }
            Lagrangian::Softmax { beta } => {
                let z: Vec<f64> = x.iter().map(|v| beta * v).collect();
                out.copy_from_slice(&log_sum_exp_weights(&z).1);
            }
        }
    }

    /// Hessian of the row Lagrangian, row-major w x w.
    fn hessian_row(&self, x: &[f64]) -> Vec<f64> {
        let w = x.len();
        let mut h = vec![0.0; w * w];
        match self {
            Lagrangian::Quadratic => {
                for i in 0..w {
                    h[i * w + i] = 1.0;
                }
            }
            Lagrangian::LogCosh { beta } => {
                for i in 0..w {
                    let t = (beta * x[i]).tanh();
                    h[i * w + i] = beta * (1.0 - t * t);
                }
            }
            Lagrangian::LayerNorm { gamma, eps, .. } => {
                let (mean, var) = mean_var(x);
                let s2 = var + eps;
                let s = s2.sqrt();
                let d = w as f64;
                for i in 0..w {
                    for j in 0..w {
                        let kron = if i == j { 1.0 } else { 0.0 };
                        let ui = x[i] - mean;
                        let uj = x[j] - mean;
                        h[i * w + j] = gamma / s * (kron - 1.0 / d - ui * uj / (d * s2));
                    }
                }
            }
            Lagrangian::Softmax { beta } => {
                let z: Vec<f64> = x.iter().map(|v| beta * v).collect();
                let p = log_sum_exp_weights(&z).1;
                for i in 0..w {
                    for j in 0..w {
                        let kron = if i == j { p[i] } else { 0.0 };
                        h[i * w + j] = beta * (kron - p[i] * p[j]);
                    }
                }
            }
        }
        h
    }
}

fn log_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

/// A layer of `dim` neurons, split into `groups` rows of equal width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronLayer {
    pub name: String,
    pub dim: usize,
    pub groups: usize,
    pub lagrangian: Lagrangian,
    /// Time constant of the layer dynamics.
    pub tau: f64,
}

impl NeuronLayer {
    pub fn new(name: impl Into<String>, dim: usize, lagrangian: Lagrangian) -> Result<Self> {
        Self::grouped(name, dim, 1, lagrangian)
    }

    pub fn grouped(
        name: impl Into<String>,
        dim: usize,
        groups: usize,
        lagrangian: Lagrangian,
    ) -> Result<Self> {
        if dim == 0 || groups == 0 || dim % groups != 0 {
            return Err(AmError::InvalidDimension(format!(
                "layer of {dim} neurons cannot be split into {groups} equal groups"
            )));
        }
        lagrangian.validate(dim / groups)?;
        Ok(Self {
            name: name.into(),
            dim,
            groups,
            lagrangian,
            tau: 1.0,
        })
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        check_positive(tau, "tau")?;
        self.tau = tau;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.dim / self.groups
    }

    fn rows<'a>(&self, x: &'a [f64]) -> std::slice::ChunksExact<'a, f64> {
        x.chunks_exact(self.width())
    }

    pub fn lagrangian_value(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim, x.len())?;
        Ok(self
            .rows(x)
            .map(|r| self.lagrangian.lagrangian_row(r))
            .sum())
    }

    pub fn activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, x.len())?;
        let mut out = vec![0.0; self.dim];
        let w = self.width();
        for (r, o) in self.rows(x).zip(out.chunks_exact_mut(w)) {
            self.lagrangian.activation_row(r, o);
        }
        Ok(out)
    }

    /// Legendre dual `<x, g(x)> - L(x)`, bounded below for convex L.
    pub fn dual_energy(&self, x: &[f64]) -> Result<f64> {
        let g = self.activation(x)?;
        Ok(dot(x, &g) - self.lagrangian_value(x)?)
    }

    /// Activation Jacobian (Hessian of L) of group `row`, row-major w x w.
    pub fn jacobian(&self, x: &[f64], row: usize) -> Result<Vec<f64>> {
        check_len(self.dim, x.len())?;
        if row >= self.groups {
            return Err(AmError::OutOfRange(format!(
                "group {row} of {}",
                self.groups
            )));
        }
        let w = self.width();
        Ok(self.lagrangian.hessian_row(&x[row * w..(row + 1) * w]))
    }

    /// Hessian of L applied to `u` (all groups).
    pub fn hessian_vector(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, x.len())?;
        check_len(self.dim, u.len())?;
        let w = self.width();
        let mut out = vec![0.0; self.dim];
        for g in 0..self.groups {
            let h = self.lagrangian.hessian_row(&x[g * w..(g + 1) * w]);
            for i in 0..w {
                out[g * w + i] = (0..w).map(|j| h[i * w + j] * u[g * w + j]).sum();
            }
        }
        Ok(out)
    }

    /// `E(x + h d) - E(x - h d) - <x, g(x + h d) - g(x - h d)>`, which is
    /// O(h^2) when the dual energy and activation are Legendre consistent.
    pub fn legendre_residual(&self, x: &[f64], d: &[f64], h: f64) -> Result<f64> {
        check_len(self.dim, d.len())?;
        let xp: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(d).map(|(a, b)| a - h * b).collect();
        let de = self.dual_energy(&xp)? - self.dual_energy(&xm)?;
        let gp = self.activation(&xp)?;
        let gm = self.activation(&xm)?;
        let dg: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| a - b).collect();
        Ok(de - dot(x, &dg))
    }
}
