//! Energy Transformer block: multi-head energy attention plus a Hopfield
//! module acting on layer-normalized tokens.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energies::{Energy, GradientReport};
use crate::error::{check_finite, check_len, check_positive, AmError, Result};
use crate::neurons::{Lagrangian, NeuronLayer};
use crate::numeric::{dot, log_sum_exp_weights};
use crate::patterns::{rng_for, PatternMatrix};

/// N tokens of width D, row-major, with a per-token masked flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub masked: Vec<bool>,
}

impl TokenGrid {
    pub fn new(tokens: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(AmError::InvalidDimension(
                "token grid needs N >= 1 and D >= 1".into(),
            ));
        }
        check_len(n * d, tokens.len())?;
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(AmError::NonFinite("tokens".into()));
        }
        Ok(Self {
            tokens,
            n,
            d,
            masked: vec![false; n],
        })
    }

    pub fn random(n: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 0);
        Self::new(
            (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
            n,
            d,
        )
    }

    pub fn token(&self, a: usize) -> &[f64] {
        &self.tokens[a * self.d..(a + 1) * self.d]
    }

    /// Replaces every masked token by `placeholder` plus its row of
    /// `positions` (N x D) when given.
    pub fn mask_tokens(
        &mut self,
        masked: Vec<bool>,
        placeholder: &[f64],
        positions: Option<&[f64]>,
    ) -> Result<()> {
        check_len(self.n, masked.len())?;
        check_len(self.d, placeholder.len())?;
        if let Some(p) = positions {
            check_len(self.n * self.d, p.len())?;
        }
        for a in 0..self.n {
            if masked[a] {
                for j in 0..self.d {
                    self.tokens[a * self.d + j] =
                        placeholder[j] + positions.map_or(0.0, |p| p[a * self.d + j]);
                }
            }
        }
        self.masked = masked;
        Ok(())
    }
}

/// Key and query tensors W^K, W^Q of shape Y x H x D, entry (alpha, h, j)
/// at index (alpha * H + h) * D + j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wk: Vec<f64>,
    pub wq: Vec<f64>,
    pub y: usize,
    pub heads: usize,
    pub d: usize,
    pub beta: f64,
}

impl AttentionWeights {
    pub fn new(
        wk: Vec<f64>,
        wq: Vec<f64>,
        y: usize,
        heads: usize,
        d: usize,
        beta: f64,
    ) -> Result<Self> {
        if y == 0 || heads == 0 || d == 0 {
            return Err(AmError::InvalidDimension(
                "attention needs Y, H, D >= 1".into(),
            ));
        }
        check_len(y * heads * d, wk.len())?;
        check_len(y * heads * d, wq.len())?;
        check_positive(beta, "attention beta")?;
        if wk.iter().chain(&wq).any(|x| !x.is_finite()) {
            return Err(AmError::NonFinite("attention weights".into()));
        }
        Ok(Self {
            wk,
            wq,
            y,
            heads,
            d,
            beta,
        })
    }

    pub fn zeros(y: usize, heads: usize, d: usize, beta: f64) -> Result<Self> {
        Self::new(
            vec![0.0; y * heads * d],
            vec![0.0; y * heads * d],
            y,
            heads,
            d,
            beta,
        )
    }

    /// Entries i.i.d. normal with standard deviation `scale`.
    pub fn random(
        y: usize,
        heads: usize,
        d: usize,
        beta: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, 0);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let wk = draw(y * heads * d);
        let wq = draw(y * heads * d);
        Self::new(wk, wq, y, heads, d, beta)
    }

    fn project(&self, w: &[f64], g: &[f64], n: usize) -> Vec<f64> {
        // out[(alpha * H + h) * N + b]
        let (y, hh, d) = (self.y, self.heads, self.d);
        let mut out = vec![0.0; y * hh * n];
        for ah in 0..y * hh {
            let row = &w[ah * d..(ah + 1) * d];
            for b in 0..n {
                out[ah * n + b] = dot(row, &g[b * d..(b + 1) * d]);
            }
        }
        out
    }
}

/// E = -(1/beta) sum_h sum_C log sum_{B != C} exp(beta A_hBC) on the
/// activations `g` (N x D), with its gradient in `g`.
///
/// `attend[B] == false` removes token B from every key sum.
pub fn attention_energy_grad(
    g: &[f64],
    n: usize,
    w: &AttentionWeights,
    attend: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    check_len(n * w.d, g.len())?;
    if let Some(a) = attend {
        check_len(n, a.len())?;
    }
    if n < 2 {
        return Err(AmError::UndefinedEnergy(
            "attention energy needs at least two tokens".into(),
        ));
    }
    let (y, hh, d, beta) = (w.y, w.heads, w.d, w.beta);
    let k = w.project(&w.wk, g, n);
    let q = w.project(&w.wq, g, n);
    let mut dk = vec![0.0; y * hh * n];
    let mut dq = vec![0.0; y * hh * n];
    let mut energy = 0.0;
    let mut logits = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for h in 0..hh {
        for c in 0..n {
            logits.clear();
            keys.clear();
            for b in (0..n).filter(|&b| b != c && attend.is_none_or(|a| a[b])) {
                let a_bc: f64 = (0..y)
                    .map(|al| k[(al * hh + h) * n + b] * q[(al * hh + h) * n + c])
                    .sum();
                logits.push(beta * a_bc);
                keys.push(b);
            }
            if keys.is_empty() {
                return Err(AmError::UndefinedEnergy(format!(
                    "token {c} has no attendable partner"
                )));
            }
            let (lse, p) = log_sum_exp_weights(&logits);
            energy -= lse / beta;
            for (&b, &pb) in keys.iter().zip(&p) {
                for al in 0..y {
                    let idx = (al * hh + h) * n;
                    dk[idx + b] -= pb * q[idx + c];
                    dq[idx + c] -= pb * k[idx + b];
                }
            }
        }
    }
    let mut grad = vec![0.0; n * d];
    for ah in 0..y * hh {
        let wk_row = &w.wk[ah * d..(ah + 1) * d];
        let wq_row = &w.wq[ah * d..(ah + 1) * d];
        for b in 0..n {
            let (ck, cq) = (dk[ah * n + b], dq[ah * n + b]);
            if ck == 0.0 && cq == 0.0 {
                continue;
            }
            for j in 0..d {
                grad[b * d + j] += wk_row[j] * ck + wq_row[j] * cq;
            }
        }
    }
    check_finite(energy, "attention energy")?;
    Ok((energy, grad))
}

/// Hopfield-module nonlinearity. G is the integral of the activation r.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HnActivation {
    /// r = ReLU, G(z) = max(0, z)^2 / 2
    HalfSquareRelu,
    /// r(z) = z^(n-1), G(z) = z^n / n
    Power(u32),
    /// Per token -(1/beta) log sum_mu exp(beta z_mu) replaces sum_mu G(z_mu).
    Softmax { beta: f64 },
}

/// E = -sum_B sum_mu G(<xi_mu, g_B>) on activations `g` (N x D).
pub fn hn_energy_grad(
    g: &[f64],
    n: usize,
    xi: &PatternMatrix,
    act: HnActivation,
) -> Result<(f64, Vec<f64>)> {
    let d = xi.dim();
    check_len(n * d, g.len())?;
    match act {
        HnActivation::Power(p) if p < 2 => {
            return Err(AmError::OutOfRange(format!("power must be >= 2, got {p}")))
        }
        HnActivation::Softmax { beta } => check_positive(beta, "softmax beta")?,
        _ => {}
    }
    let mut energy = 0.0;
    let mut grad = vec![0.0; n * d];
    for b in 0..n {
        let gb = &g[b * d..(b + 1) * d];
        let z: Vec<f64> = xi.patterns().map(|p| dot(p, gb)).collect();
        let weights: Vec<f64> = match act {
            HnActivation::HalfSquareRelu => {
                energy -= z
                    .iter()
                    .map(|&v| 0.5 * v.max(0.0) * v.max(0.0))
                    .sum::<f64>();
                z.iter().map(|&v| v.max(0.0)).collect()
            }
            HnActivation::Power(p) => {
                energy -= z.iter().map(|&v| v.powi(p as i32) / p as f64).sum::<f64>();
                z.iter().map(|&v| v.powi(p as i32 - 1)).collect()
            }
            HnActivation::Softmax { beta } => {
                let scaled: Vec<f64> = z.iter().map(|v| beta * v).collect();
                let (lse, pr) = log_sum_exp_weights(&scaled);
                energy -= lse / beta;
                pr
            }
        };
        let gr = &mut grad[b * d..(b + 1) * d];
        for (p, &wm) in xi.patterns().zip(&weights) {
            if wm != 0.0 {
                for (o, x) in gr.iter_mut().zip(p) {
                    *o -= wm * x;
                }
            }
        }
    }
    check_finite(energy, "Hopfield module energy")?;
    Ok((energy, grad))
}

/// Attention and Hopfield weights plus the token layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTransformer {
    pub attention: AttentionWeights,
    pub memories: PatternMatrix,
    pub hn: HnActivation,
    pub layer_norm: Lagrangian,
    pub attend: Option<Vec<bool>>,
}

impl EnergyTransformer {
    pub fn new(
        attention: AttentionWeights,
        memories: PatternMatrix,
        hn: HnActivation,
        layer_norm: Lagrangian,
    ) -> Result<Self> {
        check_len(attention.d, memories.dim())?;
        if !matches!(layer_norm, Lagrangian::LayerNorm { .. }) {
            return Err(AmError::Config(
                "token activations must use a layer-norm Lagrangian".into(),
            ));
        }
        Ok(Self {
            attention,
            memories,
            hn,
            layer_norm,
            attend: None,
        })
    }

    /// Random weights with standard deviation `scale`, K memories, layer
    /// norm with gamma = 1.
    pub fn random(
        d: usize,
        y: usize,
        heads: usize,
        k: usize,
        beta: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let attention = AttentionWeights::random(y, heads, d, beta, scale, seed)?;
        let mut rng = rng_for(seed, 1);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..d)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let memories = PatternMatrix::real_from_rows(&rows)?;
        Self::new(
            attention,
            memories,
            HnActivation::HalfSquareRelu,
            Lagrangian::layer_norm(1.0),
        )
    }

    pub fn token_layer(&self, n: usize) -> Result<NeuronLayer> {
        NeuronLayer::grouped("tokens", n * self.attention.d, n, self.layer_norm.clone())
    }

    /// E_ATT + E_HN and its gradient with respect to the activations.
    pub fn energy_grad_hat(&self, g: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
        let (ea, mut ga) = attention_energy_grad(g, n, &self.attention, self.attend.as_deref())?;
        let (eh, gh) = hn_energy_grad(g, n, &self.memories, self.hn)?;
        for (a, b) in ga.iter_mut().zip(&gh) {
            *a += b;
        }
        Ok((ea + eh, ga))
    }

    /// Total energy of raw tokens; the neuron-layer term is dropped.
    pub fn energy(&self, tg: &TokenGrid) -> Result<f64> {
        let g = self.token_layer(tg.n)?.activation(&tg.tokens)?;
        Ok(self.energy_grad_hat(&g, tg.n)?.0)
    }
}

/// Energy of the raw tokens with the gradient taken in token space, i.e. the
/// layer-norm Jacobian applied to the activation gradient.
pub struct TokenEnergy<'a> {
    pub et: &'a EnergyTransformer,
    pub n: usize,
}

impl Energy for TokenEnergy<'_> {
    fn dim(&self) -> usize {
        self.n * self.et.attention.d
    }

    fn energy_grad(&self, x: &[f64]) -> Result<GradientReport> {
        let layer = self.et.token_layer(self.n)?;
        let g = layer.activation(x)?;
        let (energy, gh) = self.et.energy_grad_hat(&g, self.n)?;
        let gradient = layer.hessian_vector(x, &gh)?;
        Ok(GradientReport {
            energy,
            gradient,
            active_terms: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtRun {
    pub grid: TokenGrid,
    /// Energy before the first step and after each step.
    pub energies: Vec<f64>,
}

/// Explicit Euler on tau dx/dt = -dE/dg with tau = 1. With backtracking the
/// step is halved (at most 40 times) until the energy does not increase.
pub fn et_step(
    tg: &TokenGrid,
    et: &EnergyTransformer,
    dt: f64,
    steps: usize,
    backtracking: bool,
) -> Result<EtRun> {
    check_positive(dt, "dt")?;
    check_len(et.attention.d, tg.d)?;
    let layer = et.token_layer(tg.n)?;
    let mut x = tg.tokens.clone();
    let (mut e, mut grad) = et.energy_grad_hat(&layer.activation(&x)?, tg.n)?;
    let mut energies = vec![e];
    for _ in 0..steps {
        let mut h = dt;
        let mut next = None;
        for _ in 0..=40 {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - h * g).collect();
            let (te, tg_) = et.energy_grad_hat(&layer.activation(&trial)?, tg.n)?;
            if !backtracking || te <= e {
                next = Some((trial, te, tg_));
                break;
            }
            h *= 0.5;
        }
        if let Some((nx, ne, ng)) = next {
            x = nx;
            e = ne;
            grad = ng;
        }
        energies.push(e);
    }
    let grid = TokenGrid {
        tokens: x,
        n: tg.n,
        d: tg.d,
        masked: tg.masked.clone(),
    };
    Ok(EtRun { grid, energies })
}
