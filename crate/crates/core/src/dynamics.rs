//! Asynchronous spin updates and clamped gradient descent.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::energies::{Energy, Separation};
use crate::error::{check_len, AmError, Result};
use crate::numeric::{fmt_f64, sq_dist};
use crate::patterns::{rng_for, ClampMask, PatternMatrix, StateVector};

/// One sweep of single-spin updates in a seeded random order.
///
/// Spin i becomes Sign[sum_mu xi^mu_i f(sum_{j != i} xi^mu_j sigma_j)] with
/// f the derivative of `sep` and Sign(0) = +1.
pub fn async_update(
    xi: &PatternMatrix,
    sigma: &[f64],
    sep: Separation,
    order_seed: u64,
) -> Result<StateVector> {
    xi.check_state(sigma)?;
    let d = sigma.len();
    let mut s = sigma.to_vec();
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng_for(order_seed, 0));
    let mut m: Vec<f64> = xi.patterns().map(|p| crate::numeric::dot(p, &s)).collect();
    let mut h = vec![0.0; xi.count()];
    for &i in &order {
        for (mu, p) in xi.patterns().enumerate() {
            h[mu] = m[mu] - p[i] * s[i];
        }
        let field = local_field(xi, i, &h, sep);
        let new = if field >= 0.0 { 1.0 } else { -1.0 };
        if new != s[i] {
            for (mu, p) in xi.patterns().enumerate() {
                m[mu] += p[i] * (new - s[i]);
            }
            s[i] = new;
        }
    }
    Ok(s)
}

/// sum_mu xi^mu_i f(h_mu); for the exponential the common factor exp(max h)
/// is divided out, which leaves the sign unchanged.
pub(crate) fn local_field(xi: &PatternMatrix, i: usize, h: &[f64], sep: Separation) -> f64 {
    match sep {
        Separation::Exp => {
            let hmax = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            xi.patterns()
                .zip(h)
                .map(|(p, &hm)| p[i] * (hm - hmax).exp())
                .sum()
        }
        _ => xi
            .patterns()
            .zip(h)
            .map(|(p, &hm)| p[i] * sep.deriv(hm))
            .sum(),
    }
}

/// Result of repeated sweeps until a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub state: StateVector,
    pub sweeps: usize,
    pub converged: bool,
}

/// Sweeps until nothing changes or `max_sweeps` is reached. Sweep k uses
/// order stream `seed + k`.
pub fn retrieve(
    xi: &PatternMatrix,
    sigma: &[f64],
    sep: Separation,
    max_sweeps: usize,
    seed: u64,
) -> Result<Retrieval> {
    let mut s = sigma.to_vec();
    for k in 0..max_sweeps {
        let next = async_update(xi, &s, sep, seed.wrapping_add(k as u64))?;
        if next == s {
            return Ok(Retrieval {
                state: s,
                sweeps: k + 1,
                converged: true,
            });
        }
        s = next;
    }
    Ok(Retrieval {
        state: s,
        sweeps: max_sweeps,
        converged: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    pub eta: f64,
    pub steps: usize,
    /// `None` leaves every coordinate free.
    pub mask: Option<ClampMask>,
    pub stop_tol: f64,
    pub backtracking: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            steps: 100,
            mask: None,
            stop_tol: 1e-8,
            backtracking: false,
        }
    }
}

impl DescentConfig {
    pub fn new(eta: f64, steps: usize) -> Self {
        Self {
            eta,
            steps,
            ..Self::default()
        }
    }

    pub fn with_mask(mut self, mask: ClampMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_backtracking(mut self, on: bool) -> Self {
        self.backtracking = on;
        self
    }

    pub fn with_stop_tol(mut self, tol: f64) -> Self {
        self.stop_tol = tol;
        self
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(AmError::OutOfRange(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(AmError::OutOfRange("stop_tol must be non-negative".into()));
        }
        if let Some(m) = &self.mask {
            check_len(d, m.len())?;
        }
        Ok(())
    }

    fn factor(&self, i: usize) -> f64 {
        self.mask.as_ref().map_or(1.0, |m| m.factor(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub energies: Vec<f64>,
    pub converged: bool,
    pub steps_taken: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    pub fn final_energy(&self) -> f64 {
        *self
            .energies
            .last()
            .expect("trajectory holds the initial energy")
    }

    /// CSV with columns step, energy, v0..v{D-1}.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = self.states.first().map_or(0, |s| s.len());
        let header: Vec<String> = ["step".to_string(), "energy".to_string()]
            .into_iter()
            .chain((0..d).map(|i| format!("v{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, (s, e)) in self.states.iter().zip(&self.energies).enumerate() {
            let mut row = vec![t.to_string(), fmt_f64(*e)];
            row.extend(s.iter().map(|&x| fmt_f64(x)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 40;

/// v <- v - eta m (.) grad E(v), recording every state.
pub fn descend<E: Energy + ?Sized>(
    energy: &E,
    v0: &[f64],
    cfg: &DescentConfig,
) -> Result<Trajectory> {
    run_descent(energy, v0, cfg, true)
}

/// Same iteration as [`descend`] but keeps only the first and last state.
pub fn descend_final<E: Energy + ?Sized>(
    energy: &E,
    v0: &[f64],
    cfg: &DescentConfig,
) -> Result<Trajectory> {
    run_descent(energy, v0, cfg, false)
}

fn run_descent<E: Energy + ?Sized>(
    energy: &E,
    v0: &[f64],
    cfg: &DescentConfig,
    record: bool,
) -> Result<Trajectory> {
    check_len(energy.dim(), v0.len())?;
    cfg.validate(v0.len())?;
    if v0.iter().any(|x| !x.is_finite()) {
        return Err(AmError::NonFinite("initial state".into()));
    }
    let mut cur = match energy.energy_grad(v0) {
        Ok(r) => r,
        Err(AmError::InfiniteEnergy(msg)) => return Err(AmError::InfeasibleStart(msg)),
        Err(e) => return Err(e),
    };
    let mut v = v0.to_vec();
    let mut states = vec![v.clone()];
    let mut energies = vec![cur.energy];
    let mut steps_taken = 0;
    let masked_norm = |g: &[f64]| {
        g.iter()
            .enumerate()
            .fold(0.0f64, |m, (i, x)| m.max((cfg.factor(i) * x).abs()))
    };
    let mut converged = masked_norm(&cur.gradient) < cfg.stop_tol;
    while !converged && steps_taken < cfg.steps {
        let mut eta = cfg.eta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(i, x)| x - eta * cfg.factor(i) * cur.gradient[i])
                .collect();
            let ok = match energy.energy_grad(&trial) {
                Ok(r) if !cfg.backtracking || r.energy <= cur.energy => Some(r),
                Ok(_)
                | Err(AmError::InfiniteEnergy(_))
                | Err(AmError::ApproximationBreakdown(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some(r) = ok {
                accepted = Some((trial, r));
                break;
            }
            if !cfg.backtracking {
                break;
            }
            eta *= 0.5;
        }
        let Some((next, r)) = accepted else { break };
        v = next;
        cur = r;
        steps_taken += 1;
        if record {
            states.push(v.clone());
            energies.push(cur.energy);
        }
        converged = masked_norm(&cur.gradient) < cfg.stop_tol;
    }
    if !record && steps_taken > 0 {
        states.push(v);
        energies.push(cur.energy);
    }
    Ok(Trajectory {
        states,
        energies,
        converged,
        steps_taken,
    })
}

/// Descends on the joint (features, labels) space with the features clamped
/// and returns the final label block.
pub fn predict_clamped<E: Energy + ?Sized>(
    energy: &E,
    x: &[f64],
    y0: &[f64],
    cfg: &DescentConfig,
) -> Result<Vec<f64>> {
    let d = x.len();
    check_len(energy.dim(), d + y0.len())?;
    let mut v0 = x.to_vec();
    v0.extend_from_slice(y0);
    let free: Vec<bool> = (0..v0.len()).map(|i| i >= d).collect();
    let cfg = DescentConfig {
        mask: Some(ClampMask::from_free(free)),
        ..cfg.clone()
    };
    let t = descend_final(energy, &v0, &cfg)?;
    Ok(t.final_state()[d..].to_vec())
}

/// Uniform label vector (1/k, ..., 1/k) used as the default prediction.
pub fn uniform_labels(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinLabels {
    /// Nearest-center index of each fixed point; `None` when the descent did
    /// not converge within the step budget.
    pub labels: Vec<Option<usize>>,
    pub unconverged: usize,
}

pub fn nearest_center(centers: &PatternMatrix, v: &[f64]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (mu, c) in centers.patterns().enumerate() {
        let d = sq_dist(v, c);
        if d < bd {
            bd = d;
            best = mu;
        }
    }
    best
}

/// Descends from every grid point in parallel and labels each by the
/// nearest center to where it ends up.
pub fn basin_labels<E: Energy + ?Sized>(
    energy: &E,
    grid: &[StateVector],
    cfg: &DescentConfig,
    centers: &PatternMatrix,
) -> Result<BasinLabels> {
    let labels: Vec<Option<usize>> = grid
        .par_iter()
        .map(|p| {
            let t = descend_final(energy, p, cfg)?;
            Ok(t.converged
                .then(|| nearest_center(centers, t.final_state())))
        })
        .collect::<Result<_>>()?;
    let unconverged = labels.iter().filter(|l| l.is_none()).count();
    Ok(BasinLabels {
        labels,
        unconverged,
    })
}

/// n x n grid of points over [lo, hi]^2 in row-major order (y outer, x inner).
pub fn square_grid(lo: f64, hi: f64, n: usize) -> Vec<StateVector> {
    let at = |k: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    (0..n)
        .flat_map(|r| (0..n).map(move |c| vec![at(c), at(r)]))
        .collect()
}
