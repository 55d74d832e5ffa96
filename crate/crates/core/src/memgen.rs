//! Memorization, spurious states and generalization in diffusion-like
//! energies over a toy dataset on the unit circle.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{descend_final, DescentConfig};
use crate::energies::{Energy, GradientReport};
use crate::error::{check_finite, check_positive, AmError, Result};
use crate::numeric::{fmt_f64, ln_bessel_i0, log_sum_exp_weights, sq_dist};
use crate::patterns::{rng_for, PatternMatrix};

/// K points drawn uniformly on the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleDataset {
    pub points: PatternMatrix,
    pub seed: u64,
}

impl CircleDataset {
    pub fn sample(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(AmError::InvalidDimension("K must be positive".into()));
        }
        let mut rng = rng_for(seed, 0);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                vec![a.cos(), a.sin()]
            })
            .collect();
        Ok(Self {
            points: PatternMatrix::real_from_rows(&rows)?,
            seed,
        })
    }
}

/// E^DM(v, t) = -2 s^2 t log sum_mu exp(-|v - xi^mu|^2 / (2 s^2 t)).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionEnergy {
    pub data: PatternMatrix,
    pub sigma: f64,
    pub t: f64,
}

impl DiffusionEnergy {
    pub fn new(data: PatternMatrix, sigma: f64, t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(AmError::OutOfRange(format!(
                "diffusion time must be positive, got {t}"
            )));
        }
        check_positive(sigma, "noise scale")?;
        Ok(Self { data, sigma, t })
    }
}

impl Energy for DiffusionEnergy {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        dm_energy_grad(&self.data, v, self.sigma, self.t)
    }
}

pub fn dm_energy_grad(
    data: &PatternMatrix,
    v: &[f64],
    sigma: f64,
    t: f64,
) -> Result<GradientReport> {
    if !(t > 0.0) {
        return Err(AmError::OutOfRange(format!(
            "diffusion time must be positive, got {t}"
        )));
    }
    check_positive(sigma, "noise scale")?;
    data.check_state(v)?;
    let s = 2.0 * sigma * sigma * t;
    let z: Vec<f64> = data.patterns().map(|p| -sq_dist(v, p) / s).collect();
    let (lse, p) = log_sum_exp_weights(&z);
    let mut gradient = vec![0.0; v.len()];
    for (pm, xi) in p.iter().zip(data.patterns()) {
        for ((g, a), b) in gradient.iter_mut().zip(v).zip(xi) {
            *g += 2.0 * pm * (a - b);
        }
    }
    let energy = -s * lse;
    check_finite(energy, "diffusion energy")?;
    Ok(GradientReport {
        energy,
        gradient,
        active_terms: None,
    })
}

/// E^AM(x) = -(1/beta) log[c sum_mu exp(-beta |x - xi^mu|^2)] with c = 1/K
/// when `normalized`, else 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AmEnergy {
    pub data: PatternMatrix,
    pub beta: f64,
    pub normalized: bool,
}

impl AmEnergy {
    pub fn new(data: PatternMatrix, beta: f64) -> Result<Self> {
        check_positive(beta, "beta")?;
        Ok(Self {
            data,
            beta,
            normalized: false,
        })
    }

    pub fn normalized(data: PatternMatrix, beta: f64) -> Result<Self> {
        Ok(Self {
            normalized: true,
            ..Self::new(data, beta)?
        })
    }
}

impl Energy for AmEnergy {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        self.data.check_state(v)?;
        let z: Vec<f64> = self
            .data
            .patterns()
            .map(|p| -self.beta * sq_dist(v, p))
            .collect();
        let (mut lse, p) = log_sum_exp_weights(&z);
        if self.normalized {
            lse -= (self.data.count() as f64).ln();
        }
        let mut gradient = vec![0.0; v.len()];
        for (pm, xi) in p.iter().zip(self.data.patterns()) {
            for ((g, a), b) in gradient.iter_mut().zip(v).zip(xi) {
                *g += 2.0 * pm * (a - b);
            }
        }
        let energy = -lse / self.beta;
        check_finite(energy, "associative memory energy")?;
        Ok(GradientReport {
            energy,
            gradient,
            active_terms: None,
        })
    }
}

/// Energy of the infinite circle dataset at radius R:
/// R^2 + 1 - (1/beta) log I0(2 beta R).
pub fn circle_energy_exact(r: f64, beta: f64) -> Result<f64> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(AmError::OutOfRange(format!(
            "radius must be non-negative, got {r}"
        )));
    }
    check_positive(beta, "beta")?;
    Ok(r * r + 1.0 - ln_bessel_i0(2.0 * beta * r) / beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn square(half: f64) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    /// n x n points, row-major with y outer and x inner.
    pub fn grid(&self, n: usize) -> Vec<Vec<f64>> {
        let at = |lo: f64, hi: f64, k: usize| {
            if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        };
        (0..n)
            .flat_map(|r| {
                (0..n).map(move |c| {
                    vec![at(self.x_min, self.x_max, c), at(self.y_min, self.y_max, r)]
                })
            })
            .collect()
    }
}

/// Energy on an n x n grid as (x, y, energy) rows. Points where the energy is
/// infinite are reported as `inf`.
pub fn energy_landscape<E: Energy + ?Sized>(
    energy: &E,
    region: &Region,
    n: usize,
) -> Result<Vec<[f64; 3]>> {
    if energy.dim() != 2 {
        return Err(AmError::InvalidDimension(
            "landscapes need a 2-D energy".into(),
        ));
    }
    region
        .grid(n)
        .par_iter()
        .map(|p| match energy.energy(p) {
            Ok(e) => Ok([p[0], p[1], e]),
            Err(AmError::InfiniteEnergy(_)) => Ok([p[0], p[1], f64::INFINITY]),
            Err(e) => Err(e),
        })
        .collect()
}

pub fn write_landscape_csv<W: std::io::Write>(w: &mut W, rows: &[[f64; 3]]) -> Result<()> {
    writeln!(w, "x,y,energy")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt_f64(r[0]), fmt_f64(r[1]), fmt_f64(r[2]))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Memorization,
    Spurious,
    Generalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseThresholds {
    pub eps_mem: f64,
    pub eps_gen: f64,
    pub cluster_radius: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            eps_mem: 0.05,
            eps_gen: 0.05,
            cluster_radius: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub minima: Vec<[f64; 2]>,
    /// Grid points that converged to each minimum.
    pub basin_sizes: Vec<usize>,
    pub nearest_datum_distance: Vec<f64>,
    pub radius: Vec<f64>,
    pub phase: Phase,
    /// Number of clustered fixed points rejected as saddles.
    pub saddles: usize,
    pub unconverged_fraction: f64,
    pub warning: Option<String>,
}

/// Smallest eigenvalue of the finite-difference Hessian of a 2-D energy.
fn min_hessian_eig<E: Energy + ?Sized>(energy: &E, p: &[f64]) -> Result<f64> {
    let h = 1e-5;
    let mut m = [0.0; 4];
    for j in 0..2 {
        let mut a = p.to_vec();
        let mut b = p.to_vec();
        a[j] += h;
        b[j] -= h;
        let ga = energy.energy_grad(&a)?.gradient;
        let gb = energy.energy_grad(&b)?.gradient;
        for i in 0..2 {
            m[i * 2 + j] = (ga[i] - gb[i]) / (2.0 * h);
        }
    }
    crate::numeric::min_eigenvalue(2, &m)
}

/// Descends from every point of an n x n grid, clusters the fixed points,
/// drops saddles and classifies the landscape.
///
/// Memorization: every minimum lies within `eps_mem` of a datum and every
/// datum has a minimum within `eps_mem`. Generalization: otherwise, every
/// minimum lies within `eps_gen` of the unit circle and either there are more
/// than 3K/2 minima or the minima do not pair up one-to-one with the data
/// (the data have merged into a shared low-energy arc). Spurious: anything
/// else, i.e. some minimum sits away from both the data and the circle.
pub fn find_minima<E: Energy + ?Sized>(
    energy: &E,
    region: &Region,
    grid_n: usize,
    cfg: &DescentConfig,
    data: &PatternMatrix,
    th: &PhaseThresholds,
) -> Result<PhaseReport> {
    if energy.dim() != 2 || data.dim() != 2 {
        return Err(AmError::InvalidDimension(
            "phase classification works on 2-D states".into(),
        ));
    }
    let grid = region.grid(grid_n);
    let ends: Vec<Option<Vec<f64>>> = grid
        .par_iter()
        .map(|p| match descend_final(energy, p, cfg) {
            Ok(t) => Ok(t.converged.then(|| t.final_state().to_vec())),
            Err(AmError::InfeasibleStart(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let unconverged = ends.iter().filter(|e| e.is_none()).count();
    let mut reps: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<[f64; 2]> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for e in ends.iter().flatten() {
        match reps
            .iter()
            .position(|r| sq_dist(r, e).sqrt() <= th.cluster_radius)
        {
            Some(c) => {
                sums[c][0] += e[0];
                sums[c][1] += e[1];
                sizes[c] += 1;
            }
            None => {
                reps.push(e.clone());
                sums.push([e[0], e[1]]);
                sizes.push(1);
            }
        }
    }
    let mut minima = Vec::new();
    let mut basin_sizes = Vec::new();
    let mut saddles = 0;
    for (s, &n) in sums.iter().zip(&sizes) {
        let c = [s[0] / n as f64, s[1] / n as f64];
        let lam = min_hessian_eig(energy, &c)?;
        if lam < -1e-6 {
            saddles += 1;
            continue;
        }
        minima.push(c);
        basin_sizes.push(n);
    }
    let nearest: Vec<f64> = minima
        .iter()
        .map(|m| {
            data.patterns()
                .map(|p| sq_dist(m, p))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    let radius: Vec<f64> = minima
        .iter()
        .map(|m| (m[0] * m[0] + m[1] * m[1]).sqrt())
        .collect();
    let k = data.count();
    let all_near_data = !minima.is_empty() && nearest.iter().all(|&d| d <= th.eps_mem);
    let data_covered = data
        .patterns()
        .all(|p| minima.iter().any(|m| sq_dist(m, p).sqrt() <= th.eps_mem));
    let on_circle = !minima.is_empty() && radius.iter().all(|&r| (r - 1.0).abs() <= th.eps_gen);
    let phase = if all_near_data && data_covered {
        Phase::Memorization
    } else if on_circle && (2 * minima.len() > 3 * k || !data_covered) {
        Phase::Generalization
    } else {
        Phase::Spurious
    };
    let unconverged_fraction = unconverged as f64 / grid.len() as f64;
    let warning = (unconverged_fraction > 0.1).then(|| {
        format!(
            "{:.1}% of grid descents did not converge; increase steps or loosen stop_tol",
            100.0 * unconverged_fraction
        )
    });
    Ok(PhaseReport {
        minima,
        basin_sizes,
        nearest_datum_distance: nearest,
        radius,
        phase,
        saddles,
        unconverged_fraction,
        warning,
    })
}
