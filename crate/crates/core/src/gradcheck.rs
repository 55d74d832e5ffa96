//! Central finite-difference checks of analytic gradients, and a suite that
//! exercises every energy family at random interior points.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::clustering::{clam_loss_grad, ClamModel};
use crate::energies::{
    lse_energy_grad, lsr_energy_grad, DenseAmEnergy, Energy, EnergySpec, Separation,
};
use crate::error::{AmError, Result};
use crate::kernels::{approx_lse_energy_grad, build_distributed, FeatureMap, FeatureVariant};
use crate::memgen::dm_energy_grad;
use crate::numeric::sq_dist;
use crate::patterns::{rng_for, sample_binary_patterns, sample_gaussian_patterns, PatternMatrix};
use crate::transformer::{attention_energy_grad, hn_energy_grad, AttentionWeights, HnActivation};

pub const DEFAULT_STEP: f64 = 1e-5;

/// |a - b|_2 / max(|a|_2, |b|_2), or the absolute difference when both
/// vectors are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = sq_dist(a, b).sqrt();
    let scale = crate::numeric::norm(a).max(crate::numeric::norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn fd_gradient<F: Fn(&[f64]) -> Result<f64>>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let a = f(&p)?;
            p[i] = x[i] - h;
            let b = f(&p)?;
            p[i] = x[i];
            Ok((a - b) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub family: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Checks `f` (value and gradient) against central differences at every point.
pub fn check_points<F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>>(
    family: &str,
    f: F,
    points: &[Vec<f64>],
    h: f64,
) -> Result<GradCheck> {
    let mut errs = Vec::with_capacity(points.len());
    for p in points {
        let (_, g) = f(p)?;
        let fd = fd_gradient(|x| f(x).map(|r| r.0), p, h)?;
        errs.push(relative_error(&g, &fd));
    }
    Ok(GradCheck {
        family: family.to_string(),
        points: points.len(),
        max_rel_error: errs.iter().copied().fold(0.0, f64::max),
        mean_rel_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
    })
}

pub fn check_energy<E: Energy + ?Sized>(
    family: &str,
    e: &E,
    points: &[Vec<f64>],
    h: f64,
) -> Result<GradCheck> {
    check_points(
        family,
        |x| e.energy_grad(x).map(|r| (r.energy, r.gradient)),
        points,
        h,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Relaxed continuous DenseAM energy with a cubic separation.
    Exercise,
    Lse,
    Lsr,
    Chn,
    Attention,
    Hopfield,
    Diffusion,
    Distributed,
    Clam,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Exercise,
        Family::Lse,
        Family::Lsr,
        Family::Chn,
        Family::Attention,
        Family::Hopfield,
        Family::Diffusion,
        Family::Distributed,
        Family::Clam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exercise => "exercise",
            Self::Lse => "lse",
            Self::Lsr => "lsr",
            Self::Chn => "chn",
            Self::Attention => "attention",
            Self::Hopfield => "hopfield",
            Self::Diffusion => "diffusion",
            Self::Distributed => "distributed",
            Self::Clam => "clam",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| AmError::Config(format!("unknown gradient family '{s}'")))
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_points<R: Rng>(rng: &mut R, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| scale * gauss(&mut *rng)).collect())
        .collect()
}

/// Points near the patterns, each well inside at least one LSR support and
/// at least `margin` away from every support boundary.
fn lsr_points<R: Rng>(
    rng: &mut R,
    xi: &PatternMatrix,
    beta: f64,
    n: usize,
    margin: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mu = rng.random_range(0..xi.count());
        let p: Vec<f64> = xi
            .pattern(mu)
            .iter()
            .map(|x| x + 0.4 * gauss(&mut *rng))
            .collect();
        let ok = xi
            .patterns()
            .all(|q| (1.0 - 0.5 * beta * sq_dist(&p, q)).abs() > margin);
        if ok && lsr_energy_grad(xi, &p, beta).is_ok() {
            out.push(p);
        }
    }
    out
}

/// Checks one family at `trials` random points drawn from `seed`.
pub fn run_family(family: Family, trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 1000 + family as u64);
    let h = DEFAULT_STEP;
    let name = family.name();
    match family {
        Family::Exercise => {
            let xi = sample_binary_patterns(8, 5, seed)?;
            let e = DenseAmEnergy::new(xi, Separation::Power(3))?;
            check_energy(name, &e, &normal_points(&mut rng, trials, 8, 0.5), h)
        }
        Family::Lse => {
            let xi = sample_gaussian_patterns(6, 4, seed)?;
            check_points(
                name,
                |v| lse_energy_grad(&xi, v, 2.0).map(|r| (r.energy, r.gradient)),
                &normal_points(&mut rng, trials, 6, 1.0),
                h,
            )
        }
        Family::Lsr => {
            let xi = sample_gaussian_patterns(3, 4, seed)?;
            let beta = 0.5;
            let pts = lsr_points(&mut rng, &xi, beta, trials, 1e-3);
            check_points(
                name,
                |v| lsr_energy_grad(&xi, v, beta).map(|r| (r.energy, r.gradient)),
                &pts,
                h,
            )
        }
        Family::Chn => {
            let spec = EnergySpec::chn(sample_binary_patterns(10, 4, seed)?, 1.0)?;
            check_energy(name, &spec, &normal_points(&mut rng, trials, 10, 1.0), h)
        }
        Family::Attention => {
            let (n, d) = (4, 5);
            let w = AttentionWeights::random(3, 2, d, 0.7, 0.5, seed)?;
            check_points(
                name,
                |g| attention_energy_grad(g, n, &w, None),
                &normal_points(&mut rng, trials, n * d, 1.0),
                h,
            )
        }
        Family::Hopfield => {
            let (n, d) = (3, 5);
            let xi = sample_gaussian_patterns(d, 6, seed)?;
            check_points(
                name,
                |g| hn_energy_grad(g, n, &xi, HnActivation::HalfSquareRelu),
                &normal_points(&mut rng, trials, n * d, 1.0),
                h,
            )
        }
        Family::Diffusion => {
            let data = sample_gaussian_patterns(3, 8, seed)?;
            check_points(
                name,
                |v| dm_energy_grad(&data, v, 0.8, 0.6).map(|r| (r.energy, r.gradient)),
                &normal_points(&mut rng, trials, 3, 1.0),
                h,
            )
        }
        Family::Distributed => {
            let xi = sample_gaussian_patterns(4, 5, seed)?;
            let fm = FeatureMap::new(FeatureVariant::CosSinPair, 1024, 4, seed)?;
            let dm = build_distributed(&xi, 1.0, &fm)?;
            let mut pts = Vec::with_capacity(trials);
            while pts.len() < trials {
                let mu = rng.random_range(0..xi.count());
                let p: Vec<f64> = xi
                    .pattern(mu)
                    .iter()
                    .map(|x| x + 0.2 * gauss(&mut rng))
                    .collect();
                if approx_lse_energy_grad(&p, &dm, &fm).is_ok() {
                    pts.push(p);
                }
            }
            check_points(
                name,
                |v| approx_lse_energy_grad(v, &dm, &fm).map(|r| (r.energy, r.gradient)),
                &pts,
                h,
            )
        }
        Family::Clam => {
            let (k, d) = (3, 2);
            let x = sample_gaussian_patterns(d, 20, seed)?;
            let f = |flat: &[f64]| {
                let rows: Vec<Vec<f64>> = flat.chunks(d).map(|c| c.to_vec()).collect();
                let model = ClamModel {
                    centers: PatternMatrix::real_from_rows(&rows)?,
                };
                let lg = clam_loss_grad(&x, &model, 2.0, 0.1, 5, None)?;
                Ok((lg.loss, lg.grad.concat()))
            };
            check_points(name, f, &normal_points(&mut rng, trials, k * d, 1.0), h)
        }
    }
}
