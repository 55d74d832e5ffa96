//! Random Fourier features for a fixed-size memory sketch, kernel density
//! estimation shapes and their bandwidth statistics, and a few properties of
//! the log-sum-relu energy.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::energies::{lsr_energy_grad, Energy, GradientReport};
use crate::error::{check_len, check_positive, AmError, Result};
use crate::numeric::{dot, fmt_f64, integrate};
use crate::patterns::{rng_for, PatternMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureVariant {
    /// sqrt(2/Y) cos(<w, x> + b), b ~ U(0, 2 pi): Y outputs.
    CosPhase,
    /// (1/sqrt(Y)) [cos <w, x>, sin <w, x>] interleaved: 2Y outputs.
    CosSinPair,
}

/// Random frequencies (and phases) approximating exp(-|x - x'|^2 / 2).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub variant: FeatureVariant,
    pub y: usize,
    pub d: usize,
    pub seed: u64,
    /// Y x D row-major.
    omega: Vec<f64>,
    phases: Vec<f64>,
}

impl FeatureMap {
    pub fn new(variant: FeatureVariant, y: usize, d: usize, seed: u64) -> Result<Self> {
        if y == 0 || d == 0 {
            return Err(AmError::InvalidDimension(
                "feature count and dimension must be positive".into(),
            ));
        }
        let mut rng = rng_for(seed, 0);
        let omega: Vec<f64> = (0..y * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let phases = match variant {
            FeatureVariant::CosPhase => {
                let mut rng = rng_for(seed, 1);
                (0..y)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect()
            }
            FeatureVariant::CosSinPair => Vec::new(),
        };
        Ok(Self {
            variant,
            y,
            d,
            seed,
            omega,
            phases,
        })
    }

    pub fn output_len(&self) -> usize {
        match self.variant {
            FeatureVariant::CosPhase => self.y,
            FeatureVariant::CosSinPair => 2 * self.y,
        }
    }

    pub fn frequency(&self, i: usize) -> &[f64] {
        &self.omega[i * self.d..(i + 1) * self.d]
    }

    fn scale(&self) -> f64 {
        match self.variant {
            FeatureVariant::CosPhase => (2.0 / self.y as f64).sqrt(),
            FeatureVariant::CosSinPair => 1.0 / (self.y as f64).sqrt(),
        }
    }

    fn thetas(&self, x: &[f64]) -> Vec<f64> {
        (0..self.y).map(|i| dot(self.frequency(i), x)).collect()
    }
}

pub fn rff_map(x: &[f64], fm: &FeatureMap) -> Result<Vec<f64>> {
    check_len(fm.d, x.len())?;
    let c = fm.scale();
    let th = fm.thetas(x);
    Ok(match fm.variant {
        FeatureVariant::CosPhase => th
            .iter()
            .zip(&fm.phases)
            .map(|(t, b)| c * (t + b).cos())
            .collect(),
        FeatureVariant::CosSinPair => th.iter().flat_map(|t| [c * t.cos(), c * t.sin()]).collect(),
    })
}

/// Fixed-size sum of the feature maps of every stored pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedMemory {
    pub sketch: Vec<f64>,
    pub beta: f64,
    pub count: usize,
}

/// T = sum_mu Phi(sqrt(beta) xi^mu).
pub fn build_distributed(
    xi: &PatternMatrix,
    beta: f64,
    fm: &FeatureMap,
) -> Result<DistributedMemory> {
    check_positive(beta, "beta")?;
    check_len(fm.d, xi.dim())?;
    let sb = beta.sqrt();
    let mut sketch = vec![0.0; fm.output_len()];
    for p in xi.patterns() {
        let u: Vec<f64> = p.iter().map(|x| sb * x).collect();
        for (s, f) in sketch.iter_mut().zip(rff_map(&u, fm)?) {
            *s += f;
        }
    }
    Ok(DistributedMemory {
        sketch,
        beta,
        count: xi.count(),
    })
}

impl DistributedMemory {
    /// Sketch of the union of two disjoint pattern sets stored with the same map.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        check_len(self.sketch.len(), other.sketch.len())?;
        if self.beta != other.beta {
            return Err(AmError::Config("sketches built with different beta".into()));
        }
        Ok(Self {
            sketch: self
                .sketch
                .iter()
                .zip(&other.sketch)
                .map(|(a, b)| a + b)
                .collect(),
            beta: self.beta,
            count: self.count + other.count,
        })
    }

    /// Stored as a bundle with the sketch row and a (beta, count) row.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let sections = vec![
            (
                "sketch".to_string(),
                PatternMatrix::real_from_rows(&[self.sketch.clone()])?,
            ),
            (
                "params".to_string(),
                PatternMatrix::real_from_rows(&[vec![self.beta, self.count as f64]])?,
            ),
        ];
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::format::write_bundle(&mut f, &sections)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let sections = crate::format::read_bundle(&mut f)?;
        let get = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.pattern(0).to_vec())
                .ok_or_else(|| AmError::Format(format!("sketch file lacks a {name} section")))
        };
        let params = get("params")?;
        Ok(Self {
            sketch: get("sketch")?,
            beta: params[0],
            count: params[1] as usize,
        })
    }
}

/// E~(v) = -log <Phi(sqrt(beta) v), T> and its gradient.
pub fn approx_lse_energy_grad(
    v: &[f64],
    dm: &DistributedMemory,
    fm: &FeatureMap,
) -> Result<GradientReport> {
    check_len(fm.d, v.len())?;
    check_len(fm.output_len(), dm.sketch.len())?;
    let sb = dm.beta.sqrt();
    let u: Vec<f64> = v.iter().map(|x| sb * x).collect();
    let th = fm.thetas(&u);
    let c = fm.scale();
    let mut inner = 0.0;
    // derivative of the inner product w.r.t. each theta_i
    let mut dth = vec![0.0; fm.y];
    for (i, t) in th.iter().enumerate() {
        match fm.variant {
            FeatureVariant::CosPhase => {
                let a = t + fm.phases[i];
                inner += c * a.cos() * dm.sketch[i];
                dth[i] = -c * a.sin() * dm.sketch[i];
            }
            FeatureVariant::CosSinPair => {
                let (s, co) = t.sin_cos();
                let (tc, ts) = (dm.sketch[2 * i], dm.sketch[2 * i + 1]);
                inner += c * (co * tc + s * ts);
                dth[i] = c * (co * ts - s * tc);
            }
        }
    }
    if inner <= 0.0 || !inner.is_finite() {
        return Err(AmError::ApproximationBreakdown(inner));
    }
    let mut gradient = vec![0.0; v.len()];
    for (i, g) in dth.iter().enumerate() {
        for (gr, w) in gradient.iter_mut().zip(fm.frequency(i)) {
            *gr -= sb * g * w / inner;
        }
    }
    Ok(GradientReport {
        energy: -inner.ln(),
        gradient,
        active_terms: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxEnergy {
    pub memory: DistributedMemory,
    pub map: FeatureMap,
}

impl Energy for ApproxEnergy {
    fn dim(&self) -> usize {
        self.map.d
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        approx_lse_energy_grad(v, &self.memory, &self.map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalTrial {
    pub trial: usize,
    pub target: usize,
    pub success: bool,
    /// Distance from the final state to the target memory; NaN when the
    /// descent failed.
    pub distance: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub success_rate: f64,
    pub trials: Vec<RetrievalTrial>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalSetup {
    pub k: usize,
    pub beta: f64,
    /// Standard deviation of the Gaussian query noise.
    pub noise: f64,
    pub steps: usize,
    /// A trial succeeds when it ends within this distance of the target.
    pub radius: f64,
}

/// Noisy-query retrieval through the random-feature energy. Trial t draws
/// K standard normal memories and the query from stream t of `seed`, writes
/// the memories into a fresh sketch with the shared feature map and runs
/// backtracked descent with eta = 1/beta from memory t mod K plus noise.
pub fn distributed_retrieval(
    setup: &RetrievalSetup,
    fm: &FeatureMap,
    trials: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    check_positive(setup.beta, "beta")?;
    check_positive(setup.radius, "success radius")?;
    if !(setup.noise >= 0.0) || setup.k == 0 || trials == 0 {
        return Err(AmError::OutOfRange(
            "need noise >= 0, K >= 1 and at least one trial".into(),
        ));
    }
    let cfg = crate::dynamics::DescentConfig::new(1.0 / setup.beta, setup.steps)
        .with_backtracking(true)
        .with_stop_tol(1e-6);
    let rows: Vec<RetrievalTrial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, t as u64);
            let xi = crate::patterns::sample_gaussian_patterns_with(fm.d, setup.k, &mut rng)?;
            let target = t % setup.k;
            let q: Vec<f64> = xi
                .pattern(target)
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + setup.noise * z
                })
                .collect();
            let e = ApproxEnergy {
                memory: build_distributed(&xi, setup.beta, fm)?,
                map: fm.clone(),
            };
            let (distance, steps) = match crate::dynamics::descend_final(&e, &q, &cfg) {
                Ok(tr) => (
                    crate::numeric::sq_dist(tr.final_state(), xi.pattern(target)).sqrt(),
                    tr.steps_taken,
                ),
                Err(
                    AmError::ApproximationBreakdown(_)
                    | AmError::NonFinite(_)
                    | AmError::InfeasibleStart(_),
                ) => (f64::NAN, 0),
                Err(e) => return Err(e),
            };
            Ok(RetrievalTrial {
                trial: t,
                target,
                success: distance < setup.radius,
                distance,
                steps,
            })
        })
        .collect::<Result<_>>()?;
    let ok = rows.iter().filter(|r| r.success).count();
    Ok(RetrievalReport {
        success_rate: ok as f64 / trials as f64,
        trials: rows,
    })
}

/// Univariate kernel shapes in their normalized form.
#[derive(Debug, Clone, Copy)]
pub enum KernelShape {
    Epanechnikov,
    Gaussian,
    Uniform,
    Triangle,
    Biweight,
    Triweight,
    Tricube,
    Cosine,
    /// A user kernel with half-width of support (`None` = whole line,
    /// integrated over [-12, 12]).
    Custom {
        name: &'static str,
        f: fn(f64) -> f64,
        half_width: Option<f64>,
    },
}

impl KernelShape {
    pub const BUILTIN: [KernelShape; 8] = [
        KernelShape::Epanechnikov,
        KernelShape::Gaussian,
        KernelShape::Uniform,
        KernelShape::Triangle,
        KernelShape::Biweight,
        KernelShape::Triweight,
        KernelShape::Tricube,
        KernelShape::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Epanechnikov => "epanechnikov",
            Self::Gaussian => "gaussian",
            Self::Uniform => "uniform",
            Self::Triangle => "triangle",
            Self::Biweight => "biweight",
            Self::Triweight => "triweight",
            Self::Tricube => "tricube",
            Self::Cosine => "cosine",
            Self::Custom { name, .. } => name,
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::BUILTIN
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| AmError::Config(format!("unknown kernel '{s}'")))
    }

    pub fn value(&self, z: f64) -> f64 {
        let a = z.abs();
        let inside = a <= 1.0;
        let q = 1.0 - z * z;
        match self {
            Self::Epanechnikov => {
                if inside {
                    0.75 * q
                } else {
                    0.0
                }
            }
            Self::Gaussian => (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Self::Uniform => {
                if inside {
                    0.5
                } else {
                    0.0
                }
            }
            Self::Triangle => {
                if inside {
                    1.0 - a
                } else {
                    0.0
                }
            }
            Self::Biweight => {
                if inside {
                    15.0 / 16.0 * q * q
                } else {
                    0.0
                }
            }
            Self::Triweight => {
                if inside {
                    35.0 / 32.0 * q * q * q
                } else {
                    0.0
                }
            }
            Self::Tricube => {
                if inside {
                    70.0 / 81.0 * (1.0 - a * a * a).powi(3)
                } else {
                    0.0
                }
            }
            Self::Cosine => {
                if inside {
                    std::f64::consts::FRAC_PI_4 * (std::f64::consts::FRAC_PI_2 * z).cos()
                } else {
                    0.0
                }
            }
            Self::Custom { f, .. } => f(z),
        }
    }

    fn half_width(&self) -> Option<f64> {
        match self {
            Self::Gaussian => None,
            Self::Custom { half_width, .. } => *half_width,
            _ => Some(1.0),
        }
    }

    /// Integral of g(z) * kernel terms over the support.
    fn integrate<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        let (w, pieces) = match self.half_width() {
            Some(w) => (w, 8),
            None => (12.0, 48),
        };
        // even piece counts put a panel edge at the origin, where several
        // shapes have a kink
        integrate(g, -w, w, 1e-12, pieces)
    }
}

/// Integral of (p'')^2 for a standard normal density.
pub fn standard_normal_curvature() -> f64 {
    3.0 / (8.0 * std::f64::consts::PI.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelStats {
    pub name: String,
    /// int z^2 k(z) dz
    pub mu: f64,
    /// int k(z)^2 dz
    pub sigma: f64,
    /// Relative to Epanechnikov after rescaling both to mu = 1; at most 1.
    pub efficiency: f64,
    pub h_star: f64,
    pub mise_star: f64,
}

/// Leading-order MISE(h) = mu^2 h^4 R / 4 + sigma / (K h).
pub fn mise(h: f64, mu: f64, sigma: f64, curvature: f64, k: usize) -> f64 {
    mu * mu * h.powi(4) * curvature / 4.0 + sigma / (k as f64 * h)
}

/// Minimizer (sigma / (K mu^2 R))^(1/5) of `mise`.
pub fn optimal_bandwidth(mu: f64, sigma: f64, curvature: f64, k: usize) -> f64 {
    (sigma / (k as f64 * mu * mu * curvature)).powf(0.2)
}

/// (5/4) (mu^2 sigma^4 R)^(1/5) K^(-4/5), the value of `mise` at its minimizer.
pub fn optimal_mise(mu: f64, sigma: f64, curvature: f64, k: usize) -> f64 {
    1.25 * (mu * mu * sigma.powi(4) * curvature).powf(0.2) * (k as f64).powf(-0.8)
}

fn moments(shape: &KernelShape) -> Result<(f64, f64)> {
    let mass = shape.integrate(|z| shape.value(z));
    if !((mass - 1.0).abs() < 1e-6) {
        return Err(AmError::OutOfRange(format!(
            "kernel {} integrates to {mass}, not 1",
            shape.name()
        )));
    }
    for i in 0..=64 {
        let z = 0.05 * i as f64;
        let (a, b) = (shape.value(z), shape.value(-z));
        if a < 0.0 || (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(AmError::OutOfRange(format!(
                "kernel {} is not symmetric and nonnegative",
                shape.name()
            )));
        }
    }
    let mu = shape.integrate(|z| z * z * shape.value(z));
    let sigma = shape.integrate(|z| shape.value(z).powi(2));
    Ok((mu, sigma))
}

/// Kernel scale, regularity and efficiency, plus the optimal bandwidth and
/// MISE for `k` samples from a density with the given curvature functional.
pub fn kernel_stats(shape: &KernelShape, curvature: f64, k: usize) -> Result<KernelStats> {
    check_positive(curvature, "curvature functional")?;
    if k == 0 {
        return Err(AmError::InsufficientData("need at least one sample".into()));
    }
    let (mu, sigma) = moments(shape)?;
    let (mu_e, sigma_e) = moments(&KernelShape::Epanechnikov)?;
    Ok(KernelStats {
        name: shape.name().to_string(),
        mu,
        sigma,
        efficiency: mu_e.sqrt() * sigma_e / (mu.sqrt() * sigma),
        h_star: optimal_bandwidth(mu, sigma, curvature, k),
        mise_star: optimal_mise(mu, sigma, curvature, k),
    })
}

pub fn kernel_table(curvature: f64, k: usize) -> Result<Vec<KernelStats>> {
    KernelShape::BUILTIN
        .iter()
        .map(|s| kernel_stats(s, curvature, k))
        .collect()
}

pub fn write_kernel_table_csv<W: std::io::Write>(w: &mut W, rows: &[KernelStats]) -> Result<()> {
    writeln!(w, "name,mu,sigma,efficiency,h_star,mise_star")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.name,
            fmt_f64(r.mu),
            fmt_f64(r.sigma),
            fmt_f64(r.efficiency),
            fmt_f64(r.h_star),
            fmt_f64(r.mise_star)
        )?;
    }
    Ok(())
}

/// (1 / (K h)) sum_mu k((v - x_mu) / h)
pub fn kde(v: f64, samples: &[f64], h: f64, shape: &KernelShape) -> Result<f64> {
    check_positive(h, "bandwidth")?;
    if samples.is_empty() {
        return Err(AmError::InsufficientData("no samples".into()));
    }
    Ok(samples
        .iter()
        .map(|x| shape.value((v - x) / h))
        .sum::<f64>()
        / (samples.len() as f64 * h))
}

/// When exactly one LSR term is active at v, the step size s / beta (s the
/// active term's value) moves v onto that pattern in one gradient step.
/// Returns the step size and the landing point.
pub fn lsr_exact_step(xi: &PatternMatrix, v: &[f64], beta: f64) -> Result<Option<(f64, Vec<f64>)>> {
    let r = lsr_energy_grad(xi, v, beta)?;
    if r.active_terms != Some(1) {
        return Ok(None);
    }
    let s = (-r.energy).exp();
    let eta = s / beta;
    Ok(Some((
        eta,
        v.iter()
            .zip(&r.gradient)
            .map(|(x, g)| x - eta * g)
            .collect(),
    )))
}

/// Strict local minima of the 1-D LSR energy found on a uniform grid over
/// [lo, hi]. Points outside every support are skipped.
pub fn lsr_minima_1d(patterns: &[f64], beta: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(AmError::OutOfRange("grid needs at least 3 points".into()));
    }
    let xi = PatternMatrix::real_from_rows(&patterns.iter().map(|p| vec![*p]).collect::<Vec<_>>())?;
    let xs: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let es: Vec<f64> = xs
        .iter()
        .map(|x| match lsr_energy_grad(&xi, &[*x], beta) {
            Ok(r) => Ok(r.energy),
            Err(AmError::InfiniteEnergy(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok((1..n - 1)
        .filter(|&i| es[i].is_finite() && es[i] < es[i - 1] && es[i] < es[i + 1])
        .map(|i| xs[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::lse_energy_grad;
    use crate::numeric::sq_dist;

    #[test]
    fn pair_map_unit_norm() {
        let fm = FeatureMap::new(FeatureVariant::CosSinPair, 64, 3, 1).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.5, -2.0, 7.0]] {
            let p = rff_map(&x, &fm).unwrap();
            assert_eq!(p.len(), 128);
            assert!((dot(&p, &p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn both_maps_approximate_rbf() {
        for variant in [FeatureVariant::CosSinPair, FeatureVariant::CosPhase] {
            let fm = FeatureMap::new(variant, 4096, 2, 3).unwrap();
            let mut rng = rng_for(9, 0);
            let tol = if variant == FeatureVariant::CosSinPair {
                0.05
            } else {
                0.08
            };
            for _ in 0..100 {
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let k = (-0.5 * sq_dist(&a, &b)).exp();
                let approx = dot(&rff_map(&a, &fm).unwrap(), &rff_map(&b, &fm).unwrap());
                assert!((approx - k).abs() < tol, "{variant:?}: {approx} vs {k}");
            }
        }
    }

    #[test]
    fn sketch_is_additive_and_fixed_size() {
        let fm = FeatureMap::new(FeatureVariant::CosSinPair, 32, 4, 2).unwrap();
        let all = crate::patterns::sample_gaussian_patterns(4, 6, 5).unwrap();
        let rows = all.to_rows();
        let a = PatternMatrix::real_from_rows(&rows[..2]).unwrap();
        let b = PatternMatrix::real_from_rows(&rows[2..]).unwrap();
        let t = build_distributed(&all, 2.0, &fm).unwrap();
        let m = build_distributed(&a, 2.0, &fm)
            .unwrap()
            .merge(&build_distributed(&b, 2.0, &fm).unwrap())
            .unwrap();
        for (x, y) in t.sketch.iter().zip(&m.sketch) {
            assert!((x - y).abs() < 1e-12);
        }
        let one = PatternMatrix::real_from_rows(&rows[..1]).unwrap();
        let s1 = build_distributed(&one, 2.0, &fm).unwrap();
        let u: Vec<f64> = rows[0].iter().map(|x| 2f64.sqrt() * x).collect();
        assert_eq!(s1.sketch, rff_map(&u, &fm).unwrap());
        for k in [1, 10, 1000] {
            let p = crate::patterns::sample_gaussian_patterns(4, k, 1).unwrap();
            assert_eq!(build_distributed(&p, 1.0, &fm).unwrap().sketch.len(), 64);
        }
    }

    #[test]
    fn approx_gradient_fd() {
        for variant in [FeatureVariant::CosSinPair, FeatureVariant::CosPhase] {
            let fm = FeatureMap::new(variant, 256, 3, 4).unwrap();
            let xi = crate::patterns::sample_gaussian_patterns(3, 4, 6).unwrap();
            let dm = build_distributed(&xi, 1.0, &fm).unwrap();
            let v = xi.pattern(0).iter().map(|x| x + 0.1).collect::<Vec<_>>();
            let r = approx_lse_energy_grad(&v, &dm, &fm).unwrap();
            for i in 0..3 {
                let h = 1e-5;
                let mut a = v.clone();
                let mut b = v.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (approx_lse_energy_grad(&a, &dm, &fm).unwrap().energy
                    - approx_lse_energy_grad(&b, &dm, &fm).unwrap().energy)
                    / (2.0 * h);
                assert!((fd - r.gradient[i]).abs() / fd.abs().max(1e-3) < 1e-6);
            }
        }
    }

    #[test]
    fn approx_tracks_exact_near_patterns() {
        let xi = crate::patterns::sample_gaussian_patterns(4, 5, 8).unwrap();
        let fm = FeatureMap::new(FeatureVariant::CosSinPair, 8192, 4, 1).unwrap();
        let dm = build_distributed(&xi, 1.0, &fm).unwrap();
        let v: Vec<f64> = xi.pattern(2).iter().map(|x| x + 0.05).collect();
        let e = lse_energy_grad(&xi, &v, 1.0).unwrap().energy;
        let a = approx_lse_energy_grad(&v, &dm, &fm).unwrap().energy;
        assert!((e - a).abs() < 0.05);
    }

    #[test]
    fn breakdown_far_away() {
        let xi = PatternMatrix::real_from_rows(&[vec![0.0, 0.0]]).unwrap();
        let fm = FeatureMap::new(FeatureVariant::CosSinPair, 16, 2, 2).unwrap();
        let dm = build_distributed(&xi, 1.0, &fm).unwrap();
        let found = (0..200).any(|i| {
            let v = [10.0 + 0.37 * i as f64, -3.0];
            matches!(
                approx_lse_energy_grad(&v, &dm, &fm),
                Err(AmError::ApproximationBreakdown(_))
            )
        });
        assert!(found);
    }

    #[test]
    fn epanechnikov_moments() {
        let s = kernel_stats(&KernelShape::Epanechnikov, standard_normal_curvature(), 100).unwrap();
        assert!((s.mu - 0.2).abs() < 1e-8);
        assert!((s.sigma - 0.6).abs() < 1e-8);
        assert!((s.efficiency - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_moments() {
        let pi = std::f64::consts::PI;
        let want = [
            (KernelShape::Gaussian, 1.0, 0.5 / pi.sqrt()),
            (KernelShape::Uniform, 1.0 / 3.0, 0.5),
            (KernelShape::Triangle, 1.0 / 6.0, 2.0 / 3.0),
            (KernelShape::Biweight, 1.0 / 7.0, 5.0 / 7.0),
            (KernelShape::Triweight, 1.0 / 9.0, 350.0 / 429.0),
            (KernelShape::Cosine, 1.0 - 8.0 / (pi * pi), pi * pi / 16.0),
        ];
        for (k, mu, sigma) in want {
            let s = kernel_stats(&k, 1.0, 10).unwrap();
            assert!((s.mu - mu).abs() < 1e-8, "{}", k.name());
            assert!((s.sigma - sigma).abs() < 1e-8, "{}", k.name());
            assert!(s.efficiency <= 1.0);
        }
    }

    #[test]
    fn all_shapes_normalized() {
        for k in KernelShape::BUILTIN {
            assert!(
                (k.integrate(|z| k.value(z)) - 1.0).abs() < 1e-8,
                "{}",
                k.name()
            );
        }
        let bad = KernelShape::Custom {
            name: "double",
            f: |z| if z.abs() <= 1.0 { 1.0 } else { 0.0 },
            half_width: Some(1.0),
        };
        assert!(kernel_stats(&bad, 1.0, 10).is_err());
    }

    #[test]
    fn h_star_is_stationary() {
        let (mu, sigma, r, k) = (0.2, 0.6, standard_normal_curvature(), 500);
        let h = optimal_bandwidth(mu, sigma, r, k);
        let d = 1e-6;
        let slope = (mise(h + d, mu, sigma, r, k) - mise(h - d, mu, sigma, r, k)) / (2.0 * d);
        assert!(slope.abs() < 1e-8);
        assert!((mise(h, mu, sigma, r, k) - optimal_mise(mu, sigma, r, k)).abs() < 1e-14);
    }

    #[test]
    fn kde_integrates_to_one() {
        let samples = [0.0, 0.5, -1.2];
        let total = integrate(
            |v| kde(v, &samples, 0.3, &KernelShape::Biweight).unwrap(),
            -3.0,
            3.0,
            1e-10,
            60,
        );
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lsr_single_step_lands_on_pattern() {
        let xi = PatternMatrix::real_from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let (eta, land) = lsr_exact_step(&xi, &[0.3, -0.4], 2.0).unwrap().unwrap();
        assert!(eta > 0.0);
        assert!(land[0].abs() < 1e-12 && land[1].abs() < 1e-12);
    }

    #[test]
    fn lsr_creates_extra_minimum() {
        // support radius 1.5 around +-1: the overlap near 0 holds a third minimum
        let beta = 2.0 / 2.25;
        let m = lsr_minima_1d(&[-1.0, 1.0], beta, -3.0, 3.0, 6001).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().any(|x| x.abs() < 1e-9));
    }
}
