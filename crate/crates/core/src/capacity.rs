//! Storage capacity: closed-form noise statistics and Monte Carlo estimates.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{local_field, retrieve};
use crate::energies::Separation;
use crate::error::{AmError, Result};
use crate::numeric::{double_factorial_odd, linear_fit, normal_upper_tail};
use crate::patterns::{corrupt_state_with, rng_for, sample_binary_patterns_with};

/// Two-sided 99% normal quantile, the default capacity margin.
pub const DEFAULT_ALPHA: f64 = 2.576;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapacityTheory {
    pub n: u32,
    pub k: usize,
    pub d: usize,
    pub alpha: f64,
}

impl CapacityTheory {
    pub fn new(n: u32, k: usize, d: usize) -> Self {
        Self {
            n,
            k,
            d,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryStats {
    /// (2n-3)!! K D^(n-1)
    pub variance: f64,
    /// g(f(D-1) / Sigma), g the standard normal upper tail
    pub p_error: f64,
    /// D^(n-1) / (alpha^2 (2n-3)!!)
    pub k_max_bound: f64,
}

pub fn theory_stats(t: &CapacityTheory) -> Result<TheoryStats> {
    if t.n < 2 {
        return Err(AmError::OutOfRange(format!(
            "exponent n must be >= 2, got {}",
            t.n
        )));
    }
    if t.k == 0 || t.d == 0 {
        return Err(AmError::InvalidDimension("K and D must be positive".into()));
    }
    if !(t.alpha > 0.0) {
        return Err(AmError::OutOfRange("alpha must be positive".into()));
    }
    let df = double_factorial_odd(t.n - 1);
    let dn1 = (t.d as f64).powi(t.n as i32 - 1);
    let variance = df * t.k as f64 * dn1;
    let signal = (t.d as f64 - 1.0).powi(t.n as i32 - 1);
    Ok(TheoryStats {
        variance,
        p_error: normal_upper_tail(signal / variance.sqrt()),
        k_max_bound: dn1 / (t.alpha * t.alpha * df),
    })
}

/// Sum of m independent uniform +-1 variables.
fn sample_spin_sum<R: Rng + ?Sized>(m: usize, rng: &mut R) -> i64 {
    let mut ones = 0u32;
    let mut left = m;
    while left >= 64 {
        ones += rng.random::<u64>().count_ones();
        left -= 64;
    }
    if left > 0 {
        ones += (rng.random::<u64>() & ((1u64 << left) - 1)).count_ones();
    }
    2 * ones as i64 - m as i64
}

/// Exact E[X^order] for X a sum of m independent +-1 spins.
pub fn exact_spin_sum_moment(m: usize, order: u32) -> f64 {
    // binomial probabilities built in the log domain to stay finite for large m
    let ln2 = std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for k in 0..=m {
        if k > 0 {
            ln_c += ((m - k + 1) as f64).ln() - (k as f64).ln();
        }
        let x = 2.0 * k as f64 - m as f64;
        total += (ln_c - m as f64 * ln2).exp() * x.powi(order as i32);
    }
    total
}

const CHUNK: usize = 4096;

/// Mean and standard error of `g(sample)` over `samples` draws, computed
/// in fixed chunks with one random stream each.
fn chunked_mean<G>(samples: usize, seed: u64, g: G) -> (f64, f64)
where
    G: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..len {
                let x = g(&mut rng);
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .collect();
    let n = samples as f64;
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub empirical: f64,
    pub std_error: f64,
    /// Leading-order (2p-1)!! D^p
    pub theory: f64,
    /// Exact finite-size moment of a sum of D-1 spins
    pub exact: f64,
}

/// Empirical E[Xi^order] for Xi = sum_{j=2}^D xi_j.
pub fn empirical_moment(d: usize, order: u32, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if d < 2 || samples == 0 {
        return Err(AmError::InvalidDimension(
            "need D >= 2 and at least one sample".into(),
        ));
    }
    Ok(chunked_mean(samples, seed, |rng| {
        (sample_spin_sum(d - 1, rng) as f64).powi(order as i32)
    }))
}

pub fn moment_check(d: usize, p: u32, samples: usize, seed: u64) -> Result<MomentCheck> {
    if p == 0 {
        return Err(AmError::OutOfRange("moment index p must be >= 1".into()));
    }
    let (empirical, std_error) = empirical_moment(d, 2 * p, samples, seed)?;
    Ok(MomentCheck {
        empirical,
        std_error,
        theory: double_factorial_odd(p) * (d as f64).powi(p as i32),
        exact: exact_spin_sum_moment(d - 1, 2 * p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlipRateEstimate {
    /// Flipped spins over trials * D.
    pub rate: f64,
    pub trials: usize,
    /// 95% normal-approximation half width of `rate`.
    pub confidence_halfwidth: f64,
    /// Fraction of trials in which at least one spin of the memory flipped.
    pub pattern_failure_rate: f64,
}

/// Flipped spins of memory 1 after one synchronous evaluation of the update
/// rule started at that memory.
fn one_step_flips<R: Rng + ?Sized>(sep: Separation, d: usize, k: usize, rng: &mut R) -> usize {
    let xi = sample_binary_patterns_with(d, k, rng).expect("validated sizes");
    let s = xi.pattern(0);
    let m: Vec<f64> = xi.patterns().map(|p| crate::numeric::dot(p, s)).collect();
    let mut h = vec![0.0; k];
    (0..d)
        .filter(|&i| {
            for (mu, p) in xi.patterns().enumerate() {
                h[mu] = m[mu] - p[i] * s[i];
            }
            let new = if local_field(&xi, i, &h, sep) >= 0.0 {
                1.0
            } else {
                -1.0
            };
            new != s[i]
        })
        .count()
}

pub fn empirical_flip_rate(
    sep: Separation,
    d: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<FlipRateEstimate> {
    if d == 0 || k == 0 {
        return Err(AmError::InvalidDimension("K and D must be positive".into()));
    }
    if trials == 0 {
        return Err(AmError::OutOfRange("at least one trial is required".into()));
    }
    let flips: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| one_step_flips(sep, d, k, &mut rng_for(seed, t as u64)))
        .collect();
    let total: usize = flips.iter().sum();
    let spins = (trials * d) as f64;
    let rate = total as f64 / spins;
    Ok(FlipRateEstimate {
        rate,
        trials,
        confidence_halfwidth: 1.96 * (rate * (1.0 - rate) / spins).sqrt(),
        pattern_failure_rate: flips.iter().filter(|&&f| f > 0).count() as f64 / trials as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmaxEstimate {
    pub k_hat: usize,
    /// Every (K, estimate) evaluated during the sweep, in order.
    pub sweep: Vec<(usize, FlipRateEstimate)>,
}

/// Largest K whose flip rate stays at or below `target_rate`: doubling from
/// K = 1 to bracket, then 8 bisection rounds. Every K reuses the same trial
/// streams.
pub fn estimate_kmax(
    sep: Separation,
    d: usize,
    target_rate: f64,
    trials: usize,
    seed: u64,
    k_limit: usize,
) -> Result<KmaxEstimate> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(AmError::OutOfRange(format!(
            "target rate must lie in (0, 1), got {target_rate}"
        )));
    }
    let mut sweep = Vec::new();
    let mut eval = |k: usize| -> Result<bool> {
        let est = empirical_flip_rate(sep, d, k, trials, seed)?;
        sweep.push((k, est));
        Ok(est.rate <= target_rate)
    };
    if !eval(1)? {
        return Ok(KmaxEstimate { k_hat: 0, sweep });
    }
    let mut lo = 1;
    let mut hi = 2;
    loop {
        if hi > k_limit {
            return Err(AmError::OutOfRange(format!(
                "flip rate stayed below target up to K = {k_limit}"
            )));
        }
        if eval(hi)? {
            lo = hi;
            hi *= 2;
        } else {
            break;
        }
    }
    for _ in 0..8 {
        if hi - lo <= 1 {
            break;
        }
        let mid = lo + (hi - lo) / 2;
        if eval(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(KmaxEstimate { k_hat: lo, sweep })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryTrial {
    pub trial: usize,
    /// Final state equals the stored memory bit for bit.
    pub exact: bool,
    /// Normalized overlap of the final state with the memory.
    pub overlap: f64,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub success_rate: f64,
    pub confidence_halfwidth: f64,
    pub trials: Vec<RecoveryTrial>,
}

/// Recall from corruption: per trial, fresh patterns, memory 1 with `flips`
/// random bits flipped, asynchronous sweeps until a fixed point. Trial t
/// draws everything from stream t of `seed`.
pub fn recovery_experiment(
    sep: Separation,
    d: usize,
    k: usize,
    flips: usize,
    trials: usize,
    max_sweeps: usize,
    seed: u64,
) -> Result<RecoveryReport> {
    if d == 0 || k == 0 {
        return Err(AmError::InvalidDimension("K and D must be positive".into()));
    }
    if trials == 0 {
        return Err(AmError::OutOfRange("at least one trial is required".into()));
    }
    if flips > d {
        return Err(AmError::OutOfRange(format!(
            "cannot flip {flips} of {d} bits"
        )));
    }
    let rows: Vec<RecoveryTrial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, t as u64);
            let xi = sample_binary_patterns_with(d, k, &mut rng)?;
            let q = corrupt_state_with(xi.pattern(0), flips, &mut rng)?;
            let r = retrieve(&xi, &q, sep, max_sweeps, rng.random())?;
            Ok(RecoveryTrial {
                trial: t,
                exact: r.state.as_slice() == xi.pattern(0),
                overlap: crate::numeric::dot(&r.state, xi.pattern(0)) / d as f64,
                sweeps: r.sweeps,
                converged: r.converged,
            })
        })
        .collect::<Result<_>>()?;
    let p = rows.iter().filter(|r| r.exact).count() as f64 / trials as f64;
    Ok(RecoveryReport {
        success_rate: p,
        confidence_halfwidth: 1.96 * (p * (1.0 - p) / trials as f64).sqrt(),
        trials: rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares fit of log K against log D.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(AmError::InsufficientData(format!(
            "scaling fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(d, k)| !(d > 0.0 && k > 0.0)) {
        return Err(AmError::OutOfRange(
            "scaling fit points must be positive".into(),
        ));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (intercept, slope, r_squared) = linear_fit(&x, &y)?;
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseVariance {
    /// Mean of noise^2 over the samples.
    pub empirical: f64,
    pub std_error: f64,
    /// (2n-3)!! K D^(n-1)
    pub theory: f64,
    /// (K-1) E[f(Xi_{D-1})^2], the exact variance of the sampled quantity.
    pub exact: f64,
}

/// Samples the noise term sum_{mu>=2} xi^mu_i f(sum_{j != i} xi^mu_j xi^1_j)
/// for spin i = 0 with fresh patterns per sample.
pub fn sample_noise_variance(
    n: u32,
    d: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<NoiseVariance> {
    if n < 2 {
        return Err(AmError::OutOfRange(format!(
            "exponent n must be >= 2, got {n}"
        )));
    }
    if d < 2 || k < 2 || samples == 0 {
        return Err(AmError::InvalidDimension(
            "need D >= 2, K >= 2 and at least one sample".into(),
        ));
    }
    let sep = Separation::Power(n);
    let (empirical, std_error) = chunked_mean(samples, seed, |rng| {
        let xi = sample_binary_patterns_with(d, k, rng).expect("validated sizes");
        let target = xi.pattern(0);
        let noise: f64 = xi
            .patterns()
            .skip(1)
            .map(|p| {
                let arg: f64 = (1..d).map(|j| p[j] * target[j]).sum();
                p[0] * sep.deriv(arg)
            })
            .sum();
        noise * noise
    });
    let theory = theory_stats(&CapacityTheory::new(n, k, d))?.variance;
    let exact = (k - 1) as f64 * exact_spin_sum_moment(d - 1, 2 * (n - 1));
    Ok(NoiseVariance {
        empirical,
        std_error,
        theory,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_memory_always_recovered() {
        let r = recovery_experiment(Separation::Power(2), 30, 1, 5, 20, 10, 3).unwrap();
        assert_eq!(r.success_rate, 1.0);
        assert!(r.trials.iter().all(|t| t.overlap == 1.0 && t.converged));
        assert!(recovery_experiment(Separation::Exp, 4, 2, 5, 1, 10, 0).is_err());
    }

    #[test]
    fn theory_values() {
        assert_eq!(
            theory_stats(&CapacityTheory::new(2, 100, 64))
                .unwrap()
                .variance,
            6400.0
        );
        assert_eq!(
            theory_stats(&CapacityTheory::new(3, 10, 10))
                .unwrap()
                .variance,
            3000.0
        );
        let b = theory_stats(&CapacityTheory::new(2, 1, 1000))
            .unwrap()
            .k_max_bound;
        assert!((b - 1000.0 / (2.576f64 * 2.576)).abs() < 1e-9);
        assert!((b - 150.7).abs() < 0.05);
    }

    #[test]
    fn p_error_monotone() {
        let p = |k, d| theory_stats(&CapacityTheory::new(3, k, d)).unwrap().p_error;
        assert!(p(10, 50) < p(20, 50));
        assert!(p(20, 60) < p(20, 50));
    }

    #[test]
    fn exact_moments() {
        assert!((exact_spin_sum_moment(100, 2) - 100.0).abs() < 1e-9);
        assert!((exact_spin_sum_moment(100, 4) - (3.0 * 1e4 - 200.0)).abs() < 1e-6);
        assert!(exact_spin_sum_moment(7, 3).abs() < 1e-12);
    }

    #[test]
    fn moment_check_p1() {
        let m = moment_check(101, 1, 100_000, 3).unwrap();
        assert_eq!(m.theory, 101.0);
        assert!((m.empirical - m.theory).abs() < 0.1 * m.theory);
        assert!((m.empirical - m.exact).abs() < 4.0 * m.std_error);
        assert_eq!(
            moment_check(101, 2, 10, 1).unwrap().theory,
            3.0 * 101.0 * 101.0
        );
        let (odd, se) = empirical_moment(51, 3, 50_000, 4).unwrap();
        assert!(odd.abs() < 4.0 * se);
    }

    #[test]
    fn flip_rate_limits() {
        assert_eq!(
            empirical_flip_rate(Separation::Power(2), 30, 1, 20, 1)
                .unwrap()
                .rate,
            0.0
        );
        assert!(
            empirical_flip_rate(Separation::Power(2), 100, 1000, 20, 1)
                .unwrap()
                .rate
                > 0.01
        );
        assert!(
            empirical_flip_rate(Separation::Power(2), 100, 5, 200, 1)
                .unwrap()
                .rate
                < 0.001
        );
    }

    #[test]
    fn flip_rate_is_deterministic() {
        let a = empirical_flip_rate(Separation::Power(3), 40, 30, 50, 9).unwrap();
        let b = empirical_flip_rate(Separation::Power(3), 40, 30, 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_exact_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&d| (d, 0.3 * d * d))
            .collect();
        let f = scaling_fit(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!(matches!(
            scaling_fit(&pts[..2]),
            Err(AmError::InsufficientData(_))
        ));
    }

    #[test]
    fn kmax_n2_bracket() {
        let e = estimate_kmax(Separation::Power(2), 200, 0.01, 100, 5, 1 << 16).unwrap();
        assert!((16..=60).contains(&e.k_hat), "{}", e.k_hat);
    }
}
