//! Dense associative memory energies with closed-form gradients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_positive, AmError, Result};
use crate::format::load_patterns;
use crate::numeric::{dot, log_sum_exp_weights, sq_dist};
use crate::patterns::PatternMatrix;

/// Energy value and gradient at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub energy: f64,
    pub gradient: Vec<f64>,
    /// Number of kernel terms with non-empty support (log-sum-relu only).
    pub active_terms: Option<usize>,
}

/// A differentiable energy over R^D.
pub trait Energy: Sync {
    fn dim(&self) -> usize;

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport>;

    fn energy(&self, v: &[f64]) -> Result<f64> {
        Ok(self.energy_grad(v)?.energy)
    }
}

/// Separation function F and its derivative f.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Separation {
    /// z^n / n
    Power(u32),
    Exp,
    /// max(0, 1 + z)
    ShiftedRelu,
}

impl Separation {
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Separation::Power(n) => z.powi(n as i32) / n as f64,
            Separation::Exp => z.exp(),
            Separation::ShiftedRelu => (1.0 + z).max(0.0),
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match *self {
            Separation::Power(n) => z.powi(n as i32 - 1),
            Separation::Exp => z.exp(),
            Separation::ShiftedRelu => {
                if 1.0 + z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Separation::Power(n) if *n < 2 => Err(AmError::OutOfRange(format!(
                "power exponent must be >= 2, got {n}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    Identity,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    Dot,
    /// -1/2 |v - xi|^2
    NegHalfSqEuclid,
    /// -|v - xi|^2
    NegSqEuclid,
}

impl Similarity {
    fn value(&self, v: &[f64], xi: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(v, xi),
            Similarity::NegHalfSqEuclid => -0.5 * sq_dist(v, xi),
            Similarity::NegSqEuclid => -sq_dist(v, xi),
        }
    }

    /// acc += w * grad_v S(v, xi)
    fn add_grad(&self, v: &[f64], xi: &[f64], w: f64, acc: &mut [f64]) {
        match self {
            Similarity::Dot => {
                for (a, x) in acc.iter_mut().zip(xi) {
                    *a += w * x;
                }
            }
            Similarity::NegHalfSqEuclid => {
                for ((a, x), y) in acc.iter_mut().zip(xi).zip(v) {
                    *a += w * (x - y);
                }
            }
            Similarity::NegSqEuclid => {
                for ((a, x), y) in acc.iter_mut().zip(xi).zip(v) {
                    *a += w * (2.0 * (x - y));
                }
            }
        }
    }
}

/// E(v) = -Q( sum_mu F(beta S[v, xi^mu]) ).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    pub patterns: PatternMatrix,
    pub q: Scaling,
    pub f: Separation,
    pub s: Similarity,
    pub beta: f64,
}

impl EnergySpec {
    pub fn new(
        patterns: PatternMatrix,
        q: Scaling,
        f: Separation,
        s: Similarity,
        beta: f64,
    ) -> Result<Self> {
        check_positive(beta, "beta")?;
        f.validate()?;
        Ok(Self {
            patterns,
            q,
            f,
            s,
            beta,
        })
    }

    pub fn lse(patterns: PatternMatrix, beta: f64) -> Result<Self> {
        Self::new(
            patterns,
            Scaling::Log,
            Separation::Exp,
            Similarity::NegHalfSqEuclid,
            beta,
        )
    }

    pub fn lsr(patterns: PatternMatrix, beta: f64) -> Result<Self> {
        Self::new(
            patterns,
            Scaling::Log,
            Separation::ShiftedRelu,
            Similarity::NegHalfSqEuclid,
            beta,
        )
    }

    /// Classic Hopfield form: identity Q, F = z^2/2, dot similarity.
    pub fn chn(patterns: PatternMatrix, beta: f64) -> Result<Self> {
        Self::new(
            patterns,
            Scaling::Identity,
            Separation::Power(2),
            Similarity::Dot,
            beta,
        )
    }

    /// Parses `key=value` lines: q, f, n (for f=power), s, beta, patterns.
    /// Relative pattern paths resolve against `base`.
    pub fn parse_kv(text: &str, base: &Path) -> Result<Self> {
        let mut q = None;
        let mut f = None;
        let mut n = None;
        let mut s = None;
        let mut beta = None;
        let mut path = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AmError::Config(format!("expected key=value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "q" => {
                    q = Some(match v {
                        "identity" => Scaling::Identity,
                        "log" => Scaling::Log,
                        _ => return Err(AmError::Config(format!("unknown q '{v}'"))),
                    })
                }
                "f" => f = Some(v.to_string()),
                "n" => {
                    n = Some(
                        v.parse::<u32>()
                            .map_err(|e| AmError::Config(format!("n: {e}")))?,
                    )
                }
                "s" => {
                    s = Some(match v {
                        "dot" => Similarity::Dot,
                        "neghalfsq" => Similarity::NegHalfSqEuclid,
                        "negsq" => Similarity::NegSqEuclid,
                        _ => return Err(AmError::Config(format!("unknown s '{v}'"))),
                    })
                }
                "beta" => {
                    beta = Some(
                        v.parse::<f64>()
                            .map_err(|e| AmError::Config(format!("beta: {e}")))?,
                    )
                }
                "patterns" => path = Some(v.to_string()),
                _ => return Err(AmError::Config(format!("unknown key '{k}'"))),
            }
        }
        let f = match f.as_deref() {
            Some("exp") => Separation::Exp,
            Some("shifted-relu") | Some("relu") => Separation::ShiftedRelu,
            Some("power") => {
                Separation::Power(n.ok_or_else(|| AmError::Config("f=power needs n".into()))?)
            }
            Some(other) => return Err(AmError::Config(format!("unknown f '{other}'"))),
            None => return Err(AmError::Config("missing key f".into())),
        };
        let path = path.ok_or_else(|| AmError::Config("missing key patterns".into()))?;
        let patterns = load_patterns(&base.join(path))?;
        Self::new(
            patterns,
            q.ok_or_else(|| AmError::Config("missing key q".into()))?,
            f,
            s.ok_or_else(|| AmError::Config("missing key s".into()))?,
            beta.ok_or_else(|| AmError::Config("missing key beta".into()))?,
        )
    }

    pub fn to_kv(&self, patterns_path: &str) -> String {
        let q = match self.q {
            Scaling::Identity => "identity",
            Scaling::Log => "log",
        };
        let f = match self.f {
            Separation::Power(n) => format!("power\nn={n}"),
            Separation::Exp => "exp".to_string(),
            Separation::ShiftedRelu => "shifted-relu".to_string(),
        };
        let s = match self.s {
            Similarity::Dot => "dot",
            Similarity::NegHalfSqEuclid => "neghalfsq",
            Similarity::NegSqEuclid => "negsq",
        };
        format!(
            "q={q}\nf={f}\ns={s}\nbeta={}\npatterns={patterns_path}\n",
            self.beta
        )
    }
}

impl Energy for EnergySpec {
    fn dim(&self) -> usize {
        self.patterns.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        general_energy_grad(self, v)
    }
}

pub fn general_energy_grad(spec: &EnergySpec, v: &[f64]) -> Result<GradientReport> {
    let xi = &spec.patterns;
    xi.check_state(v)?;
    let beta = spec.beta;
    let z: Vec<f64> = xi.patterns().map(|p| beta * spec.s.value(v, p)).collect();
    let d = v.len();
    let mut acc = vec![0.0; d];
    let (energy, scale) = match (spec.q, spec.f) {
        (Scaling::Log, Separation::Exp) => {
            let (lse, p) = log_sum_exp_weights(&z);
            for (mu, xm) in xi.patterns().enumerate() {
                spec.s.add_grad(v, xm, p[mu], &mut acc);
            }
            (-lse, beta)
        }
        (Scaling::Log, f) => {
            let total: f64 = z.iter().map(|&x| f.value(x)).sum();
            if !(total > 0.0) {
                return Err(AmError::InfiniteEnergy(format!(
                    "log argument {total} is not positive"
                )));
            }
            for (mu, xm) in xi.patterns().enumerate() {
                let w = f.deriv(z[mu]);
                if w != 0.0 {
                    spec.s.add_grad(v, xm, w, &mut acc);
                }
            }
            (-total.ln(), beta / total)
        }
        (Scaling::Identity, f) => {
            let total: f64 = z.iter().map(|&x| f.value(x)).sum();
            for (mu, xm) in xi.patterns().enumerate() {
                let w = f.deriv(z[mu]);
                if w != 0.0 {
                    spec.s.add_grad(v, xm, w, &mut acc);
                }
            }
            (-total, beta)
        }
    };
    let gradient: Vec<f64> = acc.iter().map(|a| -(scale * a)).collect();
    check_finite(energy, "energy")?;
    let active_terms = match spec.f {
        Separation::ShiftedRelu => Some(z.iter().filter(|&&x| 1.0 + x > 0.0).count()),
        _ => None,
    };
    Ok(GradientReport {
        energy,
        gradient,
        active_terms,
    })
}

/// Log-sum-exp energy -log sum_mu exp(-(beta/2)|v - xi^mu|^2).
#[derive(Debug, Clone, PartialEq)]
pub struct LseEnergy {
    pub patterns: PatternMatrix,
    pub beta: f64,
}

impl LseEnergy {
    pub fn new(patterns: PatternMatrix, beta: f64) -> Result<Self> {
        check_positive(beta, "beta")?;
        Ok(Self { patterns, beta })
    }
}

impl Energy for LseEnergy {
    fn dim(&self) -> usize {
        self.patterns.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        lse_energy_grad(&self.patterns, v, self.beta)
    }
}

pub fn lse_energy_grad(xi: &PatternMatrix, v: &[f64], beta: f64) -> Result<GradientReport> {
    xi.check_state(v)?;
    let z: Vec<f64> = xi
        .patterns()
        .map(|p| beta * (-0.5 * sq_dist(v, p)))
        .collect();
    let (lse, p) = log_sum_exp_weights(&z);
    let mut acc = vec![0.0; v.len()];
    for (mu, xm) in xi.patterns().enumerate() {
        for ((a, x), y) in acc.iter_mut().zip(v).zip(xm) {
            *a += p[mu] * (x - y);
        }
    }
    let gradient = acc.iter().map(|a| beta * a).collect();
    let energy = -lse;
    check_finite(energy, "log-sum-exp energy")?;
    Ok(GradientReport {
        energy,
        gradient,
        active_terms: None,
    })
}

/// Log-sum-relu energy -log sum_mu max(0, 1 - (beta/2)|v - xi^mu|^2).
#[derive(Debug, Clone, PartialEq)]
pub struct LsrEnergy {
    pub patterns: PatternMatrix,
    pub beta: f64,
}

impl LsrEnergy {
    pub fn new(patterns: PatternMatrix, beta: f64) -> Result<Self> {
        check_positive(beta, "beta")?;
        Ok(Self { patterns, beta })
    }

    /// Radius sqrt(2/beta) of each kernel's support.
    pub fn support_radius(&self) -> f64 {
        (2.0 / self.beta).sqrt()
    }
}

impl Energy for LsrEnergy {
    fn dim(&self) -> usize {
        self.patterns.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        lsr_energy_grad(&self.patterns, v, self.beta)
    }
}

pub fn lsr_energy_grad(xi: &PatternMatrix, v: &[f64], beta: f64) -> Result<GradientReport> {
    xi.check_state(v)?;
    let mut total = 0.0;
    let mut active = 0;
    let mut acc = vec![0.0; v.len()];
    for xm in xi.patterns() {
        let t = 1.0 - 0.5 * beta * sq_dist(v, xm);
        // a term exactly at zero is on its support boundary and counts as inactive
        if t > 0.0 {
            total += t;
            active += 1;
            for ((a, x), y) in acc.iter_mut().zip(v).zip(xm) {
                *a += x - y;
            }
        }
    }
    if active == 0 {
        return Err(AmError::InfiniteEnergy(
            "state lies outside every kernel support".into(),
        ));
    }
    let gradient = acc.iter().map(|a| beta * a / total).collect();
    Ok(GradientReport {
        energy: -total.ln(),
        gradient,
        active_terms: Some(active),
    })
}

/// Dense associative memory energy -sum_mu F(<xi^mu, x>) on a spin or
/// continuous state, with the inner sum over all coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAmEnergy {
    pub patterns: PatternMatrix,
    pub f: Separation,
}

impl DenseAmEnergy {
    pub fn new(patterns: PatternMatrix, f: Separation) -> Result<Self> {
        f.validate()?;
        Ok(Self { patterns, f })
    }
}

impl Energy for DenseAmEnergy {
    fn dim(&self) -> usize {
        self.patterns.dim()
    }

    fn energy_grad(&self, v: &[f64]) -> Result<GradientReport> {
        self.patterns.check_state(v)?;
        let mut energy = 0.0;
        let mut gradient = vec![0.0; v.len()];
        for xm in self.patterns.patterns() {
            let m = dot(xm, v);
            energy -= self.f.value(m);
            let w = self.f.deriv(m);
            for (g, x) in gradient.iter_mut().zip(xm) {
                *g -= w * x;
            }
        }
        check_finite(energy, "dense associative memory energy")?;
        Ok(GradientReport {
            energy,
            gradient,
            active_terms: None,
        })
    }
}

/// -sum_mu F(sum_i xi^mu_i sigma_i)
pub fn discrete_energy(xi: &PatternMatrix, sigma: &[f64], f: Separation) -> Result<f64> {
    xi.check_state(sigma)?;
    Ok(-xi.patterns().map(|p| f.value(dot(p, sigma))).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{sample_binary_patterns, sample_gaussian_patterns};

    fn fd_check<E: Energy>(e: &E, v: &[f64], tol: f64) {
        let r = e.energy_grad(v).unwrap();
        let h = 1e-5;
        for i in 0..v.len() {
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[i] += h;
            vm[i] -= h;
            let fd = (e.energy(&vp).unwrap() - e.energy(&vm).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(r.gradient[i].abs()).max(1.0);
            assert!(
                (fd - r.gradient[i]).abs() / scale < tol,
                "coord {i}: fd {fd} vs {}",
                r.gradient[i]
            );
        }
    }

    #[test]
    fn discrete_closed_forms() {
        let xi = sample_binary_patterns(6, 1, 0).unwrap();
        let s = xi.pattern(0).to_vec();
        assert_eq!(
            discrete_energy(&xi, &s, Separation::Power(2)).unwrap(),
            -18.0
        );
        assert_eq!(
            discrete_energy(&xi, &s, Separation::Power(3)).unwrap(),
            -72.0
        );
        assert!((discrete_energy(&xi, &s, Separation::Exp).unwrap() + 6f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn lse_single_pattern_reduces_to_quadratic() {
        let xi = PatternMatrix::real_from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let v = [0.2, 0.3, -1.0];
        let r = lse_energy_grad(&xi, &v, 3.0).unwrap();
        let d2 = sq_dist(&v, xi.pattern(0));
        assert!((r.energy - 1.5 * d2).abs() < 1e-12);
        for i in 0..3 {
            assert!((r.gradient[i] - 3.0 * (v[i] - xi.pattern(0)[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_equidistant_uses_mean() {
        let xi = PatternMatrix::real_from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let v = [0.0, 0.7];
        let r = lse_energy_grad(&xi, &v, 2.0).unwrap();
        assert!((r.gradient[0]).abs() < 1e-15);
        assert!((r.gradient[1] - 2.0 * 0.7).abs() < 1e-14);
    }

    #[test]
    fn lse_fd() {
        let xi = sample_gaussian_patterns(6, 4, 3).unwrap();
        let e = LseEnergy::new(xi, 2.0).unwrap();
        fd_check(&e, &[0.1, -0.4, 0.3, 0.9, -1.1, 0.2], 1e-6);
    }

    #[test]
    fn lse_stable_at_large_beta() {
        let xi = sample_gaussian_patterns(2, 3, 1).unwrap();
        let r = lse_energy_grad(&xi, &[30.0, -30.0], 100.0).unwrap();
        assert!(r.energy.is_finite() && r.gradient.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn general_log_exp_half_sq_is_bitwise_lse() {
        let xi = sample_gaussian_patterns(5, 7, 2).unwrap();
        let v = [0.3, -0.2, 1.4, 0.0, -0.7];
        let spec = EnergySpec::lse(xi.clone(), 1.7).unwrap();
        let a = general_energy_grad(&spec, &v).unwrap();
        let b = lse_energy_grad(&xi, &v, 1.7).unwrap();
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn general_lsr_matches_lsr() {
        let xi = PatternMatrix::real_from_rows(&[vec![0.0, 0.0], vec![0.5, 0.2]]).unwrap();
        let v = [0.2, 0.1];
        let a = general_energy_grad(&EnergySpec::lsr(xi.clone(), 2.0).unwrap(), &v).unwrap();
        let b = lsr_energy_grad(&xi, &v, 2.0).unwrap();
        assert!((a.energy - b.energy).abs() < 1e-14);
        assert_eq!(a.active_terms, Some(2));
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn chn_is_half_sum_of_squared_overlaps() {
        let xi = sample_binary_patterns(9, 4, 5).unwrap();
        let sigma = sample_binary_patterns(9, 1, 6).unwrap().pattern(0).to_vec();
        let r = general_energy_grad(&EnergySpec::chn(xi.clone(), 1.0).unwrap(), &sigma).unwrap();
        let mut oracle = 0.0;
        for mu in 0..4 {
            let mut m = 0.0;
            for i in 0..9 {
                m += xi.pattern(mu)[i] * sigma[i];
            }
            oracle -= 0.5 * m * m;
        }
        assert_eq!(r.energy, oracle);
    }

    #[test]
    fn lsr_outside_support_is_infinite() {
        let xi = PatternMatrix::real_from_rows(&[vec![0.0], vec![3.0]]).unwrap();
        assert!(matches!(
            lsr_energy_grad(&xi, &[1.5], 2.0),
            Err(AmError::InfiniteEnergy(_))
        ));
        // boundary point: 1 - (2/2) * 1 = 0 exactly, inactive
        assert!(matches!(
            lsr_energy_grad(&xi, &[1.0], 2.0),
            Err(AmError::InfiniteEnergy(_))
        ));
    }

    #[test]
    fn lsr_two_active_fd() {
        let xi = PatternMatrix::real_from_rows(&[vec![-0.3], vec![0.4]]).unwrap();
        let e = LsrEnergy::new(xi, 1.0).unwrap();
        assert_eq!(e.energy_grad(&[0.1]).unwrap().active_terms, Some(2));
        fd_check(&e, &[0.1], 1e-6);
    }

    #[test]
    fn separation_derivatives() {
        for f in [
            Separation::Power(2),
            Separation::Power(3),
            Separation::Power(5),
            Separation::Exp,
        ] {
            for &z in &[-1.3, 0.4, 2.0] {
                let fd = (f.value(z + 1e-6) - f.value(z - 1e-6)) / 2e-6;
                assert!((fd - f.deriv(z)).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
        assert_eq!(Separation::ShiftedRelu.deriv(-1.0), 0.0);
        assert_eq!(Separation::ShiftedRelu.deriv(-0.5), 1.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let xi = sample_gaussian_patterns(2, 2, 1).unwrap();
        assert!(EnergySpec::lse(xi.clone(), 0.0).is_err());
        assert!(EnergySpec::new(
            xi.clone(),
            Scaling::Identity,
            Separation::Power(1),
            Similarity::Dot,
            1.0
        )
        .is_err());
        assert!(lse_energy_grad(&xi, &[1.0], 1.0).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let xi = sample_gaussian_patterns(3, 2, 1).unwrap();
        crate::format::save_patterns(&dir.path().join("p.amk"), &xi).unwrap();
        let spec = EnergySpec::new(
            xi,
            Scaling::Identity,
            Separation::Power(3),
            Similarity::Dot,
            2.5,
        )
        .unwrap();
        let text = spec.to_kv("p.amk");
        assert_eq!(EnergySpec::parse_kv(&text, dir.path()).unwrap(), spec);
        assert!(EnergySpec::parse_kv("q=log\nbogus=1\n", dir.path()).is_err());
    }
}
