//! Small numerical helpers shared across modules.

use nalgebra::DMatrix;

use crate::error::{AmError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Stable log(sum exp(z)) together with the softmax weights.
///
/// Returns `(-inf, [])`-free results only for non-empty input.
pub fn log_sum_exp_weights(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
    (m + s.ln(), w)
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Upper tail of the standard normal, P(Z > x).
pub fn normal_upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// (2m-1)!! as a float; (-1)!! = 1.
pub fn double_factorial_odd(m: u32) -> f64 {
    (1..=m).map(|k| (2 * k - 1) as f64).product()
}

/// Natural log of the modified Bessel function I0(x) for x >= 0.
///
/// Power series below 20, large-argument expansion in the log domain above.
pub fn ln_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < 20.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        // I0(x) ~ e^x / sqrt(2 pi x) * sum_k ((2k-1)!!)^2 / (k! (8x)^k)
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let kf = k as f64;
            let prev = term;
            term *= (2.0 * kf - 1.0) * (2.0 * kf - 1.0) / (kf * 8.0 * x);
            if term.abs() >= prev.abs() || term.abs() < 1e-17 * sum {
                break;
            }
            sum += term;
        }
        x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
    }
}

/// Adaptive Simpson quadrature on [a, b] to absolute tolerance `tol`.
///
/// The interval is pre-split into `pieces` panels so narrow features are not
/// missed by the first coarse estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, pieces: usize) -> f64 {
    let pieces = pieces.max(1);
    let h = (b - a) / pieces as f64;
    let per = tol / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = if i + 1 == pieces { b } else { lo + h };
            let (flo, fhi) = (f(lo), f(hi));
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fm + fhi);
            simpson_rec(&f, lo, hi, flo, fm, fhi, whole, per, 50)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Smallest eigenvalue of a symmetric n x n matrix given row-major.
pub fn min_eigenvalue(n: usize, a: &[f64]) -> Result<f64> {
    if a.len() != n * n || n == 0 {
        return Err(AmError::InvalidDimension(format!(
            "expected {n}x{n} matrix"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(AmError::NonFinite("matrix entries".into()));
    }
    let m = DMatrix::from_row_slice(n, n, a);
    let sym = (&m + m.transpose()) * 0.5;
    Ok(sym
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

/// Ordinary least squares fit y = a + b x, returning (a, b, r^2).
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AmError::InsufficientData(
            "linear fit needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(AmError::InsufficientData("x values are all equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok((a, b, r2))
}

/// Formats with 17 significant digits, which round-trips every f64.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive() {
        let z = [0.1, -2.0, 3.5];
        let naive = z.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z) - naive).abs() < 1e-14);
        let (l, w) = log_sum_exp_weights(&z);
        assert!((l - naive).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_upper_tail(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_upper_tail(2.576) - 0.004997532).abs() < 1e-8);
        assert!((normal_upper_tail(-1.0) - 0.841344746).abs() < 1e-8);
    }

    #[test]
    fn double_factorials() {
        assert_eq!(double_factorial_odd(0), 1.0);
        assert_eq!(double_factorial_odd(1), 1.0);
        assert_eq!(double_factorial_odd(2), 3.0);
        assert_eq!(double_factorial_odd(3), 15.0);
        assert_eq!(double_factorial_odd(4), 105.0);
    }

    #[test]
    fn bessel_matches_integral_form() {
        // I0(x) = (1/pi) int_0^pi exp(x cos t) dt, evaluated in the log domain
        for &x in &[0.0, 0.3, 1.0, 5.0, 19.9, 20.0, 20.1, 35.0, 80.0] {
            let q = integrate(
                |t: f64| (x * (t.cos() - 1.0)).exp(),
                0.0,
                std::f64::consts::PI,
                1e-13,
                16,
            );
            let reference = x + (q / std::f64::consts::PI).ln();
            assert!(
                (ln_bessel_i0(x) - reference).abs() < 1e-10,
                "x={x}: {} vs {reference}",
                ln_bessel_i0(x)
            );
        }
    }

    #[test]
    fn simpson_integrates_polynomials_and_gaussian() {
        let v = integrate(|x| x * x, -1.0, 1.0, 1e-12, 1);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        let g = integrate(|x: f64| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-12, 16);
        assert!((g - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn min_eig_of_known_matrix() {
        let l = min_eigenvalue(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 2.0 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y).unwrap();
        assert!((a - 0.5).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fmt_round_trips() {
        for &x in &[0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
