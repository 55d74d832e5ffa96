//! Stored memories, states, clamping masks and seeded randomness.

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, AmError, Result};

/// A state of D neurons, real valued or with entries in {-1, +1}.
pub type StateVector = Vec<f64>;

/// Deterministic generator for `seed`, on an independent `stream`.
///
/// Trial `t` of an experiment seeded with `s` always uses `rng_for(s, t)`, so
/// results do not depend on how trials are scheduled across threads.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PatternKind {
    Binary,
    Real,
}

/// K memories of dimension D. Stored one memory per row (K x D) so each
/// memory is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMatrix {
    data: Array2<f64>,
    kind: PatternKind,
}

impl PatternMatrix {
    /// Builds from a K x D array. Binary matrices must hold only +-1.
    pub fn new(data: Array2<f64>, kind: PatternKind) -> Result<Self> {
        let (k, d) = data.dim();
        if d == 0 {
            return Err(AmError::InvalidDimension(
                "pattern dimension D must be at least 1".into(),
            ));
        }
        if k == 0 {
            return Err(AmError::InvalidDimension(
                "at least one pattern is required".into(),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(AmError::NonFinite("pattern entries".into()));
        }
        if kind == PatternKind::Binary && data.iter().any(|&x| x != 1.0 && x != -1.0) {
            return Err(AmError::OutOfRange(
                "binary patterns must contain only +1 and -1".into(),
            ));
        }
        let data = data.as_standard_layout().to_owned();
        Ok(Self { data, kind })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: PatternKind) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(k * d);
        for r in rows {
            check_len(d, r.len())?;
            flat.extend_from_slice(r);
        }
        let data = Array2::from_shape_vec((k, d), flat)
            .map_err(|e| AmError::InvalidDimension(e.to_string()))?;
        Self::new(data, kind)
    }

    pub fn real_from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_rows(rows, PatternKind::Real)
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    /// Memory `mu` as a slice of length D.
    pub fn pattern(&self, mu: usize) -> &[f64] {
        let start = mu * self.dim();
        &self.data.as_slice().expect("standard layout")[start..start + self.dim()]
    }

    pub fn patterns(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data
            .as_slice()
            .expect("standard layout")
            .chunks_exact(self.dim())
    }

    pub fn row_view(&self, mu: usize) -> ArrayView1<'_, f64> {
        self.data.row(mu)
    }

    /// The K x D backing array.
    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.patterns().map(|p| p.to_vec()).collect()
    }

    /// Same memories with every entry multiplied by `c`. The result is real.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.data.mapv(|x| x * c), PatternKind::Real)
    }

    pub fn check_state(&self, v: &[f64]) -> Result<()> {
        check_len(self.dim(), v.len())
    }
}

/// K uniform random +-1 patterns of dimension D.
pub fn sample_binary_patterns(d: usize, k: usize, seed: u64) -> Result<PatternMatrix> {
    let mut rng = rng_for(seed, 0);
    sample_binary_patterns_with(d, k, &mut rng)
}

pub fn sample_binary_patterns_with<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatternMatrix> {
    if d == 0 || k == 0 {
        return Err(AmError::InvalidDimension(format!(
            "D={d} and K={k} must both be positive"
        )));
    }
    let flat: Vec<f64> = (0..d * k)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    PatternMatrix::new(
        Array2::from_shape_vec((k, d), flat).expect("shape"),
        PatternKind::Binary,
    )
}

/// K patterns with i.i.d. standard normal entries.
pub fn sample_gaussian_patterns(d: usize, k: usize, seed: u64) -> Result<PatternMatrix> {
    if d == 0 || k == 0 {
        return Err(AmError::InvalidDimension(format!(
            "D={d} and K={k} must both be positive"
        )));
    }
    sample_gaussian_patterns_with(d, k, &mut rng_for(seed, 0))
}

pub fn sample_gaussian_patterns_with<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatternMatrix> {
    if d == 0 || k == 0 {
        return Err(AmError::InvalidDimension(format!(
            "D={d} and K={k} must both be positive"
        )));
    }
    let flat: Vec<f64> = (0..d * k).map(|_| rng.sample(StandardNormal)).collect();
    PatternMatrix::new(
        Array2::from_shape_vec((k, d), flat).expect("shape"),
        PatternKind::Real,
    )
}

/// Copy of `state` with exactly `flips` distinct coordinates negated.
pub fn corrupt_state(state: &[f64], flips: usize, seed: u64) -> Result<StateVector> {
    let mut rng = rng_for(seed, 0);
    corrupt_state_with(state, flips, &mut rng)
}

pub fn corrupt_state_with<R: Rng + ?Sized>(
    state: &[f64],
    flips: usize,
    rng: &mut R,
) -> Result<StateVector> {
    if flips > state.len() {
        return Err(AmError::OutOfRange(format!(
            "cannot flip {flips} coordinates of a {}-dimensional state",
            state.len()
        )));
    }
    let mut out = state.to_vec();
    for i in sample(rng, state.len(), flips) {
        out[i] = -out[i];
    }
    Ok(out)
}

/// Overlap sum_i xi_i sigma_i between a memory and a state.
pub fn overlap(xi: &[f64], sigma: &[f64]) -> Result<f64> {
    check_len(xi.len(), sigma.len())?;
    Ok(crate::numeric::dot(xi, sigma))
}

/// Which coordinates the dynamics may move. Clamped coordinates keep their
/// initial value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClampMask {
    free: Vec<bool>,
}

impl ClampMask {
    pub fn all_free(d: usize) -> Self {
        Self {
            free: vec![true; d],
        }
    }

    pub fn from_free(free: Vec<bool>) -> Self {
        Self { free }
    }

    /// Mask where `observed[i] == true` means coordinate i is clamped.
    pub fn from_observed(observed: &[bool]) -> Self {
        Self {
            free: observed.iter().map(|&o| !o).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn is_free(&self, i: usize) -> bool {
        self.free[i]
    }

    pub fn free(&self) -> &[bool] {
        &self.free
    }

    /// 1.0 for free coordinates, 0.0 for clamped ones.
    pub fn factor(&self, i: usize) -> f64 {
        if self.free[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_sampling_is_seeded_and_balanced() {
        let a = sample_binary_patterns(100, 3, 7).unwrap();
        let b = sample_binary_patterns(100, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 100);
        assert_eq!(a.count(), 3);
        assert!(a.as_slice().iter().all(|&x| x == 1.0 || x == -1.0));
        let c = sample_binary_patterns(100, 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            sample_binary_patterns(0, 3, 1),
            Err(AmError::InvalidDimension(_))
        ));
        assert!(matches!(
            sample_binary_patterns(3, 0, 1),
            Err(AmError::InvalidDimension(_))
        ));
    }

    #[test]
    fn binary_kind_validates_entries() {
        assert!(PatternMatrix::from_rows(&[vec![1.0, 0.5]], PatternKind::Binary).is_err());
        assert!(PatternMatrix::from_rows(&[vec![1.0, f64::NAN]], PatternKind::Real).is_err());
        assert!(PatternMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]], PatternKind::Real).is_err());
    }

    #[test]
    fn corrupt_flips_exact_count() {
        let s = vec![1.0; 20];
        let c = corrupt_state(&s, 5, 3).unwrap();
        assert_eq!(c.iter().filter(|&&x| x == -1.0).count(), 5);
        assert!(corrupt_state(&s, 21, 3).is_err());
        assert_eq!(corrupt_state(&s, 0, 3).unwrap(), s);
    }

    #[test]
    fn self_overlap_is_dimension() {
        let p = sample_binary_patterns(8, 1, 2).unwrap();
        assert_eq!(overlap(p.pattern(0), p.pattern(0)).unwrap(), 8.0);
        let neg: Vec<f64> = p.pattern(0).iter().map(|x| -x).collect();
        assert_eq!(overlap(p.pattern(0), &neg).unwrap(), -8.0);
        assert!(overlap(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn entry_mean_is_near_zero() {
        let p = sample_binary_patterns(1000, 1, 7).unwrap();
        let mean = p.as_slice().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 3.0 / 1000f64.sqrt());
    }

    #[test]
    fn corrupt_is_an_involution_and_full_flip_negates() {
        let p = sample_binary_patterns(30, 1, 5).unwrap();
        let once = corrupt_state(p.pattern(0), 7, 11).unwrap();
        let twice = corrupt_state(&once, 7, 11).unwrap();
        assert_eq!(twice, p.pattern(0));
        let all = corrupt_state(p.pattern(0), 30, 1).unwrap();
        assert!(all.iter().zip(p.pattern(0)).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn streams_are_independent() {
        let mut a = rng_for(1, 0);
        let mut b = rng_for(1, 1);
        let x: u64 = a.random();
        let y: u64 = b.random();
        assert_ne!(x, y);
    }
}
