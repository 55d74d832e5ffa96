//! k-means objectives, a Lloyd baseline, and clustering with an associative
//! memory whose stored patterns are the cluster centers (ClAM).
//!
//! The memory relocates each point by T explicit descent steps on
//! E(v) = -log sum_j exp(-beta/2 |v - c_j|^2), i.e.
//! v <- v - eta * beta * sum_j p_j (v - c_j), and the loss is the squared
//! distance travelled. Gradients w.r.t. the centers are accumulated in
//! reverse through the unrolled steps.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_positive, AmError, Result};
use crate::numeric::{fmt_f64, log_sum_exp_weights, sq_dist};
use crate::patterns::{rng_for, ClampMask, PatternMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProblem {
    /// m x d, one point per row.
    pub x: PatternMatrix,
    pub k: usize,
    pub beta: f64,
    pub eta: f64,
    pub t: usize,
    pub seed: u64,
}

impl ClusterProblem {
    pub fn new(
        x: PatternMatrix,
        k: usize,
        beta: f64,
        eta: f64,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        let p = Self {
            x,
            k,
            beta,
            eta,
            t,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.x.count() {
            return Err(AmError::OutOfRange(format!(
                "need 1 <= k <= m, got k={} m={}",
                self.k,
                self.x.count()
            )));
        }
        check_positive(self.beta, "beta")?;
        check_positive(self.eta, "eta")?;
        if self.t == 0 {
            return Err(AmError::OutOfRange("T must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stored patterns of the clustering memory, one center per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClamModel {
    pub centers: PatternMatrix,
}

fn check_shapes(x: &PatternMatrix, centers: &PatternMatrix) -> Result<()> {
    if x.count() == 0 {
        return Err(AmError::InsufficientData("no data points".into()));
    }
    if x.dim() != centers.dim() {
        return Err(AmError::DimensionMismatch {
            expected: x.dim(),
            found: centers.dim(),
        });
    }
    Ok(())
}

fn nearest(centers: &PatternMatrix, p: &[f64]) -> (usize, f64) {
    centers
        .patterns()
        .map(|c| sq_dist(p, c))
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |b, (j, d)| if d < b.1 { (j, d) } else { b },
        )
}

/// sum_i min_j |x_i - c_j|^2
pub fn kmeans_objective(x: &PatternMatrix, centers: &PatternMatrix) -> Result<f64> {
    check_shapes(x, centers)?;
    Ok(x.patterns().map(|p| nearest(centers, p).1).sum())
}

/// sum_i sum_j softmin_j(gamma d_ij) d_ij with d_ij = |x_i - c_j|^2.
pub fn soft_kmeans_objective(
    x: &PatternMatrix,
    centers: &PatternMatrix,
    gamma: f64,
) -> Result<f64> {
    check_shapes(x, centers)?;
    check_positive(gamma, "gamma")?;
    Ok(x.patterns()
        .map(|p| {
            let d: Vec<f64> = centers.patterns().map(|c| sq_dist(p, c)).collect();
            let z: Vec<f64> = d.iter().map(|v| -gamma * v).collect();
            let (_, w) = log_sum_exp_weights(&z);
            w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydResult {
    pub centers: PatternMatrix,
    pub objective: f64,
    /// Objective after every iteration of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

const LLOYD_MAX_ITERS: usize = 500;

/// D^2-weighted seeding.
fn kmeanspp<R: Rng>(x: &PatternMatrix, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let m = x.count();
    let mut centers = vec![x.pattern(rng.random_range(0..m)).to_vec()];
    let mut d: Vec<f64> = x.patterns().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, w) in d.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        let c = x.pattern(pick).to_vec();
        for (di, p) in d.iter_mut().zip(x.patterns()) {
            *di = di.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// A seeded first point, then repeatedly the point farthest from every
/// center chosen so far.
pub fn farthest_point_init(x: &PatternMatrix, k: usize, seed: u64) -> Result<PatternMatrix> {
    if k == 0 || k > x.count() {
        return Err(AmError::OutOfRange(format!(
            "need 1 <= k <= m, got k={k} m={}",
            x.count()
        )));
    }
    let mut rng = rng_for(seed, 0);
    let mut centers = vec![x.pattern(rng.random_range(0..x.count())).to_vec()];
    let mut d: Vec<f64> = x.patterns().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let (i, _) = d
            .iter()
            .enumerate()
            .fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let c = x.pattern(i).to_vec();
        for (di, p) in d.iter_mut().zip(x.patterns()) {
            *di = di.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    PatternMatrix::real_from_rows(&centers)
}

fn lloyd_once(x: &PatternMatrix, mut centers: Vec<Vec<f64>>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (k, d) = (centers.len(), x.dim());
    let mut history = Vec::new();
    let mut assign: Vec<usize> = vec![usize::MAX; x.count()];
    for _ in 0..LLOYD_MAX_ITERS {
        let cm = PatternMatrix::real_from_rows(&centers)?;
        let near: Vec<(usize, f64)> = x.patterns().map(|p| nearest(&cm, p)).collect();
        let changed = near.iter().zip(&assign).any(|(n, a)| n.0 != *a);
        assign = near.iter().map(|n| n.0).collect();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.patterns().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut dist: Vec<f64> = near.iter().map(|n| n.1).collect();
        for j in 0..k {
            if counts[j] == 0 {
                // re-seed an empty cluster at the worst-served point
                let (i, _) =
                    dist.iter()
                        .enumerate()
                        .fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                centers[j] = x.pattern(i).to_vec();
                dist[i] = 0.0;
            } else {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        history.push(kmeans_objective(
            x,
            &PatternMatrix::real_from_rows(&centers)?,
        )?);
        if !changed {
            break;
        }
    }
    Ok((centers, history))
}

/// Lloyd iterations from k-means++ seeds; keeps the best of `restarts`.
pub fn lloyd(x: &PatternMatrix, k: usize, seed: u64, restarts: usize) -> Result<LloydResult> {
    if x.count() == 0 {
        return Err(AmError::InsufficientData("no data points".into()));
    }
    if k == 0 || k > x.count() {
        return Err(AmError::OutOfRange(format!(
            "need 1 <= k <= m, got k={k} m={}",
            x.count()
        )));
    }
    let mut best: Option<LloydResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = rng_for(seed, r as u64);
        let (centers, history) = lloyd_once(x, kmeanspp(x, k, &mut rng))?;
        let centers = PatternMatrix::real_from_rows(&centers)?;
        let objective = kmeans_objective(x, &centers)?;
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(LloydResult {
                centers,
                objective,
                iterations: history.len(),
                history,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn step_weights(v: &[f64], centers: &PatternMatrix, beta: f64) -> Vec<f64> {
    let z: Vec<f64> = centers
        .patterns()
        .map(|c| -0.5 * beta * sq_dist(v, c))
        .collect();
    log_sum_exp_weights(&z).1
}

fn step(
    v: &[f64],
    centers: &PatternMatrix,
    beta: f64,
    eta: f64,
    mask: Option<&ClampMask>,
) -> Vec<f64> {
    let p = step_weights(v, centers, beta);
    let mut a = vec![0.0; v.len()];
    for (pj, c) in p.iter().zip(centers.patterns()) {
        for (ai, ci) in a.iter_mut().zip(c) {
            *ai += pj * ci;
        }
    }
    let s = eta * beta;
    v.iter()
        .zip(&a)
        .enumerate()
        .map(|(i, (vi, ai))| match mask {
            Some(m) if !m.is_free(i) => *vi,
            _ => vi - s * (vi - ai),
        })
        .collect()
}

fn initial_state(x: &[f64], mask: Option<&ClampMask>) -> Vec<f64> {
    match mask {
        Some(m) => x
            .iter()
            .enumerate()
            .map(|(i, v)| if m.is_free(i) { 0.0 } else { *v })
            .collect(),
        None => x.to_vec(),
    }
}

/// T descent steps from x. With a mask the free coordinates start at zero
/// and evolve while the observed ones stay clamped to x.
pub fn clam_forward(
    x: &[f64],
    model: &ClamModel,
    beta: f64,
    eta: f64,
    t: usize,
    mask: Option<&ClampMask>,
) -> Result<Vec<f64>> {
    model.centers.check_state(x)?;
    if let Some(m) = mask {
        crate::error::check_len(m.len(), x.len())?;
    }
    let mut v = initial_state(x, mask);
    for _ in 0..t {
        v = step(&v, &model.centers, beta, eta, mask);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// k x d, row j is dL/dc_j.
    pub grad: Vec<Vec<f64>>,
}

/// Loss and center gradient for one point.
fn point_loss_grad(
    x: &[f64],
    centers: &PatternMatrix,
    beta: f64,
    eta: f64,
    t: usize,
    mask: Option<&ClampMask>,
) -> (f64, Vec<Vec<f64>>) {
    let (k, d) = (centers.count(), centers.dim());
    let mut states = Vec::with_capacity(t + 1);
    states.push(initial_state(x, mask));
    for s in 0..t {
        let next = step(&states[s], centers, beta, eta, mask);
        states.push(next);
    }
    let free = |i: usize| mask.is_none_or(|m| m.is_free(i));
    let vt = &states[t];
    let mut loss = 0.0;
    let mut vbar = vec![0.0; d];
    for i in 0..d {
        if free(i) {
            let r = x[i] - vt[i];
            loss += r * r;
            vbar[i] = -2.0 * r;
        }
    }
    let mut cbar = vec![vec![0.0; d]; k];
    let s = eta * beta;
    for st in (0..t).rev() {
        let v = &states[st];
        let p = step_weights(v, centers, beta);
        // u = s * M * vbar is the adjoint of the softmax average a
        let u: Vec<f64> = (0..d)
            .map(|i| if free(i) { s * vbar[i] } else { 0.0 })
            .collect();
        let mut next = vbar.clone();
        for i in 0..d {
            next[i] -= u[i];
        }
        let pbar: Vec<f64> = centers
            .patterns()
            .map(|c| crate::numeric::dot(&u, c))
            .collect();
        let mean: f64 = p.iter().zip(&pbar).map(|(a, b)| a * b).sum();
        for (j, c) in centers.patterns().enumerate() {
            let zbar = p[j] * (pbar[j] - mean);
            for i in 0..d {
                let diff = v[i] - c[i];
                next[i] -= zbar * beta * diff;
                cbar[j][i] += zbar * beta * diff + p[j] * u[i];
            }
        }
        vbar = next;
    }
    (loss, cbar)
}

/// sum_i |w_i * (x_i - f(x_i))|^2 and its gradient w.r.t. the centers, where
/// w_i selects every coordinate, or only the free ones when masks are given.
pub fn clam_loss_grad(
    x: &PatternMatrix,
    model: &ClamModel,
    beta: f64,
    eta: f64,
    t: usize,
    masks: Option<&[ClampMask]>,
) -> Result<LossGrad> {
    check_shapes(x, &model.centers)?;
    if let Some(ms) = masks {
        crate::error::check_len(ms.len(), x.count())?;
        for m in ms {
            crate::error::check_len(m.len(), x.dim())?;
        }
    }
    let parts: Vec<(f64, Vec<Vec<f64>>)> = (0..x.count())
        .into_par_iter()
        .map(|i| {
            point_loss_grad(
                x.pattern(i),
                &model.centers,
                beta,
                eta,
                t,
                masks.map(|m| &m[i]),
            )
        })
        .collect();
    // ordered reduction keeps the result independent of the thread count
    let (k, d) = (model.centers.count(), model.centers.dim());
    let mut grad = vec![vec![0.0; d]; k];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (gr, pr) in grad.iter_mut().zip(&g) {
            for (a, b) in gr.iter_mut().zip(pr) {
                *a += b;
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size applied to the mean per-point gradient.
    pub lr: f64,
    pub decay: f64,
    /// Keep-probability of the per-coordinate masks; `None` trains unmasked.
    pub keep_prob: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.5,
            decay: 0.99,
            keep_prob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClamTrained {
    pub model: ClamModel,
    /// Loss at the start of each epoch.
    pub history: Vec<f64>,
}

/// Draws one mask per point; each coordinate is observed with probability
/// `keep`. At least one coordinate is left free so every point contributes.
pub fn sample_masks(m: usize, d: usize, keep: f64, seed: u64, stream: u64) -> Vec<ClampMask> {
    let mut rng = rng_for(seed, stream);
    (0..m)
        .map(|_| {
            let mut observed: Vec<bool> = (0..d).map(|_| rng.random::<f64>() < keep).collect();
            if observed.iter().all(|&o| o) {
                let i = rng.random_range(0..d);
                observed[i] = false;
            }
            ClampMask::from_observed(&observed)
        })
        .collect()
}

pub fn clam_train(problem: &ClusterProblem, cfg: &TrainConfig) -> Result<ClamTrained> {
    problem.validate()?;
    check_positive(cfg.lr, "learning rate")?;
    let x = &problem.x;
    let (m, d) = (x.count(), x.dim());
    let mut rows = farthest_point_init(x, problem.k, problem.seed)?.to_rows();
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = None;
    for epoch in 0..cfg.epochs {
        let model = ClamModel {
            centers: PatternMatrix::real_from_rows(&rows)?,
        };
        let masks = cfg
            .keep_prob
            .map(|kp| sample_masks(m, d, kp, problem.seed, epoch as u64 + 1));
        let lg = clam_loss_grad(
            x,
            &model,
            problem.beta,
            problem.eta,
            problem.t,
            masks.as_deref(),
        )?;
        let first = *initial.get_or_insert(lg.loss);
        if !lg.loss.is_finite() || lg.loss > 1e6 * first.max(f64::MIN_POSITIVE) {
            return Err(AmError::Diverged(format!(
                "clustering loss {} at epoch {epoch} (initial {first}); reduce the learning rate",
                lg.loss
            )));
        }
        history.push(lg.loss);
        for (r, g) in rows.iter_mut().zip(&lg.grad) {
            for (a, b) in r.iter_mut().zip(g) {
                *a -= lr * b / m as f64;
            }
        }
        lr *= cfg.decay;
    }
    Ok(ClamTrained {
        model: ClamModel {
            centers: PatternMatrix::real_from_rows(&rows)?,
        },
        history,
    })
}

/// Cluster index of each point after relocation by the memory.
pub fn clam_assign(
    x: &PatternMatrix,
    model: &ClamModel,
    beta: f64,
    eta: f64,
    t: usize,
) -> Result<Vec<usize>> {
    check_shapes(x, &model.centers)?;
    x.patterns()
        .map(|p| Ok(nearest(&model.centers, &clam_forward(p, model, beta, eta, t, None)?).0))
        .collect()
}

/// epoch,loss rows.
pub fn write_history_csv<W: std::io::Write>(w: &mut W, history: &[f64]) -> Result<()> {
    writeln!(w, "epoch,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{i},{}", fmt_f64(*l))?;
    }
    Ok(())
}
