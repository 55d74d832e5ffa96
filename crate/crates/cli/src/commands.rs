use amkit::capacity::{estimate_kmax, recovery_experiment, sample_noise_variance, scaling_fit};
use amkit::clustering::{
    clam_assign, clam_train, kmeans_objective, lloyd, write_history_csv, ClusterProblem,
    TrainConfig,
};
use amkit::dynamics::DescentConfig;
use amkit::energies::Separation;
use amkit::format::read_patterns_csv;
use amkit::gradcheck::{run_family, Family};
use amkit::kernels::{
    build_distributed, distributed_retrieval, kernel_stats, kernel_table, mise,
    standard_normal_curvature, write_kernel_table_csv, FeatureMap, FeatureVariant, KernelShape,
    RetrievalSetup,
};
use amkit::memgen::{
    energy_landscape, find_minima, write_landscape_csv, AmEnergy, CircleDataset, DiffusionEnergy,
    Phase, PhaseThresholds, Region,
};
use amkit::patterns::{rng_for, sample_gaussian_patterns_with, PatternKind, PatternMatrix};
use amkit::transformer::{et_step, EnergyTransformer, TokenGrid};
use serde_json::json;

use crate::output::{f, OutDir};
use crate::*;

pub fn dispatch(cmd: &Cmd, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    match cmd {
        Cmd::Retrieve(a) => retrieve(a, out),
        Cmd::Capacity(a) => capacity(a, out),
        Cmd::Scaling(a) => scaling(a, out),
        Cmd::EtDemo(a) => et_demo(a, out),
        Cmd::Landscape(a) => landscape(a, out),
        Cmd::Phases(a) => phases(a, out),
        Cmd::Cluster(a) => cluster(a, out),
        Cmd::Distributed(a) => distributed(a, out),
        Cmd::KernelTable(a) => kernel_table_cmd(a, out),
        Cmd::Gradcheck(a) => gradcheck(a, out),
    }
}

fn separation(model: Model, n: u32) -> Result<Separation, Failure> {
    match model {
        Model::Exp => Ok(Separation::Exp),
        Model::Power if n >= 2 => Ok(Separation::Power(n)),
        Model::Power => Err(Failure::Usage(format!("--n must be at least 2, got {n}"))),
    }
}

fn retrieve(a: &RetrieveArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let sep = separation(a.model, a.n)?;
    let r = recovery_experiment(
        sep,
        a.d,
        a.k,
        a.flips,
        a.trials,
        a.max_sweeps,
        a.common.seed,
    )?;
    let rows: Vec<Vec<String>> = r
        .trials
        .iter()
        .map(|t| {
            vec![
                t.trial.to_string(),
                t.exact.to_string(),
                f(t.overlap),
                t.sweeps.to_string(),
                t.converged.to_string(),
            ]
        })
        .collect();
    out.csv(
        "retrieve.csv",
        &["trial", "exact", "overlap", "sweeps", "converged"],
        &rows,
    )?;
    let mean_overlap = r.trials.iter().map(|t| t.overlap).sum::<f64>() / r.trials.len() as f64;
    out.json(
        "summary.json",
        &json!({
            "D": a.d, "K": a.k, "flips": a.flips, "trials": a.trials,
            "success_rate": r.success_rate,
            "confidence_halfwidth": r.confidence_halfwidth,
            "mean_overlap": mean_overlap,
        }),
    )?;
    Ok(vec![Check::new(
        "success_rate",
        r.success_rate >= a.min_success,
        format!(
            "exact recovery {:.4} (required {})",
            r.success_rate, a.min_success
        ),
    )])
}

fn capacity(a: &CapacityArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let sep = separation(a.model, a.n)?;
    if a.dims.is_empty() {
        return Err(Failure::Usage("--dims needs at least one dimension".into()));
    }
    let mut points = Vec::new();
    let mut sweep_rows = Vec::new();
    for &d in &a.dims {
        let est = estimate_kmax(sep, d, a.target, a.trials, a.common.seed, a.k_limit)?;
        for (k, fr) in &est.sweep {
            sweep_rows.push(vec![
                d.to_string(),
                k.to_string(),
                a.trials.to_string(),
                f(fr.rate),
                f(fr.confidence_halfwidth),
                f(fr.pattern_failure_rate),
            ]);
        }
        points.push((d, est.k_hat));
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|&(d, k)| vec![d.to_string(), k.to_string(), f(k as f64 / d as f64)])
        .collect();
    out.csv("capacity.csv", &["D", "K_hat", "ratio"], &rows)?;
    out.csv(
        "sweep.csv",
        &[
            "D",
            "K",
            "trials",
            "flip_rate",
            "ci_halfwidth",
            "pattern_failure_rate",
        ],
        &sweep_rows,
    )?;

    let pts: Vec<(f64, f64)> = points.iter().map(|&(d, k)| (d as f64, k as f64)).collect();
    let fit = if pts.len() >= 3 && pts.iter().all(|p| p.1 > 0.0) {
        Some(scaling_fit(&pts)?)
    } else {
        None
    };
    out.json(
        "fit.json",
        &json!({
            "n": a.n,
            "points": points,
            "slope": fit.map(|x| x.slope),
            "intercept": fit.map(|x| x.intercept),
            "r_squared": fit.map(|x| x.r_squared),
        }),
    )?;

    let mut checks = Vec::new();
    if a.model == Model::Power {
        let (want, tol) = if a.n == 2 {
            (1.0, 0.2)
        } else {
            ((a.n - 1) as f64, 0.3)
        };
        checks.push(match fit {
            Some(x) => Check::new(
                "slope",
                (x.slope - want).abs() <= tol,
                format!("log-log slope {:.3}, expected {want} +- {tol}", x.slope),
            ),
            None => Check::new("slope", false, "fewer than 3 positive points, no fit"),
        });
        if a.n == 2 {
            let ok = points
                .iter()
                .all(|&(d, k)| (0.08..=0.30).contains(&(k as f64 / d as f64)));
            checks.push(Check::new(
                "ratio",
                ok,
                "K_hat / D within [0.08, 0.30] at every D",
            ));
        }
    }
    Ok(checks)
}

fn scaling(a: &ScalingArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &n in &a.ns {
        let nv = sample_noise_variance(n, a.d, a.k, a.samples, a.common.seed)?;
        let rel = nv.empirical / nv.theory - 1.0;
        rows.push(vec![
            n.to_string(),
            a.d.to_string(),
            a.k.to_string(),
            a.samples.to_string(),
            f(nv.empirical),
            f(nv.std_error),
            f(nv.theory),
            f(nv.exact),
            f(rel),
        ]);
        checks.push(Check::new(
            &format!("variance_n{n}"),
            rel.abs() <= a.tolerance,
            format!(
                "empirical {:.1} vs closed form {:.1} ({:+.2}%)",
                nv.empirical,
                nv.theory,
                100.0 * rel
            ),
        ));
    }
    out.csv(
        "noise.csv",
        &[
            "n",
            "D",
            "K",
            "samples",
            "empirical",
            "std_error",
            "theory",
            "exact",
            "rel_error",
        ],
        &rows,
    )?;
    Ok(checks)
}

fn et_demo(a: &EtDemoArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let seed = a.common.seed;
    let et = EnergyTransformer::random(a.dim, a.y, a.heads, a.memories, a.beta, a.scale, seed)?;
    let tg = TokenGrid::random(a.tokens, a.dim, seed)?;
    let run = et_step(&tg, &et, a.dt, a.steps, a.backtracking)?;
    let rows: Vec<Vec<String>> = run
        .energies
        .iter()
        .enumerate()
        .map(|(i, &e)| vec![i.to_string(), f(e)])
        .collect();
    out.csv("energy.csv", &["step", "energy"], &rows)?;
    let mut header = vec!["token".to_string()];
    header.extend((0..a.dim).map(|i| format!("x{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let toks: Vec<Vec<String>> = (0..a.tokens)
        .map(|t| {
            std::iter::once(t.to_string())
                .chain(run.grid.token(t).iter().map(|&x| f(x)))
                .collect()
        })
        .collect();
    out.csv("tokens.csv", &header, &toks)?;
    let inc = run
        .energies
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![Check::new(
        "non_increasing",
        run.energies.len() < 2 || inc <= 1e-9,
        format!("largest per-step energy change {inc:.3e}"),
    )])
}

fn dataset(data: Dataset, k: usize, seed: u64) -> Result<PatternMatrix, Failure> {
    Ok(match data {
        Dataset::Circle => CircleDataset::sample(k, seed)?.points,
        Dataset::Pair => PatternMatrix::real_from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?,
    })
}

fn landscape(a: &LandscapeArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let data = dataset(a.data, a.k, a.common.seed)?;
    let region = Region::square(a.half);
    let rows = match a.energy {
        LandscapeEnergy::Am => {
            energy_landscape(&AmEnergy::normalized(data, a.beta)?, &region, a.grid)?
        }
        LandscapeEnergy::Diffusion => {
            energy_landscape(&DiffusionEnergy::new(data, a.sigma, a.t)?, &region, a.grid)?
        }
    };
    out.write_with("landscape.csv", |w| write_landscape_csv(w, &rows))?;
    Ok(Vec::new())
}

fn phases(a: &PhasesArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let data = dataset(a.data, a.k, a.common.seed)?;
    let th = PhaseThresholds {
        eps_mem: a.eps_mem,
        eps_gen: a.eps_gen,
        ..PhaseThresholds::default()
    };
    let cfg = DescentConfig::new(a.eta, a.steps).with_stop_tol(a.tol);
    let mut summary = Vec::new();
    let mut minima = Vec::new();
    let mut checks = Vec::new();
    for &beta in &a.betas {
        let e = AmEnergy::normalized(data.clone(), beta)?;
        let r = find_minima(&e, &Region::square(a.half), a.grid, &cfg, &data, &th)?;
        if let Some(w) = &r.warning {
            eprintln!("warning: beta {beta}: {w}");
        }
        let worst = r.radius.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
        summary.push(vec![
            f(beta),
            serde_json::to_value(r.phase)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            r.minima.len().to_string(),
            r.saddles.to_string(),
            f(worst),
            f(r.unconverged_fraction),
        ]);
        for (i, m) in r.minima.iter().enumerate() {
            minima.push(vec![
                f(beta),
                f(m[0]),
                f(m[1]),
                r.basin_sizes[i].to_string(),
                f(r.nearest_datum_distance[i]),
                f(r.radius[i]),
            ]);
        }
        if a.data == Dataset::Pair {
            // the midpoint curvature of the pair landscape is 2 - 4 beta
            if beta < 0.5 {
                checks.push(Check::new(
                    &format!("spurious_beta_{beta}"),
                    r.phase == Phase::Spurious && r.minima.len() == 1,
                    format!("{} minima, {:?}", r.minima.len(), r.phase),
                ));
            } else if beta >= 5.0 {
                checks.push(Check::new(
                    &format!("memorization_beta_{beta}"),
                    r.phase == Phase::Memorization && r.minima.len() == 2,
                    format!("{} minima, {:?}", r.minima.len(), r.phase),
                ));
            }
        } else if r.phase == Phase::Generalization {
            checks.push(Check::new(
                &format!("on_circle_beta_{beta}"),
                worst < a.eps_gen,
                format!("max |R-1| {worst:.4}"),
            ));
        }
    }
    out.csv(
        "phases.csv",
        &[
            "beta",
            "phase",
            "minima",
            "saddles",
            "max_radius_deviation",
            "unconverged_fraction",
        ],
        &summary,
    )?;
    out.csv(
        "minima.csv",
        &[
            "beta",
            "x",
            "y",
            "basin_size",
            "nearest_datum_distance",
            "radius",
        ],
        &minima,
    )?;
    Ok(checks)
}

fn blobs(a: &ClusterArgs) -> Result<PatternMatrix, Failure> {
    let z = sample_gaussian_patterns_with(2, a.k * a.blob_size, &mut rng_for(a.common.seed, 0))?;
    let rows: Vec<Vec<f64>> = z
        .patterns()
        .enumerate()
        .map(|(i, e)| {
            let angle = std::f64::consts::TAU * (i / a.blob_size) as f64 / a.k as f64;
            vec![
                a.spread * angle.cos() + a.blob_sd * e[0],
                a.spread * angle.sin() + a.blob_sd * e[1],
            ]
        })
        .collect();
    Ok(PatternMatrix::real_from_rows(&rows)?)
}

fn cluster(a: &ClusterArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let x = match &a.data {
        Some(p) => {
            let file = std::fs::File::open(p)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            read_patterns_csv(std::io::BufReader::new(file), PatternKind::Real)?
        }
        None => blobs(a)?,
    };
    let problem = ClusterProblem::new(x.clone(), a.k, a.beta, a.eta, a.t, a.common.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        decay: a.decay,
        keep_prob: a.keep_prob,
    };
    let trained = clam_train(&problem, &cfg)?;
    let centers = &trained.model.centers;
    let labels = clam_assign(&x, &trained.model, a.beta, a.eta, a.t)?;
    let ours = kmeans_objective(&x, centers)?;
    let base = lloyd(&x, a.k, a.common.seed, a.restarts)?;

    let mut header = vec!["cluster".to_string()];
    header.extend((0..x.dim()).map(|i| format!("c{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let crow: Vec<Vec<String>> = centers
        .patterns()
        .enumerate()
        .map(|(j, c)| {
            std::iter::once(j.to_string())
                .chain(c.iter().map(|&v| f(v)))
                .collect()
        })
        .collect();
    out.csv("centers.csv", &header, &crow)?;
    let arow: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    out.csv("assignments.csv", &["point", "cluster"], &arow)?;
    out.write_with("history.csv", |w| write_history_csv(w, &trained.history))?;
    out.json(
        "summary.json",
        &json!({
            "points": x.count(), "dim": x.dim(), "k": a.k,
            "clam_objective": ours,
            "lloyd_objective": base.objective,
            "ratio": ours / base.objective,
            "final_loss": trained.history.last(),
        }),
    )?;
    Ok(vec![Check::new(
        "objective",
        ours <= 1.05 * base.objective,
        format!(
            "k-means objective {ours:.4} vs best-of-{} Lloyd {:.4}",
            a.restarts, base.objective
        ),
    )])
}

fn distributed(a: &DistributedArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let variant = match a.variant {
        Variant::Pair => FeatureVariant::CosSinPair,
        Variant::Phase => FeatureVariant::CosPhase,
    };
    let seed = a.common.seed;
    let fm = FeatureMap::new(variant, a.y, a.d, seed)?;
    let setup = RetrievalSetup {
        k: a.k,
        beta: a.beta,
        noise: a.noise,
        steps: a.steps,
        radius: a.radius,
    };
    let r = distributed_retrieval(&setup, &fm, a.trials, seed)?;
    let rows: Vec<Vec<String>> = r
        .trials
        .iter()
        .map(|t| {
            vec![
                t.trial.to_string(),
                t.target.to_string(),
                t.success.to_string(),
                f(t.distance),
                t.steps.to_string(),
            ]
        })
        .collect();
    out.csv(
        "retrieval.csv",
        &["trial", "target", "success", "distance", "steps"],
        &rows,
    )?;
    // the sketch of trial 0, as an example artifact
    let xi = sample_gaussian_patterns_with(a.d, a.k, &mut rng_for(seed, 0))?;
    let sketch = build_distributed(&xi, a.beta, &fm)?;
    sketch.save(&out.path("sketch.amkb"))?;
    out.record("sketch.amkb");
    out.json("summary.json", &json!({"K": a.k, "D": a.d, "Y": a.y, "beta": a.beta, "trials": a.trials, "success_rate": r.success_rate}))?;
    Ok(vec![Check::new(
        "success_rate",
        r.success_rate >= a.min_success,
        format!(
            "retrieval {:.3} (required {})",
            r.success_rate, a.min_success
        ),
    )])
}

fn kernel_table_cmd(a: &KernelTableArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let curv = a.curvature.unwrap_or_else(standard_normal_curvature);
    let rows = kernel_table(curv, a.k)?;
    out.write_with("kernels.csv", |w| write_kernel_table_csv(w, &rows))?;
    let e = kernel_stats(&KernelShape::Epanechnikov, curv, a.k)?;
    let g = kernel_stats(&KernelShape::Gaussian, curv, a.k)?;
    let u = kernel_stats(&KernelShape::Uniform, curv, a.k)?;
    let dh = 1e-6;
    let slope = (mise(e.h_star + dh, e.mu, e.sigma, curv, a.k)
        - mise(e.h_star - dh, e.mu, e.sigma, curv, a.k))
        / (2.0 * dh);
    Ok(vec![
        Check::new(
            "epanechnikov_moments",
            (e.mu - 0.2).abs() < 1e-8 && (e.sigma - 0.6).abs() < 1e-8,
            format!("mu {:.10} sigma {:.10}", e.mu, e.sigma),
        ),
        Check::new(
            "gaussian_efficiency",
            (100.0 * g.efficiency - 95.1).abs() <= 0.3,
            format!("{:.2}%", 100.0 * g.efficiency),
        ),
        Check::new(
            "uniform_efficiency",
            (100.0 * u.efficiency - 92.9).abs() <= 0.3,
            format!("{:.2}%", 100.0 * u.efficiency),
        ),
        Check::new(
            "stationary_bandwidth",
            slope.abs() < 1e-8,
            format!("dMISE/dh at h* = {slope:.1e}"),
        ),
    ])
}

fn gradcheck(a: &GradcheckArgs, out: &mut OutDir) -> Result<Vec<Check>, Failure> {
    let families: Vec<Family> = if a.family == "all" {
        Family::ALL.to_vec()
    } else {
        vec![Family::from_name(&a.family)?]
    };
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let mut reports = Vec::new();
    for fam in families {
        reports.push(run_family(fam, a.trials, a.common.seed)?);
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.family.clone(),
                r.points.to_string(),
                f(r.max_rel_error),
                f(r.mean_rel_error),
            ]
        })
        .collect();
    out.csv(
        "gradcheck.csv",
        &["family", "points", "max_rel_error", "mean_rel_error"],
        &rows,
    )?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    out.json(
        "report.json",
        &json!({"families": reports, "max_rel_error": worst}),
    )?;
    Ok(reports
        .iter()
        .map(|r| {
            Check::new(
                &r.family,
                r.max_rel_error < a.max_error,
                format!("max relative error {:.3e}", r.max_rel_error),
            )
        })
        .collect())
}
