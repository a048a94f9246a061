//! Seeded replication of each method over the points of an experiment.

use super::config::ExperimentConfig;
use super::output::Row;
use super::stats::Summary;
use crate::dmf::{solve_dmf, DmfSolution};
use crate::error::{Error, Result};
use crate::mixture::{sample_dataset_with, sample_geometry};
use crate::perceptron::{training_metric, MetricKind, Perceptron};
use crate::refine::{dmf_surrogate_run, iterate_refinement, matched_surrogate_run};
use crate::rng::SeedKey;
use crate::surrogate::{run_alternative, run_perturbed_original, GaussianAtoms};
use crate::trajectory::{run_original, Trajectory};
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::time::Instant;

/// Aggregated rows of a whole experiment plus per-point diagnostics.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<Row>,
    pub config_hash: String,
    pub wall_clock: f64,
    pub diagnostics: Vec<Value>,
}

impl ExperimentResult {
    pub fn summary_json(&self, cfg: &ExperimentConfig) -> Value {
        json!({
            "config": cfg,
            "config_hash": self.config_hash,
            "wall_clock_seconds": self.wall_clock,
            "diagnostics": self.diagnostics,
        })
    }
}

/// Stream key of one point: master seed, experiment name, point index.
pub fn point_key(cfg: &ExperimentConfig, point: usize) -> SeedKey {
    SeedKey::new(cfg.experiment.seed)
        .child(cfg.experiment.name.as_str())
        .child(point)
}

/// Run `f` over replications 0..reps in a pool of `threads` workers (0 means
/// the rayon default). Results come back in replication order.
pub fn replicate<T, F>(reps: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| (0..reps).into_par_iter().map(&f).collect())
}

/// Solve the DMF equations for a scalar config.
pub fn solve_point_dmf(point: &ExperimentConfig, hash: &str) -> Result<DmfSolution> {
    let maps = point.perceptron(DVector::zeros(point.n()))?;
    let mut sol = solve_dmf(&point.class_model()?, &maps, &point.dmf_options()?)?;
    sol.config_hash = hash.to_string();
    Ok(sol)
}

fn curves(tr: &Trajectory, labels: &[f64], maps: &Perceptron, kinds: &[MetricKind]) -> Vec<Vec<f64>> {
    kinds
        .iter()
        .map(|&k| training_metric(tr, labels, maps, k))
        .collect()
}

/// One replication: metric curves per channel and a scalar diagnostic.
struct Rep {
    channels: Vec<Vec<f64>>,
    diag: f64,
}

fn run_rep(point: &ExperimentConfig, method: &str, key: &SeedKey, sol: Option<&DmfSolution>) -> Result<Rep> {
    let spec = point.mixture_spec();
    let m = point.size.m;
    let steps = point.algorithm.steps;
    let kinds = point.metric_kinds();
    let (sigma, z) = (point.surrogate.sigma, point.surrogate.z);
    let data_key = key.child("data");
    match method {
        "empirical" | "perturbed" => {
            let data = sample_dataset_with(&spec, m, &data_key)?;
            let maps = point.perceptron(data.geom.means.theta0.clone())?;
            let tr = if method == "empirical" {
                run_original(&data, &maps, steps)?
            } else {
                let atoms = GaussianAtoms::sample_phi(&data.geom, steps, 1, &key.child("phi"));
                run_perturbed_original(&data, &maps, sigma, z, &atoms, steps)?
            };
            Ok(Rep {
                channels: curves(&tr, data.labels(), &maps, &kinds),
                diag: 0.0,
            })
        }
        "alternative" => {
            let geom = sample_geometry(&spec, m, &data_key)?;
            let maps = point.perceptron(geom.means.theta0.clone())?;
            let atoms = GaussianAtoms::sample_psi(&geom, steps, 1, &key.child("psi"));
            let tr = run_alternative(&geom, &maps, sigma, z, &atoms, steps)?;
            Ok(Rep {
                channels: curves(&tr, &geom.labels, &maps, &kinds),
                diag: 0.0,
            })
        }
        "refined" => {
            let sol = sol.expect("refined runs need the DMF solution");
            let geom = sample_geometry(&spec, m, &data_key)?;
            let maps = point.perceptron(geom.means.theta0.clone())?;
            let atoms = GaussianAtoms::sample_psi(&geom, steps, 1, &key.child("psi"));
            if point.refine.scheme == "matched" {
                let r0 = matched_surrogate_run(sol, &geom, &maps, &atoms, 0.0, kinds[0])?;
                let r1 = matched_surrogate_run(sol, &geom, &maps, &atoms, point.refine.z1, kinds[0])?;
                let mut channels = Vec::with_capacity(2 * kinds.len());
                for (a, b) in curves(&r0.trajectory, &geom.labels, &maps, &kinds)
                    .into_iter()
                    .zip(curves(&r1.trajectory, &geom.labels, &maps, &kinds))
                {
                    channels.push(a);
                    channels.push(b);
                }
                Ok(Rep {
                    channels,
                    diag: (r0.kernels.repaired + r1.kernels.repaired) as f64,
                })
            } else {
                let start = dmf_surrogate_run(sol, &geom, &maps, &atoms)?;
                let rf = iterate_refinement(
                    &start,
                    &geom,
                    &maps,
                    &atoms,
                    sigma,
                    z,
                    point.refine.rounds,
                    point.refine.tol,
                    kinds[0],
                )?;
                Ok(Rep {
                    channels: curves(&rf.trajectory, &geom.labels, &maps, &kinds),
                    diag: rf.rounds as f64,
                })
            }
        }
        other => Err(Error::Config(format!("method `{other}` is not replicated"))),
    }
}

fn summarize_channel(reps: &[Rep], ch: usize) -> Vec<Summary> {
    let steps = reps[0].channels[ch].len();
    (0..steps)
        .map(|l| Summary::of(&reps.iter().map(|r| r.channels[ch][l]).collect::<Vec<_>>()))
        .collect()
}

/// m·Var per step with the standard error of the variance estimate.
pub fn normalized_variance_curve(values: &[Vec<f64>], m: usize) -> Vec<Summary> {
    extrapolated_normalized_variance(values, values, 1.0, m, false)
}

/// Normalized variance at z² = −1 from the pair H(0), H(z1) of the same
/// replications: H(0) + (H(0) − H(z1))/z1². The standard error comes from the
/// per-replication contributions, so correlation between the two runs counts.
/// With `extrapolate` false only H(0) is formed.
pub fn extrapolated_normalized_variance(
    c0: &[Vec<f64>],
    c1: &[Vec<f64>],
    z1: f64,
    m: usize,
    extrapolate: bool,
) -> Vec<Summary> {
    let r = c0.len();
    let rf = r as f64;
    let (a, b) = if extrapolate {
        (1.0 + 1.0 / (z1 * z1), -1.0 / (z1 * z1))
    } else {
        (1.0, 0.0)
    };
    let steps = c0[0].len();
    (0..steps)
        .map(|l| {
            if r < 2 {
                return Summary::from_estimate(f64::NAN, f64::NAN, r);
            }
            let x0: Vec<f64> = c0.iter().map(|c| c[l]).collect();
            let x1: Vec<f64> = c1.iter().map(|c| c[l]).collect();
            let m0 = x0.iter().sum::<f64>() / rf;
            let m1 = x1.iter().sum::<f64>() / rf;
            let scale = m as f64 * rf / (rf - 1.0);
            let u: Vec<f64> = x0
                .iter()
                .zip(&x1)
                .map(|(p, q)| scale * (a * (p - m0).powi(2) + b * (q - m1).powi(2)))
                .collect();
            let s = Summary::of(&u);
            Summary::from_estimate(s.mean, s.stderr, r)
        })
        .collect()
}

/// Rows and diagnostics for one method at one point.
pub fn run_method(
    point: &ExperimentConfig,
    index: usize,
    root: &ExperimentConfig,
    hash: &str,
    method: &str,
    sol: Option<&DmfSolution>,
    threads: usize,
) -> Result<(Vec<Row>, Value)> {
    let kinds = point.metric_kinds();
    let base = point_key(root, index).child(method);
    let mut rows = Vec::new();
    if method == "dmf" {
        let sol = sol.expect("dmf rows need the solution");
        let maps = point.perceptron(DVector::zeros(point.n()))?;
        let paths = point.dmf.metric_paths;
        for &k in &kinds {
            let (mean, se) = sol.metric_curve(&maps, k, paths, &base.child(k.as_str()));
            let curve: Vec<Summary> = mean
                .iter()
                .zip(&se)
                .map(|(&m, &s)| Summary::from_estimate(m, s, paths))
                .collect();
            rows.extend(Row::curve(point, hash, method, k.as_str(), &curve));
        }
        let diag = json!({
            "residual": sol.residual,
            "iterations": sol.iterations,
            "mc_paths": sol.mc_paths,
            "propagator_residuals": sol.propagator_residuals(),
        });
        return Ok((rows, diag));
    }
    let reps = point.experiment.replications;
    let out = replicate(reps, threads, |r| {
        run_rep(point, method, &base.child(r), sol).map_err(|e| e.annotate(method, r))
    })?;
    let m = point.size.m;
    let matched = method == "refined" && point.refine.scheme == "matched";
    for (i, k) in kinds.iter().enumerate() {
        let name = k.as_str();
        let nvar_name = format!("{name}_nvar");
        if matched {
            let (c0, c1): (Vec<Vec<f64>>, Vec<Vec<f64>>) = out
                .iter()
                .map(|r| (r.channels[2 * i].clone(), r.channels[2 * i + 1].clone()))
                .unzip();
            let z1 = point.refine.z1;
            let mean: Vec<Summary> = (0..c0[0].len())
                .map(|l| {
                    let v: Vec<f64> = c0
                        .iter()
                        .zip(&c1)
                        .map(|(a, b)| crate::refine::z_extrapolate_at(&[a[l]], &[b[l]], z1)[0])
                        .collect();
                    Summary::of(&v)
                })
                .collect();
            rows.extend(Row::curve(point, hash, method, name, &mean));
            let nv = extrapolated_normalized_variance(&c0, &c1, z1, m, true);
            rows.extend(Row::curve(point, hash, method, &nvar_name, &nv));
        } else {
            rows.extend(Row::curve(point, hash, method, name, &summarize_channel(&out, i)));
            let values: Vec<Vec<f64>> = out.iter().map(|r| r.channels[i].clone()).collect();
            rows.extend(Row::curve(point, hash, method, &nvar_name, &normalized_variance_curve(&values, m)));
        }
    }
    let diag = out.iter().map(|r| r.diag).sum::<f64>() / reps as f64;
    let diag = match method {
        "refined" if matched => json!({ "mean_repaired_kernels": diag }),
        "refined" => json!({ "mean_rounds": diag }),
        _ => Value::Null,
    };
    Ok((rows, diag))
}

/// Run every configured method at every sweep point.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for (index, point) in cfg.points().iter().enumerate() {
        let methods = &cfg.experiment.methods;
        let needs_dmf = methods.iter().any(|m| m == "dmf" || m == "refined");
        let sol = if needs_dmf {
            Some(solve_point_dmf(point, &hash).map_err(|e| e.annotate("dmf", 0))?)
        } else {
            None
        };
        let mut diag = serde_json::Map::new();
        diag.insert("point".into(), json!(index));
        diag.insert("m".into(), json!(point.size.m));
        diag.insert("n".into(), json!(point.n()));
        diag.insert("gamma".into(), json!(point.size.gamma));
        diag.insert("coupling".into(), json!(point.mixture.coupling));
        diag.insert("s".into(), json!(point.algorithm.s));
        for method in methods {
            let t = Instant::now();
            let (r, d) = run_method(point, index, cfg, &hash, method, sol.as_ref(), threads)?;
            log::info!("point {index} {method}: {} rows in {:.1?}", r.len(), t.elapsed());
            rows.extend(r);
            diag.insert(method.clone(), d);
        }
        diagnostics.push(Value::Object(diag));
    }
    Ok(ExperimentResult {
        rows,
        config_hash: hash,
        wall_clock: start.elapsed().as_secs_f64(),
        diagnostics,
    })
}
