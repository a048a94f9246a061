//! Two-sample comparisons between the alternative process ψ and the
//! perturbed original process φ′: trajectory statistics and second moments
//! at a fixed point.

use super::config::ExperimentConfig;
use super::run::{point_key, replicate};
use super::stats::{normal_two_sided_tail, standardized_difference, Summary};
use crate::error::{Error, Result};
use crate::mixture::{sample_dataset_with, sample_geometry, Dataset, Geometry};
use crate::perceptron::{training_metric, MetricKind, Perceptron};
use crate::surrogate::{run_alternative, run_perturbed_original, FixedXi, GaussianAtoms, Responses};
use crate::trajectory::{run_original, Trajectory};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Largest sizes accepted by the comparison runs.
pub const MAX_M: usize = 64;
pub const MAX_N: usize = 32;
pub const MAX_STEPS: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub name: String,
    pub a: f64,
    pub se_a: f64,
    pub b: f64,
    pub se_b: f64,
    pub z: f64,
}

/// Outcome of a batch of standardized comparisons at a fixed threshold.
#[derive(Clone, Debug, Serialize)]
pub struct TestReport {
    pub name: String,
    pub threshold: f64,
    pub tests: usize,
    pub max_abs_z: f64,
    /// Expected count of |z| above the threshold if every null holds.
    pub expected_false_alarms: f64,
    /// Per-test threshold holding the family-wise rate at 5%.
    pub bonferroni_threshold: f64,
    pub passed: bool,
    pub failures: Vec<Comparison>,
    #[serde(skip)]
    pub comparisons: Vec<Comparison>,
}

impl TestReport {
    pub fn new(name: &str, threshold: f64, comparisons: Vec<Comparison>) -> Self {
        let tests = comparisons.len();
        let max_abs_z = comparisons.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
        let failures: Vec<Comparison> = comparisons
            .iter()
            .filter(|c| !(c.z.abs() <= threshold))
            .cloned()
            .collect();
        TestReport {
            name: name.into(),
            threshold,
            tests,
            max_abs_z,
            expected_false_alarms: tests as f64 * normal_two_sided_tail(threshold),
            bonferroni_threshold: bonferroni(tests, 0.05),
            passed: failures.is_empty(),
            failures,
            comparisons,
        }
    }

    /// Merge several reports under one name.
    pub fn combine(name: &str, parts: Vec<TestReport>) -> Self {
        let threshold = parts.first().map_or(4.0, |p| p.threshold);
        let all = parts.into_iter().flat_map(|p| p.comparisons).collect();
        TestReport::new(name, threshold, all)
    }
}

fn bonferroni(tests: usize, alpha: f64) -> f64 {
    let target = alpha / tests.max(1) as f64;
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_two_sided_tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn check_small(point: &ExperimentConfig) -> Result<()> {
    let (m, n, l) = (point.size.m, point.n(), point.algorithm.steps);
    if m > MAX_M || n > MAX_N || l > MAX_STEPS {
        return Err(Error::Config(format!(
            "comparison runs need m ≤ {MAX_M}, n ≤ {MAX_N}, L ≤ {MAX_STEPS}; got m = {m}, n = {n}, L = {l}"
        )));
    }
    if !(point.surrogate.sigma > 0.0) {
        return Err(Error::Config("comparison runs need sigma > 0".into()));
    }
    Ok(())
}

fn single_point(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    let mut pts = cfg.points();
    if pts.len() != 1 {
        return Err(Error::Config("comparison runs take a single point, not a sweep".into()));
    }
    Ok(pts.remove(0))
}

/// Names of the panel statistics, in the order produced by [`panel`].
pub fn panel_names(steps: usize, classes: usize, kinds: &[MetricKind]) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..steps {
        out.push(format!("mean q({l})"));
        for c in 0..classes {
            out.push(format!("mean p({l}) class {c}"));
        }
        out.push(format!("|q({l})|^2"));
        out.push(format!("|p({l})|^2/m"));
        for lp in l + 1..steps {
            out.push(format!("<q({l}),q({lp})>"));
        }
        for k in kinds {
            out.push(format!("{}({l})", k.as_str()));
        }
    }
    out
}

/// Statistic panel of one trajectory: block means, squared norms, cross
/// products of q, and metric values per step.
pub fn panel(tr: &Trajectory, geom: &Geometry, maps: &Perceptron, kinds: &[MetricKind]) -> Vec<f64> {
    let steps = tr.steps();
    let m = geom.m() as f64;
    let metrics: Vec<Vec<f64>> = kinds
        .iter()
        .map(|&k| training_metric(tr, &geom.labels, maps, k))
        .collect();
    let mut out = Vec::new();
    for l in 0..steps {
        let q = &tr.q[l];
        let p = &tr.p[l];
        out.push(q.mean());
        for c in 0..geom.spec.n_components() {
            let rows = geom.rows_of(c);
            let s: f64 = rows.iter().map(|&i| p[(i, 0)]).sum();
            out.push(s / rows.len().max(1) as f64);
        }
        out.push(q.norm_squared());
        out.push(p.norm_squared() / m);
        for lp in l + 1..steps {
            out.push(q.dot(&tr.q[lp]));
        }
        for mc in &metrics {
            out.push(mc[l]);
        }
    }
    out
}

fn columns(samples: &[Vec<f64>]) -> Vec<Summary> {
    (0..samples[0].len())
        .map(|i| Summary::of(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect()
}

fn with_data(geom: &Geometry, noise: DMatrix<f64>) -> Dataset {
    Dataset {
        x: geom.mean_matrix() + noise,
        geom: geom.clone(),
    }
}

/// Compare the statistic panel of ψ-solutions and φ′-solutions over
/// `experiment.replications` runs each on one shared geometry. Atom streams
/// of the two pipelines are disjoint.
pub fn verify_theorem1(cfg: &ExperimentConfig, threads: usize) -> Result<TestReport> {
    let point = single_point(cfg)?;
    check_small(&point)?;
    let key = point_key(cfg, 0).child("theorem1");
    let steps = point.algorithm.steps;
    let (sigma, z) = (point.surrogate.sigma, point.surrogate.z);
    let kinds = point.metric_kinds();
    let geom = sample_geometry(&point.mixture_spec(), point.size.m, &key.child("geometry"))?;
    let maps = point.perceptron(geom.means.theta0.clone())?;
    let reps = point.experiment.replications;
    let psi = replicate(reps, threads, |r| {
        let k = key.child("psi").child(r);
        let atoms = GaussianAtoms::sample_psi(&geom, steps, 1, &k);
        let tr = run_alternative(&geom, &maps, sigma, z, &atoms, steps).map_err(|e| e.annotate("alternative", r))?;
        Ok(panel(&tr, &geom, &maps, &kinds))
    })?;
    let phi = replicate(reps, threads, |r| {
        let k = key.child("phi").child(r);
        let data = with_data(&geom, geom.sample_noise(&k.child("noise")));
        let atoms = GaussianAtoms::sample_phi(&geom, steps, 1, &k);
        let tr = run_perturbed_original(&data, &maps, sigma, z, &atoms, steps)
            .map_err(|e| e.annotate("perturbed", r))?;
        Ok(panel(&tr, &geom, &maps, &kinds))
    })?;
    let (a, b) = (columns(&psi), columns(&phi));
    let comps = panel_names(steps, geom.spec.n_components(), &kinds)
        .into_iter()
        .zip(a.iter().zip(&b))
        .map(|(name, (x, y))| Comparison {
            name,
            a: x.mean,
            se_a: x.stderr,
            b: y.mean,
            se_b: y.stderr,
            z: standardized_difference(x.mean, x.stderr, y.mean, y.stderr),
        })
        .collect();
    Ok(TestReport::new("theorem1", 4.0, comps))
}

/// Second moments E[vvᵀ] of centered response vectors with entrywise errors.
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub mean: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub draws: usize,
}

const CHUNK: usize = 1000;

/// Accumulate E[vvᵀ] over `draws` vectors produced by `draw(i)`; chunks are
/// summed in index order, so the result does not depend on `threads`.
pub fn second_moments<F>(dim: usize, draws: usize, threads: usize, draw: F) -> Result<MomentEstimate>
where
    F: Fn(usize) -> Result<DVector<f64>> + Sync + Send,
{
    let chunks = draws.div_ceil(CHUNK);
    let parts = replicate(chunks, threads, |c| {
        let mut s1 = DMatrix::<f64>::zeros(dim, dim);
        let mut s2 = DMatrix::<f64>::zeros(dim, dim);
        for i in c * CHUNK..((c + 1) * CHUNK).min(draws) {
            let v = draw(i)?;
            let o = &v * v.transpose();
            s2 += o.component_mul(&o);
            s1 += o;
        }
        Ok((s1, s2))
    })?;
    let mut s1 = DMatrix::<f64>::zeros(dim, dim);
    let mut s2 = DMatrix::<f64>::zeros(dim, dim);
    for (a, b) in parts {
        s1 += a;
        s2 += b;
    }
    let nf = draws as f64;
    let mean = s1 / nf;
    let stderr = DMatrix::from_fn(dim, dim, |r, c| {
        let var = ((s2[(r, c)] - nf * mean[(r, c)].powi(2)) / (nf - 1.0)).max(0.0);
        (var / nf).sqrt()
    });
    Ok(MomentEstimate { mean, stderr, draws })
}

fn stack(resp: &Responses, centre: &Responses) -> DVector<f64> {
    let mut out = Vec::new();
    for (q, c) in resp.q.iter().zip(&centre.q) {
        out.extend((q - c).iter());
    }
    for (p, c) in resp.p.iter().zip(&centre.p) {
        out.extend((p - c).iter());
    }
    DVector::from_vec(out)
}

fn entry_name(r: usize, c: usize, n: usize, steps: usize, m: usize) -> String {
    let label = |i: usize| {
        if i < n * steps {
            format!("q({})[{}]", i / n, i % n)
        } else {
            let k = i - n * steps;
            format!("p({})[{}]", k / m, k % m)
        }
    };
    format!("{}*{}", label(r), label(c))
}

fn compare_entries(
    name: &str,
    a: &MomentEstimate,
    b: (&DMatrix<f64>, Option<&DMatrix<f64>>),
    dims: (usize, usize, usize),
) -> TestReport {
    let (n, steps, m) = dims;
    let dim = a.mean.nrows();
    let mut comps = Vec::with_capacity(dim * (dim + 1) / 2);
    for c in 0..dim {
        for r in 0..=c {
            let (bm, bse) = (b.0[(r, c)], b.1.map_or(0.0, |s| s[(r, c)]));
            let z = standardized_difference(a.mean[(r, c)], a.stderr[(r, c)], bm, bse);
            comps.push(Comparison {
                name: entry_name(r, c, n, steps, m),
                a: a.mean[(r, c)],
                se_a: a.stderr[(r, c)],
                b: bm,
                se_b: bse,
                z,
            });
        }
    }
    TestReport::new(name, 4.0, comps)
}

/// Result of the fixed-point moment comparison.
#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub psi_vs_phi: TestReport,
    pub psi_vs_closed_form: TestReport,
    pub phi_vs_closed_form: TestReport,
    pub passed: bool,
}

/// Fix ξ = (Θ, Ω) from one run of the original dynamics, then compare the
/// second moments of ψ(ξ) and φ′(ξ) over `experiment.replications` draws
/// with each other and with the closed forms.
pub fn verify_moments(cfg: &ExperimentConfig, threads: usize) -> Result<MomentReport> {
    let point = single_point(cfg)?;
    check_small(&point)?;
    let key = point_key(cfg, 0).child("moments");
    let steps = point.algorithm.steps;
    let data = sample_dataset_with(&point.mixture_spec(), point.size.m, &key.child("xi"))?;
    let maps = point.perceptron(data.geom.means.theta0.clone())?;
    let tr = run_original(&data, &maps, steps)?;
    let geom = &data.geom;
    let xi = FixedXi::new(geom, tr.theta, tr.omega, point.surrogate.sigma, point.surrogate.z)?;
    let centre = xi.means();
    let (m, n) = (geom.m(), geom.n());
    let dim = (m + n) * steps;
    let draws = point.experiment.replications;
    if draws < 2 {
        return Err(Error::InsufficientReplications { got: draws });
    }
    let psi = second_moments(dim, draws, threads, |i| {
        let atoms = GaussianAtoms::sample_psi(geom, steps, 1, &key.child("psi").child(i));
        Ok(stack(&xi.eval_psi(&atoms)?, &centre))
    })?;
    let phi = second_moments(dim, draws, threads, |i| {
        let k = key.child("phi").child(i);
        let atoms = GaussianAtoms::sample_phi(geom, steps, 1, &k);
        Ok(stack(&xi.eval_phi(&geom.sample_noise(&k.child("noise")), &atoms)?, &centre))
    })?;
    let (qq, pp, qp) = xi.closed_form_moments();
    let nq = n * steps;
    let mut closed = DMatrix::zeros(dim, dim);
    closed.view_mut((0, 0), (nq, nq)).copy_from(&qq);
    closed.view_mut((nq, nq), (dim - nq, dim - nq)).copy_from(&pp);
    closed.view_mut((0, nq), (nq, dim - nq)).copy_from(&qp);
    closed.view_mut((nq, 0), (dim - nq, nq)).copy_from(&qp.transpose());
    let dims = (n, steps, m);
    let psi_vs_phi = compare_entries("psi vs phi", &psi, (&phi.mean, Some(&phi.stderr)), dims);
    let psi_vs_closed_form = compare_entries("psi vs closed form", &psi, (&closed, None), dims);
    let phi_vs_closed_form = compare_entries("phi vs closed form", &phi, (&closed, None), dims);
    let passed = psi_vs_phi.passed && psi_vs_closed_form.passed && phi_vs_closed_form.passed;
    Ok(MomentReport {
        psi_vs_phi,
        psi_vs_closed_form,
        phi_vs_closed_form,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml_with(
            "",
            &[
                "size.m=12".into(),
                "size.gamma=0.5".into(),
                "algorithm.steps=3".into(),
                "surrogate.sigma=0.5".into(),
                "surrogate.z=0.7".into(),
                format!("experiment.replications={reps}"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn panel_layout_matches_names() {
        let cfg = small(2);
        let geom = sample_geometry(&cfg.mixture_spec(), 12, &crate::rng::SeedKey::new(1)).unwrap();
        let maps = cfg.perceptron(geom.means.theta0.clone()).unwrap();
        let atoms = GaussianAtoms::sample_psi(&geom, 3, 1, &crate::rng::SeedKey::new(2));
        let tr = run_alternative(&geom, &maps, 0.5, 0.7, &atoms, 3).unwrap();
        let kinds = cfg.metric_kinds();
        assert_eq!(panel(&tr, &geom, &maps, &kinds).len(), panel_names(3, 2, &kinds).len());
        let v = panel(&tr, &geom, &maps, &kinds);
        assert!((v[3] - tr.q[0].norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn theorem1_report_small_run() {
        let rep = verify_theorem1(&small(400), 2).unwrap();
        assert!(rep.tests > 10);
        assert!(rep.max_abs_z.is_finite());
        assert!(rep.bonferroni_threshold > 2.0 && rep.bonferroni_threshold < 5.0);
        assert_eq!(rep.passed, rep.failures.is_empty());
    }

    #[test]
    fn moments_do_not_depend_on_thread_count() {
        let draw = |i: usize| Ok(DVector::from_vec(vec![i as f64 * 0.1, 1.0 - i as f64 * 0.01]));
        let a = second_moments(2, 2500, 1, draw).unwrap();
        let b = second_moments(2, 2500, 3, draw).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
        let direct: f64 = (0..2500).map(|i| (i as f64 * 0.1).powi(2)).sum::<f64>() / 2500.0;
        assert!((a.mean[(0, 0)] - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn rejects_large_sizes() {
        let mut cfg = small(10);
        cfg.size.m = 200;
        assert!(verify_theorem1(&cfg, 1).is_err());
        cfg.size.m = 12;
        cfg.surrogate.sigma = 0.0;
        assert!(verify_moments(&cfg, 1).is_err());
    }
}
