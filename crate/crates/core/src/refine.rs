//! Finite-size refinement of the DMF solution: the iterative scheme on one
//! realization, the fluctuation-matched surrogate, and z-extrapolation.

use crate::dmf::{characteristic_paths, DmfSolution};
use crate::error::{Error, Result};
use crate::kernels::{block_cholesky, BAtoms, BlockFactor, ComponentKernels, KernelSet};
use crate::linalg::{block_upper, max_abs_diff, min_eigenvalue, symmetrize};
use crate::mixture::Geometry;
use crate::perceptron::{training_metric, MetricKind, Perceptron};
use crate::surrogate::{run_with_kernels, GaussianAtoms};
use crate::trajectory::{ProcessTag, Trajectory};
use nalgebra::{DMatrix, DVector};

fn check_geometry(sol: &DmfSolution, geom: &Geometry) -> Result<()> {
    let d = sol.model.classes();
    if geom.spec.n_components() != d {
        return Err(Error::Shape(format!(
            "DMF solution has {d} classes, geometry has {}",
            geom.spec.n_components()
        )));
    }
    for (y, c) in geom.spec.components.iter().enumerate() {
        if c.label != sol.model.labels[y] {
            return Err(Error::Shape("class labels differ from the DMF solution".into()));
        }
    }
    Ok(())
}

fn col(m: &DMatrix<f64>, c: usize) -> DVector<f64> {
    m.column(c).into_owned()
}

/// ē(l) = Σ_y x̂(y)α(l,y) as n×1 blocks.
fn bias_e(geom: &Geometry, alpha: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..alpha.nrows())
        .map(|l| {
            let mut e = DVector::zeros(geom.n());
            for (y, mean) in geom.means.means.iter().enumerate() {
                e.axpy(alpha[(l, y)], mean, 1.0);
            }
            DMatrix::from_column_slice(geom.n(), 1, e.as_slice())
        })
        .collect()
}

fn beta_rows(beta: &DMatrix<f64>, y: usize) -> Vec<DMatrix<f64>> {
    (0..beta.nrows())
        .map(|l| DMatrix::from_element(1, 1, beta[(l, y)]))
        .collect()
}

/// Mean-field kernels of a DMF solution, realized on `geom` (σ = 0, z = 0).
pub fn dmf_kernel_set(sol: &DmfSolution, geom: &Geometry) -> Result<KernelSet> {
    check_geometry(sol, geom)?;
    let components = (0..sol.model.classes())
        .map(|y| ComponentKernels {
            v_theta: sol.v_theta.clone(),
            v_omega: sol.v_omega[y].clone(),
            a_theta: BlockFactor::from_upper(sol.a_theta.clone(), 1),
            a_omega: BlockFactor::from_upper(sol.a_omega[y].clone(), 1),
            b_theta: sol.b_theta_class[y].clone(),
            b_omega: sol.b_omega.clone(),
            beta: beta_rows(&sol.beta, y),
        })
        .collect();
    Ok(KernelSet {
        components,
        e: bias_e(geom, &sol.alpha),
        sigma: 0.0,
        z: 0.0,
        j: 1,
    })
}

/// The ψ recursion driven by the mean-field kernels.
pub fn dmf_surrogate_run(
    sol: &DmfSolution,
    geom: &Geometry,
    maps: &Perceptron,
    atoms: &GaussianAtoms,
) -> Result<Trajectory> {
    let ks = dmf_kernel_set(sol, geom)?;
    run_with_kernels(geom, maps, &ks, atoms, sol.steps(), ProcessTag::DmfSurrogate)
}

/// Fluctuation parameters of one draw, read off the atoms G, H, Γ so that a
/// matched run and the draw share their randomness.
#[derive(Clone, Debug)]
pub struct FluctuationDraw {
    /// g_e(y) = G_yᵀ𝟏/√n
    pub g_e: Vec<DVector<f64>>,
    /// g_o(y, a) = G_yᵀx̂(a) for a ∈ 𝒴*, with x̂(*) = θ₀
    pub g_o: Vec<Vec<DVector<f64>>>,
    /// h_e(y) = H_yᵀ𝟏/√m_y
    pub h_e: Vec<DVector<f64>>,
    /// Γ(y)
    pub gamma: Vec<DMatrix<f64>>,
}

impl FluctuationDraw {
    pub fn from_atoms(geom: &Geometry, atoms: &GaussianAtoms) -> Self {
        let d = geom.spec.n_components();
        let sn = (geom.n() as f64).sqrt();
        let mut g_e = Vec::with_capacity(d);
        let mut g_o = Vec::with_capacity(d);
        let mut h_e = Vec::with_capacity(d);
        let mut gamma = Vec::with_capacity(d);
        for c in &atoms.components {
            let steps = c.g.ncols();
            g_e.push(DVector::from_fn(steps, |l, _| c.g.column(l).sum() / sn));
            g_o.push(
                (0..=d)
                    .map(|a| c.g.tr_mul(geom.means.vector(a)))
                    .collect(),
            );
            let my = c.h.nrows();
            h_e.push(if my == 0 {
                DVector::zeros(steps)
            } else {
                DVector::from_fn(steps, |l, _| c.h.column(l).sum() / (my as f64).sqrt())
            });
            gamma.push(c.gamma.clone());
        }
        FluctuationDraw {
            g_e,
            g_o,
            h_e,
            gamma,
        }
    }
}

/// Whether correction terms use the draw or are replaced by their expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Correction {
    Draw,
    Mean,
}

/// Kernels matched to the first and second order statistics of the
/// finite-m kernels, together with the baselines they perturb.
#[derive(Clone, Debug)]
pub struct MatchedKernels {
    pub v_theta: DMatrix<f64>,
    pub v_omega: Vec<DMatrix<f64>>,
    pub c_omega: Vec<DMatrix<f64>>,
    pub c_theta: Vec<DMatrix<f64>>,
    /// L×d
    pub beta: DMatrix<f64>,
    /// L×d
    pub alpha: DMatrix<f64>,
    pub b_theta: Vec<DMatrix<f64>>,
    pub b_omega: Vec<DMatrix<f64>>,
    pub a_theta: BlockFactor,
    pub a_omega: Vec<BlockFactor>,
    pub baseline_c_omega: Vec<DMatrix<f64>>,
    pub baseline_c_theta: Vec<DMatrix<f64>>,
    /// Kernels whose spectrum had to be clipped.
    pub repaired: usize,
}

/// Floor on the minimum eigenvalue of a perturbed kernel; above it and at or
/// below 1e-12 the spectrum is clipped at 1e-12.
pub const REPAIR_FLOOR: f64 = -1e-8;
/// Relative squared-pivot threshold below which rows of B″ are left at zero.
pub const PIVOT_TOL: f64 = 1e-3;
const REPAIR_CLIP: f64 = 1e-12;

fn repair(v: DMatrix<f64>, step: usize, floor: f64, count: &mut usize) -> Result<DMatrix<f64>> {
    let v = symmetrize(&v);
    let lmin = min_eigenvalue(&v);
    if lmin > REPAIR_CLIP {
        return Ok(v);
    }
    if lmin <= floor {
        return Err(Error::NotPositiveDefinite {
            step,
            min_eigenvalue: lmin,
        });
    }
    *count += 1;
    Ok(crate::linalg::sym_fn(&v, |x| x.max(REPAIR_CLIP)))
}

impl MatchedKernels {
    /// Double-primed kernels for `draw` at coupling `z`, with atoms of size
    /// (m, n) = (geom.m(), geom.n()). `floor` is the repair floor and `pivot_tol`
    /// the relative pivot threshold for the B″ solves.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        sol: &DmfSolution,
        geom: &Geometry,
        maps: &Perceptron,
        draw: &FluctuationDraw,
        z: f64,
        mode: Correction,
        floor: f64,
        pivot_tol: f64,
    ) -> Result<Self> {
        check_geometry(sol, geom)?;
        let d = sol.model.classes();
        let steps = sol.steps();
        let m = geom.m() as f64;
        let sm = m.sqrt();
        let gamma = sol.model.gamma;
        let sg = gamma.sqrt();
        let lt = &sol.big_lambda_tilde;
        let at = |a: usize| -> DVector<f64> {
            if a < d {
                col(&sol.alpha_tilde, a)
            } else {
                -&sol.lambda_tilde
            }
        };
        let draw_mode = mode == Correction::Draw;

        // g̃_e = Λ̃ᵀΣ_yĀ_ω(y)ᵀg_e(y), g̃_o(a) = Λ̃ᵀΣ_yĀ_ω(y)ᵀg_o(y,a)
        let mut gte = DVector::zeros(steps);
        let mut gto = vec![DVector::zeros(steps); d + 1];
        for y in 0..d {
            gte += sol.a_omega[y].tr_mul(&draw.g_e[y]);
            for (a, g) in gto.iter_mut().enumerate() {
                *g += sol.a_omega[y].tr_mul(&draw.g_o[y][a]);
            }
        }
        let gte = lt.tr_mul(&gte);
        let gto: Vec<DVector<f64>> = gto.iter().map(|g| lt.tr_mul(g)).collect();
        let vo_sum = sol
            .v_omega
            .iter()
            .fold(DMatrix::zeros(steps, steps), |acc, v| acc + v);
        let lvl = lt.tr_mul(&vo_sum) * lt;

        let mut repaired = 0;
        let mut v_theta = sol.v_theta.clone();
        if draw_mode {
            let mut corr = (&gte * gte.transpose() - &lvl) * sg;
            for (a, g) in gto.iter().enumerate() {
                let x = at(a) * g.transpose();
                corr += &x + x.transpose();
            }
            v_theta += corr / sm;
        }
        let v_theta = repair(v_theta, steps, floor, &mut repaired)?;
        let a_theta = block_cholesky(&v_theta, 1)?;

        let mut beta = sol.beta.clone();
        let mut alpha = sol.alpha.clone();
        let mut v_omega = Vec::with_capacity(d);
        let mut c_omega = Vec::with_capacity(d);
        let mut c_theta = Vec::with_capacity(d);
        let mut baseline_c_omega = Vec::with_capacity(d);
        let mut baseline_c_theta = Vec::with_capacity(d);
        let mut a_omega = Vec::with_capacity(d);
        let mut b_theta = Vec::with_capacity(d);
        let mut b_omega = Vec::with_capacity(d);
        for y in 0..d {
            let rho = sol.model.rho[y];
            let k = (rho / m).sqrt();
            let c_bar = &sol.a_theta * &sol.b_theta_class[y];
            let ao_lt = &sol.a_omega[y] * lt;
            let ct_bar = &ao_lt * (-gamma);
            let mut vo = sol.v_omega[y].clone();
            let mut co = c_bar.clone();
            let mut ct = ct_bar.clone();
            if draw_mode {
                beta.set_column(y, &(col(&sol.beta, y) - &gto[y] / sm));
                let h = DMatrix::from_row_slice(1, steps, draw.h_e[y].as_slice());
                let beta_y: Vec<f64> = sol.beta.column(y).iter().cloned().collect();
                let path = characteristic_paths(
                    &sol.a_theta,
                    &beta_y,
                    &sol.b_omega,
                    maps,
                    sol.model.labels[y],
                    &h,
                );
                let we = path.omega.row(0).transpose();
                alpha.set_column(y, &(col(&sol.alpha, y) + (&we - col(&sol.alpha, y) / rho) * k));
                vo += (&we * we.transpose() - &sol.v_omega[y] / rho) * k;
                co += (&draw.h_e[y] * we.transpose() - &c_bar / rho) * k;
                let mut fl = (&draw.g_e[y] * gte.transpose() - &ao_lt) * sg;
                for (a, g) in draw.g_o[y].iter().enumerate() {
                    fl += g * at(a).transpose();
                }
                ct -= fl / sm;
            }
            let vo = repair(vo, steps, floor, &mut repaired)?;
            let ao = block_cholesky(&vo, 1)?;
            let mut rhs_t = co.clone();
            let mut rhs_o = ct.clone();
            if z != 0.0 {
                rhs_t += &draw.gamma[y] * ao.matrix() * (z / sm);
                rhs_o += draw.gamma[y].tr_mul(a_theta.matrix()) * (z / sm);
            }
            b_theta.push(perturbed_solve(a_theta.matrix(), &block_upper(&rhs_t, 1, false), &sol.b_theta_class[y], pivot_tol));
            b_omega.push(perturbed_solve(ao.matrix(), &block_upper(&rhs_o, 1, true), &sol.b_omega, pivot_tol));
            v_omega.push(vo);
            c_omega.push(co);
            c_theta.push(ct);
            baseline_c_omega.push(c_bar);
            baseline_c_theta.push(ct_bar);
            a_omega.push(ao);
        }
        Ok(MatchedKernels {
            v_theta,
            v_omega,
            c_omega,
            c_theta,
            beta,
            alpha,
            b_theta,
            b_omega,
            a_theta,
            a_omega,
            baseline_c_omega,
            baseline_c_theta,
            repaired,
        })
    }

    pub fn kernel_set(&self, geom: &Geometry, z: f64) -> KernelSet {
        let components = (0..self.v_omega.len())
            .map(|y| ComponentKernels {
                v_theta: self.v_theta.clone(),
                v_omega: self.v_omega[y].clone(),
                a_theta: self.a_theta.clone(),
                a_omega: self.a_omega[y].clone(),
                b_theta: self.b_theta[y].clone(),
                b_omega: self.b_omega[y].clone(),
                beta: beta_rows(&self.beta, y),
            })
            .collect();
        KernelSet {
            components,
            e: bias_e(geom, &self.alpha),
            sigma: 0.0,
            z,
            j: 1,
        }
    }
}

/// A⁻¹·rhs for upper-triangular `a`, leaving rows whose squared pivot is at
/// most `tol` times the largest squared pivot at zero.
fn pivoted_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let scale = a.diagonal().map(|x| x * x).amax();
    let mut x = DMatrix::zeros(n, rhs.ncols());
    for r in (0..n).rev() {
        if a[(r, r)] * a[(r, r)] <= tol * scale {
            continue;
        }
        for c in 0..rhs.ncols() {
            let s: f64 = (r + 1..n).map(|k| a[(r, k)] * x[(k, c)]).sum();
            x[(r, c)] = (rhs[(r, c)] - s) / a[(r, r)];
        }
    }
    x
}

/// Solves A·B = rhs as B = base + A⁻¹(rhs − A·base), so a truncated pivot only
/// drops the finite-m part of that row and keeps the baseline.
fn perturbed_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>, base: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    base + pivoted_solve(a, &(rhs - a * base), tol)
}

/// One matched-surrogate run and its metric curve.
#[derive(Clone, Debug)]
pub struct MatchedRun {
    pub trajectory: Trajectory,
    pub curve: Vec<f64>,
    pub kernels: MatchedKernels,
}

/// Build the double-primed kernels from the atoms' fluctuation parameters and
/// run the alternative dynamics with them and the same atoms.
pub fn matched_surrogate_run(
    sol: &DmfSolution,
    geom: &Geometry,
    maps: &Perceptron,
    atoms: &GaussianAtoms,
    z: f64,
    kind: MetricKind,
) -> Result<MatchedRun> {
    let draw = FluctuationDraw::from_atoms(geom, atoms);
    let kernels = MatchedKernels::compute(sol, geom, maps, &draw, z, Correction::Draw, REPAIR_FLOOR, PIVOT_TOL)?;
    let ks = kernels.kernel_set(geom, z);
    let trajectory = run_with_kernels(geom, maps, &ks, atoms, sol.steps(), ProcessTag::Refined)?;
    let curve = training_metric(&trajectory, &geom.labels, maps, kind);
    Ok(MatchedRun {
        trajectory,
        curve,
        kernels,
    })
}

/// Outcome of [`iterate_refinement`].
#[derive(Clone, Debug)]
pub struct Refinement {
    pub trajectory: Trajectory,
    pub rounds: usize,
    pub last_change: f64,
}

/// Per-realization iterative scheme: each round recomputes the kernels from
/// the previous round's (Θ, Ω) with the atoms held fixed and reruns the
/// dynamics. Stops after `rounds` or once successive metric curves differ by
/// less than `tol`. With `tol` = 0 every round is executed.
#[allow(clippy::too_many_arguments)]
pub fn iterate_refinement(
    start: &Trajectory,
    geom: &Geometry,
    maps: &Perceptron,
    atoms: &GaussianAtoms,
    sigma: f64,
    z: f64,
    rounds: usize,
    tol: f64,
    kind: MetricKind,
) -> Result<Refinement> {
    let mut cur = start.clone();
    let mut prev_curve = training_metric(&cur, &geom.labels, maps, kind);
    let mut change = f64::INFINITY;
    let steps = start.steps();
    let batoms: Vec<BAtoms<'_>> = atoms.components.iter().map(|c| c.b_atoms()).collect();
    for r in 0..rounds {
        let ks = KernelSet::compute(&cur.theta, &cur.omega, geom, &batoms, sigma, z)?;
        cur = run_with_kernels(geom, maps, &ks, atoms, steps, ProcessTag::Refined)?;
        let curve = training_metric(&cur, &geom.labels, maps, kind);
        change = prev_curve
            .iter()
            .zip(&curve)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        prev_curve = curve;
        if tol > 0.0 && change < tol {
            return Ok(Refinement {
                trajectory: cur,
                rounds: r + 1,
                last_change: change,
            });
        }
    }
    if tol > 0.0 && rounds > 0 {
        return Err(Error::RefinementNotConverged {
            rounds,
            last_change: change,
        });
    }
    Ok(Refinement {
        trajectory: cur,
        rounds,
        last_change: if rounds == 0 { 0.0 } else { change },
    })
}

/// 2H(0) − H(1), elementwise.
pub fn z_extrapolate(h0: &[f64], h1: &[f64]) -> Vec<f64> {
    z_extrapolate_at(h0, h1, 1.0)
}

/// H(0) + (H(0) − H(z₁))/z₁²: linear extrapolation in z² to z² = −1.
pub fn z_extrapolate_at(h0: &[f64], hz: &[f64], z1: f64) -> Vec<f64> {
    let w = 1.0 / (z1 * z1);
    h0.iter().zip(hz).map(|(a, b)| a + (a - b) * w).collect()
}

/// Largest entrywise distance between two trajectories' Θ and Ω.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.theta.iter().zip(&b.theta) {
        d = d.max(max_abs_diff(x, y));
    }
    for (x, y) in a.omega.iter().zip(&b.omega) {
        d = d.max(max_abs_diff(x, y));
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmf::{solve_dmf, ClassModel, DmfOptions};
    use crate::mixture::{sample_geometry, MixtureSpec};
    use crate::perceptron::{momentum_coeffs, Activation, Loss};
    use crate::rng::SeedKey;
    use crate::surrogate::run_alternative;

    fn setup(m: usize, gamma: f64, steps: usize) -> (DmfSolution, Geometry, Perceptron) {
        let n = (gamma * m as f64).round() as usize;
        let spec = MixtureSpec::two_class(n, -0.5, 0.1);
        let geom = sample_geometry(&spec, m, &SeedKey::new(5)).unwrap();
        let maps = Perceptron {
            activation: Activation::SoftRelu,
            loss: Loss::Squared,
            coeffs: momentum_coeffs(0.4, 0.0, steps).unwrap(),
            theta0: geom.means.theta0.clone(),
        };
        let md = ClassModel::from_spec(&spec, n as f64 / m as f64).unwrap();
        let sol = solve_dmf(
            &md,
            &maps,
            &DmfOptions {
                paths: 20_000,
                ..Default::default()
            },
        )
        .unwrap();
        (sol, geom, maps)
    }

    #[test]
    fn extrapolation_examples() {
        assert_eq!(z_extrapolate(&[1.0], &[0.8]), vec![1.2]);
        assert_eq!(z_extrapolate(&[0.3, 0.5], &[0.3, 0.5]), vec![0.3, 0.5]);
        // H(z) = a + b z² + c z⁴: the remainder at z² = −1 is 2c
        let (a, b, c) = (0.7, -0.3, 0.05);
        let h = |z: f64| a + b * z * z + c * z.powi(4);
        let got = z_extrapolate(&[h(0.0)], &[h(1.0)])[0];
        let exact = a - b + c;
        assert!((got - exact - (-2.0 * c)).abs() < 1e-15);
        let got = z_extrapolate_at(&[h(0.0)], &[h(0.5)], 0.5)[0];
        assert!((got - (a - b - c * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn mean_corrections_reproduce_baselines() {
        let (sol, geom, maps) = setup(400, 1.0, 4);
        let atoms = GaussianAtoms::sample_psi(&geom, 4, 1, &SeedKey::new(1));
        let draw = FluctuationDraw::from_atoms(&geom, &atoms);
        let mk = MatchedKernels::compute(&sol, &geom, &maps, &draw, 0.0, Correction::Mean, REPAIR_FLOOR, PIVOT_TOL).unwrap();
        assert!(max_abs_diff(&mk.v_theta, &sol.v_theta) < 1e-12);
        assert!(max_abs_diff(&mk.beta, &sol.beta) == 0.0);
        assert!(max_abs_diff(&mk.alpha, &sol.alpha) == 0.0);
        for y in 0..2 {
            assert!(max_abs_diff(&mk.v_omega[y], &sol.v_omega[y]) < 1e-12);
            assert!(max_abs_diff(&mk.b_theta[y], &sol.b_theta_class[y]) < 1e-6);
            assert!(max_abs_diff(&mk.b_omega[y], &sol.b_omega) < 1e-6);
        }
    }

    #[test]
    fn beta_reflects_with_the_draw() {
        let (sol, geom, maps) = setup(400, 1.0, 3);
        let atoms = GaussianAtoms::sample_psi(&geom, 3, 1, &SeedKey::new(2));
        let mut neg = atoms.clone();
        for c in &mut neg.components {
            c.g = -&c.g;
        }
        let a = MatchedKernels::compute(&sol, &geom, &maps, &FluctuationDraw::from_atoms(&geom, &atoms), 0.0, Correction::Draw, REPAIR_FLOOR, PIVOT_TOL).unwrap();
        let b = MatchedKernels::compute(&sol, &geom, &maps, &FluctuationDraw::from_atoms(&geom, &neg), 0.0, Correction::Draw, REPAIR_FLOOR, PIVOT_TOL).unwrap();
        assert!(max_abs_diff(&(&a.beta + &b.beta), &(&sol.beta * 2.0)) < 1e-14);
    }

    #[test]
    fn fluctuation_parameters_are_standard_normal() {
        let (_, geom, _) = setup(200, 1.0, 2);
        let mut s = DMatrix::<f64>::zeros(3, 3);
        let reps = 2000;
        for r in 0..reps {
            let atoms = GaussianAtoms::sample_psi(&geom, 1, 1, &SeedKey::new(100 + r));
            let dr = FluctuationDraw::from_atoms(&geom, &atoms);
            let v = DVector::from_vec(vec![dr.g_e[0][0], dr.g_o[0][0][0], dr.h_e[1][0]]);
            s += &v * v.transpose();
        }
        s /= reps as f64;
        // ‖x̂‖ = 1; g_e and g_o(·,0) correlate through 𝟏ᵀx̂/√n
        let c = geom.means.means[0].sum() / (geom.n() as f64).sqrt();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, c, 0.0, c, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(max_abs_diff(&s, &want) < 0.15, "{s}");
    }

    #[test]
    fn refinement_rounds() {
        let (sol, geom, maps) = setup(60, 0.5, 4);
        let atoms = GaussianAtoms::sample_psi(&geom, 4, 1, &SeedKey::new(3));
        let start = dmf_surrogate_run(&sol, &geom, &maps, &atoms).unwrap();
        let r0 = iterate_refinement(&start, &geom, &maps, &atoms, 0.0, 0.0, 0, 0.0, MetricKind::Loss).unwrap();
        assert_eq!(trajectory_distance(&r0.trajectory, &start), 0.0);
        // enough rounds make the scheme exact: it reaches the alternative process
        let alt = run_alternative(&geom, &maps, 0.0, 0.0, &atoms, 4).unwrap();
        let r = iterate_refinement(&start, &geom, &maps, &atoms, 0.0, 0.0, 10, 0.0, MetricKind::Loss).unwrap();
        assert!(trajectory_distance(&r.trajectory, &alt) < 1e-9);
        let conv = iterate_refinement(&start, &geom, &maps, &atoms, 0.0, 0.0, 10, 1e-12, MetricKind::Loss).unwrap();
        assert!(conv.rounds <= 10);
    }

    #[test]
    fn zero_atoms_dmf_surrogate_follows_mean_field() {
        let (sol, geom, maps) = setup(400, 1.0, 3);
        let atoms = GaussianAtoms::zeros(&geom, 3, 1);
        let tr = dmf_surrogate_run(&sol, &geom, &maps, &atoms).unwrap();
        // without atoms, p_y(l) follows the noiseless characteristic path
        for y in 0..2 {
            let beta: Vec<f64> = sol.beta.column(y).iter().cloned().collect();
            let path = characteristic_paths(&sol.a_theta, &beta, &sol.b_omega, &maps, sol.model.labels[y], &DMatrix::zeros(1, 3));
            let i = geom.rows_of(y)[0];
            for l in 0..3 {
                assert!((tr.p[l][(i, 0)] - path.p[(0, l)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_parity_under_common_random_numbers() {
        let (sol, geom, maps) = setup(200, 1.0, 3);
        let atoms = GaussianAtoms::sample_psi(&geom, 3, 1, &SeedKey::new(8));
        let a = matched_surrogate_run(&sol, &geom, &maps, &atoms, 1.0, MetricKind::Loss).unwrap();
        let b = matched_surrogate_run(&sol, &geom, &maps, &atoms.negate_gamma(), -1.0, MetricKind::Loss).unwrap();
        assert_eq!(a.curve, b.curve);
    }
}
