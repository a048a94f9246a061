//! The alternative process ψ and the perturbed original process φ′.
//!
//! Both are solved in the order θ(l) → p(l) → ω(l) → q(l); the factors
//! A_θ, A_ω grow by one block column per step, so step l only ever reads
//! kernel columns ≤ l.

use crate::error::{Error, Result};
use crate::kernels::{
    b_omega_col, b_theta_col, gamma_times_factor_col, set_block_col, v_omega_col, v_theta_col,
    BAtoms, BlockFactor, ComponentKernels, KernelSet,
};
use crate::mixture::{Dataset, Geometry};
use crate::rng::{normal_matrix, SeedKey};
use crate::trajectory::{check_finite, DynamicsMaps, ProcessTag, Trajectory};
use nalgebra::DMatrix;

/// Standard normal atoms of one component. Unused atoms are 0×0.
#[derive(Clone, Debug)]
pub struct ComponentAtoms {
    /// n×LJ
    pub g: DMatrix<f64>,
    /// m_ζ×LJ, rows in the order of `Geometry::rows_of(ζ)`
    pub h: DMatrix<f64>,
    /// LJ×LJ
    pub w: DMatrix<f64>,
    /// LJ×LJ
    pub gamma: DMatrix<f64>,
    /// n×LJ
    pub u: DMatrix<f64>,
}

impl ComponentAtoms {
    pub fn b_atoms(&self) -> BAtoms<'_> {
        BAtoms {
            g: &self.g,
            h: &self.h,
            w: &self.w,
            gamma: &self.gamma,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianAtoms {
    pub components: Vec<ComponentAtoms>,
    /// m×LJ
    pub v: DMatrix<f64>,
}

impl GaussianAtoms {
    /// Atoms of ψ: G, H, W, Γ. Each atom has its own stream `key/name/ζ`.
    pub fn sample_psi(geom: &Geometry, steps: usize, j: usize, key: &SeedKey) -> Self {
        let lj = steps * j;
        let comps = (0..geom.spec.n_components())
            .map(|z| ComponentAtoms {
                g: normal_matrix(&mut key.child("G").child(z).rng(), geom.n(), lj),
                h: normal_matrix(&mut key.child("H").child(z).rng(), geom.rows_of(z).len(), lj),
                w: normal_matrix(&mut key.child("W").child(z).rng(), lj, lj),
                gamma: normal_matrix(&mut key.child("Gamma").child(z).rng(), lj, lj),
                u: DMatrix::zeros(0, 0),
            })
            .collect();
        GaussianAtoms {
            components: comps,
            v: DMatrix::zeros(0, 0),
        }
    }

    /// Atoms of φ′: U, V, Γ.
    pub fn sample_phi(geom: &Geometry, steps: usize, j: usize, key: &SeedKey) -> Self {
        let lj = steps * j;
        let comps = (0..geom.spec.n_components())
            .map(|z| ComponentAtoms {
                g: DMatrix::zeros(0, 0),
                h: DMatrix::zeros(0, 0),
                w: DMatrix::zeros(0, 0),
                gamma: normal_matrix(&mut key.child("Gamma").child(z).rng(), lj, lj),
                u: normal_matrix(&mut key.child("U").child(z).rng(), geom.n(), lj),
            })
            .collect();
        GaussianAtoms {
            components: comps,
            v: normal_matrix(&mut key.child("V").rng(), geom.m(), lj),
        }
    }

    /// All atoms zero, in ψ and φ′ shapes.
    pub fn zeros(geom: &Geometry, steps: usize, j: usize) -> Self {
        let lj = steps * j;
        let comps = (0..geom.spec.n_components())
            .map(|z| ComponentAtoms {
                g: DMatrix::zeros(geom.n(), lj),
                h: DMatrix::zeros(geom.rows_of(z).len(), lj),
                w: DMatrix::zeros(lj, lj),
                gamma: DMatrix::zeros(lj, lj),
                u: DMatrix::zeros(geom.n(), lj),
            })
            .collect();
        GaussianAtoms {
            components: comps,
            v: DMatrix::zeros(geom.m(), lj),
        }
    }

    /// Same atoms with Γ → −Γ.
    pub fn negate_gamma(&self) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.gamma = -&c.gamma;
        }
        out
    }

    fn gamma_is_zero(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.gamma.iter().all(|&x| x == 0.0))
    }
}

fn scatter_rows(target: &mut DMatrix<f64>, rows: &[usize], src: &DMatrix<f64>) {
    for (k, &i) in rows.iter().enumerate() {
        target.row_mut(i).copy_from(&src.row(k));
    }
}

/// p(l) of ψ given kernels with at least l+1 θ-columns and l ω-columns.
pub fn psi_p(
    l: usize,
    geom: &Geometry,
    ks: &KernelSet,
    atoms: &GaussianAtoms,
    omega: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let j = ks.j;
    let mut p = DMatrix::zeros(geom.m(), j);
    for (z, ck) in ks.components.iter().enumerate() {
        debug_assert!(ck.a_theta.blocks() > l);
        let rows = geom.rows_of(z);
        if rows.is_empty() {
            continue;
        }
        let h = &atoms.components[z].h;
        let mut pz = DMatrix::zeros(rows.len(), j);
        for mu in 0..=l {
            pz += h.columns(mu * j, j) * ck.a_theta.block(mu, l);
        }
        for mu in 0..l {
            let b = crate::linalg::block(&ck.b_omega, j, mu, l);
            let wz = crate::linalg::select_rows(&omega[mu], rows);
            pz += wz * b;
        }
        for mut r in pz.row_iter_mut() {
            r += &ck.beta[l];
        }
        scatter_rows(&mut p, rows, &pz);
    }
    p
}

/// q(l) of ψ given kernels with at least l+1 columns on both sides.
pub fn psi_q(
    l: usize,
    geom: &Geometry,
    ks: &KernelSet,
    atoms: &GaussianAtoms,
    theta: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let j = ks.j;
    let sm = (geom.m() as f64).sqrt();
    let mut q = ks.e[l].clone();
    for (z, ck) in ks.components.iter().enumerate() {
        debug_assert!(ck.a_omega.blocks() > l);
        let g = &atoms.components[z].g;
        let cov = &geom.spec.components[z].covariance;
        let mut gt = DMatrix::zeros(geom.n(), j);
        for mu in 0..=l {
            gt += g.columns(mu * j, j) * ck.a_omega.block(mu, l);
        }
        q += cov.apply_sqrt(&gt) / sm;
        let mut mem = DMatrix::zeros(geom.n(), j);
        for (mu, th) in theta.iter().enumerate().take(l + 1) {
            mem += th * crate::linalg::block(&ck.b_theta, j, mu, l);
        }
        q += cov.apply(&mem);
    }
    q
}

fn empty_kernels(geom: &Geometry, steps: usize, j: usize, sigma: f64, z: f64) -> KernelSet {
    let lj = steps * j;
    KernelSet {
        components: (0..geom.spec.n_components())
            .map(|_| ComponentKernels {
                v_theta: DMatrix::zeros(lj, lj),
                v_omega: DMatrix::zeros(lj, lj),
                a_theta: BlockFactor::new(j),
                a_omega: BlockFactor::new(j),
                b_theta: DMatrix::zeros(lj, lj),
                b_omega: DMatrix::zeros(lj, lj),
                beta: Vec::with_capacity(steps),
            })
            .collect(),
        e: Vec::with_capacity(steps),
        sigma,
        z,
        j,
    }
}

/// Solve ψ(ξ) + ρ₀(ξ) = 0 sequentially. Returns the trajectory and the kernels built on the way.
pub fn run_alternative_with_kernels<M: DynamicsMaps + ?Sized>(
    geom: &Geometry,
    maps: &M,
    sigma: f64,
    z: f64,
    atoms: &GaussianAtoms,
    steps: usize,
) -> Result<(Trajectory, KernelSet)> {
    if steps == 0 {
        return Err(Error::InvalidRange {
            name: "L",
            value: 0.0,
        });
    }
    let j = maps.width();
    let (m, n) = (geom.m(), geom.n());
    let labels = &geom.labels;
    let mut ks = empty_kernels(geom, steps, j, sigma, z);
    let mut tr = Trajectory::empty(m, n, j, ProcessTag::Alternative);
    let mut omega_z: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); geom.spec.n_components()];
    for l in 0..steps {
        let theta = maps.theta(l, &tr.q, &tr.p, labels);
        check_finite(&theta, l, "theta")?;
        tr.theta.push(theta);
        for (zi, comp) in geom.spec.components.iter().enumerate() {
            let ck = &mut ks.components[zi];
            let r_theta = comp.covariance.apply(&tr.theta[l]);
            let col = v_theta_col(&tr.theta, &r_theta, l, sigma);
            set_block_col(&mut ck.v_theta, j, l, &col);
            ck.a_theta.extend(&col)?;
            let mz = &geom.means.means[zi];
            ck.beta
                .push(DMatrix::from_fn(1, j, |_, c| mz.dot(&tr.theta[l].column(c))));
            let rh = comp.covariance.apply_sqrt(&tr.theta[l]);
            let bo = b_omega_col(
                l,
                atoms.components[zi].b_atoms(),
                &rh,
                &ck.a_theta,
                &ck.a_omega,
                sigma,
                z,
                m,
            )?;
            set_block_col(&mut ck.b_omega, j, l, &bo);
        }
        let p = psi_p(l, geom, &ks, atoms, &tr.omega);
        check_finite(&p, l, "p")?;
        tr.p.push(p);
        let omega = maps.omega(l, &tr.p, &tr.q, labels);
        check_finite(&omega, l, "omega")?;
        tr.omega.push(omega);
        let mut e = DMatrix::zeros(n, j);
        for zi in 0..geom.spec.n_components() {
            let rows = geom.rows_of(zi);
            let wz = crate::linalg::select_rows(&tr.omega[l], rows);
            let sums = DMatrix::from_fn(1, j, |_, c| wz.column(c).sum() / m as f64);
            e += &geom.means.means[zi] * sums;
            omega_z[zi].push(wz);
            let ck = &mut ks.components[zi];
            let col = v_omega_col(&omega_z[zi], l, m, sigma);
            set_block_col(&mut ck.v_omega, j, l, &col);
            ck.a_omega.extend(&col)?;
            let bt = b_theta_col(
                l,
                atoms.components[zi].b_atoms(),
                &omega_z[zi][l],
                &ck.a_theta,
                &ck.a_omega,
                sigma,
                z,
                m,
            )?;
            set_block_col(&mut ck.b_theta, j, l, &bt);
        }
        ks.e.push(e);
        let q = psi_q(l, geom, &ks, atoms, &tr.theta);
        check_finite(&q, l, "q")?;
        tr.q.push(q);
    }
    tr.meta.steps = steps;
    for ck in &mut ks.components {
        ck.v_theta = crate::linalg::symmetrize(&upper_to_full(&ck.v_theta));
        ck.v_omega = crate::linalg::symmetrize(&upper_to_full(&ck.v_omega));
    }
    Ok((tr, ks))
}

fn upper_to_full(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        if r <= c {
            m[(r, c)]
        } else {
            m[(c, r)]
        }
    })
}

/// Solve ψ(ξ) + ρ₀(ξ) = 0 sequentially.
pub fn run_alternative<M: DynamicsMaps + ?Sized>(
    geom: &Geometry,
    maps: &M,
    sigma: f64,
    z: f64,
    atoms: &GaussianAtoms,
    steps: usize,
) -> Result<Trajectory> {
    run_alternative_with_kernels(geom, maps, sigma, z, atoms, steps).map(|r| r.0)
}

/// Run the ψ recursion with kernels held fixed (mean-field, matched or
/// previous-round kernels) and atoms G, H.
pub fn run_with_kernels<M: DynamicsMaps + ?Sized>(
    geom: &Geometry,
    maps: &M,
    ks: &KernelSet,
    atoms: &GaussianAtoms,
    steps: usize,
    tag: ProcessTag,
) -> Result<Trajectory> {
    let j = maps.width();
    let labels = &geom.labels;
    let mut tr = Trajectory::empty(geom.m(), geom.n(), j, tag);
    for l in 0..steps {
        let theta = maps.theta(l, &tr.q, &tr.p, labels);
        check_finite(&theta, l, "theta")?;
        tr.theta.push(theta);
        let p = psi_p(l, geom, ks, atoms, &tr.omega);
        check_finite(&p, l, "p")?;
        tr.p.push(p);
        let omega = maps.omega(l, &tr.p, &tr.q, labels);
        check_finite(&omega, l, "omega")?;
        tr.omega.push(omega);
        let q = psi_q(l, geom, ks, atoms, &tr.theta);
        check_finite(&q, l, "q")?;
        tr.q.push(q);
    }
    tr.meta.steps = steps;
    Ok(tr)
}

/// Memory coefficients of φ′ on the p side: column l of A_ω⁻¹(ΓᵀA_θ)_U.
fn phi_z_col(gamma: &DMatrix<f64>, at: &BlockFactor, ao: &BlockFactor, l: usize) -> Result<Vec<DMatrix<f64>>> {
    if l == 0 {
        return Ok(Vec::new());
    }
    ao.solve_upper(l, &gamma_times_factor_col(gamma, at, l, l, true))
}

/// Memory coefficients of φ′ on the q side: column l of A_θ⁻¹(ΓA_ω)_u.
fn phi_y_col(gamma: &DMatrix<f64>, at: &BlockFactor, ao: &BlockFactor, l: usize) -> Result<Vec<DMatrix<f64>>> {
    at.solve_upper(l + 1, &gamma_times_factor_col(gamma, ao, l, l + 1, false))
}

/// p(l) of φ′: Xᵀθ(l) + σV(:,l) + c·Σ_{μ<l} ω_ζ(μ)·[A_ω⁻¹(ΓᵀA_θ)_U](μ,l).
#[allow(clippy::too_many_arguments)]
fn phi_p(
    l: usize,
    x: &DMatrix<f64>,
    geom: &Geometry,
    theta_l: &DMatrix<f64>,
    omega: &[DMatrix<f64>],
    factors: &[(BlockFactor, BlockFactor)],
    atoms: &GaussianAtoms,
    sigma: f64,
    c: f64,
    with_gamma: bool,
) -> Result<DMatrix<f64>> {
    let j = theta_l.ncols();
    let mut p = x.tr_mul(theta_l);
    if sigma != 0.0 {
        p += atoms.v.columns(l * j, j) * sigma;
    }
    if with_gamma && l > 0 {
        for (zi, (at, ao)) in factors.iter().enumerate() {
            let rows = geom.rows_of(zi);
            let y = phi_z_col(&atoms.components[zi].gamma, at, ao, l)?;
            let mut add = DMatrix::zeros(rows.len(), j);
            for (mu, ym) in y.iter().enumerate() {
                add += crate::linalg::select_rows(&omega[mu], rows) * ym;
            }
            for (k, &i) in rows.iter().enumerate() {
                let mut r = p.row_mut(i);
                r += add.row(k) * c;
            }
        }
    }
    Ok(p)
}

/// q(l) of φ′: Xω(l)/m + (σ/√m)Σ R^{1/2}U_ζ(:,l) + c·Σ_ζ Σ_{μ≤l} Rθ(μ)·[A_θ⁻¹(ΓA_ω)_u](μ,l).
#[allow(clippy::too_many_arguments)]
fn phi_q(
    l: usize,
    x: &DMatrix<f64>,
    geom: &Geometry,
    theta: &[DMatrix<f64>],
    omega_l: &DMatrix<f64>,
    factors: &[(BlockFactor, BlockFactor)],
    atoms: &GaussianAtoms,
    sigma: f64,
    c: f64,
    with_gamma: bool,
) -> Result<DMatrix<f64>> {
    let j = omega_l.ncols();
    let m = geom.m() as f64;
    let mut q = (x * omega_l) / m;
    for (zi, comp) in geom.spec.components.iter().enumerate() {
        let mut add = DMatrix::zeros(geom.n(), j);
        if sigma != 0.0 {
            add += comp
                .covariance
                .apply_sqrt(&atoms.components[zi].u.columns(l * j, j).into_owned())
                * (sigma / m.sqrt());
        }
        if with_gamma {
            let (at, ao) = &factors[zi];
            let y = phi_y_col(&atoms.components[zi].gamma, at, ao, l)?;
            let mut s = DMatrix::zeros(geom.n(), j);
            for (mu, ym) in y.iter().enumerate() {
                s += &theta[mu] * ym;
            }
            add += comp.covariance.apply(&s) * c;
        }
        q += add;
    }
    Ok(q)
}

/// Solve φ′(ξ) + ρ₀(ξ) = 0 sequentially on the real data matrix.
/// With Γ identically zero the Γ terms and their factorizations are skipped.
pub fn run_perturbed_original<M: DynamicsMaps + ?Sized>(
    data: &Dataset,
    maps: &M,
    sigma: f64,
    z: f64,
    atoms: &GaussianAtoms,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidRange {
            name: "L",
            value: 0.0,
        });
    }
    let geom = &data.geom;
    let j = maps.width();
    let (m, n) = (geom.m(), geom.n());
    let labels = &geom.labels;
    let with_gamma = !atoms.gamma_is_zero();
    let c = ((1.0 + z * z) / m as f64).sqrt();
    let d = geom.spec.n_components();
    let mut factors: Vec<(BlockFactor, BlockFactor)> =
        (0..d).map(|_| (BlockFactor::new(j), BlockFactor::new(j))).collect();
    let mut omega_z: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); d];
    let mut tr = Trajectory::empty(m, n, j, ProcessTag::Perturbed);
    for l in 0..steps {
        let theta = maps.theta(l, &tr.q, &tr.p, labels);
        check_finite(&theta, l, "theta")?;
        tr.theta.push(theta);
        if with_gamma {
            for (zi, comp) in geom.spec.components.iter().enumerate() {
                let r_theta = comp.covariance.apply(&tr.theta[l]);
                factors[zi]
                    .0
                    .extend(&v_theta_col(&tr.theta, &r_theta, l, sigma))?;
            }
        }
        let p = phi_p(
            l, &data.x, geom, &tr.theta[l], &tr.omega, &factors, atoms, sigma, c, with_gamma,
        )?;
        check_finite(&p, l, "p")?;
        tr.p.push(p);
        let omega = maps.omega(l, &tr.p, &tr.q, labels);
        check_finite(&omega, l, "omega")?;
        tr.omega.push(omega);
        if with_gamma {
            for (zi, wz) in omega_z.iter_mut().enumerate() {
                wz.push(crate::linalg::select_rows(&tr.omega[l], geom.rows_of(zi)));
                factors[zi].1.extend(&v_omega_col(wz, l, m, sigma))?;
            }
        }
        let q = phi_q(
            l, &data.x, geom, &tr.theta, &tr.omega[l], &factors, atoms, sigma, c, with_gamma,
        )?;
        check_finite(&q, l, "q")?;
        tr.q.push(q);
    }
    tr.meta.steps = steps;
    Ok(tr)
}

/// Responses (q blocks, p blocks) of one process evaluated at a fixed ξ.
#[derive(Clone, Debug)]
pub struct Responses {
    pub q: Vec<DMatrix<f64>>,
    pub p: Vec<DMatrix<f64>>,
}

/// Fixed point ξ = (Θ, Ω) with precomputed factors, for repeated evaluation
/// of ψ(ξ) and φ′(ξ) under fresh atoms.
pub struct FixedXi<'a> {
    pub geom: &'a Geometry,
    pub theta: Vec<DMatrix<f64>>,
    pub omega: Vec<DMatrix<f64>>,
    pub sigma: f64,
    pub z: f64,
    factors: Vec<(BlockFactor, BlockFactor)>,
    mean_x: DMatrix<f64>,
}

impl<'a> FixedXi<'a> {
    pub fn new(
        geom: &'a Geometry,
        theta: Vec<DMatrix<f64>>,
        omega: Vec<DMatrix<f64>>,
        sigma: f64,
        z: f64,
    ) -> Result<Self> {
        let j = theta[0].ncols();
        let th = crate::linalg::hstack(&theta);
        let om = crate::linalg::hstack(&omega);
        let (vt, vo) = crate::kernels::compute_overlaps(&th, &om, geom, sigma);
        let factors = vt
            .iter()
            .zip(&vo)
            .map(|(a, b)| {
                Ok((
                    crate::kernels::block_cholesky(a, j)?,
                    crate::kernels::block_cholesky(b, j)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FixedXi {
            geom,
            theta,
            omega,
            sigma,
            z,
            factors,
            mean_x: geom.mean_matrix(),
        })
    }

    pub fn steps(&self) -> usize {
        self.theta.len()
    }

    pub fn factors(&self) -> &[(BlockFactor, BlockFactor)] {
        &self.factors
    }

    /// ψ(ξ) responses under the given ψ atoms.
    pub fn eval_psi(&self, atoms: &GaussianAtoms) -> Result<Responses> {
        let b: Vec<BAtoms<'_>> = atoms.components.iter().map(|c| c.b_atoms()).collect();
        let ks = KernelSet::compute(&self.theta, &self.omega, self.geom, &b, self.sigma, self.z)?;
        let steps = self.steps();
        Ok(Responses {
            q: (0..steps)
                .map(|l| psi_q(l, self.geom, &ks, atoms, &self.theta))
                .collect(),
            p: (0..steps)
                .map(|l| psi_p(l, self.geom, &ks, atoms, &self.omega))
                .collect(),
        })
    }

    /// φ′(ξ) responses with data noise X̃ (n×m) and φ′ atoms.
    pub fn eval_phi(&self, noise: &DMatrix<f64>, atoms: &GaussianAtoms) -> Result<Responses> {
        let x = &self.mean_x + noise;
        let c = ((1.0 + self.z * self.z) / self.geom.m() as f64).sqrt();
        let steps = self.steps();
        let mut q = Vec::with_capacity(steps);
        let mut p = Vec::with_capacity(steps);
        for l in 0..steps {
            p.push(phi_p(
                l, &x, self.geom, &self.theta[l], &self.omega, &self.factors, atoms, self.sigma,
                c, true,
            )?);
            q.push(phi_q(
                l, &x, self.geom, &self.theta, &self.omega[l], &self.factors, atoms, self.sigma,
                c, true,
            )?);
        }
        Ok(Responses { q, p })
    }

    /// Means shared by both processes: e(l) and 𝟏β(l, ζ).
    pub fn means(&self) -> Responses {
        let (e, beta) = crate::kernels::compute_bias(&self.theta, &self.omega, self.geom);
        let j = self.theta[0].ncols();
        let p = beta
            .iter()
            .map(|bl| {
                DMatrix::from_fn(self.geom.m(), j, |i, c| bl[self.geom.latents[i]][(0, c)])
            })
            .collect();
        Responses { q: e, p }
    }

    /// Second moments of the centered responses (J = 1), indexed q: (l, i) → l·n + i,
    /// p: (l, i) → l·m + i. Returns (qq, pp, qp).
    pub fn closed_form_moments(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let geom = self.geom;
        let (m, n, steps) = (geom.m(), geom.n(), self.steps());
        let mf = m as f64;
        let zz = 1.0 + self.z * self.z;
        let th = crate::linalg::hstack(&self.theta);
        let om = crate::linalg::hstack(&self.omega);
        let mut qq = DMatrix::zeros(n * steps, n * steps);
        let mut pp = DMatrix::zeros(m * steps, m * steps);
        let mut qp = DMatrix::zeros(n * steps, m * steps);
        for (zi, comp) in geom.spec.components.iter().enumerate() {
            let (at, ao) = &self.factors[zi];
            let (a_t, a_o) = (at.matrix(), ao.matrix());
            let v_t = a_t.tr_mul(a_t);
            let v_o = a_o.tr_mul(a_o);
            let rows = geom.rows_of(zi);
            let r = comp.covariance.apply(&DMatrix::identity(n, n));
            // θ̃ = ΘA_θ⁻¹, ω̃ = Ω_ζA_ω⁻¹
            let tt = th.clone() * a_t.clone().try_inverse().expect("factor is invertible");
            let oz = crate::linalg::select_rows(&om, rows);
            let ot = &oz * a_o.clone().try_inverse().expect("factor is invertible");
            let rtt = &r * &tt;
            let rth = &r * &th;
            for l in 0..steps {
                for lp in 0..steps {
                    let k = l.min(lp);
                    let s = rtt.columns(0, k + 1) * rtt.columns(0, k + 1).transpose();
                    let blk = (&r + s * zz) * (v_o[(l, lp)] / mf);
                    let mut v = qq.view_mut((l * n, lp * n), (n, n));
                    v += blk;
                }
            }
            for l in 0..steps {
                for lp in 0..steps {
                    let k = l.min(lp);
                    for (a, &i) in rows.iter().enumerate() {
                        for (b, &ip) in rows.iter().enumerate() {
                            let mut x = if i == ip { 1.0 } else { 0.0 };
                            for mu in 0..k {
                                x += zz / mf * ot[(a, mu)] * ot[(b, mu)];
                            }
                            pp[(l * m + i, lp * m + ip)] = v_t[(l, lp)] * x;
                        }
                    }
                }
            }
            for l in 0..steps {
                for lp in 0..steps {
                    for (a, &i) in rows.iter().enumerate() {
                        let col: nalgebra::DVector<f64> = if lp <= l {
                            let mut s = oz[(a, l)];
                            for mu in 0..lp {
                                s += zz * ot[(a, mu)] * a_o[(mu, l)];
                            }
                            rth.column(lp) * (s / mf)
                        } else {
                            let mut v = rth.column(lp).into_owned();
                            for mu in 0..=l {
                                v += rtt.column(mu) * (zz * a_t[(mu, lp)]);
                            }
                            v * (oz[(a, l)] / mf)
                        };
                        qp.view_mut((l * n, lp * m + i), (n, 1)).copy_from(&col);
                    }
                }
            }
        }
        (qq, pp, qp)
    }
}

/// One draw of ψ(ξ) and one of φ′(ξ) with independent atom sets.
pub fn eval_processes_at(
    xi: &FixedXi<'_>,
    psi_atoms: &GaussianAtoms,
    phi_atoms: &GaussianAtoms,
    noise: &DMatrix<f64>,
) -> Result<(Responses, Responses)> {
    Ok((xi.eval_psi(psi_atoms)?, xi.eval_phi(noise, phi_atoms)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::mixture::{sample_dataset, MixtureSpec};
    use crate::perceptron::{momentum_coeffs, Activation, Loss, Perceptron};
    use crate::trajectory::run_original;
    use std::sync::Mutex;

    fn setup(m: usize, n: usize, steps: usize) -> (Dataset, Perceptron) {
        let ds = sample_dataset(&MixtureSpec::two_class(n, -0.5, 0.3), m, 1).unwrap();
        let maps = Perceptron {
            activation: Activation::SoftRelu,
            loss: Loss::Squared,
            coeffs: momentum_coeffs(0.3, 0.2, steps).unwrap(),
            theta0: ds.geom.means.theta0.clone(),
        };
        (ds, maps)
    }

    struct Tracker<'a> {
        inner: &'a Perceptron,
        log: Mutex<Vec<(char, usize, usize, usize)>>,
    }

    impl DynamicsMaps for Tracker<'_> {
        fn width(&self) -> usize {
            1
        }
        fn theta(&self, l: usize, q: &[DMatrix<f64>], p: &[DMatrix<f64>], y: &[f64]) -> DMatrix<f64> {
            self.log.lock().unwrap().push(('t', l, q.len(), p.len()));
            self.inner.theta(l, q, p, y)
        }
        fn omega(&self, l: usize, p: &[DMatrix<f64>], q: &[DMatrix<f64>], y: &[f64]) -> DMatrix<f64> {
            self.log.lock().unwrap().push(('w', l, q.len(), p.len()));
            self.inner.omega(l, p, q, y)
        }
    }

    #[test]
    fn alternative_respects_sequential_order() {
        let (ds, maps) = setup(12, 6, 4);
        let atoms = GaussianAtoms::sample_psi(&ds.geom, 4, 1, &SeedKey::new(3));
        let t = Tracker {
            inner: &maps,
            log: Mutex::new(Vec::new()),
        };
        let (tr, ks) = run_alternative_with_kernels(&ds.geom, &t, 0.1, 0.5, &atoms, 4).unwrap();
        tr.check_shapes().unwrap();
        let log = t.log.lock().unwrap();
        for l in 0..4 {
            assert_eq!(log[2 * l], ('t', l, l, l));
            assert_eq!(log[2 * l + 1], ('w', l, l, l + 1));
        }
        // the incrementally grown kernels equal the batch kernels at the final ξ
        let b: Vec<_> = atoms.components.iter().map(|c| c.b_atoms()).collect();
        let batch = KernelSet::compute(&tr.theta, &tr.omega, &ds.geom, &b, 0.1, 0.5).unwrap();
        for (a, c) in ks.components.iter().zip(&batch.components) {
            assert!(max_abs_diff(a.a_theta.matrix(), c.a_theta.matrix()) < 1e-10);
            assert!(max_abs_diff(a.a_omega.matrix(), c.a_omega.matrix()) < 1e-10);
            assert!(max_abs_diff(&a.b_theta, &c.b_theta) < 1e-10);
            assert!(max_abs_diff(&a.b_omega, &c.b_omega) < 1e-10);
            assert!(max_abs_diff(&a.v_theta, &c.v_theta) < 1e-12);
        }
        // and ξ is a zero of ψ + ρ₀ at those kernels
        let psi = FixedXi::new(&ds.geom, tr.theta.clone(), tr.omega.clone(), 0.1, 0.5)
            .unwrap()
            .eval_psi(&atoms)
            .unwrap();
        for l in 0..4 {
            assert!(max_abs_diff(&psi.q[l], &tr.q[l]) < 1e-10);
            assert!(max_abs_diff(&psi.p[l], &tr.p[l]) < 1e-10);
        }
    }

    #[test]
    fn zero_atoms_without_ridge_give_deterministic_skeleton() {
        let (ds, maps) = setup(10, 5, 3);
        let atoms = GaussianAtoms::zeros(&ds.geom, 3, 1);
        let (tr, ks) = run_alternative_with_kernels(&ds.geom, &maps, 0.0, 0.0, &atoms, 3).unwrap();
        for l in 0..3 {
            assert!(max_abs_diff(&tr.q[l], &ks.e[l]) < 1e-14);
            for (i, &z) in ds.geom.latents.iter().enumerate() {
                assert!((tr.p[l][(i, 0)] - ks.components[z].beta[l][(0, 0)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn perturbed_without_noise_equals_original() {
        let (ds, maps) = setup(14, 7, 4);
        let atoms = GaussianAtoms::zeros(&ds.geom, 4, 1);
        let a = run_perturbed_original(&ds, &maps, 0.0, 0.7, &atoms, 4).unwrap();
        let b = run_original(&ds, &maps, 4).unwrap();
        for l in 0..4 {
            assert!(max_abs_diff(&a.q[l], &b.q[l]) < 1e-14);
            assert!(max_abs_diff(&a.p[l], &b.p[l]) < 1e-14);
        }
    }

    #[test]
    fn perturbed_first_step_adds_ridge_noise() {
        let (ds, maps) = setup(14, 7, 1);
        let atoms = GaussianAtoms::sample_phi(&ds.geom, 1, 1, &SeedKey::new(4));
        let a = run_perturbed_original(&ds, &maps, 0.5, 0.0, &atoms, 1).unwrap();
        let base = ds.x.tr_mul(&maps.theta_at(0, &[]));
        let want = base + atoms.v.columns(0, 1) * 0.5;
        assert!(max_abs_diff(&a.p[0], &want) < 1e-14);
    }

    /// Exact fixed-ξ covariance by enumerating the response to every unit atom:
    /// the responses are affine in the atoms, so Cov = MMᵀ.
    #[test]
    fn closed_form_moments_match_linear_response_oracle() {
        let (ds, maps) = setup(6, 3, 3);
        let tr = run_original(&ds, &maps, 3).unwrap();
        let (sigma, z) = (0.4, 0.7);
        let xi = FixedXi::new(&ds.geom, tr.theta.clone(), tr.omega.clone(), sigma, z).unwrap();
        let (qq, pp, qp) = xi.closed_form_moments();
        let geom = &ds.geom;
        let zero = GaussianAtoms::zeros(geom, 3, 1);
        let base = xi.eval_psi(&zero).unwrap();
        let flat = |r: &Responses| {
            let mut v: Vec<f64> = Vec::new();
            for b in &r.q {
                v.extend(b.iter());
            }
            for b in &r.p {
                v.extend(b.iter());
            }
            v
        };
        let b0 = flat(&base);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut push = |atoms: &GaussianAtoms| {
            let f = flat(&xi.eval_psi(atoms).unwrap());
            cols.push(f.iter().zip(&b0).map(|(a, b)| a - b).collect());
        };
        for zi in 0..2 {
            let fields: [fn(&mut ComponentAtoms) -> &mut DMatrix<f64>; 4] =
                [|c| &mut c.g, |c| &mut c.h, |c| &mut c.w, |c| &mut c.gamma];
            for f in fields {
                let (r, c) = f(&mut zero.clone().components[zi]).shape();
                for a in 0..r {
                    for b in 0..c {
                        let mut at = zero.clone();
                        f(&mut at.components[zi])[(a, b)] = 1.0;
                        push(&at);
                    }
                }
            }
        }
        let mm = DMatrix::from_fn(b0.len(), cols.len(), |r, c| cols[c][r]);
        let cov = &mm * mm.transpose();
        let nq = qq.nrows();
        assert!(max_abs_diff(&cov.view((0, 0), (nq, nq)).into_owned(), &qq) < 1e-10);
        assert!(max_abs_diff(&cov.view((nq, nq), (pp.nrows(), pp.nrows())).into_owned(), &pp) < 1e-10);
        assert!(max_abs_diff(&cov.view((0, nq), (nq, pp.nrows())).into_owned(), &qp) < 1e-10);
    }

    #[test]
    fn phi_moments_match_linear_response_oracle() {
        let (ds, maps) = setup(6, 3, 3);
        let tr = run_original(&ds, &maps, 3).unwrap();
        let xi = FixedXi::new(&ds.geom, tr.theta.clone(), tr.omega.clone(), 0.4, 0.7).unwrap();
        let (qq, pp, qp) = xi.closed_form_moments();
        let geom = &ds.geom;
        let zero = GaussianAtoms::zeros(geom, 3, 1);
        let no_noise = DMatrix::zeros(3, 6);
        let flat = |r: &Responses| {
            let mut v: Vec<f64> = Vec::new();
            r.q.iter().for_each(|b| v.extend(b.iter()));
            r.p.iter().for_each(|b| v.extend(b.iter()));
            v
        };
        let b0 = flat(&xi.eval_phi(&no_noise, &zero).unwrap());
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut push = |noise: &DMatrix<f64>, atoms: &GaussianAtoms| {
            let f = flat(&xi.eval_phi(noise, atoms).unwrap());
            cols.push(f.iter().zip(&b0).map(|(a, b)| a - b).collect());
        };
        for k in 0..18 {
            let mut x = no_noise.clone();
            x[k] = 1.0;
            push(&x, &zero);
        }
        for k in 0..zero.v.len() {
            let mut at = zero.clone();
            at.v[k] = 1.0;
            push(&no_noise, &at);
        }
        for zi in 0..2 {
            for k in 0..9 {
                let mut at = zero.clone();
                at.components[zi].gamma[k] = 1.0;
                push(&no_noise, &at);
            }
            for k in 0..9 {
                let mut at = zero.clone();
                at.components[zi].u[k] = 1.0;
                push(&no_noise, &at);
            }
        }
        let mm = DMatrix::from_fn(b0.len(), cols.len(), |r, c| cols[c][r]);
        let cov = &mm * mm.transpose();
        let nq = qq.nrows();
        assert!(max_abs_diff(&cov.view((0, 0), (nq, nq)).into_owned(), &qq) < 1e-10);
        assert!(max_abs_diff(&cov.view((nq, nq), (pp.nrows(), pp.nrows())).into_owned(), &pp) < 1e-10);
        assert!(max_abs_diff(&cov.view((0, nq), (nq, pp.nrows())).into_owned(), &qp) < 1e-10);
        // both processes share the same means
        let mean = xi.means();
        let b = xi.eval_phi(&no_noise, &zero).unwrap();
        for l in 0..3 {
            assert!(max_abs_diff(&b.q[l], &mean.q[l]) < 1e-12);
            assert!(max_abs_diff(&b.p[l], &mean.p[l]) < 1e-12);
        }
    }
}
