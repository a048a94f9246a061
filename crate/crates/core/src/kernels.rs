//! Overlaps V, block Cholesky-type factors A (AᵀA = V, SPD diagonal blocks),
//! memory kernels B and bias terms e, β.

use crate::error::{Error, Result};
use crate::linalg::{block, symmetrize};
use crate::mixture::Geometry;
use nalgebra::DMatrix;

/// Jitter added to a degenerate Schur complement.
pub const JITTER: f64 = 1e-12;
/// Negative eigenvalues down to −ROUNDING·scale are treated as rounding of a zero.
pub const ROUNDING: f64 = 1e-10;

/// Factor a Schur complement S = DᵀD with D symmetric PD.
/// Returns (D, D⁻¹). Degenerate S (min eigenvalue ≤ JITTER) is jittered.
pub fn factor_diag_block(s: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let j = s.nrows();
    let scale = s.diagonal().iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    if j == 1 {
        let mut x = s[(0, 0)];
        if !x.is_finite() {
            return Err(Error::NonFiniteValue { step, block: "schur" });
        }
        if x <= JITTER {
            if x <= -ROUNDING * scale {
                return Err(Error::NotPositiveDefinite {
                    step,
                    min_eigenvalue: x,
                });
            }
            x = (x + JITTER).max(JITTER);
        }
        let d = x.sqrt();
        return Ok((
            DMatrix::from_element(1, 1, d),
            DMatrix::from_element(1, 1, 1.0 / d),
        ));
    }
    let eig = symmetrize(s).symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if !lmin.is_finite() {
        return Err(Error::NonFiniteValue { step, block: "schur" });
    }
    let mut vals = eig.eigenvalues.clone();
    if lmin <= JITTER {
        if lmin <= -ROUNDING * scale {
            return Err(Error::NotPositiveDefinite {
                step,
                min_eigenvalue: lmin,
            });
        }
        vals.iter_mut().for_each(|v| *v = (*v + JITTER).max(JITTER));
    }
    let u = &eig.eigenvectors;
    let d = u * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * u.transpose();
    let dinv = u * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * u.transpose();
    Ok((d, dinv))
}

/// Block upper-triangular factor grown one block column at a time.
#[derive(Clone, Debug)]
pub struct BlockFactor {
    j: usize,
    mat: DMatrix<f64>,
    diag_inv: Vec<DMatrix<f64>>,
}

impl BlockFactor {
    pub fn new(j: usize) -> Self {
        BlockFactor {
            j,
            mat: DMatrix::zeros(0, 0),
            diag_inv: Vec::new(),
        }
    }

    /// Wrap a precomputed block upper-triangular factor. Singular diagonal
    /// blocks are allowed; solving against them reports `SingularFactor`.
    pub fn from_upper(mat: DMatrix<f64>, j: usize) -> Self {
        let steps = mat.nrows() / j;
        let diag_inv = (0..steps)
            .map(|k| {
                block(&mat, j, k, k)
                    .try_inverse()
                    .unwrap_or_else(|| DMatrix::from_element(j, j, f64::INFINITY))
            })
            .collect();
        BlockFactor { j, mat, diag_inv }
    }

    pub fn width(&self) -> usize {
        self.j
    }

    /// Number of block columns factored so far.
    pub fn blocks(&self) -> usize {
        self.diag_inv.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn block(&self, r: usize, c: usize) -> DMatrix<f64> {
        block(&self.mat, self.j, r, c)
    }

    #[inline]
    fn scalar(&self, r: usize, c: usize) -> f64 {
        self.mat[(r, c)]
    }

    /// Append block column k given V(0..=k, k).
    pub fn extend(&mut self, vcol: &[DMatrix<f64>]) -> Result<()> {
        let k = self.blocks();
        let j = self.j;
        if vcol.len() != k + 1 {
            return Err(Error::Shape(format!(
                "extend expects {} blocks, got {}",
                k + 1,
                vcol.len()
            )));
        }
        let size = (k + 1) * j;
        let mut mat = DMatrix::zeros(size, size);
        mat.view_mut((0, 0), (k * j, k * j)).copy_from(&self.mat);
        let mut col: Vec<DMatrix<f64>> = Vec::with_capacity(k + 1);
        for r in 0..k {
            let mut acc = vcol[r].clone();
            for (mu, cm) in col.iter().enumerate() {
                acc -= block(&mat, j, mu, r).transpose() * cm;
            }
            col.push(&self.diag_inv[r] * acc);
        }
        let mut s = vcol[k].clone();
        for c in &col {
            s -= c.transpose() * c;
        }
        let (d, dinv) = factor_diag_block(&s, k)?;
        col.push(d);
        for (r, c) in col.iter().enumerate() {
            mat.view_mut((r * j, k * j), (j, j)).copy_from(c);
        }
        self.mat = mat;
        self.diag_inv.push(dinv);
        Ok(())
    }

    /// Solve A[0..upto, 0..upto]·x = rhs by block back-substitution.
    pub fn solve_upper(&self, upto: usize, rhs: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        assert!(upto <= self.blocks() && rhs.len() == upto);
        let j = self.j;
        if j == 1 {
            let w = rhs.first().map_or(0, |b| b.ncols());
            let mut x = vec![DMatrix::zeros(1, w); upto];
            for k in (0..upto).rev() {
                let mut acc = rhs[k].clone();
                for (r, xr) in x.iter().enumerate().take(upto).skip(k + 1) {
                    let a = self.scalar(k, r);
                    if a != 0.0 {
                        acc -= xr * a;
                    }
                }
                x[k] = acc * self.diag_inv[k][(0, 0)];
                if !x[k].iter().all(|v| v.is_finite()) {
                    return Err(Error::SingularFactor { step: k });
                }
            }
            return Ok(x);
        }
        let mut x: Vec<DMatrix<f64>> = rhs.to_vec();
        for k in (0..upto).rev() {
            let mut acc = rhs[k].clone();
            for r in k + 1..upto {
                acc -= self.block(k, r) * &x[r];
            }
            x[k] = &self.diag_inv[k] * acc;
            if !x[k].iter().all(|v| v.is_finite()) {
                return Err(Error::SingularFactor { step: k });
            }
        }
        Ok(x)
    }
}

/// Factor a full LJ×LJ block matrix.
pub fn block_cholesky(v: &DMatrix<f64>, j: usize) -> Result<BlockFactor> {
    let steps = v.nrows() / j;
    let mut f = BlockFactor::new(j);
    for k in 0..steps {
        let col: Vec<DMatrix<f64>> = (0..=k).map(|r| block(v, j, r, k)).collect();
        f.extend(&col)?;
    }
    Ok(f)
}

/// Append-only extension (alias of [`BlockFactor::extend`] for callers holding a factor).
pub fn extend_cholesky(a: &mut BlockFactor, vcol: &[DMatrix<f64>]) -> Result<()> {
    a.extend(vcol)
}

/// Column l of V_θ(ζ): θ(μ)ᵀRθ(l) + σ²δ for μ ≤ l, given Rθ(l).
pub fn v_theta_col(
    theta: &[DMatrix<f64>],
    r_theta_l: &DMatrix<f64>,
    l: usize,
    sigma: f64,
) -> Vec<DMatrix<f64>> {
    (0..=l)
        .map(|mu| {
            let mut b = theta[mu].tr_mul(r_theta_l);
            if mu == l {
                for i in 0..b.nrows() {
                    b[(i, i)] += sigma * sigma;
                }
            }
            b
        })
        .collect()
}

/// Column l of V_ω(ζ): ω_ζ(μ)ᵀω_ζ(l)/m + σ²δ for μ ≤ l.
pub fn v_omega_col(omega_z: &[DMatrix<f64>], l: usize, m: usize, sigma: f64) -> Vec<DMatrix<f64>> {
    (0..=l)
        .map(|mu| {
            let mut b = omega_z[mu].tr_mul(&omega_z[l]) / m as f64;
            if mu == l {
                for i in 0..b.nrows() {
                    b[(i, i)] += sigma * sigma;
                }
            }
            b
        })
        .collect()
}

/// V_θ(ζ) = ΘᵀR(ζ)Θ + σ²I and V_ω(ζ) = Ω_ζᵀΩ_ζ/m + σ²I for every component.
pub fn compute_overlaps(
    theta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    geom: &Geometry,
    sigma: f64,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let m = geom.m() as f64;
    let lj = theta.ncols();
    let ridge = DMatrix::<f64>::identity(lj, lj) * (sigma * sigma);
    let mut vt = Vec::new();
    let mut vo = Vec::new();
    for (z, comp) in geom.spec.components.iter().enumerate() {
        vt.push(theta.tr_mul(&comp.covariance.apply(theta)) + &ridge);
        let oz = crate::linalg::select_rows(omega, geom.rows_of(z));
        vo.push(oz.tr_mul(&oz) / m + &ridge);
    }
    (vt, vo)
}

/// Σ_ν Γ(μ, ν)·A(ν, l) for μ < `rows` (or Σ_ν Γ(ν, μ)ᵀ·A(ν, l) when `transpose`).
pub fn gamma_times_factor_col(
    gamma: &DMatrix<f64>,
    a: &BlockFactor,
    l: usize,
    rows: usize,
    transpose: bool,
) -> Vec<DMatrix<f64>> {
    let j = a.width();
    (0..rows)
        .map(|mu| {
            let mut acc = DMatrix::zeros(j, j);
            for nu in 0..=l {
                let g = if transpose {
                    block(gamma, j, nu, mu).transpose()
                } else {
                    block(gamma, j, mu, nu)
                };
                acc += g * a.block(nu, l);
            }
            acc
        })
        .collect()
}

/// Random inputs of the memory kernels for one component.
#[derive(Clone, Copy)]
pub struct BAtoms<'a> {
    /// n×LJ
    pub g: &'a DMatrix<f64>,
    /// m_ζ×LJ
    pub h: &'a DMatrix<f64>,
    /// LJ×LJ
    pub w: &'a DMatrix<f64>,
    /// LJ×LJ
    pub gamma: &'a DMatrix<f64>,
}

/// Column l of B_ω(ζ) (blocks μ < l): A_ω⁻¹[(GᵀR^{1/2}Θ + σWᵀ + zΓᵀA_θ)/√m]_U.
#[allow(clippy::too_many_arguments)]
pub fn b_omega_col(
    l: usize,
    atoms: BAtoms<'_>,
    r_half_theta_l: &DMatrix<f64>,
    a_theta: &BlockFactor,
    a_omega: &BlockFactor,
    sigma: f64,
    z: f64,
    m: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if l == 0 {
        return Ok(Vec::new());
    }
    let j = a_theta.width();
    let sm = (m as f64).sqrt();
    let gam = if z != 0.0 {
        gamma_times_factor_col(atoms.gamma, a_theta, l, l, true)
    } else {
        Vec::new()
    };
    let rhs: Vec<DMatrix<f64>> = (0..l)
        .map(|mu| {
            let mut c = atoms.g.columns(mu * j, j).tr_mul(r_half_theta_l);
            if sigma != 0.0 {
                c += block(atoms.w, j, l, mu).transpose() * sigma;
            }
            if z != 0.0 {
                c += &gam[mu] * z;
            }
            c / sm
        })
        .collect();
    a_omega.solve_upper(l, &rhs)
}

/// Column l of B_θ(ζ) (blocks μ ≤ l): A_θ⁻¹[HᵀΩ_ζ/m + (σW + zΓA_ω)/√m]_u.
#[allow(clippy::too_many_arguments)]
pub fn b_theta_col(
    l: usize,
    atoms: BAtoms<'_>,
    omega_z_l: &DMatrix<f64>,
    a_theta: &BlockFactor,
    a_omega: &BlockFactor,
    sigma: f64,
    z: f64,
    m: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let j = a_theta.width();
    let sm = (m as f64).sqrt();
    let gam = if z != 0.0 {
        gamma_times_factor_col(atoms.gamma, a_omega, l, l + 1, false)
    } else {
        Vec::new()
    };
    let rhs: Vec<DMatrix<f64>> = (0..=l)
        .map(|mu| {
            let mut c = atoms.h.columns(mu * j, j).tr_mul(omega_z_l) / m as f64;
            if sigma != 0.0 {
                c += block(atoms.w, j, mu, l) * (sigma / sm);
            }
            if z != 0.0 {
                c += &gam[mu] * (z / sm);
            }
            c
        })
        .collect();
    a_theta.solve_upper(l + 1, &rhs)
}

/// Place a column of blocks into a square block matrix.
pub fn set_block_col(target: &mut DMatrix<f64>, j: usize, l: usize, col: &[DMatrix<f64>]) {
    for (mu, b) in col.iter().enumerate() {
        target.view_mut((mu * j, l * j), (j, j)).copy_from(b);
    }
}

/// Kernels of one component.
#[derive(Clone, Debug)]
pub struct ComponentKernels {
    pub v_theta: DMatrix<f64>,
    pub v_omega: DMatrix<f64>,
    pub a_theta: BlockFactor,
    pub a_omega: BlockFactor,
    pub b_theta: DMatrix<f64>,
    pub b_omega: DMatrix<f64>,
    /// β(l, ζ) as 1×J rows.
    pub beta: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct KernelSet {
    pub components: Vec<ComponentKernels>,
    pub e: Vec<DMatrix<f64>>,
    pub sigma: f64,
    pub z: f64,
    pub j: usize,
}

/// B_θ(ζ) and B_ω(ζ) from complete factors, one column at a time.
#[allow(clippy::too_many_arguments)]
pub fn compute_b(
    a_theta: &BlockFactor,
    a_omega: &BlockFactor,
    atoms: BAtoms<'_>,
    omega_z: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    r_half: &crate::mixture::Covariance,
    sigma: f64,
    z: f64,
    m: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let j = a_theta.width();
    let steps = a_theta.blocks();
    let mut bt = DMatrix::zeros(steps * j, steps * j);
    let mut bo = DMatrix::zeros(steps * j, steps * j);
    let rt = r_half.apply_sqrt(theta);
    for l in 0..steps {
        let ol = omega_z.columns(l * j, j).into_owned();
        let ct = b_theta_col(l, atoms, &ol, a_theta, a_omega, sigma, z, m)?;
        set_block_col(&mut bt, j, l, &ct);
        let rtl = rt.columns(l * j, j).into_owned();
        let co = b_omega_col(l, atoms, &rtl, a_theta, a_omega, sigma, z, m)?;
        set_block_col(&mut bo, j, l, &co);
    }
    Ok((bt, bo))
}

/// e(l) = Σ_ζ x̂(ζ)·𝟏ᵀω_ζ(l)/m and β(l, ζ) = x̂(ζ)ᵀθ(l).
pub fn compute_bias(
    theta: &[DMatrix<f64>],
    omega: &[DMatrix<f64>],
    geom: &Geometry,
) -> (Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>) {
    let m = geom.m() as f64;
    let d = geom.spec.n_components();
    let e = omega
        .iter()
        .map(|w| {
            let mut out = DMatrix::zeros(geom.n(), w.ncols());
            for z in 0..d {
                let rows = geom.rows_of(z);
                let sums = DMatrix::from_fn(1, w.ncols(), |_, c| {
                    rows.iter().map(|&i| w[(i, c)]).sum::<f64>() / m
                });
                out += &geom.means.means[z] * sums;
            }
            out
        })
        .collect();
    let beta = theta
        .iter()
        .map(|t| {
            (0..d)
                .map(|z| {
                    let mz = &geom.means.means[z];
                    DMatrix::from_fn(1, t.ncols(), |_, c| mz.dot(&t.column(c)))
                })
                .collect()
        })
        .collect();
    (e, beta)
}

impl KernelSet {
    /// Batch kernels at a fixed realization (Θ, Ω).
    pub fn compute(
        theta: &[DMatrix<f64>],
        omega: &[DMatrix<f64>],
        geom: &Geometry,
        atoms: &[BAtoms<'_>],
        sigma: f64,
        z: f64,
    ) -> Result<Self> {
        let j = theta[0].ncols();
        let th = crate::linalg::hstack(theta);
        let om = crate::linalg::hstack(omega);
        let (vt, vo) = compute_overlaps(&th, &om, geom, sigma);
        let (e, beta) = compute_bias(theta, omega, geom);
        let mut components = Vec::new();
        for (zi, comp) in geom.spec.components.iter().enumerate() {
            let a_theta = block_cholesky(&vt[zi], j)?;
            let a_omega = block_cholesky(&vo[zi], j)?;
            let oz = crate::linalg::select_rows(&om, geom.rows_of(zi));
            let (b_theta, b_omega) = compute_b(
                &a_theta,
                &a_omega,
                atoms[zi],
                &oz,
                &th,
                &comp.covariance,
                sigma,
                z,
                geom.m(),
            )?;
            components.push(ComponentKernels {
                v_theta: vt[zi].clone(),
                v_omega: vo[zi].clone(),
                a_theta,
                a_omega,
                b_theta,
                b_omega,
                beta: beta.iter().map(|b| b[zi].clone()).collect(),
            });
        }
        Ok(KernelSet {
            components,
            e,
            sigma,
            z,
            j,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{block_upper, max_abs_diff};
    use crate::mixture::{sample_dataset, MixtureSpec};
    use crate::rng::{normal_matrix, SeedKey};
    use proptest::prelude::*;

    fn random_spd(seed: u64, size: usize) -> DMatrix<f64> {
        let mut rng = SeedKey::new(seed).rng();
        let g = normal_matrix(&mut rng, size, size + 2);
        &g * g.transpose() / size as f64 + DMatrix::identity(size, size) * 0.05
    }

    #[test]
    fn identity_and_hand_example() {
        let f = block_cholesky(&DMatrix::identity(4, 4), 2).unwrap();
        assert!(max_abs_diff(f.matrix(), &DMatrix::identity(4, 4)) < 1e-15);
        let v = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let f = block_cholesky(&v, 1).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(max_abs_diff(f.matrix(), &want) < 1e-15);
        let mut inc = BlockFactor::new(1);
        inc.extend(&[DMatrix::from_element(1, 1, 4.0)]).unwrap();
        extend_cholesky(&mut inc, &[DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 5.0)])
            .unwrap();
        assert_eq!(inc.block(0, 1)[(0, 0)], 1.0);
        assert_eq!(inc.block(1, 1)[(0, 0)], 2.0);
    }

    #[test]
    fn scalar_case_equals_transposed_cholesky() {
        let v = random_spd(3, 6);
        let f = block_cholesky(&v, 1).unwrap();
        let l = v.clone().cholesky().unwrap().l();
        assert!(max_abs_diff(f.matrix(), &l.transpose()) < 1e-12);
    }

    #[test]
    fn uncorrelated_extension_is_block_diagonal() {
        let mut f = block_cholesky(&random_spd(1, 2), 2).unwrap();
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        f.extend(&[DMatrix::zeros(2, 2), d.clone()]).unwrap();
        assert_eq!(f.block(0, 1), DMatrix::zeros(2, 2));
        let dd = f.block(1, 1);
        assert!(max_abs_diff(&(&dd * &dd), &d) < 1e-12);
        assert!(max_abs_diff(&dd, &dd.transpose()) < 1e-15);
    }

    #[test]
    fn degenerate_gram_is_jittered_and_indefinite_rejected() {
        // frozen dynamics: θ(l) = θ₀ for all l
        let v = DMatrix::from_element(3, 3, 0.01);
        let f = block_cholesky(&v, 1).unwrap();
        assert!(max_abs_diff(&f.matrix().tr_mul(f.matrix()), &v) < 1e-10);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            block_cholesky(&bad, 1),
            Err(Error::NotPositiveDefinite { step: 1, .. })
        ));
    }

    #[test]
    fn solve_upper_matches_dense_inverse() {
        let v = random_spd(8, 6);
        let f = block_cholesky(&v, 2).unwrap();
        let mut rng = SeedKey::new(9).rng();
        let rhs = normal_matrix(&mut rng, 6, 2);
        let blocks: Vec<_> = (0..3).map(|k| rhs.rows(2 * k, 2).into_owned()).collect();
        let x = f.solve_upper(3, &blocks).unwrap();
        let dense = f.matrix().clone().try_inverse().unwrap() * &rhs;
        for k in 0..3 {
            assert!(max_abs_diff(&x[k], &dense.rows(2 * k, 2).into_owned()) < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_and_incremental(seed in 0u64..10_000, j in 1usize..=2, steps in 1usize..=6) {
            let v = random_spd(seed, j * steps);
            let f = block_cholesky(&v, j).unwrap();
            let a = f.matrix();
            prop_assert!(max_abs_diff(&a.tr_mul(a), &v) < 1e-10);
            prop_assert!(max_abs_diff(a, &block_upper(a, j, false)) == 0.0);
            for k in 0..steps {
                let d = f.block(k, k);
                prop_assert!(max_abs_diff(&d, &d.transpose()) < 1e-12);
                prop_assert!(crate::linalg::min_eigenvalue(&d) > 0.0);
            }
            // extend one step at a time from a shorter batch factor
            let mut inc = block_cholesky(&v.view((0, 0), (j, j)).into_owned(), j).unwrap();
            for k in 1..steps {
                let col: Vec<_> = (0..=k).map(|r| block(&v, j, r, k)).collect();
                inc.extend(&col).unwrap();
            }
            prop_assert!(max_abs_diff(inc.matrix(), a) < 1e-10);
        }
    }

    fn small_setup(j: usize) -> (crate::mixture::Dataset, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let ds = sample_dataset(&MixtureSpec::two_class(5, -0.3, 0.1), 20, 4).unwrap();
        let mut rng = SeedKey::new(5).rng();
        let th = (0..3).map(|_| normal_matrix(&mut rng, 5, j)).collect();
        let om = (0..3).map(|_| normal_matrix(&mut rng, 20, j)).collect();
        (ds, th, om)
    }

    #[test]
    fn overlaps_match_brute_force_and_partition() {
        let (ds, th, om) = small_setup(1);
        let t = crate::linalg::hstack(&th);
        let o = crate::linalg::hstack(&om);
        let (vt, vo) = compute_overlaps(&t, &o, &ds.geom, 0.5);
        for a in 0..3 {
            for b in 0..3 {
                let s: f64 = (0..5).map(|i| t[(i, a)] * t[(i, b)]).sum();
                let ridge = if a == b { 0.25 } else { 0.0 };
                assert!((vt[0][(a, b)] - s - ridge).abs() < 1e-12);
            }
        }
        let total = &vo[0] + &vo[1] - DMatrix::identity(3, 3) * 0.5;
        assert!(max_abs_diff(&total, &(o.tr_mul(&o) / 20.0)) < 1e-12);
        let (vt0, _) = compute_overlaps(&(t * 0.0), &o, &ds.geom, 0.5);
        assert!(max_abs_diff(&vt0[1], &(DMatrix::identity(3, 3) * 0.25)) < 1e-15);
    }

    #[test]
    fn bias_matches_brute_force() {
        let (ds, th, om) = small_setup(1);
        let (e, beta) = compute_bias(&th, &om, &ds.geom);
        for l in 0..3 {
            let mut want = DMatrix::zeros(5, 1);
            for i in 0..20 {
                want += &ds.geom.means.means[ds.geom.latents[i]] * (om[l][(i, 0)] / 20.0);
            }
            assert!(max_abs_diff(&e[l], &want) < 1e-12);
            for z in 0..2 {
                let b = ds.geom.means.means[z].dot(&th[l].column(0));
                assert!((beta[l][z][(0, 0)] - b).abs() < 1e-12);
            }
        }
        let zero: Vec<_> = om.iter().map(|o| o * 0.0).collect();
        assert_eq!(compute_bias(&th, &zero, &ds.geom).0[0].norm(), 0.0);
    }

    /// Dense oracle: explicit inverses of the full factors.
    #[test]
    fn memory_kernels_match_dense_oracle() {
        for j in [1usize, 2] {
            let (ds, th, om) = small_setup(j);
            let lj = 3 * j;
            let t = crate::linalg::hstack(&th);
            let o = crate::linalg::hstack(&om);
            let (sigma, z, m) = (0.3, 0.7, 20usize);
            let mut rng = SeedKey::new(6).rng();
            let rows = ds.geom.rows_of(0).to_vec();
            let g = normal_matrix(&mut rng, 5, lj);
            let h = normal_matrix(&mut rng, rows.len(), lj);
            let w = normal_matrix(&mut rng, lj, lj);
            let gam = normal_matrix(&mut rng, lj, lj);
            let atoms = BAtoms { g: &g, h: &h, w: &w, gamma: &gam };
            let (vt, vo) = compute_overlaps(&t, &o, &ds.geom, sigma);
            let at = block_cholesky(&vt[0], j).unwrap();
            let ao = block_cholesky(&vo[0], j).unwrap();
            let oz = crate::linalg::select_rows(&o, &rows);
            let cov = crate::mixture::Covariance::Identity;
            let (bt, bo) = compute_b(&at, &ao, atoms, &oz, &t, &cov, sigma, z, m).unwrap();
            let sm = (m as f64).sqrt();
            let ct = h.tr_mul(&oz) / m as f64 + (&w * sigma + &gam * ao.matrix() * z) / sm;
            let want_t = at.matrix().clone().try_inverse().unwrap() * block_upper(&ct, j, false);
            let co = (g.tr_mul(&t) + w.transpose() * sigma + gam.transpose() * at.matrix() * z) / sm;
            let want_o = ao.matrix().clone().try_inverse().unwrap() * block_upper(&co, j, true);
            assert!(max_abs_diff(&bt, &want_t) < 1e-10);
            assert!(max_abs_diff(&bo, &want_o) < 1e-10);
            assert!(max_abs_diff(&bo, &block_upper(&bo, j, true)) == 0.0);
            assert!(max_abs_diff(&bt, &block_upper(&bt, j, false)) == 0.0);

            // Γ → −Γ flips only the z-parts on both sides
            let neg = -&gam;
            let atoms_neg = BAtoms { gamma: &neg, ..atoms };
            let (bt2, bo2) = compute_b(&at, &ao, atoms_neg, &oz, &t, &cov, sigma, z, m).unwrap();
            let (bt0, bo0) = compute_b(&at, &ao, atoms, &oz, &t, &cov, sigma, 0.0, m).unwrap();
            assert!(max_abs_diff(&(&bt - &bt0), &(&bt0 - &bt2)) < 1e-10);
            assert!(max_abs_diff(&(&bo - &bo0), &(&bo0 - &bo2)) < 1e-10);
        }
    }

    #[test]
    fn b_theta_vanishes_without_noise() {
        let (ds, th, om) = small_setup(1);
        let t = crate::linalg::hstack(&th);
        let o = crate::linalg::hstack(&om);
        let (vt, vo) = compute_overlaps(&t, &o, &ds.geom, 0.0);
        let at = block_cholesky(&vt[0], 1).unwrap();
        let ao = block_cholesky(&vo[0], 1).unwrap();
        let rows = ds.geom.rows_of(0);
        let g = DMatrix::from_element(5, 3, 1.0);
        let h = DMatrix::zeros(rows.len(), 3);
        let w = DMatrix::from_element(3, 3, 1.0);
        let oz = crate::linalg::select_rows(&o, rows);
        let atoms = BAtoms { g: &g, h: &h, w: &w, gamma: &w };
        let cov = crate::mixture::Covariance::Identity;
        let (bt, _) = compute_b(&at, &ao, atoms, &oz, &t, &cov, 0.0, 0.0, 20).unwrap();
        assert_eq!(bt.norm(), 0.0);
    }
}
