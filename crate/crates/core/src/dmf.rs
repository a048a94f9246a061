//! Dynamic mean-field (DMF) equations of the perceptron, solved by damped
//! Picard iteration with Monte-Carlo expectations over the characteristic process.

use crate::error::{Error, Result};
use crate::linalg::{block_upper, min_eigenvalue, psd_upper_factor};
use crate::mixture::MixtureSpec;
use crate::perceptron::{AlgoCoeffs, MetricKind, Perceptron};
use crate::rng::{normal_matrix, SeedKey};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct DmfOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Characteristic paths per sweep (rounded up to even).
    pub paths: usize,
    pub seed: u64,
    /// Largest tolerated MC standard error of ᾱ or diag V̄_ω.
    pub se_cap: f64,
    pub estimator: BEstimator,
}

/// How B̄_θ(y) is estimated from the characteristic paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BEstimator {
    /// ρE[∂ω(l)/∂h̃(μ)] along the paths, with ω′ by central differences.
    Derivative,
    /// Ā_θ⁻¹ρE[hωᵀ]; unstable once Ā_θ has tiny diagonal entries.
    Correlation,
}

impl BEstimator {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "derivative" => Ok(BEstimator::Derivative),
            "correlation" => Ok(BEstimator::Correlation),
            _ => Err(Error::Config(format!("unknown estimator `{tag}`"))),
        }
    }
}

impl Default for DmfOptions {
    fn default() -> Self {
        DmfOptions {
            damping: 0.5,
            tol: 1e-6,
            max_iter: 200,
            paths: 100_000,
            seed: 0,
            se_cap: 0.1,
            estimator: BEstimator::Derivative,
        }
    }
}

/// Class data of the DMF problem: labels, frequencies and ν over 𝒴*.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassModel {
    pub labels: Vec<f64>,
    pub rho: Vec<f64>,
    /// (d+1)×(d+1), `*` last.
    pub nu: DMatrix<f64>,
    pub gamma: f64,
}

impl ClassModel {
    pub fn from_spec(spec: &MixtureSpec, gamma: f64) -> Result<Self> {
        spec.validate()?;
        if !spec.all_identity() {
            return Err(Error::Config(
                "the DMF specialization needs identity covariances".into(),
            ));
        }
        let d = spec.n_components();
        let labels: Vec<f64> = spec.components.iter().map(|c| c.label).collect();
        for a in 0..d {
            for b in a + 1..d {
                if labels[a] == labels[b] {
                    return Err(Error::Config("DMF needs one component per label".into()));
                }
            }
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidRange {
                name: "gamma",
                value: gamma,
            });
        }
        Ok(ClassModel {
            labels,
            rho: spec.components.iter().map(|c| c.frequency).collect(),
            nu: DMatrix::from_fn(d + 1, d + 1, |a, b| spec.nu(a, b)),
            gamma,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

/// Converged (or last) DMF kernels and propagators, J = 1.
#[derive(Clone, Debug)]
pub struct DmfSolution {
    pub model: ClassModel,
    pub coeffs: AlgoCoeffs,
    pub v_theta: DMatrix<f64>,
    pub a_theta: DMatrix<f64>,
    /// Per class.
    pub v_omega: Vec<DMatrix<f64>>,
    pub a_omega: Vec<DMatrix<f64>>,
    /// Per-class parts of B̄_θ; `b_theta` is their sum.
    pub b_theta_class: Vec<DMatrix<f64>>,
    pub b_theta: DMatrix<f64>,
    pub b_omega: DMatrix<f64>,
    /// L×d
    pub alpha: DMatrix<f64>,
    /// L×d
    pub beta: DMatrix<f64>,
    pub lambda_tilde: DVector<f64>,
    /// L×d, α̃(y) per class; α̃(*) = −λ̃.
    pub alpha_tilde: DMatrix<f64>,
    pub big_lambda_tilde: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub mc_paths: usize,
    pub config_hash: String,
}

/// Iterated state of the solver.
#[derive(Clone, Debug)]
struct State {
    alpha: DMatrix<f64>,
    v_omega: Vec<DMatrix<f64>>,
    b_theta: Vec<DMatrix<f64>>,
}

/// Quantities that follow from the state without Monte Carlo.
struct Derived {
    lambda_tilde: DVector<f64>,
    big_lambda_tilde: DMatrix<f64>,
    alpha_tilde: DMatrix<f64>,
    v_theta: DMatrix<f64>,
    beta: DMatrix<f64>,
    b_omega: DMatrix<f64>,
}

fn derive(model: &ClassModel, coeffs: &AlgoCoeffs, st: &State) -> Result<Derived> {
    let steps = coeffs.steps();
    let d = model.classes();
    let lam = &coeffs.big_lambda;
    let b: DMatrix<f64> = st
        .b_theta
        .iter()
        .fold(DMatrix::zeros(steps, steps), |acc, x| acc + x);
    let eye = DMatrix::<f64>::identity(steps, steps);
    // I + ΛB̄ is unit upper triangular
    let m1 = &eye + lam * &b;
    let big_lambda_tilde = m1
        .solve_upper_triangular(lam)
        .ok_or(Error::SingularFactor { step: 0 })?;
    // λ̃ = (I + B̄Λ)⁻ᵀλ
    let m2 = (&eye + &b * lam).transpose();
    let lambda_tilde = m2
        .solve_lower_triangular(&coeffs.lambda)
        .ok_or(Error::SingularFactor { step: 0 })?;
    let alpha_tilde = big_lambda_tilde.tr_mul(&st.alpha);
    let at = |a: usize| -> DVector<f64> {
        if a < d {
            alpha_tilde.column(a).into_owned()
        } else {
            -&lambda_tilde
        }
    };
    let mut v_theta = DMatrix::zeros(steps, steps);
    for a in 0..=d {
        for c in 0..=d {
            let nu = model.nu[(a, c)];
            if nu != 0.0 {
                v_theta += at(a) * at(c).transpose() * nu;
            }
        }
    }
    let vo: DMatrix<f64> = st
        .v_omega
        .iter()
        .fold(DMatrix::zeros(steps, steps), |acc, x| acc + x);
    v_theta += big_lambda_tilde.tr_mul(&vo) * &big_lambda_tilde * model.gamma;
    v_theta = crate::linalg::symmetrize(&v_theta);
    let beta = DMatrix::from_fn(steps, d, |l, y| {
        -(0..=d).map(|a| model.nu[(y, a)] * at(a)[l]).sum::<f64>()
    });
    let b_omega = &big_lambda_tilde * (-model.gamma);
    Ok(Derived {
        lambda_tilde,
        big_lambda_tilde,
        alpha_tilde,
        v_theta,
        beta,
        b_omega,
    })
}

/// Antithetic, whitened standard normals: the sample mean is exactly 0 and
/// the sample second moment exactly I.
pub fn matched_normals(paths: usize, steps: usize, key: &SeedKey) -> DMatrix<f64> {
    let half = paths.div_ceil(2).max(steps + 1);
    let raw = normal_matrix(&mut key.rng(), half, steps);
    let mut z = DMatrix::zeros(2 * half, steps);
    z.view_mut((0, 0), (half, steps)).copy_from(&raw);
    z.view_mut((half, 0), (half, steps)).copy_from(&(-&raw));
    let s = z.tr_mul(&z) / (2 * half) as f64;
    let l = s.cholesky().expect("sample second moment is PD").l();
    // z ← z L⁻ᵀ
    let zt = l
        .solve_lower_triangular(&z.transpose())
        .expect("triangular solve");
    zt.transpose()
}

/// Characteristic paths of one class.
#[derive(Clone, Debug)]
pub struct Paths {
    /// N×L standard normals h(μ)
    pub h: DMatrix<f64>,
    /// N×L h̃ = hĀ_θ
    pub h_tilde: DMatrix<f64>,
    /// N×L p̄_y(l)
    pub p: DMatrix<f64>,
    /// N×L ω(p̄_y(l), y)
    pub omega: DMatrix<f64>,
}

/// p̄_y(l) = β̄(l,y) + h̃(l) + Σ_{μ<l} ω(p̄_y(μ),y)b̄_ω(μ,l), sequential in l.
pub fn characteristic_paths(
    a_theta: &DMatrix<f64>,
    beta_y: &[f64],
    b_omega: &DMatrix<f64>,
    maps: &Perceptron,
    y: f64,
    h: &DMatrix<f64>,
) -> Paths {
    let h_tilde = h * a_theta;
    let (n, steps) = h.shape();
    let mut p = DMatrix::zeros(n, steps);
    let mut omega = DMatrix::zeros(n, steps);
    advance(&h_tilde, beta_y, b_omega, maps, y, 0, &mut p, &mut omega);
    Paths {
        h: h.clone(),
        h_tilde,
        p,
        omega,
    }
}

/// Fill columns `from..` of `p` and `omega`; earlier columns are inputs.
#[allow(clippy::too_many_arguments)]
fn advance(
    h_tilde: &DMatrix<f64>,
    beta_y: &[f64],
    b_omega: &DMatrix<f64>,
    maps: &Perceptron,
    y: f64,
    from: usize,
    p: &mut DMatrix<f64>,
    omega: &mut DMatrix<f64>,
) {
    for l in from..h_tilde.ncols() {
        let mut col = h_tilde.column(l).add_scalar(beta_y[l]);
        for mu in 0..l {
            let b = b_omega[(mu, l)];
            if b != 0.0 {
                col.axpy(b, &omega.column(mu), 1.0);
            }
        }
        let w = col.map(|x| maps.omega_scalar(x, y));
        p.set_column(l, &col);
        omega.set_column(l, &w);
    }
}

/// DMF kernels are typically numerically rank deficient, so they are factored
/// semidefinitely instead of with the jittered block factor.
fn factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_upper_factor(v).map_err(|min_eigenvalue| Error::NotPositiveDefinite {
        step: v.nrows(),
        min_eigenvalue,
    })
}

/// E[∂ω(l)/∂h̃(μ)] as a central difference of path means under a shift of
/// h̃(μ), re-simulating the paths. Valid when ω jumps (ReLU), where the
/// tangent recursion would multiply point masses along a path. The shift is
/// 5% of the spread of p̄(μ).
pub fn shifted_response(
    paths: &Paths,
    beta_y: &[f64],
    b_omega: &DMatrix<f64>,
    maps: &Perceptron,
    y: f64,
) -> DMatrix<f64> {
    let steps = paths.p.ncols();
    let nf = paths.p.nrows() as f64;
    let mut out = DMatrix::zeros(steps, steps);
    for mu in 0..steps {
        let c = paths.p.column(mu);
        let mean = c.mean();
        let sd = (c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf).sqrt();
        let eps = (0.05 * sd).max(1e-4);
        let run = |s: f64| {
            let mut b = beta_y.to_vec();
            b[mu] += s;
            let mut p = paths.p.clone();
            let mut omega = paths.omega.clone();
            advance(&paths.h_tilde, &b, b_omega, maps, y, mu, &mut p, &mut omega);
            omega
        };
        let (up, dn) = (run(eps), run(-eps));
        for l in mu..steps {
            out[(mu, l)] = (up.column(l) - dn.column(l)).sum() / (2.0 * eps * nf);
        }
    }
    out
}

/// E[∂ω(l)/∂h̃(μ)] for μ ≤ l, from the tangent recursion
/// ∂p̄(l)/∂h̃(μ) = δ(l,μ) + Σ_{μ≤ν<l} b̄_ω(ν,l)ω′(ν)∂p̄(ν)/∂h̃(μ).
pub fn derivative_response(
    paths: &Paths,
    b_omega: &DMatrix<f64>,
    maps: &Perceptron,
    y: f64,
) -> DMatrix<f64> {
    let (n, steps) = paths.p.shape();
    let eps = 1e-5;
    let wprime = paths.p.map(|p| {
        (maps.omega_scalar(p + eps, y) - maps.omega_scalar(p - eps, y)) / (2.0 * eps)
    });
    let nf = n as f64;
    let mut out = DMatrix::zeros(steps, steps);
    // g(ν) = ω′(ν)∂p̄(ν)/∂h̃(μ)
    let mut g = DMatrix::zeros(n, steps);
    for mu in 0..steps {
        for l in mu..steps {
            let mut t = if l == mu {
                DVector::from_element(n, 1.0)
            } else {
                DVector::zeros(n)
            };
            for nu in mu..l {
                let b = b_omega[(nu, l)];
                if b != 0.0 {
                    t.axpy(b, &g.column(nu), 1.0);
                }
            }
            let gl = t.component_mul(&wprime.column(l));
            out[(mu, l)] = gl.sum() / nf;
            g.set_column(l, &gl);
        }
    }
    out
}

/// Back substitution for A X = C with rows of zero pivot set to zero; those
/// directions carry no randomness, so the correlation form says nothing about them.
fn solve_upper_skipping_null(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let tiny = 1e-12 * a.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut x = DMatrix::zeros(n, c.ncols());
    for r in (0..n).rev() {
        if a[(r, r)].abs() <= tiny {
            continue;
        }
        for col in 0..c.ncols() {
            let s: f64 = (r + 1..n).map(|k| a[(r, k)] * x[(k, col)]).sum();
            x[(r, col)] = (c[(r, col)] - s) / a[(r, r)];
        }
    }
    x
}

fn omega_jumps(maps: &Perceptron) -> bool {
    matches!(maps.activation, crate::perceptron::Activation::Relu)
}

struct Sweep {
    state: State,
    max_se: f64,
}

fn sweep(
    model: &ClassModel,
    maps: &Perceptron,
    st: &State,
    normals: &DMatrix<f64>,
    estimator: BEstimator,
) -> Result<Sweep> {
    let coeffs = &maps.coeffs;
    let steps = coeffs.steps();
    let derived = derive(model, coeffs, st)?;
    let a_theta = factor(&derived.v_theta)?;
    let nf = normals.nrows() as f64;
    let d = model.classes();
    let mut alpha = DMatrix::zeros(steps, d);
    let mut v_omega = Vec::with_capacity(d);
    let mut b_theta = Vec::with_capacity(d);
    let mut max_se: f64 = 0.0;
    for y in 0..d {
        let beta: Vec<f64> = derived.beta.column(y).iter().cloned().collect();
        let paths = characteristic_paths(
            &a_theta,
            &beta,
            &derived.b_omega,
            maps,
            model.labels[y],
            normals,
        );
        let rho = model.rho[y];
        for l in 0..steps {
            let c = paths.omega.column(l);
            let mean = c.mean();
            alpha[(l, y)] = rho * mean;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let sq_mean = c.iter().map(|x| x * x).sum::<f64>() / nf;
            let sq_var = c.iter().map(|x| (x * x - sq_mean).powi(2)).sum::<f64>() / (nf - 1.0);
            max_se = max_se
                .max(rho * (var / nf).sqrt())
                .max(rho * (sq_var / nf).sqrt());
        }
        v_omega.push(crate::linalg::symmetrize(
            &(paths.omega.tr_mul(&paths.omega) * (rho / nf)),
        ));
        let bt = match estimator {
            BEstimator::Derivative if omega_jumps(maps) => {
                shifted_response(&paths, &beta, &derived.b_omega, maps, model.labels[y])
                    * rho
            }
            BEstimator::Derivative => {
                derivative_response(&paths, &derived.b_omega, maps, model.labels[y]) * rho
            }
            BEstimator::Correlation => {
                let corr = block_upper(&(paths.h.tr_mul(&paths.omega) * (rho / nf)), 1, false);
                solve_upper_skipping_null(&a_theta, &corr)
            }
        };
        b_theta.push(block_upper(&bt, 1, false));
    }
    Ok(Sweep {
        state: State {
            alpha,
            v_omega,
            b_theta,
        },
        max_se,
    })
}

fn rel_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let scale = new.amax().max(old.amax()).max(1e-8);
    crate::linalg::max_abs_diff(new, old) / scale
}

fn state_change(a: &State, b: &State) -> f64 {
    let mut r = rel_change(&a.alpha, &b.alpha);
    for (x, y) in a.v_omega.iter().zip(&b.v_omega) {
        r = r.max(rel_change(x, y));
    }
    for (x, y) in a.b_theta.iter().zip(&b.b_theta) {
        r = r.max(rel_change(x, y));
    }
    r
}

fn damp(old: &State, new: &State, eta: f64) -> State {
    let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - eta) + b * eta;
    State {
        alpha: mix(&old.alpha, &new.alpha),
        v_omega: old.v_omega.iter().zip(&new.v_omega).map(|(a, b)| mix(a, b)).collect(),
        b_theta: old.b_theta.iter().zip(&new.b_theta).map(|(a, b)| mix(a, b)).collect(),
    }
}

fn assemble(
    model: &ClassModel,
    coeffs: &AlgoCoeffs,
    st: State,
    residual: f64,
    iterations: usize,
    paths: usize,
) -> Result<DmfSolution> {
    let der = derive(model, coeffs, &st)?;
    let a_theta = factor(&der.v_theta)?;
    let a_omega = st.v_omega.iter().map(factor).collect::<Result<Vec<_>>>()?;
    let b_theta = st
        .b_theta
        .iter()
        .fold(DMatrix::zeros(coeffs.steps(), coeffs.steps()), |a, b| a + b);
    Ok(DmfSolution {
        model: model.clone(),
        coeffs: coeffs.clone(),
        v_theta: der.v_theta,
        a_theta,
        v_omega: st.v_omega,
        a_omega,
        b_theta_class: st.b_theta,
        b_theta,
        b_omega: der.b_omega,
        alpha: st.alpha,
        beta: der.beta,
        lambda_tilde: der.lambda_tilde,
        alpha_tilde: der.alpha_tilde,
        big_lambda_tilde: der.big_lambda_tilde,
        residual,
        iterations,
        mc_paths: paths,
        config_hash: String::new(),
    })
}

/// One damped sweep of the chain from `current`; returns the new iterate
/// and the residual of the undamped sweep against its input.
pub fn dmf_update(
    current: &DmfSolution,
    maps: &Perceptron,
    opts: &DmfOptions,
) -> Result<DmfSolution> {
    let st = State {
        alpha: current.alpha.clone(),
        v_omega: current.v_omega.clone(),
        b_theta: current.b_theta_class.clone(),
    };
    let normals = matched_normals(opts.paths, maps.coeffs.steps(), &SeedKey::new(opts.seed).child("dmf"));
    let sw = sweep(&current.model, maps, &st, &normals, opts.estimator)?;
    if sw.max_se > opts.se_cap {
        return Err(Error::EstimatorDegenerate {
            stderr: sw.max_se,
            cap: opts.se_cap,
        });
    }
    let r = state_change(&sw.state, &st);
    let next = damp(&st, &sw.state, opts.damping);
    assemble(
        &current.model,
        &maps.coeffs,
        next,
        r,
        current.iterations + 1,
        normals.nrows(),
    )
}

/// Solve the DMF chain. The first sweep from the zero state initializes the
/// iterate; each later sweep is damped. The same normals are used in every
/// sweep, so the iteration is a deterministic map with an exact fixed point.
pub fn solve_dmf(model: &ClassModel, maps: &Perceptron, opts: &DmfOptions) -> Result<DmfSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidRange {
            name: "tol",
            value: opts.tol,
        });
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidRange {
            name: "damping",
            value: opts.damping,
        });
    }
    let steps = maps.coeffs.steps();
    let d = model.classes();
    let normals = matched_normals(opts.paths, steps, &SeedKey::new(opts.seed).child("dmf"));
    let zero = State {
        alpha: DMatrix::zeros(steps, d),
        v_omega: vec![DMatrix::zeros(steps, steps); d],
        b_theta: vec![DMatrix::zeros(steps, steps); d],
    };
    let mut x = sweep(model, maps, &zero, &normals, opts.estimator)?.state;
    let mut residual = f64::INFINITY;
    for k in 1..=opts.max_iter {
        let sw = sweep(model, maps, &x, &normals, opts.estimator)?;
        residual = state_change(&sw.state, &x);
        log::debug!("dmf sweep {k}: residual {residual:.3e}");
        if residual < opts.tol {
            // early sweeps may pass through heavy-tailed transients, so only
            // the accepted kernels are held to the cap
            if sw.max_se > opts.se_cap {
                return Err(Error::EstimatorDegenerate {
                    stderr: sw.max_se,
                    cap: opts.se_cap,
                });
            }
            return assemble(model, &maps.coeffs, sw.state, residual, k, normals.nrows());
        }
        x = damp(&x, &sw.state, opts.damping);
    }
    let last = assemble(model, &maps.coeffs, x, residual, opts.max_iter, normals.nrows())?;
    Err(Error::DmfNotConverged {
        residual,
        iterations: opts.max_iter,
        last: Box::new(last),
    })
}

impl DmfSolution {
    pub fn steps(&self) -> usize {
        self.coeffs.steps()
    }

    /// Characteristic paths of class `y` under this solution.
    pub fn paths(&self, maps: &Perceptron, y: usize, h: &DMatrix<f64>) -> Paths {
        let beta: Vec<f64> = self.beta.column(y).iter().cloned().collect();
        characteristic_paths(
            &self.a_theta,
            &beta,
            &self.b_omega,
            maps,
            self.model.labels[y],
            h,
        )
    }

    /// Residuals of the three propagator systems and of the push-through identity.
    pub fn propagator_residuals(&self) -> [f64; 4] {
        let steps = self.steps();
        let eye = DMatrix::<f64>::identity(steps, steps);
        let lam = &self.coeffs.big_lambda;
        let b = &self.b_theta;
        let r1 = ((&eye + lam * b) * &self.big_lambda_tilde - lam).amax();
        let r2 = ((&eye + b * lam).tr_mul(&self.lambda_tilde) - &self.coeffs.lambda).amax();
        let r3 = (&self.alpha_tilde - self.big_lambda_tilde.tr_mul(&self.alpha)).amax();
        let pt = lam
            * (&eye + b * lam)
                .try_inverse()
                .expect("unit triangular");
        let r4 = (pt - &self.big_lambda_tilde).amax();
        [r1, r2, r3, r4]
    }

    pub fn check_invariants(&self) -> Result<()> {
        for v in std::iter::once(&self.v_theta).chain(self.v_omega.iter()) {
            let e = min_eigenvalue(v);
            if e < -1e-10 {
                return Err(Error::GramNotPsd { min_eigenvalue: e });
            }
        }
        let lt = &self.big_lambda_tilde;
        if crate::linalg::max_abs_diff(lt, &block_upper(lt, 1, true)) > 0.0 {
            return Err(Error::Shape("Λ̃ is not strictly upper triangular".into()));
        }
        Ok(())
    }

    /// Σ_y ρ(y)E[metric(p̄_y(l), y)] and its MC standard error, from fresh matched normals.
    pub fn metric_curve(
        &self,
        maps: &Perceptron,
        kind: MetricKind,
        paths: usize,
        key: &SeedKey,
    ) -> (Vec<f64>, Vec<f64>) {
        let steps = self.steps();
        let h = matched_normals(paths, steps, key);
        let nf = h.nrows() as f64;
        let mut mean = vec![0.0; steps];
        let mut var = vec![0.0; steps];
        for y in 0..self.model.classes() {
            let pth = self.paths(maps, y, &h);
            let rho = self.model.rho[y];
            let label = self.model.labels[y];
            for l in 0..steps {
                let v: Vec<f64> = pth
                    .p
                    .column(l)
                    .iter()
                    .map(|&p| maps.metric_scalar(kind, p, label))
                    .collect();
                let m = v.iter().sum::<f64>() / nf;
                let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
                mean[l] += rho * m;
                var[l] += rho * rho * s2 / nf;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    /// Text artifact: header lines `key = value`, then named dense matrices.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# gcdyn dmf-solution v1").unwrap();
        writeln!(s, "L = {}", self.steps()).unwrap();
        writeln!(s, "gamma = {:e}", self.model.gamma).unwrap();
        writeln!(s, "config_hash = {}", self.config_hash).unwrap();
        writeln!(s, "classes = {}", self.model.classes()).unwrap();
        writeln!(s, "residual = {:e}", self.residual).unwrap();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        writeln!(s, "mc_paths = {}", self.mc_paths).unwrap();
        let mut mat = |name: &str, m: &DMatrix<f64>| {
            writeln!(s, "matrix {name} {} {}", m.nrows(), m.ncols()).unwrap();
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
                writeln!(s, "{}", row.join(" ")).unwrap();
            }
        };
        let d = self.model.classes();
        mat("labels", &DMatrix::from_row_slice(1, d, &self.model.labels));
        mat("rho", &DMatrix::from_row_slice(1, d, &self.model.rho));
        mat("nu", &self.model.nu);
        mat("lambda", &DMatrix::from_column_slice(self.steps(), 1, self.coeffs.lambda.as_slice()));
        mat("Lambda", &self.coeffs.big_lambda);
        mat("V_theta", &self.v_theta);
        mat("A_theta", &self.a_theta);
        for y in 0..d {
            mat(&format!("V_omega.{y}"), &self.v_omega[y]);
            mat(&format!("A_omega.{y}"), &self.a_omega[y]);
            mat(&format!("B_theta.{y}"), &self.b_theta_class[y]);
        }
        mat("B_theta", &self.b_theta);
        mat("B_omega", &self.b_omega);
        mat("alpha", &self.alpha);
        mat("beta", &self.beta);
        mat(
            "lambda_tilde",
            &DMatrix::from_column_slice(self.steps(), 1, self.lambda_tilde.as_slice()),
        );
        mat("alpha_tilde", &self.alpha_tilde);
        mat("Lambda_tilde", &self.big_lambda_tilde);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut mats: std::collections::HashMap<String, DMatrix<f64>> = Default::default();
        let mut lines = text.lines().peekable();
        let perr = |m: String| Error::Parse(m);
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("matrix ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(perr(format!("bad matrix header `{line}`")));
                }
                let rows: usize = parts[1].parse().map_err(|_| perr(line.into()))?;
                let cols: usize = parts[2].parse().map_err(|_| perr(line.into()))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let row = lines.next().ok_or_else(|| perr(format!("{} truncated", parts[0])))?;
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| perr(format!("bad number `{tok}`")))?);
                    }
                }
                if data.len() != rows * cols {
                    return Err(perr(format!("{} has wrong size", parts[0])));
                }
                mats.insert(parts[0].to_string(), DMatrix::from_row_slice(rows, cols, &data));
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(perr(format!("unexpected line `{line}`")));
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| perr(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| perr(format!("bad `{k}`"))) };
        let mut take = |k: &str| mats.remove(k).ok_or_else(|| perr(format!("missing matrix `{k}`")));
        let d = num("classes")? as usize;
        let labels = take("labels")?.iter().cloned().collect();
        let rho = take("rho")?.iter().cloned().collect();
        let nu = take("nu")?;
        let coeffs = AlgoCoeffs {
            lambda: DVector::from_column_slice(take("lambda")?.as_slice()),
            big_lambda: take("Lambda")?,
        };
        let v_theta = take("V_theta")?;
        let a_theta = take("A_theta")?;
        let mut v_omega = Vec::new();
        let mut a_omega = Vec::new();
        let mut b_theta_class = Vec::new();
        for y in 0..d {
            v_omega.push(take(&format!("V_omega.{y}"))?);
            a_omega.push(take(&format!("A_omega.{y}"))?);
            b_theta_class.push(take(&format!("B_theta.{y}"))?);
        }
        let sol = DmfSolution {
            model: ClassModel {
                labels,
                rho,
                nu,
                gamma: num("gamma")?,
            },
            coeffs,
            v_theta,
            a_theta,
            v_omega,
            a_omega,
            b_theta_class,
            b_theta: take("B_theta")?,
            b_omega: take("B_omega")?,
            alpha: take("alpha")?,
            beta: take("beta")?,
            lambda_tilde: DVector::from_column_slice(take("lambda_tilde")?.as_slice()),
            alpha_tilde: take("alpha_tilde")?,
            big_lambda_tilde: take("Lambda_tilde")?,
            residual: num("residual")?,
            iterations: num("iterations")? as usize,
            mc_paths: num("mc_paths")? as usize,
            config_hash: get("config_hash")?.clone(),
        };
        if sol.steps() != num("L")? as usize {
            return Err(perr("L does not match the coefficient size".into()));
        }
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::perceptron::{momentum_coeffs, Activation, Loss};

    fn model(coupling: f64, gamma: f64) -> ClassModel {
        ClassModel::from_spec(&MixtureSpec::two_class(10, coupling, 0.1), gamma).unwrap()
    }

    fn maps(act: Activation, t: f64, s: f64, steps: usize) -> Perceptron {
        Perceptron {
            activation: act,
            loss: Loss::Squared,
            coeffs: momentum_coeffs(t, s, steps).unwrap(),
            theta0: DVector::zeros(1),
        }
    }

    fn opts(paths: usize) -> DmfOptions {
        DmfOptions {
            paths,
            ..Default::default()
        }
    }

    #[test]
    fn matched_normals_are_exactly_white() {
        let z = matched_normals(1000, 4, &SeedKey::new(1));
        let s = z.tr_mul(&z) / z.nrows() as f64;
        assert!(max_abs_diff(&s, &DMatrix::identity(4, 4)) < 1e-12);
        for c in 0..4 {
            assert!(z.column(c).mean().abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_dynamics_converge_in_one_sweep() {
        let md = model(-0.5, 0.5);
        let sol = solve_dmf(&md, &maps(Activation::SoftRelu, 0.0, 0.0, 4), &opts(2000)).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.big_lambda_tilde.amax() == 0.0);
        assert!(sol.alpha_tilde.amax() == 0.0);
        assert!(max_abs_diff(&sol.v_theta, &DMatrix::from_element(4, 4, 0.01)) < 1e-15);
        assert!(sol.beta.amax() == 0.0);
        let (curve, _) = sol.metric_curve(
            &maps(Activation::SoftRelu, 0.0, 0.0, 4),
            MetricKind::Loss,
            2000,
            &SeedKey::new(2),
        );
        // V̄_θ has rank one, so later steps only differ through the jitter
        for l in 1..4 {
            assert!((curve[l] - curve[0]).abs() < 1e-5);
        }
    }

    /// Closed-form DMF for linear activation and squared loss:
    /// ω = T[(β̄ − y) + Āᵀh] with T = (I − B̄_ωᵀ)⁻¹, so every expectation is Gaussian.
    fn linear_oracle(md: &ClassModel, coeffs: &AlgoCoeffs) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
        let steps = coeffs.steps();
        let d = md.classes();
        let eye = DMatrix::<f64>::identity(steps, steps);
        let mut st = State {
            alpha: DMatrix::zeros(steps, d),
            v_omega: vec![DMatrix::zeros(steps, steps); d],
            b_theta: vec![DMatrix::zeros(steps, steps); d],
        };
        for _ in 0..(steps + 5) {
            let der = derive(md, coeffs, &st).unwrap();
            let t = (&eye - der.b_omega.transpose()).try_inverse().unwrap();
            let mut next = st.clone();
            for y in 0..d {
                let rho = md.rho[y];
                let mean = &t * (der.beta.column(y) - DVector::from_element(steps, md.labels[y]));
                next.alpha.set_column(y, &(&mean * rho));
                next.v_omega[y] = (&t * &der.v_theta * t.transpose() + &mean * mean.transpose()) * rho;
                next.b_theta[y] = t.transpose() * rho;
            }
            st = next;
        }
        let der = derive(md, coeffs, &st).unwrap();
        (der.v_theta, st.alpha, st.v_omega)
    }

    #[test]
    fn linear_squared_matches_gaussian_closed_form() {
        let md = model(-0.5, 0.7);
        let mp = maps(Activation::Linear, 0.2, 0.3, 6);
        let sol = solve_dmf(&md, &mp, &DmfOptions { tol: 1e-12, ..opts(4000) }).unwrap();
        let (vt, alpha, vo) = linear_oracle(&md, &mp.coeffs);
        assert!(max_abs_diff(&sol.v_theta, &vt) < 1e-9);
        assert!(max_abs_diff(&sol.alpha, &alpha) < 1e-9);
        for y in 0..2 {
            assert!(max_abs_diff(&sol.v_omega[y], &vo[y]) < 1e-9);
        }
        sol.check_invariants().unwrap();
        for r in sol.propagator_residuals() {
            assert!(r < 1e-10);
        }
    }

    #[test]
    fn beta_starts_at_mean_overlap_with_init() {
        let mut spec = MixtureSpec::two_class(10, -0.5, 0.1);
        spec.overlap_gram[(0, 2)] = 0.03;
        spec.overlap_gram[(2, 0)] = 0.03;
        let md = ClassModel::from_spec(&spec, 0.5).unwrap();
        let sol = solve_dmf(&md, &maps(Activation::SoftRelu, 0.2, 0.0, 3), &opts(4000)).unwrap();
        assert!((sol.beta[(0, 0)] - 0.03).abs() < 1e-15);
        assert!(sol.beta[(0, 1)].abs() < 1e-15);
        assert!((sol.v_theta[(0, 0)] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn soft_relu_gd_converges_and_round_trips() {
        let md = model(-0.5, 0.1);
        let mp = maps(Activation::SoftRelu, 0.2, 0.0, 8);
        let mut sol = solve_dmf(&md, &mp, &opts(20_000)).unwrap();
        assert!(sol.residual < 1e-6);
        sol.check_invariants().unwrap();
        for r in sol.propagator_residuals() {
            assert!(r < 1e-10, "{r}");
        }
        sol.config_hash = "abc".into();
        let back = DmfSolution::from_text(&sol.to_text()).unwrap();
        assert_eq!(back.v_theta, sol.v_theta);
        assert_eq!(back.b_omega, sol.b_omega);
        assert_eq!(back.alpha_tilde, sol.alpha_tilde);
        assert_eq!(back.model, sol.model);
        assert_eq!(back.config_hash, "abc");
        // the fixed point is a fixed point of the update
        let next = dmf_update(&sol, &mp, &opts(20_000)).unwrap();
        assert!(next.residual < 1e-5, "{}", next.residual);
        // loss decreases at the first step
        let (c, _) = sol.metric_curve(&mp, MetricKind::Loss, 20_000, &SeedKey::new(3));
        assert!(c[1] < c[0]);
    }

    /// The tangent recursion equals finite differences of whole paths in β̄
    /// (a shift of h̃(μ) on every path), and agrees with the Stein form
    /// Ā_θ⁻¹E[hωᵀ] within Monte-Carlo error.
    #[test]
    fn derivative_response_matches_path_differences_and_stein() {
        let md = model(-0.5, 0.5);
        let mp = maps(Activation::SoftRelu, 0.4, 0.2, 4);
        let sol = solve_dmf(&md, &mp, &opts(20_000)).unwrap();
        let h = matched_normals(200_000, 4, &SeedKey::new(9));
        let nf = h.nrows() as f64;
        let eps = 1e-5;
        for y in 0..2 {
            let label = md.labels[y];
            let beta: Vec<f64> = sol.beta.column(y).iter().cloned().collect();
            let base = sol.paths(&mp, y, &h);
            let resp = derivative_response(&base, &sol.b_omega, &mp, label);
            let stein = sol
                .a_theta
                .clone()
                .solve_upper_triangular(&(base.h.tr_mul(&base.omega) / nf))
                .unwrap();
            for mu in 0..4 {
                let shifted = |s: f64| {
                    let mut b = beta.clone();
                    b[mu] += s;
                    characteristic_paths(&sol.a_theta, &b, &sol.b_omega, &mp, label, &h)
                };
                let (up, dn) = (shifted(eps), shifted(-eps));
                for l in mu..4 {
                    let fd = (up.omega.column(l) - dn.omega.column(l)).sum() / (2.0 * eps * nf);
                    assert!((resp[(mu, l)] - fd).abs() < 1e-6, "{} {}", resp[(mu, l)], fd);
                    // Stein error grows like 1/Ā(l,l); this configuration is well conditioned
                    assert!(
                        (resp[(mu, l)] - stein[(mu, l)]).abs() < 0.02,
                        "y={y} mu={mu} l={l} {} {}",
                        resp[(mu, l)],
                        stein[(mu, l)]
                    );
                }
            }
        }
    }

    #[test]
    fn both_estimators_agree_on_linear_dynamics() {
        let md = model(-0.5, 0.7);
        let mp = maps(Activation::Linear, 0.2, 0.3, 5);
        let a = solve_dmf(&md, &mp, &DmfOptions { tol: 1e-12, ..opts(4000) }).unwrap();
        let b = solve_dmf(
            &md,
            &mp,
            &DmfOptions {
                tol: 1e-12,
                estimator: BEstimator::Correlation,
                ..opts(4000)
            },
        )
        .unwrap();
        assert!(max_abs_diff(&a.b_theta, &b.b_theta) < 1e-8);
    }

    #[test]
    fn shifted_response_matches_tangent_on_smooth_dynamics() {
        let md = model(-0.5, 0.5);
        let mp = maps(Activation::SoftRelu, 0.4, 0.2, 4);
        let sol = solve_dmf(&md, &mp, &opts(20_000)).unwrap();
        let h = matched_normals(20_000, 4, &SeedKey::new(4));
        for y in 0..2 {
            let beta: Vec<f64> = sol.beta.column(y).iter().cloned().collect();
            let pth = sol.paths(&mp, y, &h);
            let a = derivative_response(&pth, &sol.b_omega, &mp, md.labels[y]);
            let b = shifted_response(&pth, &beta, &sol.b_omega, &mp, md.labels[y]);
            assert!(max_abs_diff(&a, &b) < 1e-3, "{a} {b}");
        }
    }

    #[test]
    fn relu_dynamics_converge() {
        let md = model(-0.5, 0.5);
        let mp = maps(Activation::Relu, 0.2, 0.0, 5);
        let sol = solve_dmf(&md, &mp, &opts(20_000)).unwrap();
        assert!(sol.residual < 1e-6);
        sol.check_invariants().unwrap();
    }
}
