//! Block trajectories and the original query/response recursion.

use crate::error::{Error, Result};
use crate::mixture::Dataset;
use nalgebra::DMatrix;
use std::io::Write;

/// Causal maps producing the queries θ(l) and ω(l).
///
/// `theta` sees `q[..l]`, `p[..l]`; `omega` sees `p[..=l]`, `q[..l]`.
/// The engines pass truncated slices, so a map cannot look ahead.
pub trait DynamicsMaps: Sync {
    /// Block width J.
    fn width(&self) -> usize;

    fn theta(&self, l: usize, q: &[DMatrix<f64>], p: &[DMatrix<f64>], labels: &[f64])
        -> DMatrix<f64>;

    fn omega(&self, l: usize, p: &[DMatrix<f64>], q: &[DMatrix<f64>], labels: &[f64])
        -> DMatrix<f64>;

    /// Lipschitz constant of the maps, used only to size test tolerances.
    fn lipschitz(&self) -> f64 {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessTag {
    Original,
    Perturbed,
    Alternative,
    DmfSurrogate,
    Refined,
}

impl ProcessTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProcessTag::Original => "original",
            ProcessTag::Perturbed => "perturbed",
            ProcessTag::Alternative => "alternative",
            ProcessTag::DmfSurrogate => "dmf-surrogate",
            ProcessTag::Refined => "refined",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryMeta {
    pub m: usize,
    pub n: usize,
    pub j: usize,
    pub steps: usize,
    pub seed: Option<String>,
    pub tag: ProcessTag,
}

/// ξ = (q, p) with the induced (θ, ω).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub q: Vec<DMatrix<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub theta: Vec<DMatrix<f64>>,
    pub omega: Vec<DMatrix<f64>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn empty(m: usize, n: usize, j: usize, tag: ProcessTag) -> Self {
        Trajectory {
            q: Vec::new(),
            p: Vec::new(),
            theta: Vec::new(),
            omega: Vec::new(),
            meta: TrajectoryMeta {
                m,
                n,
                j,
                steps: 0,
                seed: None,
                tag,
            },
        }
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    /// Θ as n×LJ.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        crate::linalg::hstack(&self.theta)
    }

    /// Ω as m×LJ.
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        crate::linalg::hstack(&self.omega)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let TrajectoryMeta { m, n, j, .. } = self.meta;
        let l = self.q.len();
        if self.p.len() != l || self.theta.len() != l || self.omega.len() != l {
            return Err(Error::Shape("history lengths differ".into()));
        }
        for k in 0..l {
            if self.q[k].shape() != (n, j)
                || self.theta[k].shape() != (n, j)
                || self.p[k].shape() != (m, j)
                || self.omega[k].shape() != (m, j)
            {
                return Err(Error::Shape(format!("block shape mismatch at step {k}")));
            }
        }
        Ok(())
    }

    /// Columnar dump: `block,l,row,col,value`.
    pub fn write_columnar<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "block,l,row,col,value")?;
        let sets: [(&str, &Vec<DMatrix<f64>>); 4] = [
            ("q", &self.q),
            ("p", &self.p),
            ("theta", &self.theta),
            ("omega", &self.omega),
        ];
        for (name, blocks) in sets {
            for (l, b) in blocks.iter().enumerate() {
                for r in 0..b.nrows() {
                    for c in 0..b.ncols() {
                        writeln!(w, "{name},{l},{r},{c},{:e}", b[(r, c)])?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>, step: usize, block: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue { step, block })
    }
}

/// Run θ(l) → p(l) = Xᵀθ(l) → ω(l) → q(l) = Xω(l)/m for l < L.
pub fn run_original<M: DynamicsMaps + ?Sized>(
    data: &Dataset,
    maps: &M,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidRange {
            name: "L",
            value: 0.0,
        });
    }
    let (m, n, j) = (data.m(), data.n(), maps.width());
    let labels = data.labels();
    let mut tr = Trajectory::empty(m, n, j, ProcessTag::Original);
    for l in 0..steps {
        let theta = maps.theta(l, &tr.q, &tr.p, labels);
        check_finite(&theta, l, "theta")?;
        let p = data.x.tr_mul(&theta);
        check_finite(&p, l, "p")?;
        tr.p.push(p);
        let omega = maps.omega(l, &tr.p, &tr.q, labels);
        check_finite(&omega, l, "omega")?;
        let q = (&data.x * &omega) / m as f64;
        check_finite(&q, l, "q")?;
        tr.theta.push(theta);
        tr.omega.push(omega);
        tr.q.push(q);
    }
    tr.meta.steps = steps;
    Ok(tr)
}

/// max over l of ‖q(l) − Xω(l)/m‖ and ‖p(l) − Xᵀθ(l)‖/√m (Frobenius for J > 1).
pub fn residual_norm(tr: &Trajectory, data: &Dataset) -> f64 {
    let m = data.m() as f64;
    let mut r: f64 = 0.0;
    for l in 0..tr.steps() {
        let dq = &tr.q[l] - (&data.x * &tr.omega[l]) / m;
        let dp = &tr.p[l] - data.x.tr_mul(&tr.theta[l]);
        r = r.max(dq.norm()).max(dp.norm() / m.sqrt());
    }
    r
}
