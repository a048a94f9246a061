//! Gaussian-mixture data model.

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::rng::{normal_matrix, SeedKey};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Covariance descriptor R(ζ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    /// c·I, c ≥ 0.
    Isotropic { scale: f64 },
    /// Full n×n symmetric PSD matrix, stored row-major.
    Dense { rows: Vec<Vec<f64>> },
}

impl Covariance {
    pub fn is_identity(&self) -> bool {
        matches!(self, Covariance::Identity)
    }

    fn dense(&self) -> Option<DMatrix<f64>> {
        match self {
            Covariance::Dense { rows } => {
                let n = rows.len();
                Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            _ => None,
        }
    }

    /// R·M
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Covariance::Identity => m.clone(),
            Covariance::Isotropic { scale } => m * *scale,
            Covariance::Dense { .. } => self.dense().unwrap() * m,
        }
    }

    /// R^{1/2}·M with the symmetric square root.
    pub fn apply_sqrt(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Covariance::Identity => m.clone(),
            Covariance::Isotropic { scale } => m * scale.sqrt(),
            Covariance::Dense { .. } => crate::linalg::sym_sqrt(&self.dense().unwrap()) * m,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Covariance::Identity => Ok(()),
            Covariance::Isotropic { scale } if *scale >= 0.0 => Ok(()),
            Covariance::Isotropic { scale } => Err(Error::InvalidRange {
                name: "covariance scale",
                value: *scale,
            }),
            Covariance::Dense { rows } => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Shape(format!("dense covariance must be {n}x{n}")));
                }
                let d = self.dense().unwrap();
                if crate::linalg::max_abs_diff(&d, &d.transpose()) > 1e-12 {
                    return Err(Error::Config("dense covariance is not symmetric".into()));
                }
                let lmin = min_eigenvalue(&d);
                if lmin < -1e-10 {
                    return Err(Error::GramNotPsd {
                        min_eigenvalue: lmin,
                    });
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: f64,
    pub frequency: f64,
    pub covariance: Covariance,
}

/// Mixture definition. `overlap_gram` is indexed by components in order,
/// optionally followed by the initialization row `*`. Without that row θ₀ = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    pub overlap_gram: DMatrix<f64>,
    pub ambient_dim: usize,
    /// Assign exactly round(ρ m) samples per component instead of multinomial draws.
    pub fixed_counts: bool,
}

impl MixtureSpec {
    /// Two classes with labels ∓1, equal frequencies, identity covariance,
    /// unit self-overlap, the given class coupling and ‖θ₀‖ orthogonal to both means.
    pub fn two_class(n: usize, coupling: f64, theta0_norm: f64) -> Self {
        let g = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0,
                coupling,
                0.0,
                coupling,
                1.0,
                0.0,
                0.0,
                0.0,
                theta0_norm * theta0_norm,
            ],
        );
        let comp = |label| Component {
            label,
            frequency: 0.5,
            covariance: Covariance::Identity,
        };
        MixtureSpec {
            components: vec![comp(-1.0), comp(1.0)],
            overlap_gram: g,
            ambient_dim: n,
            fixed_counts: false,
        }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn has_init_row(&self) -> bool {
        self.overlap_gram.nrows() == self.components.len() + 1
    }

    /// ν(a, b) over 𝒴* with `*` at index `n_components()`; zero when θ₀ is absent.
    pub fn nu(&self, a: usize, b: usize) -> f64 {
        let d = self.n_components();
        if !self.has_init_row() && (a == d || b == d) {
            0.0
        } else {
            self.overlap_gram[(a, b)]
        }
    }

    pub fn all_identity(&self) -> bool {
        self.components.iter().all(|c| c.covariance.is_identity())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.components.len();
        if d == 0 {
            return Err(Error::Config("mixture has no components".into()));
        }
        let g = &self.overlap_gram;
        if g.nrows() != g.ncols() || (g.nrows() != d && g.nrows() != d + 1) {
            return Err(Error::Shape(format!(
                "overlap Gram must be {d}x{d} or {}x{}",
                d + 1,
                d + 1
            )));
        }
        if crate::linalg::max_abs_diff(g, &g.transpose()) > 1e-12 {
            return Err(Error::Config("overlap Gram is not symmetric".into()));
        }
        for c in &self.components {
            if !(c.frequency > 0.0 && c.frequency <= 1.0) {
                return Err(Error::InvalidRange {
                    name: "frequency",
                    value: c.frequency,
                });
            }
            c.covariance.validate(self.ambient_dim)?;
        }
        let total: f64 = self.components.iter().map(|c| c.frequency).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidRange {
                name: "sum of frequencies",
                value: total,
            });
        }
        if self.ambient_dim == 0 {
            return Err(Error::InvalidRange {
                name: "ambient_dim",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Realized class means and initialization.
#[derive(Clone, Debug)]
pub struct Means {
    pub means: Vec<DVector<f64>>,
    pub theta0: DVector<f64>,
}

impl Means {
    /// x̂(a) over 𝒴*, with `*` last.
    pub fn vector(&self, a: usize) -> &DVector<f64> {
        if a < self.means.len() {
            &self.means[a]
        } else {
            &self.theta0
        }
    }
}

/// Vectors with the prescribed Gram: an eigen-factor of ν applied to a
/// seeded orthonormal frame. Handles rank-deficient ν.
pub fn realize_means(spec: &MixtureSpec, seed: u64) -> Result<Means> {
    realize_means_with(spec, &SeedKey::new(seed).child("means"))
}

pub fn realize_means_with(spec: &MixtureSpec, key: &SeedKey) -> Result<Means> {
    spec.validate()?;
    let d = spec.n_components();
    let k = d + 1;
    let nu = DMatrix::from_fn(k, k, |a, b| spec.nu(a, b));
    let eig = symmetrize(&nu).symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if lmin < -1e-10 {
        return Err(Error::GramNotPsd {
            min_eigenvalue: lmin,
        });
    }
    let lmax = eig.eigenvalues.max().max(1.0);
    let keep: Vec<usize> = (0..k)
        .filter(|&i| eig.eigenvalues[i] > 1e-13 * lmax)
        .collect();
    let rank = keep.len();
    let n = spec.ambient_dim;
    if n < rank {
        return Err(Error::DimensionTooSmall { n, rank });
    }
    // coordinates: row a of F is x̂(a) in the frame basis
    let f = DMatrix::from_fn(k, rank, |a, r| {
        let i = keep[r];
        eig.eigenvectors[(a, i)] * eig.eigenvalues[i].sqrt()
    });
    let mut rng = key.rng();
    let frame = if rank > 0 {
        normal_matrix(&mut rng, n, rank).qr().q()
    } else {
        DMatrix::zeros(n, 0)
    };
    let vecs: Vec<DVector<f64>> = (0..k)
        .map(|a| {
            if rank == 0 {
                DVector::zeros(n)
            } else {
                &frame * f.row(a).transpose()
            }
        })
        .collect();
    let theta0 = vecs[d].clone();
    Ok(Means {
        means: vecs[..d].to_vec(),
        theta0,
    })
}

/// Everything about a sample except the noise: means, latents, labels.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub spec: MixtureSpec,
    pub means: Means,
    pub latents: Vec<usize>,
    pub labels: Vec<f64>,
    rows: Vec<Vec<usize>>,
}

impl Geometry {
    pub fn new(spec: MixtureSpec, means: Means, latents: Vec<usize>) -> Self {
        let labels = latents.iter().map(|&z| spec.components[z].label).collect();
        let mut rows = vec![Vec::new(); spec.n_components()];
        for (i, &z) in latents.iter().enumerate() {
            rows[z].push(i);
        }
        Geometry {
            spec,
            means,
            latents,
            labels,
            rows,
        }
    }

    pub fn m(&self) -> usize {
        self.latents.len()
    }

    pub fn n(&self) -> usize {
        self.spec.ambient_dim
    }

    /// Sample indices belonging to component ζ, in sample order.
    pub fn rows_of(&self, zeta: usize) -> &[usize] {
        &self.rows[zeta]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.len()).collect()
    }

    /// Mean matrix X̂ (n×m).
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.m());
        for (i, &z) in self.latents.iter().enumerate() {
            out.set_column(i, &self.means.means[z]);
        }
        out
    }

    /// Fresh centered part R^{1/2}·N(0,1), one column per sample.
    pub fn sample_noise(&self, key: &SeedKey) -> DMatrix<f64> {
        let mut rng = key.rng();
        let g = normal_matrix(&mut rng, self.n(), self.m());
        if self.spec.all_identity() {
            return g;
        }
        let mut out = DMatrix::zeros(self.n(), self.m());
        for zeta in 0..self.spec.n_components() {
            let rows = self.rows_of(zeta);
            if rows.is_empty() {
                continue;
            }
            let sub = DMatrix::from_fn(self.n(), rows.len(), |a, b| g[(a, rows[b])]);
            let s = self.spec.components[zeta].covariance.apply_sqrt(&sub);
            for (b, &i) in rows.iter().enumerate() {
                out.set_column(i, &s.column(b));
            }
        }
        out
    }
}

/// Draw latents: multinomial, or fixed counts with largest-remainder rounding.
pub fn sample_latents(spec: &MixtureSpec, m: usize, key: &SeedKey) -> Vec<usize> {
    let d = spec.n_components();
    if spec.fixed_counts {
        let raw: Vec<f64> = spec.components.iter().map(|c| c.frequency * m as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let mut rest = m - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &z in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[z] += 1;
            rest -= 1;
        }
        let mut out = Vec::with_capacity(m);
        for (z, &c) in counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(z, c));
        }
        return out;
    }
    let mut rng = key.rng();
    let cum: Vec<f64> = spec
        .components
        .iter()
        .scan(0.0, |s, c| {
            *s += c.frequency;
            Some(*s)
        })
        .collect();
    (0..m)
        .map(|_| {
            let u: f64 = rng.random();
            cum.iter().position(|&c| u < c).unwrap_or(d - 1)
        })
        .collect()
}

/// A sampled labeled dataset; `x` is n×m with one sample per column.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub geom: Geometry,
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.geom.m()
    }
    pub fn n(&self) -> usize {
        self.geom.n()
    }
    pub fn labels(&self) -> &[f64] {
        &self.geom.labels
    }
}

pub fn sample_dataset(spec: &MixtureSpec, m: usize, seed: u64) -> Result<Dataset> {
    sample_dataset_with(spec, m, &SeedKey::new(seed))
}

pub fn sample_geometry(spec: &MixtureSpec, m: usize, key: &SeedKey) -> Result<Geometry> {
    if m == 0 {
        return Err(Error::InvalidRange {
            name: "m",
            value: 0.0,
        });
    }
    let means = realize_means_with(spec, &key.child("means"))?;
    let latents = sample_latents(spec, m, &key.child("latents"));
    Ok(Geometry::new(spec.clone(), means, latents))
}

/// Sample under a stream key; means, latents and noise use separate child streams.
pub fn sample_dataset_with(spec: &MixtureSpec, m: usize, key: &SeedKey) -> Result<Dataset> {
    let geom = sample_geometry(spec, m, key)?;
    let mut x = geom.sample_noise(&key.child("noise"));
    for (i, &z) in geom.latents.iter().enumerate() {
        let mut col = x.column_mut(i);
        col += &geom.means.means[z];
    }
    Ok(Dataset { geom, x })
}
