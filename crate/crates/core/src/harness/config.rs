//! Experiment configuration: flat TOML sections with `section.key=value` overrides.

use crate::dmf::{BEstimator, ClassModel, DmfOptions};
use crate::error::{Error, Result};
use crate::mixture::{Component, Covariance, MixtureSpec};
use crate::perceptron::{momentum_coeffs, Activation, Loss, MetricKind, Perceptron};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const METHODS: [&str; 5] = ["empirical", "dmf", "refined", "alternative", "perturbed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub methods: Vec<String>,
    pub replications: usize,
    pub seed: u64,
    pub metrics: Vec<String>,
    pub out: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "run".into(),
            methods: vec!["empirical".into(), "dmf".into()],
            replications: 100,
            seed: 1,
            metrics: vec!["loss".into(), "zero_one".into()],
            out: "out".into(),
        }
    }
}

/// Two classes with labels ∓1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    /// Overlap between the two class means.
    pub coupling: f64,
    /// Squared norm of each class mean.
    pub self_overlap: f64,
    pub theta0_norm: f64,
    /// Overlap of θ₀ with each class mean.
    pub theta0_overlap: f64,
    /// Frequency of the +1 class.
    pub frequency: f64,
    pub fixed_counts: bool,
}

impl Default for MixtureSection {
    fn default() -> Self {
        MixtureSection {
            coupling: -0.5,
            self_overlap: 1.0,
            theta0_norm: 0.1,
            theta0_overlap: 0.0,
            frequency: 0.5,
            fixed_counts: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub t: f64,
    pub s: f64,
    /// Number of iterates L (l = 0..L-1).
    pub steps: usize,
    pub activation: String,
    pub loss: String,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            t: 0.2,
            s: 0.0,
            steps: 21,
            activation: "soft_relu".into(),
            loss: "squared".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSection {
    pub m: usize,
    pub gamma: f64,
}

impl Default for SizeSection {
    fn default() -> Self {
        SizeSection {
            m: 1000,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub sigma: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmfSection {
    pub paths: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub se_cap: f64,
    pub estimator: String,
    /// Paths used to evaluate metric curves of the solution.
    pub metric_paths: usize,
}

impl Default for DmfSection {
    fn default() -> Self {
        let d = DmfOptions::default();
        DmfSection {
            paths: d.paths,
            damping: d.damping,
            tol: d.tol,
            max_iter: d.max_iter,
            se_cap: d.se_cap,
            estimator: "derivative".into(),
            metric_paths: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    /// "matched" (fluctuation-matched surrogate with z-extrapolation) or
    /// "iterative" (kernel iteration on one realization).
    pub scheme: String,
    pub rounds: usize,
    pub tol: f64,
    /// Second coupling of the z-extrapolation pair.
    pub z1: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            scheme: "matched".into(),
            rounds: 10,
            tol: 0.0,
            z1: 1.0,
        }
    }
}

/// Lists that replace the scalar keys of the same name; the experiment runs
/// their Cartesian product. Empty lists keep the scalar value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub coupling: Vec<f64>,
    pub m: Vec<usize>,
    pub gamma: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub mixture: MixtureSection,
    pub algorithm: AlgorithmSection,
    pub size: SizeSection,
    pub surrogate: SurrogateSection,
    pub dmf: DmfSection,
    pub refine: RefineSection,
    pub sweep: SweepSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Parse TOML text, then apply `section.key=value` overrides in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{path}` is not section.key")))?;
            let sec = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            let sec = sec
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?;
            sec.insert(key.to_string(), parse_value(raw.trim()));
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    /// Canonical serialization; the config hash is taken over these bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn n(&self) -> usize {
        (self.size.gamma * self.size.m as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        for m in &e.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown method `{m}`")));
            }
        }
        for k in &e.metrics {
            MetricKind::from_tag(k)?;
        }
        Activation::from_tag(&self.algorithm.activation)?;
        Loss::from_tag(&self.algorithm.loss)?;
        BEstimator::from_tag(&self.dmf.estimator)?;
        if !matches!(self.refine.scheme.as_str(), "matched" | "iterative") {
            return Err(Error::Config(format!("unknown refine scheme `{}`", self.refine.scheme)));
        }
        if self.algorithm.steps == 0 {
            return Err(Error::Config("algorithm.steps must be at least 1".into()));
        }
        if self.size.m == 0 {
            return Err(Error::Config("size.m must be at least 1".into()));
        }
        for p in self.points() {
            if p.n() == 0 {
                return Err(Error::Config(format!(
                    "n = round(gamma m) is 0 at m = {}, gamma = {}",
                    p.size.m, p.size.gamma
                )));
            }
        }
        let f = self.mixture.frequency;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config("mixture.frequency must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Scalar configs of the sweep, in the order coupling, m, gamma, s
    /// (last varies fastest). The sweep section of each point is empty.
    pub fn points(&self) -> Vec<ExperimentConfig> {
        let w = &self.sweep;
        let or = |v: &Vec<f64>, x: f64| if v.is_empty() { vec![x] } else { v.clone() };
        let ms = if w.m.is_empty() { vec![self.size.m] } else { w.m.clone() };
        let mut out = Vec::new();
        for &c in &or(&w.coupling, self.mixture.coupling) {
            for &m in &ms {
                for &g in &or(&w.gamma, self.size.gamma) {
                    for &s in &or(&w.s, self.algorithm.s) {
                        let mut p = self.clone();
                        p.sweep = SweepSection::default();
                        p.mixture.coupling = c;
                        p.size.m = m;
                        p.size.gamma = g;
                        p.algorithm.s = s;
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    pub fn metric_kinds(&self) -> Vec<MetricKind> {
        self.experiment
            .metrics
            .iter()
            .map(|k| MetricKind::from_tag(k).expect("validated"))
            .collect()
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        let x = &self.mixture;
        let g = DMatrix::from_row_slice(
            3,
            3,
            &[
                x.self_overlap,
                x.coupling,
                x.theta0_overlap,
                x.coupling,
                x.self_overlap,
                x.theta0_overlap,
                x.theta0_overlap,
                x.theta0_overlap,
                x.theta0_norm * x.theta0_norm,
            ],
        );
        let comp = |label, frequency| Component {
            label,
            frequency,
            covariance: Covariance::Identity,
        };
        MixtureSpec {
            components: vec![comp(-1.0, 1.0 - x.frequency), comp(1.0, x.frequency)],
            overlap_gram: g,
            ambient_dim: self.n(),
            fixed_counts: x.fixed_counts,
        }
    }

    /// Perceptron maps for a realization with initial iterate `theta0`.
    pub fn perceptron(&self, theta0: DVector<f64>) -> Result<Perceptron> {
        let a = &self.algorithm;
        Ok(Perceptron {
            activation: Activation::from_tag(&a.activation)?,
            loss: Loss::from_tag(&a.loss)?,
            coeffs: momentum_coeffs(a.t, a.s, a.steps)?,
            theta0,
        })
    }

    pub fn class_model(&self) -> Result<ClassModel> {
        ClassModel::from_spec(&self.mixture_spec(), self.n() as f64 / self.size.m as f64)
    }

    pub fn dmf_options(&self) -> Result<DmfOptions> {
        let d = &self.dmf;
        Ok(DmfOptions {
            damping: d.damping,
            tol: d.tol,
            max_iter: d.max_iter,
            paths: d.paths,
            seed: self.experiment.seed,
            se_cap: d.se_cap,
            estimator: BEstimator::from_tag(&d.estimator)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_overrides_apply() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back = ExperimentConfig::from_toml(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        let cfg = ExperimentConfig::from_toml_with(
            "[size]\nm = 50\n",
            &[
                "size.gamma=0.5".into(),
                "algorithm.activation=relu".into(),
                "sweep.coupling=[-0.5, 0.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.n(), 25);
        assert_eq!(cfg.algorithm.activation, "relu");
        assert_eq!(cfg.points().len(), 2);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml("[size]\nmm = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nmethods = [\"exact\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nreplications = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[size]\nm = 3\ngamma = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml_with("", &["nokey".into()]).is_err());
    }

    #[test]
    fn n_rounds_gamma_m() {
        let mut cfg = ExperimentConfig::default();
        cfg.size.m = 1000;
        cfg.size.gamma = 0.1;
        assert_eq!(cfg.n(), 100);
        cfg.size.gamma = 0.0126;
        assert_eq!(cfg.n(), 13);
    }
}
