//! Single-layer perceptron trained by a linear first-order method.

use crate::error::{Error, Result};
use crate::trajectory::DynamicsMaps;
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PairFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Activation {
    /// log(1 + eᵖ)
    SoftRelu,
    /// max(0, p), with σ′(0) = 0
    Relu,
    Linear,
    Custom {
        name: String,
        value: ScalarFn,
        derivative: ScalarFn,
    },
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Activation {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "soft_relu" => Ok(Activation::SoftRelu),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            Activation::SoftRelu => "soft_relu",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Custom { name, .. } => name,
        }
    }

    #[inline]
    pub fn value(&self, p: f64) -> f64 {
        match self {
            Activation::SoftRelu => {
                if p > 0.0 {
                    p + (-p).exp().ln_1p()
                } else {
                    p.exp().ln_1p()
                }
            }
            Activation::Relu => p.max(0.0),
            Activation::Linear => p,
            Activation::Custom { value, .. } => value(p),
        }
    }

    #[inline]
    pub fn derivative(&self, p: f64) -> f64 {
        match self {
            Activation::SoftRelu => logistic(p),
            Activation::Relu => {
                if p > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Custom { derivative, .. } => derivative(p),
        }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone)]
pub enum Loss {
    /// (f − y)²/2
    Squared,
    /// log(1 + e^{−yf}), labels ±1
    Logistic,
    Custom {
        name: String,
        value: PairFn,
        d_df: PairFn,
    },
}

impl fmt::Debug for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Loss {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "squared" => Ok(Loss::Squared),
            "logistic" => Ok(Loss::Logistic),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            Loss::Squared => "squared",
            Loss::Logistic => "logistic",
            Loss::Custom { name, .. } => name,
        }
    }

    #[inline]
    pub fn value(&self, f: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (f - y) * (f - y),
            Loss::Logistic => {
                let a = -y * f;
                if a > 0.0 {
                    a + (-a).exp().ln_1p()
                } else {
                    a.exp().ln_1p()
                }
            }
            Loss::Custom { value, .. } => value(f, y),
        }
    }

    #[inline]
    pub fn d_df(&self, f: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => f - y,
            Loss::Logistic => -y * logistic(-y * f),
            Loss::Custom { d_df, .. } => d_df(f, y),
        }
    }
}

/// λ(l) and the strictly upper-triangular Λ(μ, l) with 𝚯 = θ₀λᵀ − 𝐐Λ.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgoCoeffs {
    pub lambda: DVector<f64>,
    pub big_lambda: DMatrix<f64>,
}

impl AlgoCoeffs {
    pub fn steps(&self) -> usize {
        self.lambda.len()
    }
}

/// Momentum GD: λ(l) = 1, Λ(μ, l) = t(1 − s^{l−μ}) for μ < l.
pub fn momentum_coeffs(t: f64, s: f64, steps: usize) -> Result<AlgoCoeffs> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidRange {
            name: "s",
            value: s,
        });
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidRange {
            name: "t",
            value: t,
        });
    }
    let big_lambda = DMatrix::from_fn(steps, steps, |mu, l| {
        if mu < l {
            t * (1.0 - s.powi((l - mu) as i32))
        } else {
            0.0
        }
    });
    Ok(AlgoCoeffs {
        lambda: DVector::from_element(steps, 1.0),
        big_lambda,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Loss,
    /// Fraction of samples with sign(p_i) ≠ y_i (ties count as errors).
    ZeroOne,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Loss => "loss",
            MetricKind::ZeroOne => "zero_one",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "loss" => Ok(MetricKind::Loss),
            "zero_one" => Ok(MetricKind::ZeroOne),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Activation, loss and coefficients packaged as dynamics maps (J = 1).
#[derive(Clone, Debug)]
pub struct Perceptron {
    pub activation: Activation,
    pub loss: Loss,
    pub coeffs: AlgoCoeffs,
    pub theta0: DVector<f64>,
}

impl Perceptron {
    /// ω(p, y) = ℓ′(σ(p), y)·σ′(p)
    #[inline]
    pub fn omega_scalar(&self, p: f64, y: f64) -> f64 {
        self.loss.d_df(self.activation.value(p), y) * self.activation.derivative(p)
    }

    #[inline]
    pub fn metric_scalar(&self, kind: MetricKind, p: f64, y: f64) -> f64 {
        match kind {
            MetricKind::Loss => self.loss.value(self.activation.value(p), y),
            MetricKind::ZeroOne => {
                if p * y > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn omega_map(&self, p: &DVector<f64>, y: &[f64]) -> DVector<f64> {
        DVector::from_fn(p.len(), |i, _| self.omega_scalar(p[i], y[i]))
    }

    /// θ(l) = θ₀λ(l) − Σ_{μ<l} q(μ)Λ(μ, l)
    pub fn theta_at(&self, l: usize, q: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut th = DMatrix::from_column_slice(self.theta0.len(), 1, self.theta0.as_slice())
            * self.coeffs.lambda[l];
        for (mu, qm) in q.iter().enumerate().take(l) {
            let c = self.coeffs.big_lambda[(mu, l)];
            if c != 0.0 {
                th -= qm * c;
            }
        }
        th
    }

    /// Metric per step computed from the p blocks.
    pub fn metric_curve(&self, p: &[DMatrix<f64>], labels: &[f64], kind: MetricKind) -> Vec<f64> {
        p.iter()
            .map(|b| {
                let m = b.nrows() as f64;
                b.column(0)
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &yi)| self.metric_scalar(kind, pi, yi))
                    .sum::<f64>()
                    / m
            })
            .collect()
    }
}

impl DynamicsMaps for Perceptron {
    fn width(&self) -> usize {
        1
    }

    fn theta(&self, l: usize, q: &[DMatrix<f64>], _p: &[DMatrix<f64>], _y: &[f64]) -> DMatrix<f64> {
        self.theta_at(l, q)
    }

    fn omega(&self, l: usize, p: &[DMatrix<f64>], _q: &[DMatrix<f64>], y: &[f64]) -> DMatrix<f64> {
        let pl = &p[l];
        DMatrix::from_fn(pl.nrows(), 1, |i, _| self.omega_scalar(pl[(i, 0)], y[i]))
    }
}

/// Training metric of a trajectory run with perceptron maps.
pub fn training_metric(
    traj: &crate::trajectory::Trajectory,
    labels: &[f64],
    maps: &Perceptron,
    kind: MetricKind,
) -> Vec<f64> {
    maps.metric_curve(&traj.p, labels, kind)
}
