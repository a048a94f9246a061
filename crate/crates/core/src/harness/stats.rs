//! Replication statistics and two-sample comparisons.

use serde::Serialize;

/// Mean, unbiased variance and standard error of replicated values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Summary {
    /// Two-pass estimate in slice order. A single value has variance 0.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                variance: f64::NAN,
                stderr: f64::NAN,
                count: 0,
            };
        }
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let variance = if n > 1 {
            values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Summary {
            mean,
            variance,
            stderr: (variance / nf).sqrt(),
            count: n,
        }
    }

    /// A point estimate with a known standard error from `count` samples.
    pub fn from_estimate(mean: f64, stderr: f64, count: usize) -> Summary {
        Summary {
            mean,
            variance: stderr * stderr * count as f64,
            stderr,
            count,
        }
    }
}

/// Standardized difference (a − b)/√(se_a² + se_b²). Equal values with zero
/// error give 0.
pub fn standardized_difference(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    let d = a - b;
    let se = (se_a * se_a + se_b * se_b).sqrt();
    if d == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        d / se
    }
}

/// Two-sided tail P(|Z| > k) of a standard normal.
pub fn normal_two_sided_tail(k: f64) -> f64 {
    libm::erfc(k / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn welford(xs: &[f64]) -> (f64, f64) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &x in xs {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        (mean, m2 / (n - 1.0))
    }

    proptest! {
        #[test]
        fn matches_single_pass_reference(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let s = Summary::of(&xs);
            let (mean, var) = welford(&xs);
            prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            prop_assert!((s.variance - var).abs() <= 1e-12 * (1.0 + var.abs()));
            prop_assert!((s.stderr - (var / xs.len() as f64).sqrt()).abs() <= 1e-12 * (1.0 + s.stderr));
        }
    }

    #[test]
    fn single_replication_has_zero_variance() {
        let s = Summary::of(&[0.25]);
        assert_eq!((s.mean, s.variance, s.stderr, s.count), (0.25, 0.0, 0.0, 1));
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_two_sided_tail(1.959964) - 0.05).abs() < 1e-6);
        assert!((normal_two_sided_tail(4.0) - 6.334248e-5).abs() < 1e-10);
        assert_eq!(standardized_difference(1.0, 0.0, 1.0, 0.0), 0.0);
        assert!((standardized_difference(1.0, 0.3, 0.0, 0.4) - 2.0).abs() < 1e-15);
    }
}
