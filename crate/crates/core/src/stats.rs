//! Small numerical helpers shared by the estimators and the test harnesses.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` divisor. `None` when fewer than two values.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some(ss / (xs.len() - 1) as f64)
}

/// Empirical quantile, type 7 (linear interpolation between order statistics).
/// `sorted` must be ascending and nonempty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile of order `p` of the standard normal distribution.
pub fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Mean of a Monte Carlo sample together with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let se = sample_variance(xs)
            .map(|v| (v / xs.len() as f64).sqrt())
            .unwrap_or(0.0);
        Self {
            mean: mean(xs),
            se,
            count: xs.len(),
        }
    }
}

/// Anderson–Darling normality screen with mean and variance estimated from the
/// sample (Stephens' small-sample adjustment, D'Agostino–Stephens p-value).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormalityScreen {
    pub statistic: f64,
    pub adjusted: f64,
    pub p_value: f64,
}

pub fn anderson_darling_normal(xs: &[f64]) -> Result<NormalityScreen> {
    let n = xs.len();
    if n < 8 {
        return Err(Error::InsufficientReplicates { need: 8, have: n });
    }
    let m = mean(xs);
    let sd = sample_variance(xs).unwrap().sqrt();
    if sd <= 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate("zero spread in normality screen".into()));
    }
    let z = sorted(&xs.iter().map(|x| (x - m) / sd).collect::<Vec<_>>());
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        // log-CDF terms evaluated on both tails for accuracy
        let lo = normal_cdf(z[i]).max(f64::MIN_POSITIVE).ln();
        let hi = normal_cdf(-z[n - 1 - i]).max(f64::MIN_POSITIVE).ln();
        s += (2.0 * (i as f64) + 1.0) * (lo + hi);
    }
    let a2 = -nf - s / nf;
    let adjusted = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p_value = if adjusted >= 0.6 {
        (1.2937 - 5.709 * adjusted + 0.0186 * adjusted * adjusted).exp()
    } else if adjusted >= 0.34 {
        (0.9177 - 4.279 * adjusted - 1.38 * adjusted * adjusted).exp()
    } else if adjusted >= 0.2 {
        1.0 - (-8.318 + 42.796 * adjusted - 59.938 * adjusted * adjusted).exp()
    } else {
        1.0 - (-13.436 + 101.14 * adjusted - 223.73 * adjusted * adjusted).exp()
    };
    Ok(NormalityScreen {
        statistic: a2,
        adjusted,
        p_value: p_value.clamp(0.0, 1.0),
    })
}

/// Pearson chi-square goodness of fit. Returns `(statistic, p_value)`.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() {
        return Err(Error::SizeMismatch {
            expected: expected.len(),
            got: observed.len(),
        });
    }
    if observed.len() < 2 {
        return Err(Error::Degenerate("chi-square needs two or more cells".into()));
    }
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let df = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(df).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn type7_matches_hand_interpolation() {
        let xs = [-1.0, 0.0, 1.0];
        assert_abs_diff_eq!(quantile_type7(&xs, 1.0 / 3.0), -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_type7(&xs, 0.5), 0.0);
        assert_abs_diff_eq!(quantile_type7(&xs, 1.0), 1.0);
        assert_abs_diff_eq!(quantile_type7(&[4.0], 0.3), 4.0);
    }

    #[test]
    fn normal_quantile_table_values() {
        // 1.959963984540054 is the tabulated 0.975 quantile.
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.025), -1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.95), 1.6448536269514722, epsilon = 1e-8);
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn variance_needs_two_values() {
        assert!(sample_variance(&[1.0]).is_none());
        assert_abs_diff_eq!(sample_variance(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 2.5);
    }

    #[test]
    fn anderson_darling_flags_uniform_but_not_normal_quantiles() {
        let n = 2000;
        let normal: Vec<f64> = (0..n)
            .map(|i| normal_quantile((i as f64 + 0.5) / n as f64))
            .collect();
        assert!(anderson_darling_normal(&normal).unwrap().p_value > 0.5);
        let uniform: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(anderson_darling_normal(&uniform).unwrap().p_value < 1e-3);
    }

    #[test]
    fn chi_square_exact_fit() {
        let (stat, p) = chi_square_gof(&[10, 10, 10], &[10.0, 10.0, 10.0]).unwrap();
        assert_eq!(stat, 0.0);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }
}
