//! With-replacement bootstrap of PSUs.
//!
//! A replicate draws multinomial counts `D` over the sampled PSUs of each
//! stratum (`m_l` uniform picks) and re-evaluates every estimand on the
//! reweighted totals `sum_l (N_l / m_l) sum_j D_j row_j`. Every estimand in a
//! call sees the same counts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{
    normal_ci, stratified_totals, ColumnLayout, DrawMatrix, Interval, SmoothEstimand, StratumSample,
};
use crate::rng::Stream;
use crate::stats::{quantile_type7, sample_variance, sorted};
use crate::{Error, Result};

fn default_replicates() -> usize {
    1000
}

fn default_alpha() -> f64 {
    0.025
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Draws per replicate; defaults to the number of sampled PSUs.
    /// Stratified resampling always uses `m_l = n_l`.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    /// Also compute within-replicate standard errors for Studentized intervals.
    #[serde(default)]
    pub studentized: bool,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            m: None,
            replicates: default_replicates(),
            alpha: default_alpha(),
            seed,
            studentized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 50 {
            return Err(Error::InsufficientReplicates {
                need: 50,
                have: self.replicates,
            });
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        if let Some(m) = self.m {
            if m < 2 {
                return Err(Error::InvalidConfig(format!("m must be at least 2, got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet {
    pub estimand: SmoothEstimand,
    /// `theta_hat` on the original sample.
    pub base: f64,
    pub theta_star: Vec<f64>,
    /// Linearization standard error within each replicate.
    pub se_star: Option<Vec<f64>>,
}

/// Bootstrap replicates for an unstratified sample: `rows` holds the per-draw
/// PSU estimates `Z_j` for every layout column and `population_size` is `N_I`.
pub fn resample_wr(
    rows: &DrawMatrix,
    population_size: usize,
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
    cfg: &BootstrapConfig,
) -> Result<Vec<ReplicateSet>> {
    let strata = [StratumSample {
        population_size,
        rows: rows.clone(),
    }];
    resample_impl(&strata, layout, estimands, cfg, cfg.m.unwrap_or(rows.n_rows()))
}

/// Stratified bootstrap: PSUs are resampled independently within strata,
/// `n_l` draws each.
pub fn resample_strata(
    strata: &[StratumSample],
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
    cfg: &BootstrapConfig,
) -> Result<Vec<ReplicateSet>> {
    if cfg.m.is_some() && strata.len() > 1 {
        return Err(Error::InvalidConfig(
            "m cannot be set for stratified resampling".into(),
        ));
    }
    let m = match strata {
        [only] => cfg.m.unwrap_or(only.rows.n_rows()),
        _ => 0,
    };
    resample_impl(strata, layout, estimands, cfg, m)
}

fn resample_impl(
    strata: &[StratumSample],
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
    cfg: &BootstrapConfig,
    single_m: usize,
) -> Result<Vec<ReplicateSet>> {
    cfg.validate()?;
    if strata.is_empty() {
        return Err(Error::EmptyFrame);
    }
    for s in strata {
        if s.rows.n_rows() < 2 {
            return Err(Error::Degenerate(format!(
                "bootstrap needs at least two sampled PSUs per stratum, got {}",
                s.rows.n_rows()
            )));
        }
        if s.rows.n_cols() != layout.columns.len() {
            return Err(Error::SizeMismatch {
                expected: layout.columns.len(),
                got: s.rows.n_cols(),
            });
        }
    }
    let draws: Vec<usize> = if strata.len() == 1 {
        vec![single_m]
    } else {
        strata.iter().map(|s| s.rows.n_rows()).collect()
    };
    if draws.iter().any(|&m| m < 2) {
        return Err(Error::InvalidConfig("m must be at least 2".into()));
    }

    let identity: Vec<usize> = (0..layout.columns.len()).collect();
    let full = stratified_totals(strata, &identity);
    let mut args = Vec::new();
    let bases = (0..estimands.len())
        .map(|e| {
            layout.gather(e, &full, &mut args);
            estimands[e].evaluate(&args)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_replicate: Vec<Vec<(f64, f64)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = Stream::substream(cfg.seed, "bootstrap", r as u64);
            replicate(strata, &draws, layout, estimands, cfg.studentized, &mut rng)
        })
        .collect::<Result<_>>()?;

    Ok(estimands
        .iter()
        .enumerate()
        .map(|(e, est)| ReplicateSet {
            estimand: *est,
            base: bases[e],
            theta_star: per_replicate.iter().map(|v| v[e].0).collect(),
            se_star: cfg
                .studentized
                .then(|| per_replicate.iter().map(|v| v[e].1).collect()),
        })
        .collect())
}

fn replicate(
    strata: &[StratumSample],
    draws: &[usize],
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
    studentized: bool,
    rng: &mut Stream,
) -> Result<Vec<(f64, f64)>> {
    let k = layout.columns.len();
    let counts: Vec<Vec<u32>> = strata
        .iter()
        .zip(draws)
        .map(|(s, &m)| {
            let n = s.rows.n_rows();
            let mut d = vec![0u32; n];
            for _ in 0..m {
                d[rng.random_range(0..n)] += 1;
            }
            d
        })
        .collect();
    let mut totals = vec![0.0; k];
    for ((s, d), &m) in strata.iter().zip(&counts).zip(draws) {
        let scale = s.population_size as f64 / m as f64;
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0 {
                continue;
            }
            let w = scale * f64::from(dj);
            for (t, v) in totals.iter_mut().zip(s.rows.row(j)) {
                *t += w * v;
            }
        }
    }
    let mut args = Vec::with_capacity(k);
    let mut grad = Vec::with_capacity(k);
    let mut out = Vec::with_capacity(estimands.len());
    for (e, est) in estimands.iter().enumerate() {
        layout.gather(e, &totals, &mut args);
        let theta = est.evaluate(&args)?;
        let se = if studentized {
            grad.clear();
            grad.resize(args.len(), 0.0);
            est.gradient_into(&args, &mut grad)?;
            let map = layout.map(e);
            let mut var = 0.0;
            for ((s, d), &m) in strata.iter().zip(&counts).zip(draws) {
                let lin = |j: usize| -> f64 {
                    let row = s.rows.row(j);
                    grad.iter().zip(map).map(|(g, &c)| g * row[c]).sum()
                };
                let mf = m as f64;
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for (j, &dj) in d.iter().enumerate() {
                    if dj > 0 {
                        let ej = lin(j);
                        sum += f64::from(dj) * ej;
                        sum_sq += f64::from(dj) * ej * ej;
                    }
                }
                let mean = sum / mf;
                let s2 = ((sum_sq - mf * mean * mean) / (mf - 1.0)).max(0.0);
                let big_n = s.population_size as f64;
                var += big_n * big_n * s2 / mf;
            }
            var.sqrt()
        } else {
            f64::NAN
        };
        out.push((theta, se));
    }
    Ok(out)
}

/// Replicate variance `(R - 1)^{-1} sum (theta*_r - mean)^2`.
pub fn bootstrap_variance(reps: &ReplicateSet) -> Result<f64> {
    sample_variance(&reps.theta_star).ok_or(Error::InsufficientReplicates {
        need: 2,
        have: reps.theta_star.len(),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 0.5), got {alpha}")));
    }
    Ok(())
}

/// `[Q_alpha, Q_{1-alpha}]` of the replicates, type-7 quantiles.
pub fn percentile_ci(reps: &ReplicateSet, alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    let need = (1.0 / alpha).ceil() as usize;
    if reps.theta_star.len() < need {
        return Err(Error::InsufficientReplicates {
            need,
            have: reps.theta_star.len(),
        });
    }
    let s = sorted(&reps.theta_star);
    Ok(Interval {
        lower: quantile_type7(&s, alpha),
        upper: quantile_type7(&s, 1.0 - alpha),
    })
}

/// `t*_r = (theta*_r - theta_hat) / se*_r`.
pub fn pivots(reps: &ReplicateSet) -> Result<Vec<f64>> {
    let se = reps
        .se_star
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("replicates carry no standard errors".into()))?;
    reps.theta_star
        .iter()
        .zip(se)
        .map(|(t, s)| {
            if *s > 0.0 {
                Ok((t - reps.base) / s)
            } else {
                Err(Error::Degenerate("zero within-replicate standard error".into()))
            }
        })
        .collect()
}

/// `[theta_hat - u*_{1-alpha} se, theta_hat - u*_alpha se]` with `u*` the
/// type-7 quantiles of the pivots.
pub fn studentized_ci(reps: &ReplicateSet, base_se: f64, alpha: f64) -> Result<Interval> {
    check_alpha(alpha)?;
    if !(base_se > 0.0) {
        return Err(Error::Degenerate(format!("base standard error {base_se}")));
    }
    let t = sorted(&pivots(reps)?);
    Ok(Interval {
        lower: reps.base - quantile_type7(&t, 1.0 - alpha) * base_se,
        upper: reps.base - quantile_type7(&t, alpha) * base_se,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiSet {
    pub normal: Interval,
    pub percentile: Interval,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub studentized: Option<Interval>,
}

/// The three intervals around `reps.base`; `base_variance` feeds the normal
/// and Studentized constructions.
pub fn ci_set(reps: &ReplicateSet, base_variance: f64, alpha: f64) -> Result<CiSet> {
    Ok(CiSet {
        normal: normal_ci(reps.base, base_variance, alpha)?,
        percentile: percentile_ci(reps, alpha)?,
        studentized: match reps.se_star {
            Some(_) => Some(studentized_ci(reps, base_variance.sqrt(), alpha)?),
            None => None,
        },
    })
}
