//! Repeated two-stage sampling from a fixed frame: relative bias, relative
//! stability and tail error rates of variance estimators and intervals.
//!
//! Replicate `b` of a scenario draws everything from the substream
//! `(seed, "mc", b)` and the true-variance run `c` from `(seed, "truth", c)`,
//! so reports do not depend on the number of threads.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    bootstrap_variance, percentile_ci, pivots, resample_strata, studentized_ci, BootstrapConfig,
};
use crate::coupling::{verify_decay, DecayTable};
use crate::designs::{draw_second_stage, draw_stratified_si, si_indices, SecondStage};
use crate::estimators::{
    estimate_psu, expand_into, linearized_values_mapped, normal_ci, population_value,
    stratified_totals, ColumnLayout, DrawMatrix, Interval, SmoothEstimand, StratumSample,
    VarianceMethod,
};
use crate::frame::{generate_population, Column, Frame, SyntheticConfig};
use crate::rng::Stream;
use crate::stats::{anderson_darling_normal, MeanSe, NormalityScreen};
use crate::{Error, Result};

fn default_alpha() -> f64 {
    0.025
}

fn default_truth_runs() -> usize {
    20_000
}

fn default_boot_replicates() -> usize {
    1000
}

/// First-stage design of a scenario. Stratified allocations follow the
/// frame's stratum order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FirstStage {
    Si { n: usize },
    StratifiedSi { allocation: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapPlan {
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_boot_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub studentized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub label: String,
    pub first_stage: FirstStage,
    pub second_stage: SecondStage,
    pub estimands: Vec<SmoothEstimand>,
    #[serde(default)]
    pub variance_methods: Vec<VarianceMethod>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapPlan>,
    /// `B`.
    pub replicates: usize,
    /// `C`.
    #[serde(default = "default_truth_runs")]
    pub true_variance_runs: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self, frame: &Frame) -> Result<()> {
        if self.replicates < 100 {
            return Err(Error::InsufficientReplicates {
                need: 100,
                have: self.replicates,
            });
        }
        check_first_stage(frame, &self.first_stage)?;
        if self.estimands.is_empty() {
            return Err(Error::InvalidConfig("no estimands".into()));
        }
        if let Some(e) = self.estimands.iter().find(|e| e.max_var() >= frame.n_vars()) {
            return Err(Error::InvalidConfig(format!(
                "{} refers to a variable the frame does not have",
                e.label()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 0.5)", self.alpha)));
        }
        check_methods(&self.first_stage, self.second_stage, &self.estimands, &self.variance_methods)?;
        let si = matches!(self.first_stage, FirstStage::Si { .. });
        if let Some(b) = &self.bootstrap {
            if b.m.is_some() && !si {
                return Err(Error::InvalidConfig("m cannot be set for stratified resampling".into()));
            }
            self.bootstrap_config(b, 0).validate()?;
        }
        Ok(())
    }

    fn bootstrap_config(&self, plan: &BootstrapPlan, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            m: plan.m,
            replicates: plan.replicates,
            alpha: self.alpha,
            seed,
            studentized: plan.studentized,
        }
    }
}

/// Rejects variance methods that do not apply to the design or estimands.
pub fn check_methods(
    first: &FirstStage,
    stage: SecondStage,
    estimands: &[SmoothEstimand],
    methods: &[VarianceMethod],
) -> Result<()> {
    let si = matches!(first, FirstStage::Si { .. });
    for &m in methods {
        let reject = |reason: &str| {
            Err(Error::IncompatibleMethod {
                method: m.label().into(),
                reason: reason.into(),
            })
        };
        match m {
            VarianceMethod::StratWr => {}
            VarianceMethod::Simplified | VarianceMethod::WithReplacement if si => {}
            VarianceMethod::Unbiased if si => {
                if matches!(stage, SecondStage::Systematic { .. }) {
                    return reject("systematic second stage has no unbiased variance estimator");
                }
                if estimands.iter().any(|e| !matches!(e, SmoothEstimand::Total { .. })) {
                    return reject("only available for totals");
                }
            }
            VarianceMethod::Bernoulli => return reject("PSUs are sampled without replacement here"),
            _ => return reject("needs an unstratified SI first stage"),
        }
    }
    Ok(())
}

pub fn check_first_stage(frame: &Frame, first: &FirstStage) -> Result<()> {
    match first {
        FirstStage::Si { n } => {
            if *n < 2 || *n > frame.n_psu() {
                return Err(Error::InvalidConfig(format!(
                    "sample size {n} must lie in [2, N_I = {}]",
                    frame.n_psu()
                )));
            }
        }
        FirstStage::StratifiedSi { allocation } => {
            let strata = frame
                .strata()
                .ok_or_else(|| Error::InvalidConfig("frame has no strata".into()))?;
            if allocation.len() != strata.len() {
                return Err(Error::SizeMismatch {
                    expected: strata.len(),
                    got: allocation.len(),
                });
            }
            for (s, &n) in strata.iter().zip(allocation) {
                if n < 2 || n > s.members.len() {
                    return Err(Error::InvalidConfig(format!(
                        "stratum {}: allocation {n} must lie in [2, {}]",
                        s.label,
                        s.members.len()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One two-stage sample: per-stratum rows of per-PSU estimates for every
/// layout column (a single stratum of size `N_I` under SI) and, if
/// requested, the matching `V_hat_i` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageSample {
    /// Frame indices of the sampled PSUs, per stratum, in draw order.
    pub psus: Vec<Vec<usize>>,
    pub strata: Vec<StratumSample>,
    pub v_hat: Option<Vec<DrawMatrix>>,
}

pub fn draw_two_stage<R: Rng + ?Sized>(
    frame: &Frame,
    first: &FirstStage,
    stage: SecondStage,
    columns: &[Column],
    with_v_hat: bool,
    rng: &mut R,
) -> Result<TwoStageSample> {
    let groups: Vec<(usize, Vec<usize>)> = match first {
        FirstStage::Si { n } => vec![(frame.n_psu(), si_indices(frame.n_psu(), *n, rng))],
        FirstStage::StratifiedSi { allocation } => draw_stratified_si(frame, allocation, rng)?
            .into_iter()
            .map(|d| (d.population_size, d.order))
            .collect(),
    };
    let mut strata = Vec::with_capacity(groups.len());
    let mut v_hat = with_v_hat.then(|| Vec::with_capacity(groups.len()));
    for (population_size, order) in &groups {
        let mut rows = DrawMatrix::with_capacity(columns.len(), order.len());
        let mut vh = DrawMatrix::with_capacity(columns.len(), order.len());
        for &i in order {
            let psu = frame.psu(i);
            let draw = draw_second_stage(i, psu.size(), stage, rng)?;
            if with_v_hat {
                let est = estimate_psu(psu, &draw, columns);
                let v = est.v_hat.ok_or_else(|| {
                    Error::MissingVarianceEstimates(format!("{} second stage", stage.tag()))
                })?;
                rows.push_row(&est.y_hat)?;
                vh.push_row(&v)?;
            } else {
                expand_into(psu, &draw.ssu_indices, columns, rows.push_zero_row());
            }
        }
        strata.push(StratumSample {
            population_size: *population_size,
            rows,
        });
        if let Some(v) = v_hat.as_mut() {
            v.push(vh);
        }
    }
    Ok(TwoStageSample {
        psus: groups.into_iter().map(|(_, o)| o).collect(),
        strata,
        v_hat,
    })
}

fn point_estimates(
    strata: &[StratumSample],
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
) -> Result<Vec<f64>> {
    let identity: Vec<usize> = (0..layout.columns.len()).collect();
    let totals = stratified_totals(strata, &identity);
    let mut args = Vec::new();
    (0..estimands.len())
        .map(|e| {
            layout.gather(e, &totals, &mut args);
            estimands[e].evaluate(&args)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub method: VarianceMethod,
    pub variance: f64,
    pub normal: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEstimate {
    pub estimand: SmoothEstimand,
    pub label: String,
    pub estimate: f64,
    /// `v_STWR`; under unstratified SI this is `v_WR`.
    pub v_stwr: f64,
    pub variances: Vec<VarianceRow>,
}

/// Point estimates, the requested variance estimates and their normal
/// intervals for one sample. Methods are assumed checked by [`check_methods`].
pub fn analyze_sample(
    sample: &TwoStageSample,
    layout: &ColumnLayout,
    estimands: &[SmoothEstimand],
    methods: &[VarianceMethod],
    alpha: f64,
) -> Result<Vec<SampleEstimate>> {
    let si_fraction = || {
        let s = &sample.strata[0];
        s.rows.n_rows() as f64 / s.population_size as f64
    };
    estimands
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let lin = linearized_values_mapped(&sample.strata, est, layout.map(e))?;
            let variances = methods
                .iter()
                .map(|&method| {
                    let variance = match method {
                        VarianceMethod::StratWr | VarianceMethod::WithReplacement => lin.variance,
                        VarianceMethod::Simplified => (1.0 - si_fraction()) * lin.variance,
                        VarianceMethod::Unbiased => {
                            let vh = sample.v_hat.as_ref().ok_or_else(|| {
                                Error::MissingVarianceEstimates("v needs V_hat_i".into())
                            })?;
                            let c = layout.map(e)[0];
                            let sum_v: f64 = (0..vh[0].n_rows()).map(|j| vh[0].row(j)[c]).sum();
                            (1.0 - si_fraction()) * lin.variance + sum_v / si_fraction()
                        }
                        VarianceMethod::Bernoulli => {
                            return Err(Error::IncompatibleMethod {
                                method: method.label().into(),
                                reason: "PSUs are sampled without replacement here".into(),
                            })
                        }
                    };
                    Ok(VarianceRow {
                        method,
                        variance,
                        normal: normal_ci(lin.estimate, variance, alpha)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleEstimate {
                estimand: *est,
                label: est.label(),
                estimate: lin.estimate,
                v_stwr: lin.variance,
                variances,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueVariance {
    pub estimand: SmoothEstimand,
    pub label: String,
    /// Population value `theta`.
    pub theta: f64,
    /// Mean of the point estimator over the runs.
    pub mean: f64,
    /// Variance of the point estimator over the runs.
    pub variance: f64,
    pub runs: usize,
}

/// Variance of each point estimator over `C = scenario.true_variance_runs`
/// independent samples.
pub fn approximate_true_variance(frame: &Frame, scenario: &Scenario) -> Result<Vec<TrueVariance>> {
    scenario.validate(frame)?;
    let runs = scenario.true_variance_runs;
    if runs < 1000 {
        return Err(Error::InsufficientReplicates {
            need: 1000,
            have: runs,
        });
    }
    let layout = ColumnLayout::new(&scenario.estimands);
    let estimates: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|c| {
            let mut rng = Stream::substream(scenario.seed, "truth", c as u64);
            let s = draw_two_stage(
                frame,
                &scenario.first_stage,
                scenario.second_stage,
                &layout.columns,
                false,
                &mut rng,
            )?;
            point_estimates(&s.strata, &layout, &scenario.estimands)
        })
        .collect::<Result<_>>()?;
    scenario
        .estimands
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let xs: Vec<f64> = estimates.iter().map(|v| v[e]).collect();
            Ok(TrueVariance {
                estimand: *est,
                label: est.label(),
                theta: population_value(frame, est)?,
                mean: crate::stats::mean(&xs),
                variance: crate::stats::sample_variance(&xs).unwrap_or(0.0),
                runs,
            })
        })
        .collect()
}

/// Monte Carlo summary of one estimator (or interval) in one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub scenario: String,
    pub estimand: String,
    /// `point`, a variance-method label, or `bootstrap`.
    pub method: String,
    /// `normal`, `percentile` or `studentized`; empty for the point row.
    pub interval: String,
    pub replicates: usize,
    pub theta_true: f64,
    /// `C`-run variance, the reference of every variance row.
    pub v_true: f64,
    pub rb_percent: f64,
    pub rb_mc_se: f64,
    pub rs_percent: f64,
    pub rb_fraction: f64,
    pub rs_fraction: f64,
    /// Percentage of intervals lying entirely above `theta`.
    pub lower_pct: Option<f64>,
    /// Percentage of intervals lying entirely below `theta`.
    pub upper_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    pub rb_percent: f64,
    pub rb_mc_se: f64,
    pub rs_percent: f64,
}

/// `RB = 100 (mean - theta) / theta`, `RS = 100 sqrt(mean (x - theta)^2) / theta`.
pub fn relative_errors(values: &[f64], theta: f64) -> Result<RelativeError> {
    if theta == 0.0 {
        return Err(Error::Degenerate("relative error against a zero reference".into()));
    }
    let ms = MeanSe::of(values);
    let mse = values.iter().map(|v| (v - theta) * (v - theta)).sum::<f64>() / values.len() as f64;
    Ok(RelativeError {
        rb_percent: 100.0 * (ms.mean - theta) / theta,
        rb_mc_se: 100.0 * ms.se / theta.abs(),
        rs_percent: 100.0 * mse.sqrt() / theta,
    })
}

/// `(L, U)`: percentages of intervals entirely above and entirely below `theta`.
pub fn coverage_stats(intervals: &[Interval], theta: f64) -> Result<(f64, f64)> {
    if intervals.len() < 100 {
        return Err(Error::InsufficientReplicates {
            need: 100,
            have: intervals.len(),
        });
    }
    let n = intervals.len() as f64;
    let lower = intervals.iter().filter(|i| i.lower > theta).count() as f64;
    let upper = intervals.iter().filter(|i| i.upper < theta).count() as f64;
    Ok((100.0 * lower / n, 100.0 * upper / n))
}

struct Outcome {
    estimate: f64,
    /// `(variance, normal interval)` per requested method.
    methods: Vec<(f64, Interval)>,
    /// `(variance, percentile, studentized)`.
    boot: Option<(f64, Interval, Option<Interval>)>,
}

fn replicate_outcomes(
    frame: &Frame,
    scenario: &Scenario,
    layout: &ColumnLayout,
    b: usize,
) -> Result<Vec<Outcome>> {
    let mut rng = Stream::substream(scenario.seed, "mc", b as u64);
    let need_v_hat = scenario.variance_methods.contains(&VarianceMethod::Unbiased);
    let sample = draw_two_stage(
        frame,
        &scenario.first_stage,
        scenario.second_stage,
        &layout.columns,
        need_v_hat,
        &mut rng,
    )?;
    let estimates = analyze_sample(
        &sample,
        layout,
        &scenario.estimands,
        &scenario.variance_methods,
        scenario.alpha,
    )?;
    let v_st: Vec<f64> = estimates.iter().map(|e| e.v_stwr).collect();
    let mut out: Vec<Outcome> = estimates
        .into_iter()
        .map(|e| Outcome {
            estimate: e.estimate,
            methods: e.variances.iter().map(|v| (v.variance, v.normal)).collect(),
            boot: None,
        })
        .collect();
    if let Some(plan) = &scenario.bootstrap {
        let cfg = scenario.bootstrap_config(plan, rng.next_u64());
        let sets = resample_strata(&sample.strata, layout, &scenario.estimands, &cfg)?;
        for (e, reps) in sets.iter().enumerate() {
            let var = bootstrap_variance(reps)?;
            let pct = percentile_ci(reps, scenario.alpha)?;
            // the pivot is WR-type, so the base standard error is too
            let st = if plan.studentized {
                Some(studentized_ci(reps, v_st[e].sqrt(), scenario.alpha)?)
            } else {
                None
            };
            out[e].boot = Some((var, pct, st));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub truth: Vec<TrueVariance>,
    pub rows: Vec<MCReport>,
}

impl ScenarioReport {
    pub fn find(&self, estimand: &str, method: &str, interval: &str) -> Option<&MCReport> {
        self.rows
            .iter()
            .find(|r| r.estimand == estimand && r.method == method && r.interval == interval)
    }
}

/// Runs `B` replicates and summarizes them against `truth` (one entry per
/// estimand, from [`approximate_true_variance`] or supplied).
pub fn run_scenario(frame: &Frame, scenario: &Scenario, truth: &[TrueVariance]) -> Result<ScenarioReport> {
    scenario.validate(frame)?;
    if truth.len() != scenario.estimands.len() {
        return Err(Error::SizeMismatch {
            expected: scenario.estimands.len(),
            got: truth.len(),
        });
    }
    let layout = ColumnLayout::new(&scenario.estimands);
    let outcomes: Vec<Vec<Outcome>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|b| replicate_outcomes(frame, scenario, &layout, b))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (e, est) in scenario.estimands.iter().enumerate() {
        let t = &truth[e];
        let label = est.label();
        let mut push = |method: &str,
                        interval: &str,
                        reference: f64,
                        values: &[f64],
                        cis: Option<Vec<Interval>>|
         -> Result<()> {
            let re = relative_errors(values, reference)?;
            let (lower, upper) = match cis {
                Some(c) => {
                    let (l, u) = coverage_stats(&c, t.theta)?;
                    (Some(l), Some(u))
                }
                None => (None, None),
            };
            rows.push(MCReport {
                scenario: scenario.label.clone(),
                estimand: label.clone(),
                method: method.into(),
                interval: interval.into(),
                replicates: values.len(),
                theta_true: t.theta,
                v_true: t.variance,
                rb_percent: re.rb_percent,
                rb_mc_se: re.rb_mc_se,
                rs_percent: re.rs_percent,
                rb_fraction: re.rb_percent / 100.0,
                rs_fraction: re.rs_percent / 100.0,
                lower_pct: lower,
                upper_pct: upper,
            });
            Ok(())
        };
        let estimates: Vec<f64> = outcomes.iter().map(|o| o[e].estimate).collect();
        push("point", "", t.theta, &estimates, None)?;
        for (k, m) in scenario.variance_methods.iter().enumerate() {
            let vs: Vec<f64> = outcomes.iter().map(|o| o[e].methods[k].0).collect();
            let cis: Vec<Interval> = outcomes.iter().map(|o| o[e].methods[k].1).collect();
            push(m.label(), "normal", t.variance, &vs, Some(cis))?;
        }
        if let Some(plan) = &scenario.bootstrap {
            let boot = |o: &Vec<Outcome>| o[e].boot.expect("bootstrap ran");
            let vs: Vec<f64> = outcomes.iter().map(|o| boot(o).0).collect();
            let pct: Vec<Interval> = outcomes.iter().map(|o| boot(o).1).collect();
            push("bootstrap", "percentile", t.variance, &vs, Some(pct))?;
            if plan.studentized {
                let st: Vec<Interval> = outcomes.iter().map(|o| boot(o).2.expect("studentized")).collect();
                push("bootstrap", "studentized", t.variance, &vs, Some(st))?;
            }
        }
    }
    Ok(ScenarioReport {
        scenario: scenario.clone(),
        truth: truth.to_vec(),
        rows,
    })
}

/// Bootstrap pivots `t*_r` from a single two-stage sample and an
/// Anderson-Darling screen of their distribution.
pub fn pivot_screen(
    frame: &Frame,
    first: &FirstStage,
    stage: SecondStage,
    estimand: SmoothEstimand,
    replicates: usize,
    seed: u64,
) -> Result<(Vec<f64>, NormalityScreen)> {
    check_first_stage(frame, first)?;
    let estimands = [estimand];
    let layout = ColumnLayout::new(&estimands);
    let mut rng = Stream::substream(seed, "pivot-sample", 0);
    let sample = draw_two_stage(frame, first, stage, &layout.columns, false, &mut rng)?;
    let cfg = BootstrapConfig {
        replicates,
        studentized: true,
        ..BootstrapConfig::new(rng.next_u64())
    };
    let sets = resample_strata(&sample.strata, &layout, &estimands, &cfg)?;
    let t = pivots(&sets[0])?;
    let screen = anderson_darling_normal(&t)?;
    Ok((t, screen))
}

// ---------------------------------------------------------------------------
// Grids of scenarios
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub label: String,
    pub config: SyntheticConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondStageKind {
    Si,
    Systematic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySpec {
    /// `N_I` of each frame in the family.
    pub population_sizes: Vec<usize>,
    pub sample_size: usize,
    #[serde(default)]
    pub m: Option<usize>,
    pub replicates: usize,
    /// Model for the family; `n_psu` is replaced per frame.
    pub population: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub populations: Vec<PopulationSpec>,
    /// Variable pairs `h` (0-based) to study; empty means all.
    #[serde(default)]
    pub pairs: Vec<usize>,
    pub first_stage_sizes: Vec<usize>,
    pub second_stage_sizes: Vec<usize>,
    pub second_stage: SecondStageKind,
    pub replicates: usize,
    #[serde(default = "default_truth_runs")]
    pub true_variance_runs: usize,
    #[serde(default = "default_boot_replicates")]
    pub bootstrap_replicates: usize,
    #[serde(default)]
    pub studentized: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub decay: Option<DecaySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub population: String,
    pub rho: f64,
    pub n0: usize,
    #[serde(rename = "nI")]
    pub n_i: usize,
    pub family: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub reports: Vec<ScenarioReport>,
    pub decay: Option<DecayTable>,
}

/// `(family, estimand index, method, interval)`.
type Family = (&'static str, usize, &'static str, &'static str);

const FAMILIES: [Family; 4] = [
    ("vsimp_total", 0, "v_simp", "normal"),
    ("boot_total", 0, "bootstrap", "percentile"),
    ("boot_ratio", 1, "bootstrap", "percentile"),
    ("boot_corr", 2, "bootstrap", "percentile"),
];

const STUDENTIZED_FAMILIES: [Family; 3] = [
    ("boot_total_studentized", 0, "bootstrap", "studentized"),
    ("boot_ratio_studentized", 1, "bootstrap", "studentized"),
    ("boot_corr_studentized", 2, "bootstrap", "studentized"),
];

pub const STUDY_METRICS: [&str; 5] = ["RB", "RS", "L", "U", "L+U"];

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.populations.is_empty()
            || self.first_stage_sizes.is_empty()
            || self.second_stage_sizes.is_empty()
        {
            return Err(Error::InvalidConfig("study grid is empty".into()));
        }
        Ok(())
    }

    fn second_stage(&self, n0: usize) -> SecondStage {
        match self.second_stage {
            SecondStageKind::Si => SecondStage::Si { n0 },
            SecondStageKind::Systematic => SecondStage::Systematic { n0 },
        }
    }

    /// The scenario of one grid cell; pair `h` gives the total of
    /// `y_{2h+1}`, the ratio `y_{2h+1}/y_{2h+2}` and their correlation
    /// (1-based names).
    pub fn cell(&self, population: &str, rho: f64, h: usize, n0: usize, n_i: usize, seed: u64) -> Scenario {
        let (a, b) = (2 * h, 2 * h + 1);
        Scenario {
            label: format!("{population}/rho={rho}/n0={n0}/nI={n_i}"),
            first_stage: FirstStage::Si { n: n_i },
            second_stage: self.second_stage(n0),
            estimands: vec![
                SmoothEstimand::Total { var: a },
                SmoothEstimand::Ratio { num: a, den: b },
                SmoothEstimand::Correlation { a, b },
            ],
            variance_methods: vec![VarianceMethod::Simplified],
            bootstrap: Some(BootstrapPlan {
                m: None,
                replicates: self.bootstrap_replicates,
                studentized: self.studentized,
            }),
            replicates: self.replicates,
            true_variance_runs: self.true_variance_runs,
            alpha: self.alpha,
            seed,
        }
    }
}

/// Runs every grid cell (population x pair x `n0` x `n_I`) and, if
/// configured, the decay family.
pub fn scaling_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let root = Stream::new(cfg.seed);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut cell = 0u64;
    let mut families = FAMILIES.to_vec();
    if cfg.studentized {
        families.extend(STUDENTIZED_FAMILIES);
    }
    for pop in &cfg.populations {
        let frame = generate_population(&pop.config)?;
        let pairs: Vec<usize> = if cfg.pairs.is_empty() {
            (0..pop.config.icc_targets.len()).collect()
        } else {
            cfg.pairs.clone()
        };
        for &h in &pairs {
            let rho = *pop.config.icc_targets.get(h).ok_or_else(|| {
                Error::InvalidConfig(format!("pair {h} not generated for {}", pop.label))
            })?;
            for &n0 in &cfg.second_stage_sizes {
                for &n_i in &cfg.first_stage_sizes {
                    let scenario = cfg.cell(&pop.label, rho, h, n0, n_i, root.derive_seed("cell", cell));
                    cell += 1;
                    let truth = approximate_true_variance(&frame, &scenario)?;
                    let report = run_scenario(&frame, &scenario, &truth)?;
                    for &(family, e, method, interval) in &families {
                        let label = scenario.estimands[e].label();
                        let r = report.find(&label, method, interval).expect("row present");
                        let (l, u) = (r.lower_pct.expect("interval row"), r.upper_pct.expect("interval row"));
                        let b = r.replicates as f64;
                        let tail_se = |p: f64| (p * (100.0 - p) / b).sqrt();
                        let metrics = [
                            (r.rb_percent, Some(r.rb_mc_se)),
                            (r.rs_percent, None),
                            (l, Some(tail_se(l))),
                            (u, Some(tail_se(u))),
                            (l + u, Some(tail_se(l + u))),
                        ];
                        for (name, (value, mc_se)) in STUDY_METRICS.iter().zip(metrics) {
                            rows.push(StudyRow {
                                population: pop.label.clone(),
                                rho,
                                n0,
                                n_i,
                                family: family.into(),
                                metric: name.to_string(),
                                value,
                                mc_se,
                            });
                        }
                    }
                    reports.push(report);
                }
            }
        }
    }
    let decay = match &cfg.decay {
        Some(d) => {
            let frames = d
                .population_sizes
                .iter()
                .map(|&n_psu| generate_population(&SyntheticConfig { n_psu, ..d.population.clone() }))
                .collect::<Result<Vec<_>>>()?;
            Some(verify_decay(
                &frames,
                &Column::Var { var: 0 },
                d.sample_size,
                d.m,
                cfg.second_stage(cfg.second_stage_sizes[0]),
                d.replicates,
                root.derive_seed("decay", 0),
            )?)
        }
        None => None,
    };
    Ok(StudyResult {
        rows,
        reports,
        decay,
    })
}

/// Long table: `population,rho,n0,nI,family,metric,value,mc_se`.
pub fn write_study_long<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One family in table layout: rows are `rho` blocks times metrics, columns
/// are `n0` times `n_I`.
pub fn write_study_table<W: Write>(rows: &[StudyRow], family: &str, out: W) -> Result<()> {
    let fam: Vec<&StudyRow> = rows.iter().filter(|r| r.family == family).collect();
    let mut cols: Vec<(usize, usize)> = fam.iter().map(|r| (r.n0, r.n_i)).collect();
    cols.sort_unstable();
    cols.dedup();
    type Block<'a> = BTreeMap<&'a str, BTreeMap<(usize, usize), f64>>;
    let mut blocks: Vec<((&str, f64), Block)> = Vec::new();
    for r in &fam {
        let key = (r.population.as_str(), r.rho);
        let slot = match blocks.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                blocks.push((key, BTreeMap::new()));
                blocks.len() - 1
            }
        };
        blocks[slot]
            .1
            .entry(r.metric.as_str())
            .or_default()
            .insert((r.n0, r.n_i), r.value);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["population".to_string(), "rho".into(), "metric".into()];
    header.extend(cols.iter().map(|(n0, ni)| format!("n0={n0} nI={ni}")));
    w.write_record(&header)?;
    for ((population, rho), block) in &blocks {
        for metric in STUDY_METRICS {
            let Some(vals) = block.get(metric) else { continue };
            let mut rec = vec![population.to_string(), rho.to_string(), metric.to_string()];
            rec.extend(cols.iter().map(|c| vals.get(c).map(|v| format!("{v:.4}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Families present in `rows`, in order of first appearance.
pub fn study_families(rows: &[StudyRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.family) {
            out.push(r.family.clone());
        }
    }
    out
}
