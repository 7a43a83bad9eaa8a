//! Point and variance estimators for two-stage samples.

use serde::{Deserialize, Serialize};

use crate::designs::{systematic_sample, DesignSpec, FirstStageDraw, SecondStage, SecondStageDraw};
use crate::frame::{Column, Frame, PrimaryUnit};
use crate::stats::normal_quantile;
use crate::{Error, Result};

/// Row-major table of per-draw values: one row per first-stage draw, one
/// column per derived variable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrawMatrix {
    cols: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(cols: usize) -> Self {
        Self {
            cols,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            data: Vec::with_capacity(cols * rows),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut m = Self::with_capacity(cols, rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Single-column matrix.
    pub fn from_column(values: &[f64]) -> Self {
        Self {
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::SizeMismatch {
                expected: self.cols,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Appends a zeroed row and returns it for filling in.
    pub fn push_zero_row(&mut self) -> &mut [f64] {
        let start = self.data.len();
        self.data.resize(start + self.cols, 0.0);
        &mut self.data[start..]
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    pub fn n_rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|j| self.data[j * self.cols + c]).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for j in 0..self.n_rows() {
            for (o, v) in out.iter_mut().zip(self.row(j)) {
                *o += v;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Second stage
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsuEstimate {
    pub psu_index: usize,
    /// `Y_hat_i`, one entry per column.
    pub y_hat: Vec<f64>,
    /// `V_hat_i` per column, when the second-stage design has one.
    pub v_hat: Option<Vec<f64>>,
}

/// Writes `(N_i / n_0) sum_{k in S_i} column(y_k)` for every column into `out`.
pub fn expand_into(psu: &PrimaryUnit, ssu_indices: &[usize], columns: &[Column], out: &mut [f64]) {
    let scale = psu.size() as f64 / ssu_indices.len() as f64;
    out.iter_mut().for_each(|o| *o = 0.0);
    for &k in ssu_indices {
        let y = psu.y(k);
        for (o, c) in out.iter_mut().zip(columns) {
            *o += c.value(y);
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
}

/// Unbiased estimate of `Y_i` per column, plus `V_hat_i` where the design
/// allows it: `(N_i^2 / n_0)(1 - n_0/N_i) s_i^2` under SI, `0` for a census.
pub fn estimate_psu(psu: &PrimaryUnit, draw: &SecondStageDraw, columns: &[Column]) -> PsuEstimate {
    let mut y_hat = vec![0.0; columns.len()];
    expand_into(psu, &draw.ssu_indices, columns, &mut y_hat);
    let big_n = psu.size() as f64;
    let n0 = draw.ssu_indices.len();
    let census = n0 == psu.size();
    let v_hat = match draw.design {
        _ if census => Some(vec![0.0; columns.len()]),
        SecondStage::Si { .. } if n0 >= 2 => Some(
            columns
                .iter()
                .map(|c| {
                    let xs: Vec<f64> = draw.ssu_indices.iter().map(|&k| c.value(psu.y(k))).collect();
                    let s2 = crate::stats::sample_variance(&xs).unwrap_or(0.0);
                    big_n * big_n / n0 as f64 * (1.0 - n0 as f64 / big_n) * s2
                })
                .collect(),
        ),
        _ => None,
    };
    PsuEstimate {
        psu_index: draw.psu_index,
        y_hat,
        v_hat,
    }
}

/// Exact second-stage variance `V_i` of the expansion estimator of `Y_i`.
pub fn second_stage_variance(psu: &PrimaryUnit, column: &Column, stage: SecondStage) -> f64 {
    let big_n = psu.size();
    let values: Vec<f64> = (0..big_n).map(|k| column.value(psu.y(k))).collect();
    match stage {
        SecondStage::Census => 0.0,
        SecondStage::Si { n0 } => {
            if n0 >= big_n {
                return 0.0;
            }
            let s2 = crate::stats::sample_variance(&values).unwrap_or(0.0);
            let nf = big_n as f64;
            nf * nf / n0 as f64 * (1.0 - n0 as f64 / nf) * s2
        }
        SecondStage::Systematic { n0 } => {
            // all N_i start classes are equally likely
            let total: f64 = values.iter().sum();
            let scale = big_n as f64 / n0 as f64;
            let ss: f64 = (0..big_n)
                .map(|w| {
                    let est: f64 = systematic_sample(big_n, n0, w)
                        .into_iter()
                        .map(|k| values[k])
                        .sum::<f64>()
                        * scale;
                    (est - total) * (est - total)
                })
                .sum();
            ss / big_n as f64
        }
    }
}

/// Exact subtotals `Y_i` and second-stage variances `V_i` over the frame.
pub fn variance_components(frame: &Frame, column: &Column, stage: SecondStage) -> (Vec<f64>, Vec<f64>) {
    let subtotals = frame.subtotals(column);
    let v = frame
        .psus()
        .iter()
        .map(|p| second_stage_variance(p, column, stage))
        .collect();
    (subtotals, v)
}

// ---------------------------------------------------------------------------
// Totals
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStageKind {
    Si,
    Sir,
    Be,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalEstimate {
    pub y_hat: f64,
    pub kind: FirstStageKind,
    /// Design size `n_I` (expected size under BE).
    pub sample_size: usize,
    pub population_size: usize,
    pub sampling_fraction: f64,
    /// `Z_j` (SI) or `X_j` (SIR) in draw order; `Y_hat_i` under BE.
    pub values: Vec<f64>,
    /// `s_Z^2` or `s_X^2`; `None` for BE or a single draw.
    pub s2: Option<f64>,
}

impl TotalEstimate {
    pub fn realized_size(&self) -> usize {
        self.values.len()
    }
}

fn check_alignment(draw: &FirstStageDraw, est: &[PsuEstimate], column: usize) -> Result<()> {
    if est.len() != draw.order.len() {
        return Err(Error::SizeMismatch {
            expected: draw.order.len(),
            got: est.len(),
        });
    }
    for (j, (e, &i)) in est.iter().zip(&draw.order).enumerate() {
        if e.psu_index != i {
            return Err(Error::InvalidConfig(format!(
                "estimate {j} belongs to psu {} but draw {j} selected psu {i}",
                e.psu_index
            )));
        }
        if column >= e.y_hat.len() {
            return Err(Error::InvalidConfig(format!("column {column} out of range")));
        }
    }
    Ok(())
}

fn total_from_draws(
    kind: FirstStageKind,
    big_n: usize,
    n: usize,
    values: Vec<f64>,
) -> TotalEstimate {
    let mean = crate::stats::mean(&values);
    TotalEstimate {
        y_hat: big_n as f64 * mean,
        kind,
        sample_size: n,
        population_size: big_n,
        sampling_fraction: n as f64 / big_n as f64,
        s2: crate::stats::sample_variance(&values),
        values,
    }
}

/// `Y_hat = N_I Z_bar` under SI. `est[j]` is the estimate for draw `j`.
pub fn ht_total_si(draw: &FirstStageDraw, est: &[PsuEstimate], column: usize) -> Result<TotalEstimate> {
    if !matches!(draw.design, DesignSpec::Si { .. }) {
        return Err(Error::IncompatibleMethod {
            method: "ht_total_si".into(),
            reason: format!("draw is {}", draw.design.tag()),
        });
    }
    check_alignment(draw, est, column)?;
    let values = est.iter().map(|e| e.y_hat[column]).collect();
    Ok(total_from_draws(FirstStageKind::Si, draw.population_size, draw.len(), values))
}

/// `Y_hat_WR = N_I X_bar`; `est[j]` is the independent second-stage estimate
/// for the `j`-th draw, so a PSU drawn twice appears twice.
pub fn hh_total_sir(draw: &FirstStageDraw, est: &[PsuEstimate], column: usize) -> Result<TotalEstimate> {
    if !matches!(draw.design, DesignSpec::Sir { .. }) {
        return Err(Error::IncompatibleMethod {
            method: "hh_total_sir".into(),
            reason: format!("draw is {}", draw.design.tag()),
        });
    }
    check_alignment(draw, est, column)?;
    let values = est.iter().map(|e| e.y_hat[column]).collect();
    Ok(total_from_draws(FirstStageKind::Sir, draw.population_size, draw.len(), values))
}

/// `Y_hat_B = (N_I / n_I) sum Y_hat_i` with the expected size `n_I` as divisor.
pub fn ht_total_be(draw: &FirstStageDraw, est: &[PsuEstimate], column: usize) -> Result<TotalEstimate> {
    let DesignSpec::Be { expected_n } = draw.design else {
        return Err(Error::IncompatibleMethod {
            method: "ht_total_be".into(),
            reason: format!("draw is {}", draw.design.tag()),
        });
    };
    check_alignment(draw, est, column)?;
    let values: Vec<f64> = est.iter().map(|e| e.y_hat[column]).collect();
    let big_n = draw.population_size;
    Ok(TotalEstimate {
        y_hat: big_n as f64 / expected_n as f64 * values.iter().sum::<f64>(),
        kind: FirstStageKind::Be,
        sample_size: expected_n,
        population_size: big_n,
        sampling_fraction: expected_n as f64 / big_n as f64,
        s2: None,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// `v`: needs `V_hat_i`.
    Unbiased,
    /// `v_SIMP`.
    Simplified,
    /// `v_WR`.
    WithReplacement,
    /// `v_B`: needs `V_hat_i`.
    Bernoulli,
    /// `v_STWR`, computed by [`linearized_values`].
    StratWr,
}

impl VarianceMethod {
    pub fn label(&self) -> &'static str {
        match self {
            VarianceMethod::Unbiased => "v",
            VarianceMethod::Simplified => "v_simp",
            VarianceMethod::WithReplacement => "v_wr",
            VarianceMethod::Bernoulli => "v_b",
            VarianceMethod::StratWr => "v_stwr",
        }
    }
}

fn v_hat_sum(est: &[PsuEstimate], column: usize, method: VarianceMethod) -> Result<f64> {
    est.iter()
        .map(|e| {
            e.v_hat
                .as_ref()
                .map(|v| v[column])
                .ok_or_else(|| Error::MissingVarianceEstimates(method.label().into()))
        })
        .sum()
}

fn incompatible(method: VarianceMethod, reason: &str) -> Error {
    Error::IncompatibleMethod {
        method: method.label().into(),
        reason: reason.into(),
    }
}

pub fn variance_estimate(
    total: &TotalEstimate,
    est: &[PsuEstimate],
    column: usize,
    method: VarianceMethod,
) -> Result<f64> {
    let big_n = total.population_size as f64;
    let n = total.sample_size as f64;
    let f = total.sampling_fraction;
    let s2 = || {
        total.s2.ok_or_else(|| {
            Error::Degenerate("sample dispersion needs at least two draws".into())
        })
    };
    match (method, total.kind) {
        (VarianceMethod::Unbiased, FirstStageKind::Si) => {
            let sv = v_hat_sum(est, column, method)?;
            Ok(big_n * big_n / n * ((1.0 - f) * s2()? + sv / big_n))
        }
        (VarianceMethod::Simplified, FirstStageKind::Si) => Ok(big_n * big_n / n * (1.0 - f) * s2()?),
        (VarianceMethod::WithReplacement, FirstStageKind::Si | FirstStageKind::Sir) => {
            Ok(big_n * big_n / n * s2()?)
        }
        (VarianceMethod::Bernoulli, FirstStageKind::Be) => {
            let nb = total.realized_size();
            if nb == 0 {
                return Ok(0.0);
            }
            let sv = v_hat_sum(est, column, method)?;
            let sq: f64 = total.values.iter().map(|y| y * y).sum();
            Ok(big_n * big_n / n * ((1.0 - f) * sq / nb as f64 + f * sv / nb as f64))
        }
        (VarianceMethod::StratWr, _) => Err(incompatible(method, "use linearized_values")),
        (_, kind) => Err(incompatible(method, &format!("first stage is {kind:?}"))),
    }
}

/// Closed-form variance of the total estimator under `design` from exact
/// subtotals `Y_i` and second-stage variances `V_i`.
pub fn theoretical_variance(subtotals: &[f64], v_i: &[f64], design: &DesignSpec) -> Result<f64> {
    if subtotals.len() != v_i.len() {
        return Err(Error::SizeMismatch {
            expected: subtotals.len(),
            got: v_i.len(),
        });
    }
    let big_n = subtotals.len() as f64;
    let v_bar = v_i.iter().sum::<f64>() / big_n;
    let s2 = || crate::frame::summarize_subtotals(subtotals).map(|s| s.dispersion);
    match *design {
        DesignSpec::Si { n } => {
            let n = n as f64;
            Ok(big_n * big_n / n * ((1.0 - n / big_n) * s2()? + v_bar))
        }
        DesignSpec::Sir { n } => {
            let n = n as f64;
            Ok(big_n * big_n / n * ((big_n - 1.0) / big_n * s2()? + v_bar))
        }
        DesignSpec::Be { expected_n } => {
            let n = expected_n as f64;
            let sq = subtotals.iter().map(|y| y * y).sum::<f64>() / big_n;
            Ok(big_n * big_n / n * ((1.0 - n / big_n) * sq + v_bar))
        }
        _ => Err(Error::IncompatibleMethod {
            method: "theoretical_variance".into(),
            reason: format!("no closed form for {}", design.tag()),
        }),
    }
}

/// `V_app = (N_I^2 / n_I)(1 - f_I){S^2 + N_I^{-1} sum V_i}`.
pub fn approximate_variance(subtotals: &[f64], v_i: &[f64], n: usize) -> Result<f64> {
    let big_n = subtotals.len() as f64;
    let s2 = crate::frame::summarize_subtotals(subtotals)?.dispersion;
    let n = n as f64;
    Ok(big_n * big_n / n * (1.0 - n / big_n) * (s2 + v_i.iter().sum::<f64>() / big_n))
}

// ---------------------------------------------------------------------------
// Smooth functions of totals
// ---------------------------------------------------------------------------

/// Variable indices are 0-based (`var: 0` is `y1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothEstimand {
    Total { var: usize },
    /// `Y_num / Y_den`, equal to the ratio of means.
    Ratio { num: usize, den: usize },
    /// Finite-population correlation of `y_a` and `y_b` over SSUs.
    Correlation { a: usize, b: usize },
    /// Share of SSUs with `y_var == code`.
    Proportion { var: usize, code: f64 },
}

impl SmoothEstimand {
    /// Totals the estimand is a function of, in argument order.
    pub fn columns(&self) -> Vec<Column> {
        match *self {
            SmoothEstimand::Total { var } => vec![Column::Var { var }],
            SmoothEstimand::Ratio { num, den } => {
                vec![Column::Var { var: num }, Column::Var { var: den }]
            }
            SmoothEstimand::Correlation { a, b } => vec![
                Column::Count,
                Column::Var { var: a },
                Column::Var { var: b },
                Column::Square { var: a },
                Column::Square { var: b },
                Column::Product { a, b },
            ],
            SmoothEstimand::Proportion { var, code } => {
                vec![Column::Indicator { var, code }, Column::Count]
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SmoothEstimand::Total { var } => format!("total_y{}", var + 1),
            SmoothEstimand::Ratio { num, den } => format!("ratio_y{}_y{}", num + 1, den + 1),
            SmoothEstimand::Correlation { a, b } => format!("corr_y{}_y{}", a + 1, b + 1),
            SmoothEstimand::Proportion { var, code } => format!("prop_y{}_eq_{code}", var + 1),
        }
    }

    /// Degree `beta` of homogeneity under scaling of the study variables.
    pub fn homogeneity_degree(&self) -> f64 {
        match self {
            SmoothEstimand::Total { .. } => 1.0,
            _ => 0.0,
        }
    }

    pub fn max_var(&self) -> usize {
        match *self {
            SmoothEstimand::Total { var } | SmoothEstimand::Proportion { var, .. } => var,
            SmoothEstimand::Ratio { num, den } => num.max(den),
            SmoothEstimand::Correlation { a, b } => a.max(b),
        }
    }

    fn check_arity(&self, t: &[f64]) -> Result<()> {
        let k = self.columns().len();
        if t.len() != k {
            return Err(Error::SizeMismatch {
                expected: k,
                got: t.len(),
            });
        }
        Ok(())
    }

    /// `f(t)` for totals `t` aligned with [`SmoothEstimand::columns`].
    pub fn evaluate(&self, t: &[f64]) -> Result<f64> {
        self.check_arity(t)?;
        match self {
            SmoothEstimand::Total { .. } => Ok(t[0]),
            SmoothEstimand::Ratio { .. } | SmoothEstimand::Proportion { .. } => {
                if t[1] == 0.0 {
                    return Err(Error::Degenerate(format!("{}: zero denominator", self.label())));
                }
                Ok(t[0] / t[1])
            }
            SmoothEstimand::Correlation { .. } => {
                let m = CorrMoments::new(t, &self.label())?;
                Ok(m.sab / (m.saa * m.sbb).sqrt())
            }
        }
    }

    /// Gradient of `f` at `t`.
    pub fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; t.len()];
        self.gradient_into(t, &mut g)?;
        Ok(g)
    }

    pub fn gradient_into(&self, t: &[f64], g: &mut [f64]) -> Result<()> {
        self.check_arity(t)?;
        match self {
            SmoothEstimand::Total { .. } => g[0] = 1.0,
            SmoothEstimand::Ratio { .. } | SmoothEstimand::Proportion { .. } => {
                if t[1] == 0.0 {
                    return Err(Error::Degenerate(format!("{}: zero denominator", self.label())));
                }
                g[0] = 1.0 / t[1];
                g[1] = -t[0] / (t[1] * t[1]);
            }
            SmoothEstimand::Correlation { .. } => {
                let m = CorrMoments::new(t, &self.label())?;
                let (n, a, b) = (t[0], t[1], t[2]);
                let denom = (m.saa * m.sbb).sqrt();
                let r = m.sab / denom;
                // r = sab / sqrt(saa sbb); chain rule through the three moments
                let d_sab = [a * b / (n * n), -b / n, -a / n, 0.0, 0.0, 1.0];
                let d_saa = [a * a / (n * n), -2.0 * a / n, 0.0, 1.0, 0.0, 0.0];
                let d_sbb = [b * b / (n * n), 0.0, -2.0 * b / n, 0.0, 1.0, 0.0];
                for c in 0..6 {
                    g[c] = d_sab[c] / denom - 0.5 * r * (d_saa[c] / m.saa + d_sbb[c] / m.sbb);
                }
            }
        }
        Ok(())
    }
}

struct CorrMoments {
    sab: f64,
    saa: f64,
    sbb: f64,
}

impl CorrMoments {
    fn new(t: &[f64], label: &str) -> Result<Self> {
        let (n, a, b, aa, bb, ab) = (t[0], t[1], t[2], t[3], t[4], t[5]);
        if n <= 0.0 {
            return Err(Error::Degenerate(format!("{label}: nonpositive count")));
        }
        let m = Self {
            sab: ab - a * b / n,
            saa: aa - a * a / n,
            sbb: bb - b * b / n,
        };
        if !(m.saa > 0.0 && m.sbb > 0.0) {
            return Err(Error::Degenerate(format!("{label}: zero variance")));
        }
        Ok(m)
    }
}

/// Substitution estimate `f(t)`.
pub fn plugin_estimate(totals: &[f64], estimand: &SmoothEstimand) -> Result<f64> {
    estimand.evaluate(totals)
}

/// Exact population value of an estimand.
pub fn population_value(frame: &Frame, estimand: &SmoothEstimand) -> Result<f64> {
    let t: Vec<f64> = estimand.columns().iter().map(|c| frame.total(c)).collect();
    estimand.evaluate(&t)
}

/// Deduplicated union of the columns needed by a set of estimands.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnLayout {
    pub columns: Vec<Column>,
    maps: Vec<Vec<usize>>,
}

impl ColumnLayout {
    pub fn new(estimands: &[SmoothEstimand]) -> Self {
        let mut columns: Vec<Column> = Vec::new();
        let maps = estimands
            .iter()
            .map(|e| {
                e.columns()
                    .into_iter()
                    .map(|c| match columns.iter().position(|x| *x == c) {
                        Some(p) => p,
                        None => {
                            columns.push(c);
                            columns.len() - 1
                        }
                    })
                    .collect()
            })
            .collect();
        Self { columns, maps }
    }

    /// Positions in [`ColumnLayout::columns`] of estimand `e`'s arguments.
    pub fn map(&self, e: usize) -> &[usize] {
        &self.maps[e]
    }

    pub fn gather(&self, e: usize, full: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.maps[e].iter().map(|&c| full[c]));
    }
}

/// Linearized values `E_j = grad f(t) . row_j` for each row.
pub fn linearize(
    estimand: &SmoothEstimand,
    totals: &[f64],
    rows: &DrawMatrix,
    map: &[usize],
) -> Result<Vec<f64>> {
    let g = estimand.gradient(totals)?;
    Ok((0..rows.n_rows())
        .map(|j| {
            let r = rows.row(j);
            g.iter().zip(map).map(|(gc, &c)| gc * r[c]).sum()
        })
        .collect())
}

/// Estimate and linearization variances from an SI first-stage sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiAnalysis {
    pub estimate: f64,
    pub totals: Vec<f64>,
    /// Sample dispersion of the linearized values.
    pub s2: f64,
    pub v_simp: f64,
    pub v_wr: f64,
}

/// `rows` holds `Z_j` for every layout column; `big_n` is `N_I`.
pub fn analyze_si(
    rows: &DrawMatrix,
    big_n: usize,
    estimand: &SmoothEstimand,
    map: &[usize],
) -> Result<SiAnalysis> {
    let n = rows.n_rows();
    if n < 2 {
        return Err(Error::Degenerate("linearization needs at least two draws".into()));
    }
    let scale = big_n as f64 / n as f64;
    let sums = rows.column_sums();
    let totals: Vec<f64> = map.iter().map(|&c| scale * sums[c]).collect();
    let estimate = estimand.evaluate(&totals)?;
    let e = linearize(estimand, &totals, rows, map)?;
    let s2 = crate::stats::sample_variance(&e).unwrap();
    let nn = big_n as f64;
    let v_wr = nn * nn / n as f64 * s2;
    Ok(SiAnalysis {
        estimate,
        totals,
        s2,
        v_simp: v_wr * (1.0 - n as f64 / nn),
        v_wr,
    })
}

/// Sampled PSUs of one stratum: rows of per-PSU totals (one column per
/// layout column) and the stratum size `N_Il`.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumSample {
    pub population_size: usize,
    pub rows: DrawMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedLinearization {
    pub estimate: f64,
    pub totals: Vec<f64>,
    /// `E_i` per stratum, in sample order.
    pub linearized: Vec<Vec<f64>>,
    /// `v_STWR = sum_l (N_Il^2 / n_Il) s_El^2`.
    pub variance: f64,
}

/// Stratified expansion totals `sum_l (N_Il / n_Il) sum_{S_Il} row`.
pub fn stratified_totals(strata: &[StratumSample], map: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; map.len()];
    for s in strata {
        let scale = s.population_size as f64 / s.rows.n_rows() as f64;
        let sums = s.rows.column_sums();
        for (tc, &c) in t.iter_mut().zip(map) {
            *tc += scale * sums[c];
        }
    }
    t
}

/// Linearized values and `v_STWR` for an estimand whose argument columns
/// are `map` within each stratum's rows.
pub fn linearized_values_mapped(
    strata: &[StratumSample],
    estimand: &SmoothEstimand,
    map: &[usize],
) -> Result<StratifiedLinearization> {
    if strata.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if let Some(s) = strata.iter().find(|s| s.rows.n_rows() < 2) {
        return Err(Error::Degenerate(format!(
            "stratum with {} sampled PSUs: within-stratum dispersion undefined",
            s.rows.n_rows()
        )));
    }
    let totals = stratified_totals(strata, map);
    let estimate = estimand.evaluate(&totals)?;
    let mut variance = 0.0;
    let mut linearized = Vec::with_capacity(strata.len());
    for s in strata {
        let e = linearize(estimand, &totals, &s.rows, map)?;
        let big_n = s.population_size as f64;
        variance += big_n * big_n / e.len() as f64 * crate::stats::sample_variance(&e).unwrap();
        linearized.push(e);
    }
    Ok(StratifiedLinearization {
        estimate,
        totals,
        linearized,
        variance,
    })
}

/// As [`linearized_values_mapped`] with rows laid out as `estimand.columns()`.
/// For a proportion this gives `E_i = (Y_ic - p_hat N_i) / N_hat`.
pub fn linearized_values(
    strata: &[StratumSample],
    estimand: &SmoothEstimand,
) -> Result<StratifiedLinearization> {
    let map: Vec<usize> = (0..estimand.columns().len()).collect();
    linearized_values_mapped(strata, estimand, &map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `[theta_hat +- u_{1-alpha} sqrt(v)]`.
pub fn normal_ci(estimate: f64, v: f64, alpha: f64) -> Result<Interval> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::Degenerate(format!("negative variance estimate {v}")));
    }
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 0.5], got {alpha}")));
    }
    let half = normal_quantile(1.0 - alpha) * v.sqrt();
    Ok(Interval {
        lower: estimate - half,
        upper: estimate + half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn exact(i: usize, y: f64) -> PsuEstimate {
        PsuEstimate {
            psu_index: i,
            y_hat: vec![y],
            v_hat: Some(vec![0.0]),
        }
    }

    fn si_draw(n_pop: usize, order: Vec<usize>) -> FirstStageDraw {
        FirstStageDraw {
            design: DesignSpec::Si { n: order.len() },
            population_size: n_pop,
            order,
            multiplicity: None,
            stream_tag: None,
        }
    }

    #[test]
    fn theoretical_variances_small_frame() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let v = [0.0; 5];
        assert_relative_eq!(theoretical_variance(&y, &v, &DesignSpec::Si { n: 2 }).unwrap(), 18.75);
        assert_relative_eq!(theoretical_variance(&y, &v, &DesignSpec::Sir { n: 2 }).unwrap(), 25.0);
        assert_relative_eq!(
            theoretical_variance(&y, &v, &DesignSpec::Be { expected_n: 2 }).unwrap(),
            82.5
        );
        assert!(theoretical_variance(&y, &v, &DesignSpec::Systematic { n: 2 }).is_err());
    }

    #[test]
    fn si_enumeration_unbiased() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (mut m, mut m2, mut mv) = (0.0, 0.0, 0.0);
        let mut count = 0.0;
        for a in 0..5 {
            for b in a + 1..5 {
                let draw = si_draw(5, vec![a, b]);
                let est = [exact(a, y[a]), exact(b, y[b])];
                let t = ht_total_si(&draw, &est, 0).unwrap();
                m += t.y_hat;
                m2 += t.y_hat * t.y_hat;
                mv += variance_estimate(&t, &est, 0, VarianceMethod::Unbiased).unwrap();
                count += 1.0;
            }
        }
        let mean = m / count;
        assert_relative_eq!(mean, 15.0, max_relative = 1e-12);
        assert_relative_eq!(m2 / count - mean * mean, 18.75, max_relative = 1e-10);
        assert_relative_eq!(mv / count, 18.75, max_relative = 1e-10);
    }

    #[test]
    fn wr_dominates_simplified_by_fpc() {
        let draw = si_draw(10, vec![3, 1, 7]);
        let est = [exact(3, 2.0), exact(1, 9.0), exact(7, 4.0)];
        let t = ht_total_si(&draw, &est, 0).unwrap();
        let simp = variance_estimate(&t, &est, 0, VarianceMethod::Simplified).unwrap();
        let wr = variance_estimate(&t, &est, 0, VarianceMethod::WithReplacement).unwrap();
        assert_relative_eq!(wr * (1.0 - 0.3), simp, max_relative = 1e-14);
    }

    #[test]
    fn empty_be_sample() {
        let draw = FirstStageDraw {
            design: DesignSpec::Be { expected_n: 2 },
            population_size: 5,
            order: vec![],
            multiplicity: None,
            stream_tag: None,
        };
        let t = ht_total_be(&draw, &[], 0).unwrap();
        assert_eq!(t.y_hat, 0.0);
        assert_eq!(variance_estimate(&t, &[], 0, VarianceMethod::Bernoulli).unwrap(), 0.0);
    }

    #[test]
    fn missing_v_hat_is_an_error() {
        let draw = si_draw(5, vec![0, 1]);
        let est = [
            PsuEstimate { psu_index: 0, y_hat: vec![1.0], v_hat: None },
            PsuEstimate { psu_index: 1, y_hat: vec![2.0], v_hat: None },
        ];
        let t = ht_total_si(&draw, &est, 0).unwrap();
        assert!(matches!(
            variance_estimate(&t, &est, 0, VarianceMethod::Unbiased),
            Err(Error::MissingVarianceEstimates(_))
        ));
        assert!(variance_estimate(&t, &est, 0, VarianceMethod::Bernoulli).is_err());
    }

    #[test]
    fn misaligned_estimates_rejected() {
        let draw = si_draw(5, vec![0, 1]);
        assert!(ht_total_si(&draw, &[exact(0, 1.0)], 0).is_err());
        assert!(ht_total_si(&draw, &[exact(1, 1.0), exact(0, 1.0)], 0).is_err());
    }

    #[test]
    fn systematic_variance_by_hand() {
        // N_i = 4, n0 = 2: classes w = 0..3 give {0,2},{0,2},{1,3},{1,3}
        let psu = PrimaryUnit::new(1, None, vec![1, 2, 3, 4], vec![1.0, 2.0, 3.0, 10.0], 1).unwrap();
        let v = second_stage_variance(&psu, &Column::Var { var: 0 }, SecondStage::Systematic { n0: 2 });
        // estimates 8 and 24, total 16
        assert_relative_eq!(v, 64.0);
        let v_si = second_stage_variance(&psu, &Column::Var { var: 0 }, SecondStage::Si { n0: 2 });
        let s2 = crate::stats::sample_variance(&[1.0, 2.0, 3.0, 10.0]).unwrap();
        assert_relative_eq!(v_si, 16.0 / 2.0 * 0.5 * s2);
    }

    #[test]
    fn plugin_trivial_values() {
        let ratio = SmoothEstimand::Ratio { num: 0, den: 0 };
        assert_eq!(ratio.evaluate(&[3.5, 3.5]).unwrap(), 1.0);
        let corr = SmoothEstimand::Correlation { a: 0, b: 0 };
        let t = [4.0, 10.0, 10.0, 30.0, 30.0, 30.0];
        assert_relative_eq!(corr.evaluate(&t).unwrap(), 1.0, max_relative = 1e-14);
        assert!(ratio.evaluate(&[1.0, 0.0]).is_err());
        assert!(corr.evaluate(&[4.0, 8.0, 8.0, 16.0, 16.0, 16.0]).is_err());
    }

    #[test]
    fn normal_interval() {
        let ci = normal_ci(0.0, 1.0, 0.025).unwrap();
        assert_relative_eq!(ci.upper, 1.959963984540054, max_relative = 1e-8);
        assert_relative_eq!(ci.lower, -1.959963984540054, max_relative = 1e-8);
        assert_eq!(normal_ci(5.0, 0.0, 0.025).unwrap().width(), 0.0);
        assert_eq!(normal_ci(5.0, 4.0, 0.5).unwrap().width(), 0.0);
        assert!(normal_ci(0.0, -1.0, 0.025).is_err());
    }

    #[test]
    fn layout_deduplicates() {
        let es = [
            SmoothEstimand::Total { var: 0 },
            SmoothEstimand::Ratio { num: 0, den: 1 },
            SmoothEstimand::Correlation { a: 0, b: 1 },
        ];
        let l = ColumnLayout::new(&es);
        assert_eq!(l.columns.len(), 6);
        assert_eq!(l.map(0), &[0]);
        assert_eq!(l.map(1), &[0, 1]);
        assert_eq!(l.map(2)[1..3], [0, 1]);
    }

    fn estimand_strategy() -> impl Strategy<Value = (SmoothEstimand, Vec<f64>)> {
        prop_oneof![
            (1.0..50.0f64, 1.0..50.0f64)
                .prop_map(|(a, b)| (SmoothEstimand::Ratio { num: 0, den: 1 }, vec![a, b])),
            (0.5..50.0f64, 60.0..100.0f64)
                .prop_map(|(a, n)| (SmoothEstimand::Proportion { var: 0, code: 1.0 }, vec![a, n])),
            (20.0..60.0f64, -1.0..1.0f64, -1.0..1.0f64, 1.0..2.0f64, 1.0..2.0f64, -0.9..0.9f64)
                .prop_map(|(n, ma, mb, va, vb, rho)| {
                    let cov = rho * (va * vb).sqrt();
                    let t = vec![
                        n,
                        n * ma,
                        n * mb,
                        n * (va + ma * ma),
                        n * (vb + mb * mb),
                        n * (cov + ma * mb),
                    ];
                    (SmoothEstimand::Correlation { a: 0, b: 1 }, t)
                }),
        ]
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences((e, t) in estimand_strategy()) {
            let g = e.gradient(&t).unwrap();
            for c in 0..t.len() {
                let h = 1e-6 * t[c].abs().max(1.0);
                let mut up = t.clone();
                up[c] += h;
                let mut down = t.clone();
                down[c] -= h;
                let fd = (e.evaluate(&up).unwrap() - e.evaluate(&down).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[c]).abs() <= 1e-5 * (1.0 + g[c].abs()), "c={} fd={} g={}", c, fd, g[c]);
            }
        }

        #[test]
        fn v_wr_never_below_v_simp(ys in proptest::collection::vec(-100.0..100.0f64, 2..12), extra in 0usize..20) {
            let n = ys.len();
            let big_n = n + extra + 1;
            let rows = DrawMatrix::from_column(&ys);
            let a = analyze_si(&rows, big_n, &SmoothEstimand::Total { var: 0 }, &[0]).unwrap();
            prop_assert!(a.v_wr >= a.v_simp);
            prop_assert!(a.v_simp >= 0.0);
        }

        #[test]
        fn ratio_invariant_under_scaling(a in 1.0..1e3f64, b in 1.0..1e3f64) {
            let e = SmoothEstimand::Ratio { num: 0, den: 1 };
            let r = e.evaluate(&[a, b]).unwrap();
            let scaled = e.evaluate(&[7.0 * a, 7.0 * b]).unwrap();
            prop_assert!((r - scaled).abs() <= 1e-14 * r.abs());
        }
    }
}
