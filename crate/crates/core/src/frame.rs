//! Finite populations of PSUs and SSUs.
//!
//! A [`Frame`] is immutable once built. Values are stored row-major per PSU
//! (`N_i x q`), which keeps second-stage draws cache friendly.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{Stream, RNG_ALGORITHM};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryUnit {
    pub psu_id: i64,
    pub stratum: Option<String>,
    ssu_ids: Vec<i64>,
    values: Vec<f64>,
    q: usize,
}

impl PrimaryUnit {
    pub fn new(
        psu_id: i64,
        stratum: Option<String>,
        ssu_ids: Vec<i64>,
        values: Vec<f64>,
        q: usize,
    ) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidFrame("at least one y variable is required".into()));
        }
        if ssu_ids.is_empty() {
            return Err(Error::InvalidFrame(format!("psu {psu_id} has no ssus")));
        }
        if values.len() != ssu_ids.len() * q {
            return Err(Error::SizeMismatch {
                expected: ssu_ids.len() * q,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame(format!(
                "psu {psu_id}: non-finite value for ssu {}",
                ssu_ids[bad / q]
            )));
        }
        let mut seen = HashSet::with_capacity(ssu_ids.len());
        for &id in &ssu_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateUnit { psu_id, ssu_id: id });
            }
        }
        Ok(Self {
            psu_id,
            stratum,
            ssu_ids,
            values,
            q,
        })
    }

    /// `N_i`, the number of SSUs.
    pub fn size(&self) -> usize {
        self.ssu_ids.len()
    }

    pub fn ssu_ids(&self) -> &[i64] {
        &self.ssu_ids
    }

    /// The y-vector of the `k`-th SSU.
    pub fn y(&self, k: usize) -> &[f64] {
        &self.values[k * self.q..(k + 1) * self.q]
    }

    pub fn subtotal(&self, column: &Column) -> f64 {
        (0..self.size()).map(|k| column.value(self.y(k))).sum()
    }
}

/// A derived SSU-level variable whose PSU subtotals feed the estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Column {
    /// `y_h`.
    Var { var: usize },
    /// `y_h^2`.
    Square { var: usize },
    /// `y_a * y_b`.
    Product { a: usize, b: usize },
    /// The constant 1, so that the subtotal is `N_i`.
    Count,
    /// `1(y_h = code)`.
    Indicator { var: usize, code: f64 },
}

impl Column {
    #[inline]
    pub fn value(&self, y: &[f64]) -> f64 {
        match *self {
            Column::Var { var } => y[var],
            Column::Square { var } => y[var] * y[var],
            Column::Product { a, b } => y[a] * y[b],
            Column::Count => 1.0,
            Column::Indicator { var, code } => {
                if y[var] == code {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match *self {
            Column::Var { var } | Column::Square { var } | Column::Indicator { var, .. } => {
                Some(var)
            }
            Column::Product { a, b } => Some(a.max(b)),
            Column::Count => None,
        }
    }

    /// Short name with 1-based variables: `y1`, `y1^2`, `y1*y2`, `count`, `1(y1=2)`.
    pub fn label(&self) -> String {
        match *self {
            Column::Var { var } => format!("y{}", var + 1),
            Column::Square { var } => format!("y{}^2", var + 1),
            Column::Product { a, b } => format!("y{}*y{}", a + 1, b + 1),
            Column::Count => "count".into(),
            Column::Indicator { var, code } => format!("1(y{}={code})", var + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    /// Indices into [`Frame::psus`].
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    psus: Vec<PrimaryUnit>,
    var_names: Vec<String>,
    strata: Option<Vec<Stratum>>,
}

impl Frame {
    /// Builds a frame. Strata are taken from the PSU labels: either every PSU
    /// carries one or none does.
    pub fn new(psus: Vec<PrimaryUnit>, var_names: Vec<String>) -> Result<Self> {
        if psus.is_empty() {
            return Err(Error::EmptyFrame);
        }
        let q = var_names.len();
        let mut ids = HashSet::with_capacity(psus.len());
        for p in &psus {
            if p.q != q {
                return Err(Error::InvalidFrame(format!(
                    "psu {} has {} variables, frame has {q}",
                    p.psu_id, p.q
                )));
            }
            if !ids.insert(p.psu_id) {
                return Err(Error::InvalidFrame(format!("duplicate psu id {}", p.psu_id)));
            }
        }
        let labelled = psus.iter().filter(|p| p.stratum.is_some()).count();
        let strata = if labelled == 0 {
            None
        } else if labelled == psus.len() {
            let mut index: HashMap<&str, usize> = HashMap::new();
            let mut strata: Vec<Stratum> = Vec::new();
            for (i, p) in psus.iter().enumerate() {
                let label = p.stratum.as_deref().unwrap();
                let slot = *index.entry(label).or_insert_with(|| {
                    strata.push(Stratum {
                        label: label.to_string(),
                        members: Vec::new(),
                    });
                    strata.len() - 1
                });
                strata[slot].members.push(i);
            }
            Some(strata)
        } else {
            return Err(Error::InvalidFrame(
                "stratum labels must be given for all PSUs or none".into(),
            ));
        };
        Ok(Self {
            psus,
            var_names,
            strata,
        })
    }

    pub fn psus(&self) -> &[PrimaryUnit] {
        &self.psus
    }

    pub fn psu(&self, i: usize) -> &PrimaryUnit {
        &self.psus[i]
    }

    /// `N_I`.
    pub fn n_psu(&self) -> usize {
        self.psus.len()
    }

    /// `N = sum_i N_i`.
    pub fn n_ssu(&self) -> usize {
        self.psus.iter().map(PrimaryUnit::size).sum()
    }

    /// `q`, the number of study variables.
    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn strata(&self) -> Option<&[Stratum]> {
        self.strata.as_deref()
    }

    pub fn subtotals(&self, column: &Column) -> Vec<f64> {
        self.psus.iter().map(|p| p.subtotal(column)).collect()
    }

    pub fn total(&self, column: &Column) -> f64 {
        self.subtotals(column).iter().sum()
    }

    /// Reassigns PSUs to strata. `labels[i]` is the stratum of PSU `i`.
    pub fn with_strata(self, labels: &[String]) -> Result<Self> {
        if labels.len() != self.psus.len() {
            return Err(Error::SizeMismatch {
                expected: self.psus.len(),
                got: labels.len(),
            });
        }
        let psus = self
            .psus
            .into_iter()
            .zip(labels)
            .map(|(mut p, l)| {
                p.stratum = Some(l.clone());
                p
            })
            .collect();
        Frame::new(psus, self.var_names)
    }

    /// Replaces variable `var` by a category code computed from its value.
    pub fn map_var(self, var: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if var >= self.n_vars() {
            return Err(Error::InvalidConfig(format!("variable index {var} out of range")));
        }
        let psus = self
            .psus
            .into_iter()
            .map(|mut p| {
                let q = p.q;
                for k in 0..p.size() {
                    p.values[k * q + var] = f(p.values[k * q + var]);
                }
                p
            })
            .collect();
        Frame::new(psus, self.var_names)
    }
}

/// Exact population quantities over the PSU subtotals of one variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    /// `Y`.
    pub total: f64,
    /// `mu_Y = Y / N_I`.
    pub mean_subtotal: f64,
    /// `S^2_{Y,U_I}` with the `N_I - 1` divisor.
    pub dispersion: f64,
}

pub fn population_summary(frame: &Frame, var_index: usize) -> Result<PopulationSummary> {
    if var_index >= frame.n_vars() {
        return Err(Error::InvalidConfig(format!(
            "variable index {var_index} out of range (q = {})",
            frame.n_vars()
        )));
    }
    summarize_subtotals(&frame.subtotals(&Column::Var { var: var_index }))
}

pub fn summarize_subtotals(subtotals: &[f64]) -> Result<PopulationSummary> {
    match subtotals.len() {
        0 => Err(Error::EmptyFrame),
        1 => Err(Error::Degenerate(
            "dispersion of subtotals needs at least two PSUs".into(),
        )),
        n => {
            let total: f64 = subtotals.iter().sum();
            let mean_subtotal = total / n as f64;
            let ss: f64 = subtotals
                .iter()
                .map(|y| (y - mean_subtotal) * (y - mean_subtotal))
                .sum();
            Ok(PopulationSummary {
                total,
                mean_subtotal,
                dispersion: ss / (n - 1) as f64,
            })
        }
    }
}

/// ANOVA estimator of the intra-cluster correlation of variable `var`.
pub fn intra_cluster_correlation(frame: &Frame, var: usize) -> Result<f64> {
    let k = frame.n_psu();
    let n = frame.n_ssu();
    if k < 2 || n <= k {
        return Err(Error::Degenerate("ICC needs two PSUs and some replication".into()));
    }
    let col = Column::Var { var };
    let grand = frame.total(&col) / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    let mut sum_sq_sizes = 0.0;
    for p in frame.psus() {
        let ni = p.size() as f64;
        let mi = p.subtotal(&col) / ni;
        ssb += ni * (mi - grand) * (mi - grand);
        ssw += (0..p.size()).map(|j| (p.y(j)[var] - mi).powi(2)).sum::<f64>();
        sum_sq_sizes += ni * ni;
    }
    let msb = ssb / (k - 1) as f64;
    let msw = ssw / (n - k) as f64;
    let n0 = (n as f64 - sum_sq_sizes / n as f64) / (k - 1) as f64;
    Ok((msb - msw) / (msb + (n0 - 1.0) * msw))
}

/// Pearson correlation between two variables over all SSUs.
pub fn pearson_correlation(frame: &Frame, a: usize, b: usize) -> f64 {
    let n = frame.n_ssu() as f64;
    let ma = frame.total(&Column::Var { var: a }) / n;
    let mb = frame.total(&Column::Var { var: b }) / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for p in frame.psus() {
        for k in 0..p.size() {
            let y = p.y(k);
            let (da, db) = (y[a] - ma, y[b] - mb);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------------------
// Synthetic two-level Gaussian populations
// ---------------------------------------------------------------------------

/// Parameters of the two-level Gaussian model for one variable pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `rho_h`; the within-PSU noise scale is `sqrt((1 - rho_h) / rho_h)`.
    pub rho_h: f64,
    /// Weight of the noise shared by the two variables of a pair.
    pub alpha: f64,
}

impl Calibration {
    pub fn noise_scale(&self) -> f64 {
        ((1.0 - self.rho_h) / self.rho_h).sqrt()
    }

    /// Superpopulation ICC implied by the parameters.
    pub fn implied_icc(&self) -> f64 {
        let c2 = (1.0 - self.rho_h) / self.rho_h;
        1.0 / (1.0 + c2 * (self.alpha * self.alpha + 1.0))
    }

    /// Superpopulation correlation between the two variables of the pair.
    pub fn implied_pair_correlation(&self) -> f64 {
        let c2 = (1.0 - self.rho_h) / self.rho_h;
        let a2 = self.alpha * self.alpha;
        (1.0 + c2 * a2) / (1.0 + c2 * (a2 + 1.0))
    }
}

/// Solves the model's moment equations so that the ICC equals `icc_target`
/// and the within-pair correlation equals `pair_corr_target`.
pub fn calibrate_model(icc_target: f64, pair_corr_target: f64) -> Result<Calibration> {
    let in_unit = |x: f64| x > 0.0 && x < 1.0;
    if !in_unit(icc_target) || !in_unit(pair_corr_target) {
        return Err(Error::InvalidConfig(format!(
            "calibration targets must lie in (0, 1): icc {icc_target}, pair correlation {pair_corr_target}"
        )));
    }
    if icc_target >= pair_corr_target {
        return Err(Error::InfeasibleCalibration {
            icc: icc_target,
            pair_corr: pair_corr_target,
        });
    }
    // (1 - rho_h) / rho_h = (1 - r) / icc
    let c2 = (1.0 - pair_corr_target) / icc_target;
    Ok(Calibration {
        rho_h: 1.0 / (1.0 + c2),
        alpha: ((pair_corr_target - icc_target) / (1.0 - pair_corr_target)).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// `N_I`.
    pub n_psu: usize,
    /// Target mean number of SSUs per PSU.
    pub mean_size: f64,
    /// Target coefficient of variation of the PSU sizes.
    pub size_cv: f64,
    pub lambda: f64,
    pub sigma: f64,
    /// One ICC target per variable pair.
    pub icc_targets: Vec<f64>,
    pub pair_corr_target: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Preset: 2000 PSUs of mean size 40
    /// with size CV 0.06, `lambda = 20`, `sigma = 2`, ICC targets 0.1/0.2/0.3
    /// and pair correlation 0.6.
    pub fn population3(seed: u64) -> Self {
        Self {
            n_psu: 2000,
            mean_size: 40.0,
            size_cv: 0.06,
            lambda: 20.0,
            sigma: 2.0,
            icc_targets: vec![0.1, 0.2, 0.3],
            pair_corr_target: 0.6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<Vec<Calibration>> {
        if self.n_psu == 0 {
            return Err(Error::InvalidConfig("n_psu must be positive".into()));
        }
        if !(self.mean_size >= 2.0) || !self.mean_size.is_finite() {
            return Err(Error::InvalidConfig("mean_size must be at least 2".into()));
        }
        if !(self.size_cv >= 0.0) || !(self.sigma >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(
                "size_cv and sigma must be nonnegative, lambda finite".into(),
            ));
        }
        if self.icc_targets.is_empty() {
            return Err(Error::InvalidConfig("at least one ICC target is required".into()));
        }
        self.icc_targets
            .iter()
            .map(|&icc| calibrate_model(icc, self.pair_corr_target))
            .collect()
    }
}

/// Draws a population from the two-level Gaussian model.
///
/// PSU `i` gets `lambda_i = lambda + sigma v_i`; every SSU of it gets, for
/// each pair `h`, independent `(eps, eta, nu)` and
/// `y_{2h-1} = lambda_i + c_h sigma (alpha eps + eta)`,
/// `y_{2h}   = lambda_i + c_h sigma (alpha eps + nu)`.
/// Sizes are `round(mean_size (1 + size_cv g_i))` clamped to at least 2.
pub fn generate_population(cfg: &SyntheticConfig) -> Result<Frame> {
    let calibrations = cfg.validate()?;
    let pairs = calibrations.len();
    let q = 2 * pairs;
    let root = Stream::new(cfg.seed);

    let mut size_rng = root.derive("psu-sizes", 0);
    let sizes: Vec<usize> = (0..cfg.n_psu)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut size_rng);
            (cfg.mean_size * (1.0 + cfg.size_cv * g)).round().max(2.0) as usize
        })
        .collect();

    let mut psus = Vec::with_capacity(cfg.n_psu);
    for (i, &size) in sizes.iter().enumerate() {
        let mut rng = root.derive("psu", i as u64);
        let v: f64 = StandardNormal.sample(&mut rng);
        let lambda_i = cfg.lambda + cfg.sigma * v;
        let mut values = Vec::with_capacity(size * q);
        for _ in 0..size {
            for cal in &calibrations {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let eta: f64 = StandardNormal.sample(&mut rng);
                let nu: f64 = StandardNormal.sample(&mut rng);
                let scale = cal.noise_scale() * cfg.sigma;
                values.push(lambda_i + scale * (cal.alpha * eps + eta));
                values.push(lambda_i + scale * (cal.alpha * eps + nu));
            }
        }
        let ssu_ids = (1..=size as i64).collect();
        psus.push(PrimaryUnit::new(i as i64 + 1, None, ssu_ids, values, q)?);
    }
    let names = (1..=q).map(|j| format!("y{j}")).collect();
    Frame::new(psus, names)
}

/// A stratified frame whose first variable is categorical: PSUs are drawn
/// from `model` (with `n_psu` replaced by the sum of `stratum_sizes`),
/// assigned to strata in contiguous blocks, and `y1` is replaced by
/// `1 + #{cuts below y1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratifiedConfig {
    pub model: SyntheticConfig,
    pub stratum_sizes: Vec<usize>,
    pub cuts: Vec<f64>,
}

impl StratifiedConfig {
    pub fn resolved_model(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_psu: self.stratum_sizes.iter().sum(),
            ..self.model.clone()
        }
    }
}

pub fn generate_stratified_population(cfg: &StratifiedConfig) -> Result<Frame> {
    if cfg.stratum_sizes.is_empty() || cfg.stratum_sizes.contains(&0) {
        return Err(Error::InvalidConfig("stratum sizes must be positive".into()));
    }
    if cfg.cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig("cuts must be strictly increasing".into()));
    }
    let width = cfg.stratum_sizes.len().to_string().len();
    let labels: Vec<String> = cfg
        .stratum_sizes
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| std::iter::repeat_n(format!("s{:0width$}", l + 1), n))
        .collect();
    let cuts = cfg.cuts.clone();
    generate_population(&cfg.resolved_model())?
        .map_var(0, move |y| 1.0 + cuts.iter().filter(|&&c| c < y).count() as f64)?
        .with_strata(&labels)
}

/// Sidecar describing how a synthetic frame was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub config: SyntheticConfig,
    pub calibrations: Vec<Calibration>,
    pub rng_algorithm: String,
    pub n_psu: usize,
    pub n_ssu: usize,
}

impl GenerationMetadata {
    pub fn new(cfg: &SyntheticConfig, frame: &Frame) -> Result<Self> {
        Ok(Self {
            config: cfg.clone(),
            calibrations: cfg.validate()?,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            n_psu: frame.n_psu(),
            n_ssu: frame.n_ssu(),
        })
    }
}

// ---------------------------------------------------------------------------
// Delimited text I/O
// ---------------------------------------------------------------------------

/// Column mapping for [`ingest_frame`]. y-columns are every header made of
/// `y_prefix` followed by digits, ordered by that number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSchema {
    pub psu_column: String,
    pub ssu_column: String,
    pub stratum_column: Option<String>,
    pub y_prefix: String,
}

impl Default for FrameSchema {
    fn default() -> Self {
        Self {
            psu_column: "psu_id".into(),
            ssu_column: "ssu_id".into(),
            stratum_column: Some("stratum".into()),
            y_prefix: "y".into(),
        }
    }
}

fn delimiter_for(path: &Path, first_line: &str) -> u8 {
    let by_ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("tsv"))
        .unwrap_or(false);
    if by_ext || (first_line.contains('\t') && !first_line.contains(',')) {
        b'\t'
    } else {
        b','
    }
}

/// Reads a delimited file into a frame. PSUs are grouped by stratum and then
/// by PSU id in order of first appearance; SSUs keep file order.
pub fn ingest_frame(path: &Path, schema: &FrameSchema) -> Result<Frame> {
    let text = std::fs::read_to_string(path)?;
    let first_line = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, first_line))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let psu_col = find(&schema.psu_column).ok_or_else(|| Error::MalformedRow {
        line: 1,
        reason: format!("missing column `{}`", schema.psu_column),
    })?;
    let ssu_col = find(&schema.ssu_column).ok_or_else(|| Error::MalformedRow {
        line: 1,
        reason: format!("missing column `{}`", schema.ssu_column),
    })?;
    let stratum_col = schema.stratum_column.as_deref().and_then(find);
    let mut y_cols: Vec<(u32, usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let rest = h.strip_prefix(schema.y_prefix.as_str())?;
            let num: u32 = rest.parse().ok()?;
            Some((num, i, h.to_string()))
        })
        .collect();
    y_cols.sort();
    if y_cols.is_empty() {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("no `{}<k>` columns", schema.y_prefix),
        });
    }
    let q = y_cols.len();

    struct Group {
        psu_id: i64,
        stratum: Option<String>,
        ssu_ids: Vec<i64>,
        values: Vec<f64>,
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut by_psu: HashMap<i64, usize> = HashMap::new();
    let mut stratum_rank: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            let found = record.len().saturating_sub(headers.len() - q);
            return Err(Error::RaggedRow {
                line,
                expected: q,
                found,
            });
        }
        let int_field = |col: usize, what: &str| -> Result<i64> {
            record[col].parse::<i64>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("{what} `{}` is not an integer", &record[col]),
            })
        };
        let psu_id = int_field(psu_col, "psu id")?;
        let ssu_id = int_field(ssu_col, "ssu id")?;
        let stratum = stratum_col.map(|c| record[c].to_string());
        let slot = match by_psu.get(&psu_id) {
            Some(&g) => {
                if groups[g].stratum != stratum {
                    return Err(Error::MalformedRow {
                        line,
                        reason: format!("psu {psu_id} appears in more than one stratum"),
                    });
                }
                g
            }
            None => {
                if let Some(s) = &stratum {
                    let next = stratum_rank.len();
                    stratum_rank.entry(s.clone()).or_insert(next);
                }
                groups.push(Group {
                    psu_id,
                    stratum,
                    ssu_ids: Vec::new(),
                    values: Vec::new(),
                });
                by_psu.insert(psu_id, groups.len() - 1);
                groups.len() - 1
            }
        };
        let group = &mut groups[slot];
        if group.ssu_ids.contains(&ssu_id) {
            return Err(Error::DuplicateUnit { psu_id, ssu_id });
        }
        group.ssu_ids.push(ssu_id);
        for (_, col, name) in &y_cols {
            let v: f64 = record[*col].parse().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("{name} `{}` is not a number", &record[*col]),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    line,
                    reason: format!("{name} is not finite"),
                });
            }
            group.values.push(v);
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyFrame);
    }
    // stable: file order is kept within a stratum
    groups.sort_by_key(|g| g.stratum.as_ref().map(|s| stratum_rank[s]).unwrap_or(0));
    let psus = groups
        .into_iter()
        .map(|g| PrimaryUnit::new(g.psu_id, g.stratum, g.ssu_ids, g.values, q))
        .collect::<Result<Vec<_>>>()?;
    Frame::new(psus, y_cols.into_iter().map(|(_, _, n)| n).collect())
}

/// Writes a frame in the format read by [`ingest_frame`]. Values use the
/// shortest representation that round-trips exactly.
pub fn write_frame<W: std::io::Write>(frame: &Frame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let stratified = frame.strata().is_some();
    let mut header: Vec<String> = Vec::new();
    if stratified {
        header.push("stratum".into());
    }
    header.push("psu_id".into());
    header.push("ssu_id".into());
    header.extend(frame.var_names().iter().cloned());
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for p in frame.psus() {
        for (k, ssu) in p.ssu_ids().iter().enumerate() {
            row.clear();
            if stratified {
                row.push(p.stratum.clone().unwrap_or_default());
            }
            row.push(p.psu_id.to_string());
            row.push(ssu.to_string());
            row.extend(p.y(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
