use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use survey_coupling::bootstrap::{bootstrap_variance, ci_set, resample_strata, BootstrapConfig};
use survey_coupling::coupling::{verify_decay, verify_hajek_bound, verify_sir_si_bound, DecayTable};
use survey_coupling::estimators::{population_value, ColumnLayout, SmoothEstimand, VarianceMethod};
use survey_coupling::frame::{
    generate_population, generate_stratified_population, intra_cluster_correlation,
    pearson_correlation, population_summary, write_frame, Frame, GenerationMetadata,
};
use survey_coupling::montecarlo::{
    analyze_sample, approximate_true_variance, check_first_stage, draw_two_stage, run_scenario,
    scaling_study, study_families, write_study_long, write_study_table, FirstStage, MCReport,
    TrueVariance, TwoStageSample,
};
use survey_coupling::rng::{Stream, RNG_ALGORITHM};

use crate::config::{
    BootstrapRunConfig, BoundKind, Command, EstimateConfig, GenPopConfig, McConfig,
    PopulationModel, RunConfig, VerifyConfig,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Output directory whose files are written via a temp file and a rename.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write_with(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let ctx = |what: &str| format!("{what} {}", self.dir.join(name).display());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| CliError::io(ctx("creating temp file for"), e))?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush().map_err(|e| CliError::io(ctx("writing"), e))?;
        }
        tmp.persist(self.dir.join(name))
            .map_err(|e| CliError::io(ctx("renaming into"), e.error))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)
                .map_err(|e| CliError::io("serializing json", e.into()))?;
            w.write_all(b"\n").map_err(|e| CliError::io("writing json", e))
        })
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        self.write_with(name, |w| {
            let mut c = csv::Writer::from_writer(w);
            for r in rows {
                c.serialize(r).map_err(|e| CliError::io("writing csv", e.into()))?;
            }
            c.flush().map_err(|e| CliError::io("writing csv", e))
        })
    }

    pub fn with_core(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut dyn Write) -> survey_coupling::Result<()>,
    ) -> Result<()> {
        self.write_with(name, |w| fill(w).map_err(|e| CliError::core(format!("writing {name}"), e)))
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

fn core<T>(context: &str, r: survey_coupling::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::core(context, e))
}

/// Runs a validated config and returns the data files written (the manifest
/// comes last and is not listed).
pub fn execute(cfg: &RunConfig) -> Result<Vec<String>> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut out = Outputs::new(&cfg.out)?;
    let run = |out: &mut Outputs| match &cfg.command {
        Command::GenPop(c) => gen_pop(c, out),
        Command::Estimate(c) => estimate(c, out),
        Command::Bootstrap(c) => bootstrap(c, out),
        Command::Mc(c) => mc(c, out),
        Command::Verify(c) => verify(c, out),
    };
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config("threads", &e.to_string()))?;
            pool.install(|| run(&mut out))?;
        }
        None => run(&mut out)?,
    }
    let files = out.files().to_vec();
    let unix_ms = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let manifest = json!({
        "command": cfg.kind().name(),
        "version": env!("CARGO_PKG_VERSION"),
        "rng_algorithm": RNG_ALGORITHM,
        "seed": cfg.seed(),
        "threads": cfg.threads.unwrap_or_else(rayon::current_num_threads),
        "config": cfg,
        "outputs": files,
        "started_unix_ms": unix_ms(started),
        "finished_unix_ms": unix_ms(SystemTime::now()),
        "wall_seconds": clock.elapsed().as_secs_f64(),
    });
    out.json("manifest.json", &manifest)?;
    Ok(files)
}

#[derive(Serialize)]
struct VariableSummary {
    name: String,
    total: f64,
    mean_subtotal: f64,
    dispersion: f64,
    icc: f64,
}

fn frame_description(frame: &Frame) -> Result<serde_json::Value> {
    let variables = (0..frame.n_vars())
        .map(|v| {
            let s = core("summarizing population", population_summary(frame, v))?;
            Ok(VariableSummary {
                name: frame.var_names()[v].clone(),
                total: s.total,
                mean_subtotal: s.mean_subtotal,
                dispersion: s.dispersion,
                icc: core("computing ICC", intra_cluster_correlation(frame, v))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = (0..frame.n_vars() / 2)
        .map(|h| {
            json!({
                "a": frame.var_names()[2 * h],
                "b": frame.var_names()[2 * h + 1],
                "correlation": pearson_correlation(frame, 2 * h, 2 * h + 1),
            })
        })
        .collect();
    let strata = frame.strata().map(|s| {
        s.iter()
            .map(|s| json!({ "label": s.label, "n_psu": s.members.len() }))
            .collect::<Vec<_>>()
    });
    Ok(json!({
        "n_psu": frame.n_psu(),
        "n_ssu": frame.n_ssu(),
        "variables": variables,
        "pair_correlations": pairs,
        "strata": strata,
    }))
}

fn gen_pop(c: &GenPopConfig, out: &mut Outputs) -> Result<()> {
    let (frame, model) = match &c.population {
        PopulationModel::Synthetic(s) => (generate_population(s), s.clone()),
        PopulationModel::Stratified(s) => (generate_stratified_population(s), s.resolved_model()),
    };
    let frame = core("generating population", frame)?;
    out.with_core("frame.csv", |w| write_frame(&frame, w))?;
    let meta = core("describing population", GenerationMetadata::new(&model, &frame))?;
    out.json(
        "population.json",
        &json!({ "generation": meta, "summary": frame_description(&frame)? }),
    )
}

fn check_estimands(frame: &Frame, estimands: &[SmoothEstimand]) -> Result<()> {
    match estimands.iter().find(|e| e.max_var() >= frame.n_vars()) {
        Some(e) => Err(CliError::config(
            "estimands",
            &format!("{} refers to a variable the frame does not have", e.label()),
        )),
        None => Ok(()),
    }
}

fn draw(
    frame: &Frame,
    first: &FirstStage,
    stage: survey_coupling::designs::SecondStage,
    layout: &ColumnLayout,
    with_v_hat: bool,
    rng: &mut Stream,
) -> Result<TwoStageSample> {
    core("checking first stage", check_first_stage(frame, first))?;
    core("drawing sample", draw_two_stage(frame, first, stage, &layout.columns, with_v_hat, rng))
}

fn sample_csv(frame: &Frame, sample: &TwoStageSample, layout: &ColumnLayout, out: &mut Outputs) -> Result<()> {
    out.write_with("sample.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec!["stratum".to_string(), "draw".into(), "psu_id".into()];
        header.extend(layout.columns.iter().map(|c| format!("est_{}", c.label())));
        let err = |e: csv::Error| CliError::io("writing sample.csv", e.into());
        c.write_record(&header).map_err(err)?;
        for (l, (psus, s)) in sample.psus.iter().zip(&sample.strata).enumerate() {
            let label = frame.strata().map(|st| st[l].label.clone()).unwrap_or_default();
            for (j, &i) in psus.iter().enumerate() {
                let mut rec = vec![label.clone(), j.to_string(), frame.psu(i).psu_id.to_string()];
                rec.extend(s.rows.row(j).iter().map(|v| v.to_string()));
                c.write_record(&rec).map_err(err)?;
            }
        }
        c.flush().map_err(|e| CliError::io("writing sample.csv", e))
    })
}

fn population_values(frame: &Frame, estimands: &[SmoothEstimand]) -> Result<Vec<serde_json::Value>> {
    estimands
        .iter()
        .map(|e| {
            let v = core("evaluating population value", population_value(frame, e))?;
            Ok(json!({ "estimand": e.label(), "value": v }))
        })
        .collect()
}

fn estimate(c: &EstimateConfig, out: &mut Outputs) -> Result<()> {
    let frame = c.frame.load()?;
    check_estimands(&frame, &c.estimands)?;
    let layout = ColumnLayout::new(&c.estimands);
    let mut rng = Stream::substream(c.seed, "estimate", 0);
    let with_v_hat = c.variance_methods.contains(&VarianceMethod::Unbiased);
    let sample = draw(&frame, &c.first_stage, c.second_stage, &layout, with_v_hat, &mut rng)?;
    let estimates = core(
        "estimating",
        analyze_sample(&sample, &layout, &c.estimands, &c.variance_methods, c.alpha),
    )?;
    sample_csv(&frame, &sample, &layout, out)?;
    out.json(
        "estimate.json",
        &json!({
            "estimates": estimates,
            "population": population_values(&frame, &c.estimands)?,
            "sample_sizes": sample.psus.iter().map(Vec::len).collect::<Vec<_>>(),
            "alpha": c.alpha,
        }),
    )
}

#[derive(Serialize)]
struct ReplicateRow<'a> {
    estimand: &'a str,
    r: usize,
    theta_star: f64,
    se_star: Option<f64>,
}

fn bootstrap(c: &BootstrapRunConfig, out: &mut Outputs) -> Result<()> {
    let frame = c.frame.load()?;
    check_estimands(&frame, &c.estimands)?;
    if c.m.is_some() && !matches!(c.first_stage, FirstStage::Si { .. }) {
        return Err(CliError::config("m", "cannot be set for stratified resampling"));
    }
    let layout = ColumnLayout::new(&c.estimands);
    let mut rng = Stream::substream(c.seed, "sample", 0);
    let sample = draw(&frame, &c.first_stage, c.second_stage, &layout, false, &mut rng)?;
    let base = core(
        "linearizing",
        analyze_sample(&sample, &layout, &c.estimands, &[VarianceMethod::StratWr], c.alpha),
    )?;
    let cfg = BootstrapConfig {
        m: c.m,
        replicates: c.replicates,
        alpha: c.alpha,
        seed: Stream::new(c.seed).derive_seed("bootstrap", 0),
        studentized: c.studentized,
    };
    let sets = core("resampling", resample_strata(&sample.strata, &layout, &c.estimands, &cfg))?;
    let mut report = Vec::new();
    let mut rows = Vec::new();
    let labels: Vec<String> = c.estimands.iter().map(SmoothEstimand::label).collect();
    for ((reps, b), label) in sets.iter().zip(&base).zip(&labels) {
        let cis = core("building intervals", ci_set(reps, b.v_stwr, c.alpha))?;
        report.push(json!({
            "estimand": label,
            "estimate": b.estimate,
            "v_stwr": b.v_stwr,
            "bootstrap_variance": core("bootstrap variance", bootstrap_variance(reps))?,
            "intervals": cis,
        }));
        for (r, t) in reps.theta_star.iter().enumerate() {
            rows.push(ReplicateRow {
                estimand: label,
                r,
                theta_star: *t,
                se_star: reps.se_star.as_ref().map(|s| s[r]),
            });
        }
    }
    sample_csv(&frame, &sample, &layout, out)?;
    out.csv("replicates.csv", &rows)?;
    out.json(
        "bootstrap.json",
        &json!({
            "replicates": c.replicates,
            "m": c.m,
            "alpha": c.alpha,
            "results": report,
        }),
    )
}

#[derive(Serialize)]
struct TruthRow<'a> {
    scenario: &'a str,
    estimand: &'a str,
    theta: f64,
    mean: f64,
    variance: f64,
    runs: usize,
}

fn truth_rows<'a>(scenario: &'a str, truth: &'a [TrueVariance]) -> impl Iterator<Item = TruthRow<'a>> {
    truth.iter().map(move |t| TruthRow {
        scenario,
        estimand: &t.label,
        theta: t.theta,
        mean: t.mean,
        variance: t.variance,
        runs: t.runs,
    })
}

#[derive(Serialize)]
struct DecayCsvRow {
    population_size: usize,
    sample_size: usize,
    m: usize,
    replicates: usize,
    mean_gap: f64,
    mean_gap_se: f64,
    dispersion_gap: f64,
    dispersion_gap_se: f64,
    bootstrap_gap: f64,
    bootstrap_gap_se: f64,
}

fn write_decay(t: &DecayTable, out: &mut Outputs) -> Result<()> {
    let rows: Vec<DecayCsvRow> = t
        .rows
        .iter()
        .map(|r| DecayCsvRow {
            population_size: r.population_size,
            sample_size: r.sample_size,
            m: r.m,
            replicates: r.replicates,
            mean_gap: r.mean_gap.mean,
            mean_gap_se: r.mean_gap.se,
            dispersion_gap: r.dispersion_gap.mean,
            dispersion_gap_se: r.dispersion_gap.se,
            bootstrap_gap: r.bootstrap_gap.mean,
            bootstrap_gap_se: r.bootstrap_gap.se,
        })
        .collect();
    out.csv("decay.csv", &rows)?;
    out.json("decay.json", t)
}

fn mc(c: &McConfig, out: &mut Outputs) -> Result<()> {
    match (&c.population, &c.scenario, &c.study) {
        (Some(p), Some(s), None) => {
            let frame = p.load()?;
            let truth = core("approximating true variance", approximate_true_variance(&frame, s))?;
            let report = core("running scenario", run_scenario(&frame, s, &truth))?;
            out.csv("mc_report.csv", &report.rows)?;
            out.csv("true_variance.csv", &truth_rows(&s.label, &truth).collect::<Vec<_>>())
        }
        (None, None, Some(study)) => {
            let result = core("running study", scaling_study(study))?;
            out.with_core("study_long.csv", |w| write_study_long(&result.rows, w))?;
            for family in study_families(&result.rows) {
                out.with_core(&format!("table_{family}.csv"), |w| {
                    write_study_table(&result.rows, &family, w)
                })?;
            }
            let rows: Vec<&MCReport> = result.reports.iter().flat_map(|r| &r.rows).collect();
            out.csv("mc_report.csv", &rows)?;
            let truth: Vec<TruthRow> = result
                .reports
                .iter()
                .flat_map(|r| truth_rows(&r.scenario.label, &r.truth))
                .collect();
            out.csv("true_variance.csv", &truth)?;
            if let Some(d) = &result.decay {
                write_decay(d, out)?;
            }
            Ok(())
        }
        _ => Err(CliError::config("", "expected `population` with `scenario`, or `study` alone")),
    }
}

fn verify(c: &VerifyConfig, out: &mut Outputs) -> Result<()> {
    let root = Stream::new(c.seed);
    if !c.bounds.is_empty() {
        let mut reports = Vec::with_capacity(c.bounds.len());
        for (k, b) in c.bounds.iter().enumerate() {
            let frame = b.population.load()?;
            let seed = root.derive_seed("bound", k as u64);
            let r = match b.check {
                BoundKind::BeSi => verify_hajek_bound(&frame, &c.column, b.n, c.second_stage, b.replicates, seed),
                BoundKind::SirSi => verify_sir_si_bound(&frame, &c.column, b.n, c.second_stage, b.replicates, seed),
            };
            reports.push(core(&format!("bound check {k}"), r)?);
        }
        out.csv("bounds.csv", &reports)?;
    }
    if let Some(d) = &c.decay {
        let frames = d.populations.iter().map(|p| p.load()).collect::<Result<Vec<_>>>()?;
        let t = core(
            "decay check",
            verify_decay(&frames, &c.column, d.n, d.m, c.second_stage, d.replicates, root.derive_seed("decay", 0)),
        )?;
        write_decay(&t, out)?;
    }
    Ok(())
}
