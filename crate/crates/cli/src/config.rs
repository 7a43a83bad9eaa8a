//! JSON run configurations. Every command reads one JSON document; the
//! top-level keys `threads` and `out` are shared, everything else belongs to
//! the command. `--seed`, `--threads` and `--out` override the file.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use survey_coupling::designs::SecondStage;
use survey_coupling::estimators::{SmoothEstimand, VarianceMethod};
use survey_coupling::frame::{
    generate_population, generate_stratified_population, ingest_frame, Column, Frame,
    FrameSchema, StratifiedConfig, SyntheticConfig,
};
use survey_coupling::montecarlo::{FirstStage, Scenario, StudyConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    GenPop,
    Estimate,
    Bootstrap,
    Mc,
    Verify,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::GenPop => "gen-pop",
            CommandKind::Estimate => "estimate",
            CommandKind::Bootstrap => "bootstrap",
            CommandKind::Mc => "mc",
            CommandKind::Verify => "verify",
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Where a frame comes from. Relative file paths are resolved against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FrameSource {
    File {
        path: PathBuf,
        #[serde(default)]
        schema: FrameSchema,
    },
    Synthetic(SyntheticConfig),
    Stratified(StratifiedConfig),
}

impl FrameSource {
    pub fn load(&self) -> Result<Frame, CliError> {
        let frame = match self {
            FrameSource::File { path, schema } => ingest_frame(path, schema),
            FrameSource::Synthetic(cfg) => generate_population(cfg),
            FrameSource::Stratified(cfg) => generate_stratified_population(cfg),
        };
        frame.map_err(|e| CliError::core("loading frame", e))
    }

    fn resolve(&mut self, base: &Path) {
        if let FrameSource::File { path, .. } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationModel {
    Synthetic(SyntheticConfig),
    Stratified(StratifiedConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenPopConfig {
    pub population: PopulationModel,
}

fn default_alpha() -> f64 {
    0.025
}

fn default_replicates() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

fn default_column() -> Column {
    Column::Var { var: 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub frame: FrameSource,
    pub first_stage: FirstStage,
    pub second_stage: SecondStage,
    pub estimands: Vec<SmoothEstimand>,
    /// Defaults to `v_simp` and `v_wr` under SI, `v_stwr` when stratified.
    #[serde(default)]
    pub variance_methods: Vec<VarianceMethod>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapRunConfig {
    pub frame: FrameSource,
    pub first_stage: FirstStage,
    pub second_stage: SecondStage,
    pub estimands: Vec<SmoothEstimand>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub studentized: bool,
    pub seed: u64,
}

/// Either one scenario on one frame, or a study grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<FrameSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    BeSi,
    SirSi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCase {
    pub check: BoundKind,
    pub population: FrameSource,
    pub n: usize,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayCase {
    pub populations: Vec<FrameSource>,
    pub n: usize,
    #[serde(default)]
    pub m: Option<usize>,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_column")]
    pub column: Column,
    pub second_stage: SecondStage,
    #[serde(default)]
    pub bounds: Vec<BoundCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayCase>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Command {
    GenPop(GenPopConfig),
    Estimate(EstimateConfig),
    Bootstrap(BootstrapRunConfig),
    Mc(McConfig),
    Verify(VerifyConfig),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::GenPop(_) => CommandKind::GenPop,
            Command::Estimate(_) => CommandKind::Estimate,
            Command::Bootstrap(_) => CommandKind::Bootstrap,
            Command::Mc(_) => CommandKind::Mc,
            Command::Verify(_) => CommandKind::Verify,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Command::GenPop(c) => match &c.population {
                PopulationModel::Synthetic(s) => s.seed,
                PopulationModel::Stratified(s) => s.model.seed,
            },
            Command::Estimate(c) => c.seed,
            Command::Bootstrap(c) => c.seed,
            Command::Mc(c) => match (&c.scenario, &c.study) {
                (Some(s), _) => s.seed,
                (None, Some(s)) => s.seed,
                (None, None) => 0,
            },
            Command::Verify(c) => c.seed,
        }
    }
}

/// A fully validated run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub threads: Option<usize>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn kind(&self) -> CommandKind {
        self.command.kind()
    }

    pub fn seed(&self) -> u64 {
        self.command.seed()
    }
}

/// JSON pointer segments of the seed field for each command.
fn seed_path(kind: CommandKind, doc: &Map<String, Value>) -> Result<Vec<&'static str>, CliError> {
    Ok(match kind {
        CommandKind::GenPop => {
            let pop = doc.get("population").and_then(Value::as_object);
            match pop.map(|p| (p.contains_key("synthetic"), p.contains_key("stratified"))) {
                Some((true, false)) => vec!["population", "synthetic", "seed"],
                Some((false, true)) => vec!["population", "stratified", "model", "seed"],
                _ => {
                    return Err(CliError::config(
                        "population",
                        "expected exactly one of `synthetic` or `stratified`",
                    ))
                }
            }
        }
        CommandKind::Mc => match (doc.contains_key("scenario"), doc.contains_key("study")) {
            (true, false) => vec!["scenario", "seed"],
            (false, true) => vec!["study", "seed"],
            _ => return Err(CliError::config("", "expected exactly one of `scenario` or `study`")),
        },
        _ => vec!["seed"],
    })
}

fn set_path(doc: &mut Map<String, Value>, path: &[&str], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = doc;
    let mut walked = Vec::new();
    for key in parents {
        walked.push(*key);
        node = node
            .get_mut(*key)
            .and_then(Value::as_object_mut)
            .ok_or_else(|| CliError::config(&walked.join("."), "expected an object"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn typed<T: DeserializeOwned>(doc: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "" } else { &path }, &e.into_inner().to_string())
    })
}

/// Parses and validates a config document for `kind`. `base` is the
/// directory relative frame paths are resolved against.
pub fn parse_config(
    kind: CommandKind,
    text: &str,
    base: &Path,
    overrides: &Overrides,
) -> Result<RunConfig, CliError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CliError::config("", &e.to_string()))?;
    let Value::Object(mut doc) = doc else {
        return Err(CliError::config("", "config must be a JSON object"));
    };
    let threads = match doc.remove("threads") {
        None | Some(Value::Null) => None,
        Some(v) => Some(typed::<usize>(v).map_err(|e| e.under("threads"))?),
    };
    let out = match doc.remove("out") {
        None | Some(Value::Null) => None,
        Some(v) => Some(typed::<PathBuf>(v).map_err(|e| e.under("out"))?),
    };
    let threads = overrides.threads.or(threads);
    if threads == Some(0) {
        return Err(CliError::config("threads", "must be at least 1"));
    }
    let out = overrides.out.clone().or(out.map(|p| if p.is_relative() { base.join(p) } else { p }));
    let out = out.unwrap_or_else(|| PathBuf::from("out"));

    let seed_at = seed_path(kind, &doc)?;
    if let Some(seed) = overrides.seed {
        set_path(&mut doc, &seed_at, Value::from(seed))?;
    }
    let doc = Value::Object(doc);
    let mut command = match kind {
        CommandKind::GenPop => Command::GenPop(typed(doc)?),
        CommandKind::Estimate => Command::Estimate(typed(doc)?),
        CommandKind::Bootstrap => Command::Bootstrap(typed(doc)?),
        CommandKind::Mc => Command::Mc(typed(doc)?),
        CommandKind::Verify => Command::Verify(typed(doc)?),
    };
    validate(&mut command, base)?;
    Ok(RunConfig {
        command,
        threads,
        out,
    })
}

/// Reads `path` and calls [`parse_config`] with its directory as base.
pub fn load_config(kind: CommandKind, path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(kind, &text, &base, overrides)
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(CliError::config("alpha", &format!("must lie in (0, 0.5), got {alpha}")))
    }
}

fn nonempty<T>(items: &[T], path: &str) -> Result<(), CliError> {
    if items.is_empty() {
        Err(CliError::config(path, "must not be empty"))
    } else {
        Ok(())
    }
}

/// Checks that need no frame; frame-dependent checks run at execution.
fn validate(command: &mut Command, base: &Path) -> Result<(), CliError> {
    match command {
        Command::GenPop(c) => {
            let res = match &c.population {
                PopulationModel::Synthetic(s) => s.validate().map(|_| ()),
                PopulationModel::Stratified(s) => s.resolved_model().validate().map(|_| ()),
            };
            res.map_err(|e| CliError::config("population", &e.to_string()))?;
        }
        Command::Estimate(c) => {
            c.frame.resolve(base);
            nonempty(&c.estimands, "estimands")?;
            check_alpha(c.alpha)?;
            if c.variance_methods.is_empty() {
                c.variance_methods = match c.first_stage {
                    FirstStage::Si { .. } => vec![VarianceMethod::Simplified, VarianceMethod::WithReplacement],
                    FirstStage::StratifiedSi { .. } => vec![VarianceMethod::StratWr],
                };
            }
            survey_coupling::montecarlo::check_methods(
                &c.first_stage,
                c.second_stage,
                &c.estimands,
                &c.variance_methods,
            )
            .map_err(|e| CliError::config("variance_methods", &e.to_string()))?;
        }
        Command::Bootstrap(c) => {
            c.frame.resolve(base);
            nonempty(&c.estimands, "estimands")?;
            check_alpha(c.alpha)?;
            let cfg = survey_coupling::bootstrap::BootstrapConfig {
                m: c.m,
                replicates: c.replicates,
                alpha: c.alpha,
                seed: c.seed,
                studentized: c.studentized,
            };
            cfg.validate().map_err(|e| CliError::config("replicates", &e.to_string()))?;
        }
        Command::Mc(c) => match (&mut c.population, &c.scenario, &c.study) {
            (Some(p), Some(s), None) => {
                p.resolve(base);
                check_alpha(s.alpha).map_err(|e| e.under("scenario"))?;
                nonempty(&s.estimands, "scenario.estimands")?;
                if s.replicates < 100 {
                    return Err(CliError::config("scenario.replicates", "must be at least 100"));
                }
            }
            (None, None, Some(s)) => {
                s.validate().map_err(|e| CliError::config("study", &e.to_string()))?;
                check_alpha(s.alpha).map_err(|e| e.under("study"))?;
            }
            _ => {
                return Err(CliError::config(
                    "",
                    "expected `population` with `scenario`, or `study` alone",
                ))
            }
        },
        Command::Verify(c) => {
            for b in &mut c.bounds {
                b.population.resolve(base);
            }
            if let Some(d) = &mut c.decay {
                for p in &mut d.populations {
                    p.resolve(base);
                }
            }
            if c.bounds.is_empty() && c.decay.is_none() {
                return Err(CliError::config("", "nothing to verify: give `bounds` and/or `decay`"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(kind: CommandKind, text: &str) -> Result<RunConfig, CliError> {
        parse_config(kind, text, Path::new("/cfg"), &Overrides::default())
    }

    #[test]
    fn minimal_gen_pop() {
        let cfg = parse(
            CommandKind::GenPop,
            r#"{"population": {"synthetic": {"n_psu": 10, "mean_size": 5, "size_cv": 0,
                "lambda": 20, "sigma": 2, "icc_targets": [0.1], "pair_corr_target": 0.6, "seed": 4}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed(), 4);
        assert_eq!(cfg.out, PathBuf::from("out"));
        assert_eq!(cfg.threads, None);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse(
            CommandKind::Verify,
            r#"{"second_stage": {"kind": "census"}, "seed": 1, "bounds": [], "bogus": 3}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse(
            CommandKind::Estimate,
            r#"{"frame": {"file": {"path": "f.csv", "schema": {"psu": "x"}}}, "first_stage": {"kind": "si", "n": 2},
                "second_stage": {"kind": "census"}, "estimands": [{"kind": "total", "var": 0}], "seed": 1}"#,
        )
        .unwrap_err();
        let CliError::Config { path, message } = &err else { panic!("{err:?}") };
        assert_eq!(path, "frame.file.schema.psu");
        assert!(message.contains("psu"));
    }

    #[test]
    fn seed_is_mandatory_and_overridable() {
        let text = r#"{"second_stage": {"kind": "census"}, "decay": {"populations": [], "n": 2, "replicates": 10}}"#;
        assert!(parse(CommandKind::Verify, text).is_err());
        let cfg = parse_config(
            CommandKind::Verify,
            text,
            Path::new("/cfg"),
            &Overrides {
                seed: Some(9),
                threads: Some(2),
                out: Some("x".into()),
            },
        )
        .unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.threads, Some(2));
        assert_eq!(cfg.out, PathBuf::from("x"));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = parse(
            CommandKind::Estimate,
            r#"{"frame": {"file": {"path": "f.csv"}}, "first_stage": {"kind": "si", "n": 2},
                "second_stage": {"kind": "census"}, "estimands": [{"kind": "total", "var": 0}],
                "seed": 1, "out": "res"}"#,
        )
        .unwrap();
        let Command::Estimate(c) = &cfg.command else { panic!() };
        assert_eq!(c.frame, FrameSource::File { path: "/cfg/f.csv".into(), schema: FrameSchema::default() });
        assert_eq!(c.variance_methods, [VarianceMethod::Simplified, VarianceMethod::WithReplacement]);
        assert_eq!(cfg.out, PathBuf::from("/cfg/res"));
    }

    #[test]
    fn incompatible_method_rejected_before_work() {
        let err = parse(
            CommandKind::Estimate,
            r#"{"frame": {"file": {"path": "f.csv"}}, "first_stage": {"kind": "stratified_si", "allocation": [2]},
                "second_stage": {"kind": "census"}, "estimands": [{"kind": "total", "var": 0}],
                "variance_methods": ["simplified"], "seed": 1}"#,
        )
        .unwrap_err();
        assert!(matches!(err, CliError::Config { .. }));
    }

    #[test]
    fn mc_needs_one_mode() {
        assert!(parse(CommandKind::Mc, r#"{"population": {"file": {"path": "f"}}}"#).is_err());
    }
}
