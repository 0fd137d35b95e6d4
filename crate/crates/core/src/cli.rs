//! The `calmreminder` command line.
//!
//! Exit codes: 0 success, 1 invariant or runtime failure, 2 bad input
//! (with line diagnostics where the input has lines), 3 no model scope had
//! enough labels to fit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::calibration::{
    evaluate_personalization, evaluate_split, fit_ols, r_squared, read_labels_csv, ModelRegistry, PerceptionLabel,
    Scope,
};
use crate::policy::PolicyConfig;
use crate::report::{render_personalization, render_study, report_from_dir, EVENT_LOG};
use crate::sensing::{read_samples_csv, windows_from_stream, write_windows_csv, FeatureVariant, DEFAULT_MIN_COVERAGE};
use crate::server::{serve, ServerConfig};
use crate::simkit::{parse_profiles, run_study, synthetic_cohort, SimError, StudyOptions};
use crate::time::Timestamp;
use crate::ParticipantId;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_FIT: i32 = 3;

/// Labels a scope needs before `fit` and `evaluate` will touch it.
pub const MIN_SCOPE_LABELS: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "calmreminder", version, about = "Calm-moment prompting service, calibration and study simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full four-week study on a virtual clock.
    Simulate(SimulateArgs),
    /// Fit global and per-family models from a labels file.
    Fit(FitArgs),
    /// Score models on a seeded train/test split of a labels file.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Summarize a persisted study.
    Report(ReportArgs),
    /// Write a synthetic cohort of family profiles.
    Cohort(CohortArgs),
    /// Turn an accelerometer sample file into energy windows.
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON list of family profiles; a synthetic cohort is used if absent.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Keep the event log, labels and models here.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Write report.json and report.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub cap: Option<u32>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Size of the synthetic cohort.
    #[arg(long)]
    pub families: Option<u32>,
    /// Perception noise of the synthetic cohort.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Fraction of watch uploads that fail in transit.
    #[arg(long)]
    pub fault_rate: Option<f64>,
    /// TOML file with any of the options above; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Write the model registry JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_COVERAGE)]
    pub min_coverage: u32,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MIN_COVERAGE)]
    pub min_coverage: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Server TOML configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    /// Directory holding the event log.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Print JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    #[arg(long, default_value_t = 12)]
    pub families: u32,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Variant {
    Rms,
    Integrated,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// CSV with `t_ms,ax,ay,az` columns.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub participant: ParticipantId,
    #[arg(long, value_enum, default_value_t = Variant::Rms)]
    pub variant: Variant,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optional settings for `simulate`, read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub profiles: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub cap: Option<u32>,
    pub split: Option<f64>,
    pub families: Option<u32>,
    pub noise_sd: Option<f64>,
    pub fault_rate: Option<f64>,
    pub window_start_hour: Option<u32>,
    pub window_end_hour: Option<u32>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Failure(String),
    NoFit(String),
    /// Standard output was closed by the reader.
    Closed,
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Failure(_) => EXIT_FAILURE,
            CliError::NoFit(_) => EXIT_NO_FIT,
            CliError::Closed => EXIT_OK,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Failure(m) | CliError::NoFit(m) => m,
            CliError::Closed => "",
        }
    }
}

type CliResult = Result<i32, CliError>;

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn stdout_err(e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        CliError::Closed
    } else {
        failure(e)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| failure(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| failure(format!("{}: {e}", path.display())))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return if code == 0 { EXIT_OK } else { EXIT_INPUT };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, out, err),
        Command::Fit(a) => fit(a, out, err),
        Command::Evaluate(a) => evaluate(a, out, err),
        Command::Serve(a) => serve_cmd(a),
        Command::Report(a) => report(a, out),
        Command::Cohort(a) => cohort(a, out),
        Command::Energy(a) => energy(a, out),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Closed) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn simulate(a: SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let cfg: RunConfig = match &a.config {
        Some(path) => toml::from_str(&read_text(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    let seed = a.seed.or(cfg.seed).ok_or_else(|| input("simulate needs --seed"))?;
    let mut policy = PolicyConfig::default();
    if let Some(t) = a.threshold.or(cfg.threshold) {
        if !t.is_finite() {
            return Err(input("--threshold must be finite"));
        }
        policy.threshold = t;
    }
    if let Some(cap) = a.cap.or(cfg.cap) {
        policy.daily_cap = cap;
    }
    if let Some(h) = cfg.window_start_hour {
        policy.window.start_hour = h;
    }
    if let Some(h) = cfg.window_end_hour {
        policy.window.end_hour = h;
    }
    if policy.window.start_hour >= policy.window.end_hour || policy.window.end_hour > 24 {
        return Err(input("delivery window needs start_hour < end_hour <= 24"));
    }
    let split = a.split.or(cfg.split).unwrap_or(0.8);
    if !(split > 0.0 && split < 1.0) {
        return Err(input(format!("--split {split} must lie strictly between 0 and 1")));
    }
    let fault_rate = a.fault_rate.or(cfg.fault_rate).unwrap_or(0.05);
    if !(0.0..=1.0).contains(&fault_rate) {
        return Err(input("--fault-rate must lie in [0, 1]"));
    }

    let profiles = match a.profiles.or(cfg.profiles) {
        Some(path) => parse_profiles(&read_text(&path)?).map_err(|e| input(format!("{}: {e}", path.display())))?,
        None => {
            let noise = a.noise_sd.or(cfg.noise_sd).unwrap_or(0.3);
            if !(noise.is_finite() && noise >= 0.0) {
                return Err(input("--noise-sd must be finite and non-negative"));
            }
            synthetic_cohort(a.families.or(cfg.families).unwrap_or(12), noise, seed)
        }
    };

    let data_dir = a.data_dir.or(cfg.data_dir);
    let store_path = match &data_dir {
        Some(dir) => {
            let path = dir.join(EVENT_LOG);
            if path.metadata().is_ok_and(|m| m.len() > 0) {
                return Err(input(format!("{} already holds a study", path.display())));
            }
            Some(path)
        }
        None => None,
    };
    let opts =
        StudyOptions { seed, policy, split, transport_fault_rate: fault_rate, store_path, ..StudyOptions::default() };
    let run = run_study(&profiles, &opts).map_err(|e| match e {
        SimError::Profile(_) | SimError::Options(_) => input(e),
        SimError::Service(_) => failure(e),
    })?;
    let report = &run.report;
    let text = render_study(report);
    out.write_all(text.as_bytes()).map_err(stdout_err)?;

    if let Some(dir) = data_dir {
        let mut labels = Vec::new();
        crate::calibration::write_labels_csv(&mut labels, &run.service.labels()).map_err(failure)?;
        write_file(&dir.join("labels.csv"), &labels)?;
        write_file(&dir.join("models.json"), run.service.registry_json().as_bytes())?;
        let mut prompts = Vec::new();
        run.service.export_prompt_records(&mut prompts).map_err(failure)?;
        write_file(&dir.join("prompts.ndjson"), &prompts)?;
    }
    if let Some(dir) = a.out.or(cfg.out) {
        let json = serde_json::to_string_pretty(report).map_err(failure)?;
        write_file(&dir.join("report.json"), json.as_bytes())?;
        write_file(&dir.join("report.txt"), text.as_bytes())?;
    }
    if !report.violations.is_empty() || !report.conservation_ok {
        let _ = writeln!(err, "study finished with {} invariant violations", report.violations.len());
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

fn load_labels(path: &Path, min_coverage: u32) -> Result<Vec<PerceptionLabel>, CliError> {
    let text = read_text(path)?;
    read_labels_csv(text.as_bytes(), min_coverage).map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Global scope first, then each participant in id order.
fn scopes(labels: &[PerceptionLabel]) -> Vec<(Scope, Vec<PerceptionLabel>)> {
    let mut groups: BTreeMap<ParticipantId, Vec<PerceptionLabel>> = BTreeMap::new();
    for l in labels {
        groups.entry(l.participant_id).or_default().push(l.clone());
    }
    let mut out = vec![(Scope::Global, labels.to_vec())];
    out.extend(groups.into_iter().map(|(id, g)| (Scope::Participant(id), g)));
    out
}

fn fit(a: FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let labels = load_labels(&a.labels, a.min_coverage)?;
    let mut models = Vec::new();
    for (scope, group) in scopes(&labels) {
        if group.len() < MIN_SCOPE_LABELS {
            let _ = writeln!(err, "skip {scope}: {} labels, need {MIN_SCOPE_LABELS}", group.len());
            continue;
        }
        let model = fit_ols(&group, scope, Timestamp::default()).map_err(failure)?;
        let actual: Vec<f64> = group.iter().map(|l| l.rating as f64).collect();
        let predicted: Vec<f64> = group.iter().map(|l| model.predict_raw(l.feature.mean_energy)).collect();
        let r2 = r_squared(&actual, &predicted).map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "{scope}\tn={}\tslope={:.6}\tintercept={:.6}\tR2={r2}",
            group.len(),
            model.slope,
            model.intercept
        )
        .map_err(stdout_err)?;
        models.push(model);
    }
    if models.is_empty() {
        return Err(CliError::NoFit(format!("no scope in {} has {MIN_SCOPE_LABELS} labels", a.labels.display())));
    }
    if let Some(path) = a.out {
        let reg = ModelRegistry::new();
        reg.publish(models);
        write_file(&path, reg.to_json().as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(input(format!("--split {} must lie strictly between 0 and 1", a.split)));
    }
    let labels = load_labels(&a.labels, a.min_coverage)?;
    let mut scored = 0;
    for (scope, group) in scopes(&labels) {
        if group.len() < MIN_SCOPE_LABELS {
            let _ = writeln!(err, "skip {scope}: {} labels, need {MIN_SCOPE_LABELS}", group.len());
            continue;
        }
        match evaluate_split(&group, a.split, a.seed) {
            Ok(r) => {
                let r2 = r.r_squared.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
                writeln!(out, "{scope}\tn_train={}\tn_test={}\tR2={r2}", r.n_train, r.n_test).map_err(stdout_err)?;
                scored += 1;
            }
            Err(e) => {
                let _ = writeln!(err, "skip {scope}: {e}");
            }
        }
    }
    if scored == 0 {
        return Err(CliError::NoFit(format!("no scope in {} could be evaluated", a.labels.display())));
    }
    let families = labels.iter().map(|l| l.participant_id).collect::<std::collections::BTreeSet<_>>().len();
    if families > 1 {
        if let Ok(p) = evaluate_personalization(&labels, a.split, a.seed) {
            writeln!(out).map_err(stdout_err)?;
            out.write_all(render_personalization(&p).as_bytes()).map_err(stdout_err)?;
        }
    }
    Ok(EXIT_OK)
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(path) => {
            ServerConfig::from_toml(&read_text(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?
        }
        None => {
            let mut cfg = ServerConfig::default();
            cfg.apply_env();
            cfg
        }
    };
    if let Some(listen) = a.listen {
        cfg.listen = listen;
    }
    if let Some(dir) = a.data_dir {
        cfg.data_path = dir.join(EVENT_LOG);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(failure)?;
    rt.block_on(serve(cfg)).map_err(failure)?;
    Ok(EXIT_OK)
}

fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult {
    if !a.data_dir.is_dir() {
        return Err(input(format!("{} is not a directory", a.data_dir.display())));
    }
    let r = report_from_dir(&a.data_dir).map_err(input)?;
    let text = if a.json { serde_json::to_string_pretty(&r).map_err(failure)? + "\n" } else { r.render() };
    out.write_all(text.as_bytes()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

fn cohort(a: CohortArgs, out: &mut dyn Write) -> CliResult {
    if a.families == 0 {
        return Err(input("--families must be at least 1"));
    }
    if !(a.noise_sd.is_finite() && a.noise_sd >= 0.0) {
        return Err(input("--noise-sd must be finite and non-negative"));
    }
    let json = serde_json::to_string_pretty(&synthetic_cohort(a.families, a.noise_sd, a.seed)).map_err(failure)? + "\n";
    match a.out {
        Some(path) => write_file(&path, json.as_bytes())?,
        None => out.write_all(json.as_bytes()).map_err(stdout_err)?,
    }
    Ok(EXIT_OK)
}

fn energy(a: EnergyArgs, out: &mut dyn Write) -> CliResult {
    let text = read_text(&a.samples)?;
    let samples = read_samples_csv(text.as_bytes()).map_err(|e| input(format!("{}: {e}", a.samples.display())))?;
    let variant = match a.variant {
        Variant::Rms => FeatureVariant::Rms,
        Variant::Integrated => FeatureVariant::Integrated,
    };
    let windows = windows_from_stream(a.participant, &samples, variant)
        .map_err(|e| input(format!("{}: {e}", a.samples.display())))?;
    let mut buf = Vec::new();
    write_windows_csv(&mut buf, &windows).map_err(failure)?;
    match a.out {
        Some(path) => write_file(&path, &buf)?,
        None => out.write_all(&buf).map_err(stdout_err)?,
    }
    Ok(EXIT_OK)
}
