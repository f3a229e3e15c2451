//! Command-line front end: `fit`, `select`, `simulate` and `generate`.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{MlcaError, Result};
use crate::estimators::{self, FitResult, Method};
use crate::io::{self, CsvLayout};
use crate::report;
use crate::selection;
use crate::simulate::{self, StudyConfig};
use crate::step1::EmControl;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mlca", version, about = "Multilevel latent class models with covariates")]
pub struct Cli {
    /// JSON file with default values for any flag; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or all estimators to a CSV file.
    Fit(FitArgs),
    /// Choose the numbers of classes on a CSV file.
    Select(SelectArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
    /// Write a synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long = "group-col")]
    pub group_col: Option<String>,
    /// Item columns, e.g. `y1..y10` or `a,b,c`; default: all remaining columns.
    #[arg(long)]
    pub items: Option<String>,
    #[arg(long)]
    pub covariates: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ControlArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Random starts in addition to the hierarchical start.
    #[arg(long = "n-starts")]
    pub n_starts: Option<usize>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "T")]
    pub n_low: Option<usize>,
    #[arg(long = "M")]
    pub n_high: Option<usize>,
    /// two_step, one_step, two_stage or all.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub ctrl: ControlArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "T-range")]
    pub t_range: Option<String>,
    #[arg(long = "M-range")]
    pub m_range: Option<String>,
    #[command(flatten)]
    pub ctrl: ControlArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Condition ids in 1..36, e.g. `1-36` or `1,19,31,36`.
    #[arg(long)]
    pub conditions: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// `all` or a comma list of methods.
    #[arg(long)]
    pub estimators: Option<String>,
    #[command(flatten)]
    pub ctrl: ControlArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Simulation condition in 1..36.
    #[arg(long, conflicts_with = "iccs")]
    pub condition: Option<usize>,
    /// Survey-shaped data: 24 groups, 12 items, 6 covariates.
    #[arg(long)]
    pub iccs: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// File-level defaults; every key mirrors a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub group_col: Option<String>,
    pub items: Option<String>,
    pub covariates: Option<String>,
    #[serde(rename = "T")]
    pub n_low: Option<usize>,
    #[serde(rename = "M")]
    pub n_high: Option<usize>,
    pub method: Option<String>,
    #[serde(rename = "T_range")]
    pub t_range: Option<String>,
    #[serde(rename = "M_range")]
    pub m_range: Option<String>,
    pub conditions: Option<String>,
    pub replicates: Option<usize>,
    pub estimators: Option<String>,
    pub condition: Option<usize>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub n_starts: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MlcaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        serde_json::from_str(&text).map_err(|e| MlcaError::InvalidInput(format!("config {}: {e}", path.display())))
    }

    fn merge_data(&mut self, a: DataArgs) {
        self.input = a.input.or(self.input.take());
        self.group_col = a.group_col.or(self.group_col.take());
        self.items = a.items.or(self.items.take());
        self.covariates = a.covariates.or(self.covariates.take());
    }

    fn merge_ctrl(&mut self, a: ControlArgs) {
        self.seed = a.seed.or(self.seed);
        self.max_iter = a.max_iter.or(self.max_iter);
        self.tol = a.tol.or(self.tol);
        self.n_starts = a.n_starts.or(self.n_starts);
        self.workers = a.workers.or(self.workers);
        self.out = a.out.or(self.out.take());
    }

    pub fn em_control(&self) -> Result<EmControl> {
        let d = EmControl::default();
        let ctrl = EmControl {
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            tol: self.tol.unwrap_or(d.tol),
            n_starts: self.n_starts.unwrap_or(d.n_starts),
            seed: self.seed.unwrap_or(d.seed),
            parallel: self.workers.unwrap_or(1) > 1,
        };
        ctrl.validate()?;
        Ok(ctrl)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("mlca_out"))
    }

    fn layout(&self) -> Result<CsvLayout> {
        Ok(CsvLayout {
            group_col: self.group_col.clone().unwrap_or_else(|| "group".into()),
            items: self.items.as_deref().map(io::expand_names).transpose()?,
            covariates: match &self.covariates {
                Some(c) => io::expand_names(c)?,
                None => vec![],
            },
        })
    }

    fn load(&self) -> Result<io::LoadedData> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| MlcaError::InvalidInput("--input is required".into()))?;
        let loaded = io::parse_csv(input, &self.layout()?)?;
        let d = &loaded.dataset;
        eprintln!(
            "data: J={} groups, N={} units, H={} items, K={} design columns",
            d.n_groups(),
            d.n_units(),
            d.n_items(),
            d.n_covariates()
        );
        Ok(loaded)
    }
}

/// Integer list such as `1..6`, `1-36` or `1,19,31,36`; ranges are inclusive.
pub fn parse_int_list(spec: &str) -> Result<Vec<usize>> {
    let bad = || MlcaError::InvalidInput(format!("cannot read `{spec}` as a list of integers"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let range = part.split_once("..").or_else(|| part.split_once('-'));
        match range {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_methods(spec: &str) -> Result<Vec<Method>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| MlcaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[derive(Serialize)]
struct PhaseManifest<'a> {
    name: &'a str,
    iterations: usize,
    seconds: f64,
    converged: bool,
}

#[derive(Serialize)]
struct FitManifest<'a> {
    method: &'a str,
    covariance: &'a str,
    loglik: f64,
    converged: bool,
    total_seconds: f64,
    phases: Vec<PhaseManifest<'a>>,
}

fn fit_manifest(fit: &FitResult) -> FitManifest<'_> {
    FitManifest {
        method: fit.method.as_str(),
        covariance: fit.covariance_kind.as_str(),
        loglik: fit.loglik,
        converged: fit.converged,
        total_seconds: fit.total_elapsed(),
        phases: fit
            .phases
            .iter()
            .map(|p| PhaseManifest {
                name: &p.name,
                iterations: p.n_iter,
                seconds: p.elapsed,
                converged: p.converged,
            })
            .collect(),
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "results": extra,
    });
    let w = create(&dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(w, &manifest).map_err(|e| MlcaError::Io(std::io::Error::other(e)))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<i32> {
    let loaded = cfg.load()?;
    let data = &loaded.dataset;
    let n_low = cfg.n_low.ok_or_else(|| MlcaError::InvalidInput("--T is required".into()))?;
    let n_high = cfg.n_high.ok_or_else(|| MlcaError::InvalidInput("--M is required".into()))?;
    let dims = data.dims(n_low, n_high)?;
    let ctrl = cfg.em_control()?;
    let methods = parse_methods(cfg.method.as_deref().unwrap_or("two_step"))?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;

    let outcomes = estimators::fit_methods(data, &dims, &ctrl, &methods)?;
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in methods.iter().zip(outcomes) {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => {
                eprintln!("{m} failed: {e}");
                failures.push(serde_json::json!({"method": m.as_str(), "error": e.to_string()}));
            }
        }
    }
    if let Some(reference) = fits.first().map(|f| f.params.clone()) {
        for f in fits.iter_mut().skip(1) {
            *f = estimators::align_fit(f, &reference);
        }
    }
    let refs: Vec<&FitResult> = fits.iter().collect();
    if !refs.is_empty() {
        report::write_coefficients_csv(create(&dir.join("coefficients.csv"))?, &refs, &loaded.covariate_names)?;
        let table = report::format_coefficient_table(&refs, &loaded.covariate_names)?;
        std::fs::write(dir.join("coefficients.txt"), &table)?;
        print!("{table}");
    }
    for f in &fits {
        let name = f.method.as_str();
        report::write_posteriors_csv(create(&dir.join(format!("posteriors_{name}.csv")))?, data, &f.posteriors)?;
        report::write_map_csv(create(&dir.join(format!("map_{name}.csv")))?, data, &f.posteriors)?;
        println!(
            "{name}: loglik {:.3}, {} iterations, {:.3}s, converged {}",
            f.loglik,
            f.total_iterations(),
            f.total_elapsed(),
            f.converged
        );
    }
    let all_converged = failures.is_empty() && fits.iter().all(|f| f.converged);
    let results = serde_json::json!({
        "fits": fits.iter().map(fit_manifest).collect::<Vec<_>>(),
        "failures": failures,
        "complete": all_converged,
    });
    write_manifest(&dir, "fit", cfg, results)?;
    if !all_converged {
        eprintln!("warning: not every estimator converged; outputs are flagged in manifest.json");
        return Ok(EXIT_NUMERICAL);
    }
    Ok(EXIT_OK)
}

pub fn cmd_select(cfg: &RunConfig) -> Result<i32> {
    let loaded = cfg.load()?;
    let lows = parse_int_list(cfg.t_range.as_deref().unwrap_or("1..6"))?;
    let highs = parse_int_list(cfg.m_range.as_deref().unwrap_or("1..4"))?;
    let ctrl = cfg.em_control()?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let table = selection::hierarchical_select(&loaded.dataset, &lows, &highs, &ctrl)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("selection.csv"))?);
    for r in &table.rows {
        w.serialize(r).map_err(|e| MlcaError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    println!("{:>3} {:>3} {:>14} {:>5} {:>14} {:>14} {:>14} {:>8} {:>8}", "T", "M", "loglik", "npar", "AIC", "BIC_N", "BIC_J", "R2_low", "R2_high");
    for r in &table.rows {
        if r.failed() {
            println!("{:>3} {:>3}  failed: {}", r.n_low, r.n_high, r.error.as_deref().unwrap_or(""));
        } else {
            println!(
                "{:>3} {:>3} {:>14.2} {:>5} {:>14.2} {:>14.2} {:>14.2} {:>8.3} {:>8.3}",
                r.n_low, r.n_high, r.loglik, r.npar, r.aic, r.bic_n, r.bic_j, r.entropy_r2_low, r.entropy_r2_high
            );
        }
    }
    println!("selected T={}, M={} (single-level pass chose T={})", table.chosen.0, table.chosen.1, table.phase1_low);
    let results = serde_json::json!({
        "chosen": {"T": table.chosen.0, "M": table.chosen.1},
        "single_level_T": table.phase1_low,
        "failed_cells": table.rows.iter().filter(|r| r.failed()).count(),
    });
    write_manifest(&dir, "select", cfg, results)?;
    Ok(EXIT_OK)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    let conditions = parse_int_list(cfg.conditions.as_deref().unwrap_or("1-36"))?;
    let mut study = StudyConfig::new(conditions, cfg.replicates.unwrap_or(100), cfg.seed.unwrap_or(1));
    study.methods = parse_methods(cfg.estimators.as_deref().unwrap_or("all"))?;
    study.workers = cfg.workers.unwrap_or(1);
    let d = &study.ctrl;
    study.ctrl = EmControl {
        max_iter: cfg.max_iter.unwrap_or(d.max_iter),
        tol: cfg.tol.unwrap_or(d.tol),
        n_starts: cfg.n_starts.unwrap_or(d.n_starts),
        ..d.clone()
    };
    study.ctrl.validate()?;
    let dir = cfg.out_dir();
    let metrics = simulate::run_study(&study)?;
    simulate::write_study(&metrics, &dir)?;
    println!("{:>4} {:<10} {:>10} {:>10} {:>8} {:>9} {:>9} {:>6}", "cond", "method", "bias", "max|bias|", "rel_sd", "coverage", "seconds", "fails");
    for s in &metrics.summaries {
        println!(
            "{:>4} {:<10} {:>10.4} {:>10.4} {:>8.3} {:>9.3} {:>9.3} {:>6}",
            s.condition, s.method.as_str(), s.mean_slope_bias, s.max_abs_slope_bias, s.mean_slope_rel_sd, s.mean_slope_coverage, s.mean_seconds, s.n_failed
        );
    }
    let results = serde_json::json!({
        "conditions": study.conditions,
        "replicates": study.replicates,
        "methods": study.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "master_seed": study.seed,
        "workers": study.workers,
        "failures": metrics.failures.len(),
    });
    write_manifest(&dir, "simulate", cfg, results)?;
    Ok(EXIT_OK)
}

pub fn cmd_generate(cfg: &RunConfig, iccs: bool) -> Result<i32> {
    let seed = cfg.seed.unwrap_or(1);
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| MlcaError::InvalidInput("--out FILE is required".into()))?;
    let (data, items, covs) = if iccs {
        let (d, _) = simulate::iccs_like(seed)?;
        let items = simulate::ICCS_ITEMS.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let covs = simulate::ICCS_COVARIATES.iter().skip(1).map(|s| s.to_string()).collect::<Vec<_>>();
        (d, items, covs)
    } else {
        let id = cfg
            .condition
            .ok_or_else(|| MlcaError::InvalidInput("--condition or --iccs is required".into()))?;
        let (d, _) = simulate::generate(&simulate::SimCondition::from_id(id)?, seed)?;
        let items = (1..=d.n_items()).map(|h| format!("y{h}")).collect();
        let covs = (1..d.n_covariates()).map(|k| format!("z{k}")).collect();
        (d, items, covs)
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    io::write_dataset_csv(create(&out)?, &data, "group", &items, &covs)?;
    eprintln!("wrote {} rows to {}", data.n_units(), out.display());
    Ok(EXIT_OK)
}

fn exit_code(e: &MlcaError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();

    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::from_file(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INPUT;
            }
        },
        None => RunConfig::default(),
    };
    let workers = match &cli.command {
        Command::Fit(a) => a.ctrl.workers,
        Command::Select(a) => a.ctrl.workers,
        Command::Simulate(a) => a.ctrl.workers,
        Command::Generate(_) => None,
    }
    .or(cfg.workers);
    if let Some(w) = workers.filter(|&w| w > 1) {
        // the study builds its own pool; fits and selection use the global one
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let outcome = match cli.command {
        Command::Fit(a) => {
            cfg.merge_data(a.data);
            cfg.merge_ctrl(a.ctrl);
            cfg.n_low = a.n_low.or(cfg.n_low);
            cfg.n_high = a.n_high.or(cfg.n_high);
            cfg.method = a.method.or(cfg.method.take());
            cmd_fit(&cfg)
        }
        Command::Select(a) => {
            cfg.merge_data(a.data);
            cfg.merge_ctrl(a.ctrl);
            cfg.t_range = a.t_range.or(cfg.t_range.take());
            cfg.m_range = a.m_range.or(cfg.m_range.take());
            cmd_select(&cfg)
        }
        Command::Simulate(a) => {
            cfg.merge_ctrl(a.ctrl);
            cfg.conditions = a.conditions.or(cfg.conditions.take());
            cfg.replicates = a.replicates.or(cfg.replicates);
            cfg.estimators = a.estimators.or(cfg.estimators.take());
            cmd_simulate(&cfg)
        }
        Command::Generate(a) => {
            cfg.condition = a.condition.or(cfg.condition);
            cfg.seed = a.seed.or(cfg.seed);
            cfg.out = a.out.or(cfg.out.take());
            cmd_generate(&cfg, a.iccs)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
