//! Data generation from the multilevel model and the Monte Carlo comparison of estimators.

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{MlcaError, Result};
use crate::estimators::{self, FitResult, Method};
use crate::model::{gamma_row, Dataset, LowLevelModel, MeasurementParams, ModelDims, ModelParams, StructuralParams};
use crate::numeric;
use crate::step1::EmControl;

pub const N_CONDITIONS: usize = 36;
const N_ITEMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HlSeparation {
    Moderate,
    Large,
}

/// One cell of the simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimCondition {
    pub id: usize,
    /// Units per group.
    pub group_size: usize,
    pub n_groups: usize,
    /// Probability of the likely response; the unlikely one is its complement.
    pub phi_high: f64,
    pub hl_separation: HlSeparation,
}

impl SimCondition {
    /// Conditions are numbered 1..36 with group size varying fastest, then the
    /// number of groups, then low-level and finally high-level separation.
    pub fn from_id(id: usize) -> Result<Self> {
        if !(1..=N_CONDITIONS).contains(&id) {
            return Err(MlcaError::InvalidInput(format!("condition {id} is outside 1..={N_CONDITIONS}")));
        }
        let k = id - 1;
        Ok(SimCondition {
            id,
            group_size: [100, 500][k % 2],
            n_groups: [30, 50, 100][(k / 2) % 3],
            phi_high: [0.7, 0.8, 0.9][(k / 6) % 3],
            hl_separation: if k / 18 == 0 { HlSeparation::Moderate } else { HlSeparation::Large },
        })
    }

    pub fn all() -> Vec<SimCondition> {
        (1..=N_CONDITIONS).map(|id| SimCondition::from_id(id).unwrap()).collect()
    }

    pub fn ll_separation(&self) -> &'static str {
        match self.phi_high {
            p if p < 0.75 => "small",
            p if p < 0.85 => "moderate",
            _ => "large",
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(vec![self.group_size; self.n_groups], N_ITEMS, 3, 2, 2).expect("valid design")
    }

    /// Generating parameters.
    pub fn truth(&self) -> ModelParams {
        let hi = self.phi_high;
        let lo = 1.0 - hi;
        let phi = Array2::from_shape_fn((N_ITEMS, 3), |(h, t)| match t {
            0 => hi,
            1 => {
                if h < 5 {
                    lo
                } else {
                    hi
                }
            }
            _ => lo,
        });
        let (a, b) = match self.hl_separation {
            HlSeparation::Moderate => (0.85, 1.38),
            HlSeparation::Large => (1.38, 2.07),
        };
        let gamma = array![[-a, -0.25], [-b, -0.25], [a, 0.25], [b, 0.25]];
        ModelParams::new(
            MeasurementParams::new(phi).expect("interior"),
            StructuralParams::conditional(array![0.5, 0.5], gamma, 3).expect("valid"),
        )
        .expect("consistent")
    }
}

/// Draws a dataset from `truth`. Covariate rows come from `covariate(rng)`
/// (without the intercept); `high_classes` fixes the group classes when given.
pub fn generate_from<F>(
    truth: &ModelParams,
    group_sizes: &[usize],
    high_classes: Option<&[usize]>,
    mut covariate: F,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    let t_count = truth.n_low();
    let omega = truth.structural.omega().to_owned();
    let phi = truth.measurement.phi();
    let h_count = phi.nrows();
    let n: usize = group_sizes.iter().sum();
    let k = truth.structural.n_covariates();
    let mut y = Array2::<u8>::zeros((n, h_count));
    let mut z = Array2::<f64>::zeros((n, k));
    let mut groups = Vec::with_capacity(n);
    let mut eta = vec![0.0; t_count];
    let mut row = 0;
    for (j, &size) in group_sizes.iter().enumerate() {
        let w = match high_classes {
            Some(c) => c[j],
            None => categorical(omega.as_slice().expect("contiguous"), rng),
        };
        for _ in 0..size {
            let zi = covariate(rng);
            z[[row, 0]] = 1.0;
            for (c, v) in zi.iter().enumerate().take(k - 1) {
                z[[row, c + 1]] = *v;
            }
            match truth.structural.low() {
                LowLevelModel::Conditional { gamma } => {
                    eta[0] = 0.0;
                    for t in 1..t_count {
                        eta[t] = gamma.row(gamma_row(t_count, w, t)).dot(&z.row(row));
                    }
                    numeric::softmax_in_place(&mut eta);
                }
                LowLevelModel::Unconditional { pi } => {
                    for t in 0..t_count {
                        eta[t] = pi[[w, t]];
                    }
                }
            }
            let x = categorical(&eta, rng);
            for h in 0..h_count {
                y[[row, h]] = u8::from(rng.random::<f64>() < phi[[h, x]]);
            }
            groups.push(j);
            row += 1;
        }
    }
    Dataset::new(y, &groups, z)
}

fn categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// One dataset for a design cell.
pub fn generate(cond: &SimCondition, seed: u64) -> Result<(Dataset, ModelParams)> {
    let truth = cond.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = vec![cond.group_size; cond.n_groups];
    let data = generate_from(&truth, &sizes, None, |r| vec![StandardNormal.sample(r)], &mut rng)?;
    Ok((data, truth))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of replicate `rep` in condition `cond`, independent of scheduling.
pub fn replicate_seed(master: u64, cond: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ cond as u64) ^ rep as u64)
}

/// Sample sizes of the 24 groups of the bundled citizenship-norms-like design.
pub const ICCS_GROUP_SIZES: [usize; 24] = [
    2750, 2682, 4753, 4992, 5692, 1313, 2779, 2770, 3037, 2553, 3655, 3274, 2557, 3422, 3000, 4987, 3317, 2692,
    5740, 4713, 7049, 2664, 2828, 3904,
];

/// High-level class of each group in the bundled design.
pub const ICCS_GROUP_CLASSES: [usize; 24] = [2, 2, 2, 2, 0, 2, 1, 2, 2, 1, 1, 1, 1, 2, 2, 1, 2, 0, 2, 1, 1, 2, 2, 1];

pub const ICCS_ITEMS: [&str; 12] = [
    "obey", "rights", "local", "work", "envir", "vote", "history", "respect", "news", "protest", "discuss", "party",
];

pub const ICCS_COVARIATES: [&str; 7] = [
    "intercept",
    "female",
    "books",
    "edu_goal",
    "mother_edu",
    "father_edu",
    "non_native",
];

/// Generating parameters of the bundled design: classes Maximal, Engaged,
/// Subject and Duty within three country classes.
pub fn iccs_truth() -> ModelParams {
    // columns: Maximal, Engaged, Subject, Duty
    let phi = array![
        [0.97, 0.90, 0.55, 0.92],
        [0.95, 0.88, 0.35, 0.50],
        [0.93, 0.85, 0.30, 0.45],
        [0.97, 0.91, 0.60, 0.88],
        [0.96, 0.92, 0.40, 0.55],
        [0.94, 0.70, 0.30, 0.86],
        [0.95, 0.78, 0.38, 0.83],
        [0.93, 0.72, 0.42, 0.85],
        [0.90, 0.55, 0.20, 0.75],
        [0.80, 0.62, 0.22, 0.35],
        [0.82, 0.40, 0.12, 0.68],
        [0.75, 0.18, 0.08, 0.57],
    ];
    // proportions at a zero covariate profile per country class
    let pi: [[f64; 4]; 3] = [
        [0.207, 0.290, 0.031, 0.471],
        [0.576, 0.277, 0.029, 0.118],
        [0.317, 0.478, 0.044, 0.161],
    ];
    // slopes of female, books, edu_goal, mother_edu, father_edu, non_native
    let slopes = [
        [
            [0.34, -0.01, 0.01, -0.31, -0.12, -0.43],
            [-1.07, -0.35, -0.86, -0.33, -0.13, -0.15],
            [0.11, -0.17, 0.21, 0.0, -0.16, -0.41],
        ],
        [
            [0.18, -0.13, 0.01, 0.04, 0.02, -0.11],
            [-0.67, -0.27, -0.55, 0.09, -0.17, -0.34],
            [-0.28, -0.09, -0.31, 0.19, 0.02, 0.29],
        ],
        [
            [0.28, -0.08, 0.12, 0.04, -0.10, -0.41],
            [-0.62, -0.37, -0.54, -0.03, -0.13, -0.10],
            [-0.26, -0.09, -0.43, 0.18, 0.04, 0.0],
        ],
    ];
    let mut gamma = Array2::zeros((9, 7));
    for m in 0..3 {
        for t in 1..4 {
            let r = gamma_row(4, m, t);
            gamma[[r, 0]] = (pi[m][t] / pi[m][0]).ln();
            for k in 0..6 {
                gamma[[r, k + 1]] = slopes[m][t - 1][k];
            }
        }
    }
    let omega = Array1::from_vec(vec![2.0 / 24.0, 9.0 / 24.0, 13.0 / 24.0]);
    ModelParams::new(
        MeasurementParams::new(phi).expect("interior"),
        StructuralParams::conditional(omega, gamma, 4).expect("valid"),
    )
    .expect("consistent")
}

/// Synthetic data shaped like the citizenship-norms survey: 24 groups of
/// 1313 to 7049 respondents, 12 items, 6 covariates plus intercept.
pub fn iccs_like(seed: u64) -> Result<(Dataset, ModelParams)> {
    let truth = iccs_truth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_from(
        &truth,
        &ICCS_GROUP_SIZES,
        Some(&ICCS_GROUP_CLASSES),
        |r| {
            let books: f64 = StandardNormal.sample(r);
            vec![
                f64::from(r.random_bool(0.5)),
                books,
                f64::from(r.random_bool(0.6)),
                f64::from(r.random_bool(0.45)),
                f64::from(r.random_bool(0.4)),
                f64::from(r.random_bool(0.12)),
            ]
        },
        &mut rng,
    )?;
    Ok((data, truth))
}

/// Per-replicate, per-parameter outcome.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub condition: usize,
    pub replicate: usize,
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: f64,
    pub covered: bool,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRecord {
    pub condition: usize,
    pub replicate: usize,
    pub method: Method,
    pub seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub condition: usize,
    pub replicate: usize,
    pub method: Method,
    pub message: String,
}

/// Aggregate over replicates for one condition, method and parameter.
#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub condition: usize,
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    /// SD relative to the one-step SD of the same parameter.
    pub rel_sd: f64,
    pub coverage: f64,
    pub convergence_rate: f64,
    pub unreliable: bool,
}

/// Condition x method summary over the slope parameters.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub condition: usize,
    pub method: Method,
    pub mean_slope_bias: f64,
    pub max_abs_slope_bias: f64,
    pub mean_slope_rel_sd: f64,
    pub mean_slope_coverage: f64,
    pub mean_seconds: f64,
    pub mean_iterations: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StudyMetrics {
    pub records: Vec<ReplicateRecord>,
    pub timings: Vec<TimingRecord>,
    pub failures: Vec<FailureRecord>,
    pub cells: Vec<CellMetrics>,
    pub summaries: Vec<MethodSummary>,
}

impl StudyMetrics {
    pub fn summary(&self, condition: usize, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.condition == condition && s.method == method)
    }

    pub fn cell(&self, condition: usize, method: Method, parameter: &str) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.method == method && c.parameter == parameter)
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub conditions: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Threads across replicates; 1 runs everything in order.
    pub workers: usize,
    pub ctrl: EmControl,
}

impl StudyConfig {
    pub fn new(conditions: Vec<usize>, replicates: usize, seed: u64) -> Self {
        StudyConfig {
            conditions,
            replicates,
            methods: Method::ALL.to_vec(),
            seed,
            workers: 1,
            ctrl: EmControl {
                n_starts: 1,
                parallel: false,
                ..EmControl::default()
            },
        }
    }
}

struct ReplicateOutcome {
    records: Vec<ReplicateRecord>,
    timings: Vec<TimingRecord>,
    failures: Vec<FailureRecord>,
}

fn run_replicate(cond: &SimCondition, rep: usize, cfg: &StudyConfig) -> ReplicateOutcome {
    let seed = replicate_seed(cfg.seed, cond.id, rep);
    let mut out = ReplicateOutcome {
        records: vec![],
        timings: vec![],
        failures: vec![],
    };
    let fail_all = |out: &mut ReplicateOutcome, msg: String| {
        for &method in &cfg.methods {
            out.failures.push(FailureRecord {
                condition: cond.id,
                replicate: rep,
                method,
                message: msg.clone(),
            });
        }
    };
    let (data, truth) = match generate(cond, seed) {
        Ok(v) => v,
        Err(e) => {
            fail_all(&mut out, e.to_string());
            return out;
        }
    };
    let dims = cond.dims();
    let ctrl = EmControl {
        seed,
        ..cfg.ctrl.clone()
    };
    let fits = match estimators::fit_methods(&data, &dims, &ctrl, &cfg.methods) {
        Ok(f) => f,
        Err(e) => {
            fail_all(&mut out, e.to_string());
            return out;
        }
    };
    let labels = estimators::theta2_labels(&dims, &["intercept".into(), "z".into()]);
    let truth_theta = truth.theta2();
    for (&method, fit) in cfg.methods.iter().zip(fits) {
        match fit {
            Ok(fit) => {
                let fit: FitResult = estimators::align_fit(&fit, &truth);
                for (p, label) in labels.iter().enumerate() {
                    let est = fit.theta2[p];
                    let se = fit.se[p];
                    out.records.push(ReplicateRecord {
                        condition: cond.id,
                        replicate: rep,
                        method,
                        parameter: label.clone(),
                        truth: truth_theta[p],
                        estimate: est,
                        se,
                        covered: (est - truth_theta[p]).abs() <= 1.96 * se,
                        converged: fit.converged,
                        iterations: fit.total_iterations(),
                    });
                }
                out.timings.push(TimingRecord {
                    condition: cond.id,
                    replicate: rep,
                    method,
                    seconds: fit.total_elapsed(),
                    iterations: fit.total_iterations(),
                });
            }
            Err(e) => out.failures.push(FailureRecord {
                condition: cond.id,
                replicate: rep,
                method,
                message: e.to_string(),
            }),
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Aggregates per-replicate records. Records are sorted first so the result does
/// not depend on the order replicates finished in.
pub fn aggregate(
    mut records: Vec<ReplicateRecord>,
    mut timings: Vec<TimingRecord>,
    mut failures: Vec<FailureRecord>,
    replicates: usize,
) -> StudyMetrics {
    records.sort_by(|a, b| {
        (a.condition, a.method, a.replicate, &a.parameter).cmp(&(b.condition, b.method, b.replicate, &b.parameter))
    });
    timings.sort_by_key(|t| (t.condition, t.method, t.replicate));
    failures.sort_by_key(|f| (f.condition, f.method, f.replicate));

    type Key = (usize, Method, String);
    let mut groups: BTreeMap<Key, Vec<&ReplicateRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.condition, r.method, r.parameter.clone())).or_default().push(r);
    }
    let failed = |c: usize, m: Method| failures.iter().filter(|f| f.condition == c && f.method == m).count();

    let mut sds: BTreeMap<Key, f64> = BTreeMap::new();
    for (key, rows) in &groups {
        let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
        sds.insert(key.clone(), sd(&est));
    }
    let mut cells = Vec::new();
    for ((c, m, p), rows) in &groups {
        let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
        let truth = rows[0].truth;
        let n_failed = failed(*c, *m);
        let one = sds.get(&(*c, Method::OneStep, p.clone())).copied().unwrap_or(f64::NAN);
        let this_sd = sds[&(*c, *m, p.clone())];
        cells.push(CellMetrics {
            condition: *c,
            method: *m,
            parameter: p.clone(),
            truth,
            n_ok: rows.len(),
            n_failed,
            mean_estimate: mean(&est),
            bias: mean(&est) - truth,
            sd: this_sd,
            mean_se: mean(&rows.iter().map(|r| r.se).collect::<Vec<_>>()),
            rel_sd: this_sd / one,
            coverage: rows.iter().filter(|r| r.covered).count() as f64 / rows.len() as f64,
            convergence_rate: rows.iter().filter(|r| r.converged).count() as f64 / rows.len() as f64,
            unreliable: n_failed as f64 > 0.2 * replicates as f64,
        });
    }

    let mut summaries = Vec::new();
    let mut pairs: Vec<(usize, Method)> = cells.iter().map(|c| (c.condition, c.method)).collect();
    pairs.dedup();
    for (c, m) in pairs {
        let slopes: Vec<&CellMetrics> = cells
            .iter()
            .filter(|x| x.condition == c && x.method == m && !x.parameter.ends_with(":intercept") && x.parameter.starts_with("gamma"))
            .collect();
        let t: Vec<&TimingRecord> = timings.iter().filter(|t| t.condition == c && t.method == m).collect();
        summaries.push(MethodSummary {
            condition: c,
            method: m,
            mean_slope_bias: mean(&slopes.iter().map(|s| s.bias).collect::<Vec<_>>()),
            max_abs_slope_bias: slopes.iter().map(|s| s.bias.abs()).fold(0.0, f64::max),
            mean_slope_rel_sd: mean(&slopes.iter().map(|s| s.rel_sd).collect::<Vec<_>>()),
            mean_slope_coverage: mean(&slopes.iter().map(|s| s.coverage).collect::<Vec<_>>()),
            mean_seconds: mean(&t.iter().map(|t| t.seconds).collect::<Vec<_>>()),
            mean_iterations: mean(&t.iter().map(|t| t.iterations as f64).collect::<Vec<_>>()),
            n_ok: t.len(),
            n_failed: failed(c, m),
        });
    }
    StudyMetrics {
        records,
        timings,
        failures,
        cells,
        summaries,
    }
}

/// Runs the Monte Carlo study.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyMetrics> {
    if cfg.replicates < 2 {
        return Err(MlcaError::InvalidInput("a study needs at least two replicates".into()));
    }
    let conditions: Vec<SimCondition> = cfg
        .conditions
        .iter()
        .map(|&id| SimCondition::from_id(id))
        .collect::<Result<_>>()?;
    let jobs: Vec<(SimCondition, usize)> = conditions
        .iter()
        .flat_map(|c| (0..cfg.replicates).map(move |r| (*c, r)))
        .collect();
    let outcomes: Vec<ReplicateOutcome> = if cfg.workers <= 1 {
        jobs.iter().map(|(c, r)| run_replicate(c, *r, cfg)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| MlcaError::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(|(c, r)| run_replicate(c, *r, cfg)).collect())
    };
    let mut records = vec![];
    let mut timings = vec![];
    let mut failures = vec![];
    for o in outcomes {
        records.extend(o.records);
        timings.extend(o.timings);
        failures.extend(o.failures);
    }
    for f in &failures {
        log::warn!("condition {} replicate {} {}: {}", f.condition, f.replicate, f.method, f.message);
    }
    Ok(aggregate(records, timings, failures, cfg.replicates))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> MlcaError {
    MlcaError::Io(std::io::Error::other(e.to_string()))
}

/// Writes the study tables into `dir`. Timing goes to separate files so the
/// other outputs are reproducible byte for byte.
pub fn write_study(metrics: &StudyMetrics, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("replicates.csv"), &metrics.records)?;
    write_csv(&dir.join("aggregate.csv"), &metrics.cells)?;
    write_csv(&dir.join("failures.csv"), &metrics.failures)?;
    write_csv(&dir.join("timing.csv"), &metrics.timings)?;

    #[derive(Serialize)]
    struct TimingSummary {
        condition: usize,
        method: Method,
        mean_seconds: f64,
        mean_iterations: f64,
    }
    let ts: Vec<TimingSummary> = metrics
        .summaries
        .iter()
        .map(|s| TimingSummary {
            condition: s.condition,
            method: s.method,
            mean_seconds: s.mean_seconds,
            mean_iterations: s.mean_iterations,
        })
        .collect();
    write_csv(&dir.join("timing_summary.csv"), &ts)?;

    let mut long = std::fs::File::create(dir.join("long.csv"))?;
    writeln!(long, "condition,method,parameter,metric,value")?;
    for c in &metrics.cells {
        for (name, value) in [
            ("bias", c.bias),
            ("sd", c.sd),
            ("mean_se", c.mean_se),
            ("rel_sd", c.rel_sd),
            ("coverage", c.coverage),
            ("convergence_rate", c.convergence_rate),
        ] {
            writeln!(long, "{},{},{},{},{}", c.condition, c.method, c.parameter, name, value)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_table() {
        let c1 = SimCondition::from_id(1).unwrap();
        assert_eq!((c1.group_size, c1.n_groups, c1.phi_high, c1.hl_separation), (100, 30, 0.7, HlSeparation::Moderate));
        let c19 = SimCondition::from_id(19).unwrap();
        assert_eq!((c19.group_size, c19.n_groups, c19.ll_separation()), (100, 30, "small"));
        assert_eq!(c19.hl_separation, HlSeparation::Large);
        let c36 = SimCondition::from_id(36).unwrap();
        assert_eq!((c36.group_size, c36.n_groups, c36.phi_high), (500, 100, 0.9));
        let c14 = SimCondition::from_id(14).unwrap();
        assert_eq!((c14.group_size, c14.n_groups, c14.ll_separation()), (500, 30, "large"));
        assert!(SimCondition::from_id(0).is_err() && SimCondition::from_id(37).is_err());
        assert_eq!(SimCondition::all().len(), 36);
    }

    #[test]
    fn generation_is_deterministic() {
        let c = SimCondition::from_id(7).unwrap();
        let (a, _) = generate(&c, 42).unwrap();
        let (b, _) = generate(&c, 42).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.z(), b.z());
        let (d, _) = generate(&c, 43).unwrap();
        assert_ne!(a.y(), d.y());
    }

    #[test]
    fn replicate_seeds_differ() {
        let s: std::collections::HashSet<u64> =
            (0..50).flat_map(|r| (1..=36).map(move |c| replicate_seed(7, c, r))).collect();
        assert_eq!(s.len(), 50 * 36);
    }

    #[test]
    fn iccs_design_shape() {
        let t = iccs_truth();
        assert_eq!(t.n_low(), 4);
        assert_eq!(t.n_high(), 3);
        let pi = t.structural.pi();
        assert!((pi[[0, 3]] - 0.471).abs() < 1e-3);
        assert!((pi[[1, 0]] - 0.576).abs() < 1e-9);
        assert_eq!(ICCS_GROUP_SIZES.len(), 24);
        assert_eq!(ICCS_GROUP_CLASSES.iter().filter(|&&c| c == 1).count(), 9);
    }
}
