//! The two-step, one-step and two-stage estimators behind one result type.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{MlcaError, Result};
use crate::init::{self, HierarchicalInit};
use crate::model::{Dataset, MeasurementParams, ModelDims, ModelParams};
use crate::numeric;
use crate::posterior::Posteriors;
use crate::step1::{self, EmControl, Step1Fit, UpdateMask};
use crate::step2;
use crate::variance::{self, CovarianceEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TwoStep,
    OneStep,
    TwoStage,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::OneStep, Method::TwoStep, Method::TwoStage];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TwoStep => "two_step",
            Method::OneStep => "one_step",
            Method::TwoStage => "two_stage",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = MlcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "two_step" | "twostep" => Ok(Method::TwoStep),
            "one_step" | "onestep" => Ok(Method::OneStep),
            "two_stage" | "twostage" => Ok(Method::TwoStage),
            other => Err(MlcaError::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

/// Provenance of the reported structural covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Two-step covariance accounting for step-1 variability.
    Corrected,
    /// Inverse structural information alone.
    Naive,
    /// Structural block of the inverse full-model information.
    FullMl,
}

impl CovarianceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovarianceKind::Corrected => "corrected",
            CovarianceKind::Naive => "naive",
            CovarianceKind::FullMl => "full_ML",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub name: String,
    pub n_iter: usize,
    /// Wall-clock seconds.
    pub elapsed: f64,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
}

impl Phase {
    fn new(name: &str, n_iter: usize, elapsed: f64, converged: bool, loglik_trace: Vec<f64>) -> Self {
        Phase {
            name: name.to_string(),
            n_iter,
            elapsed,
            converged,
            loglik_trace,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub dims: ModelDims,
    /// Final estimates; the structural part is the covariate model.
    pub params: ModelParams,
    /// `(alpha, vec Gamma)` in score layout.
    pub theta2: Vec<f64>,
    /// Finite-sample covariance of `theta2`.
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    pub se: Vec<f64>,
    /// Uncorrected standard errors where a correction applies.
    pub naive_se: Option<Vec<f64>>,
    /// Full correction pieces for the two-step estimator.
    pub corrected: Option<CovarianceEstimate>,
    pub loglik: f64,
    pub phases: Vec<Phase>,
    pub converged: bool,
    pub posteriors: Posteriors,
}

impl FitResult {
    /// `vec(Phi)` column-major, item fastest.
    pub fn theta1(&self) -> Vec<f64> {
        let phi = self.params.measurement.phi();
        (0..phi.ncols()).flat_map(|t| (0..phi.nrows()).map(move |h| phi[[h, t]])).collect()
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.n_iter).sum()
    }

    pub fn total_elapsed(&self) -> f64 {
        self.phases.iter().map(|p| p.elapsed).sum()
    }

    pub fn phase(&self, name: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.name == name)
    }

    /// Relabels classes with `perm[new] = old` and carries the covariance along.
    pub fn relabeled(&self, low_perm: &[usize], high_perm: &[usize]) -> FitResult {
        let dims = &self.dims;
        let (t, m, k) = (dims.n_low, dims.n_high, dims.n_covariates);
        let p = self.theta2.len();
        let a = DMatrix::from_fn(p, p, |r, c| {
            let mut e = vec![0.0; p];
            e[c] = 1.0;
            relabel_theta2(&e, t, m, k, low_perm, high_perm)[r]
        });
        let covariance = numeric::symmetrize(&a * &self.covariance * a.transpose());
        let se = diag_sqrt(&covariance);
        let corrected = self.corrected.as_ref().map(|c| {
            let n = c.n_units;
            let v2 = numeric::symmetrize(&a * &c.v2 * a.transpose());
            let v1 = numeric::symmetrize(&a * &c.v1 * a.transpose());
            let v = &v2 + &v1;
            CovarianceEstimate {
                n_units: n,
                i22: c.i22.clone(),
                i21: c.i21.clone(),
                sigma11: c.sigma11.clone(),
                se: diag_sqrt(&(&v / n as f64)),
                naive_se: diag_sqrt(&(&v2 / n as f64)),
                v2,
                v1,
                v,
            }
        });
        let naive_se = match (&self.naive_se, &corrected) {
            (Some(_), Some(c)) => Some(c.naive_se.clone()),
            (Some(_), None) => Some(se.clone()),
            _ => None,
        };
        FitResult {
            method: self.method,
            dims: self.dims.clone(),
            params: self.params.permuted(low_perm, high_perm),
            theta2: relabel_theta2(&self.theta2, t, m, k, low_perm, high_perm),
            covariance,
            covariance_kind: self.covariance_kind,
            se,
            naive_se,
            corrected,
            loglik: self.loglik,
            phases: self.phases.clone(),
            converged: self.converged,
            posteriors: self.posteriors.permuted(low_perm, high_perm),
        }
    }
}

fn diag_sqrt(c: &DMatrix<f64>) -> Vec<f64> {
    (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect()
}

/// Applies a class relabeling to a structural vector `(alpha, vec Gamma)`. The map is linear.
pub fn relabel_theta2(
    v: &[f64],
    n_low: usize,
    n_high: usize,
    n_cov: usize,
    low_perm: &[usize],
    high_perm: &[usize],
) -> Vec<f64> {
    let alpha = |m: usize| if m == 0 { 0.0 } else { v[m - 1] };
    let gamma = |m: usize, t: usize, k: usize| {
        if t == 0 {
            0.0
        } else {
            v[n_high - 1 + (m * (n_low - 1) + t - 1) * n_cov + k]
        }
    };
    let mut out = Vec::with_capacity(v.len());
    for new_m in 1..n_high {
        out.push(alpha(high_perm[new_m]) - alpha(high_perm[0]));
    }
    for new_m in 0..n_high {
        let old_m = high_perm[new_m];
        for new_t in 1..n_low {
            for k in 0..n_cov {
                out.push(gamma(old_m, low_perm[new_t], k) - gamma(old_m, low_perm[0], k));
            }
        }
    }
    out
}

/// Names of the structural parameters in score layout, classes 1-based.
pub fn theta2_labels(dims: &ModelDims, covariates: &[String]) -> Vec<String> {
    let mut out: Vec<String> = (1..dims.n_high).map(|m| format!("alpha[HL{}]", m + 1)).collect();
    for m in 0..dims.n_high {
        for t in 1..dims.n_low {
            for k in 0..dims.n_covariates {
                let name = covariates.get(k).cloned().unwrap_or_else(|| format!("z{k}"));
                out.push(format!("gamma[HL{},LL{}]:{}", m + 1, t + 1, name));
            }
        }
    }
    out
}

/// Positions of the non-intercept Gamma entries in `theta2`.
pub fn slope_indices(dims: &ModelDims) -> Vec<usize> {
    let base = dims.n_high - 1;
    (0..dims.n_gamma())
        .filter(|i| i % dims.n_covariates != 0)
        .map(|i| base + i)
        .collect()
}

/// Total variation distance between two item-profile columns, mean over items.
fn profile_distance(a: &MeasurementParams, ta: usize, b: &MeasurementParams, tb: usize) -> f64 {
    let (pa, pb) = (a.phi(), b.phi());
    let h = pa.nrows();
    (0..h).map(|i| (pa[[i, ta]] - pb[[i, tb]]).abs()).sum::<f64>() / h as f64
}

/// Permutations `(low, high)` with `perm[new] = old` that best match `reference`.
/// Low-level classes are matched on item profiles, high-level classes on the
/// logit intercepts after the low-level relabeling.
pub fn align_to_reference(fit: &ModelParams, reference: &ModelParams) -> (Vec<usize>, Vec<usize>) {
    let t_count = fit.n_low();
    let m_count = fit.n_high();
    let low = numeric::permutations(t_count)
        .into_iter()
        .min_by(|a, b| {
            let cost = |p: &Vec<usize>| -> f64 {
                (0..t_count)
                    .map(|t| profile_distance(&fit.measurement, p[t], &reference.measurement, t))
                    .sum()
            };
            cost(a).total_cmp(&cost(b))
        })
        .expect("at least one class");
    let identity: Vec<usize> = (0..m_count).collect();
    let relabeled = fit.structural.permuted(&low, &identity).to_conditional(1);
    let reference_cond = reference.structural.to_conditional(1);
    let intercepts = |s: &crate::model::StructuralParams, m: usize| -> Vec<f64> {
        let g = s.gamma().expect("conditional");
        (1..t_count).map(|t| g[[crate::model::gamma_row(t_count, m, t), 0]]).collect()
    };
    let high = numeric::permutations(m_count)
        .into_iter()
        .min_by(|a, b| {
            let cost = |p: &Vec<usize>| -> f64 {
                (0..m_count)
                    .map(|m| {
                        let x = intercepts(&relabeled, p[m]);
                        let y = intercepts(&reference_cond, m);
                        x.iter().zip(&y).map(|(u, v)| (u - v).abs()).sum::<f64>()
                            + (fit.structural.omega()[p[m]] - reference.structural.omega()[m]).abs()
                    })
                    .sum()
            };
            cost(a).total_cmp(&cost(b))
        })
        .expect("at least one class");
    (low, high)
}

/// Permutations putting low-level classes in decreasing order of mean item
/// probability and high-level classes in decreasing order of weight.
pub fn canonical_order(params: &ModelParams) -> (Vec<usize>, Vec<usize>) {
    let low = init::reorder_permutation(&params.measurement);
    let omega = params.structural.omega();
    let mut high: Vec<usize> = (0..omega.len()).collect();
    high.sort_by(|&a, &b| omega[b].total_cmp(&omega[a]));
    (low, high)
}

/// Relabels `fit` to match `reference`.
pub fn align_fit(fit: &FitResult, reference: &ModelParams) -> FitResult {
    let (low, high) = align_to_reference(&fit.params, reference);
    fit.relabeled(&low, &high)
}

/// Pieces shared by all estimators on one dataset.
struct Shared {
    plain: Dataset,
    init: HierarchicalInit,
    init_elapsed: f64,
    step1: Option<Step1Fit>,
}

fn check_inputs(data: &Dataset, dims: &ModelDims) -> Result<()> {
    if dims.n_covariates != data.n_covariates() || dims.n_items != data.n_items() {
        return Err(MlcaError::DimensionMismatch(format!(
            "dims expect H={} K={}, data has H={} K={}",
            dims.n_items,
            dims.n_covariates,
            data.n_items(),
            data.n_covariates()
        )));
    }
    if dims.group_sizes != data.group_sizes() {
        return Err(MlcaError::DimensionMismatch("group sizes differ from the dataset".into()));
    }
    data.require_full_rank_design()
}

fn shared(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, need_step1: bool) -> Result<Shared> {
    check_inputs(data, dims)?;
    let plain = data.intercept_only();
    let started = Instant::now();
    let init = init::hierarchical_init_detailed(&plain, dims, ctrl)?;
    let init_elapsed = started.elapsed().as_secs_f64();
    let step1 = if need_step1 {
        Some(step1::fit_unconditional(&plain, dims, &init.params, ctrl)?)
    } else {
        None
    };
    Ok(Shared {
        plain,
        init,
        init_elapsed,
        step1,
    })
}

fn init_phase(s: &Shared) -> Phase {
    Phase::new("init", s.init.pooled.n_iter, s.init_elapsed, s.init.pooled.converged, s.init.pooled.loglik_trace.clone())
}

fn step1_phase(fit: &Step1Fit) -> Phase {
    Phase::new("step1", fit.n_iter, fit.elapsed, fit.converged, fit.loglik_trace.clone())
}

fn two_step(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, s: &Shared) -> Result<FitResult> {
    let s1 = s.step1.as_ref().expect("step 1 ran");
    let start = step2::step2_start(&s1.params.structural, data.n_covariates());
    let s2 = step2::fit_structural_from(data, &s1.params.measurement, &start, Some(&s1.posteriors), ctrl)?;

    let started = Instant::now();
    let scores1 = variance::score_step1(&s.plain, &s1.params, &s1.posteriors)?;
    let params = s2.params();
    let scores2 = variance::score_step2(data, &params, &s2.posteriors)?;
    let cov = variance::corrected_covariance(&scores1, &scores2)?;
    let cov_elapsed = started.elapsed().as_secs_f64();

    Ok(FitResult {
        method: Method::TwoStep,
        dims: dims.clone(),
        theta2: params.theta2(),
        covariance: cov.covariance(),
        covariance_kind: CovarianceKind::Corrected,
        se: cov.se.clone(),
        naive_se: Some(cov.naive_se.clone()),
        loglik: s2.loglik(),
        phases: vec![
            init_phase(s),
            step1_phase(s1),
            Phase::new("step2", s2.n_iter, s2.elapsed, s2.converged, s2.loglik_trace.clone()),
            Phase::new("covariance", 0, cov_elapsed, true, vec![]),
        ],
        converged: s1.converged && s2.converged,
        corrected: Some(cov),
        params,
        posteriors: s2.posteriors,
    })
}

fn one_step(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, s: &Shared) -> Result<FitResult> {
    // same starting points as step 1, converted to the covariate model
    let starts: Vec<ModelParams> = step1::start_points(&s.init.params, dims, ctrl)
        .into_iter()
        .map(|p| {
            let structural = step2::step2_start(&p.structural, data.n_covariates());
            ModelParams::new(p.measurement, structural)
        })
        .collect::<Result<_>>()?;
    let started = Instant::now();
    let (run, _) = step2::fit_joint(data, &starts, ctrl)?;
    let joint_elapsed = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let scores = variance::score_contributions(data, &run.params, &run.posteriors);
    let covariance = variance::full_theta2_covariance(&scores)?;
    let cov_elapsed = started.elapsed().as_secs_f64();

    Ok(FitResult {
        method: Method::OneStep,
        dims: dims.clone(),
        theta2: run.params.theta2(),
        se: diag_sqrt(&covariance),
        covariance,
        covariance_kind: CovarianceKind::FullMl,
        naive_se: None,
        corrected: None,
        loglik: run.posteriors.loglik,
        phases: vec![
            init_phase(s),
            Phase::new("joint", run.n_iter, joint_elapsed, run.converged, run.loglik_trace.clone()),
            Phase::new("covariance", 0, cov_elapsed, true, vec![]),
        ],
        converged: run.converged,
        params: run.params,
        posteriors: run.posteriors,
    })
}

fn two_stage(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, s: &Shared) -> Result<FitResult> {
    let started = Instant::now();
    let only_structure = UpdateMask { omega: true, pi: true, phi: false };
    let a = step1::run_em_unconditional(&s.plain, &s.init.params, ctrl, only_structure)?;
    let a_elapsed = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let only_items = UpdateMask { omega: false, pi: false, phi: true };
    let b = step1::run_em_unconditional(&s.plain, &a.params, ctrl, only_items)?;
    let b_elapsed = started.elapsed().as_secs_f64();

    let start = step2::step2_start(&b.params.structural, data.n_covariates());
    let stage_b = step2::fit_structural(data, &b.params.measurement, &start, ctrl)?;

    let started = Instant::now();
    let params = stage_b.params();
    let scores = variance::score_step2(data, &params, &stage_b.posteriors)?;
    let covariance = variance::naive_covariance(&scores)?;
    let cov_elapsed = started.elapsed().as_secs_f64();
    let se = diag_sqrt(&covariance);

    Ok(FitResult {
        method: Method::TwoStage,
        dims: dims.clone(),
        theta2: params.theta2(),
        naive_se: Some(se.clone()),
        se,
        covariance,
        covariance_kind: CovarianceKind::Naive,
        corrected: None,
        loglik: stage_b.loglik(),
        phases: vec![
            init_phase(s),
            Phase::new("stage2a", a.n_iter, a_elapsed, a.converged, a.loglik_trace.clone()),
            Phase::new("stage2b", b.n_iter, b_elapsed, b.converged, b.loglik_trace.clone()),
            Phase::new("stageB", stage_b.n_iter, stage_b.elapsed, stage_b.converged, stage_b.loglik_trace.clone()),
            Phase::new("covariance", 0, cov_elapsed, true, vec![]),
        ],
        converged: a.converged && b.converged && stage_b.converged,
        params,
        posteriors: stage_b.posteriors,
    })
}

/// Runs several estimators on one dataset, sharing the initialization and the
/// step-1 fit. Shared phases appear in each result with their full duration.
pub fn fit_methods(
    data: &Dataset,
    dims: &ModelDims,
    ctrl: &EmControl,
    methods: &[Method],
) -> Result<Vec<Result<FitResult>>> {
    let need_step1 = methods.contains(&Method::TwoStep);
    let s = shared(data, dims, ctrl, need_step1)?;
    Ok(methods
        .iter()
        .map(|m| {
            let fit = match m {
                Method::TwoStep => two_step(data, dims, ctrl, &s),
                Method::OneStep => one_step(data, dims, ctrl, &s),
                Method::TwoStage => two_stage(data, dims, ctrl, &s),
            }?;
            let (low, high) = canonical_order(&fit.params);
            let identity = low.iter().enumerate().all(|(i, &p)| i == p) && high.iter().enumerate().all(|(i, &p)| i == p);
            Ok(if identity { fit } else { fit.relabeled(&low, &high) })
        })
        .collect())
}

fn fit_single(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, method: Method) -> Result<FitResult> {
    fit_methods(data, dims, ctrl, &[method])?
        .pop()
        .expect("one method requested")
}

pub fn fit_two_step(data: &Dataset, dims: &ModelDims, ctrl: &EmControl) -> Result<FitResult> {
    fit_single(data, dims, ctrl, Method::TwoStep)
}

pub fn fit_one_step(data: &Dataset, dims: &ModelDims, ctrl: &EmControl) -> Result<FitResult> {
    fit_single(data, dims, ctrl, Method::OneStep)
}

pub fn fit_two_stage(data: &Dataset, dims: &ModelDims, ctrl: &EmControl) -> Result<FitResult> {
    fit_single(data, dims, ctrl, Method::TwoStage)
}

pub fn fit(data: &Dataset, dims: &ModelDims, ctrl: &EmControl, method: Method) -> Result<FitResult> {
    fit_single(data, dims, ctrl, method)
}
