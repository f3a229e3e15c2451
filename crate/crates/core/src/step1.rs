//! EM for the multilevel model without covariates (the measurement step).

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

use crate::error::{Level, MlcaError, Result};
use crate::model::{Dataset, MeasurementParams, ModelDims, ModelParams, StructuralParams};
use crate::numeric::{self, clamp_prob};
use crate::posterior::{self, Posteriors};

/// Iteration control shared by every EM routine.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmControl {
    pub max_iter: usize,
    /// Threshold on `|l_k - l_{k-1}| / (1 + |l_k|)`.
    pub tol: f64,
    /// Random starts in addition to the hierarchical start.
    pub n_starts: usize,
    pub seed: u64,
    /// Evaluate groups and starts on the rayon pool.
    pub parallel: bool,
}

impl Default for EmControl {
    fn default() -> Self {
        EmControl {
            max_iter: 1000,
            tol: 1e-8,
            n_starts: 10,
            seed: 0,
            parallel: true,
        }
    }
}

impl EmControl {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(MlcaError::InvalidInput("max_iter must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(MlcaError::InvalidInput("tol must be positive".into()));
        }
        Ok(())
    }

    pub fn has_converged(&self, previous: f64, current: f64) -> bool {
        (current - previous).abs() / (1.0 + current.abs()) < self.tol
    }
}

/// Blocks updated by an M-step; the rest stay fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub omega: bool,
    pub pi: bool,
    pub phi: bool,
}

impl UpdateMask {
    pub const ALL: UpdateMask = UpdateMask {
        omega: true,
        pi: true,
        phi: true,
    };
}

/// Weighted-mean updates of `(omega, Pi, Phi)` from posteriors.
pub fn m_step_unconditional(post: &Posteriors, data: &Dataset) -> Result<ModelParams> {
    let (omega, pi) = update_structural(post)?;
    let phi = update_phi(post, data)?;
    ModelParams::new(phi, StructuralParams::unconditional(omega, pi)?)
}

/// `omega_m = mean_j u[j, m]`, `pi[m, t] = sum_i v[i, t, m] / sum_{i, t} v[i, t, m]`.
pub(crate) fn update_structural(post: &Posteriors) -> Result<(Array1<f64>, Array2<f64>)> {
    let omega = update_omega(post)?;
    let mass_tm = post.v.sum_axis(Axis(0)); // T x M
    let (t_count, m_count) = mass_tm.dim();
    let mut pi = Array2::zeros((m_count, t_count));
    for m in 0..m_count {
        let denom: f64 = mass_tm.column(m).sum();
        if denom < 1e-12 {
            return Err(MlcaError::DegenerateClass {
                level: Level::High,
                index: m,
                mass: denom,
            });
        }
        for t in 0..t_count {
            pi[[m, t]] = clamp_prob(mass_tm[[t, m]] / denom);
        }
        numeric::normalize_simplex(pi.row_mut(m).into_slice().expect("row-major"));
    }
    Ok((omega, pi))
}

pub(crate) fn update_omega(post: &Posteriors) -> Result<Array1<f64>> {
    let n_groups = post.u.nrows() as f64;
    let mass = post.u.sum_axis(Axis(0));
    if let Some((m, &w)) = mass.iter().enumerate().find(|(_, &w)| w < 1e-12) {
        return Err(MlcaError::DegenerateClass {
            level: Level::High,
            index: m,
            mass: w,
        });
    }
    let mut omega = mass / n_groups;
    numeric::normalize_simplex(omega.as_slice_mut().expect("contiguous"));
    Ok(omega)
}

/// `phi[h, t] = sum_{i, m} v y_ih / sum_{i, m} v`.
pub(crate) fn update_phi(post: &Posteriors, data: &Dataset) -> Result<MeasurementParams> {
    let w = post.low_marginal(); // N x T
    let denom = w.sum_axis(Axis(0));
    if let Some((t, &d)) = denom.iter().enumerate().find(|(_, &d)| d < 1e-12) {
        return Err(MlcaError::DegenerateClass {
            level: Level::Low,
            index: t,
            mass: d,
        });
    }
    let numer = data.y_f64().t().dot(&w); // H x T
    let phi = Array2::from_shape_fn(numer.dim(), |(h, t)| numer[[h, t]] / denom[t]);
    MeasurementParams::new(phi.mapv(|p| p.clamp(0.0, 1.0)))
}

/// One EM run from a single starting point.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: ModelParams,
    pub posteriors: Posteriors,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

impl EmRun {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the starting value")
    }
}

/// EM on the model without covariates; blocks outside `mask` stay at their start values.
pub fn run_em_unconditional(
    data: &Dataset,
    start: &ModelParams,
    ctrl: &EmControl,
    mask: UpdateMask,
) -> Result<EmRun> {
    ctrl.validate()?;
    start.check_against(data)?;
    let mut params = ModelParams::new(start.measurement.clone(), start.structural.to_unconditional())?;
    let mut logf = posterior::item_logdensity(data, &params.measurement);
    let mut post = posterior::e_step_with(data, logf.view(), &params.structural, ctrl.parallel)?;
    let mut trace = vec![post.loglik];
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < ctrl.max_iter {
        n_iter += 1;
        let structural = if mask.omega || mask.pi {
            let (omega, pi) = update_structural(&post)?;
            let omega = if mask.omega { omega } else { params.structural.omega().to_owned() };
            let pi = if mask.pi { pi } else { params.structural.pi() };
            StructuralParams::unconditional(omega, pi)?
        } else {
            params.structural.clone()
        };
        let measurement = if mask.phi {
            update_phi(&post, data)?
        } else {
            params.measurement.clone()
        };
        if mask.phi {
            logf = posterior::item_logdensity(data, &measurement);
        }
        params = ModelParams::new(measurement, structural)?;
        post = posterior::e_step_with(data, logf.view(), &params.structural, ctrl.parallel)?;
        let previous = *trace.last().unwrap();
        trace.push(post.loglik);
        if ctrl.has_converged(previous, post.loglik) {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params,
        posteriors: post,
        loglik_trace: trace,
        converged,
        n_iter,
    })
}

/// Best of the multi-start EM runs.
#[derive(Debug, Clone)]
pub struct Step1Fit {
    pub params: ModelParams,
    pub posteriors: Posteriors,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// 0 is the supplied start; `k >= 1` the k-th random start.
    pub best_start_index: usize,
    /// Final log-likelihood per start, `None` where the start failed.
    pub start_logliks: Vec<Option<f64>>,
    pub elapsed: f64,
}

impl Step1Fit {
    pub fn loglik(&self) -> f64 {
        self.posteriors.loglik
    }
}

/// Random interior starting point.
pub fn random_start(dims: &ModelDims, rng: &mut impl Rng) -> ModelParams {
    let mut dirichlet = |len: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let omega = Array1::from(dirichlet(dims.n_high));
    let pi_rows: Vec<f64> = (0..dims.n_high).flat_map(|_| dirichlet(dims.n_low)).collect();
    let pi = Array2::from_shape_vec((dims.n_high, dims.n_low), pi_rows).expect("shape");
    let phi = Array2::from_shape_fn((dims.n_items, dims.n_low), |_| rng.random_range(0.1..0.9));
    ModelParams::new(
        MeasurementParams::new(phi).expect("interior"),
        StructuralParams::unconditional(omega, pi).expect("simplex"),
    )
    .expect("consistent")
}

/// `init` followed by `ctrl.n_starts` random starts drawn from `ctrl.seed`.
pub fn start_points(init: &ModelParams, dims: &ModelDims, ctrl: &EmControl) -> Vec<ModelParams> {
    let mut starts = vec![init.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(ctrl.seed ^ 0x5eed_0001);
    for _ in 0..ctrl.n_starts {
        starts.push(random_start(dims, &mut rng));
    }
    starts
}

/// Fits the model without covariates from `init` plus `ctrl.n_starts` random
/// starts, keeping the run with the highest final log-likelihood.
pub fn fit_unconditional(
    data: &Dataset,
    dims: &ModelDims,
    init: &ModelParams,
    ctrl: &EmControl,
) -> Result<Step1Fit> {
    let started = Instant::now();
    ctrl.validate()?;
    let starts = start_points(init, dims, ctrl);
    let inner = EmControl {
        parallel: ctrl.parallel && starts.len() == 1,
        ..ctrl.clone()
    };
    let runs: Vec<Result<EmRun>> = if ctrl.parallel && starts.len() > 1 {
        starts
            .par_iter()
            .map(|s| run_em_unconditional(data, s, &inner, UpdateMask::ALL))
            .collect()
    } else {
        starts
            .iter()
            .map(|s| run_em_unconditional(data, s, &inner, UpdateMask::ALL))
            .collect()
    };

    let start_logliks: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().ok().map(EmRun::loglik))
        .collect();
    let mut best: Option<(usize, EmRun)> = None;
    let mut last_error = None;
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| run.loglik() > b.loglik());
                if better {
                    best = Some((k, run));
                }
            }
            Err(e) => {
                log::info!("EM start {k} aborted: {e}");
                last_error = Some(e);
            }
        }
    }
    let (best_start_index, run) = best.ok_or_else(|| MlcaError::AllStartsFailed {
        starts: start_logliks.len(),
        last: last_error.map(|e| e.to_string()).unwrap_or_default(),
    })?;
    Ok(Step1Fit {
        params: run.params,
        posteriors: run.posteriors,
        loglik_trace: run.loglik_trace,
        converged: run.converged,
        n_iter: run.n_iter,
        best_start_index,
        start_logliks,
        elapsed: started.elapsed().as_secs_f64(),
    })
}
