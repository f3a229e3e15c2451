//! Structural step: EM for `(omega, Gamma)` with the measurement model held fixed.
//!
//! The M-step for `Gamma` splits into one weighted multinomial logit per
//! high-level class, solved by Fisher scoring with step halving.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use std::time::Instant;

use crate::error::{MlcaError, Result};
use crate::model::{Dataset, MeasurementParams, ModelParams, StructuralParams};
use crate::posterior::{self, Posteriors};
use crate::step1::{self, EmControl};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonControl {
    pub max_iter: usize,
    /// Exit threshold on the gradient infinity-norm.
    pub grad_tol: f64,
    pub max_halvings: usize,
    /// Coefficients are capped at this absolute value.
    pub coef_cap: f64,
}

impl Default for NewtonControl {
    fn default() -> Self {
        NewtonControl {
            max_iter: 100,
            grad_tol: 1e-8,
            max_halvings: 20,
            coef_cap: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// `(T-1) x K`, row `t-1` holds class `t` against class 0.
    pub gamma: Array2<f64>,
    pub n_iter: usize,
    pub grad_norm: f64,
    pub capped: bool,
}

/// `N x T` class probabilities and the weighted objective `sum_i sum_t w_it log pi_it`.
/// `w` must be in standard layout.
fn evaluate(z: ArrayView2<f64>, w: &Array2<f64>, r: &[f64], gamma: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = z.nrows();
    let t_count = w.ncols();
    let tm1 = t_count - 1;
    let eta = z.dot(&gamma.t());
    let eta = eta.as_standard_layout();
    let eta_s = eta.as_slice().expect("contiguous");
    let w_s = w.as_slice().expect("contiguous");
    let mut probs = Array2::zeros((n, t_count));
    let probs_s = probs.as_slice_mut().expect("contiguous");
    let mut obj = 0.0;
    for i in 0..n {
        let e = &eta_s[i * tm1..(i + 1) * tm1];
        let wi = &w_s[i * t_count..(i + 1) * t_count];
        let pi = &mut probs_s[i * t_count..(i + 1) * t_count];
        let mut mx = 0.0f64;
        let mut lin = 0.0;
        for t in 0..tm1 {
            mx = mx.max(e[t]);
            lin += wi[t + 1] * e[t];
        }
        pi[0] = (-mx).exp();
        let mut sum = pi[0];
        for t in 0..tm1 {
            pi[t + 1] = (e[t] - mx).exp();
            sum += pi[t + 1];
        }
        let inv = 1.0 / sum;
        for x in pi.iter_mut() {
            *x *= inv;
        }
        obj += lin - r[i] * (mx + sum.ln());
    }
    (probs, obj)
}

fn gradient(z: ArrayView2<f64>, w: &Array2<f64>, r: &[f64], probs: &Array2<f64>) -> Array2<f64> {
    let t_count = w.ncols();
    let mut resid = Array2::zeros((z.nrows(), t_count - 1));
    for (i, mut row) in resid.rows_mut().into_iter().enumerate() {
        for t in 1..t_count {
            row[t - 1] = w[[i, t]] - r[i] * probs[[i, t]];
        }
    }
    resid.t().dot(&z)
}

/// Expected information `sum_i r_i (diag(pi) - pi pi') (x) z z'` over classes `1..T`.
fn information(z: ArrayView2<f64>, r: &[f64], probs: &Array2<f64>) -> DMatrix<f64> {
    let k = z.ncols();
    let tm1 = probs.ncols() - 1;
    let p = tm1 * k;
    let mut info = DMatrix::zeros(p, p);
    let mut scaled = Array2::<f64>::zeros(z.raw_dim());
    for a in 0..tm1 {
        for b in a..tm1 {
            for (i, (mut srow, zrow)) in scaled.rows_mut().into_iter().zip(z.rows()).enumerate() {
                let pa = probs[[i, a + 1]];
                let c = r[i] * (if a == b { pa } else { 0.0 } - pa * probs[[i, b + 1]]);
                srow.zip_mut_with(&zrow, |s, &x| *s = c * x);
            }
            let block = scaled.t().dot(&z);
            for k1 in 0..k {
                for k2 in 0..k {
                    let x = block[[k1, k2]];
                    info[(a * k + k1, b * k + k2)] = x;
                    info[(b * k + k2, a * k + k1)] = x;
                }
            }
        }
    }
    info
}

fn solve_spd(info: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(ch.solve(g));
    }
    let n = info.nrows();
    let ridge = 1e-10 * (info.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut ridged = info.clone();
    for i in 0..n {
        ridged[(i, i)] += ridge;
    }
    ridged.cholesky().map(|ch| ch.solve(g))
}

fn inf_norm(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximizes `sum_i sum_t w_it log pi_t(z_i)` over the logit coefficients, where
/// `r_i = sum_t w_it`.
pub fn weighted_multinomial_fit(
    z: ArrayView2<f64>,
    w: ArrayView2<f64>,
    r: ArrayView1<f64>,
    init: ArrayView2<f64>,
    ctrl: &NewtonControl,
) -> Result<MultinomialFit> {
    let t_count = w.ncols();
    let k = z.ncols();
    if w.nrows() != z.nrows() || r.len() != z.nrows() || init.dim() != (t_count.saturating_sub(1), k) {
        return Err(MlcaError::DimensionMismatch(format!(
            "logit fit with z {:?}, weights {:?}, r {}, init {:?}",
            z.dim(),
            w.dim(),
            r.len(),
            init.dim()
        )));
    }
    let mut gamma = init.to_owned();
    let w = w.as_standard_layout().into_owned();
    let r = r.to_vec();
    let r = r.as_slice();
    if t_count < 2 {
        return Ok(MultinomialFit { gamma, n_iter: 0, grad_norm: 0.0, capped: false });
    }
    let total: f64 = r.iter().sum();
    if total < 1e-12 {
        log::warn!("logit fit with zero total weight; keeping the starting coefficients");
        return Ok(MultinomialFit { gamma, n_iter: 0, grad_norm: 0.0, capped: false });
    }
    let relaxed = 1e-6 * (1.0 + total);
    let (mut probs, mut obj) = evaluate(z, &w, r, &gamma);
    let mut capped = false;
    let mut grad_norm;
    for iter in 0..ctrl.max_iter {
        let grad = gradient(z, &w, r, &probs);
        grad_norm = inf_norm(&grad);
        if grad_norm < ctrl.grad_tol {
            return Ok(MultinomialFit { gamma, n_iter: iter, grad_norm, capped });
        }
        let info = information(z, r, &probs);
        let g = DVector::from_iterator(grad.len(), grad.iter().copied());
        let Some(delta) = solve_spd(&info, &g) else {
            return Err(MlcaError::SolverNotConverged { grad_norm });
        };
        let delta = Array2::from_shape_vec(gamma.raw_dim(), delta.iter().copied().collect()).expect("shape");

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=ctrl.max_halvings {
            let mut cand = &gamma + &(&delta * step);
            if cand.iter().any(|x| x.abs() > ctrl.coef_cap) {
                cand.mapv_inplace(|x| x.clamp(-ctrl.coef_cap, ctrl.coef_cap));
                if !capped {
                    log::warn!("logit coefficient capped at {}: quasi-separation", ctrl.coef_cap);
                }
                capped = true;
            }
            let (cand_probs, cand_obj) = evaluate(z, &w, r, &cand);
            if cand_obj >= obj - 1e-14 * (1.0 + obj.abs()) {
                gamma = cand;
                probs = cand_probs;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if grad_norm < relaxed || capped {
                return Ok(MultinomialFit { gamma, n_iter: iter + 1, grad_norm, capped });
            }
            return Err(MlcaError::SolverNotConverged { grad_norm });
        }
    }
    let grad = gradient(z, &w, r, &probs);
    grad_norm = inf_norm(&grad);
    if grad_norm < ctrl.grad_tol || capped {
        return Ok(MultinomialFit { gamma, n_iter: ctrl.max_iter, grad_norm, capped });
    }
    Err(MlcaError::SolverNotConverged { grad_norm })
}

/// Result of an EM run on the model with covariates.
#[derive(Debug, Clone)]
pub struct ConditionalEmRun {
    pub params: ModelParams,
    pub posteriors: Posteriors,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// Newton iterations summed over M-steps and high-level classes.
    pub newton_iter: usize,
}

/// Gamma M-step, one logit fit per high-level class.
fn update_gamma(
    data: &Dataset,
    post: &Posteriors,
    gamma: ArrayView2<f64>,
    n_low: usize,
    parallel: bool,
) -> Result<(Array2<f64>, usize)> {
    let n_high = post.u.ncols();
    let tm1 = n_low - 1;
    let newton = NewtonControl::default();
    let solve = |m: usize| -> Result<MultinomialFit> {
        let w = post.v.slice(s![.., .., m]);
        let r = w.sum_axis(Axis(1));
        let init = gamma.slice(s![m * tm1..(m + 1) * tm1, ..]);
        weighted_multinomial_fit(data.z(), w, r.view(), init, &newton)
    };
    let fits: Vec<Result<MultinomialFit>> = if parallel && n_high > 1 {
        (0..n_high).into_par_iter().map(solve).collect()
    } else {
        (0..n_high).map(solve).collect()
    };
    let mut out = Array2::zeros(gamma.raw_dim());
    let mut iters = 0;
    for (m, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        iters += fit.n_iter;
        out.slice_mut(s![m * tm1..(m + 1) * tm1, ..]).assign(&fit.gamma);
    }
    Ok((out, iters))
}

/// EM with the conditional low-level model; `Phi` is updated only if `update_phi`.
pub(crate) fn run_conditional_em(
    data: &Dataset,
    start: &ModelParams,
    ctrl: &EmControl,
    update_phi: bool,
    initial: Option<&Posteriors>,
) -> Result<ConditionalEmRun> {
    ctrl.validate()?;
    data.require_full_rank_design()?;
    let k = data.n_covariates();
    let structural = if start.structural.is_conditional() {
        start.structural.clone()
    } else {
        start.structural.to_conditional(k)
    };
    let mut params = ModelParams::new(start.measurement.clone(), structural)?;
    params.check_against(data)?;
    let n_low = params.n_low();

    let mut logf = posterior::item_logdensity(data, &params.measurement);
    let mut post = match initial {
        Some(p) => p.clone(),
        None => posterior::e_step_with(data, logf.view(), &params.structural, ctrl.parallel)?,
    };
    let mut trace = vec![post.loglik];
    let mut converged = false;
    let mut n_iter = 0;
    let mut newton_iter = 0;
    while n_iter < ctrl.max_iter {
        n_iter += 1;
        let omega = step1::update_omega(&post)?;
        let gamma_old = params.structural.gamma().expect("conditional");
        let (gamma, iters) = update_gamma(data, &post, gamma_old, n_low, ctrl.parallel)?;
        newton_iter += iters;
        let measurement = if update_phi {
            let m = step1::update_phi(&post, data)?;
            logf = posterior::item_logdensity(data, &m);
            m
        } else {
            params.measurement.clone()
        };
        params = ModelParams::new(measurement, StructuralParams::conditional(omega, gamma, n_low)?)?;
        post = posterior::e_step_with(data, logf.view(), &params.structural, ctrl.parallel)?;
        let previous = *trace.last().unwrap();
        trace.push(post.loglik);
        if ctrl.has_converged(previous, post.loglik) {
            converged = true;
            break;
        }
    }
    Ok(ConditionalEmRun {
        params,
        posteriors: post,
        loglik_trace: trace,
        converged,
        n_iter,
        newton_iter,
    })
}

/// Full maximum likelihood: EM updating `(omega, Gamma, Phi)` from each start,
/// keeping the highest final log-likelihood. Returns the run and its start index.
pub fn fit_joint(
    data: &Dataset,
    starts: &[ModelParams],
    ctrl: &EmControl,
) -> Result<(ConditionalEmRun, usize)> {
    let inner = EmControl {
        parallel: ctrl.parallel && starts.len() == 1,
        ..ctrl.clone()
    };
    let runs: Vec<Result<ConditionalEmRun>> = if ctrl.parallel && starts.len() > 1 {
        starts.par_iter().map(|s| run_conditional_em(data, s, &inner, true, None)).collect()
    } else {
        starts.iter().map(|s| run_conditional_em(data, s, &inner, true, None)).collect()
    };
    let n = runs.len();
    let mut best: Option<(usize, ConditionalEmRun)> = None;
    let mut last_error = None;
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                if best.as_ref().is_none_or(|(_, b)| run.posteriors.loglik > b.posteriors.loglik) {
                    best = Some((k, run));
                }
            }
            Err(e) => {
                log::info!("joint EM start {k} aborted: {e}");
                last_error = Some(e);
            }
        }
    }
    let (k, run) = best.ok_or_else(|| MlcaError::AllStartsFailed {
        starts: n,
        last: last_error.map(|e| e.to_string()).unwrap_or_default(),
    })?;
    Ok((run, k))
}

#[derive(Debug, Clone)]
pub struct Step2Fit {
    pub measurement: MeasurementParams,
    pub structural: StructuralParams,
    pub posteriors: Posteriors,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub newton_iter: usize,
    pub elapsed: f64,
}

impl Step2Fit {
    pub fn params(&self) -> ModelParams {
        ModelParams::new(self.measurement.clone(), self.structural.clone()).expect("consistent")
    }

    pub fn loglik(&self) -> f64 {
        self.posteriors.loglik
    }

    pub fn omega(&self) -> ArrayView1<'_, f64> {
        self.structural.omega()
    }

    pub fn gamma(&self) -> ArrayView2<'_, f64> {
        self.structural.gamma().expect("conditional")
    }
}

/// Starting structural values from a fit without covariates: same `omega`,
/// intercepts `log(pi_t / pi_0)`, zero slopes.
pub fn step2_start(unconditional: &StructuralParams, n_covariates: usize) -> StructuralParams {
    unconditional.to_conditional(n_covariates)
}

/// Fits `(omega, Gamma)` with `Phi` fixed.
pub fn fit_structural(
    data: &Dataset,
    phi_fixed: &MeasurementParams,
    init: &StructuralParams,
    ctrl: &EmControl,
) -> Result<Step2Fit> {
    fit_structural_from(data, phi_fixed, init, None, ctrl)
}

/// [`fit_structural`] with the posteriors at the starting values already known,
/// as when starting from the step-1 solution.
pub fn fit_structural_from(
    data: &Dataset,
    phi_fixed: &MeasurementParams,
    init: &StructuralParams,
    initial: Option<&Posteriors>,
    ctrl: &EmControl,
) -> Result<Step2Fit> {
    let started = Instant::now();
    let start = ModelParams::new(phi_fixed.clone(), init.clone())?;
    if let Some(p) = initial {
        if p.u.dim() != (data.n_groups(), start.n_high()) || p.q.dim() != (data.n_units(), start.n_low(), start.n_high()) {
            return Err(MlcaError::DimensionMismatch("starting posteriors do not match the data".into()));
        }
    }
    let run = run_conditional_em(data, &start, ctrl, false, initial)?;
    Ok(Step2Fit {
        measurement: run.params.measurement,
        structural: run.params.structural,
        posteriors: run.posteriors,
        loglik_trace: run.loglik_trace,
        converged: run.converged,
        n_iter: run.n_iter,
        newton_iter: run.newton_iter,
        elapsed: started.elapsed().as_secs_f64(),
    })
}

/// Gradient of the logit objective at `gamma`, flattened `(t-1) * K + k`.
pub fn logit_gradient(
    z: ArrayView2<f64>,
    w: ArrayView2<f64>,
    r: ArrayView1<f64>,
    gamma: &Array2<f64>,
) -> Array1<f64> {
    let w = w.as_standard_layout().into_owned();
    let r = r.to_vec();
    let (probs, _) = evaluate(z, &w, &r, gamma);
    Array1::from_iter(gradient(z, &w, &r, &probs).iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step1::{run_em_unconditional, UpdateMask};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(n: usize, t_count: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
        let mut w = Array2::zeros((n, t_count));
        let mut r = Array1::zeros(n);
        for i in 0..n {
            let ri: f64 = rng.random_range(0.2..1.0);
            let raw: Vec<f64> = (0..t_count).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for t in 0..t_count {
                w[[i, t]] = ri * raw[t] / s;
            }
            r[i] = ri;
        }
        (w, r)
    }

    #[test]
    fn intercept_only_matches_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, r) = random_weights(40, 3, &mut rng);
        let z = Array2::ones((40, 1));
        let fit = weighted_multinomial_fit(z.view(), w.view(), r.view(), Array2::zeros((2, 1)).view(), &NewtonControl::default())
            .unwrap();
        let col = w.sum_axis(Axis(0));
        for t in 1..3 {
            let expect = (col[t] / col[0]).ln();
            assert!((fit.gamma[[t - 1, 0]] - expect).abs() < 1e-8);
        }
        assert!(fit.grad_norm < 1e-8);
    }

    /// Plain IRLS for unweighted binary logistic regression.
    fn textbook_irls(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut beta = DVector::zeros(x.ncols());
        for _ in 0..100 {
            let eta = x * &beta;
            let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
            let wdiag = mu.map(|m| m * (1.0 - m));
            let zwork = &eta + (y - &mu).component_div(&wdiag);
            let mut xtw = x.transpose();
            for (j, mut col) in xtw.column_iter_mut().enumerate() {
                col *= wdiag[j];
            }
            let next = (&xtw * x).lu().solve(&(&xtw * zwork)).unwrap();
            if (&next - &beta).amax() < 1e-14 {
                return next;
            }
            beta = next;
        }
        beta
    }

    #[test]
    fn binary_case_matches_textbook_irls() {
        let xs = [
            -1.2, 0.3, 0.8, -0.5, 1.9, -2.1, 0.0, 0.7, 1.1, -0.9, 0.4, -1.6, 2.3, -0.2, 0.9, -0.7, 1.4, -1.1, 0.2, 0.6,
        ];
        let ys = [0., 1., 1., 0., 1., 0., 1., 0., 1., 0., 0., 0., 1., 1., 1., 0., 0., 1., 0., 1.];
        let n = xs.len();
        let z = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { 1.0 } else { xs[i] });
        let w = Array2::from_shape_fn((n, 2), |(i, t)| if t == 1 { ys[i] } else { 1.0 - ys[i] });
        let r = Array1::ones(n);
        let fit = weighted_multinomial_fit(z.view(), w.view(), r.view(), Array2::zeros((1, 2)).view(), &NewtonControl::default())
            .unwrap();
        let x = DMatrix::from_fn(n, 2, |i, k| z[[i, k]]);
        let beta = textbook_irls(&x, &DVector::from_row_slice(&ys));
        assert!((fit.gamma[[0, 0]] - beta[0]).abs() < 1e-8);
        assert!((fit.gamma[[0, 1]] - beta[1]).abs() < 1e-8);
    }

    #[test]
    fn zero_weight_keeps_init() {
        let z = Array2::ones((5, 1));
        let w = Array2::zeros((5, 2));
        let r = Array1::zeros(5);
        let init = array![[0.7]];
        let fit = weighted_multinomial_fit(z.view(), w.view(), r.view(), init.view(), &NewtonControl::default()).unwrap();
        assert_eq!(fit.gamma, init);
    }

    #[test]
    fn separation_caps_coefficients() {
        let z = Array2::from_shape_fn((6, 2), |(i, k)| if k == 0 { 1.0 } else { i as f64 - 2.5 });
        let w = Array2::from_shape_fn((6, 2), |(i, t)| f64::from((i >= 3) == (t == 1)));
        let r = Array1::ones(6);
        let fit = weighted_multinomial_fit(z.view(), w.view(), r.view(), Array2::zeros((1, 2)).view(), &NewtonControl::default())
            .unwrap();
        assert!(fit.capped);
        assert!(fit.gamma.iter().all(|g| g.abs() <= 30.0));
    }

    fn toy_data(k_extra: Option<f64>) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups: Vec<usize> = (0..60).map(|i| i / 6).collect();
        let y = Array2::from_shape_fn((60, 4), |_| u8::from(rng.random_bool(0.5)));
        let k = if k_extra.is_some() { 3 } else { 2 };
        let z = Array2::from_shape_fn((60, k), |(i, c)| match c {
            0 => 1.0,
            1 => (i as f64 * 0.37).sin(),
            _ => k_extra.unwrap(),
        });
        Dataset::new(y, &groups, z).unwrap()
    }

    #[test]
    fn constant_extra_covariate_is_rank_error() {
        let data = toy_data(Some(3.0));
        let meas = MeasurementParams::new(Array2::from_elem((4, 2), 0.5)).unwrap();
        let init = StructuralParams::unconditional(array![0.5, 0.5], array![[0.5, 0.5], [0.4, 0.6]])
            .unwrap()
            .to_conditional(3);
        let err = fit_structural(&data, &meas, &init, &EmControl::default()).unwrap_err();
        assert!(matches!(err, MlcaError::RankDeficient { rank: 2, cols: 3 }));
    }

    #[test]
    fn intercept_only_equals_frozen_step1() {
        let data = toy_data(None).intercept_only();
        let meas = MeasurementParams::new(array![[0.8, 0.3], [0.7, 0.2], [0.6, 0.35], [0.75, 0.4]]).unwrap();
        let start = StructuralParams::unconditional(array![0.6, 0.4], array![[0.7, 0.3], [0.2, 0.8]]).unwrap();
        let ctrl = EmControl { tol: 1e-12, max_iter: 5000, parallel: false, ..EmControl::default() };
        let s2 = fit_structural(&data, &meas, &step2_start(&start, 1), &ctrl).unwrap();
        let mask = UpdateMask { omega: true, pi: true, phi: false };
        let s1 = run_em_unconditional(&data, &ModelParams::new(meas, start).unwrap(), &ctrl, mask).unwrap();
        let a = s2.structural.pi();
        let b = s1.params.structural.pi();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert!((s2.loglik() - s1.loglik()).abs() < 1e-8);
    }

    #[test]
    fn structural_em_is_monotone() {
        let data = toy_data(None);
        let meas = MeasurementParams::new(array![[0.8, 0.3], [0.7, 0.2], [0.6, 0.35], [0.75, 0.4]]).unwrap();
        let start = StructuralParams::unconditional(array![0.6, 0.4], array![[0.7, 0.3], [0.2, 0.8]]).unwrap();
        let fit = fit_structural(&data, &meas, &step2_start(&start, 2), &EmControl::default()).unwrap();
        assert!(fit.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!(fit.gamma().iter().all(|g| g.is_finite()));
    }
}
