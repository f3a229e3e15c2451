//! Per-unit score contributions and OPG-based covariance estimates.
//!
//! Coordinates are log-linear: `alpha_m = log(omega_m / omega_0)`, logit
//! coefficients `gamma_{t,m}` against class 0 and item logits `beta_{h,t}`.
//! Flattened order: alpha, then Gamma by `(m, t, k)`, then beta by `(t, h)`.

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use crate::error::{MlcaError, Result};
use crate::model::{gamma_row, Dataset, LowLevelModel, MeasurementParams, ModelParams, StructuralParams};
use crate::numeric;
use crate::posterior::Posteriors;

/// Score contributions, one row per unit.
#[derive(Debug, Clone)]
pub struct ScoreBlocks {
    /// `N x (M-1)`; the group score is split evenly over its units.
    pub s_alpha: Array2<f64>,
    /// `N x M(T-1)K`.
    pub s_gamma: Array2<f64>,
    /// `N x TH`.
    pub s_beta: Array2<f64>,
}

impl ScoreBlocks {
    pub fn n_units(&self) -> usize {
        self.s_alpha.nrows()
    }

    /// `[alpha | Gamma]` columns.
    pub fn theta2(&self) -> Array2<f64> {
        concatenate![Axis(1), self.s_alpha, self.s_gamma]
    }

    /// All columns in layout order.
    pub fn stacked(&self) -> Array2<f64> {
        concatenate![Axis(1), self.s_alpha, self.s_gamma, self.s_beta]
    }

    /// Column sums, the score of the full log-likelihood.
    pub fn total(&self) -> Array1<f64> {
        self.stacked().sum_axis(Axis(0))
    }
}

fn low_probabilities(data: &Dataset, structural: &StructuralParams, i: usize, m: usize, out: &mut [f64]) {
    let t_count = structural.n_low();
    match structural.low() {
        LowLevelModel::Unconditional { pi } => {
            for t in 0..t_count {
                out[t] = pi[[m, t]];
            }
        }
        LowLevelModel::Conditional { gamma } => {
            let zs = data.z();
            let z = zs.row(i);
            out[0] = 0.0;
            for t in 1..t_count {
                out[t] = gamma.row(gamma_row(t_count, m, t)).dot(&z);
            }
            numeric::softmax_in_place(out);
        }
    }
}

/// Score contributions at `params` from posteriors computed at `params`. For the
/// model without covariates the Gamma block has one (intercept) column per `(m, t)`.
pub fn score_contributions(data: &Dataset, params: &ModelParams, post: &Posteriors) -> ScoreBlocks {
    let structural = &params.structural;
    let t_count = structural.n_low();
    let m_count = structural.n_high();
    let n = data.n_units();
    let h_count = data.n_items();
    let k = if structural.is_conditional() { data.n_covariates() } else { 1 };
    let omega = structural.omega();
    let z = data.z();
    let group_of = data.group_of_row();
    let sizes = data.group_sizes();

    let mut s_alpha = Array2::zeros((n, m_count - 1));
    let mut s_gamma = Array2::zeros((n, m_count * (t_count - 1) * k));
    let mut pi = vec![0.0; t_count];
    for i in 0..n {
        let j = group_of[i];
        let inv_n = 1.0 / sizes[j] as f64;
        for m in 1..m_count {
            s_alpha[[i, m - 1]] = (post.u[[j, m]] - omega[m]) * inv_n;
        }
        for m in 0..m_count {
            low_probabilities(data, structural, i, m, &mut pi);
            let u = post.u[[j, m]];
            for t in 1..t_count {
                let r = u * (post.q[[i, t, m]] - pi[t]);
                let base = gamma_row(t_count, m, t) * k;
                if structural.is_conditional() {
                    for c in 0..k {
                        s_gamma[[i, base + c]] = r * z[[i, c]];
                    }
                } else {
                    s_gamma[[i, base]] = r;
                }
            }
        }
    }

    let w = post.low_marginal();
    let phi = params.measurement.phi();
    let y = data.y_f64();
    let mut s_beta = Array2::zeros((n, t_count * h_count));
    for i in 0..n {
        for t in 0..t_count {
            let wt = w[[i, t]];
            for h in 0..h_count {
                s_beta[[i, t * h_count + h]] = wt * (y[[i, h]] - phi[[h, t]]);
            }
        }
    }
    ScoreBlocks { s_alpha, s_gamma, s_beta }
}

/// Scores of the model without covariates.
pub fn score_step1(data: &Dataset, params: &ModelParams, post: &Posteriors) -> Result<ScoreBlocks> {
    if params.structural.is_conditional() {
        return Err(MlcaError::InvalidInput("step-1 scores need the model without covariates".into()));
    }
    Ok(score_contributions(data, params, post))
}

/// Scores of the model with covariates; the beta block is evaluated at the fixed `Phi`.
pub fn score_step2(data: &Dataset, params: &ModelParams, post: &Posteriors) -> Result<ScoreBlocks> {
    if !params.structural.is_conditional() {
        return Err(MlcaError::InvalidInput("step-2 scores need the model with covariates".into()));
    }
    Ok(score_contributions(data, params, post))
}

/// Flattened log-linear parameter vector in score layout.
pub fn param_vector(params: &ModelParams) -> Vec<f64> {
    let mut out = params.theta2();
    let phi = params.measurement.phi();
    for t in 0..phi.ncols() {
        for h in 0..phi.nrows() {
            out.push(numeric::logit(numeric::clamp_prob(phi[[h, t]])));
        }
    }
    out
}

/// Inverse of [`param_vector`]; `n_covariates = None` selects the model without covariates.
pub fn params_from_vector(
    v: &[f64],
    n_items: usize,
    n_low: usize,
    n_high: usize,
    n_covariates: Option<usize>,
) -> Result<ModelParams> {
    let k = n_covariates.unwrap_or(1);
    let n_gamma = n_high * (n_low - 1) * k;
    let expected = n_high - 1 + n_gamma + n_items * n_low;
    if v.len() != expected {
        return Err(MlcaError::DimensionMismatch(format!(
            "parameter vector has {} entries, expected {expected}",
            v.len()
        )));
    }
    let mut omega = vec![0.0];
    omega.extend_from_slice(&v[..n_high - 1]);
    numeric::softmax_in_place(&mut omega);
    let omega = Array1::from(omega);
    let gamma = Array2::from_shape_vec((n_high * (n_low - 1), k), v[n_high - 1..n_high - 1 + n_gamma].to_vec())
        .expect("shape");
    let beta = &v[n_high - 1 + n_gamma..];
    let phi = Array2::from_shape_fn((n_items, n_low), |(h, t)| numeric::inv_logit(beta[t * n_items + h]));
    let conditional = StructuralParams::conditional(omega, gamma, n_low)?;
    let structural = if n_covariates.is_some() {
        conditional
    } else {
        conditional.to_unconditional()
    };
    ModelParams::new(MeasurementParams::new(phi)?, structural)
}

/// `N^-1 A'B`.
fn cross_product(a: ArrayView2<f64>, b: ArrayView2<f64>) -> DMatrix<f64> {
    let n = a.nrows().max(1) as f64;
    numeric::to_dmatrix(a.t().dot(&b).view()) / n
}

/// Inverse of an information matrix, with the ridge fallback.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match numeric::spd_inverse(info) {
        Some(inv) => {
            if inv.ridge > 0.0 {
                log::warn!("information matrix nearly singular; inverted with ridge {:.3e}", inv.ridge);
            }
            Ok(inv.inverse)
        }
        None => Err(MlcaError::SingularInformation {
            condition: numeric::condition_number(info),
        }),
    }
}

/// Covariance pieces of the corrected two-step estimator.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub n_units: usize,
    pub i22: DMatrix<f64>,
    pub i21: DMatrix<f64>,
    /// Asymptotic covariance of the step-1 item logits.
    pub sigma11: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub v1: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `sqrt(diag(V) / N)`.
    pub se: Vec<f64>,
    /// `sqrt(diag(V2) / N)`.
    pub naive_se: Vec<f64>,
}

impl CovarianceEstimate {
    /// Finite-sample covariance `V / N` of the structural estimates.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.v / self.n_units as f64
    }

    pub fn naive_covariance(&self) -> DMatrix<f64> {
        &self.v2 / self.n_units as f64
    }
}

fn standard_errors(v: &DMatrix<f64>, n: usize) -> Vec<f64> {
    (0..v.nrows()).map(|i| (v[(i, i)].max(0.0) / n as f64).sqrt()).collect()
}

/// `V = V2 + V2 I21 Sigma11 I21' V2` with `V2 = I22^-1`.
pub fn corrected_covariance(step1: &ScoreBlocks, step2: &ScoreBlocks) -> Result<CovarianceEstimate> {
    let n = step2.n_units();
    if step1.n_units() != n || step1.s_beta.ncols() != step2.s_beta.ncols() {
        return Err(MlcaError::DimensionMismatch("step-1 and step-2 scores disagree".into()));
    }
    let info1 = {
        let s1 = step1.stacked();
        cross_product(s1.view(), s1.view())
    };
    let inv1 = invert_information(&info1)?;
    let nb = step1.s_beta.ncols();
    let off = inv1.nrows() - nb;
    let sigma11 = numeric::symmetrize(inv1.view((off, off), (nb, nb)).into_owned());

    let s2 = step2.theta2();
    let i22 = cross_product(s2.view(), s2.view());
    let i21 = cross_product(s2.view(), step2.s_beta.view());
    let v2 = invert_information(&i22)?;
    let a = &v2 * &i21;
    let v1 = numeric::symmetrize(&a * &sigma11 * a.transpose());
    let v = &v2 + &v1;
    Ok(CovarianceEstimate {
        n_units: n,
        se: standard_errors(&v, n),
        naive_se: standard_errors(&v2, n),
        i22,
        i21,
        sigma11,
        v2,
        v1,
        v,
    })
}

/// Inverse OPG of all score columns divided by `N`, the covariance of the full-ML estimate.
pub fn full_covariance(scores: &ScoreBlocks) -> Result<DMatrix<f64>> {
    let s = scores.stacked();
    let info = cross_product(s.view(), s.view());
    Ok(invert_information(&info)? / scores.n_units() as f64)
}

/// Structural block of [`full_covariance`].
pub fn full_theta2_covariance(scores: &ScoreBlocks) -> Result<DMatrix<f64>> {
    let full = full_covariance(scores)?;
    let p = scores.s_alpha.ncols() + scores.s_gamma.ncols();
    Ok(full.view((0, 0), (p, p)).into_owned())
}

/// Naive `I22^-1 / N` over the structural block.
pub fn naive_covariance(step2: &ScoreBlocks) -> Result<DMatrix<f64>> {
    let s2 = step2.theta2();
    let i22 = cross_product(s2.view(), s2.view());
    Ok(invert_information(&i22)? / step2.n_units() as f64)
}
