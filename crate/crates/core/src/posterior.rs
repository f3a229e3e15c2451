//! Log-likelihood and E-step posteriors via the upward-downward scheme.
//!
//! Upward pass: for each unit and high-level class `m`, the low-level mixture
//! `log sum_t pi_{t|m} f(y_i | t)` is accumulated over the units of a group and
//! combined with `log omega_m`; normalizing over `m` gives `u[j, m]`.
//! Downward pass: `q[i, t, m]` is the within-unit posterior of `t` given `m`,
//! and `v = u * q`. Everything stays in log space until the final normalization.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{MlcaError, Result};
use crate::model::{gamma_row, Dataset, LowLevelModel, MeasurementParams, ModelParams, StructuralParams};
use crate::numeric;

/// E-step output.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `J x M`, `P(W_j = m | Y_j)`.
    pub u: Array2<f64>,
    /// `N x T x M`, `P(X_ij = t | W_j = m, Y_ij)`.
    pub q: Array3<f64>,
    /// `N x T x M`, `P(X_ij = t, W_j = m | Y_j)`.
    pub v: Array3<f64>,
    pub loglik: f64,
    pub group_loglik: Vec<f64>,
}

impl Posteriors {
    /// `N x T` marginal low-level posteriors `sum_m v`.
    pub fn low_marginal(&self) -> Array2<f64> {
        self.v.sum_axis(Axis(2))
    }

    /// Relabels classes with `perm[new] = old` at each level.
    pub fn permuted(&self, low_perm: &[usize], high_perm: &[usize]) -> Posteriors {
        let relabel = |a: &Array3<f64>| a.select(Axis(1), low_perm).select(Axis(2), high_perm);
        Posteriors {
            u: self.u.select(Axis(1), high_perm),
            q: relabel(&self.q),
            v: relabel(&self.v),
            loglik: self.loglik,
            group_loglik: self.group_loglik.clone(),
        }
    }

    /// Highest-posterior low-level class per unit; ties go to the lower index.
    pub fn map_low(&self) -> Vec<usize> {
        argmax_rows(self.low_marginal().view())
    }

    /// Highest-posterior high-level class per group.
    pub fn map_high(&self) -> Vec<usize> {
        argmax_rows(self.u.view())
    }
}

fn argmax_rows(a: ArrayView2<f64>) -> Vec<usize> {
    a.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `N x T` matrix of `sum_h log P(y_ih | X = t)`.
pub fn item_logdensity(data: &Dataset, measurement: &MeasurementParams) -> Array2<f64> {
    let phi = measurement.phi();
    let log_p = phi.mapv(f64::ln);
    let log_q = phi.mapv(|p| (1.0 - p).ln());
    // y log p + (1 - y) log q = y (log p - log q) + log q
    let diff = &log_p - &log_q;
    let base = log_q.sum_axis(Axis(0));
    let mut out = data.y_f64().dot(&diff);
    out += &base;
    out
}

/// Per-unit low-level log prior for each high-level class.
enum LogPrior<'a> {
    Shared(Array2<f64>),
    Logit {
        gamma: ArrayView2<'a, f64>,
        z: ArrayView2<'a, f64>,
    },
}

impl<'a> LogPrior<'a> {
    fn new(data: &'a Dataset, structural: &'a StructuralParams) -> Self {
        match structural.low() {
            LowLevelModel::Unconditional { pi } => LogPrior::Shared(pi.mapv(f64::ln)),
            LowLevelModel::Conditional { gamma } => LogPrior::Logit {
                gamma: gamma.view(),
                z: data.z(),
            },
        }
    }

    /// Writes `log P(X_i = t | W = m, z_i)` into `out` (length T).
    #[inline]
    fn fill(&self, i: usize, m: usize, out: &mut [f64]) {
        match self {
            LogPrior::Shared(lp) => {
                for (t, o) in out.iter_mut().enumerate() {
                    *o = lp[[m, t]];
                }
            }
            LogPrior::Logit { gamma, z } => {
                let t_count = out.len();
                let zi = z.row(i);
                out[0] = 0.0;
                for t in 1..t_count {
                    let g = gamma.row(gamma_row(t_count, m, t));
                    out[t] = g.dot(&zi);
                }
                let norm = numeric::log_sum_exp(out);
                for o in out.iter_mut() {
                    *o -= norm;
                }
            }
        }
    }
}

/// Shared kernel of the E-step and the log-likelihood. Returns per-group
/// `(u_j, loglik_j)` and fills `q` when given.
fn upward_downward(
    data: &Dataset,
    logf: ArrayView2<f64>,
    structural: &StructuralParams,
    q: Option<&mut [f64]>,
    parallel: bool,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let t_count = structural.n_low();
    let m_count = structural.n_high();
    if logf.nrows() != data.n_units() || logf.ncols() != t_count {
        return Err(MlcaError::DimensionMismatch(format!(
            "item log-density is {}x{}, expected {}x{}",
            logf.nrows(),
            logf.ncols(),
            data.n_units(),
            t_count
        )));
    }
    if structural.is_conditional() && structural.n_covariates() != data.n_covariates() {
        return Err(MlcaError::DimensionMismatch(format!(
            "gamma has {} columns, design has {}",
            structural.n_covariates(),
            data.n_covariates()
        )));
    }
    let prior = LogPrior::new(data, structural);
    let log_omega: Vec<f64> = structural.omega().iter().map(|w| w.ln()).collect();
    let stride = t_count * m_count;
    let n_groups = data.n_groups();

    let run_group = |j: usize, mut q_chunk: Option<&mut [f64]>| -> (Vec<f64>, f64) {
        let mut b = log_omega.clone();
        let mut x = vec![0.0; t_count];
        let range = data.group_range(j);
        let start = range.start;
        for i in range {
            let lf = logf.row(i);
            for m in 0..m_count {
                prior.fill(i, m, &mut x);
                for t in 0..t_count {
                    x[t] += lf[t];
                }
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for xt in x.iter_mut() {
                    *xt = (*xt - max).exp();
                    s += *xt;
                }
                b[m] += max + s.ln();
                if let Some(chunk) = q_chunk.as_deref_mut() {
                    let base = (i - start) * stride;
                    for t in 0..t_count {
                        chunk[base + t * m_count + m] = x[t] / s;
                    }
                }
            }
        }
        let ll = numeric::softmax_in_place(&mut b);
        (b, ll)
    };

    let results: Vec<(Vec<f64>, f64)> = match q {
        Some(q) => {
            let mut chunks: Vec<&mut [f64]> = Vec::with_capacity(n_groups);
            let mut rest = q;
            for j in 0..n_groups {
                let len = data.group_range(j).len() * stride;
                let (head, tail) = rest.split_at_mut(len);
                chunks.push(head);
                rest = tail;
            }
            if parallel && n_groups > 1 {
                chunks
                    .into_par_iter()
                    .enumerate()
                    .map(|(j, c)| run_group(j, Some(c)))
                    .collect()
            } else {
                chunks
                    .into_iter()
                    .enumerate()
                    .map(|(j, c)| run_group(j, Some(c)))
                    .collect()
            }
        }
        None => {
            if parallel && n_groups > 1 {
                (0..n_groups).into_par_iter().map(|j| run_group(j, None)).collect()
            } else {
                (0..n_groups).map(|j| run_group(j, None)).collect()
            }
        }
    };
    if let Some(j) = results.iter().position(|(_, ll)| !ll.is_finite()) {
        return Err(MlcaError::NonFiniteLoglik { group: j });
    }
    Ok(results)
}

/// E-step from a precomputed item log-density.
pub fn e_step_with(
    data: &Dataset,
    logf: ArrayView2<f64>,
    structural: &StructuralParams,
    parallel: bool,
) -> Result<Posteriors> {
    let n = data.n_units();
    let t_count = structural.n_low();
    let m_count = structural.n_high();
    let mut q = Array3::<f64>::zeros((n, t_count, m_count));
    let groups = upward_downward(
        data,
        logf,
        structural,
        Some(q.as_slice_mut().expect("standard layout")),
        parallel,
    )?;

    let mut u = Array2::zeros((data.n_groups(), m_count));
    let mut group_loglik = Vec::with_capacity(groups.len());
    let mut loglik = 0.0;
    for (j, (uj, llj)) in groups.into_iter().enumerate() {
        for m in 0..m_count {
            u[[j, m]] = uj[m];
        }
        loglik += llj;
        group_loglik.push(llj);
    }
    let mut v = q.clone();
    let group_of_row = data.group_of_row();
    for (i, mut slab) in v.outer_iter_mut().enumerate() {
        let j = group_of_row[i];
        for mut row in slab.rows_mut() {
            for m in 0..m_count {
                row[m] *= u[[j, m]];
            }
        }
    }
    Ok(Posteriors {
        u,
        q,
        v,
        loglik,
        group_loglik,
    })
}

/// Log-likelihood from a precomputed item log-density; identical arithmetic to
/// [`e_step_with`].
pub fn loglik_with(
    data: &Dataset,
    logf: ArrayView2<f64>,
    structural: &StructuralParams,
    parallel: bool,
) -> Result<f64> {
    let groups = upward_downward(data, logf, structural, None, parallel)?;
    Ok(groups.iter().map(|(_, ll)| ll).sum())
}

/// E-step under the parameters' own low-level model (shared `Pi` or covariate logit).
pub fn e_step(data: &Dataset, params: &ModelParams) -> Result<Posteriors> {
    params.check_against(data)?;
    let logf = item_logdensity(data, &params.measurement);
    e_step_with(data, logf.view(), &params.structural, true)
}

pub fn loglik(data: &Dataset, params: &ModelParams) -> Result<f64> {
    params.check_against(data)?;
    let logf = item_logdensity(data, &params.measurement);
    loglik_with(data, logf.view(), &params.structural, true)
}
