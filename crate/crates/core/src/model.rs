//! Data model and parameter spaces of the multilevel latent class model.
//!
//! Units `i` are nested in groups `j`. Each group carries a high-level class
//! `W_j` in `0..M`; each unit a low-level class `X_ij` in `0..T` whose
//! distribution depends on `W_j` (and optionally on covariates `Z_ij`). Binary
//! items depend on `X_ij` only.
//!
//! Class and group indices are 0-based throughout the crate. Class 0 is the
//! reference category of every logit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::fmt::Display;
use std::ops::Range;

use crate::error::{MlcaError, Result};
use crate::numeric::{self, clamp_prob, PROB_EPS};

/// Index structure of a model fitted to a dataset.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ModelDims {
    pub group_sizes: Vec<usize>,
    pub n_items: usize,
    pub n_low: usize,
    pub n_high: usize,
    /// Columns of the design matrix, intercept included.
    pub n_covariates: usize,
}

impl ModelDims {
    pub fn new(
        group_sizes: Vec<usize>,
        n_items: usize,
        n_low: usize,
        n_high: usize,
        n_covariates: usize,
    ) -> Result<Self> {
        if group_sizes.is_empty() {
            return Err(MlcaError::InvalidInput("at least one group is required".into()));
        }
        if group_sizes.contains(&0) {
            return Err(MlcaError::InvalidInput("every group needs at least one unit".into()));
        }
        if n_items == 0 || n_low == 0 || n_high == 0 || n_covariates == 0 {
            return Err(MlcaError::InvalidInput(format!(
                "dimensions must be positive (H={n_items}, T={n_low}, M={n_high}, K={n_covariates})"
            )));
        }
        Ok(ModelDims {
            group_sizes,
            n_items,
            n_low,
            n_high,
            n_covariates,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn n_units(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Number of entries of the coefficient matrix, `(T-1) * M * K`.
    pub fn n_gamma(&self) -> usize {
        (self.n_low - 1) * self.n_high * self.n_covariates
    }

    /// Length of the structural parameter vector `(alpha, vec Gamma)`.
    pub fn n_theta2(&self) -> usize {
        self.n_high - 1 + self.n_gamma()
    }

    /// Free parameters of the model without covariates.
    pub fn n_free_unconditional(&self) -> usize {
        self.n_high - 1 + self.n_high * (self.n_low - 1) + self.n_items * self.n_low
    }

    pub fn with_classes(&self, n_low: usize, n_high: usize) -> Self {
        ModelDims {
            n_low,
            n_high,
            ..self.clone()
        }
    }
}

/// Binary responses, group structure and design matrix.
///
/// Rows are stored sorted by group so that every group occupies a contiguous
/// block; `original_rows` records where each stored row came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Array2<u8>,
    y_f64: Array2<f64>,
    z: Array2<f64>,
    offsets: Vec<usize>,
    group_of_row: Vec<usize>,
    group_labels: Vec<String>,
    original_rows: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from responses, per-row group keys, and a design matrix
    /// whose first column is the intercept.
    pub fn new<G: Ord + Clone + Display>(
        y: Array2<u8>,
        groups: &[G],
        z: Array2<f64>,
    ) -> Result<Self> {
        let n = y.nrows();
        if n == 0 {
            return Err(MlcaError::InvalidInput("dataset has no rows".into()));
        }
        if y.ncols() == 0 {
            return Err(MlcaError::InvalidInput("dataset has no items".into()));
        }
        if groups.len() != n || z.nrows() != n {
            return Err(MlcaError::DimensionMismatch(format!(
                "{} response rows, {} group ids, {} design rows",
                n,
                groups.len(),
                z.nrows()
            )));
        }
        if z.ncols() == 0 {
            return Err(MlcaError::InvalidInput("design matrix needs an intercept column".into()));
        }
        if let Some(((i, h), v)) = y.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(MlcaError::InvalidInput(format!(
                "item value {v} at row {i}, item {h} is not binary"
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(MlcaError::InvalidInput("design matrix has non-finite entries".into()));
        }
        if z.column(0).iter().any(|&v| (v - 1.0).abs() > 1e-12) {
            return Err(MlcaError::InvalidInput(
                "first design column must be the constant 1".into(),
            ));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| groups[a].cmp(&groups[b]));

        let mut offsets = vec![0];
        let mut labels = Vec::new();
        let mut group_of_row = Vec::with_capacity(n);
        for (pos, &row) in order.iter().enumerate() {
            if pos == 0 || groups[row] != groups[order[pos - 1]] {
                if pos > 0 {
                    offsets.push(pos);
                }
                labels.push(groups[row].to_string());
            }
            group_of_row.push(labels.len() - 1);
        }
        offsets.push(n);

        let y_sorted = y.select(Axis(0), &order);
        let z_sorted = z.select(Axis(0), &order);
        let y_f64 = y_sorted.mapv(f64::from);
        Ok(Dataset {
            y: y_sorted,
            y_f64,
            z: z_sorted,
            offsets,
            group_of_row,
            group_labels: labels,
            original_rows: order,
        })
    }

    /// Dataset with an intercept-only design.
    pub fn without_covariates<G: Ord + Clone + Display>(y: Array2<u8>, groups: &[G]) -> Result<Self> {
        let z = Array2::ones((y.nrows(), 1));
        Dataset::new(y, groups, z)
    }

    /// Same responses and groups with the design reduced to the intercept.
    pub fn intercept_only(&self) -> Dataset {
        Dataset {
            z: Array2::ones((self.n_units(), 1)),
            ..self.clone()
        }
    }

    pub fn y(&self) -> ArrayView2<'_, u8> {
        self.y.view()
    }

    pub fn y_f64(&self) -> ArrayView2<'_, f64> {
        self.y_f64.view()
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn n_units(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn group_range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn group_of_row(&self) -> &[usize] {
        &self.group_of_row
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    /// Position of each stored row in the input the dataset was built from.
    pub fn original_rows(&self) -> &[usize] {
        &self.original_rows
    }

    pub fn dims(&self, n_low: usize, n_high: usize) -> Result<ModelDims> {
        ModelDims::new(
            self.group_sizes(),
            self.n_items(),
            n_low,
            n_high,
            self.n_covariates(),
        )
    }

    /// Rank check of the design matrix.
    pub fn design_rank(&self) -> usize {
        numeric::numerical_rank(&numeric::to_dmatrix(self.z.view()))
    }

    pub fn require_full_rank_design(&self) -> Result<()> {
        let rank = self.design_rank();
        if rank < self.n_covariates() {
            return Err(MlcaError::RankDeficient {
                rank,
                cols: self.n_covariates(),
            });
        }
        Ok(())
    }
}

/// Item response probabilities `phi[h, t] = P(Y_h = 1 | X = t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementParams {
    phi: Array2<f64>,
}

impl MeasurementParams {
    /// Validates the range and clamps into `[eps, 1 - eps]`.
    pub fn new(phi: Array2<f64>) -> Result<Self> {
        if phi.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(MlcaError::InvalidInput("item probabilities must lie in [0, 1]".into()));
        }
        Ok(MeasurementParams {
            phi: phi.mapv(clamp_prob),
        })
    }

    pub fn phi(&self) -> ArrayView2<'_, f64> {
        self.phi.view()
    }

    pub fn n_items(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_low(&self) -> usize {
        self.phi.ncols()
    }

    /// Reorders classes: column `t` of the result is column `perm[t]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        MeasurementParams {
            phi: self.phi.select(Axis(1), perm),
        }
    }
}

/// How the low-level class distribution depends on the high-level class.
#[derive(Debug, Clone, PartialEq)]
pub enum LowLevelModel {
    /// `pi[m, t] = P(X = t | W = m)`, shared by every unit.
    Unconditional { pi: Array2<f64> },
    /// Multinomial logit: row `m * (T-1) + (t-1)` of `gamma` holds the
    /// coefficients of class `t >= 1` against class 0 within high-level class `m`.
    Conditional { gamma: Array2<f64> },
}

/// Structural parameters: high-level mixing weights and the low-level class model.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralParams {
    omega: Array1<f64>,
    n_low: usize,
    low: LowLevelModel,
}

#[inline]
pub fn gamma_row(n_low: usize, m: usize, t: usize) -> usize {
    debug_assert!(t >= 1);
    m * (n_low - 1) + (t - 1)
}

impl StructuralParams {
    pub fn unconditional(omega: Array1<f64>, pi: Array2<f64>) -> Result<Self> {
        if pi.nrows() != omega.len() {
            return Err(MlcaError::DimensionMismatch(format!(
                "omega has {} classes, pi has {} rows",
                omega.len(),
                pi.nrows()
            )));
        }
        let mut pi = pi;
        for mut row in pi.rows_mut() {
            check_probabilities(row.view())?;
            numeric::normalize_simplex(row.as_slice_mut().expect("standard layout"));
        }
        let n_low = pi.ncols();
        Ok(StructuralParams {
            omega: normalized_omega(omega)?,
            n_low,
            low: LowLevelModel::Unconditional { pi },
        })
    }

    pub fn conditional(omega: Array1<f64>, gamma: Array2<f64>, n_low: usize) -> Result<Self> {
        if n_low == 0 || gamma.nrows() != (n_low - 1) * omega.len() {
            return Err(MlcaError::DimensionMismatch(format!(
                "gamma has {} rows, expected (T-1)*M = {}",
                gamma.nrows(),
                (n_low.max(1) - 1) * omega.len()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(MlcaError::InvalidInput("coefficients must be finite".into()));
        }
        Ok(StructuralParams {
            omega: normalized_omega(omega)?,
            n_low,
            low: LowLevelModel::Conditional { gamma },
        })
    }

    pub fn omega(&self) -> ArrayView1<'_, f64> {
        self.omega.view()
    }

    pub fn low(&self) -> &LowLevelModel {
        &self.low
    }

    pub fn n_high(&self) -> usize {
        self.omega.len()
    }

    pub fn n_low(&self) -> usize {
        self.n_low
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.low, LowLevelModel::Conditional { .. })
    }

    pub fn gamma(&self) -> Option<ArrayView2<'_, f64>> {
        match &self.low {
            LowLevelModel::Conditional { gamma } => Some(gamma.view()),
            LowLevelModel::Unconditional { .. } => None,
        }
    }

    /// Coefficient columns, 1 for the unconditional model.
    pub fn n_covariates(&self) -> usize {
        match &self.low {
            LowLevelModel::Conditional { gamma } => gamma.ncols(),
            LowLevelModel::Unconditional { .. } => 1,
        }
    }

    /// `P(X = t | W = m)` at an intercept-only design; for the conditional model this
    /// uses the intercept column only.
    pub fn pi(&self) -> Array2<f64> {
        match &self.low {
            LowLevelModel::Unconditional { pi } => pi.clone(),
            LowLevelModel::Conditional { gamma } => {
                let m_count = self.n_high();
                let mut pi = Array2::zeros((m_count, self.n_low));
                let mut eta = vec![0.0; self.n_low];
                for m in 0..m_count {
                    eta[0] = 0.0;
                    for t in 1..self.n_low {
                        eta[t] = gamma[[gamma_row(self.n_low, m, t), 0]];
                    }
                    numeric::softmax_in_place(&mut eta);
                    for t in 0..self.n_low {
                        pi[[m, t]] = eta[t];
                    }
                }
                pi
            }
        }
    }

    /// Conditional parameterization with intercepts `log(pi_t / pi_0)` and zero slopes.
    pub fn to_conditional(&self, n_covariates: usize) -> StructuralParams {
        match &self.low {
            LowLevelModel::Conditional { gamma } if gamma.ncols() == n_covariates => self.clone(),
            _ => {
                let pi = self.pi();
                let m_count = self.n_high();
                let mut gamma = Array2::zeros(((self.n_low - 1) * m_count, n_covariates));
                for m in 0..m_count {
                    for t in 1..self.n_low {
                        gamma[[gamma_row(self.n_low, m, t), 0]] = (pi[[m, t]] / pi[[m, 0]]).ln();
                    }
                }
                StructuralParams {
                    omega: self.omega.clone(),
                    n_low: self.n_low,
                    low: LowLevelModel::Conditional { gamma },
                }
            }
        }
    }

    /// Drops slopes and keeps the class proportions implied by the intercepts.
    pub fn to_unconditional(&self) -> StructuralParams {
        StructuralParams {
            omega: self.omega.clone(),
            n_low: self.n_low,
            low: LowLevelModel::Unconditional { pi: self.pi() },
        }
    }

    /// Relabels classes: new low class `t` is old `low_perm[t]`, new high class `m`
    /// is old `high_perm[m]`. Logit coefficients are re-expressed against the new
    /// reference class.
    pub fn permuted(&self, low_perm: &[usize], high_perm: &[usize]) -> Self {
        let omega = self.omega.select(Axis(0), high_perm);
        let low = match &self.low {
            LowLevelModel::Unconditional { pi } => LowLevelModel::Unconditional {
                pi: pi.select(Axis(0), high_perm).select(Axis(1), low_perm),
            },
            LowLevelModel::Conditional { gamma } => {
                let t_count = self.n_low;
                let k_count = gamma.ncols();
                let mut out = Array2::zeros(gamma.raw_dim());
                let full = |m: usize, t: usize, k: usize| {
                    if t == 0 {
                        0.0
                    } else {
                        gamma[[gamma_row(t_count, m, t), k]]
                    }
                };
                for (new_m, &old_m) in high_perm.iter().enumerate() {
                    for new_t in 1..t_count {
                        for k in 0..k_count {
                            out[[gamma_row(t_count, new_m, new_t), k]] = full(old_m, low_perm[new_t], k)
                                - full(old_m, low_perm[0], k);
                        }
                    }
                }
                LowLevelModel::Conditional { gamma: out }
            }
        };
        StructuralParams {
            omega,
            n_low: self.n_low,
            low,
        }
    }
}

fn check_probabilities(row: ArrayView1<f64>) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || row.sum() <= 0.0 {
        return Err(MlcaError::InvalidInput(
            "class probabilities must be non-negative with positive sum".into(),
        ));
    }
    Ok(())
}

fn normalized_omega(omega: Array1<f64>) -> Result<Array1<f64>> {
    if omega.is_empty() {
        return Err(MlcaError::InvalidInput("at least one high-level class is required".into()));
    }
    check_probabilities(omega.view())?;
    let mut omega = omega;
    numeric::normalize_simplex(omega.as_slice_mut().expect("standard layout"));
    Ok(omega)
}

/// Measurement and structural parameters together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub measurement: MeasurementParams,
    pub structural: StructuralParams,
}

impl ModelParams {
    pub fn new(measurement: MeasurementParams, structural: StructuralParams) -> Result<Self> {
        if measurement.n_low() != structural.n_low() {
            return Err(MlcaError::DimensionMismatch(format!(
                "phi has {} classes, structural model has {}",
                measurement.n_low(),
                structural.n_low()
            )));
        }
        Ok(ModelParams {
            measurement,
            structural,
        })
    }

    pub fn n_low(&self) -> usize {
        self.measurement.n_low()
    }

    pub fn n_high(&self) -> usize {
        self.structural.n_high()
    }

    pub fn permuted(&self, low_perm: &[usize], high_perm: &[usize]) -> Self {
        ModelParams {
            measurement: self.measurement.permuted(low_perm),
            structural: self.structural.permuted(low_perm, high_perm),
        }
    }

    /// Structural vector `(alpha_1..alpha_{M-1}, vec Gamma)` of the conditional model.
    pub fn theta2(&self) -> Vec<f64> {
        let omega = self.structural.omega();
        let mut out: Vec<f64> = (1..omega.len()).map(|m| (omega[m] / omega[0]).ln()).collect();
        if let Some(gamma) = self.structural.gamma() {
            out.extend(gamma.iter().copied());
        } else {
            let cond = self.structural.to_conditional(1);
            out.extend(cond.gamma().expect("conditional").iter().copied());
        }
        out
    }

    /// Checks that the parameters fit a dataset.
    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.measurement.n_items() != data.n_items() {
            return Err(MlcaError::DimensionMismatch(format!(
                "phi has {} items, data has {}",
                self.measurement.n_items(),
                data.n_items()
            )));
        }
        if self.structural.is_conditional() && self.structural.n_covariates() != data.n_covariates() {
            return Err(MlcaError::DimensionMismatch(format!(
                "gamma has {} columns, design has {}",
                self.structural.n_covariates(),
                data.n_covariates()
            )));
        }
        Ok(())
    }
}

/// Log-linear coordinates of the model without covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearParams {
    /// `log(omega_m / omega_0)` for `m >= 1`.
    pub alpha: Array1<f64>,
    /// `(T-1) x M`, entry `[t-1, m] = log(pi_{t|m} / pi_{0|m})`.
    pub gamma: Array2<f64>,
    /// `H x T` logits of the item probabilities.
    pub beta: Array2<f64>,
}

/// Maps probabilities to log-linear coordinates. The flag reports whether any
/// probability had to be clamped away from the boundary first.
pub fn to_loglinear(
    measurement: &MeasurementParams,
    structural: &StructuralParams,
) -> (LogLinearParams, bool) {
    let mut clamped = false;
    let mut guard = |p: f64| {
        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
            clamped = true;
        }
        clamp_prob(p)
    };
    let omega = structural.omega();
    let pi = structural.pi();
    let t_count = structural.n_low();
    let m_count = structural.n_high();

    let w0 = guard(omega[0]);
    let alpha = Array1::from_iter((1..m_count).map(|m| (guard(omega[m]) / w0).ln()));
    let mut gamma = Array2::zeros((t_count - 1, m_count));
    for m in 0..m_count {
        let p0 = guard(pi[[m, 0]]);
        for t in 1..t_count {
            gamma[[t - 1, m]] = (guard(pi[[m, t]]) / p0).ln();
        }
    }
    let beta = measurement.phi().mapv(|p| numeric::logit(guard(p)));
    if clamped {
        log::warn!("boundary probabilities clamped to [{PROB_EPS:e}, 1-{PROB_EPS:e}] before log-linear transform");
    }
    (LogLinearParams { alpha, gamma, beta }, clamped)
}

/// Inverse of [`to_loglinear`].
pub fn from_loglinear(ll: &LogLinearParams) -> Result<(MeasurementParams, StructuralParams)> {
    if ll.gamma.ncols() != ll.alpha.len() + 1 || ll.gamma.nrows() + 1 != ll.beta.ncols() {
        return Err(MlcaError::DimensionMismatch(
            "alpha, gamma and beta disagree on class counts".into(),
        ));
    }
    let m_count = ll.alpha.len() + 1;
    let t_count = ll.beta.ncols();
    let mut omega = vec![0.0];
    omega.extend(ll.alpha.iter().copied());
    numeric::softmax_in_place(&mut omega);

    let mut pi = Array2::zeros((m_count, t_count));
    let mut row = vec![0.0; t_count];
    for m in 0..m_count {
        row[0] = 0.0;
        for t in 1..t_count {
            row[t] = ll.gamma[[t - 1, m]];
        }
        numeric::softmax_in_place(&mut row);
        for t in 0..t_count {
            pi[[m, t]] = row[t];
        }
    }
    let phi = ll.beta.mapv(numeric::inv_logit);
    Ok((
        MeasurementParams::new(phi)?,
        StructuralParams::unconditional(Array1::from(omega), pi)?,
    ))
}

/// Which identification preconditions hold.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct IdentifiabilityReport {
    /// For every item, class-conditional probabilities are pairwise distinct.
    pub distinct_item_probabilities: bool,
    /// `Pi` has rank `M`.
    pub pi_full_rank: bool,
    pub high_not_above_low: bool,
    pub groups_at_least_three: bool,
    /// `None` when no design matrix was supplied.
    pub design_full_rank: Option<bool>,
    pub violations: Vec<String>,
}

impl IdentifiabilityReport {
    pub fn is_identified(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance for distinctness of item probabilities across classes.
pub const DISTINCT_TOL: f64 = 1e-8;

pub fn check_identifiability(
    dims: &ModelDims,
    params: &ModelParams,
    design: Option<ArrayView2<f64>>,
) -> IdentifiabilityReport {
    let mut violations = Vec::new();
    let phi = params.measurement.phi();
    let mut distinct = true;
    for h in 0..phi.nrows() {
        for t in 0..phi.ncols() {
            for s in (t + 1)..phi.ncols() {
                if (phi[[h, t]] - phi[[h, s]]).abs() <= DISTINCT_TOL {
                    distinct = false;
                }
            }
        }
    }
    if !distinct {
        violations.push("(A.1) item probabilities not distinct across low-level classes".into());
    }

    let pi = params.structural.pi();
    let rank = numeric::numerical_rank(&numeric::to_dmatrix(pi.view()));
    let pi_full_rank = rank == dims.n_high;
    if !pi_full_rank {
        violations.push(format!("(A.2) rank(Pi) = {rank} < M = {}", dims.n_high));
    }
    let high_not_above_low = dims.n_high <= dims.n_low;
    if !high_not_above_low {
        violations.push(format!("M = {} exceeds T = {}", dims.n_high, dims.n_low));
    }
    let min_size = dims.group_sizes.iter().copied().min().unwrap_or(0);
    let groups_at_least_three = min_size >= 3;
    if !groups_at_least_three {
        violations.push(format!("smallest group has {min_size} < 3 units"));
    }
    let design_full_rank = design.map(|z| {
        let rank = numeric::numerical_rank(&numeric::to_dmatrix(z));
        let ok = rank == z.ncols();
        if !ok {
            violations.push(format!("design rank {rank} < {} columns", z.ncols()));
        }
        ok
    });
    IdentifiabilityReport {
        distinct_item_probabilities: distinct,
        pi_full_rank,
        high_not_above_low,
        groups_at_least_three,
        design_full_rank,
        violations,
    }
}

/// Numerical rank helper exposed for callers that build their own designs.
pub fn matrix_rank(a: ArrayView2<f64>) -> usize {
    numeric::numerical_rank(&numeric::to_dmatrix(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn params(phi: Array2<f64>, omega: Array1<f64>, pi: Array2<f64>) -> ModelParams {
        ModelParams::new(
            MeasurementParams::new(phi).unwrap(),
            StructuralParams::unconditional(omega, pi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn loglinear_examples() {
        let p = params(
            array![[0.5, 0.7, 0.2]],
            array![0.5, 0.5],
            array![[0.25, 0.25, 0.5], [0.2, 0.3, 0.5]],
        );
        let (ll, clamped) = to_loglinear(&p.measurement, &p.structural);
        assert!(!clamped);
        assert_eq!(ll.alpha[0], 0.0);
        assert_eq!(ll.beta[[0, 0]], 0.0);
        assert!(ll.gamma[[0, 0]].abs() < 1e-15);
        assert!((ll.gamma[[1, 0]] - std::f64::consts::LN_2).abs() < 1e-12);

        let (meas, st) = from_loglinear(&ll).unwrap();
        assert!((st.omega()[0] - 0.5).abs() < 1e-15);
        assert!((meas.phi()[[0, 0]] - 0.5).abs() < 1e-15);
        let pi = st.pi();
        assert!((pi[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((pi[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((pi[[0, 2]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_probability_is_clamped_not_fatal() {
        let p = params(array![[1.0, 0.0]], array![1.0], array![[0.5, 0.5]]);
        let (ll, clamped) = to_loglinear(&p.measurement, &p.structural);
        assert!(clamped);
        assert!(ll.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn identifiability_flags() {
        let dims = ModelDims::new(vec![3, 3], 2, 2, 3, 1).unwrap();
        let p = params(
            array![[0.9, 0.1], [0.8, 0.2]],
            array![0.3, 0.3, 0.4],
            array![[0.5, 0.5], [0.2, 0.8], [0.7, 0.3]],
        );
        let r = check_identifiability(&dims, &p, None);
        assert!(!r.high_not_above_low);
        assert!(!r.is_identified());

        let dims = ModelDims::new(vec![3, 3], 2, 3, 1, 1).unwrap();
        let p = params(
            array![[0.9, 0.9, 0.1], [0.8, 0.8, 0.2]],
            array![1.0],
            array![[0.3, 0.3, 0.4]],
        );
        let r = check_identifiability(&dims, &p, None);
        assert!(!r.distinct_item_probabilities);

        let dims = ModelDims::new(vec![3, 4], 1, 3, 2, 1).unwrap();
        let p = params(
            array![[0.9, 0.5, 0.1]],
            array![0.5, 0.5],
            array![[0.6, 0.3, 0.1], [0.2, 0.3, 0.5]],
        );
        let r = check_identifiability(&dims, &p, None);
        assert!(r.pi_full_rank);
        assert!(r.is_identified());
        assert_eq!(r, check_identifiability(&dims, &p, None));
    }

    #[test]
    fn small_groups_and_design_rank_are_reported() {
        let dims = ModelDims::new(vec![2, 3], 1, 2, 1, 2).unwrap();
        let p = params(array![[0.9, 0.1]], array![1.0], array![[0.4, 0.6]]);
        let z = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let r = check_identifiability(&dims, &p, Some(z.view()));
        assert!(!r.groups_at_least_three);
        assert_eq!(r.design_full_rank, Some(false));
    }

    #[test]
    fn dataset_sorts_rows_into_group_blocks() {
        let y = array![[1u8, 0], [0, 1], [1, 1], [0, 0]];
        let d = Dataset::without_covariates(y, &[2, 1, 2, 1]).unwrap();
        assert_eq!(d.group_sizes(), vec![2, 2]);
        assert_eq!(d.group_labels(), &["1".to_string(), "2".to_string()]);
        assert_eq!(d.original_rows(), &[1, 3, 0, 2]);
        assert_eq!(d.y().row(0).to_vec(), vec![0, 1]);
        assert_eq!(d.group_of_row(), &[0, 0, 1, 1]);
    }

    #[test]
    fn dataset_rejects_non_binary_items() {
        let y = array![[1u8, 2]];
        assert!(Dataset::without_covariates(y, &[0]).is_err());
    }

    #[test]
    fn permuting_conditional_changes_reference() {
        let gamma = array![[0.5, 1.0], [-0.3, 0.2]];
        let st = StructuralParams::conditional(array![1.0], gamma, 3).unwrap();
        // swap classes 0 and 1: new gamma_1 = -old gamma_1, new gamma_2 = old gamma_2 - old gamma_1
        let p = st.permuted(&[1, 0, 2], &[0]);
        let g = p.gamma().unwrap();
        assert!((g[[0, 0]] + 0.5).abs() < 1e-15 && (g[[0, 1]] + 1.0).abs() < 1e-15);
        assert!((g[[1, 0]] + 0.8).abs() < 1e-15 && (g[[1, 1]] + 0.8).abs() < 1e-15);
        let back = p.permuted(&[1, 0, 2], &[0]);
        assert!(back.gamma().unwrap().iter().zip(st.gamma().unwrap().iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.05f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn loglinear_round_trip(
            omega in simplex(3),
            pi0 in simplex(4), pi1 in simplex(4), pi2 in simplex(4),
            phi in proptest::collection::vec(0.01f64..0.99, 5 * 4),
        ) {
            let pi = Array2::from_shape_vec((3, 4), [pi0, pi1, pi2].concat()).unwrap();
            let p = params(Array2::from_shape_vec((5, 4), phi).unwrap(), Array1::from(omega), pi);
            let (ll, _) = to_loglinear(&p.measurement, &p.structural);
            let (meas, st) = from_loglinear(&ll).unwrap();
            let err_phi = (&meas.phi() - &p.measurement.phi()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            let err_pi = (&st.pi() - &p.structural.pi()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            let err_omega = (&st.omega() - &p.structural.omega()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            prop_assert!(err_phi < 1e-12 && err_pi < 1e-12 && err_omega < 1e-12);
            prop_assert!((st.omega().sum() - 1.0).abs() < 1e-12);
            for row in st.pi().rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            let (ll2, _) = to_loglinear(&meas, &st);
            let err = (&ll2.gamma - &ll.gamma).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            prop_assert!(err < 1e-12);
        }
    }
}
