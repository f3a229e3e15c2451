//! Information criteria, entropy R² and the hierarchical choice of class numbers.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{Level, MlcaError, Result};
use crate::init;
use crate::model::Dataset;
use crate::posterior::Posteriors;
use crate::step1::{self, EmControl, Step1Fit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic_n: f64,
    pub bic_j: f64,
}

pub fn information_criteria(loglik: f64, npar: usize, n_units: usize, n_groups: usize) -> InformationCriteria {
    let p = npar as f64;
    let dev = -2.0 * loglik;
    InformationCriteria {
        aic: dev + 2.0 * p,
        bic_n: dev + p * (n_units as f64).ln(),
        bic_j: dev + p * (n_groups as f64).ln(),
    }
}

/// Free parameters of the model without covariates: `M-1 + M(T-1) + HT`.
pub fn n_parameters(n_items: usize, n_low: usize, n_high: usize) -> usize {
    n_high - 1 + n_high * (n_low - 1) + n_items * n_low
}

fn entropy(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

fn rows_entropy_r2(rows: &ndarray::Array2<f64>) -> Option<f64> {
    let n = rows.nrows();
    if n == 0 || rows.ncols() < 2 {
        return None;
    }
    let shares = rows.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let marginal: f64 = shares.iter().map(|&p| entropy(p)).sum();
    if marginal < 1e-12 {
        return None;
    }
    let observed: f64 = rows.iter().map(|&p| entropy(p)).sum::<f64>() / n as f64;
    Some((1.0 - observed / marginal).clamp(0.0, 1.0))
}

fn entropy_r2_quiet(post: &Posteriors, level: Level) -> Option<f64> {
    match level {
        Level::Low => rows_entropy_r2(&post.low_marginal()),
        Level::High => rows_entropy_r2(&post.u),
    }
}

/// `1 - mean posterior entropy / entropy of the mean posterior`. Units are the
/// base at the low level, groups at the high level.
pub fn entropy_r2(post: &Posteriors, level: Level) -> f64 {
    entropy_r2_quiet(post, level).unwrap_or_else(|| {
        log::warn!("entropy R2 at the {level} level is 0/0 with a single occupied class; reporting 1");
        1.0
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    #[serde(rename = "T")]
    pub n_low: usize,
    #[serde(rename = "M")]
    pub n_high: usize,
    pub loglik: f64,
    pub npar: usize,
    #[serde(rename = "AIC")]
    pub aic: f64,
    #[serde(rename = "BIC_N")]
    pub bic_n: f64,
    #[serde(rename = "BIC_J")]
    pub bic_j: f64,
    pub entropy_r2_low: f64,
    pub entropy_r2_high: f64,
    pub converged: bool,
    /// Set when the fit failed; the criteria are then NaN.
    pub error: Option<String>,
}

impl SelectionRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct SelectionTable {
    /// Sorted by `(T, M)`.
    pub rows: Vec<SelectionRow>,
    /// Low-level class number picked on single-level fits.
    pub phase1_low: usize,
    pub chosen: (usize, usize),
}

impl SelectionTable {
    pub fn get(&self, n_low: usize, n_high: usize) -> Option<&SelectionRow> {
        self.rows.iter().find(|r| r.n_low == n_low && r.n_high == n_high)
    }

    /// Whether the final low-level pass moved away from the single-level choice.
    pub fn low_changed(&self) -> bool {
        self.phase1_low != self.chosen.0
    }
}

/// Multilevel LCA without covariates at `(T, M)`, from the hierarchical start.
pub fn fit_cell(data: &Dataset, n_low: usize, n_high: usize, ctrl: &EmControl) -> Result<Step1Fit> {
    let pooled = init::pooled_fit(data, n_low, ctrl)?;
    fit_cell_from_pooled(data, n_high, ctrl, pooled)
}

fn fit_cell_from_pooled(data: &Dataset, n_high: usize, ctrl: &EmControl, pooled: Step1Fit) -> Result<Step1Fit> {
    let dims = data.dims(pooled.params.n_low(), n_high)?;
    let start = init::hierarchical_init_from_pooled(data, &dims, ctrl, pooled)?;
    step1::fit_unconditional(data, &dims, &start.params, ctrl)
}

fn row_for(data: &Dataset, n_low: usize, n_high: usize, fit: std::result::Result<&Step1Fit, String>) -> SelectionRow {
    let npar = n_parameters(data.n_items(), n_low, n_high);
    match fit {
        Ok(f) => {
            let ll = f.posteriors.loglik;
            let ic = information_criteria(ll, npar, data.n_units(), data.n_groups());
            SelectionRow {
                n_low,
                n_high,
                loglik: ll,
                npar,
                aic: ic.aic,
                bic_n: ic.bic_n,
                bic_j: ic.bic_j,
                entropy_r2_low: entropy_r2_quiet(&f.posteriors, Level::Low).unwrap_or(1.0),
                entropy_r2_high: entropy_r2_quiet(&f.posteriors, Level::High).unwrap_or(1.0),
                converged: f.converged,
                error: None,
            }
        }
        Err(e) => SelectionRow {
            n_low,
            n_high,
            loglik: f64::NAN,
            npar,
            aic: f64::NAN,
            bic_n: f64::NAN,
            bic_j: f64::NAN,
            entropy_r2_low: f64::NAN,
            entropy_r2_high: f64::NAN,
            converged: false,
            error: Some(e),
        },
    }
}

struct Grid<'a> {
    data: &'a Dataset,
    ctrl: &'a EmControl,
    rows: BTreeMap<(usize, usize), SelectionRow>,
    pooled: BTreeMap<usize, std::result::Result<Step1Fit, String>>,
}

impl Grid<'_> {
    /// Fits the cells not yet in the table.
    fn fill(&mut self, cells: &[(usize, usize)]) {
        let todo: Vec<(usize, usize)> = cells.iter().copied().filter(|c| !self.rows.contains_key(c)).collect();
        let inner = EmControl {
            parallel: self.ctrl.parallel && todo.len() == 1,
            ..self.ctrl.clone()
        };
        let mut new_low: Vec<usize> = todo.iter().map(|c| c.0).filter(|t| !self.pooled.contains_key(t)).collect();
        new_low.dedup();
        let pooled_fit = |&t: &usize| (t, init::pooled_fit(self.data, t, &inner).map_err(|e| e.to_string()));
        let pooled: Vec<(usize, std::result::Result<Step1Fit, String>)> = if self.ctrl.parallel && new_low.len() > 1 {
            new_low.par_iter().map(pooled_fit).collect()
        } else {
            new_low.iter().map(pooled_fit).collect()
        };
        self.pooled.extend(pooled);
        let fit = |&(t, m): &(usize, usize)| {
            let f = match &self.pooled[&t] {
                Ok(p) => fit_cell_from_pooled(self.data, m, &inner, p.clone()).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            if let Err(e) = &f {
                log::warn!("selection fit T={t}, M={m} failed: {e}");
            }
            ((t, m), row_for(self.data, t, m, f.as_ref().map_err(|e| e.clone())))
        };
        let done: Vec<((usize, usize), SelectionRow)> = if self.ctrl.parallel && todo.len() > 1 {
            todo.par_iter().map(fit).collect()
        } else {
            todo.iter().map(fit).collect()
        };
        self.rows.extend(done);
    }

    /// Cell with the lowest criterion among the non-failed ones; ties go to fewer classes.
    fn best(&self, cells: &[(usize, usize)], crit: impl Fn(&SelectionRow) -> f64) -> Option<(usize, usize)> {
        cells
            .iter()
            .filter_map(|c| self.rows.get(c).filter(|r| !r.failed()).map(|r| (*c, crit(r))))
            .fold(None, |acc: Option<((usize, usize), f64)>, (c, v)| match acc {
                Some((_, best)) if best <= v => acc,
                _ => Some((c, v)),
            })
            .map(|(c, _)| c)
    }
}

/// Chooses the low-level classes by `BIC_N` on single-level fits, then the
/// high-level classes by `BIC_J`, then revisits the low level with `M` fixed.
pub fn hierarchical_select(
    data: &Dataset,
    low_range: &[usize],
    high_range: &[usize],
    ctrl: &EmControl,
) -> Result<SelectionTable> {
    ctrl.validate()?;
    if low_range.is_empty() || high_range.is_empty() {
        return Err(MlcaError::InvalidInput("class ranges must be non-empty".into()));
    }
    if low_range.contains(&0) || high_range.contains(&0) {
        return Err(MlcaError::InvalidInput("class numbers start at 1".into()));
    }
    let sorted = |r: &[usize]| {
        let mut v = r.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (low_range, high_range) = (sorted(low_range), sorted(high_range));
    let data = data.intercept_only();
    let mut grid = Grid {
        data: &data,
        ctrl,
        rows: BTreeMap::new(),
        pooled: BTreeMap::new(),
    };
    let all_failed = |what: &str| MlcaError::AllStartsFailed {
        starts: 0,
        last: format!("every {what} fit failed"),
    };

    let phase1: Vec<(usize, usize)> = low_range.iter().map(|&t| (t, 1)).collect();
    grid.fill(&phase1);
    let (t1, _) = grid.best(&phase1, |r| r.bic_n).ok_or_else(|| all_failed("single-level"))?;

    let phase2: Vec<(usize, usize)> = high_range.iter().map(|&m| (t1, m)).collect();
    grid.fill(&phase2);
    let (_, m_star) = grid.best(&phase2, |r| r.bic_j).ok_or_else(|| all_failed("high-level"))?;

    let phase3: Vec<(usize, usize)> = low_range.iter().map(|&t| (t, m_star)).collect();
    grid.fill(&phase3);
    let (t_star, _) = grid.best(&phase3, |r| r.bic_n).ok_or_else(|| all_failed("low-level"))?;
    if t_star != t1 {
        log::info!("low-level class number moved from {t1} to {t_star} with M={m_star}");
    }

    Ok(SelectionTable {
        rows: grid.rows.into_values().collect(),
        phase1_low: t1,
        chosen: (t_star, m_star),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn posteriors(u: Array2<f64>, q: Array3<f64>) -> Posteriors {
        let (n, t, m) = q.dim();
        let v = Array3::from_shape_fn((n, t, m), |(i, tt, mm)| q[[i, tt, mm]] * u[[0, mm]]);
        Posteriors {
            u,
            q,
            v,
            loglik: 0.0,
            group_loglik: vec![0.0],
        }
    }

    #[test]
    fn criteria_match_reported_values() {
        let ic = information_criteria(-459295.5, 59, 87_000, 24);
        let n = ((919262.1f64 - 2.0 * 459295.5) / 59.0).exp();
        assert!((n - 87_000.0).abs() / 87_000.0 < 0.01);
        assert!((ic.bic_j - 918778.5).abs() < 0.1);
        assert!(ic.bic_n > ic.bic_j && ic.bic_n > ic.aic);
        assert_eq!(n_parameters(12, 4, 3), 59);
    }

    #[test]
    fn aic_and_bic_orderings() {
        let ic = information_criteria(-100.0, 10, 7, 7);
        assert_eq!(ic.aic, 220.0);
        assert!((ic.bic_n - ic.aic - 10.0 * (7f64.ln() - 2.0)).abs() < 1e-9);
        assert_eq!(ic.bic_j, ic.bic_n);
        assert!(information_criteria(-100.0, 10, 7, 2).bic_j < ic.bic_n);
        assert_eq!(information_criteria(-3.0, 0, 5, 2).aic, 6.0);
    }

    #[test]
    fn entropy_extremes() {
        let u = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let onehot = Array3::from_shape_fn((4, 2, 1), |(i, t, _)| if i % 2 == t { 1.0 } else { 0.0 });
        assert!((entropy_r2(&posteriors(u.clone(), onehot), Level::Low) - 1.0).abs() < 1e-12);
        let flat = Array3::from_shape_fn((4, 2, 1), |(_, t, _)| if t == 0 { 0.3 } else { 0.7 });
        assert!(entropy_r2(&posteriors(u.clone(), flat), Level::Low).abs() < 1e-12);
        let one_class = Array3::from_elem((4, 1, 1), 1.0);
        assert_eq!(entropy_r2(&posteriors(u, one_class), Level::High), 1.0);
    }
}
