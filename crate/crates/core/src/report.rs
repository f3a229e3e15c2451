//! Coefficient tables, posterior exports and class assignments.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{MlcaError, Result};
use crate::estimators::FitResult;
use crate::model::Dataset;
use crate::posterior::Posteriors;

/// `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Two-sided normal p-value of a Wald statistic.
pub fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::standard();
    if z.is_finite() {
        2.0 * normal.sf(z.abs())
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub method: String,
    /// `alpha` or `gamma`.
    pub parameter: String,
    pub high_class: usize,
    /// Zero for `alpha` rows.
    pub low_class: usize,
    pub covariate: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub stars: String,
}

fn make_row(fit: &FitResult, parameter: &str, idx: usize, high: usize, low: usize, covariate: String) -> CoefficientRow {
    let estimate = fit.theta2[idx];
    let se = fit.se[idx];
    let z = if se > 0.0 { estimate / se } else { f64::NAN };
    let p = two_sided_p(z);
    CoefficientRow {
        method: fit.method.to_string(),
        parameter: parameter.to_string(),
        high_class: high,
        low_class: low,
        covariate,
        estimate,
        se,
        z,
        p,
        stars: significance_stars(p).to_string(),
    }
}

/// Index of `gamma[m, t, k]` in `theta2`, classes 0-based, `t >= 1`.
fn gamma_index(fit: &FitResult, m: usize, t: usize, k: usize) -> usize {
    let d = &fit.dims;
    d.n_high - 1 + (m * (d.n_low - 1) + t - 1) * d.n_covariates + k
}

/// One row per structural parameter; class numbers are 1-based.
pub fn coefficient_rows(fit: &FitResult, covariate_names: &[String]) -> Result<Vec<CoefficientRow>> {
    let d = &fit.dims;
    if covariate_names.len() != d.n_covariates {
        return Err(MlcaError::DimensionMismatch(format!(
            "{} covariate names for {} design columns",
            covariate_names.len(),
            d.n_covariates
        )));
    }
    let mut rows = Vec::with_capacity(fit.theta2.len());
    for m in 1..d.n_high {
        rows.push(make_row(fit, "alpha", m - 1, m + 1, 0, String::new()));
    }
    for m in 0..d.n_high {
        for t in 1..d.n_low {
            for (k, name) in covariate_names.iter().enumerate() {
                rows.push(make_row(fit, "gamma", gamma_index(fit, m, t, k), m + 1, t + 1, name.clone()));
            }
        }
    }
    Ok(rows)
}

pub fn write_coefficients_csv<W: Write>(writer: W, fits: &[&FitResult], covariate_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for fit in fits {
        for row in coefficient_rows(fit, covariate_names)? {
            w.serialize(row).map_err(|e| MlcaError::Io(std::io::Error::other(e)))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn estimate_cell(fit: &FitResult, idx: usize) -> String {
    let se = fit.se[idx];
    let z = if se > 0.0 { fit.theta2[idx] / se } else { f64::NAN };
    format!("{:.3}{}", fit.theta2[idx], significance_stars(two_sided_p(z)))
}

/// Logit coefficients laid out in one block per high-level class, one column
/// group per non-reference low-level class, one column per method, and each
/// estimate followed by its standard error in parentheses.
pub fn format_coefficient_table(fits: &[&FitResult], covariate_names: &[String]) -> Result<String> {
    let Some(first) = fits.first() else {
        return Err(MlcaError::InvalidInput("no fits to report".into()));
    };
    let d = &first.dims;
    if fits.iter().any(|f| f.dims.n_low != d.n_low || f.dims.n_high != d.n_high || f.dims.n_covariates != d.n_covariates) {
        return Err(MlcaError::DimensionMismatch("fits in one table must share dimensions".into()));
    }
    if covariate_names.len() != d.n_covariates {
        return Err(MlcaError::DimensionMismatch("covariate names do not match the design".into()));
    }
    let label_w = covariate_names.iter().map(String::len).max().unwrap_or(0).max(9) + 2;
    let cell_w = fits.iter().map(|f| f.method.as_str().len()).max().unwrap_or(0).max(10) + 2;
    let group_w = cell_w * fits.len();
    let rule = "=".repeat(label_w + group_w * (d.n_low - 1));
    let mut out = String::new();
    writeln!(out, "{rule}").unwrap();
    for m in 0..d.n_high {
        if m > 0 {
            writeln!(out, "{}", "-".repeat(rule.len())).unwrap();
        }
        write!(out, "{:<label_w$}", format!("HL {}", m + 1)).unwrap();
        for t in 1..d.n_low {
            write!(out, "{:<group_w$}", format!("LL{}", t + 1)).unwrap();
        }
        writeln!(out).unwrap();
        write!(out, "{:<label_w$}", "").unwrap();
        for _ in 1..d.n_low {
            for f in fits {
                write!(out, "{:<cell_w$}", f.method.as_str()).unwrap();
            }
        }
        writeln!(out).unwrap();
        for (k, name) in covariate_names.iter().enumerate() {
            write!(out, "{name:<label_w$}").unwrap();
            for t in 1..d.n_low {
                for f in fits {
                    write!(out, "{:<cell_w$}", estimate_cell(f, gamma_index(f, m, t, k))).unwrap();
                }
            }
            writeln!(out).unwrap();
            write!(out, "{:<label_w$}", "").unwrap();
            for t in 1..d.n_low {
                for f in fits {
                    write!(out, "{:<cell_w$}", format!("({:.3})", f.se[gamma_index(f, m, t, k)])).unwrap();
                }
            }
            writeln!(out).unwrap();
        }
    }
    writeln!(out, "{rule}").unwrap();
    writeln!(out, "LL1 is the reference class. *** p<0.01, ** p<0.05, * p<0.1.").unwrap();
    Ok(out)
}

fn check_posteriors(data: &Dataset, post: &Posteriors) -> Result<()> {
    if post.q.shape()[0] != data.n_units() || post.u.nrows() != data.n_groups() {
        return Err(MlcaError::DimensionMismatch("posteriors do not belong to this dataset".into()));
    }
    Ok(())
}

/// Per unit: group, input row, marginal low-level posteriors and the group's
/// high-level posteriors.
pub fn write_posteriors_csv<W: Write>(writer: W, data: &Dataset, post: &Posteriors) -> Result<()> {
    check_posteriors(data, post)?;
    let low = post.low_marginal();
    let (t_count, m_count) = (low.ncols(), post.u.ncols());
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| MlcaError::Io(std::io::Error::other(e));
    let mut header = vec!["group".to_string(), "row".to_string()];
    header.extend((1..=t_count).map(|t| format!("p_LL{t}")));
    header.extend((1..=m_count).map(|m| format!("p_HL{m}")));
    w.write_record(&header).map_err(io)?;
    let groups = data.group_of_row();
    for i in 0..data.n_units() {
        let j = groups[i];
        let mut rec = vec![data.group_labels()[j].clone(), (data.original_rows()[i] + 1).to_string()];
        rec.extend(low.row(i).iter().map(|p| format!("{p:.6}")));
        rec.extend(post.u.row(j).iter().map(|p| format!("{p:.6}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Maximum a posteriori classes, 1-based, per unit with its group's class.
pub fn write_map_csv<W: Write>(writer: W, data: &Dataset, post: &Posteriors) -> Result<()> {
    check_posteriors(data, post)?;
    let low = post.map_low();
    let high = post.map_high();
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| MlcaError::Io(std::io::Error::other(e));
    w.write_record(["group", "row", "low_class", "high_class"]).map_err(io)?;
    let groups = data.group_of_row();
    for i in 0..data.n_units() {
        let j = groups[i];
        w.write_record([
            data.group_labels()[j].clone(),
            (data.original_rows()[i] + 1).to_string(),
            (low[i] + 1).to_string(),
            (high[j] + 1).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_thresholds() {
        assert_eq!(significance_stars(0.009), "***");
        assert_eq!(significance_stars(0.01), "**");
        assert_eq!(significance_stars(0.049), "**");
        assert_eq!(significance_stars(0.05), "*");
        assert_eq!(significance_stars(0.099), "*");
        assert_eq!(significance_stars(0.1), "");
    }

    #[test]
    fn normal_p_values() {
        let p = two_sided_p(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-9, "{p:e}");
        assert!((two_sided_p(0.0) - 1.0).abs() < 1e-15);
        assert!((two_sided_p(-2.5758293035489) - 0.01).abs() < 1e-9);
    }
}
