//! CSV input and output of datasets.

use ndarray::Array2;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MlcaError, Result};
use crate::model::Dataset;

/// Which columns of a CSV file play which role.
#[derive(Debug, Clone, Default)]
pub struct CsvLayout {
    pub group_col: String,
    /// `None` takes every column that is neither the group id nor a covariate.
    pub items: Option<Vec<String>>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub item_names: Vec<String>,
    /// Design column names, starting with `intercept`.
    pub covariate_names: Vec<String>,
}

/// Expands a comma-separated list in which `y1..y10` stands for `y1, y2, ..., y10`.
pub fn expand_names(spec: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (pa, na) = split_numeric_suffix(a);
                let (pb, nb) = split_numeric_suffix(b);
                let (Some(na), Some(nb)) = (na, nb) else {
                    return Err(MlcaError::InvalidInput(format!("range `{part}` needs numeric suffixes")));
                };
                if !pb.is_empty() && pb != pa {
                    return Err(MlcaError::InvalidInput(format!("range `{part}` mixes prefixes")));
                }
                if na > nb {
                    return Err(MlcaError::InvalidInput(format!("range `{part}` is decreasing")));
                }
                out.extend((na..=nb).map(|k| format!("{pa}{k}")));
            }
            None => out.push(part.to_string()),
        }
    }
    Ok(out)
}

fn split_numeric_suffix(s: &str) -> (&str, Option<usize>) {
    let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (prefix, digits) = s.split_at(cut);
    (prefix, digits.parse().ok())
}

pub fn parse_csv(path: &Path, layout: &CsvLayout) -> Result<LoadedData> {
    let file = std::fs::File::open(path)
        .map_err(|e| MlcaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_csv_reader(file, layout)
}

/// Reads a header row plus data rows. Row numbers in errors count the header as row 1.
pub fn parse_csv_reader<R: Read>(reader: R, layout: &CsvLayout) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let csv_err = |e: csv::Error| {
        let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
        MlcaError::Csv {
            row,
            column: String::new(),
            message: e.to_string(),
        }
    };
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| {
        index.get(name).copied().ok_or_else(|| MlcaError::Csv {
            row: 1,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    };
    let group_idx = find(&layout.group_col)?;
    let cov_idx: Vec<usize> = layout.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let item_names: Vec<String> = match &layout.items {
        Some(items) => items.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != group_idx && !cov_idx.contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if item_names.is_empty() {
        return Err(MlcaError::InvalidInput("no item columns selected".into()));
    }
    let item_idx: Vec<usize> = item_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    if item_idx.contains(&group_idx) || item_idx.iter().any(|i| cov_idx.contains(i)) {
        return Err(MlcaError::InvalidInput("a column is used in more than one role".into()));
    }

    let mut groups = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = k + 2;
        let cell = |col: usize| -> Result<&str> {
            match record.get(col) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("na") => Ok(v),
                _ => Err(MlcaError::Csv {
                    row,
                    column: header[col].clone(),
                    message: "missing value (missing data is not supported)".into(),
                }),
            }
        };
        groups.push(cell(group_idx)?.to_string());
        for &c in &item_idx {
            let v = cell(c)?;
            let b = match v.parse::<f64>() {
                Ok(0.0) => 0u8,
                Ok(1.0) => 1u8,
                _ => {
                    return Err(MlcaError::Csv {
                        row,
                        column: header[c].clone(),
                        message: format!("item value `{v}` is not 0 or 1"),
                    })
                }
            };
            y.push(b);
        }
        z.push(1.0);
        for &c in &cov_idx {
            let v = cell(c)?;
            let x = v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| MlcaError::Csv {
                row,
                column: header[c].clone(),
                message: format!("covariate value `{v}` is not numeric"),
            })?;
            z.push(x);
        }
    }
    let n = groups.len();
    if n == 0 {
        return Err(MlcaError::InvalidInput("file has no data rows".into()));
    }
    let y = Array2::from_shape_vec((n, item_idx.len()), y).expect("shape");
    let z = Array2::from_shape_vec((n, cov_idx.len() + 1), z).expect("shape");

    // integer ids sort numerically, anything else as text
    let dataset = match groups.iter().map(|g| g.parse::<i64>()).collect::<std::result::Result<Vec<_>, _>>() {
        Ok(ids) => Dataset::new(y, &ids, z)?,
        Err(_) => Dataset::new(y, &groups, z)?,
    };
    for (label, size) in dataset.group_labels().iter().zip(dataset.group_sizes()) {
        if size < 3 {
            log::warn!("group {label} has {size} units; identification needs at least 3 units per group");
        }
    }
    let mut covariate_names = vec!["intercept".to_string()];
    covariate_names.extend(layout.covariates.iter().cloned());
    log::info!(
        "read J={} groups, N={} units, H={} items, K={} design columns",
        dataset.n_groups(),
        dataset.n_units(),
        dataset.n_items(),
        dataset.n_covariates()
    );
    Ok(LoadedData {
        dataset,
        item_names,
        covariate_names,
    })
}

/// Writes the dataset in stored (group-sorted) order; the intercept column is omitted.
pub fn write_dataset_csv<W: Write>(
    writer: W,
    data: &Dataset,
    group_col: &str,
    item_names: &[String],
    covariate_names: &[String],
) -> Result<()> {
    if item_names.len() != data.n_items() || covariate_names.len() + 1 != data.n_covariates() {
        return Err(MlcaError::DimensionMismatch("column names do not match the dataset".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| MlcaError::Io(std::io::Error::other(e));
    let mut header = vec![group_col.to_string()];
    header.extend(item_names.iter().cloned());
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header).map_err(to_io)?;
    let (y, z) = (data.y(), data.z());
    for i in 0..data.n_units() {
        let mut rec = vec![data.group_labels()[data.group_of_row()[i]].clone()];
        rec.extend(y.row(i).iter().map(|v| v.to_string()));
        rec.extend(z.row(i).iter().skip(1).map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
