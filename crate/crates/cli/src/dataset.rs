//! CSV ingestion: resolve a column map against the header and build the
//! panel dataset and survey design.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use svydid_core::{Fpc, PanelDataset, PanelKind, SurveyDesign};

use crate::errors::{classify, CliError};
use crate::EstimateArgs;

pub struct LoadedData {
    pub data: PanelDataset,
    /// Replicate raw weights per observation row, one inner Vec per column,
    /// in column order; empty when no replicate prefix was given.
    pub replicate_columns: Vec<Vec<f64>>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io(std::io::Error::other(e.to_string())),
            _ => CliError::Parse(e.to_string()),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Parse(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Parse(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(CliError::Parse(format!(
                "row {} has {} fields, header has {}",
                rows.len() + 2,
                rec.len(),
                header.len()
            )));
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(CliError::Parse("no data rows".to_string()));
    }
    Ok(Table { header, rows })
}

impl Table {
    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    }

    fn strings(&self, idx: usize) -> Vec<String> {
        self.rows.iter().map(|r| r[idx].trim().to_string()).collect()
    }

    fn floats(&self, idx: usize, name: &str) -> Result<Vec<f64>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[idx].trim().parse::<f64>().map_err(|_| {
                    CliError::Parse(format!(
                        "column '{name}', row {}: '{}' is not a number",
                        i + 2,
                        &r[idx]
                    ))
                })
            })
            .collect()
    }

    fn ints(&self, idx: usize, name: &str) -> Result<Vec<i64>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = r[idx].trim();
                if v.is_empty() {
                    return Ok(0); // empty first_treat = never treated
                }
                v.parse::<i64>().map_err(|_| {
                    CliError::Parse(format!(
                        "column '{name}', row {}: '{v}' is not an integer",
                        i + 2
                    ))
                })
            })
            .collect()
    }
}

pub fn load(args: &EstimateArgs) -> Result<LoadedData, CliError> {
    let table = read_table(&args.input)?;
    let n = table.rows.len();

    let units = table.strings(table.col(&args.unit)?);
    let period = table.ints(table.col(&args.time)?, &args.time)?;
    let y = table.floats(table.col(&args.outcome)?, &args.outcome)?;
    let first_treat = table.ints(table.col(&args.first_treat)?, &args.first_treat)?;

    let weights = match &args.weights {
        Some(c) => table.floats(table.col(c)?, c)?,
        None => vec![1.0; n],
    };
    let strata: Option<Vec<String>> = match &args.strata {
        Some(c) => Some(table.strings(table.col(c)?)),
        None => None,
    };
    let psu: Option<Vec<String>> = match &args.psu {
        Some(c) => Some(table.strings(table.col(c)?)),
        None => None,
    };
    let fpc_map: Option<HashMap<String, Vec<Fpc>>> = match &args.fpc {
        Some(c) => {
            let stratum_col = strata.as_ref().ok_or_else(|| {
                CliError::Usage("--fpc requires --strata".to_string())
            })?;
            let values = table.floats(table.col(c)?, c)?;
            let mut map: HashMap<String, Vec<Fpc>> = HashMap::new();
            for (label, &v) in stratum_col.iter().zip(values.iter()) {
                let entry = if v <= 1.0 {
                    Fpc::SamplingFraction(v)
                } else {
                    Fpc::PopulationPsus(v)
                };
                map.entry(label.clone()).or_default().push(entry);
            }
            Some(map)
        }
        None => None,
    };

    let design = SurveyDesign::new(
        &weights,
        strata.as_deref(),
        psu.as_deref(),
        true,
        fpc_map.as_ref(),
    )
    .map_err(classify)?;

    let x = match &args.covariates {
        Some(list) => {
            let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                None
            } else {
                let mut m = DMatrix::<f64>::zeros(n, names.len());
                for (j, name) in names.iter().enumerate() {
                    let col = table.floats(table.col(name)?, name)?;
                    for i in 0..n {
                        m[(i, j)] = col[i];
                    }
                }
                Some(m)
            }
        }
        None => None,
    };

    let kind = if args.rcs {
        PanelKind::RepeatedCrossSection
    } else {
        PanelKind::Panel
    };
    let data = PanelDataset::new(&units, &period, &y, &first_treat, x, design, kind)
        .map_err(classify)?;

    let replicate_columns = match &args.rep_prefix {
        Some(prefix) => {
            let mut cols: Vec<(usize, usize)> = Vec::new(); // (suffix number, index)
            for (idx, name) in table.header.iter().enumerate() {
                if let Some(rest) = name.strip_prefix(prefix.as_str()) {
                    if let Ok(k) = rest.parse::<usize>() {
                        cols.push((k, idx));
                    }
                }
            }
            if cols.is_empty() {
                return Err(CliError::MissingColumn(format!("{prefix}<number>")));
            }
            cols.sort();
            let mut out = Vec::with_capacity(cols.len());
            for (_, idx) in cols {
                out.push(table.floats(idx, &table.header[idx].clone())?);
            }
            out
        }
        None => Vec::new(),
    };

    Ok(LoadedData {
        data,
        replicate_columns,
    })
}
