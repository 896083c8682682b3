//! Cohort CSV files.
//!
//! The native layout is `id, trunc_time, obs_time, status, w1..wp[, x1..xp]`.
//! Other layouts are read through a [`ColumnMap`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::survival::{validate_cohort, Cohort, SubjectRecord};

/// Which columns hold the entry time, exit time, status and covariates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub trunc_time: String,
    pub obs_time: String,
    pub status: String,
    /// Surrogate columns. Empty means every `w1, w2, …` present.
    pub covariates: Vec<String>,
    /// True-covariate columns. Empty means every `x1, x2, …` present.
    pub truth: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            trunc_time: "trunc_time".into(),
            obs_time: "obs_time".into(),
            status: "status".into(),
            covariates: Vec::new(),
            truth: Vec::new(),
        }
    }
}

impl ColumnMap {
    /// Hospital-stay truncation, total follow-up and vital status, with BMI
    /// and blood pressure as the error-prone covariates.
    pub fn whas() -> Self {
        ColumnMap {
            trunc_time: "los".into(),
            obs_time: "lenfol".into(),
            status: "fstat".into(),
            covariates: vec!["bmi".into(), "bp".into()],
            truth: Vec::new(),
        }
    }

    /// Parse `key=value` pairs separated by commas, e.g.
    /// `trunc_time=los,obs_time=lenfol,status=fstat,covariates=bmi;bp`.
    /// The single word `whas` selects [`ColumnMap::whas`].
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim().eq_ignore_ascii_case("whas") {
            return Ok(Self::whas());
        }
        let mut map = ColumnMap::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("column mapping entry '{part}' lacks '='")))?;
            let v = v.trim().to_string();
            let list = || -> Vec<String> {
                v.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            };
            match k.trim() {
                "trunc_time" => map.trunc_time = v.clone(),
                "obs_time" => map.obs_time = v.clone(),
                "status" => map.status = v.clone(),
                "covariates" => map.covariates = list(),
                "truth" => map.truth = list(),
                other => return Err(Error::Config(format!("unknown column role '{other}'"))),
            }
        }
        Ok(map)
    }
}

fn numbered(headers: &HashMap<String, usize>, prefix: &str) -> Vec<String> {
    (1..)
        .map(|i| format!("{prefix}{i}"))
        .take_while(|name| headers.contains_key(name))
        .collect()
}

fn parse_cell(value: &str, column: &str, line: usize) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| Error::Csv {
        line,
        message: format!("column '{column}': non-numeric value '{value}'"),
    })
}

fn parse_status(value: &str, column: &str, line: usize) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Ok(true),
        "0" | "0.0" | "false" => Ok(false),
        _ => Err(Error::Csv {
            line,
            message: format!("column '{column}': status must be 0 or 1, got '{value}'"),
        }),
    }
}

/// Read a cohort from CSV text with a header row. Row numbers in
/// validation errors are file line numbers, the header being line 1.
pub fn read_cohort_csv<R: Read>(reader: R, map: &ColumnMap) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let index: HashMap<String, usize> = header.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
    let covariates = if map.covariates.is_empty() {
        numbered(&index, "w")
    } else {
        map.covariates.clone()
    };
    let truth = if map.truth.is_empty() {
        numbered(&index, "x")
    } else {
        map.truth.clone()
    };
    if covariates.is_empty() {
        return Err(Error::Csv {
            line: 1,
            message: "no covariate columns".into(),
        });
    }
    let find = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| Error::Csv {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let a_col = find(&map.trunc_time)?;
    let y_col = find(&map.obs_time)?;
    let d_col = find(&map.status)?;
    let w_cols = covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let x_cols = truth.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut subjects = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(subjects.len() + 2, |p| p.line() as usize);
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let a = parse_cell(cell(a_col), &map.trunc_time, line)?;
        let y = parse_cell(cell(y_col), &map.obs_time, line)?;
        let d = parse_status(cell(d_col), &map.status, line)?;
        let w = w_cols
            .iter()
            .zip(&covariates)
            .map(|(&i, name)| parse_cell(cell(i), name, line))
            .collect::<Result<Vec<_>>>()?;
        let mut s = SubjectRecord::new(a, y, d, w);
        if !x_cols.is_empty() {
            let x = x_cols
                .iter()
                .zip(&truth)
                .map(|(&i, name)| parse_cell(cell(i), name, line))
                .collect::<Result<Vec<_>>>()?;
            s = s.with_truth(x);
        }
        subjects.push(s);
        lines.push(line);
    }
    validate_cohort(subjects).map_err(|e| match e {
        Error::Validation(mut v) => {
            for x in &mut v {
                x.row = lines[x.row];
            }
            Error::Validation(v)
        }
        other => other,
    })
}

pub fn load_cohort_csv(path: &Path, map: &ColumnMap) -> Result<Cohort> {
    read_cohort_csv(File::open(path)?, map)
}

/// Write a cohort in the native layout, with `x1..xp` when `with_truth`.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, writer: W, with_truth: bool) -> Result<()> {
    let p = cohort.dim();
    if with_truth && !cohort.has_truth() {
        return Err(Error::InvalidArgument("cohort lacks true covariates".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "trunc_time", "obs_time", "status"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|i| format!("w{i}")));
    if with_truth {
        header.extend((1..=p).map(|i| format!("x{i}")));
    }
    wtr.write_record(&header).map_err(csv_io)?;
    for (i, s) in cohort.subjects().iter().enumerate() {
        let mut row = vec![
            (i + 1).to_string(),
            s.trunc_time.to_string(),
            s.obs_time.to_string(),
            u8::from(s.event).to_string(),
        ];
        row.extend(s.surrogate.iter().map(f64::to_string));
        if with_truth {
            row.extend(s.truth.as_ref().expect("checked above").iter().map(f64::to_string));
        }
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}
