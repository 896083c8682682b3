//! Tables as CSV, JSON or markdown.
//!
//! CSV columns for a [`SummaryRow`] with `p` coordinates:
//! `model, censoring_rate, sigma_eta, method, reps, bias_1..p, var_1..p, mse_1..p, cp_1..p`.
//! For a [`SensitivityRow`]:
//! `model, sigma_e, method, est_1..p, se_1..p, p_value_1..p`.
//! Missing values are empty cells.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sensitivity::SensitivityRow;
use super::simulate::SummaryRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        })
    }
}

/// A row type with a fixed column layout.
pub trait Tabular {
    /// Column names for rows with `p` coordinates.
    fn columns(p: usize) -> Vec<String>;
    fn dim(&self) -> usize;
    /// Cells at full precision.
    fn cells(&self) -> Vec<String>;
    /// Cells rounded for reading.
    fn display_cells(&self) -> Vec<String>;
}

fn indexed(name: &str, p: usize) -> impl Iterator<Item = String> + '_ {
    (1..=p).map(move |j| format!("{name}_{j}"))
}

fn full(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}

fn short(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| format!("{x:.3}"))
}

impl Tabular for SummaryRow {
    fn columns(p: usize) -> Vec<String> {
        let mut c: Vec<String> = ["model", "censoring_rate", "sigma_eta", "method", "reps"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for name in ["bias", "var", "mse", "cp"] {
            c.extend(indexed(name, p));
        }
        c
    }

    fn dim(&self) -> usize {
        self.bias.len()
    }

    fn cells(&self) -> Vec<String> {
        let mut c = vec![
            self.model.to_string(),
            self.censoring_rate.to_string(),
            self.sigma_eta.to_string(),
            self.method.to_string(),
            self.reps.to_string(),
        ];
        c.extend(full(&self.bias));
        c.extend(full(&self.var));
        c.extend(full(&self.mse));
        match &self.cp {
            Some(cp) => c.extend(full(cp)),
            None => c.extend(std::iter::repeat_n(String::new(), self.dim())),
        }
        c
    }

    fn display_cells(&self) -> Vec<String> {
        let mut c = vec![
            self.model.to_string(),
            format!("{:.0}%", 100.0 * self.censoring_rate),
            self.sigma_eta.to_string(),
            self.method.to_string(),
            self.reps.to_string(),
        ];
        c.extend(short(&self.bias));
        c.extend(short(&self.var));
        c.extend(short(&self.mse));
        match &self.cp {
            Some(cp) => c.extend(cp.iter().map(|x| format!("{x:.1}"))),
            None => c.extend(std::iter::repeat_n("-".to_string(), self.dim())),
        }
        c
    }
}

impl Tabular for SensitivityRow {
    fn columns(p: usize) -> Vec<String> {
        let mut c: Vec<String> = ["model", "sigma_e", "method"].iter().map(|s| s.to_string()).collect();
        for name in ["est", "se", "p_value"] {
            c.extend(indexed(name, p));
        }
        c
    }

    fn dim(&self) -> usize {
        self.est.len()
    }

    fn cells(&self) -> Vec<String> {
        let mut c = vec![
            self.model.to_string(),
            self.sigma_e.map(|s| s.to_string()).unwrap_or_default(),
            self.method.to_string(),
        ];
        c.extend(full(&self.est));
        c.extend(full(&self.se));
        c.extend(full(&self.p_value));
        c
    }

    fn display_cells(&self) -> Vec<String> {
        let mut c = vec![
            self.model.to_string(),
            self.sigma_e.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into()),
            self.method.to_string(),
        ];
        c.extend(short(&self.est));
        c.extend(short(&self.se));
        c.extend(short(&self.p_value));
        c
    }
}

fn render_csv<T: Tabular>(rows: &[T], p: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(T::columns(p)).map_err(fail)?;
    for r in rows {
        w.write_record(r.cells()).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn render_markdown<T: Tabular>(rows: &[T], p: usize) -> String {
    let cols = T::columns(p);
    let mut out = format!("| {} |\n", cols.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(cols.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.display_cells().join(" | ")));
    }
    out
}

pub fn render_report<T: Tabular + Serialize>(rows: &[T], format: ReportFormat) -> Result<String> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("report has no rows".into()))?;
    let p = first.dim();
    if rows.iter().any(|r| r.dim() != p) {
        return Err(Error::InvalidArgument("report rows differ in dimension".into()));
    }
    match format {
        ReportFormat::Csv => render_csv(rows, p),
        ReportFormat::Markdown => Ok(render_markdown(rows, p)),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn emit_report<T: Tabular + Serialize>(rows: &[T], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(rows, format)?;
    std::fs::write(path, text)?;
    Ok(())
}
