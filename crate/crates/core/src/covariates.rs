//! Covariate table ingestion and standardization.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub raw: DMatrix<f64>,
    /// Columns centered and scaled to sample standard deviation 1.
    pub standardized: DMatrix<f64>,
}

impl CovariateTable {
    pub fn from_matrix(raw: DMatrix<f64>, names: Option<Vec<String>>) -> Result<Self> {
        let names = names.unwrap_or_else(|| (1..=raw.ncols()).map(|j| format!("x{j}")).collect());
        if names.len() != raw.ncols() {
            return Err(Error::DimensionMismatch {
                expected: raw.ncols(),
                found: names.len(),
                context: "column names vs columns",
            });
        }
        if !raw.nrows().is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "{} subjects: forced balance needs an even number of rows",
                raw.nrows()
            )));
        }
        let standardized = standardize(&raw, &names)?;
        Ok(CovariateTable {
            names,
            raw,
            standardized,
        })
    }

    pub fn n(&self) -> usize {
        self.raw.nrows()
    }

    pub fn p(&self) -> usize {
        self.raw.ncols()
    }
}

/// Centers each column and divides by its sample (n - 1) standard deviation.
pub fn standardize(raw: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let n = raw.nrows();
    if n < 2 || raw.ncols() == 0 {
        return Err(Error::InvalidDimension(format!(
            "covariate matrix is {n} x {}; need at least 2 rows and 1 column",
            raw.ncols()
        )));
    }
    let mut out = raw.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
        let ss: f64 = col.iter().map(|v| v * v).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(mean.abs());
        if !(sd > 1e-12 * scale) {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
            return Err(Error::Validation(format!(
                "covariate column {} ({name}) is constant",
                j + 1
            )));
        }
        col.iter_mut().for_each(|v| *v /= sd);
        // one more centering pass removes the rounding left by the first
        let resid = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= resid);
    }
    Ok(out)
}

fn sniff_delimiter(text: &str) -> Option<u8> {
    let line = text.lines().find(|l| !l.trim().is_empty())?;
    b",\t;".iter().copied().find(|d| line.as_bytes().contains(d))
}

/// Parses delimited numeric text. Commas, tabs, semicolons or runs of
/// whitespace separate fields; the first data line decides which.
pub fn parse_covariates(text: &str, has_header: bool, source: &Path) -> Result<CovariateTable> {
    let normalized;
    let (body, delim) = match sniff_delimiter(text) {
        Some(d) => (text, d),
        None => {
            normalized = text
                .lines()
                .map(|l| l.split_whitespace().collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join("\n");
            (normalized.as_str(), b',')
        }
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(body.as_bytes());
    let file_err = |message: String| Error::File {
        path: source.to_path_buf(),
        message,
    };
    let names = if has_header {
        let h = reader.headers().map_err(|e| file_err(format!("header: {e}")))?;
        Some(h.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };
    let header_rows = usize::from(has_header);
    let mut values = Vec::new();
    let mut width = names.as_ref().map(Vec::len);
    let mut n = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| file_err(e.to_string()))?;
        let row = i + 1 + header_rows;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Table {
                    path: source.to_path_buf(),
                    row,
                    column: rec.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            let table_err = |message: String| Error::Table {
                path: source.to_path_buf(),
                row,
                column: j + 1,
                message,
            };
            if cell.is_empty() {
                return Err(table_err("missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| table_err(format!("{cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(table_err(format!("{cell:?} is not a finite number")));
            }
            values.push(v);
        }
        n += 1;
    }
    let p = width.unwrap_or(0);
    if n == 0 || p == 0 {
        return Err(file_err("no covariate rows".into()));
    }
    let raw = DMatrix::from_row_slice(n, p, &values);
    CovariateTable::from_matrix(raw, names).map_err(|e| match e {
        Error::Validation(m) | Error::InvalidDimension(m) => file_err(m),
        other => other,
    })
}

pub fn ingest_covariates(path: impl AsRef<Path>, has_header: bool) -> Result<CovariateTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::File {
        path: PathBuf::from(path),
        message: e.to_string(),
    })?;
    parse_covariates(&text, has_header, path)
}

/// Reads a single column of responses (one value per line, optional header).
pub fn read_responses(path: impl AsRef<Path>, has_header: bool) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::File {
        path: PathBuf::from(path),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(usize::from(has_header)) {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| Error::Table {
            path: path.to_path_buf(),
            row: i + 1,
            column: 1,
            message: format!("{cell:?} is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Table {
                path: path.to_path_buf(),
                row: i + 1,
                column: 1,
                message: format!("{cell:?} is not a finite number"),
            });
        }
        out.push(v);
    }
    Ok(out)
}
