//! CSV ingestion of return or price series and the JSON parameter file.

use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};
use crate::model::{ModelConfig, ObservationSeries, ParameterSet};
use crate::tensor;

/// Which CSV column holds the series: a 1-based index or a header name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelector {
    Index(usize),
    Name(String),
}

impl FromStr for ColumnSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.parse::<usize>() {
            Ok(0) => Err("column indices are 1-based".into()),
            Ok(i) => Ok(ColumnSelector::Index(i)),
            Err(_) if !s.trim().is_empty() => Ok(ColumnSelector::Name(s.trim().to_string())),
            Err(_) => Err("empty column name".into()),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> HmmError {
    HmmError::Io { path: path.display().to_string(), source }
}

fn csv_err(e: csv::Error) -> HmmError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    HmmError::Parse { line, message: e.to_string() }
}

/// Reads one numeric column of a comma-separated file.
///
/// A first row in which no field parses as a number is taken as a header.
/// Without a selector the last column is used. With `prices`, the column is
/// read as closing prices `p_t` and converted to percentage log-returns
/// `100 ln(p_t / p_{t-1})`, giving one value fewer.
pub fn ingest(path: &Path, column: Option<&ColumnSelector>, prices: bool) -> Result<ObservationSeries> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(rows.len() + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, rec));
    }
    let header = match rows.first() {
        Some((_, first)) if first.iter().all(|f| f.parse::<f64>().is_err()) => Some(rows.remove(0).1),
        _ => None,
    };
    if rows.is_empty() {
        return Err(HmmError::EmptySeries);
    }
    let width = header.as_ref().map(|h| h.len()).unwrap_or_else(|| rows[0].1.len());
    let col = match column {
        None => width - 1,
        Some(ColumnSelector::Index(i)) if *i <= width => i - 1,
        Some(ColumnSelector::Index(i)) => {
            return Err(HmmError::Format(format!("column {i} out of range ({width} columns)")))
        }
        Some(ColumnSelector::Name(name)) => header
            .as_ref()
            .and_then(|h| h.iter().position(|f| f.eq_ignore_ascii_case(name)))
            .ok_or_else(|| HmmError::Format(format!("no column named {name:?}")))?,
    };
    let date_col = header
        .as_ref()
        .and_then(|h| h.iter().position(|f| f.eq_ignore_ascii_case("date")));
    let mut values = Vec::with_capacity(rows.len());
    let mut dates = date_col.map(|_| Vec::with_capacity(rows.len()));
    for (line, rec) in &rows {
        let field = rec.get(col).unwrap_or("");
        let v: f64 = field.parse().map_err(|_| HmmError::Parse {
            line: *line,
            message: format!("non-numeric value {field:?} in column {}", col + 1),
        })?;
        if !v.is_finite() {
            return Err(HmmError::Parse { line: *line, message: format!("non-finite value {field:?}") });
        }
        if prices && !(v > 0.0) {
            return Err(HmmError::Parse { line: *line, message: format!("price {v} is not positive") });
        }
        values.push(v);
        if let (Some(d), Some(dc)) = (dates.as_mut(), date_col) {
            d.push(rec.get(dc).unwrap_or("").to_string());
        }
    }
    if prices {
        values = values.windows(2).map(|w| 100.0 * (w[1] / w[0]).ln()).collect();
        if let Some(d) = dates.as_mut() {
            d.remove(0);
        }
    }
    let mut series = ObservationSeries::new(values)?;
    let col_name = header
        .as_ref()
        .and_then(|h| h.get(col).map(str::to_string))
        .unwrap_or_else(|| format!("column {}", col + 1));
    series.label = Some(format!("{}:{}", path.display(), col_name));
    series.dates = dates;
    Ok(series)
}

/// On-disk parameter layout. States are implicit in array positions;
/// `early[t-1]` and `pi` are lists of rows, one per conditioning window in
/// lexicographic order with the latest state fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub k: usize,
    pub h: usize,
    pub sigma: Vec<f64>,
    pub early: Vec<Vec<Vec<f64>>>,
    pub pi: Vec<Vec<f64>>,
}

impl From<&ParameterSet> for ParamsFile {
    fn from(p: &ParameterSet) -> Self {
        let k = p.k();
        let rows = |v: &[f64]| v.chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>();
        ParamsFile {
            k,
            h: p.h(),
            sigma: p.sigma.clone(),
            early: p.early.iter().map(|e| rows(e)).collect(),
            pi: rows(&p.pi),
        }
    }
}

impl TryFrom<ParamsFile> for ParameterSet {
    type Error = HmmError;

    fn try_from(f: ParamsFile) -> Result<Self> {
        let config = ModelConfig::new(f.k, f.h)?;
        let check_rows = |rows: &[Vec<f64>], name: &str, expected: usize| -> Result<()> {
            if rows.len() != expected || rows.iter().any(|r| r.len() != f.k) {
                return Err(HmmError::Format(format!(
                    "{name} must have {expected} rows of {} probabilities",
                    f.k
                )));
            }
            Ok(())
        };
        for (i, e) in f.early.iter().enumerate() {
            check_rows(e, &format!("early[{}]", i + 1), tensor::size(f.k, i))?;
        }
        check_rows(&f.pi, "pi", tensor::size(f.k, f.h))?;
        ParameterSet::new(config, f.early.into_iter().map(|e| e.concat()).collect(), f.pi.concat(), f.sigma)
    }
}

pub fn params_to_json(p: &ParameterSet) -> String {
    serde_json::to_string_pretty(&ParamsFile::from(p)).expect("parameters serialize")
}

pub fn params_from_json(text: &str) -> Result<ParameterSet> {
    let f: ParamsFile = serde_json::from_str(text).map_err(|e| HmmError::Format(format!("parameter file: {e}")))?;
    f.try_into()
}

pub fn read_params(path: &Path) -> Result<ParameterSet> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    params_from_json(&text)
}
