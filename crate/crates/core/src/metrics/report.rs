use std::path::Path;

use crate::error::{Error, Result};

/// One row of `model,window_years,return_ann,sharpe,sortino,max_dd`.
/// Undefined values are written as `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub window_years: f64,
    pub return_ann: Option<f64>,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub max_dd: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

fn parse(raw: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if raw == "NA" {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::Data(format!("{}:{line}: bad number `{raw}`", path.display())))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["model", "window_years", "return_ann", "sharpe", "sortino", "max_dd"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            format!("{}", r.window_years),
            cell(r.return_ann),
            cell(r.sharpe),
            cell(r.sortino),
            cell(r.max_dd),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = i + 2;
        if rec.len() != 6 {
            return Err(Error::Data(format!("{}:{line}: expected 6 fields", path.display())));
        }
        rows.push(MetricsRow {
            model: rec[0].to_string(),
            window_years: parse(&rec[1], path, line)?
                .ok_or_else(|| Error::Data(format!("{}:{line}: window_years is NA", path.display())))?,
            return_ann: parse(&rec[2], path, line)?,
            sharpe: parse(&rec[3], path, line)?,
            sortino: parse(&rec[4], path, line)?,
            max_dd: parse(&rec[5], path, line)?,
        });
    }
    Ok(rows)
}
