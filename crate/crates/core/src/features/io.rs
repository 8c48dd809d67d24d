use std::path::Path;

use chrono::NaiveDate;

use super::{ContextPanel, PricePanel, Series};
use crate::error::{bail, Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

struct Table {
    names: Vec<String>,
    dates: Vec<NaiveDate>,
    columns: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.get(0) != Some("date") {
        bail!(Data, "{}: first column must be `date`", path.display());
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut columns = vec![Vec::new(); names.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let row = line + 2;
        let raw = record.get(0).unwrap_or_default();
        let date = NaiveDate::parse_from_str(raw, DATE_FORMAT).map_err(|_| {
            Error::Data(format!("{}:{row}: bad date `{raw}` (want YYYY-MM-DD)", path.display()))
        })?;
        dates.push(date);
        for (j, col) in columns.iter_mut().enumerate() {
            let cell = record.get(j + 1).unwrap_or_default();
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}:{row}: column {} holds `{cell}`, not a number",
                        path.display(),
                        names[j]
                    ))
                })?
            };
            col.push(v);
        }
    }
    Ok(Table {
        names,
        dates,
        columns,
    })
}

fn column(table: &Table, name: &str, path: &Path) -> Result<usize> {
    table
        .names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Data(format!("{}: no column named `{name}`", path.display())))
}

/// Reads a price CSV (`date,<name>,…`) keeping the risky column and the
/// listed strategies, in that order.
pub fn read_price_csv(path: impl AsRef<Path>, risky: &str, strategies: &[String]) -> Result<PricePanel> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let mut assets = vec![Series::new(risky, table.columns[column(&table, risky, path)?].clone())];
    for name in strategies {
        assets.push(Series::new(
            name.clone(),
            table.columns[column(&table, name, path)?].clone(),
        ));
    }
    let indices = (1..assets.len()).collect();
    PricePanel::new(table.dates, assets, 0, indices)
}

/// Reads a context CSV; `features` selects and orders the columns (all
/// columns when empty). Missing cells become NaN until alignment.
pub fn read_context_csv(path: impl AsRef<Path>, features: &[String]) -> Result<ContextPanel> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let wanted: Vec<String> = if features.is_empty() {
        table.names.clone()
    } else {
        features.to_vec()
    };
    let series = wanted
        .iter()
        .map(|name| Ok(Series::new(name.clone(), table.columns[column(&table, name, path)?].clone())))
        .collect::<Result<Vec<_>>>()?;
    ContextPanel::new(table.dates, series)
}

fn write_table(path: &Path, dates: &[NaiveDate], series: &[&Series]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["date".to_string()];
    header.extend(series.iter().map(|s| s.name.clone()));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (i, d) in dates.iter().enumerate() {
        let mut row = vec![d.format(DATE_FORMAT).to_string()];
        row.extend(series.iter().map(|s| format!("{}", s.values[i])));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the risky asset first, then the strategies.
pub fn write_price_csv(path: impl AsRef<Path>, panel: &PricePanel) -> Result<()> {
    let mut series = vec![&panel.assets[panel.risky]];
    series.extend(panel.strategies.iter().map(|&s| &panel.assets[s]));
    write_table(path.as_ref(), &panel.dates, &series)
}

pub fn write_context_csv(path: impl AsRef<Path>, panel: &ContextPanel) -> Result<()> {
    let series: Vec<&Series> = panel.series.iter().collect();
    write_table(path.as_ref(), &panel.dates, &series)
}
