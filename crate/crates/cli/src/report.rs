use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};

use hedgeplan::metrics::{read_metrics_csv, MetricsRow};
use hedgeplan::simulator::{read_path_csv, PortfolioPath};

use crate::error::CliError;
use crate::run::{COMPARISON, RISKY_PATH, WEIGHTS};

pub const VALUE_CHART: &str = "value_chart.svg";
pub const TABLE: &str = "table1.txt";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 800.0;
const H: f64 = 420.0;
const PAD: f64 = 50.0;

/// `(date, model, strategy, weight)` rows of a weights CSV.
fn read_weights(path: &Path) -> Result<Vec<(NaiveDate, String, String, f64)>, CliError> {
    let bad = |line: usize, what: &str| CliError::Data(format!("{}:{line}: {what}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("date,model,strategy,weight") {
        return Err(bad(1, "header must be date,model,strategy,weight"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2, "expected 4 fields"));
            }
            let d = NaiveDate::parse_from_str(f[0], "%Y-%m-%d").map_err(|_| bad(i + 2, "bad date"))?;
            let w: f64 = f[3].parse().map_err(|_| bad(i + 2, "bad weight"))?;
            Ok((d, f[1].to_string(), f[2].to_string(), w))
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

/// One block per window; columns `return, Sortino, Sharpe, max DD`.
pub fn table_text(rows: &[MetricsRow]) -> String {
    let mut windows: Vec<f64> = Vec::new();
    for r in rows {
        if !windows.contains(&r.window_years) {
            windows.push(r.window_years);
        }
    }
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    for (k, w) in windows.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "Trailing {w} years");
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>8}  {:>8}  {:>9}", "model", "return", "Sortino", "Sharpe", "max DD");
        for r in rows.iter().filter(|r| r.window_years == *w) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>8}  {:>8}  {:>9}",
                r.model,
                pct(r.return_ann),
                num(r.sortino),
                num(r.sharpe),
                pct(r.max_dd)
            );
        }
    }
    out
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
}

/// Cumulative value of each model plus the risky asset.
pub fn value_chart(series: &[(String, PortfolioPath)]) -> String {
    let d0 = series.iter().filter_map(|(_, p)| p.dates.first()).min().copied();
    let d1 = series.iter().filter_map(|(_, p)| p.dates.last()).max().copied();
    let (Some(d0), Some(d1)) = (d0, d1) else {
        return String::new();
    };
    let span = ((d1 - d0).num_days().max(1)) as f64;
    let vals = series.iter().flat_map(|(_, p)| p.values.iter().copied());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let x = |d: NaiveDate| PAD + (W - 2.0 * PAD) * (d - d0).num_days() as f64 / span;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut out = String::new();
    svg_open(&mut out, "Cumulative value");
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, PAD - 4.0, y(v) + 4.0);
    }
    for (d, anchor) in [(d0, "start"), (d1, "end")] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{d}</text>"#, x(d), H - PAD + 16.0);
    }
    for (k, (name, p)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = p
            .dates
            .iter()
            .zip(&p.values)
            .map(|(&d, &v)| format!("{:.1},{:.1}", x(d), y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-series="{name}" fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{:.1}" width="10" height="3" fill="{colour}"/><text x="{}" y="{:.1}">{name}</text>"#,
            PAD + 10.0,
            ly - 4.0,
            PAD + 24.0,
            ly
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Stacked bars of each year's mean weight per strategy.
pub fn weights_chart(model: &str, rows: &[(NaiveDate, String, String, f64)]) -> String {
    let mut strategies: Vec<&str> = Vec::new();
    let mut years: BTreeMap<i32, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    for (d, m, s, w) in rows {
        if m != model {
            continue;
        }
        if !strategies.contains(&s.as_str()) {
            strategies.push(s);
        }
        let e = years.entry(d.year()).or_default().entry(s).or_insert((0.0, 0));
        e.0 += w;
        e.1 += 1;
    }
    let mut out = String::new();
    svg_open(&mut out, &format!("Annual mean weights: {model}"));
    let n = years.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v;
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, PAD - 4.0, y(v) + 4.0);
    }
    for (k, (year, by)) in years.iter().enumerate() {
        let x0 = PAD + slot * k as f64 + slot * 0.15;
        let mut base = 0.0;
        for (j, s) in strategies.iter().enumerate() {
            let mean = by.get(s).map_or(0.0, |(sum, c)| sum / *c as f64);
            let _ = writeln!(
                out,
                r#"<rect data-strategy="{s}" x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                y(base + mean),
                slot * 0.7,
                (H - 2.0 * PAD) * mean,
                PALETTE[j % PALETTE.len()]
            );
            base += mean;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{year}</text>"#,
            x0 + slot * 0.35,
            H - PAD + 16.0
        );
    }
    for (j, s) in strategies.iter().enumerate() {
        let lx = PAD + 10.0 + 110.0 * j as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{s}</text>"#,
            H - 20.0,
            PALETTE[j % PALETTE.len()],
            lx + 14.0,
            H - 11.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Renders charts and the comparison table from a results directory;
/// returns the table text. Nothing is written unless every input exists.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let comparison = dir.join(COMPARISON);
    let mut absent: Vec<PathBuf> = [COMPARISON, WEIGHTS, RISKY_PATH]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .collect();
    let rows = if comparison.is_file() { read_metrics_csv(&comparison)? } else { Vec::new() };
    let mut models: Vec<String> = Vec::new();
    for r in &rows {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let path_of = |m: &str| dir.join(format!("stitched_path_{m}.csv"));
    absent.extend(models.iter().map(|m| path_of(m)).filter(|p| !p.is_file()));
    if !absent.is_empty() {
        let list: Vec<String> = absent.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::Data(format!("missing results: {}", list.join(", "))));
    }
    if models.is_empty() {
        return Err(CliError::Data(format!("{} has no rows", comparison.display())));
    }

    let mut series = Vec::with_capacity(models.len() + 1);
    for m in &models {
        series.push((m.clone(), read_path_csv(path_of(m))?));
    }
    series.push(("risky asset".to_string(), read_path_csv(dir.join(RISKY_PATH))?));
    let weights = read_weights(&dir.join(WEIGHTS))?;
    let table = table_text(&rows);

    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    write(VALUE_CHART, &value_chart(&series))?;
    for m in &models {
        write(&format!("weights_{m}.svg"), &weights_chart(m, &weights))?;
    }
    write(TABLE, &table)?;
    Ok(table)
}
