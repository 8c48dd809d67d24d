use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hedgeplan::autodiff::OpTag;
use hedgeplan::checks::{run_suite, CheckOutcome, TOLERANCE};
use hedgeplan::features::{write_context_csv, write_price_csv};
use hedgeplan::synthgen::{generate, preset, PRESET_NAMES};

use crate::error::CliError;

/// Writes `prices.csv`, `context.csv` and `regimes.csv` for a preset.
pub fn cmd_gen_data(name: &str, days: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if !PRESET_NAMES.contains(&name) {
        return Err(CliError::Config(format!("unknown preset `{name}` (have {})", PRESET_NAMES.join(", "))));
    }
    let m = generate(&preset(name)?, days, seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_price_csv(out.join("prices.csv"), &m.prices)?;
    write_context_csv(out.join("context.csv"), &m.context)?;
    let mut regimes = String::from("date,regime\n");
    for (d, r) in m.prices.dates.iter().zip(&m.regimes) {
        let _ = writeln!(regimes, "{d},{r}");
    }
    let p = out.join("regimes.csv");
    fs::write(&p, regimes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub fn format_checks(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in outcomes {
        let _ = writeln!(
            out,
            "{:<width$}  {:.3e}  {}",
            c.name,
            c.worst,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    out
}

/// Runs the gradient-check suite; `fault` flips one backward rule (for
/// checking that the checks bite).
pub fn cmd_gradcheck(seeds: u64, fault: Option<&str>) -> Result<(String, usize), CliError> {
    let tag = match fault {
        Some(name) => Some(OpTag::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op `{name}`")))?),
        None => None,
    };
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let outcomes = run_suite(seeds, tag)?;
    let failed = outcomes.iter().filter(|c| !c.passed()).count();
    let mut text = format_checks(&outcomes);
    let _ = writeln!(
        text,
        "{} of {} checks within {TOLERANCE:e} over {seeds} seeds",
        outcomes.len() - failed,
        outcomes.len()
    );
    Ok((text, failed))
}
