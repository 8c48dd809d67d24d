//! Comparison allocators: risky-only, Markowitz, follow-the-winner and
//! follow-the-loser. All run at fixed leverage through the same simulator
//! as the learned policy.

mod markowitz;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::features::MarketData;
use crate::policy::AllocationDecision;
use crate::simulator::DatedDecision;

pub use markowitz::{estimate_markowitz, markowitz_weights, MarkowitzInput, MAX_ENUMERATED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Risky,
    Markowitz,
    Winner,
    Loser,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Risky,
        BaselineKind::Markowitz,
        BaselineKind::Winner,
        BaselineKind::Loser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Risky => "risky",
            BaselineKind::Markowitz => "markowitz",
            BaselineKind::Winner => "winner",
            BaselineKind::Loser => "loser",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rebalance {
    #[default]
    Annual,
    Monthly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Trailing window (days) for winner/loser scoring.
    pub lookback: usize,
    /// Trailing window (days) for Markowitz estimates.
    pub estimation_window: usize,
    pub rebalance: Rebalance,
    /// Annualised minimum return; defaults to the equal-weight portfolio's
    /// trailing return.
    pub min_return: Option<f64>,
    pub leverage: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lookback: 250,
            estimation_window: 250,
            rebalance: Rebalance::Annual,
            min_return: None,
            leverage: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            bail!(Config, "baseline lookback must be at least 1 day");
        }
        if self.estimation_window < 2 {
            bail!(Config, "estimation window must be at least 2 days");
        }
        if !(self.leverage >= 0.0 && self.leverage.is_finite()) {
            bail!(Config, "baseline leverage must be non-negative, got {}", self.leverage);
        }
        Ok(())
    }
}

/// Compounded return of each strategy over returns days
/// `t + 1 − lookback ..= t`.
pub fn trailing_cumulative(data: &MarketData, t: usize, lookback: usize) -> Result<Vec<f64>> {
    if lookback == 0 || t + 1 < lookback || t >= data.len() {
        bail!(
            Range,
            "need {lookback} days of history ending at index {t}, have {}",
            (t + 1).min(data.len())
        );
    }
    Ok(data
        .strategies
        .iter()
        .map(|s| s.values[t + 1 - lookback..=t].iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0)
        .collect())
}

fn one_hot(l: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; l];
    w[k] = 1.0;
    w
}

/// Index of the largest score; ties go to the lowest index.
pub fn pick_winner(scores: &[f64]) -> usize {
    (1..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best })
}

/// Index of the smallest score; ties go to the lowest index.
pub fn pick_loser(scores: &[f64]) -> usize {
    (1..scores.len()).fold(0, |best, i| if scores[i] < scores[best] { i } else { best })
}

pub fn follow_winner(data: &MarketData, t: usize, lookback: usize) -> Result<Vec<f64>> {
    let cum = trailing_cumulative(data, t, lookback)?;
    Ok(one_hot(cum.len(), pick_winner(&cum)))
}

pub fn follow_loser(data: &MarketData, t: usize, lookback: usize) -> Result<Vec<f64>> {
    let cum = trailing_cumulative(data, t, lookback)?;
    Ok(one_hot(cum.len(), pick_loser(&cum)))
}

/// Returns indices in `first..=last` that open a new rebalance period; the
/// window start always rebalances.
pub fn rebalance_dates(data: &MarketData, first: usize, last: usize, freq: Rebalance) -> Vec<usize> {
    use chrono::Datelike;
    let key = |i: usize| {
        let d = data.dates[i];
        match freq {
            Rebalance::Annual => (d.year(), 0),
            Rebalance::Monthly => (d.year(), d.month()),
        }
    };
    (first..=last)
        .filter(|&i| i == first || key(i) != key(i - 1))
        .collect()
}

/// Dated decisions of a baseline over decision dates `first..=last`.
pub fn baseline_allocator(
    kind: BaselineKind,
    data: &MarketData,
    first: usize,
    last: usize,
    cfg: &BaselineConfig,
) -> Result<Vec<DatedDecision>> {
    if first > last || last >= data.len() {
        bail!(Range, "rebalance window {first}..={last} outside the data (length {})", data.len());
    }
    baseline_decisions_at(kind, data, &rebalance_dates(data, first, last, cfg.rebalance), cfg)
}

/// Decisions of a baseline at the given returns indices, each using data
/// up to its own date only.
pub fn baseline_decisions_at(
    kind: BaselineKind,
    data: &MarketData,
    indices: &[usize],
    cfg: &BaselineConfig,
) -> Result<Vec<DatedDecision>> {
    cfg.validate()?;
    let l = data.strategy_count();
    indices
        .iter()
        .map(|&t| {
            if t >= data.len() {
                bail!(Range, "decision index {t} beyond {} dates", data.len());
            }
            let weights = match kind {
                BaselineKind::Risky => {
                    return Ok(DatedDecision {
                        date: data.dates[t],
                        decision: AllocationDecision::flat(l),
                    })
                }
                BaselineKind::Winner => follow_winner(data, t, cfg.lookback)?,
                BaselineKind::Loser => follow_loser(data, t, cfg.lookback)?,
                BaselineKind::Markowitz => {
                    let input = estimate_markowitz(data, t, cfg.estimation_window, cfg.min_return)?;
                    match markowitz_weights(&input) {
                        Ok(w) => w,
                        Err(Error::Infeasible(msg)) => {
                            log::warn!("{}: {msg}; using the highest-return strategy", data.dates[t]);
                            one_hot(l, pick_winner(&input.mu))
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(DatedDecision {
                date: data.dates[t],
                decision: AllocationDecision {
                    weights,
                    leverage: cfg.leverage,
                },
            })
        })
        .collect()
}

/// Writes `date,model,strategy,weight`, one row per strategy per decision.
pub fn write_weights_csv(path: impl AsRef<Path>, rows: &[(String, Vec<String>, Vec<DatedDecision>)]) -> Result<()> {
    let file = path.as_ref();
    let mut w = csv::Writer::from_path(file).map_err(|e| Error::csv(file, e))?;
    w.write_record(["date", "model", "strategy", "weight"])
        .map_err(|e| Error::csv(file, e))?;
    for (model, names, decisions) in rows {
        for d in decisions {
            for (name, weight) in names.iter().zip(&d.decision.weights) {
                w.write_record([
                    d.date.format("%Y-%m-%d").to_string(),
                    model.clone(),
                    name.clone(),
                    format!("{weight}"),
                ])
                .map_err(|e| Error::csv(file, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(file, e))
}

#[cfg(test)]
mod tests;
